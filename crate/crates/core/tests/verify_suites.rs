use metalora_core::verify::{run_verify, suite_names, Mutation, VerifyOptions};

#[test]
fn every_suite_passes_on_the_unmodified_library() {
    let report = run_verify(&VerifyOptions::default()).unwrap();
    assert!(report.passed, "{}", report.to_text());
    assert_eq!(report.suites.len(), suite_names().len());
}

#[test]
fn tr_sign_flip_is_caught_by_the_tr_suite_only() {
    let report = run_verify(&VerifyOptions {
        filter: Some("adapters".into()),
        mutation: Some(Mutation::TrSignFlip),
    })
    .unwrap();
    assert!(!report.passed);
    let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
    assert_eq!(failed, ["adapters.meta_tr_bruteforce"]);
    assert_eq!(report.first_failure().unwrap().name, "adapters.meta_tr_bruteforce");
}

#[test]
fn filter_restricts_to_one_module() {
    let report = run_verify(&VerifyOptions {
        filter: Some("tensor_core".into()),
        mutation: None,
    })
    .unwrap();
    assert!(report.suites.iter().all(|s| s.name.starts_with("tensor_core.")));
    assert_eq!(report.suites.len(), 6);
}

#[test]
fn report_round_trips_through_json() {
    let report = run_verify(&VerifyOptions {
        filter: Some("adapters.param_count".into()),
        mutation: None,
    })
    .unwrap();
    let text = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<metalora_core::verify::VerifyReport>(&text).unwrap(), report);
}
