//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p metalora-cli --test acceptance -- --nocapture`

use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use metalora_cli::config::{Overrides, RunConfig};
use metalora_core::training::{run_comparison, VariantKind};
use metalora_core::verify::{run_verify, suite_names, SuiteReport, VerifyOptions};

struct Outcome {
    criterion: u8,
    passed: bool,
    detail: String,
}

fn timed_suites() -> Vec<(SuiteReport, Duration)> {
    suite_names()
        .iter()
        .map(|name| {
            let start = Instant::now();
            let report = run_verify(&VerifyOptions { filter: Some((*name).to_owned()), mutation: None })
                .expect("known suite name");
            assert_eq!(report.suites.len(), 1);
            (report.suites.into_iter().next().unwrap(), start.elapsed())
        })
        .collect()
}

fn suite_criterion(criterion: u8, suites: &[(SuiteReport, Duration)], limit: Option<Duration>) -> Outcome {
    let mine: Vec<_> = suites.iter().filter(|(s, _)| s.criterion == criterion).collect();
    let elapsed: Duration = mine.iter().map(|(_, d)| *d).sum();
    let failed: Vec<&str> = mine.iter().filter(|(s, _)| !s.passed).map(|(s, _)| s.name.as_str()).collect();
    let within = limit.is_none_or(|l| elapsed < l);
    let parts: Vec<String> = mine
        .iter()
        .map(|(s, _)| format!("{} {} cases max {:.1e} (tol {:.0e})", s.name, s.cases, s.max_error, s.tolerance))
        .collect();
    let mut detail = format!("{:.2?}; {}", elapsed, parts.join("; "));
    if !failed.is_empty() {
        detail = format!("failed {}; {detail}", failed.join(", "));
    }
    if let Some(l) = limit {
        detail.push_str(&format!("; limit {l:?}"));
    }
    Outcome { criterion, passed: !mine.is_empty() && failed.is_empty() && within, detail }
}

fn desk_comparison() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_comparison.json");
    let cfg = RunConfig::load(&path, &Overrides::default()).expect("desk config");
    let start = Instant::now();
    let table = run_comparison(&cfg.comparison()).expect("comparison runs");
    let elapsed = start.elapsed();
    let knn5 = |kind: VariantKind| {
        let v = table.variants.iter().find(|v| v.spec.kind == kind).expect("arm present");
        (v.name.clone(), v.rows.iter().find(|r| r.k == 5).expect("K=5 row").mean, v.param_count)
    };
    let original = knn5(VariantKind::Original);
    let adapters: Vec<_> =
        [VariantKind::Lora, VariantKind::MultiLora, VariantKind::MetaCp, VariantKind::MetaTr].map(knn5).into();
    let statics = &adapters[..2];
    let metas = &adapters[2..];
    let a = adapters.iter().all(|(_, m, _)| *m >= original.1);
    let budgets_match = metas.iter().all(|(_, _, pm)| {
        statics.iter().all(|(_, _, ps)| (*pm as f64 - *ps as f64).abs() <= cfg.budget_tolerance * *ps as f64)
    });
    let best_static = statics.iter().map(|(_, m, _)| *m).fold(f64::NEG_INFINITY, f64::max);
    let b = budgets_match && metas.iter().any(|(_, m, _)| *m >= best_static);
    let means: Vec<String> = std::iter::once(&original)
        .chain(&adapters)
        .map(|(n, m, p)| format!("{n} {:.2}% ({p} params)", 100.0 * m))
        .collect();
    Outcome {
        criterion: 8,
        passed: a && b,
        detail: format!(
            "(a) {} (b) {}{}; KNN@5 over {} seeds: {}; {elapsed:.1?}",
            if a { "ok" } else { "FAIL" },
            if b { "ok" } else { "FAIL" },
            if budgets_match { "" } else { " [budgets differ]" },
            cfg.seeds.len(),
            means.join(", ")
        ),
    }
}

fn verify_binary() -> Outcome {
    let run = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_metalora"))
            .arg("verify")
            .args(extra)
            .output()
            .expect("binary runs")
    };
    let clean = run(&[]);
    let mutated = run(&["--inject-mutation", "tr-sign-flip"]);
    let stderr = String::from_utf8_lossy(&mutated.stderr);
    let passed = clean.status.success() && !mutated.status.success() && stderr.contains("meta_tr");
    Outcome {
        criterion: 9,
        passed,
        detail: format!(
            "clean exit {:?}, mutated exit {:?}: {}",
            clean.status.code(),
            mutated.status.code(),
            stderr.trim()
        ),
    }
}

#[test]
fn acceptance() {
    let suites = timed_suites();
    let mut outcomes = vec![
        suite_criterion(1, &suites, Some(Duration::from_secs(30))),
        suite_criterion(2, &suites, None),
        suite_criterion(3, &suites, None),
        suite_criterion(4, &suites, None),
        suite_criterion(5, &suites, Some(Duration::from_secs(120))),
        suite_criterion(6, &suites, None),
        suite_criterion(7, &suites, None),
    ];
    outcomes.push(desk_comparison());
    outcomes.push(verify_binary());
    for o in &outcomes {
        println!("{} criterion {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.criterion, o.detail);
    }
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.criterion).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
