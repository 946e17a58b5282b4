//! Self-verification: every oracle-equivalence, gradient and determinism
//! suite of the library, runnable as one report.

pub mod oracles;
mod suites;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{meta_tr_delta, AdapterError, MetaTRAdapter};
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("no suite matches filter {0:?}")]
    UnknownFilter(String),
}

/// Deliberate defects used to confirm that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Negates the matrix tensor-ring delta.
    TrSignFlip,
}

impl Mutation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tr-sign-flip" => Some(Self::TrSignFlip),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Module name (`tensor_core`) or full suite name.
    pub filter: Option<String>,
    pub mutation: Option<Mutation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub criterion: u8,
    pub cases: usize,
    pub tolerance: f64,
    pub max_error: f64,
    pub passed: bool,
    /// First failing case.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mutation: Option<Mutation>,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn first_failure(&self) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| !s.passed)
    }

    pub fn to_text(&self) -> String {
        let width = self.suites.iter().map(|s| s.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  crit  cases  max error   tolerance  status\n", "suite");
        for s in &self.suites {
            out.push_str(&format!(
                "{:<width$}  {:>4}  {:>5}  {:>9.3e}  {:>10.1e}  {}\n",
                s.name,
                s.criterion,
                s.cases,
                s.max_error,
                s.tolerance,
                if s.passed { "PASS" } else { "FAIL" }
            ));
        }
        match self.first_failure() {
            Some(s) => out.push_str(&format!(
                "FAILED: {} ({})\n",
                s.name,
                s.failure.as_deref().unwrap_or("tolerance exceeded")
            )),
            None => out.push_str(&format!("all {} suites passed\n", self.suites.len())),
        }
        out
    }
}

type TrDelta = fn(&MetaTRAdapter, &DenseTensor) -> Result<DenseTensor, AdapterError>;

/// Library entry points the suites exercise, swappable for mutations.
pub(crate) struct Kernels {
    pub meta_tr_delta: TrDelta,
}

fn flipped_tr_delta(ad: &MetaTRAdapter, c: &DenseTensor) -> Result<DenseTensor, AdapterError> {
    meta_tr_delta(ad, c).map(|d| d.scale(-1.0))
}

impl Kernels {
    fn new(mutation: Option<Mutation>) -> Self {
        Self {
            meta_tr_delta: match mutation {
                Some(Mutation::TrSignFlip) => flipped_tr_delta,
                None => meta_tr_delta,
            },
        }
    }
}

/// Names of all suites in run order.
pub fn suite_names() -> Vec<&'static str> {
    suites::ALL.iter().map(|s| s.name).collect()
}

fn selected(name: &str, filter: &str) -> bool {
    name == filter || name.strip_prefix(filter).is_some_and(|rest| rest.starts_with('.'))
}

/// Runs the selected suites sequentially in a fixed order.
pub fn run_verify(options: &VerifyOptions) -> Result<VerifyReport, VerifyError> {
    let kernels = Kernels::new(options.mutation);
    let chosen: Vec<&suites::Suite> = suites::ALL
        .iter()
        .filter(|s| options.filter.as_deref().is_none_or(|f| selected(s.name, f)))
        .collect();
    if chosen.is_empty() {
        return Err(VerifyError::UnknownFilter(options.filter.clone().unwrap_or_default()));
    }
    let reports: Vec<SuiteReport> = chosen.iter().map(|s| s.run(&kernels)).collect();
    Ok(VerifyReport {
        passed: reports.iter().all(|r| r.passed),
        mutation: options.mutation,
        suites: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_matches_module_prefix_only() {
        assert!(selected("tensor_core.dummy_law", "tensor_core"));
        assert!(selected("tensor_core.dummy_law", "tensor_core.dummy_law"));
        assert!(!selected("tensor_core.dummy_law", "tensor"));
        assert!(matches!(
            run_verify(&VerifyOptions { filter: Some("nope".into()), mutation: None }),
            Err(VerifyError::UnknownFilter(_))
        ));
    }

    #[test]
    fn suite_names_are_unique_and_namespaced() {
        let names = suite_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        for n in names {
            let module = n.split('.').next().unwrap();
            assert!(["tensor_core", "adapters", "meta_net", "training"].contains(&module), "{n}");
        }
    }
}
