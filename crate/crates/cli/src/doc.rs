//! Result documents written by `fit` and `simulate` and read back by `report`.

use psbayes_core::sim::{MethodEstimate, MetricsRow, ReplicationRecord, StudyConfig};
use psbayes_core::{Estimand, RunConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub tool: String,
    /// Wall-clock information; the only part of a document that varies between identical runs.
    pub timestamp: Timestamp,
    pub seed: u64,
    pub warnings: Vec<String>,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timestamp {
    pub started_unix: u64,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Body {
    Fit(FitResult),
    Simulate(SimulateResult),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub method: String,
    pub estimand: Estimand,
    pub k: Option<usize>,
    /// "estimated" or "known".
    pub scores: String,
    pub scores_file: Option<String>,
    pub input: String,
    pub n: usize,
    pub p: usize,
    pub n_boot: usize,
    pub run: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    pub share: f64,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub tau: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub config: FitConfig,
    pub estimate: MethodEstimate,
    /// Effect posterior within each visited K (reversible-jump sampler only).
    pub posterior_by_k: Option<Vec<KSummary>>,
    pub acceptance_rate: Option<f64>,
    pub trace: Option<Vec<TraceRow>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateResult {
    pub study: StudyConfig,
    pub clamp_rate: f64,
    /// Absent for single-replication runs.
    pub metrics: Option<Vec<MetricsRow>>,
    pub replications: Vec<ReplicationRecord>,
}

impl ResultDocument {
    /// Rejects documents carrying NaN or infinite values.
    pub fn check_finite(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let mut check = |what: &str, v: f64| {
            if !v.is_finite() {
                bad.push(what.to_string());
            }
        };
        match &self.body {
            Body::Fit(f) => {
                let e = &f.estimate;
                for (name, v) in [("tau_hat", e.tau_hat), ("se", e.se), ("ci_low", e.ci_low), ("ci_high", e.ci_high)] {
                    check(name, v);
                }
                for s in f.posterior_by_k.iter().flatten() {
                    for v in [s.share, s.mean, s.sd, s.ci_low, s.ci_high] {
                        check("posterior_by_k", v);
                    }
                }
                for t in f.trace.iter().flatten() {
                    check("trace", t.tau);
                }
            }
            Body::Simulate(s) => {
                check("clamp_rate", s.clamp_rate);
                for row in s.metrics.iter().flatten() {
                    if let Some(m) = row.metrics {
                        for v in [m.mean, m.ese, m.rmse, m.cp] {
                            check(&row.label, v);
                        }
                    }
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            bad.dedup();
            Err(CliError::numerical(format!("non-finite values in result: {}", bad.join(", "))))
        }
    }
}

/// Parses a document, refusing other schema versions.
pub fn parse_document(text: &str, source: &str) -> Result<ResultDocument, CliError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::data(format!("{source}: not a result document: {e}")))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(CliError::data(format!(
                "{source}: schema version {v} does not match supported version {SCHEMA_VERSION}"
            )))
        }
        None => return Err(CliError::data(format!("{source}: missing schema_version"))),
    }
    serde_json::from_value(value).map_err(|e| CliError::data(format!("{source}: {e}")))
}
