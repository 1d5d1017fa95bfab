use std::path::Path;
use std::time::Instant;

use psbayes_core::sim::{run_study, MethodOutcome, MetricsRow, ReplicationRecord, StudyConfig, PRESETS};
use serde::Serialize;

use crate::doc::{Body, ResultDocument, SimulateResult, Timestamp, SCHEMA_VERSION};
use crate::{emit_document, now_unix, tool_name, CliError, SimulateArgs};

pub fn run(args: &SimulateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = now_unix();
    let mut study = StudyConfig::preset(&args.preset).ok_or_else(|| {
        CliError::usage(format!("unknown preset '{}'; available: {}", args.preset, PRESETS.join(", ")))
    })?;
    if let Some(r) = args.replications {
        study.replications = r;
    }
    if let Some(k) = args.kmax {
        study.run.k_max = k;
    }
    if let Some(labels) = &args.methods {
        let known: Vec<String> = study.methods.iter().map(|m| m.label()).collect();
        if let Some(bad) = labels.iter().find(|l| !known.contains(l)) {
            return Err(CliError::usage(format!("unknown method label '{bad}'; available: {}", known.join(", "))));
        }
        study.methods.retain(|m| labels.contains(&m.label()));
    }
    args.sampler.apply(&mut study.run);
    study.run.base_seed = args.seed;
    if args.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }

    let out = run_study(&study, args.seed, args.jobs)?;

    let mut warnings = Vec::new();
    if out.clamp_rate > 0.0 {
        warnings.push(format!("{:.4}% of generated propensities were clamped", 100.0 * out.clamp_rate));
    }
    for row in &out.rows {
        if row.failed > 0 {
            warnings.push(format!("{}: {} replications failed and were excluded", row.label, row.failed));
        }
    }
    let rejected: usize = out
        .replications
        .iter()
        .flat_map(|r| &r.outcomes)
        .map(|o| match o {
            MethodOutcome::Ok(e) => e.invalid_resamples,
            MethodOutcome::Failed { .. } => 0,
        })
        .sum();
    if rejected > 0 {
        warnings.push(format!("{rejected} propensity draws gave invalid designs and were rejected"));
    }

    let metrics = (study.replications > 1).then(|| out.rows.clone());
    if let (Some(path), Some(rows)) = (&args.metrics, &metrics) {
        write_metrics_csv(path, &study.name, rows)?;
    }
    if let Some(path) = &args.raw {
        write_long_csv(path, &[(&study, &out.replications)])?;
    }
    if let Some(path) = &args.kpost {
        write_csv_rows(path, &kpost_rows(&study, &out.replications))?;
    }

    let doc = ResultDocument {
        schema_version: SCHEMA_VERSION,
        tool: tool_name(),
        timestamp: Timestamp {
            started_unix,
            runtime_seconds: started.elapsed().as_secs_f64(),
        },
        seed: args.seed,
        warnings,
        body: Body::Simulate(SimulateResult {
            study,
            clamp_rate: out.clamp_rate,
            metrics,
            replications: out.replications,
        }),
    };
    emit_document(&doc, args.out.as_deref())
}

#[derive(Serialize)]
struct MetricsCsvRow<'a> {
    study: &'a str,
    method: String,
    scores: &'static str,
    k: String,
    label: &'a str,
    mean: Option<f64>,
    ese: Option<f64>,
    rmse: Option<f64>,
    cp: Option<f64>,
    replications: usize,
    failed: usize,
    mean_k: Option<f64>,
}

pub fn write_metrics_csv(path: &Path, study: &str, rows: &[MetricsRow]) -> Result<(), CliError> {
    write_metrics_csv_multi(path, &[(study, rows)])
}

pub fn write_metrics_csv_multi(path: &Path, groups: &[(&str, &[MetricsRow])]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::write(path, e))?;
    for (study, rows) in groups {
        for row in rows.iter() {
            let m = row.metrics;
            w.serialize(MetricsCsvRow {
                study,
                method: row.method.tag.to_string(),
                scores: match row.method.scores {
                    psbayes_core::sim::ScoreKind::Known => "known",
                    psbayes_core::sim::ScoreKind::Estimated => "estimated",
                },
                k: match (row.method.tag, row.method.k) {
                    (psbayes_core::baselines::MethodTag::Ipw, _) => "-".into(),
                    (_, Some(k)) => k.to_string(),
                    (_, None) => "select".into(),
                },
                label: &row.label,
                mean: m.map(|m| m.mean),
                ese: m.map(|m| m.ese),
                rmse: m.map(|m| m.rmse),
                cp: m.map(|m| m.cp),
                replications: m.map_or(0, |m| m.replications),
                failed: row.failed,
                mean_k: row.mean_k,
            })
            .map_err(|e| CliError::write(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::write(path, e))
}

#[derive(Serialize)]
struct LongRow<'a> {
    study: &'a str,
    n: usize,
    replication: usize,
    label: String,
    status: &'static str,
    tau_hat: Option<f64>,
    se: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    k: Option<usize>,
    error: Option<&'a str>,
}

/// One row per replication and method; the boxplot data of a study.
pub fn write_long_csv(path: &Path, groups: &[(&StudyConfig, &Vec<ReplicationRecord>)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::write(path, e))?;
    for (study, reps) in groups {
        for rep in reps.iter() {
            for (method, outcome) in study.methods.iter().zip(&rep.outcomes) {
                let row = match outcome {
                    MethodOutcome::Ok(e) => LongRow {
                        study: &study.name,
                        n: study.dgp.n,
                        replication: rep.replication,
                        label: method.label(),
                        status: "ok",
                        tau_hat: Some(e.tau_hat),
                        se: Some(e.se),
                        ci_low: Some(e.ci_low),
                        ci_high: Some(e.ci_high),
                        k: e.k,
                        error: None,
                    },
                    MethodOutcome::Failed { error } => LongRow {
                        study: &study.name,
                        n: study.dgp.n,
                        replication: rep.replication,
                        label: method.label(),
                        status: "failed",
                        tau_hat: None,
                        se: None,
                        ci_low: None,
                        ci_high: None,
                        k: None,
                        error: Some(error),
                    },
                };
                w.serialize(row).map_err(|e| CliError::write(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::write(path, e))
}

#[derive(Serialize)]
pub struct KPostRow {
    pub source: String,
    pub label: String,
    pub replication: usize,
    pub k: usize,
    pub probability: f64,
}

/// Posterior of K for every reversible-jump outcome of a study.
pub fn kpost_rows(study: &StudyConfig, reps: &[ReplicationRecord]) -> Vec<KPostRow> {
    let mut rows = Vec::new();
    for rep in reps {
        for (method, outcome) in study.methods.iter().zip(&rep.outcomes) {
            if let MethodOutcome::Ok(e) = outcome {
                for &(k, probability) in e.k_posterior.iter().flatten() {
                    rows.push(KPostRow {
                        source: study.name.clone(),
                        label: method.label(),
                        replication: rep.replication,
                        k,
                        probability,
                    });
                }
            }
        }
    }
    rows
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::write(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::write(path, e))?;
    }
    w.flush().map_err(|e| CliError::write(path, e))
}
