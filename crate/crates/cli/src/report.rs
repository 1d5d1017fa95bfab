use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use psbayes_core::sim::{aggregate, ReplicationRecord, StudyConfig, StudyOutput};

use crate::doc::{parse_document, Body, FitResult, ResultDocument};
use crate::simulate::{kpost_rows, write_csv_rows, write_long_csv, write_metrics_csv_multi, KPostRow};
use crate::{CliError, ReportArgs};

struct Merged {
    study: StudyConfig,
    output: StudyOutput,
    sources: Vec<String>,
}

pub fn run(args: &ReportArgs) -> Result<(), CliError> {
    let docs = load(&args.files)?;

    let mut studies: BTreeMap<String, (StudyConfig, Vec<ReplicationRecord>, Vec<String>, Vec<u64>)> = BTreeMap::new();
    let mut fits: Vec<(String, &FitResult)> = Vec::new();
    let mut notes = Vec::new();
    for (source, doc) in &docs {
        match &doc.body {
            Body::Simulate(s) => {
                let entry = studies
                    .entry(s.study.name.clone())
                    .or_insert_with(|| (s.study.clone(), Vec::new(), Vec::new(), Vec::new()));
                if !same_setup(&entry.0, &s.study) {
                    return Err(CliError::data(format!(
                        "{source}: study '{}' was run with a different configuration than {}",
                        s.study.name,
                        entry.2.join(", ")
                    )));
                }
                if entry.3.contains(&doc.seed) {
                    notes.push(format!("{source}: seed {} repeats an earlier document of '{}'", doc.seed, s.study.name));
                }
                let offset = entry.1.len();
                entry.1.extend(s.replications.iter().cloned().map(|mut r| {
                    r.replication += offset;
                    r
                }));
                entry.2.push(source.clone());
                entry.3.push(doc.seed);
            }
            Body::Fit(f) => fits.push((source.clone(), f)),
        }
    }

    let merged: Vec<Merged> = studies
        .into_values()
        .map(|(mut study, reps, sources, _)| {
            study.replications = reps.len();
            let output = aggregate(&study, reps)?;
            Ok(Merged { study, output, sources })
        })
        .collect::<Result<_, psbayes_core::Error>>()?;

    print!("{}", render(&merged, &fits, &notes));

    if let Some(path) = &args.csv {
        let groups: Vec<(&str, &[psbayes_core::sim::MetricsRow])> = merged
            .iter()
            .map(|m| (m.study.name.as_str(), m.output.rows.as_slice()))
            .collect();
        write_metrics_csv_multi(path, &groups)?;
    }
    if let Some(path) = &args.long {
        let groups: Vec<_> = merged.iter().map(|m| (&m.study, &m.output.replications)).collect();
        write_long_csv(path, &groups)?;
    }
    if let Some(path) = &args.kpost {
        write_kpost(path, &merged, &fits)?;
    }
    if let Some(path) = &args.trace {
        let traced: Vec<_> = fits.iter().filter(|(_, f)| f.trace.is_some()).collect();
        match traced.as_slice() {
            [(_, f)] => write_csv_rows(path, f.trace.as_deref().unwrap_or_default())?,
            [] => return Err(CliError::usage("--trace needs a fit document from a Bayesian method")),
            _ => return Err(CliError::usage("--trace needs exactly one fit document with a trace")),
        }
    }
    Ok(())
}

/// Reads every document, insisting on a single schema version.
fn load(files: &[std::path::PathBuf]) -> Result<Vec<(String, ResultDocument)>, CliError> {
    let mut texts = Vec::new();
    let mut versions: Vec<(String, Option<u64>)> = Vec::new();
    for path in files {
        let source = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{source}: {e}")))?;
        let version = serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.get("schema_version").and_then(|s| s.as_u64()));
        versions.push((source.clone(), version));
        texts.push((source, text));
    }
    let first = &versions[0];
    if let Some(other) = versions.iter().find(|v| v.1 != first.1 && v.1.is_some() && first.1.is_some()) {
        return Err(CliError::data(format!(
            "schema version mismatch: {} has version {}, {} has version {}",
            first.0,
            first.1.unwrap_or_default(),
            other.0,
            other.1.unwrap_or_default()
        )));
    }
    texts.iter().map(|(source, text)| Ok((source.clone(), parse_document(text, source)?))).collect()
}

/// Studies can be pooled when only the replication count and seed differ.
fn same_setup(a: &StudyConfig, b: &StudyConfig) -> bool {
    let strip = |s: &StudyConfig| {
        let mut s = s.clone();
        s.replications = 0;
        s.run.base_seed = 0;
        s
    };
    strip(a) == strip(b)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |v| format!("{v:.digits$}"))
}

fn render(merged: &[Merged], fits: &[(String, &FitResult)], notes: &[String]) -> String {
    let mut out = String::new();
    for m in merged {
        let _ = writeln!(
            out,
            "{} (n = {}, {} replications; from {})",
            m.study.name,
            m.study.dgp.n,
            m.study.replications,
            m.sources.join(", ")
        );
        let _ = writeln!(
            out,
            "{:<34} {:>9} {:>8} {:>8} {:>7} {:>7} {:>7}",
            "method", "mean", "ESE", "RMSE", "CP", "mean K", "failed"
        );
        for row in &m.output.rows {
            let metrics = row.metrics.filter(|_| m.study.replications > 1);
            let _ = writeln!(
                out,
                "{:<34} {:>9} {:>8} {:>8} {:>7} {:>7} {:>7}",
                row.label,
                fmt_opt(metrics.map(|x| x.mean), 2),
                fmt_opt(metrics.map(|x| x.ese), 2),
                fmt_opt(metrics.map(|x| x.rmse), 2),
                fmt_opt(metrics.map(|x| x.cp), 1),
                fmt_opt(row.mean_k, 2),
                row.failed
            );
        }
        out.push('\n');
    }
    if !fits.is_empty() {
        let _ = writeln!(
            out,
            "{:<24} {:<16} {:<9} {:>4} {:>9} {:>8} {:>9} {:>9}",
            "source", "method", "scores", "K", "estimate", "SE/SD", "lower", "upper"
        );
        for (source, f) in fits {
            let e = &f.estimate;
            let _ = writeln!(
                out,
                "{:<24} {:<16} {:<9} {:>4} {:>9.3} {:>8.3} {:>9.3} {:>9.3}",
                source,
                f.config.method,
                f.config.scores,
                e.k.map_or("-".into(), |k| k.to_string()),
                e.tau_hat,
                e.se,
                e.ci_low,
                e.ci_high
            );
        }
        out.push('\n');
    }
    for note in notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}

fn write_kpost(path: &Path, merged: &[Merged], fits: &[(String, &FitResult)]) -> Result<(), CliError> {
    let mut rows: Vec<KPostRow> = merged
        .iter()
        .flat_map(|m| kpost_rows(&m.study, &m.output.replications))
        .collect();
    for (source, f) in fits {
        for &(k, probability) in f.estimate.k_posterior.iter().flatten() {
            rows.push(KPostRow {
                source: source.clone(),
                label: f.config.method.clone(),
                replication: 0,
                k,
                probability,
            });
        }
    }
    write_csv_rows(path, &rows)
}
