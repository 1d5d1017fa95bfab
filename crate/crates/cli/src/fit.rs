use std::path::Path;
use std::time::Instant;

use psbayes_core::baselines::MethodTag;
use psbayes_core::csvio::read_dataset_path;
use psbayes_core::propensity::fit_mle;
use psbayes_core::rjmcmc::model_averaged_posterior;
use psbayes_core::sim::{run_method, MethodInputs, MethodSpec, ScoreKind};
use psbayes_core::strata::SortedScores;
use psbayes_core::{Dataset, Error, RngStream, RunConfig};

use crate::doc::{Body, FitConfig, FitResult, KSummary, ResultDocument, TraceRow, SCHEMA_VERSION};
use crate::{emit_document, now_unix, tool_name, CliError, FitArgs};

pub fn run(args: &FitArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = now_unix();
    let data = read_dataset_path(&args.data).map_err(|e| match e {
        Error::Io(io) => CliError::data(format!("{}: {io}", args.data.display())),
        e => CliError::from(e),
    })?;
    let known = match &args.scores {
        Some(path) => Some(read_scores(path, &data)?),
        None => None,
    };

    let needs_k = matches!(args.method, MethodTag::SubclassFreq | MethodTag::GbayesFixed | MethodTag::Llb);
    if needs_k && args.k.is_none() {
        return Err(CliError::usage(format!("--k is required for {}", args.method)));
    }
    if !needs_k && args.k.is_some() {
        return Err(CliError::usage(format!("--k does not apply to {}", args.method)));
    }
    let is_chain = matches!(args.method, MethodTag::GbayesFixed | MethodTag::GbayesRjmcmc);
    if args.trace.is_some() && !is_chain {
        return Err(CliError::usage(format!("{} produces no chain to trace", args.method)));
    }

    let mut run = RunConfig {
        k_max: args.kmax.unwrap_or_else(|| RunConfig::default_k_max(data.n())),
        k_min: args.kmin,
        strata_prior: args.prior.into(),
        theta_prior_mean: args.theta_prior_mean,
        theta_prior_precision: args.theta_prior_precision,
        alpha_prior_sd: args.alpha_prior_sd,
        base_seed: args.seed,
        max_invalid_designs: args.max_invalid,
        ..RunConfig::default()
    };
    args.sampler.apply(&mut run);
    if matches!(args.method, MethodTag::SubclassSelect | MethodTag::GbayesRjmcmc) {
        run.validate_for(data.n())?;
    } else {
        run.validate()?;
    }

    let scores = if known.is_some() { ScoreKind::Known } else { ScoreKind::Estimated };
    let method = MethodSpec::new(args.method, scores, args.k);
    let mle = if known.is_none() && !is_chain {
        Some(fit_mle(&data)?)
    } else {
        None
    };
    let inputs = MethodInputs {
        data: &data,
        true_scores: known.as_deref(),
        mle_scores: mle.as_ref().map(|m| m.scores.as_slice()),
    };
    let estimand = args.estimand.into();
    let mut rng = RngStream::with_stream(args.seed, 0);
    let out = run_method(&method, &inputs, &run, estimand, args.n_boot, &mut rng)?;

    let posterior_by_k = match (args.method, &out.draws) {
        (MethodTag::GbayesRjmcmc, Some(draws)) => Some(
            model_averaged_posterior(draws)?
                .per_k
                .into_iter()
                .map(|(k, share, s)| KSummary {
                    k,
                    share,
                    mean: s.mean,
                    sd: s.sd,
                    ci_low: s.ci_low,
                    ci_high: s.ci_high,
                })
                .collect(),
        ),
        _ => None,
    };
    let trace: Option<Vec<TraceRow>> = out.draws.as_ref().map(|draws| {
        draws
            .iter()
            .enumerate()
            .map(|(i, d)| TraceRow {
                iteration: i + 1,
                tau: d.tau_effect,
                k: d.k,
            })
            .collect()
    });
    if let (Some(path), Some(rows)) = (&args.trace, &trace) {
        crate::simulate::write_csv_rows(path, rows)?;
    }

    let mut warnings = Vec::new();
    if out.estimate.invalid_resamples > 0 {
        warnings.push(format!(
            "{} propensity draws gave invalid designs and were rejected",
            out.estimate.invalid_resamples
        ));
    }
    if method.tag == MethodTag::SubclassSelect {
        warnings.push("K selected by a plug-in MSE criterion (substitute for the Orihara-Hamada rule)".into());
    }

    let doc = ResultDocument {
        schema_version: SCHEMA_VERSION,
        tool: tool_name(),
        timestamp: crate::doc::Timestamp {
            started_unix,
            runtime_seconds: started.elapsed().as_secs_f64(),
        },
        seed: args.seed,
        warnings,
        body: Body::Fit(FitResult {
            config: FitConfig {
                method: method.tag.to_string(),
                estimand,
                k: args.k,
                scores: match scores {
                    ScoreKind::Known => "known".into(),
                    ScoreKind::Estimated => "estimated".into(),
                },
                scores_file: args.scores.as_ref().map(|p| p.display().to_string()),
                input: args.data.display().to_string(),
                n: data.n(),
                p: data.p(),
                n_boot: args.n_boot,
                run,
            },
            estimate: out.estimate,
            posterior_by_k,
            acceptance_rate: out.acceptance_rate,
            trace,
        }),
    };
    emit_document(&doc, args.out.as_deref())
}

/// One score per line; a non-numeric first line is taken as a header.
fn read_scores(path: &Path, data: &Dataset) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) => scores.push(v),
            Err(_) if i == 0 => {}
            Err(_) => {
                return Err(CliError::data(format!(
                    "{}: line {}: '{line}' is not a number",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    if scores.len() != data.n() {
        return Err(CliError::data(format!(
            "{}: {} scores for {} units",
            path.display(),
            scores.len(),
            data.n()
        )));
    }
    SortedScores::new(&scores)?;
    Ok(scores)
}
