//! Synthetic data generators, the method runner and the replication study.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ipw_hajek, llb, select_k_plugin, subclass_point_for, MethodTag, PointEstimate};
use crate::data::{Dataset, Estimand, RunConfig};
use crate::error::{Error, Result};
use crate::gbayes::{two_step_chain_with, EffectDraw, ScoreSource};
use crate::propensity::{expit, fit_mle};
use crate::rjmcmc::run_rjmcmc_with;
use crate::rng::RngStream;
use crate::strata::make_strata;
use crate::summary::{mean_sd, PosteriorSummary};

/// The average treatment effect of both synthetic designs.
pub const TRUE_ATE: f64 = 110.0;

/// Which synthetic design to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    /// Four normal covariates, propensity `1.5 expit(x1 - 0.5 x2 + 0.25 x3 + 0.1 x4)`
    /// clamped into `[clamp, 1 - clamp]`.
    KangSchaferPoorOverlap,
    /// Same covariates and outcome, propensity `expit(1.5 (x1 - 0.5 x2 + 0.25 x3 + 0.1 x4))`.
    /// This reading reproduces the published comparison table; see the README.
    KangSchaferSteep,
    /// Four equiprobable clusters with propensity `expit(-1.2 + 0.5 k)`.
    Cluster4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    /// Propensities are clamped into `[clamp, 1 - clamp]` (poor-overlap design only).
    pub overlap_clamp: f64,
}

/// One generated dataset.
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: Dataset,
    pub true_scores: Vec<f64>,
    /// Units whose raw propensity fell outside the clamp interval.
    pub clamped: usize,
}

impl DgpSpec {
    pub fn true_ate(&self) -> f64 {
        TRUE_ATE
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Generated {
        match self.kind {
            DgpKind::KangSchaferPoorOverlap => kang_schafer(self.n, rng, KsForm::Scaled(self.overlap_clamp)),
            DgpKind::KangSchaferSteep => kang_schafer(self.n, rng, KsForm::Steep),
            DgpKind::Cluster4 => cluster4(self.n, rng),
        }
    }
}

/// Poor-overlap Kang-Schafer draw: `(data, true propensity scores)`.
pub fn gen_kang_schafer<R: Rng + ?Sized>(n: usize, rng: &mut R, clamp: f64) -> (Dataset, Vec<f64>) {
    let g = kang_schafer(n, rng, KsForm::Scaled(clamp));
    (g.data, g.true_scores)
}

/// Kang-Schafer draw with the steep logistic propensity.
pub fn gen_kang_schafer_steep<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Dataset, Vec<f64>) {
    let g = kang_schafer(n, rng, KsForm::Steep);
    (g.data, g.true_scores)
}

#[derive(Clone, Copy)]
enum KsForm {
    Scaled(f64),
    Steep,
}

fn ks_linear(x: &[f64]) -> f64 {
    x[0] - 0.5 * x[1] + 0.25 * x[2] + 0.1 * x[3]
}

/// Raw poor-overlap propensity before clamping; can exceed 1.
pub fn kang_schafer_raw_score(x: &[f64]) -> f64 {
    1.5 * expit(ks_linear(x))
}

fn kang_schafer<R: Rng + ?Sized>(n: usize, rng: &mut R, form: KsForm) -> Generated {
    let mut a = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut clamped = 0;
    for _ in 0..n {
        let xi: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let e = match form {
            KsForm::Scaled(clamp) => {
                let raw = kang_schafer_raw_score(&xi);
                let e = raw.clamp(clamp, 1.0 - clamp);
                clamped += usize::from(e != raw);
                e
            }
            KsForm::Steep => expit(1.5 * ks_linear(&xi)),
        };
        let ai = u8::from(rng.random::<f64>() < e);
        let eps: f64 = rng.sample(StandardNormal);
        let yi = 100.0
            + 110.0 * f64::from(ai)
            + 13.7 * (2.0 * xi[0] + xi[1] + xi[2] + xi[3])
            + eps;
        a.push(ai);
        x.push(xi);
        y.push(yi);
        scores.push(e);
    }
    Generated {
        data: build_dataset(a, x, y),
        true_scores: scores,
        clamped,
    }
}

/// Cluster design: `(data, true propensity scores)`; the covariate is the cluster ID.
pub fn gen_cluster4<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Dataset, Vec<f64>) {
    let g = cluster4(n, rng);
    (g.data, g.true_scores)
}

fn cluster4<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Generated {
    let mut a = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(1..=4u32) as f64;
        let e = expit(-1.2 + 0.5 * k);
        let ai = u8::from(rng.random::<f64>() < e);
        let eps: f64 = rng.sample(StandardNormal);
        a.push(ai);
        x.push(vec![k]);
        y.push(50.0 + 110.0 * f64::from(ai) + 20.0 * k + 0.5 * eps);
        scores.push(e);
    }
    Generated {
        data: build_dataset(a, x, y),
        true_scores: scores,
        clamped: 0,
    }
}

/// A draw with a single treatment arm cannot form a `Dataset`; the first
/// unit's arm is flipped in that case (only plausible at tiny n).
fn build_dataset(mut a: Vec<u8>, x: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
    if a.iter().all(|&v| v == a[0]) {
        a[0] = 1 - a[0];
    }
    Dataset::new(a, x, y).expect("generated data are well-formed")
}

/// Where a method takes its propensity scores from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Known,
    Estimated,
}

/// A method as run inside a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub tag: MethodTag,
    pub scores: ScoreKind,
    /// Fixed strata count; `None` for IPW and the K-selecting methods.
    pub k: Option<usize>,
}

impl MethodSpec {
    pub const fn new(tag: MethodTag, scores: ScoreKind, k: Option<usize>) -> Self {
        MethodSpec { tag, scores, k }
    }

    /// Row label in the style `gbayes-rjmcmc/estimated/select`.
    pub fn label(&self) -> String {
        let scores = match self.scores {
            ScoreKind::Known => "known",
            ScoreKind::Estimated => "estimated",
        };
        let strata = match (self.tag, self.k) {
            (MethodTag::Ipw, _) => "-".to_string(),
            (_, Some(k)) => format!("fixed{k}"),
            (_, None) => "select".to_string(),
        };
        format!("{}/{scores}/{strata}", self.tag)
    }
}

/// The ten rows of the main comparison table.
pub fn table1_methods() -> Vec<MethodSpec> {
    use MethodTag::*;
    use ScoreKind::*;
    vec![
        MethodSpec::new(Ipw, Estimated, None),
        MethodSpec::new(SubclassSelect, Known, None),
        MethodSpec::new(SubclassFreq, Known, Some(5)),
        MethodSpec::new(SubclassSelect, Estimated, None),
        MethodSpec::new(SubclassFreq, Estimated, Some(5)),
        MethodSpec::new(GbayesRjmcmc, Known, None),
        MethodSpec::new(GbayesFixed, Known, Some(5)),
        MethodSpec::new(GbayesRjmcmc, Estimated, None),
        MethodSpec::new(GbayesFixed, Estimated, Some(5)),
        MethodSpec::new(Llb, Estimated, Some(5)),
    ]
}

/// Result of one method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub tau_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Selected or fixed K (posterior mode for the reversible-jump sampler).
    pub k: Option<usize>,
    /// Empirical posterior of K (reversible-jump sampler only).
    pub k_posterior: Option<Vec<(usize, f64)>>,
    pub invalid_resamples: usize,
}

impl MethodEstimate {
    fn from_point(p: PointEstimate, k: Option<usize>) -> Self {
        MethodEstimate {
            tau_hat: p.tau_hat,
            se: p.se,
            ci_low: p.ci_low,
            ci_high: p.ci_high,
            k,
            k_posterior: None,
            invalid_resamples: 0,
        }
    }

    fn from_sample(values: &[f64], k: Option<usize>) -> Result<Self> {
        let s = PosteriorSummary::from_sample(values)?;
        Ok(MethodEstimate {
            tau_hat: s.mean,
            se: s.sd,
            ci_low: s.ci_low,
            ci_high: s.ci_high,
            k,
            k_posterior: None,
            invalid_resamples: 0,
        })
    }
}

/// Inputs shared by every method on one dataset.
pub struct MethodInputs<'a> {
    pub data: &'a Dataset,
    /// True scores, needed by known-score methods.
    pub true_scores: Option<&'a [f64]>,
    /// Maximum-likelihood scores, needed by estimated-score frequentist methods.
    pub mle_scores: Option<&'a [f64]>,
}

/// Full output of a method run, including posterior draws where available.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub estimate: MethodEstimate,
    pub draws: Option<Vec<EffectDraw>>,
    /// Share of accepted K moves (reversible-jump sampler only).
    pub acceptance_rate: Option<f64>,
}

/// Runs one method with its own random stream.
pub fn run_method<R: Rng + ?Sized>(
    method: &MethodSpec,
    inputs: &MethodInputs<'_>,
    config: &RunConfig,
    estimand: Estimand,
    n_boot: usize,
    rng: &mut R,
) -> Result<MethodRun> {
    let data = inputs.data;
    let fixed_scores = || -> Result<&[f64]> {
        match method.scores {
            ScoreKind::Known => inputs
                .true_scores
                .ok_or_else(|| Error::InvalidConfig(format!("{} needs known scores", method.label()))),
            ScoreKind::Estimated => inputs.mle_scores.ok_or(Error::Separation),
        }
    };
    let source = || -> Result<ScoreSource<'_>> {
        Ok(match method.scores {
            ScoreKind::Known => ScoreSource::Known(fixed_scores()?),
            ScoreKind::Estimated => ScoreSource::Estimated,
        })
    };
    let need_k = || {
        method
            .k
            .ok_or_else(|| Error::InvalidConfig(format!("{} needs a fixed K", method.tag)))
    };
    let point = |estimate: MethodEstimate| MethodRun {
        estimate,
        draws: None,
        acceptance_rate: None,
    };
    match method.tag {
        MethodTag::Ipw => {
            if estimand == Estimand::Att {
                return Err(Error::InvalidConfig("IPW supports the ATE only".into()));
            }
            Ok(point(MethodEstimate::from_point(ipw_hajek(data, fixed_scores()?)?, None)))
        }
        MethodTag::SubclassFreq => {
            let k = need_k()?;
            let d = make_strata(fixed_scores()?, data.a(), k)?;
            let p = subclass_point_for(data, &d, estimand)?;
            Ok(point(MethodEstimate::from_point(p, Some(k))))
        }
        MethodTag::SubclassSelect => {
            if estimand == Estimand::Att {
                return Err(Error::InvalidConfig("K selection supports the ATE only".into()));
            }
            let s = select_k_plugin(data, fixed_scores()?, config.k_max)?;
            Ok(point(MethodEstimate::from_point(s.estimate, Some(s.k))))
        }
        MethodTag::Llb => {
            let k = need_k()?;
            let d = make_strata(fixed_scores()?, data.a(), k)?;
            let sample = llb(data, &d, n_boot, estimand, rng)?;
            Ok(point(MethodEstimate::from_sample(&sample, Some(k))?))
        }
        MethodTag::GbayesFixed => {
            let k = need_k()?;
            let out = two_step_chain_with(data, source()?, k, config, estimand, rng)?;
            let taus: Vec<f64> = out.draws.iter().map(|d| d.tau_effect).collect();
            let mut estimate = MethodEstimate::from_sample(&taus, Some(k))?;
            estimate.invalid_resamples = out.invalid_resamples;
            Ok(MethodRun {
                estimate,
                draws: Some(out.draws),
                acceptance_rate: None,
            })
        }
        MethodTag::GbayesRjmcmc => {
            let out = run_rjmcmc_with(data, source()?, config, estimand, rng)?;
            let taus: Vec<f64> = out.draws.iter().map(|d| d.tau_effect).collect();
            let mode = out
                .k_posterior
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|&(k, _)| k);
            let mut estimate = MethodEstimate::from_sample(&taus, mode)?;
            estimate.invalid_resamples = out.invalid_resamples;
            estimate.k_posterior = Some(out.k_posterior);
            Ok(MethodRun {
                estimate,
                draws: Some(out.draws),
                acceptance_rate: Some(out.acceptance_rate),
            })
        }
    }
}

/// Summary metrics of one method over the replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean: f64,
    /// Empirical SD of the estimates (R - 1 denominator; 0 when R = 1).
    pub ese: f64,
    pub rmse: f64,
    /// Interval coverage of the truth, in percent.
    pub cp: f64,
    pub replications: usize,
}

/// Mean, ESE, RMSE and coverage of `(estimate, ci_low, ci_high)` triples.
pub fn compute_metrics(results: &[(f64, f64, f64)], truth: f64) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::Empty("replication results"));
    }
    let est: Vec<f64> = results.iter().map(|r| r.0).collect();
    let (mean, ese) = mean_sd(&est);
    let r = results.len() as f64;
    let mse = est.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / r;
    let covered = results.iter().filter(|(_, lo, hi)| *lo <= truth && truth <= *hi).count();
    Ok(Metrics {
        mean,
        ese,
        rmse: mse.sqrt(),
        cp: 100.0 * covered as f64 / r,
        replications: results.len(),
    })
}

/// A replication study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub name: String,
    pub dgp: DgpSpec,
    pub methods: Vec<MethodSpec>,
    pub replications: usize,
    pub estimand: Estimand,
    /// Sampler settings; `k_max` also bounds the frequentist K selection.
    pub run: RunConfig,
    pub n_boot: usize,
}

/// Names accepted by [`StudyConfig::preset`].
pub const PRESETS: [&str; 7] = [
    "table1-n100",
    "table1-n400",
    "table1-n800",
    "table1-n100-desk",
    "table1-n400-desk",
    "table1-n800-desk",
    "clusterC",
];

impl StudyConfig {
    /// Named study setups: the comparison table at each n (R = 2000, or
    /// R = 200 for `-desk`) and the single-run cluster recovery study.
    pub fn preset(name: &str) -> Option<Self> {
        let table = |n: usize, replications: usize| StudyConfig {
            name: name.to_string(),
            dgp: DgpSpec {
                kind: DgpKind::KangSchaferSteep,
                n,
                overlap_clamp: 0.01,
            },
            methods: table1_methods(),
            replications,
            estimand: Estimand::Ate,
            run: RunConfig {
                k_max: RunConfig::default_k_max(n),
                ..RunConfig::default()
            },
            n_boot: 2000,
        };
        Some(match name {
            "table1-n100" => table(100, 2000),
            "table1-n400" => table(400, 2000),
            "table1-n800" => table(800, 2000),
            "table1-n100-desk" => table(100, 200),
            "table1-n400-desk" => table(400, 200),
            "table1-n800-desk" => table(800, 200),
            "clusterC" => StudyConfig {
                name: name.to_string(),
                dgp: DgpSpec {
                    kind: DgpKind::Cluster4,
                    n: 5000,
                    overlap_clamp: 0.01,
                },
                methods: vec![MethodSpec::new(MethodTag::GbayesRjmcmc, ScoreKind::Estimated, None)],
                replications: 1,
                estimand: Estimand::Ate,
                run: RunConfig {
                    k_max: CLUSTER_K_MAX,
                    ..RunConfig::default()
                },
                n_boot: 2000,
            },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("at least one replication is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods selected".into()));
        }
        self.run.validate_for(self.dgp.n)
    }
}

/// Largest strata count offered in the cluster recovery study.
pub const CLUSTER_K_MAX: usize = 20;

/// What happened to one method in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum MethodOutcome {
    Ok(MethodEstimate),
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub clamped: usize,
    /// One entry per study method, in study order.
    pub outcomes: Vec<MethodOutcome>,
}

/// Metrics of one method, with the count of excluded replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: MethodSpec,
    pub label: String,
    /// `None` when every replication failed.
    pub metrics: Option<Metrics>,
    pub failed: usize,
    /// Average selected (or modal) K over the successful replications.
    pub mean_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub rows: Vec<MetricsRow>,
    pub replications: Vec<ReplicationRecord>,
    /// Share of generated units whose propensity was clamped.
    pub clamp_rate: f64,
}

/// Random stream of the dataset itself; methods use `1 + method index`.
const DATA_STREAM: u64 = 0;

/// Runs one replication: a fresh dataset and every method on it.
pub fn run_replication(study: &StudyConfig, base_seed: u64, replication: usize) -> ReplicationRecord {
    let mut rng = RngStream::for_replication(base_seed, replication as u64, DATA_STREAM);
    let g = study.dgp.generate(&mut rng);
    let mle = fit_mle(&g.data).ok();
    let inputs = MethodInputs {
        data: &g.data,
        true_scores: Some(&g.true_scores),
        mle_scores: mle.as_ref().map(|m| m.scores.as_slice()),
    };
    let outcomes = study
        .methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let mut rng = RngStream::for_replication(base_seed, replication as u64, 1 + m as u64);
            let run = run_method(method, &inputs, &study.run, study.estimand, study.n_boot, &mut rng);
            match run {
                Ok(r) => MethodOutcome::Ok(r.estimate),
                Err(e) => MethodOutcome::Failed { error: e.to_string() },
            }
        })
        .collect();
    ReplicationRecord {
        replication,
        clamped: g.clamped,
        outcomes,
    }
}

/// Runs the study over `jobs` worker threads and aggregates in replication order.
pub fn run_study(study: &StudyConfig, base_seed: u64, jobs: usize) -> Result<StudyOutput> {
    study.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let replications: Vec<ReplicationRecord> = pool.install(|| {
        (0..study.replications)
            .into_par_iter()
            .map(|r| run_replication(study, base_seed, r))
            .collect()
    });
    aggregate(study, replications)
}

/// Metrics rows from completed replications.
pub fn aggregate(study: &StudyConfig, replications: Vec<ReplicationRecord>) -> Result<StudyOutput> {
    let truth = study.dgp.true_ate();
    let rows = study
        .methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let ok: Vec<&MethodEstimate> = replications
                .iter()
                .filter_map(|r| match &r.outcomes[m] {
                    MethodOutcome::Ok(e) => Some(e),
                    MethodOutcome::Failed { .. } => None,
                })
                .collect();
            let triples: Vec<(f64, f64, f64)> = ok.iter().map(|e| (e.tau_hat, e.ci_low, e.ci_high)).collect();
            let metrics = if triples.is_empty() {
                None
            } else {
                Some(compute_metrics(&triples, truth)?)
            };
            let ks: Vec<f64> = ok.iter().filter_map(|e| e.k.map(|k| k as f64)).collect();
            Ok(MetricsRow {
                method: *method,
                label: method.label(),
                metrics,
                failed: replications.len() - ok.len(),
                mean_k: (!ks.is_empty()).then(|| ks.iter().sum::<f64>() / ks.len() as f64),
            })
        })
        .collect::<Result<_>>()?;
    let clamped: usize = replications.iter().map(|r| r.clamped).sum();
    let clamp_rate = clamped as f64 / (replications.len() * study.dgp.n) as f64;
    Ok(StudyOutput {
        rows,
        replications,
        clamp_rate,
    })
}
