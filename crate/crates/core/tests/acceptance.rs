//! Acceptance checks for the estimators and the replication studies.
//!
//! Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//! Pass criterion numbers (e.g. `3 7`) to run a subset.

use std::io::Write;
use std::time::Instant;

use psbayes_core::baselines::{subclass_point_for, MethodTag};
use psbayes_core::gbayes::{loss, loss_argmin, posterior_params, ThetaPrior};
use psbayes_core::propensity::sample_pg;
use psbayes_core::rjmcmc::{run_rjmcmc, run_rjmcmc_with, StrataPrior};
use psbayes_core::sim::{
    compute_metrics, gen_kang_schafer_steep, run_study, MethodOutcome, MethodSpec, MetricsRow, ScoreKind, StudyConfig,
    StudyOutput,
};
use psbayes_core::strata::{check_validity, make_strata, StrataDesign};
use psbayes_core::{Arm, Dataset, Estimand, OmegaRule, RngStream, RunConfig, StrataPriorKind};
use rand::Rng;
use rand_distr::StandardNormal;

const SEED: u64 = 1;

struct Check {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: &'static str, pass: bool, detail: String) -> Check {
    Check { id, pass, detail }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn study(preset: &str, methods: &[MethodSpec]) -> StudyOutput {
    let mut s = StudyConfig::preset(preset).expect("preset");
    s.methods = methods.to_vec();
    run_study(&s, SEED, jobs()).expect("study runs")
}

fn row<'a>(out: &'a StudyOutput, spec: &MethodSpec) -> &'a MetricsRow {
    out.rows.iter().find(|r| r.method == *spec).expect("row present")
}

fn within(x: f64, centre: f64, tol: f64) -> bool {
    (x - centre).abs() <= tol
}

fn describe(r: &MetricsRow) -> String {
    match r.metrics {
        Some(m) => format!(
            "mean {:.2}, ESE {:.2}, RMSE {:.2}, CP {:.1} over {} replications ({} failed)",
            m.mean, m.ese, m.rmse, m.cp, m.replications, r.failed
        ),
        None => format!("no successful replications ({} failed)", r.failed),
    }
}

const RJ_EST: MethodSpec = MethodSpec::new(MethodTag::GbayesRjmcmc, ScoreKind::Estimated, None);
const FREQ_EST5: MethodSpec = MethodSpec::new(MethodTag::SubclassFreq, ScoreKind::Estimated, Some(5));
const SELECT_KNOWN: MethodSpec = MethodSpec::new(MethodTag::SubclassSelect, ScoreKind::Known, None);
const IPW: MethodSpec = MethodSpec::new(MethodTag::Ipw, ScoreKind::Estimated, None);
const LLB5: MethodSpec = MethodSpec::new(MethodTag::Llb, ScoreKind::Estimated, Some(5));
const BAYES_EST5: MethodSpec = MethodSpec::new(MethodTag::GbayesFixed, ScoreKind::Estimated, Some(5));

fn n400_checks() -> Vec<Check> {
    let start = Instant::now();
    let out = study("table1-n400-desk", &[RJ_EST, FREQ_EST5, SELECT_KNOWN]);
    let secs = start.elapsed().as_secs_f64();

    let rj = row(&out, &RJ_EST);
    let c1 = rj.metrics.is_some_and(|m| within(m.mean, 111.51, 0.8) && m.cp >= 97.0);
    let freq = row(&out, &FREQ_EST5);
    let c2 = freq
        .metrics
        .is_some_and(|m| within(m.mean, 112.84, 0.8) && m.mean - 110.0 > 2.0 && (94.0..=100.0).contains(&m.cp));
    let sel = row(&out, &SELECT_KNOWN);
    let c4 = sel.metrics.is_some_and(|m| m.cp <= 93.0);
    vec![
        report(
            "1",
            c1,
            format!(
                "RJ, estimated scores, n=400: {}, mean K {:.1} (need mean 111.51 +/- 0.8, CP >= 97); study {secs:.0}s",
                describe(rj),
                rj.mean_k.unwrap_or(f64::NAN)
            ),
        ),
        report(
            "2",
            c2,
            format!(
                "subclassification K=5, estimated scores, n=400: {} (need mean 112.84 +/- 0.8, bias > 2, CP in [94, 100])",
                describe(freq)
            ),
        ),
        report(
            "4",
            c4,
            format!(
                "selected K, known scores, n=400: {}, mean K {:.2} (need CP <= 93)",
                describe(sel),
                sel.mean_k.unwrap_or(f64::NAN)
            ),
        ),
    ]
}

fn criterion_3() -> Check {
    let out = study("table1-n100-desk", &[IPW]);
    let r = row(&out, &IPW);
    let pass = r.metrics.is_some_and(|m| {
        within(m.mean, 112.31, 1.7) && within(m.ese, 7.98, 0.25 * 7.98) && (70.0..=80.0).contains(&m.cp)
    });
    report(
        "3",
        pass,
        format!(
            "IPW, n=100: {} (need mean 112.31 +/- 1.7, ESE 7.98 +/- 25%, CP in [70, 80])",
            describe(r)
        ),
    )
}

fn criterion_5() -> Check {
    let out = study("table1-n800-desk", &[LLB5, BAYES_EST5]);
    let llb = row(&out, &LLB5);
    let bayes = row(&out, &BAYES_EST5);
    let pass = match (llb.metrics, bayes.metrics) {
        (Some(l), Some(b)) => within(l.mean, 113.21, 0.8) && (l.mean - b.mean).abs() <= 1.0,
        _ => false,
    };
    report(
        "5",
        pass,
        format!(
            "n=800, K=5: LLB {}; Bayes {} (need LLB mean 113.21 +/- 0.8 and within 1.0 of Bayes)",
            describe(llb),
            describe(bayes)
        ),
    )
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let s = StudyConfig::preset("clusterC").expect("preset");
    let out = run_study(&s, SEED, 1).expect("study runs");
    let secs = start.elapsed().as_secs_f64();
    let post = match &out.replications[0].outcomes[0] {
        MethodOutcome::Ok(e) => e.k_posterior.clone().unwrap_or_default(),
        MethodOutcome::Failed { error } => return report("6", false, format!("chain failed: {error}")),
    };
    let mass: f64 = post.iter().filter(|(k, _)| *k >= 4).map(|(_, p)| p).sum();
    let mode = post
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |&(k, _)| k);
    let pass = mass >= 0.6 && (4..=8).contains(&mode) && secs <= 900.0;
    let shown: Vec<String> = post
        .iter()
        .filter(|(_, p)| *p >= 0.005)
        .map(|(k, p)| format!("{k}:{p:.3}"))
        .collect();
    report(
        "6",
        pass,
        format!(
            "cluster data, n=5000, K <= {}: P(K >= 4) = {mass:.3}, mode {mode}, posterior [{}] in {secs:.1}s \
             (need P >= 0.6, mode in 4..=8)",
            s.run.k_max,
            shown.join(" ")
        ),
    )
}

fn random_dataset<R: Rng>(rng: &mut R, n: usize) -> (Dataset, Vec<f64>) {
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let a: Vec<u8> = scores.iter().map(|&e| u8::from(rng.random::<f64>() < e)).collect();
    let y: Vec<f64> = a
        .iter()
        .map(|&a| 5.0 * f64::from(a) + 10.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (Dataset::new(a, vec![vec![]; n], y).expect("dataset"), scores)
}

/// A random dataset with a valid design at some random K.
fn random_design<R: Rng>(rng: &mut R) -> (Dataset, StrataDesign, Estimand) {
    loop {
        let n = rng.random_range(20..80);
        let (data, scores) = random_dataset(rng, n);
        if data.n_treated() == 0 || data.n_treated() == n {
            continue;
        }
        let k = rng.random_range(1..=5);
        let d = make_strata(&scores, data.a(), k).expect("strata");
        if check_validity(&d).valid {
            let estimand = if rng.random::<bool>() { Estimand::Ate } else { Estimand::Att };
            return (data, d, estimand);
        }
    }
}

/// Posterior mean and precision by trapezoid integration of prior * exp(-omega * loss).
fn grid_posterior(arm: Arm, data: &Dataset, d: &StrataDesign, omega: f64, prior: ThetaPrior, est: Estimand) -> (f64, f64) {
    let log_post = |t: f64| prior.log_density(t) - omega * loss(arm, t, data, d, est).expect("loss");
    // Locate the mode by ternary search on the concave log density.
    let (mut lo, mut hi) = (-1e4, 1e4);
    for _ in 0..300 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if log_post(m1) < log_post(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let mode = 0.5 * (lo + hi);
    // Curvature from a central difference sets the grid width.
    let h = 1e-2;
    let curv = -(log_post(mode + h) - 2.0 * log_post(mode) + log_post(mode - h)) / (h * h);
    let sd = 1.0 / curv.sqrt();
    let m = 4000;
    let grid: Vec<f64> = (0..=m).map(|i| mode - 16.0 * sd + 32.0 * sd * i as f64 / m as f64).collect();
    let logs: Vec<f64> = grid.iter().map(|&t| log_post(t)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let trap = |f: &dyn Fn(usize) -> f64| -> f64 {
        (0..=m).map(|i| if i == 0 || i == m { 0.5 * f(i) } else { f(i) }).sum::<f64>()
    };
    let z = trap(&|i| w[i]);
    let mean = trap(&|i| w[i] * grid[i]) / z;
    let var = trap(&|i| w[i] * (grid[i] - mean).powi(2)) / z;
    (mean, 1.0 / var)
}

fn check_conjugacy() -> (bool, String) {
    let mut rng = RngStream::new(71);
    let mut worst_mu = 0.0f64;
    let mut worst_tau = 0.0f64;
    for _ in 0..20 {
        let (data, d, est) = random_design(&mut rng);
        let arm = if rng.random::<bool>() { Arm::Treated } else { Arm::Control };
        let omega = rng.random_range(0.001..0.2);
        let prior = if rng.random::<bool>() {
            ThetaPrior::flat()
        } else {
            ThetaPrior {
                mean: rng.random_range(-20.0..20.0),
                precision: rng.random_range(0.0001..0.05),
            }
        };
        let p = posterior_params(arm, &data, &d, omega, prior, est).expect("posterior");
        let (mu, tau) = grid_posterior(arm, &data, &d, omega, prior, est);
        let scale = p.mu_tilde.abs().max(1.0 / p.tau_tilde.sqrt());
        worst_mu = worst_mu.max((mu - p.mu_tilde).abs() / scale);
        worst_tau = worst_tau.max((tau - p.tau_tilde).abs() / p.tau_tilde);
    }
    (
        worst_mu <= 1e-6 && worst_tau <= 1e-6,
        format!("20 instances, worst relative error: mean {worst_mu:.1e}, precision {worst_tau:.1e} (need <= 1e-6)"),
    )
}

fn check_pg_moments() -> (bool, String) {
    let mut rng = RngStream::new(72);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for c in [0.0f64, 0.5, 1.0, 2.0, 4.0] {
        let draws = 1_000_000;
        let mean = (0..draws).map(|_| sample_pg(c, &mut rng)).sum::<f64>() / draws as f64;
        let exact = if c == 0.0 { 0.25 } else { (c / 2.0).tanh() / (2.0 * c) };
        worst = worst.max((mean - exact).abs());
        parts.push(format!("c={c}: {mean:.4} vs {exact:.4}"));
    }
    (worst <= 0.002, format!("{}; worst gap {worst:.1e} (need <= 0.002)", parts.join(", ")))
}

fn check_argmin_equivalence() -> (bool, String) {
    let mut rng = RngStream::new(73);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (data, d, est) = random_design(&mut rng);
        let diff = loss_argmin(Arm::Treated, &data, &d, est).expect("argmin")
            - loss_argmin(Arm::Control, &data, &d, est).expect("argmin");
        let direct = subclass_point_for(&data, &d, est).expect("estimate").tau_hat;
        worst = worst.max((diff - direct).abs());
    }
    (worst <= 1e-10, format!("50 designs, worst gap {worst:.1e} (need <= 1e-10)"))
}

/// Batch-means standard error of the indicator series `x`.
fn batch_se(x: &[f64], batches: usize) -> f64 {
    let size = x.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| x[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

fn check_prior_recovery() -> (bool, String) {
    // Scores in treatment-alternating order keep every design valid.
    let n = 400;
    let scores: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let a: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
    let data = Dataset::new(a, vec![vec![]; n], y).expect("dataset");
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [StrataPriorKind::Uniform, StrataPriorKind::Linear] {
        for k_max in [4, 10] {
            let cfg = RunConfig {
                k_max,
                strata_prior: kind,
                omega: OmegaRule::Fixed(0.0),
                theta_prior_precision: 0.0,
                burn_in: 100,
                n_draws: 40_000,
                ..RunConfig::default()
            };
            let out = run_rjmcmc_with(
                &data,
                psbayes_core::gbayes::ScoreSource::Known(&scores),
                &cfg,
                Estimand::Ate,
                &mut RngStream::new(74 + k_max as u64),
            )
            .expect("chain");
            let prior = StrataPrior::from_config(&cfg).expect("prior");
            let mut worst = 0.0f64;
            for k in prior.support() {
                let ind: Vec<f64> = out.draws.iter().map(|d| f64::from(u8::from(d.k == k))).collect();
                let freq = ind.iter().sum::<f64>() / ind.len() as f64;
                let se = batch_se(&ind, 40);
                worst = worst.max((freq - prior.prob(k)).abs() / se);
            }
            pass &= worst <= 3.0;
            parts.push(format!("{kind:?} k_max={k_max}: worst {worst:.2} SE"));
        }
    }
    (pass, format!("{} (need <= 3 SE)", parts.join(", ")))
}

fn check_metrics_identity() -> (bool, String) {
    let mut rng = RngStream::new(75);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let r = rng.random_range(2..500);
        let bias = rng.random_range(-5.0..5.0);
        let triples: Vec<(f64, f64, f64)> = (0..r)
            .map(|_| {
                let e = 110.0 + bias + 3.0 * rng.sample::<f64, _>(StandardNormal);
                (e, e - 2.0, e + 2.0)
            })
            .collect();
        let m = compute_metrics(&triples, 110.0).expect("metrics");
        let rf = r as f64;
        let rhs = (m.mean - 110.0).powi(2) + (rf - 1.0) / rf * m.ese * m.ese;
        worst = worst.max((m.rmse * m.rmse - rhs).abs());
    }
    (worst <= 1e-9, format!("200 random result sets, worst gap {worst:.1e} (need <= 1e-9)"))
}

fn check_determinism() -> (bool, String) {
    let (data, _) = gen_kang_schafer_steep(200, &mut RngStream::new(76));
    let cfg = RunConfig { k_max: 10, ..RunConfig::default() };
    let chain = |seed| {
        let out = run_rjmcmc(&data, &cfg, Estimand::Ate, &mut RngStream::new(seed)).expect("chain");
        serde_json::to_vec(&out.draws).expect("serialize")
    };
    let first = chain(5);
    let same = first == chain(5);
    let differs = first != chain(6);
    let mut s = StudyConfig::preset("table1-n100-desk").expect("preset");
    s.replications = 6;
    let one = serde_json::to_vec(&run_study(&s, 9, 1).expect("study")).expect("serialize");
    let many = serde_json::to_vec(&run_study(&s, 9, 3).expect("study")).expect("serialize");
    (
        same && differs && one == many,
        format!(
            "repeat chain identical: {same}; other seed differs: {differs}; study identical across 1 and 3 workers: {}",
            one == many
        ),
    )
}

fn criterion_7() -> Vec<Check> {
    let parts: [(&'static str, &str, fn() -> (bool, String)); 6] = [
        ("7a", "conjugacy", check_conjugacy),
        ("7b", "Polya-Gamma moments", check_pg_moments),
        ("7c", "loss argmin equals subclassification", check_argmin_equivalence),
        ("7d", "prior recovery", check_prior_recovery),
        ("7e", "metrics identity", check_metrics_identity),
        ("7f", "seed determinism", check_determinism),
    ];
    parts
        .iter()
        .map(|(id, name, f)| {
            let start = Instant::now();
            let (pass, detail) = f();
            let secs = start.elapsed().as_secs_f64();
            report(id, pass && secs <= 60.0, format!("{name}: {detail}; {secs:.1}s"))
        })
        .collect()
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let run = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut checks = Vec::new();
    let mut out = std::io::stdout();
    let mut emit = |batch: Vec<Check>, checks: &mut Vec<Check>| {
        for c in batch {
            let _ = writeln!(out, "criterion {:<3} {}  {}", c.id, if c.pass { "PASS" } else { "FAIL" }, c.detail);
            let _ = out.flush();
            checks.push(c);
        }
    };
    if run("1") || run("2") || run("4") {
        emit(n400_checks(), &mut checks);
    }
    if run("3") {
        emit(vec![criterion_3()], &mut checks);
    }
    if run("5") {
        emit(vec![criterion_5()], &mut checks);
    }
    if run("6") {
        emit(vec![criterion_6()], &mut checks);
    }
    if run("7") {
        emit(criterion_7(), &mut checks);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        checks.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
