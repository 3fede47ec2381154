//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `criterion N: PASS|FAIL ...` line before asserting.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use bnprepair::datamodel::{segment, ResearchDataset};
use bnprepair::dirichlet::kl_divergence;
use bnprepair::metrics::{damage, e_hat, HistogramConfig};
use bnprepair::rng::seeded;
use bnprepair::simgen::{sample_labelled, MixtureModelSpec};
use bnprepair::stopping::{kld_step, PriorSpec, StoppingConfig, StoppingStatistic, SubgroupLearner};
use bnprepair::transport::{solve_plan, GroupRepair, QuantizedConditional};
use bnprepair::ingest::AdultFeature;
use bnprepair_cli::commands::{run as run_command, Cli};
use bnprepair_cli::config::{ExperimentConfig, ExperimentId};
use clap::Parser;
use bnprepair_cli::experiments::run_experiment;
use bnprepair_cli::summary::{Stat, Summary, SummaryRow};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

fn verdict(n: u32, name: &str, checks: &[(bool, String)], elapsed: Duration, limit: Duration) {
    let mut all = checks.to_vec();
    all.push((elapsed <= limit, format!("runtime {:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs())));
    let pass = all.iter().all(|(ok, _)| *ok);
    let detail: Vec<String> = all.iter().map(|(ok, m)| format!("[{}] {m}", if *ok { "ok" } else { "FAILED" })).collect();
    println!("criterion {n} ({name}): {} | {}", if pass { "PASS" } else { "FAIL" }, detail.join("; "));
    assert!(pass, "criterion {n} failed: {}", detail.join("; "));
}

fn run(cfg: ExperimentConfig) -> Summary {
    let out = run_experiment(&cfg).expect("experiment runs");
    out.summary
}

fn row<'a>(s: &'a Summary, group: Option<&str>, variant: &str, point: Option<f64>) -> &'a SummaryRow {
    s.row(group, variant, point).unwrap_or_else(|| panic!("missing summary row {group:?} {variant} {point:?}"))
}

fn stat<'a>(r: &'a SummaryRow, metric: &str) -> Option<&'a Stat> {
    r.stats.get(metric)
}

/// `ADULT_DATA_DIR`, or the copy shipped in `data/adult`.
fn adult_dir() -> PathBuf {
    std::env::var_os("ADULT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/adult"))
}

// ---------------------------------------------------------------- 1

/// `∫ Dir(x|a) [ln Dir(x|a) − ln Dir(x|b)] dx` by double-exponential
/// quadrature over the simplex.
fn kld_by_quadrature(a: &[f64], b: &[f64]) -> f64 {
    let norm = |p: &[f64]| ln_gamma(p.iter().sum()) - p.iter().map(|&v| ln_gamma(v)).sum::<f64>();
    let (na, nb) = (norm(a), norm(b));
    let log_density = |n: f64, p: &[f64], x: &[f64]| n + p.iter().zip(x).map(|(&pj, &xj)| (pj - 1.0) * xj.ln()).sum::<f64>();
    let integrand = |x: &[f64]| {
        let la = log_density(na, a, x);
        la.exp() * (la - log_density(nb, b, x))
    };
    match a.len() {
        2 => quadrature::integrate(|t| integrand(&[t, 1.0 - t]), 0.0, 1.0, 1e-12).integral,
        3 => {
            quadrature::integrate(
                |x1| {
                    let w = 1.0 - x1;
                    w * quadrature::integrate(|t| integrand(&[x1, w * t, w * (1.0 - t)]), 0.0, 1.0, 1e-12).integral
                },
                0.0,
                1.0,
                1e-11,
            )
            .integral
        }
        _ => unreachable!(),
    }
}

#[test]
fn criterion_01_dirichlet_kld_matches_quadrature() {
    let start = Instant::now();
    let mut rng = seeded(101);
    let mut worst: f64 = 0.0;
    for i in 0..25 {
        let d = if i % 2 == 0 { 2 } else { 3 };
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(0.8..6.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(0.8..6.0)).collect();
        worst = worst.max((kl_divergence(&a, &b) - kld_by_quadrature(&a, &b)).abs());
    }
    // The learner's step statistic is this closed form on consecutive posteriors.
    let prior = PriorSpec::uniform(-4.0, 4.0, 8.0).unwrap();
    let cfg = StoppingConfig { statistic: StoppingStatistic::DirichletKld, ..StoppingConfig::default() };
    let mut l = SubgroupLearner::new(prior, cfg).unwrap();
    l.absorb(0.3).unwrap();
    let prev = l.state().clone();
    l.absorb(-1.1).unwrap();
    let step = kld_step(&prior, &prev, l.state(), StoppingStatistic::DirichletKld).unwrap();
    let refined = prev.refine(&prior, -1.1);
    let quad_step = kld_by_quadrature(&l.alpha(), &refined.alpha());
    let step_err = (step - quad_step).abs();
    verdict(
        1,
        "Dirichlet KLD oracle",
        &[
            (worst <= 1e-6, format!("max |closed form - quadrature| over 25 pairs = {worst:.2e}")),
            (step_err <= 1e-6, format!("learner step vs quadrature = {step_err:.2e}")),
        ],
        start.elapsed(),
        Duration::from_secs(60),
    );
}

// ---------------------------------------------------------------- 2

fn lp_cost(mu0: &QuantizedConditional, mu1: &QuantizedConditional) -> f64 {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = mu0
        .centroids()
        .iter()
        .map(|a| mu1.centroids().iter().map(|b| lp.add_var((a - b) * (a - b), (0.0, f64::INFINITY))).collect())
        .collect();
    for (i, w) in mu0.weights().iter().enumerate() {
        lp.add_constraint(vars[i].iter().map(|&v| (v, 1.0)), ComparisonOp::Eq, *w);
    }
    for (j, w) in mu1.weights().iter().enumerate().skip(1) {
        lp.add_constraint(vars.iter().map(|r| (r[j], 1.0)), ComparisonOp::Eq, *w);
    }
    lp.solve().expect("feasible").objective()
}

fn random_marginal<R: Rng>(rng: &mut R) -> QuantizedConditional {
    let m = rng.random_range(1..=6);
    let mut c: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    let w = (0..c.len()).map(|_| rng.random_range(0.05..1.0)).collect();
    QuantizedConditional::new(c, w).unwrap()
}

#[test]
fn criterion_02_plan_cost_matches_lp() {
    let start = Instant::now();
    let mut rng = seeded(202);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (mu0, mu1) = (random_marginal(&mut rng), random_marginal(&mut rng));
        let plan = solve_plan(&mu0, &mu1);
        worst = worst.max((plan.cost(&mu0, &mu1) - lp_cost(&mu0, &mu1)).abs());
    }
    verdict(
        2,
        "transport plan LP oracle",
        &[(worst <= 1e-9, format!("max |plan cost - LP cost| over 100 instances = {worst:.2e}"))],
        start.elapsed(),
        Duration::from_secs(60),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_categorical_stopping_order() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentId::StoppingCategorical, 303);
    cfg.trials = 20;
    let s = run(cfg.clone());
    let stats: Vec<&Stat> = cfg
        .q_values
        .iter()
        .map(|&q| stat(row(&s, None, &format!("q={q}"), Some(q as f64)), "n_hat").expect("n_hat recorded"))
        .collect();
    // An increase is tolerated once, and only when it is within two
    // standard errors of the difference (a statistical tie).
    let mut rises = Vec::new();
    for (w, q) in stats.windows(2).zip(cfg.q_values.windows(2)) {
        if w[1].mean > w[0].mean {
            let se = (w[0].std.powi(2) / w[0].n as f64 + w[1].std.powi(2) / w[1].n as f64).sqrt();
            rises.push((q[1], w[1].mean - w[0].mean <= 2.0 * se));
        }
    }
    let ordered = rises.is_empty() || (rises.len() == 1 && rises[0].1);
    let means: Vec<String> = stats.iter().map(|s| format!("{:.1}", s.mean)).collect();
    verdict(
        3,
        "categorical stopping order",
        &[(ordered, format!("mean n_hat for q = {:?}: [{}]", cfg.q_values, means.join(", ")))],
        start.elapsed(),
        Duration::from_secs(300),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_prior_confidence_monotone() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentId::PriorSweep, 404);
    cfg.trials = 20;
    cfg.prior_means.clear();
    let s = run(cfg.clone());
    let medians: Vec<f64> = cfg
        .nu0_values
        .iter()
        .map(|&v| stat(row(&s, Some("nu0"), "uniform", Some(v)), "n_hat").expect("n_hat").median)
        .collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    verdict(
        4,
        "prior confidence",
        &[(monotone, format!("median n_hat for nu0 = {:?}: {medians:?}", cfg.nu0_values))],
        start.elapsed(),
        Duration::from_secs(300),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_moments_at_stopping() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentId::StoppingGmm, 505);
    cfg.trials = 100;
    let s = run(cfg);
    // Moments of 0.8 N(-1, 1) + 0.2 N(-5, 0.25), computed here from the
    // component parameters.
    let (w, m, v) = ([0.8, 0.2], [-1.0, -5.0], [1.0, 0.25]);
    let mean: f64 = (0..2).map(|i| w[i] * m[i]).sum();
    let second: f64 = (0..2).map(|i| w[i] * (v[i] + m[i] * m[i])).sum();
    let variance = second - mean * mean;
    let r = row(&s, None, "gmm", None);
    let sm = stat(r, "sample_mean").expect("sample_mean").mean;
    let sv = stat(r, "sample_variance").expect("sample_variance").mean;
    verdict(
        5,
        "convergence at stopping",
        &[
            ((sm - mean).abs() <= 0.25, format!("mean at quench {sm:.4} vs {mean}")),
            ((sv - variance).abs() <= 0.3 * variance, format!("variance at quench {sv:.4} vs {variance:.4}")),
        ],
        start.elapsed(),
        Duration::from_secs(600),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_representation_bias_invariance() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentId::RbSweep, 606);
    cfg.trials = 20;
    let s = run(cfg.clone());
    let get = |p: f64, m: &str| stat(row(&s, None, "ours", Some(p)), m).cloned().expect("metric recorded");
    let mut checks = Vec::new();
    let negative = cfg.pr_u0_values.iter().all(|&p| get(p, "log_e_hat_on").mean < 0.0);
    let means: Vec<String> = cfg.pr_u0_values.iter().map(|&p| format!("{:.2}", get(p, "log_e_hat_on").mean)).collect();
    checks.push((negative, format!("mean log E_hat per point [{}]", means.join(", "))));
    let (lo, hi) = (cfg.pr_u0_values[0], *cfg.pr_u0_values.last().unwrap());
    for m in ["log_e_hat_on", "damage_on"] {
        let (a, b) = (get(lo, m), get(hi, m));
        let pooled = ((a.std.powi(2) + b.std.powi(2)) / 2.0).sqrt();
        checks.push((
            (a.mean - b.mean).abs() <= 2.0 * pooled,
            format!("{m}: {:.3} at {lo} vs {:.3} at {hi}, 2 pooled sd = {:.3}", a.mean, b.mean, 2.0 * pooled),
        ));
    }
    verdict(6, "representation-bias invariance", &checks, start.elapsed(), Duration::from_secs(900));
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_benchmark_ordering() {
    let start = Instant::now();
    let cfg = ExperimentConfig::new(ExperimentId::BenchmarkGmm, 707);
    let s = run(cfg.clone());
    let ours = row(&s, None, "ours", None);
    let geo = row(&s, None, "geometric", None);
    let m = |r: &SummaryRow, k: &str| stat(r, k).map_or(f64::NAN, |s| s.mean);
    let (lo, lg, loff, d) = (m(ours, "log_e_hat_on"), m(geo, "log_e_hat_on"), m(ours, "log_e_hat_off"), m(ours, "damage_on"));
    verdict(
        7,
        "benchmark ordering",
        &[
            (ours.trials_ok == cfg.trials && geo.trials_ok == cfg.trials, format!("{} + {} of {} trials ok", ours.trials_ok, geo.trials_ok, cfg.trials)),
            (lo < lg && lg < 0.0, format!("on-sample log E_hat ours {lo:.3} < geometric {lg:.3} < 0")),
            (loff < 0.0, format!("off-sample log E_hat ours {loff:.3} < 0")),
            (geo.off_sample_refused == Some(geo.trials_ok), format!("geometric refused off-sample data in {:?} of {} trials", geo.off_sample_refused, geo.trials_ok)),
            ((0.3..=0.5).contains(&d), format!("damage ours {d:.3} in [0.3, 0.5]")),
        ],
        start.elapsed(),
        Duration::from_secs(1200),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_adult() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentId::Adult, 808);
    cfg.adult_path = Some(adult_dir());
    let out = run_experiment(&cfg);
    let s = match out {
        Ok(o) => o.summary,
        Err(e) => {
            verdict(8, "Adult", &[(false, format!("experiment failed: {e}"))], start.elapsed(), Duration::from_secs(1200));
            return;
        }
    };
    let weights: Vec<f64> = serde_json::from_value(s.reference["subgroup_weights"].clone()).unwrap();
    let expected = [0.146, 0.310, 0.187, 0.357];
    let mut checks = vec![(
        weights.iter().zip(expected).all(|(w, e)| (w - e).abs() <= 0.01),
        format!("subgroup weights {:?}", weights.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>()),
    )];
    let mean = |f: &str, k: &str| s.row(Some(f), "ours", None).and_then(|r| stat(r, k)).map_or(f64::NAN, |st| st.mean);
    let ok = |f: &str| s.row(Some(f), "ours", None).map_or(0, |r| r.trials_ok);
    let on_age = mean("age", "e_hat_on");
    let on_gain = mean("capital_gain", "e_hat_on");
    checks.push((on_age < 0.05, format!("age on-sample E_hat {on_age:.4} < 0.05")));
    checks.push((on_gain < 0.3, format!("capital_gain on-sample E_hat {on_gain:.4} < 0.3")));
    let mut any_third = false;
    for f in ["age", "capital_gain", "capital_loss"] {
        let off = mean(f, "e_hat_off");
        any_third |= off < 1.0 / 3.0;
        checks.push((
            off < 1.0 && ok(f) == cfg.trials,
            format!("{f} off-sample E_hat {off:.4} < 1 ({} of {} trials ok)", ok(f), cfg.trials),
        ));
    }
    checks.push((any_third, "off-sample E_hat < 1/3 for some feature".into()));
    verdict(8, "Adult", &checks, start.elapsed(), Duration::from_secs(1200));
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_repair_law_and_identity() {
    let start = Instant::now();
    let source = QuantizedConditional::new(vec![-2.0, -0.5, 0.4, 1.0, 3.0], vec![0.1, 0.3, 0.2, 0.15, 0.25]).unwrap();
    let target = QuantizedConditional::new(vec![-1.0, 0.0, 0.7, 1.5, 2.2, 4.0, 5.0], vec![1.0; 7]).unwrap();
    let g = GroupRepair::new(source.clone(), target.clone());
    let dense = g.plan.to_dense();
    let n = 100_000;
    let mut rng = seeded(909);
    let mut worst_p: f64 = 1.0;
    for (s, idx) in [(0u8, 1usize), (0, 3), (1, 2), (1, 5)] {
        let (x, probs, partners): (f64, Vec<f64>, &[f64]) = if s == 0 {
            let r = &dense[idx];
            let m: f64 = r.iter().sum();
            (source.centroids()[idx], r.iter().map(|p| p / m).collect(), target.centroids())
        } else {
            let m: f64 = dense.iter().map(|r| r[idx]).sum();
            (target.centroids()[idx], dense.iter().map(|r| r[idx] / m).collect(), source.centroids())
        };
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..n {
            let y = g.repair(x, s, 0.5, &mut rng).unwrap();
            let other = 2.0 * y - x;
            let k = partners.iter().position(|c| (c - other).abs() < 1e-9).expect("repair lands on a barycentric atom");
            counts[k] += 1;
        }
        let support: Vec<usize> = (0..probs.len()).filter(|&k| probs[k] > 0.0).collect();
        assert!(counts.iter().enumerate().all(|(k, &c)| probs[k] > 0.0 || c == 0));
        let stat: f64 = support
            .iter()
            .map(|&k| {
                let e = probs[k] * n as f64;
                (counts[k] as f64 - e).powi(2) / e
            })
            .sum();
        let p = if support.len() > 1 { 1.0 - ChiSquared::new((support.len() - 1) as f64).unwrap().cdf(stat) } else { 1.0 };
        worst_p = worst_p.min(p);
    }
    let data: ResearchDataset = segment(&sample_labelled(&MixtureModelSpec::intersectionality(), 2_000, &mut seeded(9))).unwrap();
    let h = HistogramConfig::default();
    let e = e_hat(&data, &data, &h).unwrap().e_hat;
    let d = damage(&data, &data, &h).unwrap().total;
    verdict(
        9,
        "repair law exactness",
        &[
            (worst_p > 0.001, format!("smallest chi-square p-value over four rows/columns = {worst_p:.4}")),
            (e == 1.0, format!("E_hat(pre = post) = {e}")),
            (d == 0.0, format!("D(pre = post) = {d}")),
        ],
        start.elapsed(),
        Duration::from_secs(120),
    );
}

// ---------------------------------------------------------------- 10

/// Runs one command line through the same entry point as the binary.
fn bnprepair(args: &[&str], cwd: &Path) {
    let abs: Vec<String> = args
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let is_path = i > 0 && matches!(args[i - 1], "--input" | "--out" | "--model" | "--pre" | "--post" | "--config");
            if is_path { cwd.join(a).display().to_string() } else { a.to_string() }
        })
        .collect();
    let cli = Cli::try_parse_from(std::iter::once("bnprepair".to_string()).chain(abs)).expect("valid command line");
    if let Err(e) = run_command(&cli) {
        panic!("{args:?} failed: {e}");
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_10_determinism() {
    let start = Instant::now();
    let runs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            let d = tmp.path();
            bnprepair(&["generate", "--n", "20000", "--seed", "3", "--out", "data.csv"], d);
            bnprepair(&["fit", "--input", "data.csv", "--out", "model"], d);
            bnprepair(&["fit", "--input", "data.csv", "--out", "geo", "--method", "geometric"], d);
            bnprepair(&["repair", "--model", "model/model.json", "--input", "data.csv", "--seed", "5", "--out", "repaired.csv"], d);
            bnprepair(&["repair", "--model", "geo/model.json", "--input", "data.csv", "--seed", "5", "--out", "geo.csv"], d);
            bnprepair(&["evaluate", "--pre", "data.csv", "--post", "repaired.csv", "--out", "report.json"], d);
            bnprepair(&["evaluate", "--pre", "data.csv", "--post", "geo.csv", "--out", "geo_report.json"], d);
            for e in ExperimentId::ALL {
                let name = e.name();
                let mut cfg = ExperimentConfig::new(e, 11);
                cfg.trials = 2;
                if e == ExperimentId::Adult {
                    cfg.adult_path = Some(adult_dir());
                    cfg.features = vec![AdultFeature::Age];
                }
                let file = format!("{name}.json");
                std::fs::write(d.join(&file), serde_json::to_string(&cfg).unwrap()).unwrap();
                bnprepair(&["experiment", "--config", &file, "--out", name], d);
            }
            let mut all = dir_bytes(d);
            for sub in ["model", "geo"].into_iter().chain(ExperimentId::ALL.iter().map(|e| e.name())) {
                all.extend(dir_bytes(&d.join(sub)).into_iter().map(|(n, b)| (format!("{sub}/{n}"), b)));
            }
            all
        })
        .collect();
    let differing: Vec<&String> = runs[0].iter().zip(&runs[1]).filter(|(a, b)| a != b).map(|(a, _)| &a.0).collect();
    let same_files = runs[0].len() == runs[1].len();
    verdict(
        10,
        "determinism",
        &[(same_files && differing.is_empty(), format!("{} output files compared, differing: {differing:?}", runs[0].len()))],
        start.elapsed(),
        Duration::from_secs(600),
    );
}
