//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Tolerances and budgets are pinned below.
//!
//! Run a subset with `cargo test --test acceptance -- <name-substring>`.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use expertise::analysis;
use expertise::assign::{self, CostMatrix, ModelKind};
use expertise::dataset::Dataset;
use expertise::evaluate::{self, benefit_percent};
use expertise::model;
use expertise::split::{split, Scheme, SplitSpec};
use expertise::synth::{self, BlockDrift, NoiseSpec, SynthConfig, TrajectoryKind};
use expertise::trainer::{self, FittedModel, Step, TrainConfig};
use expertise::{stats, ExperienceAssignment};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Fails the outcome if it ran past `budget`.
fn within(budget: Duration, elapsed: Duration, mut o: Outcome) -> Outcome {
    if elapsed > budget {
        o.passed = false;
        o.detail = format!("{} (over the {:?} budget)", o.detail, budget);
    }
    o
}

// ---------------------------------------------------------------------------

const DP_MATRICES: usize = 1000;

fn dp_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(20_240_101);
    let mut mismatches = Vec::new();
    let mut tied = 0;
    for trial in 0..DP_MATRICES {
        let levels = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        // half the matrices use small integers so that ties are common
        let cost: Vec<f64> = (0..levels * n)
            .map(|_| {
                if trial % 2 == 0 {
                    f64::from(rng.random_range(0..3u8))
                } else {
                    rng.random_range(0.0..4.0)
                }
            })
            .collect();
        let m = CostMatrix::new(levels, n, cost);
        let dp = assign::assign_user_dp(&m).unwrap();
        let brute = synth::brute_force_assign(&m).unwrap();
        let (cd, cb) = (m.sequence_cost(&dp), m.sequence_cost(&brute));
        if trial % 2 == 0 {
            tied += 1;
        }
        if dp != brute || cd != cb {
            mismatches.push(trial);
        }
    }
    let o = outcome(
        mismatches.is_empty(),
        format!(
            "{} of {DP_MATRICES} matrices differ in argmin or cost ({tied} integer-cost); first: {:?}",
            mismatches.len(),
            mismatches.first()
        ),
    );
    within(Duration::from_secs(10), start.elapsed(), o)
}

const GRADIENT_INSTANCES: usize = 20;
const FD_STEP: f64 = 1e-5;
const GRADIENT_TOLERANCE: f64 = 1e-4;

fn gradient() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..GRADIENT_INSTANCES as u64 {
        let mut rng = common::rng(seed);
        let d = common::random_corpus(&mut rng, 5, 5);
        let p = common::random_params(&mut rng, &d, 3, 2, 1.0);
        let a = common::random_user_assignment(&mut rng, &d, 3);
        let lambda = rng.random_range(0.1..10.0);
        let grad = model::gradient(&p, &a, &d, lambda).unwrap();
        for (c, &g) in grad.iter().enumerate() {
            if g.abs() <= 1e-8 {
                continue;
            }
            let numeric =
                common::central_difference(&p, c, FD_STEP, |q| common::oracle_objective(q, &a, &d, lambda));
            worst = worst.max((numeric - g).abs() / g.abs());
            checked += 1;
        }
    }
    let o = outcome(
        worst < GRADIENT_TOLERANCE,
        format!("max relative error {worst:.2e} over {checked} coordinates (tolerance {GRADIENT_TOLERANCE:e})"),
    );
    within(Duration::from_secs(10), start.elapsed(), o)
}

fn small_fit_corpus(seed: u64) -> Dataset {
    let cfg = SynthConfig {
        n_users: 60,
        n_items: 40,
        ratings_per_user: (10, 30),
        seed,
        ..SynthConfig::default()
    };
    synth::generate(&cfg).unwrap().0
}

fn descent_config(kind: ModelKind, seed: u64) -> TrainConfig {
    TrainConfig {
        levels: 4,
        factors: 3,
        lambda_grid: vec![0.01, 1.0],
        seed,
        model_kind: kind,
        ..TrainConfig::default()
    }
}

fn descent_runs() -> Vec<(ModelKind, u64, FittedModel, Dataset)> {
    let mut runs = Vec::new();
    for seed in 0..2 {
        let d = small_fit_corpus(seed);
        for kind in ModelKind::ALL {
            for lambda in [0.01, 1.0] {
                let m = trainer::fit_lambda(&d, &descent_config(kind, seed), lambda, None).unwrap();
                runs.push((kind, seed, m, d.clone()));
            }
        }
    }
    runs
}

fn monotone_descent() -> Outcome {
    let mut steps = 0;
    let mut error_rises = 0;
    let mut violations = Vec::new();
    for (kind, seed, m, _) in descent_runs() {
        for w in m.train_history.windows(2) {
            steps += 1;
            // the mean-error component alone may rise when a Θ-step buys a
            // larger drop in the penalty; reported, not asserted
            if w[1].error > w[0].error {
                error_rises += 1;
            }
            if w[1].objective > w[0].objective {
                violations.push(format!(
                    "({kind}) seed {seed} lambda {} iter {} {:?}: {} -> {}",
                    m.lambda, w[1].iteration, w[1].step, w[0].objective, w[1].objective
                ));
            }
        }
        if m.train_history.first().map(|h| h.step) != Some(Step::Init) {
            violations.push(format!("({kind}) history does not start at initialization"));
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "{} objective increases in {steps} recorded steps over 20 fits (mean-error component alone rose in {error_rises}){}",
            violations.len(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

fn monotonicity_constraints() -> Outcome {
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut check = |kind: ModelKind, a: &ExperienceAssignment, d: &Dataset, levels: usize, what: &str| {
        checked += 1;
        let levels = kind.effective_levels(levels);
        let library = assign::validate_assignment(kind, a, d, levels);
        let scan = if kind.is_community() {
            common::global_monotone_violation(a, d, levels).map(|i| format!("position {i}"))
        } else {
            common::user_monotone_violation(a, levels).map(|(u, j)| format!("user {u} index {j}"))
        }
        .or_else(|| common::user_monotone_violation(a, levels).map(|(u, j)| format!("user {u} index {j}")));
        if library.is_err() || scan.is_some() {
            failures.push(format!("({kind}) {what}: {library:?} {scan:?}"));
        }
    };
    for (kind, _, m, d) in descent_runs() {
        check(kind, &m.assignment, &d, m.n_levels(), "fit");
    }
    for seed in 0..20 {
        let mut rng = common::rng(100 + seed);
        let d = common::random_corpus(&mut rng, 8, 6);
        let p = common::random_params(&mut rng, &d, 4, 2, 1.0);
        for kind in ModelKind::ALL {
            let a = assign::assign_all(kind, &p, &d).unwrap();
            check(kind, &a, &d, 4, "assign_all");
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} of {checked} assignments violate their constraint{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

const PARITY_TOLERANCE: f64 = 1e-9;

fn single_level_parity() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig {
        n_users: 40,
        n_items: 50,
        ratings_per_user: (25, 25),
        seed: 5,
        ..SynthConfig::default()
    };
    let (d, _) = synth::generate(&cfg).unwrap();
    let s = split(&d, &SplitSpec::default()).unwrap();
    let fit = |kind| {
        let tc = TrainConfig {
            levels: 1,
            factors: 3,
            seed: 9,
            model_kind: kind,
            ..TrainConfig::default()
        };
        trainer::fit(&s.train, &s.validation, &tc).unwrap()
    };
    let flat = fit(ModelKind::Flat);
    let learned = fit(ModelKind::UserLearned);
    let mut worst: f64 = 0.0;
    for r in s.train.ratings() {
        let (u, i) = (s.train.user_id(r.user), s.train.item_id(r.item));
        worst = worst.max((flat.params.predict(0, u, i) - learned.params.predict(0, u, i)).abs());
    }
    let o = outcome(
        worst <= PARITY_TOLERANCE,
        format!(
            "max prediction gap {worst:.2e} over {} training pairs of a {}-rating corpus",
            s.train.len(),
            d.len()
        ),
    );
    within(Duration::from_secs(30), start.elapsed(), o)
}

const RECOVERY_MSE: f64 = 1e-3;
const RECOVERY_SCORE: f64 = 0.9;

fn noise_free_recovery() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig {
        n_users: 200,
        ratings_per_user: (40, 40),
        noise_sigma: NoiseSpec::Constant(0.0),
        level_drift: 0.5,
        trajectory_kind: TrajectoryKind::Mixed,
        seed: 1,
        ..SynthConfig::default()
    };
    let (corpus, truth) = synth::generate(&cfg).unwrap();
    let s = split(
        &corpus,
        &SplitSpec {
            scheme: Scheme::Random,
            ..SplitSpec::default()
        },
    )
    .unwrap();
    // an exactly realizable corpus calls for λ far below the default grid
    let tc = TrainConfig {
        lambda_grid: vec![1e-5, 1e-4, 1e-3, 1e-2],
        inner_tolerance: 1e-9,
        model_kind: ModelKind::UserLearned,
        ..TrainConfig::default()
    };
    let m = trainer::fit(&s.train, &s.validation, &tc).unwrap();
    let train_mse = model::objective(&m.params, &m.assignment, &s.train, 0.0).unwrap();
    let rec = synth::recovery_score(&truth, &corpus, &m, &s.train).unwrap();
    let o = outcome(
        train_mse < RECOVERY_MSE && rec.score >= RECOVERY_SCORE && !rec.degenerate,
        format!(
            "E={} K={} lambda={}: train MSE {train_mse:.2e} (< {RECOVERY_MSE:e}), recovery {:.3} (>= {RECOVERY_SCORE}), clamped {:.2}%",
            tc.levels,
            tc.factors,
            m.lambda,
            rec.score,
            100.0 * truth.clamp_rate(&corpus)
        ),
    );
    within(Duration::from_secs(300), start.elapsed(), o)
}

const SEPARATION_PERCENT: f64 = 5.0;

fn noisy_separation() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig {
        n_users: 500,
        ratings_per_user: (50, 50),
        noise_sigma: NoiseSpec::Constant(0.3),
        level_drift: 0.5,
        seed: 7,
        ..SynthConfig::default()
    };
    let (corpus, _) = synth::generate(&cfg).unwrap();
    let s = split(&corpus, &SplitSpec::default()).unwrap();
    let test_mse = |kind| {
        let tc = TrainConfig {
            model_kind: kind,
            ..TrainConfig::default()
        };
        let m = trainer::fit(&s.train, &s.validation, &tc).unwrap();
        evaluate::mse(&m, &s.test, &s.train).unwrap().mse
    };
    let lf = test_mse(ModelKind::Flat);
    let c = test_mse(ModelKind::CommunityLearned);
    let d = test_mse(ModelKind::UserLearned);
    let gain = benefit_percent(lf, d);
    let o = outcome(
        gain >= SEPARATION_PERCENT && d < c,
        format!("test MSE lf {lf:.4}, c {c:.4}, d {d:.4}; d over lf {gain:.2}% (>= {SEPARATION_PERCENT}%), d over c {:.2}%", benefit_percent(c, d)),
    );
    within(Duration::from_secs(900), start.elapsed(), o)
}

fn smoothness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = common::rng(1000 + seed);
        let (users, items) = (rng.random_range(1..6), rng.random_range(1..6));
        let d = common::random_corpus(&mut rng, users, items);
        let levels = rng.random_range(1..5);
        let factors = rng.random_range(1..4);
        let p = common::random_params(&mut rng, &d, levels, factors, 3.0);
        let direct = common::oracle_smoothness(&p);
        let ours = model::smoothness_penalty(&p);
        let rel = if direct == 0.0 { ours.abs() } else { (ours - direct).abs() / direct };
        worst = worst.max(rel);
    }
    outcome(worst < 1e-12, format!("max relative error {worst:.2e} over 100 parameter sets"))
}

/// Published benchmark rows: (lf, c, d) MSEs and the reported benefits of d
/// over lf and over c, with the exact benefit of the displayed MSEs worked
/// out by hand.
const PUBLISHED_ROWS: [(f64, f64, f64, f64, f64, f64, f64); 7] = [
    // lf, c, d, reported d/lf, reported d/c, exact d/lf, exact d/c
    (0.452, 0.427, 0.400, 11.62, 6.48, 11.504424778761061, 6.323185011709601),
    (0.442, 0.417, 0.399, 9.73, 4.12, 9.728506787330314, 4.316546762589924),
    (0.313, 0.293, 0.275, 12.19, 6.13, 12.140575079872201, 6.143344709897606),
    (0.496, 0.458, 0.406, 18.26, 11.42, 18.14516129032258, 11.353711790393017),
    (1.582, 1.529, 1.475, 6.79, 3.53, 6.763590391908976, 3.5317200784826684),
    (1.379, 1.371, 1.051, 23.80, 23.34, 23.785351704133432, 23.340627279358134),
    (0.055, 0.051, 0.045, 18.50, 13.20, 18.18181818181818, 11.764705882352938),
];

/// Range of the benefit when both MSEs are only known to ±0.0005.
fn rounding_interval(base: f64, model: f64) -> (f64, f64) {
    let h = 0.0005;
    (
        100.0 * ((base - h) - (model + h)) / (base - h),
        100.0 * ((base + h) - (model - h)) / (base + h),
    )
}

fn evaluator_consistency() -> Outcome {
    let mut problems = Vec::new();

    // per-level MSE recombines to the overall MSE
    let cfg = SynthConfig {
        n_users: 80,
        seed: 3,
        ..SynthConfig::default()
    };
    let (corpus, _) = synth::generate(&cfg).unwrap();
    let s = split(&corpus, &SplitSpec::default()).unwrap();
    let tc = TrainConfig {
        levels: 5,
        factors: 2,
        lambda_grid: vec![1.0],
        max_outer_iters: 5,
        ..TrainConfig::default()
    };
    let m = trainer::fit(&s.train, &s.validation, &tc).unwrap();
    let mut worst: f64 = 0.0;
    for kind_model in [m.clone(), {
        let mut flat = m.clone();
        flat.kind = ModelKind::UserUniform;
        flat
    }] {
        let r = evaluate::mse(&kind_model, &s.test, &s.train).unwrap();
        let counted: usize = r.per_level.iter().map(|l| l.count).sum();
        let weighted = stats::sum(
            r.per_level
                .iter()
                .filter_map(|l| l.mse.map(|v| v * l.count as f64)),
        ) / counted as f64;
        worst = worst.max((weighted - r.mse).abs() / r.mse);
        if counted != r.n_test {
            problems.push(format!("per-level counts {counted} != {}", r.n_test));
        }
    }
    if worst >= 1e-12 {
        problems.push(format!("recombination error {worst:.2e}"));
    }

    for (lf, c, d, rep_lf, rep_c, exact_lf, exact_c) in PUBLISHED_ROWS {
        for (base, reported, exact) in [(lf, rep_lf, exact_lf), (c, rep_c, exact_c)] {
            let b = benefit_percent(base, d);
            if (b - exact).abs() > 1e-12 * exact {
                problems.push(format!("benefit({base}, {d}) = {b}, expected {exact}"));
            }
            let (lo, hi) = rounding_interval(base, d);
            if !(lo <= reported && reported <= hi) {
                problems.push(format!("reported {reported}% outside [{lo:.3}, {hi:.3}] for {base} vs {d}"));
            }
        }
    }
    let (lo, hi) = rounding_interval(0.452, 0.400);
    outcome(
        problems.is_empty(),
        format!(
            "recombination error {worst:.1e}; 0.452 vs 0.400 -> {:.3}% (reported 11.62%, rounding range [{lo:.2}, {hi:.2}]); {} problems{}",
            benefit_percent(0.452, 0.400),
            problems.len(),
            problems.first().map(|p| format!(": {p}")).unwrap_or_default()
        ),
    )
}

const TASTE_PEARSON: f64 = 0.9;
const AGREEMENT_TOLERANCE: f64 = 0.2;
const TASTE_GRID: [f64; 6] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Pearson correlation between fitted and planted top-minus-bottom item
/// bias over the items with enough ratings.
fn taste_pearson(m: &FittedModel, train: &Dataset, truth: &synth::GroundTruth) -> f64 {
    let scores = analysis::acquired_taste_scores(m, train, analysis::DEFAULT_MIN_RATINGS).unwrap();
    let top = truth.true_params.n_levels() - 1;
    let planted: Vec<f64> = scores
        .iter()
        .map(|sc| {
            let i = truth.true_params.item_lookup(&sc.item).unwrap();
            truth.true_params.item_bias(top, i) - truth.true_params.item_bias(0, i)
        })
        .collect();
    let fitted: Vec<f64> = scores.iter().map(|sc| sc.d).collect();
    stats::pearson(&planted, &fitted).unwrap_or(f64::NAN)
}

fn analysis_sanity() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();

    // acquired taste: only item biases move between levels
    let cfg = SynthConfig {
        n_users: 500,
        n_items: 100,
        ratings_per_user: (50, 50),
        block_drift: Some(BlockDrift::item_bias_only(0.5)),
        noise_sigma: NoiseSpec::Constant(0.3),
        seed: 11,
        ..SynthConfig::default()
    };
    let (corpus, truth) = synth::generate(&cfg).unwrap();
    let s = split(&corpus, &SplitSpec::default()).unwrap();
    // with a mean-normalized error the default grid (λ ≥ 1) ties levels together
    let tc = TrainConfig {
        model_kind: ModelKind::UserLearned,
        lambda_grid: TASTE_GRID.to_vec(),
        ..TrainConfig::default()
    };
    let m = trainer::fit(&s.train, &s.validation, &tc).unwrap();
    let r = taste_pearson(&m, &s.train, &truth);
    if !(r >= TASTE_PEARSON) {
        problems.push(format!("taste Pearson {r:.3} < {TASTE_PEARSON}"));
    }
    let n_scored = analysis::acquired_taste_scores(&m, &s.train, analysis::DEFAULT_MIN_RATINGS).unwrap().len();

    // agreement: noise shrinks with level, nothing else varies
    let sigmas = [0.6, 0.5, 0.4, 0.3, 0.2];
    let cfg = SynthConfig {
        n_users: 1000,
        n_items: 40,
        ratings_per_user: (40, 40),
        level_drift: 0.0,
        user_bias_sigma: Some(0.0),
        factor_sigma: Some(0.0),
        noise_sigma: NoiseSpec::PerLevel(sigmas.to_vec()),
        trajectory_kind: TrajectoryKind::UniformTime,
        leaver_fraction: 0.0,
        seed: 13,
        ..SynthConfig::default()
    };
    let (corpus, truth) = synth::generate(&cfg).unwrap();
    let planted = truth.as_fitted(&corpus);
    let curve = analysis::agreement_variance(
        &planted,
        &corpus,
        analysis::DEFAULT_MIN_COHORT,
        analysis::DEFAULT_WINDOW,
        analysis::DEFAULT_STEP,
    )
    .unwrap();
    let expected = expected_agreement(&corpus, &truth.true_levels, &sigmas, analysis::DEFAULT_WINDOW);
    let mut worst: f64 = 0.0;
    for p in &curve {
        let want = expected
            .iter()
            .find(|(x, _)| (x - p.experience).abs() < 1e-9)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN);
        let rel = (p.mean_variance - want).abs() / want;
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    if curve.len() != expected.len() || !(worst <= AGREEMENT_TOLERANCE) {
        problems.push(format!(
            "agreement: {} windows (expected {}), worst relative gap {worst:.3}",
            curve.len(),
            expected.len()
        ));
    }
    let at_levels: Vec<f64> = (1..=sigmas.len())
        .filter_map(|e| {
            curve
                .iter()
                .find(|p| (p.experience - e as f64).abs() < 1e-9)
                .map(|p| p.mean_variance)
        })
        .collect();
    let decreasing = at_levels.len() == sigmas.len() && at_levels.windows(2).all(|w| w[1] < w[0]);
    if !decreasing {
        problems.push(format!("agreement at levels 1..5 not decreasing: {at_levels:.3?}"));
    }

    let o = outcome(
        problems.is_empty(),
        format!(
            "taste Pearson {r:.3} over {n_scored} items at lambda {}; agreement worst gap {:.1}% over {} windows, at levels {:.3?} vs planted {:.3?}{}",
            m.lambda,
            100.0 * worst,
            curve.len(),
            at_levels,
            sigmas.map(|s| s * s),
            problems.first().map(|p| format!("; {p}")).unwrap_or_default()
        ),
    );
    within(Duration::from_secs(600), start.elapsed(), o)
}

/// Expected mean cohort variance per window, from the planted noise level
/// of each member: a cohort with noise levels σ_j has expected population
/// variance (n−1)/n² Σσ_j² when every member shares the same mean.
fn expected_agreement(d: &Dataset, levels: &ExperienceAssignment, sigmas: &[f64], window: f64) -> Vec<(f64, f64)> {
    // experience value of each rating: linear in time between the first
    // ratings of consecutive level segments, constant after the last one
    let mut x = vec![0.0; d.len()];
    for u in 0..d.n_users() {
        let pos = d.user_ratings(u);
        let lv = levels.user_levels(u);
        let starts: Vec<usize> = (0..lv.len()).filter(|&j| j == 0 || lv[j] != lv[j - 1]).collect();
        for (k, &s) in starts.iter().enumerate() {
            let end = starts.get(k + 1).copied().unwrap_or(lv.len());
            let t0 = d.ratings()[pos[s]].timestamp as f64;
            for j in s..end {
                let t = d.ratings()[pos[j]].timestamp as f64;
                x[pos[j]] = match starts.get(k + 1) {
                    Some(&n) => {
                        let t1 = d.ratings()[pos[n]].timestamp as f64;
                        let (e0, e1) = (lv[s] as f64 + 1.0, lv[n] as f64 + 1.0);
                        if t1 > t0 { e0 + (e1 - e0) * (t - t0) / (t1 - t0) } else { e0 }
                    }
                    None => lv[s] as f64 + 1.0,
                };
            }
        }
    }
    let per = levels.per_rating(d).unwrap();
    let mut out = Vec::new();
    for step in 0..=40 {
        let centre = 1.0 + step as f64 * 0.1;
        let mut total = 0.0;
        let mut cohorts = 0;
        for i in 0..d.n_items() {
            let members: Vec<usize> = d
                .item_ratings(i)
                .iter()
                .copied()
                .filter(|&p| (x[p] - centre).abs() <= window / 2.0)
                .collect();
            let n = members.len() as f64;
            if members.len() >= analysis::DEFAULT_MIN_COHORT {
                let s2: f64 = members.iter().map(|&p| sigmas[per[p]].powi(2)).sum();
                total += (n - 1.0) / (n * n) * s2;
                cohorts += 1;
            }
        }
        if cohorts > 0 {
            out.push((centre, total / cohorts as f64));
        }
    }
    out
}

fn run_pipeline(dir: &Path, threads: usize) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_expertise");
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let t = threads.to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--out".into(), p("corpus.tsv"), "--truth".into(), p("truth.json"), "--users".into(), "120".into()],
        vec!["split".into(), "--input".into(), p("corpus.tsv"), "--out-dir".into(), p("split")],
        vec!["split".into(), "--input".into(), p("corpus.tsv"), "--out-dir".into(), p("random"), "--scheme".into(), "random".into(), "--seed".into(), "4".into()],
    ];
    let mut all = steps;
    for kind in ["lf", "a", "b", "c", "d"] {
        all.push(vec![
            "fit".into(), "--input".into(), p("split/train.tsv"), "--valid".into(), p("split/validation.tsv"),
            "--model".into(), kind.into(), "--E".into(), "3".into(), "--K".into(), "2".into(),
            "--lambda".into(), "0.1,1,10".into(), "--seed".into(), "3".into(),
            "--out".into(), p(&format!("{kind}.json")), "--assignments".into(), p(&format!("{kind}.csv")),
        ]);
    }
    all.push(vec!["evaluate".into(), "--model".into(), p("d.json"), "--test".into(), p("split/test.tsv"), "--train".into(), p("split/train.tsv"), "--out".into(), p("report.json")]);
    let mut compare = vec!["compare".into(), "--models".into()];
    compare.extend(["lf", "a", "b", "c", "d"].iter().map(|k| p(&format!("{k}.json"))));
    compare.extend(["--test".into(), p("split/test.tsv"), "--train".into(), p("split/train.tsv"), "--out".into(), p("compare.json")]);
    all.push(compare);
    all.push(vec!["analyze".into(), "--model".into(), p("d.json"), "--train".into(), p("split/train.tsv"), "--out-dir".into(), p("analysis"), "--min-ratings".into(), "5".into()]);
    for args in all {
        let out = Command::new(bin)
            .arg("--threads")
            .arg(&t)
            .args(&args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
        if args[0] == "compare" {
            std::fs::write(dir.join("compare.txt"), &out.stdout).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let runs = [("a", 1), ("b", 4), ("c", 1), ("d", 4)];
    for (name, threads) in runs {
        let dir = root.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        if let Err(e) = run_pipeline(&dir, threads) {
            return outcome(false, format!("pipeline with --threads {threads}: {e}"));
        }
    }
    let reference = files_under(&root.path().join("a"));
    let mut differing = Vec::new();
    for (name, _) in &runs[1..] {
        let other = files_under(&root.path().join(name));
        let rel = |p: &Path, base: &str| p.strip_prefix(root.path().join(base)).unwrap().to_path_buf();
        if reference.iter().map(|p| rel(p, "a")).ne(other.iter().map(|p| rel(p, name))) {
            differing.push(format!("run {name}: different file set"));
            continue;
        }
        for (x, y) in reference.iter().zip(&other) {
            if std::fs::read(x).unwrap() != std::fs::read(y).unwrap() {
                differing.push(format!("run {name}: {}", rel(x, "a").display()));
            }
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "{} artifacts compared across 4 runs (threads 1, 4, 1, 4); {} differ{}",
            reference.len(),
            differing.len(),
            differing.first().map(|d| format!(": {d}")).unwrap_or_default()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("dp_oracle_equivalence", dp_oracle),
        ("gradient_correctness", gradient),
        ("monotone_descent", monotone_descent),
        ("monotonicity_constraints", monotonicity_constraints),
        ("single_level_parity", single_level_parity),
        ("noise_free_recovery", noise_free_recovery),
        ("noisy_separation", noisy_separation),
        ("smoothness_regularizer", smoothness),
        ("evaluator_consistency", evaluator_consistency),
        ("analysis_sanity", analysis_sanity),
        ("determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = check();
        let status = if o.passed { "PASS" } else { "FAIL" };
        if !o.passed {
            failed += 1;
        }
        println!("{status} {name} [{:.1}s]: {}", start.elapsed().as_secs_f64(), o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
