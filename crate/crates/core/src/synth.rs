//! Synthetic corpora with planted parameters and experience trajectories,
//! plus the brute-force oracles used to check the fitted pipeline.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assign::{CostMatrix, ExperienceAssignment, ModelKind};
use crate::dataset::{Dataset, Record, NORMALIZED_MAX};
use crate::error::{Error, Result};
use crate::model::{LevelParams, ModelParams};
use crate::trainer::{FittedModel, TrainConfig};

const DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Levels advance at equal shares of the history.
    UniformTime,
    /// Levels advance at random personal change points.
    Staircase,
    /// Every rating is at the top level.
    AlreadyExpert,
    /// Advances at random points but never reaches the top level.
    NeverExpert,
    /// Each user draws one of the kinds above.
    Mixed,
}

/// Rating noise: one standard deviation, or one per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    Constant(f64),
    PerLevel(Vec<f64>),
}

impl NoiseSpec {
    pub fn sigma(&self, level: usize) -> f64 {
        match self {
            NoiseSpec::Constant(s) => *s,
            NoiseSpec::PerLevel(v) => v[level.min(v.len() - 1)],
        }
    }
}

/// Relative drift per parameter block. A block's step between adjacent
/// levels has standard deviation `drift × block scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDrift {
    pub alpha: f64,
    pub user_bias: f64,
    pub item_bias: f64,
    pub user_factors: f64,
    pub item_factors: f64,
}

impl BlockDrift {
    pub fn uniform(drift: f64) -> Self {
        BlockDrift {
            alpha: drift,
            user_bias: drift,
            item_bias: drift,
            user_factors: drift,
            item_factors: drift,
        }
    }

    /// Only item biases move between levels.
    pub fn item_bias_only(drift: f64) -> Self {
        BlockDrift {
            item_bias: drift,
            ..BlockDrift::uniform(0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    #[serde(rename = "E")]
    pub levels: usize,
    #[serde(rename = "K")]
    pub factors: usize,
    /// Inclusive range of ratings per user.
    pub ratings_per_user: (usize, usize),
    pub noise_sigma: NoiseSpec,
    /// Relative drift applied to every block, unless `block_drift` is set.
    pub level_drift: f64,
    pub block_drift: Option<BlockDrift>,
    pub trajectory_kind: TrajectoryKind,
    pub leaver_fraction: f64,
    /// Leavers progress this many times slower.
    pub leaver_slowdown: f64,
    pub seed: u64,
    pub alpha: f64,
    /// Reference scale of α's drift.
    pub alpha_sigma: f64,
    /// Scale of user and item biases.
    pub bias_sigma: f64,
    pub user_bias_sigma: Option<f64>,
    pub item_bias_sigma: Option<f64>,
    /// Scale of factor entries; defaults to `0.3/√K`.
    pub factor_sigma: Option<f64>,
    pub horizon_days: i64,
    /// Leavers stop rating at least this long before the corpus ends.
    pub retention_gap_days: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_items: 100,
            levels: 5,
            factors: 5,
            ratings_per_user: (20, 60),
            noise_sigma: NoiseSpec::Constant(0.3),
            level_drift: 0.25,
            block_drift: None,
            trajectory_kind: TrajectoryKind::Mixed,
            leaver_fraction: 0.2,
            leaver_slowdown: 2.0,
            seed: 0,
            alpha: 3.5,
            alpha_sigma: 0.1,
            bias_sigma: 0.3,
            user_bias_sigma: None,
            item_bias_sigma: None,
            factor_sigma: None,
            horizon_days: 1500,
            retention_gap_days: 182,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_users == 0 || self.n_items == 0 || self.levels == 0 || self.factors == 0 {
            return bad("n_users, n_items, E and K must be >= 1");
        }
        let (lo, hi) = self.ratings_per_user;
        if lo == 0 || lo > hi {
            return bad("ratings_per_user must be a non-empty range starting at >= 1");
        }
        let sigmas: Vec<f64> = match &self.noise_sigma {
            NoiseSpec::Constant(s) => vec![*s],
            NoiseSpec::PerLevel(v) => v.clone(),
        };
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.leaver_fraction) {
            return bad("leaver_fraction must lie in [0, 1]");
        }
        if !(self.level_drift >= 0.0) || !(self.leaver_slowdown >= 1.0) {
            return bad("level_drift must be >= 0 and leaver_slowdown >= 1");
        }
        if self.retention_gap_days < 0 || self.horizon_days <= self.retention_gap_days + 60 {
            return bad("horizon_days must exceed retention_gap_days by more than 60");
        }
        Ok(())
    }

    fn factor_scale(&self) -> f64 {
        self.factor_sigma
            .unwrap_or(0.3 / (self.factors as f64).sqrt())
    }

    fn drift(&self) -> BlockDrift {
        self.block_drift
            .clone()
            .unwrap_or_else(|| BlockDrift::uniform(self.level_drift))
    }
}

/// Planted parameters and trajectories behind a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Parameters over the corpus vocabularies.
    pub true_params: ModelParams,
    /// Aligned with the corpus' users.
    pub true_levels: ExperienceAssignment,
    pub leaver_flags: BTreeMap<String, bool>,
    pub noise_by_level: Vec<f64>,
    /// Ratings whose noisy value fell outside `[0, 5]` and were clamped.
    pub clamped: usize,
}

/// JSON form of [`GroundTruth`]; levels are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDocument {
    #[serde(rename = "E")]
    pub levels_count: usize,
    #[serde(rename = "K")]
    pub factors: usize,
    pub levels: Vec<LevelParams>,
    pub assignment: BTreeMap<String, Vec<usize>>,
    pub leaver_flags: BTreeMap<String, bool>,
    pub noise_by_level: Vec<f64>,
    pub clamped: usize,
}

impl GroundTruth {
    pub fn to_document(&self) -> GroundTruthDocument {
        let p = &self.true_params;
        GroundTruthDocument {
            levels_count: p.n_levels(),
            factors: p.n_factors(),
            levels: (0..p.n_levels()).map(|e| p.level(e)).collect(),
            assignment: p
                .users()
                .iter()
                .enumerate()
                .map(|(u, id)| {
                    (id.clone(), self.true_levels.user_levels(u).iter().map(|l| l + 1).collect())
                })
                .collect(),
            leaver_flags: self.leaver_flags.clone(),
            noise_by_level: self.noise_by_level.clone(),
            clamped: self.clamped,
        }
    }

    pub fn from_document(doc: GroundTruthDocument) -> Result<GroundTruth> {
        let true_params = ModelParams::from_levels(&doc.levels, doc.factors)?;
        let mut levels = Vec::new();
        for id in true_params.users() {
            let seq = doc
                .assignment
                .get(id)
                .ok_or_else(|| Error::InvalidConfig(format!("no planted levels for {id}")))?;
            levels.push(seq.iter().map(|l| l.saturating_sub(1)).collect());
        }
        Ok(GroundTruth {
            true_params,
            true_levels: ExperienceAssignment::from_levels(levels),
            leaver_flags: doc.leaver_flags,
            noise_by_level: doc.noise_by_level,
            clamped: doc.clamped,
        })
    }

    /// The planted model as a fitted user-learned model over `corpus`.
    pub fn as_fitted(&self, corpus: &Dataset) -> FittedModel {
        FittedModel {
            params: self.true_params.clone(),
            assignment: self.true_levels.clone(),
            kind: ModelKind::UserLearned,
            lambda: 0.0,
            train_history: Vec::new(),
            lambda_scores: Vec::new(),
            train_fingerprint: corpus.fingerprint(),
            config: TrainConfig {
                levels: self.true_params.n_levels(),
                factors: self.true_params.n_factors(),
                ..TrainConfig::default()
            },
        }
    }

    /// Fraction of ratings clamped into `[0, 5]`.
    pub fn clamp_rate(&self, corpus: &Dataset) -> f64 {
        self.clamped as f64 / corpus.len().max(1) as f64
    }
}

fn gaussian(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd.max(0.0)).expect("finite standard deviation")
}

/// Monotone levels for one user of `n` ratings. Leavers replay the same
/// process stretched by `slowdown`, truncated to `n` ratings.
fn trajectory(
    kind: TrajectoryKind,
    n: usize,
    levels: usize,
    slowdown: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let top = levels - 1;
    let virtual_len = n as f64 * slowdown;
    let staircase = |steps: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut cuts: Vec<f64> = (0..steps).map(|_| rng.random_range(0.0..virtual_len)).collect();
        cuts.sort_by(f64::total_cmp);
        (0..n)
            .map(|j| cuts.iter().filter(|&&c| c <= j as f64).count())
            .collect()
    };
    match kind {
        TrajectoryKind::UniformTime => (0..n)
            .map(|j| ((j as f64 * levels as f64 / virtual_len) as usize).min(top))
            .collect(),
        TrajectoryKind::Staircase => staircase(top, rng),
        TrajectoryKind::AlreadyExpert => vec![top; n],
        TrajectoryKind::NeverExpert => staircase(top.saturating_sub(1), rng),
        TrajectoryKind::Mixed => unreachable!("resolved per user"),
    }
}

fn pick_kind(kind: TrajectoryKind, rng: &mut ChaCha8Rng) -> TrajectoryKind {
    if kind != TrajectoryKind::Mixed {
        return kind;
    }
    match rng.random_range(0..10) {
        0..=3 => TrajectoryKind::Staircase,
        4..=5 => TrajectoryKind::UniformTime,
        6..=7 => TrajectoryKind::AlreadyExpert,
        _ => TrajectoryKind::NeverExpert,
    }
}

/// Draws a corpus and the parameters that generated it.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (e_count, k) = (cfg.levels, cfg.factors);
    let users: Vec<String> = (0..cfg.n_users).map(|u| format!("u{u:05}")).collect();
    let items: Vec<String> = (0..cfg.n_items).map(|i| format!("i{i:05}")).collect();

    let user_sd = cfg.user_bias_sigma.unwrap_or(cfg.bias_sigma);
    let item_sd = cfg.item_bias_sigma.unwrap_or(cfg.bias_sigma);
    let factor_sd = cfg.factor_scale();
    let mut full = ModelParams::zeros(users.clone(), items.clone(), e_count, k);

    // level 1
    {
        let theta = full.theta_mut();
        theta[0] = cfg.alpha;
    }
    let fill = |p: &mut ModelParams, idx: usize, dist: &Normal<f64>, rng: &mut ChaCha8Rng| {
        p.theta_mut()[idx] = dist.sample(rng);
    };
    for u in 0..users.len() {
        let i = full.user_bias_index(0, u);
        fill(&mut full, i, &gaussian(user_sd), &mut rng);
    }
    for it in 0..items.len() {
        let i = full.item_bias_index(0, it);
        fill(&mut full, i, &gaussian(item_sd), &mut rng);
    }
    for u in 0..users.len() {
        for f in 0..k {
            let i = full.user_factor_index(0, u, f);
            fill(&mut full, i, &gaussian(factor_sd), &mut rng);
        }
    }
    for it in 0..items.len() {
        for f in 0..k {
            let i = full.item_factor_index(0, it, f);
            fill(&mut full, i, &gaussian(factor_sd), &mut rng);
        }
    }

    // later levels: a random walk in parameter space
    let drift = cfg.drift();
    let block = full.block_len();
    let user_factor_start = full.user_factor_index(0, 0, 0);
    let item_factor_start = full.item_factor_index(0, 0, 0);
    let item_bias_start = full.item_bias_index(0, 0);
    for e in 1..e_count {
        for j in 0..block {
            let sd = if j == 0 {
                drift.alpha * cfg.alpha_sigma
            } else if j < item_bias_start {
                drift.user_bias * user_sd
            } else if j < user_factor_start {
                drift.item_bias * item_sd
            } else if j < item_factor_start {
                drift.user_factors * factor_sd
            } else {
                drift.item_factors * factor_sd
            };
            let step = gaussian(sd).sample(&mut rng);
            let prev = full.theta()[(e - 1) * block + j];
            full.theta_mut()[e * block + j] = prev + step;
        }
    }

    let horizon = cfg.horizon_days * DAY;
    let gap = cfg.retention_gap_days * DAY;
    let mut records = Vec::new();
    let mut planted: HashMap<(usize, usize), usize> = HashMap::new();
    let mut leaver_flags = BTreeMap::new();
    let mut clamped = 0;

    for (u, uid) in users.iter().enumerate() {
        let (lo, hi) = cfg.ratings_per_user;
        let n = rng.random_range(lo..=hi).min(cfg.n_items);
        let kind = pick_kind(cfg.trajectory_kind, &mut rng);
        let leaver = rng.random_bool(cfg.leaver_fraction);
        leaver_flags.insert(uid.clone(), leaver);
        let slowdown = if leaver { cfg.leaver_slowdown } else { 1.0 };
        let levels = trajectory(kind, n, e_count, slowdown, &mut rng);

        let end = if leaver {
            horizon - gap - rng.random_range(30 * DAY..=200 * DAY)
        } else {
            horizon - rng.random_range(0..=30 * DAY)
        };
        let mut spacing = rng.random_range(DAY / 2..=3 * DAY);
        if n > 1 {
            spacing = spacing.min(end / (n as i64 - 1));
        }
        let start = end - (n as i64 - 1) * spacing;

        let chosen = index::sample(&mut rng, cfg.n_items, n);
        for (j, it) in chosen.iter().enumerate() {
            let e = levels[j];
            let clean = full.predict_indexed(e, Some(u), Some(it));
            let noisy = clean + gaussian(cfg.noise_sigma.sigma(e)).sample(&mut rng);
            let value = noisy.clamp(0.0, NORMALIZED_MAX);
            if value != noisy {
                clamped += 1;
            }
            planted.insert((u, it), e);
            records.push(Record {
                user: uid.clone(),
                item: items[it].clone(),
                raw_value: value,
                timestamp: start + j as i64 * spacing,
            });
        }
    }

    let corpus = Dataset::from_records(records, NORMALIZED_MAX)?;

    // restrict the planted parameters to items that were actually rated
    let levels_kept: Vec<LevelParams> = (0..e_count)
        .map(|e| {
            let mut lp = full.level(e);
            lp.item_bias.retain(|id, _| corpus.item_lookup(id).is_some());
            lp.item_factors.retain(|id, _| corpus.item_lookup(id).is_some());
            lp
        })
        .collect();
    let true_params = ModelParams::from_levels(&levels_kept, k)?;

    let true_levels = ExperienceAssignment::from_levels(
        (0..corpus.n_users())
            .map(|cu| {
                let u = users
                    .binary_search(&corpus.users()[cu])
                    .expect("corpus user was generated");
                corpus
                    .user_ratings(cu)
                    .iter()
                    .map(|&pos| {
                        let it = items
                            .binary_search(&corpus.items()[corpus.ratings()[pos].item])
                            .expect("corpus item was generated");
                        planted[&(u, it)]
                    })
                    .collect()
            })
            .collect(),
    );

    let noise_by_level = (0..e_count).map(|e| cfg.noise_sigma.sigma(e)).collect();
    Ok((
        corpus,
        GroundTruth {
            true_params,
            true_levels,
            leaver_flags,
            noise_by_level,
            clamped,
        },
    ))
}

/// Exhaustive minimum over every non-decreasing level sequence, visited in
/// lexicographic order so the first strict minimum is the lexicographically
/// smallest optimum. Limited to `n ≤ 12`, `E ≤ 5`.
pub fn brute_force_assign(costs: &CostMatrix) -> Result<Vec<usize>> {
    let (levels, n) = (costs.levels(), costs.len());
    if n > 12 || levels > 5 {
        return Err(Error::InvalidConfig(format!(
            "brute force limited to n <= 12 and E <= 5, got n={n}, E={levels}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut seq = vec![0usize; n];
    let mut best = seq.clone();
    let mut best_cost = costs.sequence_cost(&seq);
    loop {
        // next non-decreasing sequence in lexicographic order
        let Some(pos) = (0..n).rev().find(|&t| seq[t] + 1 < levels) else {
            break;
        };
        let bumped = seq[pos] + 1;
        for s in &mut seq[pos..] {
            *s = bumped;
        }
        let cost = costs.sequence_cost(&seq);
        if cost < best_cost {
            best_cost = cost;
            best.clone_from(&seq);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// Spearman correlation of planted and fitted levels over the training
    /// ratings; 0 when undefined.
    pub score: f64,
    /// True when either side was constant, leaving the correlation undefined.
    pub degenerate: bool,
}

/// Rank agreement between the planted levels and the fitted levels of the
/// training ratings. Ratings are matched on `(user, item, timestamp)`.
pub fn recovery_score(
    truth: &GroundTruth,
    corpus: &Dataset,
    fitted: &FittedModel,
    train: &Dataset,
) -> Result<RecoveryScore> {
    let planted_per = truth.true_levels.per_rating(corpus)?;
    let mut planted_at: HashMap<(&str, &str, i64), usize> = HashMap::new();
    for (pos, r) in corpus.ratings().iter().enumerate() {
        planted_at.insert(
            (corpus.user_id(r.user), corpus.item_id(r.item), r.timestamp),
            planted_per[pos],
        );
    }
    let fitted_per = fitted.assignment.per_rating(train)?;
    let mut planted = Vec::with_capacity(train.len());
    let mut recovered = Vec::with_capacity(train.len());
    for (pos, r) in train.ratings().iter().enumerate() {
        let key = (train.user_id(r.user), train.item_id(r.item), r.timestamp);
        let level = planted_at.get(&key).ok_or_else(|| {
            Error::Mismatch(format!("training rating {key:?} is not in the synthetic corpus"))
        })?;
        planted.push(*level as f64);
        recovered.push(fitted_per[pos] as f64);
    }
    Ok(match crate::stats::spearman(&planted, &recovered) {
        Some(score) => RecoveryScore {
            score,
            degenerate: false,
        },
        None => RecoveryScore {
            score: 0.0,
            degenerate: true,
        },
    })
}
