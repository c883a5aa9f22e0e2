//! Coordinate-descent training: alternate a quasi-Newton parameter step
//! with an exact assignment step until the assignment stops changing, for
//! every candidate λ, and keep the λ with the lowest validation MSE.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{
    self, validate_assignment, ExperienceAssignment, ModelKind, UserGrid,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluate;
use crate::lbfgs::Lbfgs;
use crate::model::{LevelParams, ModelParams, Objective, ObjectiveValue, Regularization};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of experience levels.
    #[serde(rename = "E")]
    pub levels: usize,
    /// Latent dimensions.
    #[serde(rename = "K")]
    pub factors: usize,
    pub lambda_grid: Vec<f64>,
    pub max_outer_iters: usize,
    /// Relative objective decrease below which a parameter step stops.
    pub inner_tolerance: f64,
    pub inner_max_iters: usize,
    pub lbfgs_memory: usize,
    pub seed: u64,
    pub model_kind: ModelKind,
    /// Initialize each λ from the previous grid point's solution.
    pub warm_start: bool,
    pub user_grid: UserGrid,
    /// Weight of an optional `‖θ‖²` penalty. Zero reproduces the plain
    /// smoothness-regularized objective.
    pub magnitude_penalty: f64,
    /// Half-width of the uniform factor initialization.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            levels: 5,
            factors: 5,
            lambda_grid: vec![1.0, 10.0, 100.0, 1e3, 1e4, 1e5],
            max_outer_iters: 50,
            inner_tolerance: 1e-6,
            inner_max_iters: 1000,
            lbfgs_memory: 10,
            seed: 0,
            model_kind: ModelKind::UserLearned,
            warm_start: false,
            user_grid: UserGrid::Time,
            magnitude_penalty: 0.0,
            init_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels == 0 || self.factors == 0 {
            return bad(format!("E and K must be >= 1 (E={}, K={})", self.levels, self.factors));
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda grid is empty".into());
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad(format!("lambda values must be finite and >= 0: {:?}", self.lambda_grid));
        }
        if !(self.inner_tolerance > 0.0) || self.inner_max_iters == 0 || self.max_outer_iters == 0 {
            return bad("tolerances and iteration caps must be positive".into());
        }
        if self.lbfgs_memory == 0 {
            return bad("lbfgs memory must be >= 1".into());
        }
        if !(self.magnitude_penalty >= 0.0) || !(self.init_scale >= 0.0) {
            return bad("penalty and init scale must be >= 0".into());
        }
        Ok(())
    }

    fn optimizer(&self) -> Lbfgs {
        Lbfgs {
            memory: self.lbfgs_memory,
            max_iters: self.inner_max_iters,
            rel_tolerance: self.inner_tolerance,
            ..Lbfgs::default()
        }
    }

    pub fn regularization(&self, lambda: f64) -> Regularization {
        Regularization {
            lambda,
            magnitude: self.magnitude_penalty,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Init,
    Theta,
    Experience,
}

/// One point of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub step: Step,
    /// Full objective: mean squared error plus weighted penalties.
    pub objective: f64,
    /// Mean squared training error alone.
    pub error: f64,
    pub changes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub validation_mse: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub params: ModelParams,
    /// Aligned with the training set's users (same order as `params.users()`).
    pub assignment: ExperienceAssignment,
    pub kind: ModelKind,
    pub lambda: f64,
    pub train_history: Vec<HistoryEntry>,
    pub lambda_scores: Vec<LambdaScore>,
    pub train_fingerprint: String,
    pub config: TrainConfig,
}

/// α at the training mean, zero biases, small seeded factors shared by every
/// level (so the smoothness penalty starts at exactly zero), and the kind's
/// starting schedule.
pub fn initialize(
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, ExperienceAssignment)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let levels = cfg.model_kind.effective_levels(cfg.levels);
    let mut p = ModelParams::for_dataset(train, levels, cfg.factors);
    let mean = train.mean_rating();
    let block = p.block_len();
    let first_factor = p.user_factor_index(0, 0, 0).min(block);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut level0 = vec![0.0; block];
    level0[0] = mean;
    for v in &mut level0[first_factor..] {
        *v = if cfg.init_scale > 0.0 {
            rng.random_range(-cfg.init_scale..=cfg.init_scale)
        } else {
            0.0
        };
    }
    for e in 0..levels {
        p.theta_mut()[e * block..(e + 1) * block].copy_from_slice(&level0);
    }
    let assignment = initial_assignment(cfg.model_kind, train, levels, cfg.user_grid);
    Ok((p, assignment))
}

fn initial_assignment(
    kind: ModelKind,
    train: &Dataset,
    levels: usize,
    grid: UserGrid,
) -> ExperienceAssignment {
    match kind {
        ModelKind::Flat => ExperienceAssignment::constant(train, 0),
        ModelKind::CommunityUniform | ModelKind::CommunityLearned => {
            assign::uniform_community_schedule(train, levels)
        }
        ModelKind::UserUniform | ModelKind::UserLearned => {
            assign::uniform_user_schedule(train, levels, grid)
        }
    }
}

fn theta_step_with(p: &ModelParams, obj: &Objective, cfg: &TrainConfig) -> Result<ModelParams> {
    let mut scratch = p.clone();
    let result = cfg.optimizer().minimize(p.theta().to_vec(), |x, g| {
        scratch.theta_mut().copy_from_slice(x);
        obj.evaluate_with_gradient(&scratch, g).total
    });
    match result {
        Ok(min) => Ok(p.with_theta(min.x)),
        Err(nf) => Err(Error::Divergence {
            block: nf
                .coordinate
                .map_or_else(|| "objective".to_string(), |c| p.block_name(c)),
        }),
    }
}

/// Minimizes the objective over parameters with the assignment held fixed.
/// Never returns parameters with a higher objective than `p`.
pub fn theta_step(
    p: &ModelParams,
    a: &ExperienceAssignment,
    train: &Dataset,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    let obj = Objective::new(p, train, a, cfg.regularization(lambda))?;
    theta_step_with(p, &obj, cfg)
}

/// Re-assigns levels with parameters held fixed. Learned kinds keep a
/// sequence from `current` unless the optimum is strictly cheaper.
pub fn e_step(
    p: &ModelParams,
    train: &Dataset,
    kind: ModelKind,
    grid: UserGrid,
    current: Option<&ExperienceAssignment>,
) -> Result<ExperienceAssignment> {
    if kind.is_learned() {
        assign::learned_assignment(kind, p, train, current)
    } else {
        assign::assign_all_with(kind, p, train, grid)
    }
}

fn entry(iteration: usize, step: Step, v: ObjectiveValue, changes: usize) -> HistoryEntry {
    HistoryEntry {
        iteration,
        step,
        objective: v.total,
        error: v.error,
        changes,
    }
}

/// Trains one λ to an assignment fixed point (or the iteration cap).
pub fn fit_lambda(
    train: &Dataset,
    cfg: &TrainConfig,
    lambda: f64,
    start: Option<(ModelParams, ExperienceAssignment)>,
) -> Result<FittedModel> {
    cfg.validate()?;
    let (mut p, mut a) = match start {
        Some(s) => s,
        None => initialize(train, cfg)?,
    };
    let kind = cfg.model_kind;
    let reg = cfg.regularization(lambda);
    let mut obj = Objective::new(&p, train, &a, reg)?;
    let mut current = obj.evaluate(&p);
    let mut history = vec![entry(0, Step::Init, current, 0)];

    for iteration in 1..=cfg.max_outer_iters {
        p = theta_step_with(&p, &obj, cfg)?;
        current = obj.evaluate(&p);
        history.push(entry(iteration, Step::Theta, current, 0));

        let candidate = e_step(&p, train, kind, cfg.user_grid, Some(&a))?;
        let mut changes = candidate.changes_from(&a);
        if changes > 0 {
            let next_obj = Objective::new(&p, train, &candidate, reg)?;
            let next = next_obj.evaluate(&p);
            if next.total <= current.total {
                a = candidate;
                obj = next_obj;
                current = next;
            } else {
                // a reassignment that only wins below rounding error
                changes = 0;
            }
        }
        history.push(entry(iteration, Step::Experience, current, changes));
        log::info!(
            "iter={iteration} obj={:.9} changed={changes} lambda={lambda}",
            current.total
        );
        if changes == 0 {
            break;
        }
    }

    Ok(FittedModel {
        params: p,
        assignment: a,
        kind,
        lambda,
        train_history: history,
        lambda_scores: Vec::new(),
        train_fingerprint: train.fingerprint(),
        config: cfg.clone(),
    })
}

/// Fits every λ in the grid and returns the model with the lowest
/// validation MSE. With a single effective level the smoothness penalty
/// vanishes, so only the first λ is fitted.
pub fn fit(train: &Dataset, validation: &Dataset, cfg: &TrainConfig) -> Result<FittedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let single_level = cfg.model_kind.effective_levels(cfg.levels) == 1;
    let grid: Vec<f64> = if single_level {
        cfg.lambda_grid[..1].to_vec()
    } else {
        cfg.lambda_grid.clone()
    };

    let score = |fitted: Result<FittedModel>| -> (Result<FittedModel>, Option<f64>) {
        match fitted {
            Ok(m) if !validation.is_empty() => match evaluate::mse(&m, validation, train) {
                Ok(report) => (Ok(m), Some(report.mse)),
                Err(e) => (Err(e), None),
            },
            other => (other, None),
        }
    };

    let outcomes: Vec<(Result<FittedModel>, Option<f64>)> = if cfg.warm_start {
        let mut out: Vec<(Result<FittedModel>, Option<f64>)> = Vec::with_capacity(grid.len());
        let mut start = None;
        for &lambda in &grid {
            let fitted = fit_lambda(train, cfg, lambda, start.clone());
            if let Ok(m) = &fitted {
                start = Some((m.params.clone(), m.assignment.clone()));
            }
            out.push(score(fitted));
        }
        out
    } else {
        grid.par_iter()
            .map(|&lambda| score(fit_lambda(train, cfg, lambda, None)))
            .collect()
    };

    let lambda_scores: Vec<LambdaScore> = grid
        .iter()
        .zip(&outcomes)
        .map(|(&lambda, (res, mse))| LambdaScore {
            lambda,
            validation_mse: *mse,
            failure: res.as_ref().err().map(|e| e.to_string()),
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (idx, (res, mse)) in outcomes.iter().enumerate() {
        if res.is_err() {
            continue;
        }
        let s = mse.filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((idx, s));
        }
    }
    let Some((idx, _)) = best else {
        let diagnostics: Vec<String> = lambda_scores
            .iter()
            .map(|s| format!("lambda={}: {}", s.lambda, s.failure.as_deref().unwrap_or("?")))
            .collect();
        return Err(Error::TrainingFailed(diagnostics.join("; ")));
    };
    let mut model = outcomes
        .into_iter()
        .nth(idx)
        .and_then(|(res, _)| res.ok())
        .expect("selected model exists");
    model.lambda_scores = lambda_scores;
    Ok(model)
}

impl FittedModel {
    pub fn n_levels(&self) -> usize {
        self.params.n_levels()
    }

    /// Checks the assignment against the kind's monotonicity constraint.
    pub fn validate(&self, train: &Dataset) -> Result<()> {
        self.check_train(train)?;
        validate_assignment(self.kind, &self.assignment, train, self.n_levels())
    }

    /// Confirms `train` is the corpus this model was fitted on.
    pub fn check_train(&self, train: &Dataset) -> Result<()> {
        if train.users() != self.params.users() || train.items() != self.params.items() {
            return Err(Error::Mismatch(
                "training set vocabularies differ from the model's".into(),
            ));
        }
        Ok(())
    }

    /// Training-set levels in chronological order for `user`.
    pub fn user_levels(&self, user: usize) -> &[usize] {
        self.assignment.user_levels(user)
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            model_kind: self.kind,
            levels_count: self.params.n_levels(),
            factors: self.params.n_factors(),
            lambda: self.lambda,
            levels: (0..self.params.n_levels()).map(|e| self.params.level(e)).collect(),
            assignment: self
                .params
                .users()
                .iter()
                .enumerate()
                .map(|(u, id)| {
                    let seq = self
                        .assignment
                        .user_levels(u)
                        .iter()
                        .map(|l| l + 1)
                        .collect();
                    (id.clone(), seq)
                })
                .collect(),
            train_history: self.train_history.clone(),
            lambda_scores: self.lambda_scores.clone(),
            train_fingerprint: self.train_fingerprint.clone(),
            config: self.config.clone(),
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<FittedModel> {
        if doc.levels.len() != doc.levels_count {
            return Err(Error::InvalidConfig(format!(
                "E={} but {} levels present",
                doc.levels_count,
                doc.levels.len()
            )));
        }
        let params = ModelParams::from_levels(&doc.levels, doc.factors)?;
        let mut levels = Vec::with_capacity(params.users().len());
        for id in params.users() {
            let seq = doc.assignment.get(id).ok_or_else(|| {
                Error::InvalidConfig(format!("assignment missing for user {id}"))
            })?;
            if seq.iter().any(|&l| l == 0) {
                return Err(Error::InvalidConfig(format!(
                    "levels are 1-based; user {id} has level 0"
                )));
            }
            levels.push(seq.iter().map(|l| l - 1).collect());
        }
        Ok(FittedModel {
            params,
            assignment: ExperienceAssignment::from_levels(levels),
            kind: doc.model_kind,
            lambda: doc.lambda,
            train_history: doc.train_history,
            lambda_scores: doc.lambda_scores,
            train_fingerprint: doc.train_fingerprint,
            config: doc.config,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<FittedModel> {
        FittedModel::from_document(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FittedModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FittedModel::from_json(&text)
    }
}

/// Serialized form of a [`FittedModel`]. Assignment levels are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub model_kind: ModelKind,
    #[serde(rename = "E")]
    pub levels_count: usize,
    #[serde(rename = "K")]
    pub factors: usize,
    pub lambda: f64,
    pub levels: Vec<LevelParams>,
    pub assignment: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub train_history: Vec<HistoryEntry>,
    #[serde(default)]
    pub lambda_scores: Vec<LambdaScore>,
    #[serde(default)]
    pub train_fingerprint: String,
    #[serde(default)]
    pub config: TrainConfig,
}
