//! Per-level latent-factor parameters, prediction, and the training objective.
//!
//! All parameters live in one flat vector so the optimizer, the gradient,
//! and serialized models share a single layout. The order is level-major;
//! within a level:
//!
//! ```text
//! alpha | user biases (sorted user id) | item biases (sorted item id)
//!       | user factors (user-major, K each) | item factors (item-major, K each)
//! ```

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::ExperienceAssignment;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::stats::CompensatedSum;

/// Ratings below this count are scored sequentially.
const PAR_THRESHOLD: usize = 8192;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    users: Vec<String>,
    items: Vec<String>,
    levels: usize,
    factors: usize,
    theta: Vec<f64>,
}

/// One level's parameters keyed by id, as serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub alpha: f64,
    pub user_bias: BTreeMap<String, f64>,
    pub item_bias: BTreeMap<String, f64>,
    pub user_factors: BTreeMap<String, Vec<f64>>,
    pub item_factors: BTreeMap<String, Vec<f64>>,
}

impl ModelParams {
    /// All-zero parameters over the given (sorted, deduplicated) vocabularies.
    pub fn zeros(users: Vec<String>, items: Vec<String>, levels: usize, factors: usize) -> Self {
        assert!(levels >= 1, "at least one experience level");
        assert!(factors >= 1, "at least one latent factor");
        debug_assert!(users.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(items.windows(2).all(|w| w[0] < w[1]));
        let block = 1 + users.len() + items.len() + (users.len() + items.len()) * factors;
        ModelParams {
            theta: vec![0.0; block * levels],
            users,
            items,
            levels,
            factors,
        }
    }

    /// Zero parameters over a dataset's vocabularies.
    pub fn for_dataset(d: &Dataset, levels: usize, factors: usize) -> Self {
        Self::zeros(d.users().to_vec(), d.items().to_vec(), levels, factors)
    }

    pub fn n_levels(&self) -> usize {
        self.levels
    }

    pub fn n_factors(&self) -> usize {
        self.factors
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn user_lookup(&self, id: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }

    pub fn item_lookup(&self, id: &str) -> Option<usize> {
        self.items.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }

    /// Scalars per level.
    pub fn block_len(&self) -> usize {
        1 + self.users.len() + self.items.len() + (self.users.len() + self.items.len()) * self.factors
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), self.theta.len());
        ModelParams {
            theta,
            ..self.clone()
        }
    }

    pub fn level_slice(&self, level: usize) -> &[f64] {
        let b = self.block_len();
        &self.theta[level * b..(level + 1) * b]
    }

    fn offsets(&self) -> Offsets {
        Offsets::new(self.users.len(), self.items.len(), self.factors)
    }

    pub fn alpha(&self, level: usize) -> f64 {
        self.theta[level * self.block_len()]
    }

    pub fn user_bias(&self, level: usize, user: usize) -> f64 {
        self.theta[level * self.block_len() + self.offsets().user_bias + user]
    }

    pub fn item_bias(&self, level: usize, item: usize) -> f64 {
        self.theta[level * self.block_len() + self.offsets().item_bias + item]
    }

    pub fn user_factors(&self, level: usize, user: usize) -> &[f64] {
        let start = level * self.block_len() + self.offsets().user_factors + user * self.factors;
        &self.theta[start..start + self.factors]
    }

    pub fn item_factors(&self, level: usize, item: usize) -> &[f64] {
        let start = level * self.block_len() + self.offsets().item_factors + item * self.factors;
        &self.theta[start..start + self.factors]
    }

    pub fn alpha_index(&self, level: usize) -> usize {
        level * self.block_len()
    }

    pub fn user_bias_index(&self, level: usize, user: usize) -> usize {
        level * self.block_len() + self.offsets().user_bias + user
    }

    pub fn item_bias_index(&self, level: usize, item: usize) -> usize {
        level * self.block_len() + self.offsets().item_bias + item
    }

    pub fn user_factor_index(&self, level: usize, user: usize, k: usize) -> usize {
        level * self.block_len() + self.offsets().user_factors + user * self.factors + k
    }

    pub fn item_factor_index(&self, level: usize, item: usize, k: usize) -> usize {
        level * self.block_len() + self.offsets().item_factors + item * self.factors + k
    }

    /// Human-readable name of the parameter block holding flat index `idx`.
    pub fn block_name(&self, idx: usize) -> String {
        let b = self.block_len();
        let (level, local) = (idx / b, idx % b);
        let o = self.offsets();
        let what = if local < o.user_bias {
            "alpha".to_string()
        } else if local < o.item_bias {
            format!("user_bias[{}]", self.users[local - o.user_bias])
        } else if local < o.user_factors {
            format!("item_bias[{}]", self.items[local - o.item_bias])
        } else if local < o.item_factors {
            format!("user_factors[{}]", self.users[(local - o.user_factors) / self.factors])
        } else {
            format!("item_factors[{}]", self.items[(local - o.item_factors) / self.factors])
        };
        format!("level {} {}", level + 1, what)
    }

    /// Prediction at a 0-based `level` for model-space indices. A `None`
    /// user or item contributes zero bias and a zero factor vector.
    pub fn predict_indexed(&self, level: usize, user: Option<usize>, item: Option<usize>) -> f64 {
        let mut score = self.alpha(level);
        if let Some(u) = user {
            score += self.user_bias(level, u);
        }
        if let Some(i) = item {
            score += self.item_bias(level, i);
        }
        if let (Some(u), Some(i)) = (user, item) {
            score += dot(self.user_factors(level, u), self.item_factors(level, i));
        }
        score
    }

    /// `α(e) + β_u(e) + β_i(e) + ⟨γ_u(e), γ_i(e)⟩` for a 0-based level,
    /// unclamped. Unknown ids fall back to zero contributions.
    pub fn predict(&self, level: usize, user: &str, item: &str) -> f64 {
        assert!(level < self.levels, "level {level} out of range");
        self.predict_indexed(level, self.user_lookup(user), self.item_lookup(item))
    }

    pub fn level(&self, level: usize) -> LevelParams {
        LevelParams {
            alpha: self.alpha(level),
            user_bias: self
                .users
                .iter()
                .enumerate()
                .map(|(u, id)| (id.clone(), self.user_bias(level, u)))
                .collect(),
            item_bias: self
                .items
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), self.item_bias(level, i)))
                .collect(),
            user_factors: self
                .users
                .iter()
                .enumerate()
                .map(|(u, id)| (id.clone(), self.user_factors(level, u).to_vec()))
                .collect(),
            item_factors: self
                .items
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), self.item_factors(level, i).to_vec()))
                .collect(),
        }
    }

    /// Rebuilds flat parameters from keyed levels. Every level must share the
    /// same key sets and factor length.
    pub fn from_levels(levels: &[LevelParams], factors: usize) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::InvalidConfig("model has no levels".into()))?;
        let users: Vec<String> = first.user_bias.keys().cloned().collect();
        let items: Vec<String> = first.item_bias.keys().cloned().collect();
        let mut p = ModelParams::zeros(users, items, levels.len(), factors.max(1));
        for (e, lp) in levels.iter().enumerate() {
            let same_keys = lp.user_bias.keys().eq(p.users.iter())
                && lp.item_bias.keys().eq(p.items.iter())
                && lp.user_factors.keys().eq(p.users.iter())
                && lp.item_factors.keys().eq(p.items.iter());
            if !same_keys {
                return Err(Error::InvalidConfig(format!(
                    "level {} does not share the user/item key sets of level 1",
                    e + 1
                )));
            }
            let alpha = p.alpha_index(e);
            p.theta[alpha] = lp.alpha;
            for (u, v) in lp.user_bias.values().enumerate() {
                let idx = p.user_bias_index(e, u);
                p.theta[idx] = *v;
            }
            for (i, v) in lp.item_bias.values().enumerate() {
                let idx = p.item_bias_index(e, i);
                p.theta[idx] = *v;
            }
            for (u, f) in lp.user_factors.values().enumerate() {
                if f.len() != p.factors {
                    return Err(Error::InvalidConfig(format!(
                        "factor length {} != K={}",
                        f.len(),
                        p.factors
                    )));
                }
                for (k, v) in f.iter().enumerate() {
                    let idx = p.user_factor_index(e, u, k);
                    p.theta[idx] = *v;
                }
            }
            for (i, f) in lp.item_factors.values().enumerate() {
                if f.len() != p.factors {
                    return Err(Error::InvalidConfig(format!(
                        "factor length {} != K={}",
                        f.len(),
                        p.factors
                    )));
                }
                for (k, v) in f.iter().enumerate() {
                    let idx = p.item_factor_index(e, i, k);
                    p.theta[idx] = *v;
                }
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug)]
struct Offsets {
    user_bias: usize,
    item_bias: usize,
    user_factors: usize,
    item_factors: usize,
}

impl Offsets {
    fn new(users: usize, items: usize, factors: usize) -> Self {
        let user_bias = 1;
        let item_bias = user_bias + users;
        let user_factors = item_bias + items;
        let item_factors = user_factors + users * factors;
        Offsets {
            user_bias,
            item_bias,
            user_factors,
            item_factors,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_e ‖Θ_e − Θ_{e+1}‖²` over every scalar parameter.
pub fn smoothness_penalty(p: &ModelParams) -> f64 {
    let mut acc = CompensatedSum::default();
    for e in 0..p.n_levels().saturating_sub(1) {
        for (a, b) in p.level_slice(e).iter().zip(p.level_slice(e + 1)) {
            acc.add((a - b) * (a - b));
        }
    }
    acc.value()
}

/// Regularization weights of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    /// Weight of the inter-level smoothness penalty.
    pub lambda: f64,
    /// Weight of an optional `‖θ‖²` penalty; zero unless explicitly enabled.
    #[serde(default)]
    pub magnitude: f64,
}

impl Regularization {
    pub fn smoothness(lambda: f64) -> Self {
        Regularization {
            lambda,
            magnitude: 0.0,
        }
    }
}

/// The training objective bound to a training set and a fixed assignment.
///
/// Ratings are resolved to model indices once; the model's vocabularies
/// must be those of the training set.
#[derive(Clone, Debug)]
pub struct Objective {
    users: Vec<usize>,
    items: Vec<usize>,
    values: Vec<f64>,
    levels: Vec<usize>,
    reg: Regularization,
}

/// Value of each component of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// Mean squared training error.
    pub error: f64,
    /// Unweighted smoothness penalty.
    pub smoothness: f64,
    /// Unweighted magnitude penalty.
    pub magnitude: f64,
    /// `error + λ·smoothness + μ·magnitude`.
    pub total: f64,
}

impl Objective {
    pub fn new(
        p: &ModelParams,
        train: &Dataset,
        assignment: &ExperienceAssignment,
        reg: Regularization,
    ) -> Result<Self> {
        if p.users() != train.users() || p.items() != train.items() {
            return Err(Error::Mismatch(
                "model vocabularies differ from the training set".into(),
            ));
        }
        let levels = assignment.per_rating(train)?;
        if let Some(bad) = levels.iter().position(|&l| l >= p.n_levels()) {
            return Err(Error::Mismatch(format!(
                "rating {bad} assigned to level {} but the model has {}",
                levels[bad] + 1,
                p.n_levels()
            )));
        }
        Ok(Objective {
            users: train.ratings().iter().map(|r| r.user).collect(),
            items: train.ratings().iter().map(|r| r.item).collect(),
            values: train.ratings().iter().map(|r| r.value).collect(),
            levels,
            reg,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn regularization(&self) -> Regularization {
        self.reg
    }

    fn residuals(&self, p: &ModelParams) -> Vec<f64> {
        let one = |n: usize| {
            p.predict_indexed(self.levels[n], Some(self.users[n]), Some(self.items[n]))
                - self.values[n]
        };
        if self.values.len() >= PAR_THRESHOLD {
            (0..self.values.len()).into_par_iter().map(one).collect()
        } else {
            (0..self.values.len()).map(one).collect()
        }
    }

    fn value_from_residuals(&self, p: &ModelParams, residuals: &[f64]) -> ObjectiveValue {
        let mut sq = CompensatedSum::default();
        for r in residuals {
            sq.add(r * r);
        }
        let error = if residuals.is_empty() {
            0.0
        } else {
            sq.value() / residuals.len() as f64
        };
        let smoothness = if self.reg.lambda != 0.0 {
            smoothness_penalty(p)
        } else {
            0.0
        };
        let magnitude = if self.reg.magnitude != 0.0 {
            crate::stats::sum(p.theta().iter().map(|v| v * v))
        } else {
            0.0
        };
        ObjectiveValue {
            error,
            smoothness,
            magnitude,
            total: error + self.reg.lambda * smoothness + self.reg.magnitude * magnitude,
        }
    }

    pub fn evaluate(&self, p: &ModelParams) -> ObjectiveValue {
        let residuals = self.residuals(p);
        self.value_from_residuals(p, &residuals)
    }

    /// Objective value and its gradient in the flat parameter layout.
    pub fn evaluate_with_gradient(&self, p: &ModelParams, grad: &mut [f64]) -> ObjectiveValue {
        assert_eq!(grad.len(), p.theta().len());
        let residuals = self.residuals(p);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let k = p.n_factors();
        let scale = if residuals.is_empty() {
            0.0
        } else {
            2.0 / residuals.len() as f64
        };

        // Scatter in rating order so the result never depends on threading.
        for (n, &res) in residuals.iter().enumerate() {
            let (e, u, i) = (self.levels[n], self.users[n], self.items[n]);
            let c = scale * res;
            grad[p.alpha_index(e)] += c;
            grad[p.user_bias_index(e, u)] += c;
            grad[p.item_bias_index(e, i)] += c;
            let gu = p.user_factor_index(e, u, 0);
            let gi = p.item_factor_index(e, i, 0);
            let (fu, fi) = (p.user_factors(e, u), p.item_factors(e, i));
            for f in 0..k {
                grad[gu + f] += c * fi[f];
                grad[gi + f] += c * fu[f];
            }
        }

        let lambda = self.reg.lambda;
        if lambda != 0.0 {
            let b = p.block_len();
            for e in 0..p.n_levels().saturating_sub(1) {
                for j in 0..b {
                    let d = 2.0 * lambda * (p.theta()[e * b + j] - p.theta()[(e + 1) * b + j]);
                    grad[e * b + j] += d;
                    grad[(e + 1) * b + j] -= d;
                }
            }
        }
        let mu = self.reg.magnitude;
        if mu != 0.0 {
            for (g, v) in grad.iter_mut().zip(p.theta()) {
                *g += 2.0 * mu * v;
            }
        }
        self.value_from_residuals(p, &residuals)
    }

    /// Squared error of every rating at every level, `costs[level][n]`.
    pub fn level_costs(&self, p: &ModelParams) -> Vec<Vec<f64>> {
        (0..p.n_levels())
            .map(|e| {
                (0..self.values.len())
                    .map(|n| {
                        let r = p.predict_indexed(e, Some(self.users[n]), Some(self.items[n]))
                            - self.values[n];
                        r * r
                    })
                    .collect()
            })
            .collect()
    }
}

/// `(1/|T|)·Σ (rec_e(u,i) − r)² + λ·Ω(Θ)`.
pub fn objective(
    p: &ModelParams,
    assignment: &ExperienceAssignment,
    train: &Dataset,
    lambda: f64,
) -> Result<f64> {
    let obj = Objective::new(p, train, assignment, Regularization::smoothness(lambda))?;
    Ok(obj.evaluate(p).total)
}

/// Analytic gradient of [`objective`] in the flat layout documented at the
/// top of this module.
pub fn gradient(
    p: &ModelParams,
    assignment: &ExperienceAssignment,
    train: &Dataset,
    lambda: f64,
) -> Result<Vec<f64>> {
    let obj = Objective::new(p, train, assignment, Regularization::smoothness(lambda))?;
    let mut grad = vec![0.0; p.theta().len()];
    obj.evaluate_with_gradient(p, &mut grad);
    Ok(grad)
}
