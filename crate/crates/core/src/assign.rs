//! Experience assignment for the five model kinds.
//!
//! Levels are 0-based in the API (`0..E`) and 1-based in every file format.
//! The uniform kinds use a fixed time grid. The learned kinds solve a
//! monotone shortest-path problem: given the squared error of each rating at
//! each level, pick a non-decreasing level sequence of minimum total cost.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// (lf) one level for everybody.
    Flat,
    /// (a) the community moves through levels at uniform time intervals.
    CommunityUniform,
    /// (b) each user moves through levels at uniform intervals of their own history.
    UserUniform,
    /// (c) one learned segmentation of the global timeline.
    CommunityLearned,
    /// (d) a learned monotone progression per user.
    UserLearned,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Flat,
        ModelKind::CommunityUniform,
        ModelKind::UserUniform,
        ModelKind::CommunityLearned,
        ModelKind::UserLearned,
    ];

    /// Short label: `lf`, `a`, `b`, `c`, `d`.
    pub fn code(self) -> &'static str {
        match self {
            ModelKind::Flat => "lf",
            ModelKind::CommunityUniform => "a",
            ModelKind::UserUniform => "b",
            ModelKind::CommunityLearned => "c",
            ModelKind::UserLearned => "d",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, ModelKind::CommunityLearned | ModelKind::UserLearned)
    }

    pub fn is_community(self) -> bool {
        matches!(self, ModelKind::CommunityUniform | ModelKind::CommunityLearned)
    }

    /// Number of levels actually used: `Flat` always has one.
    pub fn effective_levels(self, configured: usize) -> usize {
        if self == ModelKind::Flat {
            1
        } else {
            configured
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "lf" | "flat" => ModelKind::Flat,
            "a" | "community_uniform" => ModelKind::CommunityUniform,
            "b" | "user_uniform" => ModelKind::UserUniform,
            "c" | "community_learned" => ModelKind::CommunityLearned,
            "d" | "user_learned" => ModelKind::UserLearned,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown model kind `{other}` (expected lf, a, b, c or d)"
                )))
            }
        };
        Ok(kind)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// How the per-user uniform schedule divides a history.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserGrid {
    /// Equal-width intervals of the user's time span.
    #[default]
    Time,
    /// Equal shares of the user's rating count.
    Count,
}

/// Level of every training rating, per user in chronological order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceAssignment {
    levels: Vec<Vec<usize>>,
}

impl ExperienceAssignment {
    /// Wraps per-user level lists aligned with [`Dataset::user_ratings`].
    pub fn from_levels(levels: Vec<Vec<usize>>) -> Self {
        ExperienceAssignment { levels }
    }

    pub fn constant(d: &Dataset, level: usize) -> Self {
        ExperienceAssignment {
            levels: (0..d.n_users())
                .map(|u| vec![level; d.user_ratings(u).len()])
                .collect(),
        }
    }

    /// Builds from one level per rating position.
    pub fn from_per_rating(d: &Dataset, per_rating: &[usize]) -> Self {
        ExperienceAssignment {
            levels: (0..d.n_users())
                .map(|u| d.user_ratings(u).iter().map(|&p| per_rating[p]).collect())
                .collect(),
        }
    }

    pub fn user_levels(&self, user: usize) -> &[usize] {
        &self.levels[user]
    }

    pub fn n_users(&self) -> usize {
        self.levels.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.levels.iter().map(Vec::as_slice)
    }

    pub fn max_level(&self) -> Option<usize> {
        self.levels.iter().flatten().copied().max()
    }

    /// One level per rating position of `d`.
    pub fn per_rating(&self, d: &Dataset) -> Result<Vec<usize>> {
        let mut out = vec![usize::MAX; d.len()];
        for u in 0..d.n_users() {
            let positions = d.user_ratings(u);
            let levels = self.levels.get(u).map(Vec::as_slice).unwrap_or(&[]);
            for (k, &pos) in positions.iter().enumerate() {
                match levels.get(k) {
                    Some(&l) => out[pos] = l,
                    None => return Err(Error::MissingAssignment { index: pos }),
                }
            }
        }
        Ok(out)
    }

    /// Number of ratings whose level differs from `other`.
    pub fn changes_from(&self, other: &ExperienceAssignment) -> usize {
        self.levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| {
                a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
            })
            .sum::<usize>()
            + self.levels.len().abs_diff(other.levels.len())
    }

    /// Writes `user, item, timestamp, level` rows (1-based levels).
    pub fn write_csv<W: Write>(&self, d: &Dataset, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user", "item", "timestamp", "level"])?;
        for u in 0..d.n_users() {
            for (k, &pos) in d.user_ratings(u).iter().enumerate() {
                let r = &d.ratings()[pos];
                let level = self.levels.get(u).and_then(|l| l.get(k)).copied();
                let level = level.ok_or(Error::MissingAssignment { index: pos })?;
                w.write_record([
                    d.user_id(u),
                    d.item_id(r.item),
                    &r.timestamp.to_string(),
                    &(level + 1).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<output>", e))?;
        Ok(())
    }
}

/// Checks the per-user constraint: levels never decrease along a user's
/// chronological history, and stay below `levels`.
pub fn check_user_monotone(a: &ExperienceAssignment, d: &Dataset, levels: usize) -> Result<()> {
    for u in 0..d.n_users() {
        let seq = a.levels.get(u).map(Vec::as_slice).unwrap_or(&[]);
        if seq.len() != d.user_ratings(u).len() {
            return Err(Error::Mismatch(format!(
                "user {} has {} assigned levels for {} ratings",
                d.user_id(u),
                seq.len(),
                d.user_ratings(u).len()
            )));
        }
        for (idx, &l) in seq.iter().enumerate() {
            if l >= levels || (idx > 0 && l < seq[idx - 1]) {
                return Err(Error::Monotonicity {
                    user: d.user_id(u).to_string(),
                    index: idx,
                });
            }
        }
    }
    Ok(())
}

/// Checks the community constraint: levels never decrease along the global
/// `(timestamp, user, item)` order.
pub fn check_global_monotone(a: &ExperienceAssignment, d: &Dataset, levels: usize) -> Result<()> {
    check_user_monotone(a, d, levels)?;
    let per_rating = a.per_rating(d)?;
    let mut prev = 0;
    for pos in d.global_order() {
        let l = per_rating[pos];
        if l < prev {
            let r = &d.ratings()[pos];
            let index = d
                .user_ratings(r.user)
                .iter()
                .position(|&p| p == pos)
                .unwrap_or(0);
            return Err(Error::Monotonicity {
                user: d.user_id(r.user).to_string(),
                index,
            });
        }
        prev = l;
    }
    Ok(())
}

/// Checks the constraint that applies to `kind`.
pub fn validate_assignment(
    kind: ModelKind,
    a: &ExperienceAssignment,
    d: &Dataset,
    levels: usize,
) -> Result<()> {
    let levels = kind.effective_levels(levels);
    if kind.is_community() {
        check_global_monotone(a, d, levels)
    } else {
        check_user_monotone(a, d, levels)
    }
}

/// Index of the equal-width interval holding `t`, the last interval closed.
fn grid_level(t: i64, start: i64, end: i64, levels: usize) -> usize {
    if end <= start {
        return 0;
    }
    let scaled = (t - start) as i128 * levels as i128 / (end - start) as i128;
    (scaled.max(0) as usize).min(levels - 1)
}

/// Model (a): the corpus span split into `levels` equal-width intervals.
pub fn uniform_community_schedule(d: &Dataset, levels: usize) -> ExperienceAssignment {
    assert!(levels >= 1);
    let (start, end) = d.time_span();
    ExperienceAssignment {
        levels: (0..d.n_users())
            .map(|u| {
                d.user_ratings(u)
                    .iter()
                    .map(|&p| grid_level(d.ratings()[p].timestamp, start, end, levels))
                    .collect()
            })
            .collect(),
    }
}

/// Model (b): each user's own history split into `levels` intervals.
pub fn uniform_user_schedule(d: &Dataset, levels: usize, grid: UserGrid) -> ExperienceAssignment {
    assert!(levels >= 1);
    ExperienceAssignment {
        levels: (0..d.n_users())
            .map(|u| {
                let pos = d.user_ratings(u);
                let n = pos.len();
                match grid {
                    UserGrid::Time => {
                        let first = d.ratings()[pos[0]].timestamp;
                        let last = d.ratings()[pos[n - 1]].timestamp;
                        pos.iter()
                            .map(|&p| grid_level(d.ratings()[p].timestamp, first, last, levels))
                            .collect()
                    }
                    UserGrid::Count => {
                        if n <= 1 {
                            vec![0; n]
                        } else {
                            (0..n).map(|k| grid_level(k as i64, 0, n as i64 - 1, levels)).collect()
                        }
                    }
                }
            })
            .collect(),
    }
}

/// `cost[level][t]` for one ordered rating sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    levels: usize,
    len: usize,
    cost: Vec<f64>,
}

impl CostMatrix {
    /// Row-major `levels × len` costs.
    pub fn new(levels: usize, len: usize, cost: Vec<f64>) -> Self {
        assert!(levels >= 1);
        assert_eq!(cost.len(), levels * len);
        CostMatrix { levels, len, cost }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let levels = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == len), "ragged cost rows");
        CostMatrix::new(levels, len, rows.concat())
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, level: usize, t: usize) -> f64 {
        self.cost[level * self.len + t]
    }

    /// Cost of a level sequence, summed front to back.
    pub fn sequence_cost(&self, seq: &[usize]) -> f64 {
        seq.iter().enumerate().map(|(t, &l)| self.get(l, t)).sum()
    }

    fn check_finite(&self) -> Result<()> {
        match self.cost.iter().position(|c| !c.is_finite()) {
            Some(idx) => Err(Error::NonFiniteCost {
                level: idx / self.len.max(1),
                position: idx % self.len.max(1),
            }),
            None => Ok(()),
        }
    }
}

/// Minimum-cost non-decreasing level sequence in `O(n·E)` time.
///
/// A backward pass stores, for every `(level, t)`, the cheapest completion
/// of the suffix starting at `t` on that level. A forward pass then takes
/// the lowest level attaining the optimum at each step, which yields the
/// lexicographically smallest optimal sequence.
pub fn assign_user_dp(costs: &CostMatrix) -> Result<Vec<usize>> {
    costs.check_finite()?;
    let (levels, n) = (costs.levels, costs.len);
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut suffix = vec![0.0; levels * n];
    for k in 0..levels {
        suffix[k * n + n - 1] = costs.get(k, n - 1);
    }
    for t in (0..n - 1).rev() {
        let mut best = f64::INFINITY;
        for k in (0..levels).rev() {
            best = best.min(suffix[k * n + t + 1]);
            suffix[k * n + t] = costs.get(k, t) + best;
        }
    }

    let mut seq = Vec::with_capacity(n);
    let mut floor = 0;
    for t in 0..n {
        let mut pick = floor;
        for k in floor + 1..levels {
            if suffix[k * n + t] < suffix[pick * n + t] {
                pick = k;
            }
        }
        seq.push(pick);
        floor = pick;
    }
    Ok(seq)
}

/// The same recurrence over the whole corpus sorted by
/// `(timestamp, user, item)`: one segmentation of the global timeline.
pub fn assign_community_dp(costs: &CostMatrix) -> Result<Vec<usize>> {
    assign_user_dp(costs)
}

/// Squared error of every rating of `d` at every level, `[level][position]`.
/// Ids unknown to the model get the cold-key prediction.
pub fn rating_costs(p: &ModelParams, d: &Dataset) -> Vec<Vec<f64>> {
    let users: Vec<Option<usize>> = d.users().iter().map(|u| p.user_lookup(u)).collect();
    let items: Vec<Option<usize>> = d.items().iter().map(|i| p.item_lookup(i)).collect();
    let per_rating: Vec<Vec<f64>> = d
        .ratings()
        .par_iter()
        .map(|r| {
            (0..p.n_levels())
                .map(|e| {
                    let res = p.predict_indexed(e, users[r.user], items[r.item]) - r.value;
                    res * res
                })
                .collect()
        })
        .collect();
    (0..p.n_levels())
        .map(|e| per_rating.iter().map(|c| c[e]).collect())
        .collect()
}

fn cost_matrix(costs: &[Vec<f64>], positions: &[usize]) -> CostMatrix {
    let levels = costs.len();
    let mut flat = Vec::with_capacity(levels * positions.len());
    for row in costs {
        flat.extend(positions.iter().map(|&p| row[p]));
    }
    CostMatrix::new(levels, positions.len(), flat)
}

/// Keeps `current` unless `candidate` is strictly cheaper. Ties between
/// distinct optima therefore never flip an existing assignment.
fn prefer_current(m: &CostMatrix, candidate: Vec<usize>, current: Option<&[usize]>) -> Vec<usize> {
    match current {
        Some(cur) if cur.len() == candidate.len() && cur.iter().all(|&l| l < m.levels()) => {
            if m.sequence_cost(&candidate) < m.sequence_cost(cur) {
                candidate
            } else {
                cur.to_vec()
            }
        }
        _ => candidate,
    }
}

/// Learned assignment for `kind` under parameters `p`.
///
/// With `current` given, each sequence (one per user, or the single global
/// one) is only replaced when the optimum is strictly cheaper than the
/// existing levels.
pub fn learned_assignment(
    kind: ModelKind,
    p: &ModelParams,
    d: &Dataset,
    current: Option<&ExperienceAssignment>,
) -> Result<ExperienceAssignment> {
    let costs = rating_costs(p, d);
    match kind {
        ModelKind::UserLearned => {
            let levels = (0..d.n_users())
                .into_par_iter()
                .map(|u| {
                    let m = cost_matrix(&costs, d.user_ratings(u));
                    let best = assign_user_dp(&m)?;
                    let cur = current.and_then(|c| c.levels.get(u)).map(Vec::as_slice);
                    Ok(prefer_current(&m, best, cur))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExperienceAssignment { levels })
        }
        ModelKind::CommunityLearned => {
            let order = d.global_order();
            let m = cost_matrix(&costs, &order);
            let best = assign_community_dp(&m)?;
            let cur = match current {
                Some(c) => {
                    let per = c.per_rating(d)?;
                    Some(order.iter().map(|&p| per[p]).collect::<Vec<_>>())
                }
                None => None,
            };
            let chosen = prefer_current(&m, best, cur.as_deref());
            let mut per_rating = vec![0; d.len()];
            for (&pos, l) in order.iter().zip(chosen) {
                per_rating[pos] = l;
            }
            Ok(ExperienceAssignment::from_per_rating(d, &per_rating))
        }
        other => Err(Error::InvalidConfig(format!(
            "model kind {other} has no learned assignment"
        ))),
    }
}

/// Assignment for any kind. Uniform kinds ignore `p`; learned kinds solve the
/// monotone assignment problem against `p`.
pub fn assign_all(kind: ModelKind, p: &ModelParams, d: &Dataset) -> Result<ExperienceAssignment> {
    assign_all_with(kind, p, d, UserGrid::Time)
}

pub fn assign_all_with(
    kind: ModelKind,
    p: &ModelParams,
    d: &Dataset,
    grid: UserGrid,
) -> Result<ExperienceAssignment> {
    match kind {
        ModelKind::Flat => Ok(ExperienceAssignment::constant(d, 0)),
        ModelKind::CommunityUniform => Ok(uniform_community_schedule(d, p.n_levels())),
        ModelKind::UserUniform => Ok(uniform_user_schedule(d, p.n_levels(), grid)),
        ModelKind::CommunityLearned | ModelKind::UserLearned => {
            learned_assignment(kind, p, d, None)
        }
    }
}
