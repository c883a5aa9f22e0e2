//! Independent reference implementations shared by the integration tests.
//! Nothing here uses the flat parameter layout: predictions are computed
//! from the per-level maps returned by `ModelParams::level`.

#![allow(dead_code)]

use expertise::dataset::{Dataset, Record};
use expertise::model::{LevelParams, ModelParams};
use expertise::ExperienceAssignment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn corpus(rows: &[(&str, &str, f64, i64)]) -> Dataset {
    Dataset::from_records(
        rows.iter()
            .map(|&(u, i, r, t)| Record {
                user: u.to_string(),
                item: i.to_string(),
                raw_value: r,
                timestamp: t,
            })
            .collect(),
        5.0,
    )
    .unwrap()
}

/// A corpus where each user rates a random non-empty subset of items at
/// random times.
pub fn random_corpus(rng: &mut ChaCha8Rng, users: usize, items: usize) -> Dataset {
    let mut records = Vec::new();
    for u in 0..users {
        let mut rated = 0;
        for i in 0..items {
            if rng.random_bool(0.6) || (i == items - 1 && rated == 0) {
                rated += 1;
                records.push(Record {
                    user: format!("u{u}"),
                    item: format!("i{i}"),
                    raw_value: rng.random_range(0.0..=5.0),
                    timestamp: rng.random_range(0..1000),
                });
            }
        }
    }
    Dataset::from_records(records, 5.0).unwrap()
}

pub fn random_params(rng: &mut ChaCha8Rng, d: &Dataset, levels: usize, factors: usize, scale: f64) -> ModelParams {
    let p = ModelParams::for_dataset(d, levels, factors);
    let theta = (0..p.theta().len()).map(|_| rng.random_range(-scale..scale)).collect();
    p.with_theta(theta)
}

/// A random non-decreasing level sequence per user.
pub fn random_user_assignment(rng: &mut ChaCha8Rng, d: &Dataset, levels: usize) -> ExperienceAssignment {
    ExperienceAssignment::from_levels(
        (0..d.n_users())
            .map(|u| {
                let mut seq: Vec<usize> = (0..d.user_ratings(u).len())
                    .map(|_| rng.random_range(0..levels))
                    .collect();
                seq.sort_unstable();
                seq
            })
            .collect(),
    )
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn predict_from_maps(level: &LevelParams, user: &str, item: &str) -> f64 {
    let mut v = level.alpha;
    v += level.user_bias.get(user).copied().unwrap_or(0.0);
    v += level.item_bias.get(item).copied().unwrap_or(0.0);
    if let (Some(gu), Some(gi)) = (level.user_factors.get(user), level.item_factors.get(item)) {
        v += gu.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>();
    }
    v
}

/// Squared distance between two levels, summed over every scalar.
fn level_distance(a: &LevelParams, b: &LevelParams) -> f64 {
    let mut s = (a.alpha - b.alpha).powi(2);
    for (k, v) in &a.user_bias {
        s += (v - b.user_bias[k]).powi(2);
    }
    for (k, v) in &a.item_bias {
        s += (v - b.item_bias[k]).powi(2);
    }
    for (k, v) in &a.user_factors {
        s += v.iter().zip(&b.user_factors[k]).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    for (k, v) in &a.item_factors {
        s += v.iter().zip(&b.item_factors[k]).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    s
}

pub fn oracle_smoothness(p: &ModelParams) -> f64 {
    let levels: Vec<LevelParams> = (0..p.n_levels()).map(|e| p.level(e)).collect();
    levels.windows(2).map(|w| level_distance(&w[0], &w[1])).sum()
}

/// Mean squared error plus `lambda` times the smoothness penalty.
pub fn oracle_objective(p: &ModelParams, a: &ExperienceAssignment, d: &Dataset, lambda: f64) -> f64 {
    let levels: Vec<LevelParams> = (0..p.n_levels()).map(|e| p.level(e)).collect();
    let mut err = 0.0;
    for u in 0..d.n_users() {
        for (j, &pos) in d.user_ratings(u).iter().enumerate() {
            let r = &d.ratings()[pos];
            let e = a.user_levels(u)[j];
            let pred = predict_from_maps(&levels[e], d.user_id(r.user), d.item_id(r.item));
            err += (pred - r.value).powi(2);
        }
    }
    err / d.len() as f64 + lambda * oracle_smoothness(p)
}

/// First `(user, index)` where a user's sequence decreases or leaves
/// `0..levels`.
pub fn user_monotone_violation(a: &ExperienceAssignment, levels: usize) -> Option<(usize, usize)> {
    for (u, seq) in a.iter().enumerate() {
        for (j, &l) in seq.iter().enumerate() {
            if l >= levels || (j > 0 && seq[j - 1] > l) {
                return Some((u, j));
            }
        }
    }
    None
}

/// First position in `(timestamp, user, item)` order where the level
/// decreases.
pub fn global_monotone_violation(a: &ExperienceAssignment, d: &Dataset, levels: usize) -> Option<usize> {
    let per = a.per_rating(d).unwrap();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by_key(|&p| {
        let r = &d.ratings()[p];
        (r.timestamp, d.user_id(r.user).to_string(), d.item_id(r.item).to_string())
    });
    for (k, w) in order.windows(2).enumerate() {
        if per[w[0]] > per[w[1]] || per[w[1]] >= levels {
            return Some(k + 1);
        }
    }
    None
}

/// Central-difference derivative of `f` along coordinate `c` of `p`.
pub fn central_difference(p: &ModelParams, c: usize, h: f64, f: impl Fn(&ModelParams) -> f64) -> f64 {
    let mut theta = p.theta().to_vec();
    theta[c] += h;
    let up = f(&p.with_theta(theta.clone()));
    theta[c] -= 2.0 * h;
    let down = f(&p.with_theta(theta));
    (up - down) / (2.0 * h)
}
