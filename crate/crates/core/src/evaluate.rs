//! Test-set MSE with test-time experience assignment.
//!
//! Test ratings carry no fitted level. Each one inherits the level of the
//! same user's chronologically nearest training rating.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::split::Scheme;
use crate::stats::CompensatedSum;
use crate::trainer::FittedModel;

/// Squared-error summary of one experience level (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelError {
    pub level: usize,
    pub count: usize,
    /// `None` when no rating landed on this level.
    pub mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: String,
    pub mse: f64,
    /// Standard error of the mean squared error.
    pub std_error: f64,
    pub n_test: usize,
    pub per_level: Vec<LevelError>,
    /// MSE after clamping predictions to `[0, 5]`.
    pub clamped_mse: f64,
    /// Per-level MSE of the training ratings under their fitted levels.
    pub train_per_level: Vec<LevelError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
}

/// Index in `times` (sorted) of the entry nearest to `t`, preferring the
/// earlier entry on an exact tie.
fn nearest(times: &[i64], t: i64) -> Option<usize> {
    if times.is_empty() {
        return None;
    }
    let j = times.partition_point(|&x| x < t);
    if j == 0 {
        return Some(0);
    }
    if j == times.len() {
        return Some(j - 1);
    }
    let before = t - times[j - 1];
    let after = times[j] - t;
    Some(if before <= after { j - 1 } else { j })
}

/// Level (0-based) of every test rating, indexed by test rating position.
pub fn assign_test_levels(m: &FittedModel, test: &Dataset, train: &Dataset) -> Result<Vec<usize>> {
    m.check_train(train)?;
    let times_of = |u: usize| -> Vec<i64> {
        train
            .user_ratings(u)
            .iter()
            .map(|&p| train.ratings()[p].timestamp)
            .collect()
    };
    let background = train.background_user().map(|b| (b, times_of(b)));
    let mut levels = vec![0; test.len()];
    for tu in 0..test.n_users() {
        let source = match train.user_lookup(test.user_id(tu)) {
            Some(u) if !train.user_ratings(u).is_empty() => Some((u, times_of(u))),
            _ => background.clone(),
        };
        if source.is_none() {
            log::warn!(
                "user {} has no training history and no background user; using level 1",
                test.user_id(tu)
            );
        }
        for &pos in test.user_ratings(tu) {
            levels[pos] = match &source {
                Some((u, times)) => nearest(times, test.ratings()[pos].timestamp)
                    .map_or(0, |k| m.user_levels(*u)[k]),
                None => 0,
            };
        }
    }
    Ok(levels)
}

fn per_level(levels: usize, assigned: &[usize], squared: &[f64]) -> Vec<LevelError> {
    let mut sums = vec![CompensatedSum::default(); levels];
    let mut counts = vec![0usize; levels];
    for (&l, &sq) in assigned.iter().zip(squared) {
        sums[l].add(sq);
        counts[l] += 1;
    }
    (0..levels)
        .map(|l| LevelError {
            level: l + 1,
            count: counts[l],
            mse: (counts[l] > 0).then(|| sums[l].value() / counts[l] as f64),
        })
        .collect()
}

/// Mean squared error of `m` on `test`.
pub fn mse(m: &FittedModel, test: &Dataset, train: &Dataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let levels = assign_test_levels(m, test, train)?;
    let p = &m.params;
    let users: Vec<Option<usize>> = test.users().iter().map(|u| p.user_lookup(u)).collect();
    let items: Vec<Option<usize>> = test.items().iter().map(|i| p.item_lookup(i)).collect();
    let predictions: Vec<f64> = test
        .ratings()
        .par_iter()
        .zip(levels.par_iter())
        .map(|(r, &l)| p.predict_indexed(l, users[r.user], items[r.item]))
        .collect();

    let squared: Vec<f64> = predictions
        .iter()
        .zip(test.ratings())
        .map(|(pred, r)| (pred - r.value).powi(2))
        .collect();
    let clamped: Vec<f64> = predictions
        .iter()
        .zip(test.ratings())
        .map(|(pred, r)| (pred.clamp(0.0, crate::dataset::NORMALIZED_MAX) - r.value).powi(2))
        .collect();

    let n = squared.len() as f64;
    let mse = crate::stats::sum(squared.iter().copied()) / n;
    let std_error = if squared.len() > 1 {
        let var = crate::stats::sum(squared.iter().map(|s| (s - mse).powi(2))) / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };

    let train_levels = m.assignment.per_rating(train)?;
    let train_squared: Vec<f64> = train
        .ratings()
        .iter()
        .zip(&train_levels)
        .map(|(r, &l)| (p.predict_indexed(l, Some(r.user), Some(r.item)) - r.value).powi(2))
        .collect();

    Ok(EvalReport {
        model_kind: m.kind.code().to_string(),
        mse,
        std_error,
        n_test: squared.len(),
        per_level: per_level(p.n_levels(), &levels, &squared),
        clamped_mse: crate::stats::sum(clamped) / n,
        train_per_level: per_level(p.n_levels(), &train_levels, &train_squared),
        scheme: None,
    })
}

/// `100·(base − model)/base`.
pub fn benefit_percent(base_mse: f64, model_mse: f64) -> f64 {
    100.0 * (base_mse - model_mse) / base_mse
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_kind: String,
    pub mse: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Improvement of (d) over (lf), percent.
    pub benefit_d_over_lf: Option<f64>,
    /// Improvement of (d) over (c), percent.
    pub benefit_d_over_c: Option<f64>,
}

impl Comparison {
    pub fn from_rows(rows: Vec<ComparisonRow>) -> Comparison {
        let find = |code: &str| rows.iter().find(|r| r.model_kind == code).map(|r| r.mse);
        let d = find("d");
        Comparison {
            benefit_d_over_lf: d.zip(find("lf")).map(|(d, lf)| benefit_percent(lf, d)),
            benefit_d_over_c: d.zip(find("c")).map(|(d, c)| benefit_percent(c, d)),
            rows,
        }
    }

    /// Plain-text table: one MSE line per model, then the benefit rows.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!("({})\t{:.3} ({:.2})\n", r.model_kind, r.mse, r.std_error));
        }
        if let Some(b) = self.benefit_d_over_lf {
            out.push_str(&format!("benefit of (d) over (lf)\t{b:.2}%\n"));
        }
        if let Some(b) = self.benefit_d_over_c {
            out.push_str(&format!("benefit of (d) over (c)\t{b:.2}%\n"));
        }
        out
    }
}

/// Evaluates several models fitted on the same training set.
pub fn compare(models: &[FittedModel], test: &Dataset, train: &Dataset) -> Result<Comparison> {
    let fingerprint = train.fingerprint();
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        if !m.train_fingerprint.is_empty() && m.train_fingerprint != fingerprint {
            return Err(Error::Mismatch(format!(
                "model ({}) was fitted on a different corpus",
                m.kind
            )));
        }
        let report = mse(m, test, train)?;
        rows.push(ComparisonRow {
            model_kind: report.model_kind,
            mse: report.mse,
            std_error: report.std_error,
        });
    }
    Ok(Comparison::from_rows(rows))
}
