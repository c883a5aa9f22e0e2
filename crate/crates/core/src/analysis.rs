//! Expert/novice analyses over a fitted model: acquired-taste scores, genre
//! summaries, agreement variance, progression statistics and retention.
//!
//! Levels are 1-based in every value and CSV row produced here.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::stats;
use crate::trainer::FittedModel;

pub const DEFAULT_MIN_RATINGS: usize = 50;
pub const DEFAULT_MIN_COHORT: usize = 5;
pub const DEFAULT_WINDOW: f64 = 0.5;
pub const DEFAULT_STEP: f64 = 0.1;
pub const DEFAULT_GAP_SECONDS: i64 = 182 * 86_400;
pub const DEFAULT_PREFIX: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TasteScore {
    pub item: String,
    /// Expert minus beginner item bias.
    pub d: f64,
    pub beginner_bias: f64,
    pub expert_bias: f64,
    pub mean_rating: f64,
    pub n_ratings: usize,
}

/// `d = β_i(E) − β_i(1)` for every item with at least `min_ratings`
/// training ratings, in item order.
pub fn acquired_taste_scores(
    m: &FittedModel,
    train: &Dataset,
    min_ratings: usize,
) -> Result<Vec<TasteScore>> {
    m.check_train(train)?;
    let levels = m.n_levels();
    if levels < 2 {
        return Err(Error::Analysis(
            "acquired-taste scores need at least two experience levels".into(),
        ));
    }
    let p = &m.params;
    Ok((0..train.n_items())
        .filter(|&i| train.item_ratings(i).len() >= min_ratings)
        .map(|i| {
            let positions = train.item_ratings(i);
            let beginner = p.item_bias(0, i);
            let expert = p.item_bias(levels - 1, i);
            TasteScore {
                item: train.item_id(i).to_string(),
                d: expert - beginner,
                beginner_bias: beginner,
                expert_bias: expert,
                mean_rating: stats::mean(positions.iter().map(|&q| train.ratings()[q].value)),
                n_ratings: positions.len(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenreSummary {
    pub genre: String,
    pub mean_beginner_bias: f64,
    pub mean_expert_bias: f64,
    pub mean_d: f64,
    pub n_items: usize,
}

/// Per-genre means of the scored items, ascending by `mean_d` (ties by
/// genre name), so beginner-preferred genres come first.
pub fn genre_bias_summary(
    scores: &[TasteScore],
    item_genres: &BTreeMap<String, String>,
) -> Result<Vec<GenreSummary>> {
    let mut groups: BTreeMap<&str, Vec<&TasteScore>> = BTreeMap::new();
    for s in scores {
        if let Some(g) = item_genres.get(&s.item) {
            groups.entry(g.as_str()).or_default().push(s);
        }
    }
    if groups.is_empty() {
        return Err(Error::Analysis(
            "no scored item has a genre label".into(),
        ));
    }
    let mut out: Vec<GenreSummary> = groups
        .into_iter()
        .map(|(genre, members)| GenreSummary {
            genre: genre.to_string(),
            mean_beginner_bias: stats::mean(members.iter().map(|s| s.beginner_bias)),
            mean_expert_bias: stats::mean(members.iter().map(|s| s.expert_bias)),
            mean_d: stats::mean(members.iter().map(|s| s.d)),
            n_items: members.len(),
        })
        .collect();
    out.sort_by(|a, b| a.mean_d.total_cmp(&b.mean_d).then_with(|| a.genre.cmp(&b.genre)));
    Ok(out)
}

/// Reads a two-column `item<TAB>genre` file. A first line of `item genre`
/// is treated as a header; blank lines are skipped.
pub fn read_genres<R: BufRead>(input: R) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("genres", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(item), Some(genre)) = (fields.next(), fields.next()) else {
            return Err(Error::Row {
                line: n as u64 + 1,
                message: "expected `item<TAB>genre`".into(),
            });
        };
        if n == 0 && item == "item" && genre == "genre" {
            continue;
        }
        out.insert(item.to_string(), genre.to_string());
    }
    Ok(out)
}

/// Continuous experience of every training rating (1-based scale).
///
/// Each level segment starts at the value of its level at the time of its
/// first rating; values are linear in time between consecutive segment
/// starts and constant after the last one.
pub fn interpolated_experience(m: &FittedModel, train: &Dataset) -> Result<Vec<f64>> {
    m.check_train(train)?;
    let per_user: Vec<Vec<(usize, f64)>> = (0..train.n_users())
        .into_par_iter()
        .map(|u| {
            let positions = train.user_ratings(u);
            let levels = m.user_levels(u);
            let times: Vec<i64> = positions.iter().map(|&p| train.ratings()[p].timestamp).collect();
            // knots: (time, level) at the first rating of each segment
            let mut knots: Vec<(i64, f64)> = Vec::new();
            for (j, &l) in levels.iter().enumerate() {
                if j == 0 || levels[j - 1] != l {
                    knots.push((times[j], l as f64 + 1.0));
                }
            }
            let mut k = 0;
            positions
                .iter()
                .enumerate()
                .map(|(j, &pos)| {
                    if j > 0 && levels[j - 1] != levels[j] {
                        k += 1;
                    }
                    let (ta, ea) = knots[k];
                    let value = match knots.get(k + 1) {
                        Some(&(tb, eb)) if tb > ta => {
                            ea + (eb - ea) * (times[j] - ta) as f64 / (tb - ta) as f64
                        }
                        _ => ea,
                    };
                    (pos, value)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; train.len()];
    for (pos, v) in per_user.into_iter().flatten() {
        out[pos] = v;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementPoint {
    /// Window centre on the 1-based experience scale.
    pub experience: f64,
    pub mean_variance: f64,
    pub n_cohorts: usize,
}

/// Mean same-item rating variance over a sliding experience window.
///
/// A cohort is the set of one item's ratings whose interpolated experience
/// lies in `[x − window/2, x + window/2]`; cohorts smaller than
/// `min_cohort` are ignored. Windows without cohorts are omitted.
pub fn agreement_variance(
    m: &FittedModel,
    train: &Dataset,
    min_cohort: usize,
    window: f64,
    step: f64,
) -> Result<Vec<AgreementPoint>> {
    if min_cohort < 2 || !(window > 0.0) || !(step > 0.0) {
        return Err(Error::InvalidConfig(
            "agreement variance needs min_cohort >= 2 and positive window and step".into(),
        ));
    }
    let x = interpolated_experience(m, train)?;
    let top = m.n_levels() as f64;
    let steps = ((top - 1.0) / step + 1e-9).floor() as usize;
    let half = window / 2.0;
    let curve: Vec<AgreementPoint> = (0..=steps)
        .into_par_iter()
        .filter_map(|s| {
            let centre = 1.0 + s as f64 * step;
            let variances: Vec<f64> = (0..train.n_items())
                .filter_map(|i| {
                    let values: Vec<f64> = train
                        .item_ratings(i)
                        .iter()
                        .filter(|&&p| (x[p] - centre).abs() <= half)
                        .map(|&p| train.ratings()[p].value)
                        .collect();
                    (values.len() >= min_cohort).then(|| stats::population_variance(&values))
                })
                .collect();
            (!variances.is_empty()).then(|| AgreementPoint {
                experience: centre,
                mean_variance: stats::mean(variances.iter().copied()),
                n_cohorts: variances.len(),
            })
        })
        .collect();
    if curve.is_empty() {
        log::warn!("no item has {min_cohort} ratings within any experience window");
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    /// Started below the top level and reached it.
    ReachedTop,
    /// Ended exactly one level below the top.
    ReachedPenultimate,
    /// Every rating at the top level.
    AlreadyExpert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Level entered (1-based).
    pub level: usize,
    /// Ratings given before entering the level.
    pub cum_count: usize,
    /// Time from the first rating to the first rating at this level.
    pub cum_time: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProgression {
    pub user: String,
    pub start_level: usize,
    pub terminal_level: usize,
    pub cohort: Option<Cohort>,
    pub transitions: Vec<Transition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressionRow {
    pub cohort: Cohort,
    pub level: usize,
    pub median_cum_time: f64,
    pub median_cum_count: f64,
    pub n_users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressionStats {
    pub users: Vec<UserProgression>,
    pub rows: Vec<ProgressionRow>,
    pub cohort_sizes: BTreeMap<Cohort, usize>,
}

/// Time and rating count each user took to reach every level above their
/// starting one. A skipped level counts as entered together with the next
/// level reached.
pub fn progression_stats(m: &FittedModel, train: &Dataset) -> Result<ProgressionStats> {
    if !m.kind.is_learned() {
        return Err(Error::Analysis(format!(
            "progression of model ({}) is fixed by its schedule",
            m.kind
        )));
    }
    m.check_train(train)?;
    let top = m.n_levels() - 1;
    let mut users = Vec::new();
    for u in 0..train.n_users() {
        if Some(u) == train.background_user() {
            continue;
        }
        let levels = m.user_levels(u);
        let (Some(&start), Some(&end)) = (levels.first(), levels.last()) else {
            continue;
        };
        let t0 = train.ratings()[train.user_ratings(u)[0]].timestamp;
        let transitions = (start + 1..=end)
            .map(|e| {
                let j = levels.partition_point(|&l| l < e);
                Transition {
                    level: e + 1,
                    cum_count: j,
                    cum_time: train.ratings()[train.user_ratings(u)[j]].timestamp - t0,
                }
            })
            .collect();
        let cohort = if start == top {
            Some(Cohort::AlreadyExpert)
        } else if end == top {
            Some(Cohort::ReachedTop)
        } else if top >= 1 && end == top - 1 {
            Some(Cohort::ReachedPenultimate)
        } else {
            None
        };
        users.push(UserProgression {
            user: train.user_id(u).to_string(),
            start_level: start + 1,
            terminal_level: end + 1,
            cohort,
            transitions,
        });
    }

    let mut cohort_sizes = BTreeMap::new();
    let mut samples: BTreeMap<(Cohort, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for up in &users {
        let Some(c) = up.cohort else { continue };
        *cohort_sizes.entry(c).or_insert(0) += 1;
        for t in &up.transitions {
            let entry = samples.entry((c, t.level)).or_default();
            entry.0.push(t.cum_time as f64);
            entry.1.push(t.cum_count as f64);
        }
    }
    let rows = samples
        .into_iter()
        .map(|((cohort, level), (mut times, mut counts))| ProgressionRow {
            cohort,
            level,
            n_users: times.len(),
            median_cum_time: stats::median(&mut times),
            median_cum_count: stats::median(&mut counts),
        })
        .collect();
    Ok(ProgressionStats {
        users,
        rows,
        cohort_sizes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurves {
    /// Every non-background user with whether they left.
    pub labels: BTreeMap<String, bool>,
    /// Mean 1-based level at rating index `1..=prefix`; `None` when no
    /// leaver has `prefix` ratings.
    pub leavers: Option<Vec<f64>>,
    pub stayers: Option<Vec<f64>>,
    pub n_leavers: usize,
    pub n_stayers: usize,
}

/// True when the last rating precedes the corpus end by more than `gap`.
pub fn has_left(last: i64, corpus_end: i64, gap: i64) -> bool {
    corpus_end - last > gap
}

/// Mean level over the first `prefix` ratings of leavers and stayers.
pub fn retention_curves(
    m: &FittedModel,
    d: &Dataset,
    gap: i64,
    prefix: usize,
) -> Result<RetentionCurves> {
    m.check_train(d)?;
    if prefix == 0 {
        return Err(Error::InvalidConfig("retention prefix must be >= 1".into()));
    }
    let end = d.time_span().1;
    let mut labels = BTreeMap::new();
    let mut sums = [vec![stats::CompensatedSum::default(); prefix], vec![
        stats::CompensatedSum::default();
        prefix
    ]];
    let mut counts = [0usize; 2];
    for u in 0..d.n_users() {
        if Some(u) == d.background_user() {
            continue;
        }
        let positions = d.user_ratings(u);
        let Some(&last) = positions.last() else { continue };
        let left = has_left(d.ratings()[last].timestamp, end, gap);
        labels.insert(d.user_id(u).to_string(), left);
        if positions.len() >= prefix {
            let side = usize::from(!left);
            counts[side] += 1;
            for (j, &l) in m.user_levels(u)[..prefix].iter().enumerate() {
                sums[side][j].add(l as f64 + 1.0);
            }
        }
    }
    let curve = |side: usize, name: &str| {
        if counts[side] == 0 {
            log::warn!("no {name} with at least {prefix} ratings; curve omitted");
            return None;
        }
        Some(sums[side].iter().map(|s| s.value() / counts[side] as f64).collect())
    };
    Ok(RetentionCurves {
        leavers: curve(0, "leaver"),
        stayers: curve(1, "stayer"),
        n_leavers: counts[0],
        n_stayers: counts[1],
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMean {
    pub level: usize,
    pub count: usize,
    /// `None` when no rating is assigned to this level.
    pub mean_rating: Option<f64>,
}

/// Mean normalized training rating at each assigned level.
pub fn level_rating_means(m: &FittedModel, train: &Dataset) -> Result<Vec<LevelMean>> {
    m.check_train(train)?;
    let per = m.assignment.per_rating(train)?;
    let mut sums = vec![stats::CompensatedSum::default(); m.n_levels()];
    let mut counts = vec![0usize; m.n_levels()];
    for (r, &l) in train.ratings().iter().zip(&per) {
        sums[l].add(r.value);
        counts[l] += 1;
    }
    Ok((0..m.n_levels())
        .map(|l| LevelMean {
            level: l + 1,
            count: counts[l],
            mean_rating: (counts[l] > 0).then(|| sums[l].value() / counts[l] as f64),
        })
        .collect())
}

fn write_rows<T: Serialize, W: Write>(rows: impl IntoIterator<Item = T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

pub fn write_taste_scores<W: Write>(scores: &[TasteScore], out: W) -> Result<()> {
    write_rows(scores, out)
}

pub fn write_genre_summary<W: Write>(rows: &[GenreSummary], out: W) -> Result<()> {
    write_rows(rows, out)
}

pub fn write_agreement<W: Write>(curve: &[AgreementPoint], out: W) -> Result<()> {
    write_rows(curve, out)
}

pub fn write_progression<W: Write>(stats: &ProgressionStats, out: W) -> Result<()> {
    write_rows(&stats.rows, out)
}

pub fn write_level_means<W: Write>(rows: &[LevelMean], out: W) -> Result<()> {
    write_rows(rows, out)
}

#[derive(Serialize)]
struct RetentionRow<'a> {
    cohort: &'a str,
    index: usize,
    mean_level: f64,
    n_users: usize,
}

/// Rows `(cohort, index, mean_level, n_users)` with 1-based indices.
pub fn write_retention<W: Write>(curves: &RetentionCurves, out: W) -> Result<()> {
    let mut rows = Vec::new();
    for (name, curve, n) in [
        ("left", &curves.leavers, curves.n_leavers),
        ("stayed", &curves.stayers, curves.n_stayers),
    ] {
        if let Some(c) = curve {
            rows.extend(c.iter().enumerate().map(|(j, &v)| RetentionRow {
                cohort: name,
                index: j + 1,
                mean_level: v,
                n_users: n,
            }));
        }
    }
    write_rows(rows, out)
}

#[derive(Clone, Debug)]
pub struct AnalysisOptions {
    pub min_ratings: usize,
    pub min_cohort: usize,
    pub window: f64,
    pub step: f64,
    pub gap: i64,
    pub prefix: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            min_ratings: DEFAULT_MIN_RATINGS,
            min_cohort: DEFAULT_MIN_COHORT,
            window: DEFAULT_WINDOW,
            step: DEFAULT_STEP,
            gap: DEFAULT_GAP_SECONDS,
            prefix: DEFAULT_PREFIX,
        }
    }
}

/// Runs every analysis that applies to `m` and writes its CSV into
/// `out_dir`. Returns the file names written.
pub fn write_all(
    m: &FittedModel,
    train: &Dataset,
    genres: Option<&BTreeMap<String, String>>,
    opts: &AnalysisOptions,
    out_dir: &Path,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        let path = out_dir.join(name);
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        written.push(name.to_string());
        Ok(())
    };

    if m.n_levels() >= 2 {
        let scores = acquired_taste_scores(m, train, opts.min_ratings)?;
        emit("taste_scores.csv", &|b| write_taste_scores(&scores, b))?;
        if let Some(g) = genres {
            let summary = genre_bias_summary(&scores, g)?;
            emit("genre_summary.csv", &|b| write_genre_summary(&summary, b))?;
        }
    } else {
        log::warn!("single-level model: skipping acquired-taste scores");
    }
    let curve = agreement_variance(m, train, opts.min_cohort, opts.window, opts.step)?;
    emit("agreement.csv", &|b| write_agreement(&curve, b))?;
    if m.kind.is_learned() {
        let prog = progression_stats(m, train)?;
        emit("progression.csv", &|b| write_progression(&prog, b))?;
    } else {
        log::warn!("model ({}) has a fixed schedule: skipping progression", m.kind);
    }
    let ret = retention_curves(m, train, opts.gap, opts.prefix)?;
    emit("retention.csv", &|b| write_retention(&ret, b))?;
    let means = level_rating_means(m, train)?;
    emit("level_means.csv", &|b| write_level_means(&means, b))?;
    Ok(written)
}
