//! Review corpora: parsing, normalization, and background pooling.
//!
//! A [`Dataset`] is immutable once built. User and item ids are interned into
//! dense indices in ascending string order, so index order and id order agree
//! and every derived ordering is deterministic.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved id of the pseudo-user that absorbs infrequent users.
pub const BACKGROUND_USER: &str = "__background__";

/// Upper end of the normalized rating scale.
pub const NORMALIZED_MAX: f64 = 5.0;

/// One observation. `user` and `item` index into the owning dataset's
/// vocabularies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub timestamp: i64,
    pub raw_value: f64,
}

/// A rating before interning, on its original scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub user: String,
    pub item: String,
    pub raw_value: f64,
    pub timestamp: i64,
}

/// Column layout of a delimiter-separated review file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatConfig {
    pub delimiter: u8,
    pub user_column: String,
    pub item_column: String,
    pub rating_column: String,
    pub time_column: String,
    pub scale_max: f64,
}

impl Default for FormatConfig {
    fn default() -> Self {
        FormatConfig {
            delimiter: b'\t',
            user_column: "user".into(),
            item_column: "item".into(),
            rating_column: "rating".into(),
            time_column: "timestamp".into(),
            scale_max: NORMALIZED_MAX,
        }
    }
}

/// Maps a raw rating onto `[0, 5]`.
pub fn normalize_rating(raw: f64, scale_max: f64) -> Result<f64> {
    if !(scale_max > 0.0) || !scale_max.is_finite() {
        return Err(Error::InvalidScale(scale_max));
    }
    if scale_max == NORMALIZED_MAX {
        return Ok(raw);
    }
    Ok(NORMALIZED_MAX * raw / scale_max)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    ratings: Vec<Rating>,
    scale_max: f64,
    users: Vec<String>,
    items: Vec<String>,
    user_index: Vec<Vec<usize>>,
    item_index: Vec<Vec<usize>>,
    background_user: Option<usize>,
    duplicates_dropped: usize,
}

impl Dataset {
    /// Builds a dataset from raw records.
    ///
    /// Duplicate `(user, item)` pairs keep the earliest row (first in input
    /// order on equal timestamps). The background pseudo-user is exempt: it
    /// aggregates many people and may legitimately rate an item more than once.
    pub fn from_records(records: Vec<Record>, scale_max: f64) -> Result<Dataset> {
        if !(scale_max > 0.0) || !scale_max.is_finite() {
            return Err(Error::InvalidScale(scale_max));
        }
        let mut users: Vec<String> = records.iter().map(|r| r.user.clone()).collect();
        users.sort_unstable();
        users.dedup();
        let mut items: Vec<String> = records.iter().map(|r| r.item.clone()).collect();
        items.sort_unstable();
        items.dedup();
        let user_of: HashMap<&str, usize> =
            users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let item_of: HashMap<&str, usize> =
            items.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let background_user = user_of.get(BACKGROUND_USER).copied();

        let mut ratings = Vec::with_capacity(records.len());
        for r in &records {
            ratings.push(Rating {
                user: user_of[r.user.as_str()],
                item: item_of[r.item.as_str()],
                value: normalize_rating(r.raw_value, scale_max)?,
                timestamp: r.timestamp,
                raw_value: r.raw_value,
            });
        }

        // Stable sort keeps input order among exact duplicates.
        ratings.sort_by(|a, b| {
            (a.user, a.timestamp, a.item).cmp(&(b.user, b.timestamp, b.item))
        });

        let mut duplicates_dropped = 0;
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        ratings.retain(|r| {
            if Some(r.user) == background_user {
                return true;
            }
            if !seen.insert((r.user, r.item)) {
                duplicates_dropped += 1;
                false
            } else {
                true
            }
        });

        // Users or items may have vanished only through deduplication, which
        // never removes a pair entirely, so the vocabularies stay exact.
        let mut user_index = vec![Vec::new(); users.len()];
        let mut item_index = vec![Vec::new(); items.len()];
        for (pos, r) in ratings.iter().enumerate() {
            user_index[r.user].push(pos);
            item_index[r.item].push(pos);
        }

        Ok(Dataset {
            ratings,
            scale_max,
            users,
            items,
            user_index,
            item_index,
            background_user,
            duplicates_dropped,
        })
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn scale_max(&self) -> f64 {
        self.scale_max
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.users[user]
    }

    pub fn item_id(&self, item: usize) -> &str {
        &self.items[item]
    }

    pub fn user_lookup(&self, id: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }

    pub fn item_lookup(&self, id: &str) -> Option<usize> {
        self.items.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }

    /// Rating positions of `user`, ordered by `(timestamp, item)`.
    pub fn user_ratings(&self, user: usize) -> &[usize] {
        &self.user_index[user]
    }

    pub fn item_ratings(&self, item: usize) -> &[usize] {
        &self.item_index[item]
    }

    pub fn background_user(&self) -> Option<usize> {
        self.background_user
    }

    /// Number of duplicate `(user, item)` rows discarded while building.
    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn mean_rating(&self) -> f64 {
        crate::stats::mean(self.ratings.iter().map(|r| r.value))
    }

    /// `(min, max)` timestamp over the corpus.
    pub fn time_span(&self) -> (i64, i64) {
        let min = self.ratings.iter().map(|r| r.timestamp).min().unwrap_or(0);
        let max = self.ratings.iter().map(|r| r.timestamp).max().unwrap_or(0);
        (min, max)
    }

    /// All rating positions sorted by `(timestamp, user, item)`.
    pub fn global_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.ratings.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&self.ratings[a], &self.ratings[b]);
            (ra.timestamp, ra.user, ra.item, a).cmp(&(rb.timestamp, rb.user, rb.item, b))
        });
        order
    }

    /// Raw records in canonical order, suitable for rebuilding a subset.
    pub fn record(&self, pos: usize) -> Record {
        let r = &self.ratings[pos];
        Record {
            user: self.users[r.user].clone(),
            item: self.items[r.item].clone(),
            raw_value: r.raw_value,
            timestamp: r.timestamp,
        }
    }

    /// Builds a dataset holding only the given rating positions.
    pub fn subset(&self, positions: &[usize]) -> Result<Dataset> {
        let records = positions.iter().map(|&p| self.record(p)).collect();
        Dataset::from_records(records, self.scale_max)
    }

    /// Writes the canonical delimiter-separated form: normalized rating in
    /// the `rating` column, original value in `raw_rating`.
    pub fn write_tsv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .quote_style(csv::QuoteStyle::Never)
            .from_writer(out);
        w.write_record(["user", "item", "rating", "timestamp", "raw_rating"])?;
        for user in 0..self.n_users() {
            for &pos in self.user_ratings(user) {
                let r = &self.ratings[pos];
                w.write_record([
                    self.users[r.user].as_str(),
                    self.items[r.item].as_str(),
                    &r.value.to_string(),
                    &r.timestamp.to_string(),
                    &r.raw_value.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<output>", e))?;
        Ok(())
    }

    /// SHA-256 over the canonical serialization; identifies a corpus.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Parses a delimiter-separated review file with a header row.
pub fn parse_reviews<R: Read>(input: R, config: &FormatConfig) -> Result<Dataset> {
    if !(config.scale_max > 0.0) || !config.scale_max.is_finite() {
        return Err(Error::InvalidScale(config.scale_max));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(config.delimiter)
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .from_reader(input);

    let header = reader.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    if header.len() == 0 || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let user_col = column(&config.user_column)?;
    let item_col = column(&config.item_column)?;
    let rating_col = column(&config.rating_column)?;
    let time_col = column(&config.time_column)?;

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() == 1 && row[0].trim().is_empty() {
            continue;
        }
        let row_err = |message: String| Error::Row { line, message };
        if row.len() != header.len() {
            return Err(row_err(format!(
                "expected {} columns, found {}",
                header.len(),
                row.len()
            )));
        }
        let raw_value: f64 = row[rating_col]
            .trim()
            .parse()
            .map_err(|_| row_err(format!("non-numeric rating `{}`", &row[rating_col])))?;
        if !(0.0..=config.scale_max).contains(&raw_value) {
            return Err(row_err(format!("rating out of range: {raw_value}")));
        }
        let timestamp: i64 = row[time_col]
            .trim()
            .parse()
            .map_err(|_| row_err(format!("non-numeric timestamp `{}`", &row[time_col])))?;
        if timestamp < 0 {
            return Err(row_err(format!("negative timestamp {timestamp}")));
        }
        records.push(Record {
            user: row[user_col].trim().to_string(),
            item: row[item_col].trim().to_string(),
            raw_value,
            timestamp,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::from_records(records, config.scale_max)
}

/// Reassigns every rating of users with fewer than `min_ratings` ratings to
/// the background pseudo-user.
pub fn pool_infrequent_users(d: &Dataset, min_ratings: usize) -> Result<Dataset> {
    let min_ratings = min_ratings.max(1);
    let sparse = |u: usize| {
        Some(u) == d.background_user() || d.user_ratings(u).len() < min_ratings
    };
    if !(0..d.n_users()).any(|u| sparse(u) && Some(u) != d.background_user()) {
        return Ok(d.clone());
    }
    let records = (0..d.len())
        .map(|pos| {
            let mut rec = d.record(pos);
            if sparse(d.ratings()[pos].user) {
                rec.user = BACKGROUND_USER.to_string();
            }
            rec
        })
        .collect();
    let mut pooled = Dataset::from_records(records, d.scale_max())?;
    pooled.duplicates_dropped += d.duplicates_dropped();
    Ok(pooled)
}
