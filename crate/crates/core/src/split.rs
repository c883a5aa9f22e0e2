//! Reproducible per-user train / validation / test splits.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// A seeded uniform sample of each user's ratings.
    Random,
    /// Each user's most recent ratings.
    Final,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Scheme::Random),
            "final" => Ok(Scheme::Final),
            other => Err(Error::InvalidSplit(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub scheme: Scheme,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            scheme: Scheme::Final,
            test_fraction: 0.1,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.test_fraction) || !open_unit(self.validation_fraction) {
            return Err(Error::InvalidSplit(format!(
                "fractions must lie in (0, 1): test={}, validation={}",
                self.test_fraction, self.validation_fraction
            )));
        }
        if self.test_fraction + self.validation_fraction >= 1.0 {
            return Err(Error::InvalidSplit(format!(
                "test + validation fractions must be < 1, got {}",
                self.test_fraction + self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Number of ratings a fraction claims from a history of `n`: `⌈f·n⌉`,
/// robust to representation error in `f`.
fn quota(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Per-user `(test, validation)` sizes, shrinking test first so at least one
/// training rating remains.
fn user_quota(spec: &SplitSpec, n: usize) -> (usize, usize) {
    let mut test = quota(spec.test_fraction, n);
    let mut validation = quota(spec.validation_fraction, n);
    let budget = n.saturating_sub(1);
    while test + validation > budget && test > 0 {
        test -= 1;
    }
    while test + validation > budget && validation > 0 {
        validation -= 1;
    }
    (test, validation)
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub users: usize,
    pub train_rows: usize,
    pub validation_rows: usize,
    pub test_rows: usize,
}

impl Split {
    pub fn manifest(&self, spec: &SplitSpec) -> SplitManifest {
        SplitManifest {
            spec: spec.clone(),
            users: self.train.n_users(),
            train_rows: self.train.len(),
            validation_rows: self.validation.len(),
            test_rows: self.test.len(),
        }
    }
}

pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();

    for user in 0..d.n_users() {
        let history = d.user_ratings(user);
        let n = history.len();
        let (n_test, n_val) = user_quota(spec, n);
        let mut role = vec![0u8; n];
        match spec.scheme {
            Scheme::Final => {
                for slot in &mut role[n - n_test..] {
                    *slot = 2;
                }
                for slot in &mut role[n - n_test - n_val..n - n_test] {
                    *slot = 1;
                }
            }
            Scheme::Random => {
                let picked = index::sample(&mut rng, n, n_test + n_val);
                for (k, idx) in picked.iter().enumerate() {
                    role[idx] = if k < n_test { 2 } else { 1 };
                }
            }
        }
        for (&pos, r) in history.iter().zip(role) {
            match r {
                0 => train.push(pos),
                1 => validation.push(pos),
                _ => test.push(pos),
            }
        }
    }

    Ok(Split {
        train: d.subset(&train)?,
        validation: d.subset(&validation)?,
        test: d.subset(&test)?,
    })
}
