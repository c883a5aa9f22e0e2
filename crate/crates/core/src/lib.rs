//! Experience-aware latent-factor recommendation.
//!
//! Every rating is assigned a discrete experience level, monotone over each
//! user's timeline, and each level has its own latent-factor parameters.
//! Five model kinds differ in how those levels are assigned; see
//! [`ModelKind`].
//!
//! ```
//! use expertise::synth::{generate, SynthConfig};
//! use expertise::{fit, ModelKind, TrainConfig};
//!
//! let (corpus, _) = generate(&SynthConfig { n_users: 20, ..SynthConfig::default() }).unwrap();
//! let cfg = TrainConfig {
//!     levels: 3,
//!     factors: 2,
//!     lambda_grid: vec![10.0],
//!     max_outer_iters: 3,
//!     model_kind: ModelKind::UserLearned,
//!     ..TrainConfig::default()
//! };
//! let model = fit(&corpus, &corpus, &cfg).unwrap();
//! assert_eq!(model.n_levels(), 3);
//! ```

pub mod analysis;
pub mod assign;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod lbfgs;
pub mod model;
pub mod split;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use assign::{ExperienceAssignment, ModelKind, UserGrid};
pub use dataset::{parse_reviews, Dataset, FormatConfig, Rating, Record};
pub use error::{Error, Result};
pub use evaluate::{benefit_percent, compare, mse, EvalReport};
pub use model::{smoothness_penalty, ModelParams};
pub use split::{split, Scheme, SplitSpec};
pub use trainer::{fit, FittedModel, TrainConfig};

// The guide's code listings run as doctests so the book cannot drift from
// the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
