//! Adaptive elicitation: pick the next question about an unseen entity by
//! simulating its answers under a predictive model and maximizing the
//! expected reduction in entropy over a set of held-out target questions.
//!
//! The crate ships an exact finite-latent Bayesian model ([`table`]), the
//! information-gain machinery ([`info_gain`]), selection policies
//! ([`policy`]), brute-force audits of the greedy and simulator bounds
//! ([`theory`]), dataset handling ([`data`]), the evaluation protocol
//! ([`eval`]), an adapter for remote log-prob servers ([`gateway`]) and the
//! state machine behind live sessions ([`session`]).

pub mod data;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod info_gain;
pub mod model;
pub mod policy;
pub mod reference;
pub mod rng;
pub mod session;
pub mod table;
pub mod theory;
pub mod types;

pub use error::{Error, Result};
pub use info_gain::EigEstimate;
pub use model::PredictiveModel;
pub use table::{fit_tabular, Belief, LatentTable, TrainingRecord};
pub use types::{AnswerIndex, CatalogEntry, Distribution, History, QuestionCatalog, QuestionId, Step, TargetSet};
