//! Desk-scale laboratory for class-wise adversarial rationalization.
//!
//! Three players per class `t`: a factual generator that selects words from
//! text of class `t`, a counterfactual generator that selects words from text
//! of the other classes, and a discriminator telling the two apart. The crate
//! provides
//!
//! - [`bow_model`]: class-conditional bag-of-words models and planted-phrase corpora,
//! - [`objectives`]: the game losses, `(h0, h1)` pairs and the regularizer,
//! - [`equilibrium`]: closed-form equilibria and class-wise mutual information,
//! - [`trainer`]: alternating gradient training with straight-through masks,
//! - [`metrics`]: precision/recall/F1 of rationales, degeneration scoring and curves.

pub mod bow_model;
pub mod equilibrium;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use bow_model::{BowModel, Document, Polarity};
pub use equilibrium::{EquilibriumSolution, SelectionPolicy};
pub use error::{CarError, Result};
pub use metrics::{prf1, MetricsReport};
pub use objectives::{HKind, HPair, RegularizerConfig, Role};
pub use trainer::{RationaleMask, TrainConfig, Variant};
