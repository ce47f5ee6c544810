//! Action-conditioned human intent forecasting.
//!
//! A transformer forecasts a human's next second of upper-body motion from
//! both agents' past second of motion and the partner's planned future
//! pose. Models are pre-trained on human-human interaction and fine-tuned on
//! human-robot interaction, with an optional cosine alignment between robot
//! and teleoperator pose embeddings.

pub mod dataset;
pub mod diff;
pub mod eval;
pub mod model;
pub mod pose;
pub mod retarget;
pub mod training;
