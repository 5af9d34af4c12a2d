//! Point-supervised temporal action localization with auxiliary
//! self-supervised tasks (action completion, order and regularity).

pub mod ablate;
pub mod autodiff;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod inference;
pub mod network;
pub mod plot;
pub mod seeding;
pub mod supervision;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
