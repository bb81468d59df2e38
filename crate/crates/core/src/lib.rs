//! Dataset audit, rebalancing and group-fairness evaluation for face-analysis
//! metadata.
//!
//! The crate works on metadata manifests (one row per image with gender, race
//! and age) and on classifier prediction logs. It never touches pixels.
//!
//! * [`taxonomy`] and [`manifest`] define the demographic lattice and ingest
//!   manifests.
//! * [`audit`] computes Inclusivity, Group Representation Shares and Diversity.
//! * [`balance`] and [`split`] build balancing plans and stratified splits.
//! * [`fairness`] and [`synth`] evaluate (and synthesize) prediction logs.
//! * [`report`] assembles cross-dataset comparisons and plot data.

pub mod audit;
pub mod balance;
mod error;
pub mod fairness;
pub mod manifest;
pub mod report;
mod rng;
pub mod split;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result, Warning};
pub use manifest::{FaceRecord, Manifest, ParseMode};
pub use taxonomy::{Attribute, DemographicTaxonomy, GroupKey};
