//! Hybrid local/global news recommendation.
//!
//! Category- and locality-specific expert recommenders (self-attentive
//! sequential models or session kNN) are trained on partitions of the click
//! log and combined by a learned fusion network or a mean-rank ensemble.
//! The crate also carries the data model, a synthetic click-log generator and
//! the hit-rate evaluation harness used to compare the variants.

pub mod corpus;
pub mod eval;
pub mod fusion;
pub mod optim;
pub mod rng;
pub mod sasrec;
pub mod scoring;
pub mod segments;
pub mod sknn;
pub mod syngen;

pub use corpus::{Article, Catalog, Interaction, ItemId, Locality, Session, SplitBundle};
pub use scoring::{ItemScore, ScoreError, Scorer};
