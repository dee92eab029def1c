//! Test-time verification for visual grounding with frozen vision-language
//! models.
//!
//! The crate searches for a good instruction prompt on a development split
//! ([`dape`]), queries the model on spatially perturbed copies of each image
//! ([`viewgen`]), maps every answer back to the original frame
//! ([`geometry`]), and keeps the boxes of the unperturbed answer together
//! with a reliability score measuring how consistently they recur
//! ([`consolidation`]). [`evalcal`] scores the result and checks whether
//! the reliability scores track localization quality; [`pipeline`] ties it
//! together and handles datasets and run artifacts.
//!
//! Model access goes through the [`lvlm_client::Grounder`] and
//! [`lvlm_client::MetaOptimizer`] traits, with an OpenAI-style HTTP
//! implementation and a deterministic simulator.

pub mod cli;
pub mod consolidation;
pub mod dape;
pub mod evalcal;
pub mod geometry;
pub mod lvlm_client;
pub mod pipeline;
pub mod seeding;
pub mod viewgen;

pub use consolidation::{rhc, ConsensusConfig, ConsolidatedDetection, ScoredDetection, Strategy};
pub use geometry::{iou, BoundingBox, ImageDims, TransformSpec};
pub use lvlm_client::{DetectionSet, Grounder, MetaOptimizer};
pub use pipeline::{run_ddl, DatasetManifest, RunArtifacts, RunConfig};
