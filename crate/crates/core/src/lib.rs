//! Agent-based simulation of user behavior for cross-domain recommendation.
//!
//! User agents and item agents keep textual memories that are rewritten by
//! a text-generation backend as the simulation replays a chronological
//! stream of interactions. Users are clustered into interest groups whose
//! shared memories carry other users' recent behavior into each decision.

pub mod backend;
pub mod config;
pub mod dataset;
pub mod digest;
pub mod error;
pub mod evaluation;
pub mod groups;
pub mod ids;
pub mod memory;
pub mod parallel;
pub mod pipeline;
pub mod simulation;
pub mod snapshot;

pub use error::{Error, Result};
pub use ids::{DomainId, GroupId, ItemId, UserId};
