//! Early depression-risk detection toolkit.
//!
//! Two halves share this crate:
//!
//! * a thread-preprocessing and streaming-evaluation pipeline
//!   ([`conversation`], [`corpus`], [`stream`], [`scoring`], [`metrics`]);
//! * a dual-agent conversational assessment loop that estimates the 21
//!   BDI-II symptom severities of a persona ([`dialogue`], [`gateway`],
//!   [`bdi`]).
//!
//! [`report`] renders the results of both as JSON plus aligned text tables.

pub mod bdi;
pub mod conversation;
pub mod corpus;
pub mod dialogue;
pub mod gateway;
pub mod metrics;
pub mod report;
pub mod scoring;
pub mod stream;

mod limit;

pub use bdi::{Symptom, SymptomVector};
pub use conversation::{Message, MessageKind, Role, RoleTaggedMessage, ThreadTree};
pub use corpus::{Label, SubjectRecord};
pub use stream::{DecisionLog, DecisionRecord};
