//! Desk-scale multimodal event toolkit: self-supervised sentence/video
//! coreference in a learned common embedding space, a joint multimodal
//! transformer for event and argument extraction, the matching evaluation
//! protocol, and a synthetic corpus generator with planted structure.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod coref;
pub mod corpus;
pub mod error;
pub mod jmmt;
pub mod metrics;
pub mod ontology;
pub mod optim;
pub mod synthgen;

pub use error::{Error, Result};
