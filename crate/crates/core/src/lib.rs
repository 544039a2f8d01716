//! Workbench for developing LLM prompts under a verifiable protocol: blind
//! multi-assessor labeling, reliability gates, deliberation-linked codebook
//! and prompt revisions, and replayable audit bundles.

pub mod metrics;
pub mod codebook;
pub mod corpus;
pub mod gateway;
pub mod protocol;
pub mod simulation;
pub mod audit;
pub mod service;
