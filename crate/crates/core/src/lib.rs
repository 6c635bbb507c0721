//! Bug-reproduction pipeline for deep-learning projects: index a codebase,
//! build retrieval contexts for a bug report, drive a budgeted
//! generate/validate/refine agent and verify the final script by execution.

pub mod agent;
pub mod context;
pub mod corpus;
pub mod gateway;
pub mod grammar;
pub mod oracle;
pub mod pipeline;
pub mod plan;
pub mod prompts;
pub mod pyast;
pub mod report;
pub mod retrieval;
pub mod tokenize;
pub mod verify;
