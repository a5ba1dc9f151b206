//! Typed tool-plan synthesis and execution.
//!
//! Tasks are built by composing corruption operators over symbolic samples.
//! Plans are DAGs of typed tool invocations, decoded under prefix-trie and
//! modality constraints, executed on a deterministic simulator, and scored
//! per metric slot. A tabular policy can be trained from task feedback with
//! REINFORCE and a moving-average baseline.

pub mod benchgen;
pub mod config;
pub mod decoder;
pub mod evalkit;
pub mod executor;
pub mod par;
pub mod parser;
pub mod plan;
pub mod policy;
pub mod registry;
pub mod rltf;
pub mod simkit;

pub use executor::{ExecutionTrace, Executor};
pub use plan::{Category, PlanGraph, PlanNode, SourceRef, TaskSpec};
pub use registry::{default_registry, Modality, ToolRegistry, ToolSpec};
pub use simkit::{Payload, Score, SemanticId, SimParams};
