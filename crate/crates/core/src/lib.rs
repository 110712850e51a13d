//! disciple-core: an evolutionary engine that discovers interpretable
//! feature programs explaining geospatial observation data.
//!
//! A candidate is a small typed program mapping an observation to a list
//! of named scalar features, completed by a linear regression head fitted
//! on training observations. Search runs a language-model-guided
//! evolutionary loop (crossover and mutation over whole programs) with a
//! stratified critic and a DAG-based simplifier. Everything is seeded and
//! reproducible; a deterministic scripted backend stands in for the
//! language model in tests and offline runs.

pub mod critic;
pub mod data;
pub mod dsl;
pub mod evolution;
pub mod explain;
pub mod fitness;
pub mod llm;
pub mod primitives;
pub mod raster;
pub mod simplify;

pub use data::{load_manifest, save_manifest, split_by_longitude, ObservationSet, SplitSpec};
pub use dsl::{parse, parse_and_check, pretty_print, FeatureProgram};
pub use evolution::{Evolution, EvolutionConfig, RunResult};
pub use fitness::{Candidate, EvalContext, Metric, MetricId, RegressionHead};
pub use llm::{HttpBackend, LlmBackend, PromptBundle, ScriptedBackend};
pub use primitives::{InputDescriptor, PrimitiveRegistry};
