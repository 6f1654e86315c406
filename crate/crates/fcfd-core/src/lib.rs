//! Function-consistent feature distillation: staged teacher/student models,
//! shape-adapting bridges, hybrid-path sampling, provenance-keyed
//! normalization statistics, the composite objective, and the training and
//! probing loops built on them.

pub mod analysis;
pub mod bridges;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod params;
pub mod pathing;
pub mod staged;
pub mod trainer;

pub use error::{FcfdError, Result};
pub use graph::{Graph, NodeId, Scalar};
pub use losses::{FuncMode, LossReport, LossWeights};
pub use pathing::{MissingStatsPolicy, Mode, PathKey, PathSpec, SamplerConfig};
pub use staged::{build_reference_pair, Role, StagedModel, REGISTRY_NAMES};
pub use trainer::{TrainConfig, TrainMode};
