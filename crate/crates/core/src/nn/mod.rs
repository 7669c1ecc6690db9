//! The feature network: architecture description, graph IR, builders,
//! teachers and model files.

pub mod arch;
pub mod build;
pub mod graph;
pub mod model;
pub mod params;
pub mod serialize;
pub mod teacher;

pub use arch::{ActKind, ArchSpec, BlockChoice, BlockKind, NormKind, StemSpec};
pub use build::{build_student, build_teacher};
pub use graph::{Graph, Node, Op, ValueRef};
pub use model::{FeatureModel, ModelGraph};
pub use params::{ParamStore, ParamVars};
pub use teacher::ProceduralTeacher;
