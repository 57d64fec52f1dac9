//! Reconstruction of missing fragments of solid binary 3-D shapes.
//!
//! The defective shape enters as a binary occupancy volume, is converted to a
//! solid point cloud, split into fixed-budget groups, completed group by group
//! with a geometry-aware transformer, merged over several refinement passes,
//! and finally voxelized and cleaned up with binary morphology. The working
//! memory of the completion step depends on the model configuration alone, not
//! on the size of the input shape.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`voxel`] — binary volumes, sidecar/NRRD I/O, morphology, meshing
//! * [`cloud`] — point clouds, normalization, group splitting, augmentation
//! * [`neighbors`] — exact chunked k-nearest-neighbor queries
//! * [`objective`] — Chamfer-family training objectives with analytic gradients
//! * [`model`] — the completion transformer and its trainer
//! * [`pipeline`] — end-to-end case completion
//! * [`metrics`] — DSC / boundary DSC / HD95 / Chamfer evaluation
//! * [`data`] — dataset scanning, resampling, synthetic phantoms

pub mod cloud;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod objective;
pub mod pipeline;
pub mod tensor;
pub mod track;
pub mod util;
pub mod voxel;

pub use cloud::{AugmentConfig, Frame, GroupSplit, NormTransform, PointCloud};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{ModelConfig, ModelParams, TrainConfig};
pub use neighbors::KnnResult;
pub use objective::{LossValue, ObjectiveConfig, ObjectiveKind};
pub use pipeline::{PipelineConfig, ReconstructionResult};
pub use voxel::{StructuringElement, VoxelVolume};
