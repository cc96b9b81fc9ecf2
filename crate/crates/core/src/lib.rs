//! Group-equivariant convolutional networks (p4, p4m) with cyclic
//! equivariant self-attention along the group axis, together with the
//! checks that verify their equivariance laws and a small training harness.

pub mod attention;
pub mod data;
pub mod equicheck;
pub mod error;
pub mod gconv;
pub mod group;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use data::{DatasetBundle, RotationMode};
pub use gconv::FeatureMap;
pub use group::{GroupElement, GroupKind, GroupSpec};
pub use model::{build_model, ArchName, ArchSpec, Model};
pub use tensor::Tensor;
pub use train::{evaluate, train_loop, LrSchedule, TrainConfig};
