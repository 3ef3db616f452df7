//! Spiking U-Net segmentation of multi-modal brain volumes.
//!
//! Three view models (sagittal, coronal, axial) treat each slice of a volume
//! as one time step of a spiking network, are trained online with forward
//! propagation through time, and are fused voxel-wise into one probability
//! volume. Everything numeric is generic over [`Scalar`]; the `*32` aliases
//! below are the production instantiation.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod flops;
pub mod fptt;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod spiking;
pub mod tensor;
pub mod train;

pub use data::{MultiModalVolume, View, ViewSlices};
pub use ensemble::{fuse_mean, predict_ensemble, EnsembleOutput, ProbVolume};
pub use error::{Error, Result};
pub use flops::{flops_count, FlopsRecorder, FlopsReport};
pub use fptt::{FpttState, TrainConfig};
pub use metrics::{ClassDice, MetricsReport};
pub use model::{ModelConfig, NetworkState, SpikingUSegNet};
pub use scalar::Scalar;
pub use spiking::LifState;
pub use tensor::{Parameter, Tape, Tensor, Var};
pub use train::Trainer;

pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type SpikingUSegNet32 = SpikingUSegNet<f32>;
pub type FpttState32 = FpttState<f32>;
pub type ProbVolume32 = ProbVolume<f32>;
pub type Trainer32 = Trainer<f32>;
