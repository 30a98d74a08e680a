//! Kolmogorov–Arnold networks whose per-layer basis count is learned with a
//! variational objective.

pub mod autodiff;
pub mod basis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interp;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod properties;
pub mod run;
pub mod train;
pub mod variational;
pub mod window;

pub use autodiff::{Tape, Tensor, Var};
pub use basis::{Activation, BasisFamily};
pub use config::{FlatConfig, RunConfig};
pub use data::{Dataset, SplitName};
pub use error::{Error, Result};
pub use interp::InterpScheme;
pub use layer::{InterpTarget, KanLayer, Mode};
pub use model::{KanSpec, Model, ModelKind, Task};
pub use train::{EpochRecord, TrainConfig, Trainer};
pub use variational::{ElboBreakdown, Priors};
pub use window::{WindowParams, WindowSide};
