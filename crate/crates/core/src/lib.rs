//! Sparse scene recovery with unfolded VAMP and parameter-convergence
//! CFAR detection.

pub mod atomic;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod pcd;
pub mod rng;
pub mod signal;
pub mod theory;
pub mod unfold;
pub mod vamp;

pub use error::{Error, Result};
pub use exec::Exec;
pub use signal::{Measurement, ObservationModel, Scene, SceneParams, C64};
pub use vamp::{run_vamp, VampConfig, VampLayerParams, VampOutput};
