//! Electrical impedance tomography with deep generative priors.
//!
//! The crate covers the complete electrode model forward problem, damped
//! Gauss-Newton reconstruction, synthetic phantom datasets, image quality
//! metrics, and the generative-model kernels (conditional VAE, conditional
//! affine coupling flows, variance-exploding score SDE samplers) used to
//! post-process or replace the classical reconstruction.

pub mod dataset;
pub mod dgm;
pub mod error;
pub mod fem;
pub mod inverse;
pub mod mesh;
pub mod metrics;
pub mod nnet;
pub mod phantom;
pub mod raster;

pub use error::{EitError, Result};
pub use dataset::{DatasetRecord, ForwardModel};
pub use dgm::{CsdStarConfig, ScoreFunction, SdeSchedule};
pub use fem::{ForwardSolution, MeasurementVector, Protocol};
pub use inverse::{InverseConfig, JacobianMatrix};
pub use mesh::{Circle, ConductivityField, Mesh, Point};
pub use metrics::MetricReport;
pub use nnet::{Activation, DenseNet, GradientSet};
pub use phantom::{PhantomKind, PhantomSpec};
pub use raster::{PixelImage, RasterOperator};
