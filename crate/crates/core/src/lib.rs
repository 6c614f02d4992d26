//! Voxel-grid radiance fields whose color network is a spiking MLP.
//!
//! Every camera ray is sampled against a density grid, low-weight samples are
//! masked out, and the survivors are fed to a leaky integrate-and-fire MLP one
//! sample per time step. Irregular survivor counts are packed into regular
//! `[ray, time, channel]` batches either by keeping masked slots as zeros
//! ([`pack::pack_tp`]) or by condensing survivors to the front of each row
//! ([`pack::pack_tcp`]).
//!
//! Module map:
//!
//! * [`grid`]: dense density / feature grids, trilinear interpolation and its adjoint.
//! * [`rays`]: cameras, ray sampling, opacity, transmittance and masking.
//! * [`snn`]: LIF dynamics, the spiking MLP, encoders and surrogate-gradient BPTT.
//! * [`pack`]: time-ray alignment, padding / condensing, temporal flip.
//! * [`render`]: the full render pipeline, compositing, loss and training.
//! * [`metrics`]: operation counting, energy estimation, PSNR and SSIM.
//! * [`dataio`]: transforms manifests, procedural scenes, images and checkpoints.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataio;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod pack;
pub mod rays;
pub mod render;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{Aabb, DensityActivation, DensityGrid, FeatureGrid, GridGradient};
pub use metrics::{EnergyModel, EnergyReport, OpCount};
pub use pack::{PackedBatch, PackingMode};
pub use rays::{Camera, MaskedSamples, Ray, RaySamples};
pub use render::{Encoder, RenderConfig, Scene, TrainConfig};
pub use snn::{LifConfig, SpikingMlp, SurrogateConfig, SurrogateForm};
pub use tensor::Tensor3;

/// World-space 3-vector.
pub type Vec3 = [f64; 3];
