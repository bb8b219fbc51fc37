//! Diffusion-bridge dense prediction on procedurally generated toy tasks.
//!
//! The crate implements the full pipeline: a variance-preserving noise
//! schedule, closed-form bridge kernels between paired latents, a linear
//! image codec, procedural depth/normal datasets, a hand-differentiated MLP
//! noise predictor, likelihood training with distribution-aligned
//! normalization and an image consistency term, Markovian and accelerated
//! samplers, dense-prediction metrics, and a Monte-Carlo verification suite
//! that checks every closed-form result against brute force.

pub mod bridge;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod evaluator;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use bridge::BridgeCoefficients;
pub use checkpoint::Checkpoint;
pub use codec::LinearCodec;
pub use dataset::{NoiseKind, SamplePair, ScenarioConfig, Task};
pub use denoiser::{AdamState, Denoiser, DenoiserConfig, GradientBuffer};
pub use error::{Error, Result};
pub use evaluator::{DepthEvalResult, NormalEvalResult};
pub use rng::Rng;
pub use sampler::{GMode, NoisePredictor, SamplerConfig};
pub use schedule::Schedule;
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainLogRecord};
pub use verify::VerificationReport;

use std::io::Write;
use std::path::Path;

/// Write a file atomically: serialize into `<path>.tmp`, then rename.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
{
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        write(&mut w).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
