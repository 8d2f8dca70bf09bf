//! Contact-state estimation from a reference + contact image pair.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::geometry::ShellGeometry;
use crate::image::TactileImage;
use crate::mechanics::MechanicsError;
use crate::render::RenderError;

pub mod baseline;
pub mod metrics;
pub mod nn;
pub mod regressor;
pub mod samples;

/// Side length of the network input.
pub const INPUT_SIZE: usize = 224;
pub const INPUT_CHANNELS: usize = 6;
/// Regression outputs, in order: x (3), f (3), tau, d.
pub const OUTPUTS: usize = 8;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("reference belongs to {reference}, frame to {frame}")]
    Pairing { reference: String, frame: String },
    #[error("image sizes differ: {0} vs {1}")]
    Size(usize, usize),
    #[error("model has not been trained")]
    Uninitialized,
    #[error("label leakage: {0}")]
    Leakage(String),
    #[error("label mode: {0}")]
    Mode(String),
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Estimated contact state. Force is in the contact frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateEstimate {
    pub x: [f64; 3],
    pub f: [f64; 3],
    pub tau: f64,
    pub d: f64,
}

impl StateEstimate {
    pub fn zero() -> Self {
        Self {
            x: [0.0; 3],
            f: [0.0; 3],
            tau: 0.0,
            d: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.f).all(|v| v.is_finite()) && self.tau.is_finite() && self.d.is_finite()
    }

    /// Estimate with `x` moved onto the membrane.
    pub fn projected(mut self, geom: &ShellGeometry) -> Self {
        let p = geom.project_unchecked(&nalgebra::Vector3::from(self.x)).position;
        self.x = [p.x, p.y, p.z];
        self
    }

    pub fn to_vector(&self) -> [f64; OUTPUTS] {
        [self.x[0], self.x[1], self.x[2], self.f[0], self.f[1], self.f[2], self.tau, self.d]
    }

    pub fn from_vector(v: &[f64; OUTPUTS]) -> Self {
        Self {
            x: [v[0], v[1], v[2]],
            f: [v[3], v[4], v[5]],
            tau: v[6],
            d: v[7],
        }
    }
}

/// Stacked `(I_ref, I_t)` network input, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub data: Vec<f32>,
}

impl ModelInput {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = INPUT_SIZE * INPUT_SIZE;
        &self.data[c * n..(c + 1) * n]
    }
}

fn check_pair(reference: &TactileImage, frame: &TactileImage) -> Result<(), EstimatorError> {
    if reference.instance_id != frame.instance_id {
        return Err(EstimatorError::Pairing {
            reference: reference.instance_id.clone(),
            frame: frame.instance_id.clone(),
        });
    }
    if reference.size != frame.size {
        return Err(EstimatorError::Size(reference.size, frame.size));
    }
    Ok(())
}

/// Area-downsamples both frames to 224x224 and stacks them, reference first.
pub fn preprocess(reference: &TactileImage, frame: &TactileImage) -> Result<ModelInput, EstimatorError> {
    check_pair(reference, frame)?;
    let mut data = reference.area_resample(INPUT_SIZE);
    data.extend(frame.area_resample(INPUT_SIZE));
    Ok(ModelInput { data })
}
