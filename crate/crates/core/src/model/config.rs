use serde::{Deserialize, Serialize};

use crate::degradation::check_scale;
use crate::error::{contract, Result};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DssrConfig {
    /// Feature width of every intermediate layer.
    pub channels: usize,
    /// Residual blocks in the structure feature extractor.
    pub stru_fe_blocks: usize,
    /// Residual blocks in the reconstruction module.
    pub recon_blocks: usize,
    pub detail_fe_convs_per_branch: usize,
    pub scale: usize,
    /// Recurrent steps unrolled during training.
    pub steps: usize,
}

impl DssrConfig {
    /// Full-size network.
    pub fn full(scale: usize) -> Self {
        DssrConfig {
            channels: 128,
            stru_fe_blocks: 15,
            recon_blocks: 5,
            detail_fe_convs_per_branch: 4,
            scale,
            steps: 4,
        }
    }

    /// CPU-trainable network used for the desk-scale experiments.
    pub fn desk(scale: usize) -> Self {
        DssrConfig {
            channels: 32,
            stru_fe_blocks: 2,
            recon_blocks: 1,
            ..Self::full(scale)
        }
    }

    /// Smallest useful network, for gradient checks and smoke tests.
    pub fn tiny(scale: usize) -> Self {
        DssrConfig {
            channels: 8,
            stru_fe_blocks: 1,
            recon_blocks: 1,
            steps: 2,
            ..Self::full(scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        contract!(
            self.channels >= 1
                && self.stru_fe_blocks >= 1
                && self.recon_blocks >= 1
                && self.detail_fe_convs_per_branch >= 1
                && self.steps >= 1,
            "all network counts must be >= 1: {self:?}"
        );
        Ok(())
    }

    /// `(kernel, stride, padding)` of the transposed convolution whose
    /// output is exactly `scale` times its input.
    pub fn deconv_geometry(&self) -> (usize, usize, usize) {
        match self.scale {
            3 => (9, 3, 3),
            s => (2 * s, s, s / 2),
        }
    }
}
