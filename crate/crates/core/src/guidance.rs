//! Classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f32,
    /// When false only the conditional branch runs and its prediction is used as is.
    pub enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 7.5, enabled: true }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "guidance scale must be finite and non-negative, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Number of denoiser passes per uncollapsed step.
    pub fn branches(&self) -> usize {
        if self.enabled {
            2
        } else {
            1
        }
    }
}

/// eps_uncond + w·(eps_cond − eps_uncond), elementwise.
pub fn combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f32) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::shape(
            "combine",
            format!("{:?} vs {:?}", eps_uncond.shape(), eps_cond.shape()),
        ));
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + w * (c - u))
        .collect();
    let out = Tensor::new(eps_uncond.shape().to_vec(), data)?;
    out.check_finite("combine")?;
    Ok(out)
}
