//! Generator and discriminator objectives.
//!
//! * `l1`: mean absolute chroma error between prediction and target.
//! * adversarial: binary cross-entropy on the discriminator's averaged logit,
//!   real stacks labelled 1, generated stacks labelled 0.
//! * perceptual: mean absolute difference of extractor features at layer
//!   `rho`, computed on assembled RGB images.
//! * total: `lambda1 * adv + lambda2 * perceptual + lambda3 * l1`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::colorspace::model_lab_to_rgb_tensor;
use crate::error::{Error, Result};
use crate::perceptual::PerceptualExtractor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Adversarial term.
    pub lambda1: f64,
    /// Perceptual term.
    pub lambda2: f64,
    /// L1 term.
    pub lambda3: f64,
    /// Perceptual layer index.
    pub rho: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            rho: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda1, self.lambda2, self.lambda3];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {ws:?}")));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if self.rho == 0 {
            return Err(Error::Config("perceptual layer index starts at 1".into()));
        }
        Ok(())
    }
}

fn same_shape(e: &Tensor, t: &Tensor) -> Result<()> {
    if e.dims() != t.dims() {
        return Err(Error::shape(format!("{:?}", t.dims()), format!("{:?}", e.dims())));
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn l1_loss(e: &Tensor, t: &Tensor) -> Result<Tensor> {
    same_shape(e, t)?;
    Ok((e - t.to_dtype(e.dtype())?)?.abs()?.mean_all()?)
}

/// Scalar BCE on a logit, in the stable form
/// `max(x, 0) - x * y + ln(1 + e^{-|x|})`.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Batch BCE: per-sample losses for logits `(N,)` against a constant label, averaged.
pub fn bce_with_logits(logits: &Tensor, label: f64) -> Result<Tensor> {
    let pos = logits.relu()?;
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok(((pos - logits.affine(label, 0.0)?)? + soft)?.mean_all()?)
}

pub fn adv_generator_loss(fake_logits: &Tensor) -> Result<Tensor> {
    bce_with_logits(fake_logits, 1.0)
}

pub fn adv_discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok((bce_with_logits(real_logits, 1.0)? + bce_with_logits(fake_logits, 0.0)?)?)
}

/// Normalised feature L1 between two RGB batches `(N, 3, H, W)` in `[0, 1]`.
pub fn perceptual_loss(
    e_rgb: &Tensor,
    t_rgb: &Tensor,
    extractor: &dyn PerceptualExtractor,
    rho: usize,
) -> Result<Tensor> {
    same_shape(e_rgb, t_rgb)?;
    let fe = extractor.features(e_rgb, rho)?;
    let ft = extractor.features(t_rgb, rho)?;
    Ok((fe - ft)?.abs()?.mean_all()?)
}

/// Perceptual loss on chroma predictions: both are assembled with `l` into RGB first.
pub fn perceptual_loss_lab(
    l: &Tensor,
    e_ab: &Tensor,
    t_ab: &Tensor,
    extractor: &dyn PerceptualExtractor,
    rho: usize,
) -> Result<Tensor> {
    same_shape(e_ab, t_ab)?;
    let e_rgb = model_lab_to_rgb_tensor(l, e_ab)?;
    let t_rgb = model_lab_to_rgb_tensor(l, &t_ab.to_dtype(e_ab.dtype())?)?;
    perceptual_loss(&e_rgb, &t_rgb, extractor, rho)
}

pub fn total_generator_loss(adv: &Tensor, perc: &Tensor, l1: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((adv.affine(w.lambda1, 0.0)? + perc.affine(w.lambda2, 0.0)?)? + l1.affine(w.lambda3, 0.0)?)?)
}

/// Scalar value of a 0-d tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
