//! Training losses with analytic gradients: the modified focal loss for
//! the center heatmap, masked L1 for offset/z/size, the per-bin
//! orientation loss, and the weighted total.

use crate::error::{Error, Result};
use crate::net::tensor::Tensor;
use crate::targets::OrientationTarget;

/// Per-sub-loss weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_off: f64,
    pub lambda_z: f64,
    pub lambda_size: f64,
    pub lambda_ori: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_off: 1.0,
            lambda_z: 1.5,
            lambda_size: 0.3,
            lambda_ori: 1.0,
        }
    }
}

/// Focal-loss exponents and the probability clamp applied before logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0, eps: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct FocalLoss {
    pub value: f64,
    /// Gradient w.r.t. the predicted probability map.
    pub grad: Tensor,
    /// False when `n_objects` was zero and the sum was left undivided.
    pub normalized: bool,
}

/// Modified focal loss over a probability heatmap. Pixels whose target is
/// exactly 1 are positives; everything else is a soft negative weighted
/// by `(1 - M)^beta`. Predictions are clamped to `[eps, 1 - eps]`, with
/// zero gradient where the clamp is active.
pub fn focal_loss(
    m_hat: &Tensor,
    m: &Tensor,
    n_objects: usize,
    params: &FocalParams,
) -> Result<FocalLoss> {
    m_hat.expect_shape(m.shape())?;
    if !(params.alpha > 0.0 && params.beta > 0.0 && params.eps > 0.0 && params.eps < 0.5) {
        return Err(Error::Config(format!("invalid focal params {params:?}")));
    }
    let (alpha, beta, eps) = (params.alpha, params.beta, params.eps);
    let norm = if n_objects > 0 { n_objects as f64 } else { 1.0 };
    let mut grad = Tensor::zeros(m_hat.shape());
    let gd = grad.data_mut();
    let mut acc = 0.0;
    for i in 0..m_hat.numel() {
        let target = m.data()[i];
        let raw = m_hat.data()[i];
        let q = raw.clamp(eps, 1.0 - eps);
        let clamped = raw < eps || raw > 1.0 - eps;
        if target == 1.0 {
            let one_q = 1.0 - q;
            acc += -(one_q.powf(alpha)) * q.ln();
            if !clamped {
                gd[i] = (alpha * one_q.powf(alpha - 1.0) * q.ln() - one_q.powf(alpha) / q) / norm;
            }
        } else {
            let wq = (1.0 - target).powf(beta);
            acc += -wq * q.powf(alpha) * (1.0 - q).ln();
            if !clamped {
                gd[i] = -wq * (alpha * q.powf(alpha - 1.0) * (1.0 - q).ln()
                    - q.powf(alpha) / (1.0 - q))
                    / norm;
            }
        }
    }
    Ok(FocalLoss {
        value: acc / norm,
        grad,
        normalized: n_objects > 0,
    })
}

#[derive(Debug, Clone)]
pub struct MaskedL1Loss {
    pub value: f64,
    pub grad: Tensor,
}

/// `(1/N) * sum |pred - target|` over masked pixels (the mask is
/// per-pixel and applies to every channel). The subgradient at exact
/// equality is 0.
pub fn masked_l1_loss(
    pred: &Tensor,
    target: &Tensor,
    mask: &[bool],
    n_objects: usize,
) -> Result<MaskedL1Loss> {
    pred.expect_shape(target.shape())?;
    let channels = pred.shape()[0];
    let spatial = pred.numel() / channels.max(1);
    if mask.len() != spatial {
        return Err(Error::ShapeMismatch {
            expected: format!("mask of {spatial} pixels"),
            got: format!("{}", mask.len()),
        });
    }
    let norm = n_objects.max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let gd = grad.data_mut();
    let mut acc = 0.0;
    for c in 0..channels {
        let base = c * spatial;
        for (i, &on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            let d = pred.data()[base + i] - target.data()[base + i];
            acc += d.abs();
            gd[base + i] = d.signum() * if d == 0.0 { 0.0 } else { 1.0 } / norm;
        }
    }
    Ok(MaskedL1Loss { value: acc / norm, grad })
}

#[derive(Debug, Clone)]
pub struct OrientationLoss {
    pub value: f64,
    /// Gradient w.r.t. the per-object per-bin classification logits.
    pub d_mu: Vec<[[f64; 2]; 2]>,
    /// Gradient w.r.t. the per-object per-bin (sin, cos) residuals.
    pub d_nu: Vec<[[f64; 2]; 2]>,
}

/// Per-object orientation loss: for each bin, 2-class cross-entropy of
/// the bin logits against the membership label, plus L1 on the residual
/// for active bins. Normalized by `n_objects`.
pub fn orientation_loss(
    mu_hat: &[[[f64; 2]; 2]],
    nu_hat: &[[[f64; 2]; 2]],
    targets: &[OrientationTarget],
    n_objects: usize,
) -> Result<OrientationLoss> {
    if mu_hat.len() != targets.len() || nu_hat.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} per-object predictions", targets.len()),
            got: format!("{} mu, {} nu", mu_hat.len(), nu_hat.len()),
        });
    }
    let norm = n_objects.max(1) as f64;
    let mut acc = 0.0;
    let mut d_mu = vec![[[0.0; 2]; 2]; targets.len()];
    let mut d_nu = vec![[[0.0; 2]; 2]; targets.len()];
    for (k, t) in targets.iter().enumerate() {
        for bin in 0..2 {
            let mu = mu_hat[k][bin];
            let label = t.eta[bin] as usize;
            let m = mu[0].max(mu[1]);
            let e0 = (mu[0] - m).exp();
            let e1 = (mu[1] - m).exp();
            let zsum = e0 + e1;
            let p = [e0 / zsum, e1 / zsum];
            acc += -p[label].ln();
            d_mu[k][bin][0] = (p[0] - if label == 0 { 1.0 } else { 0.0 }) / norm;
            d_mu[k][bin][1] = (p[1] - if label == 1 { 1.0 } else { 0.0 }) / norm;
            if t.eta[bin] {
                for j in 0..2 {
                    let d = nu_hat[k][bin][j] - t.nu[bin][j];
                    acc += d.abs();
                    d_nu[k][bin][j] = if d == 0.0 { 0.0 } else { d.signum() } / norm;
                }
            }
        }
    }
    Ok(OrientationLoss { value: acc / norm, d_mu, d_nu })
}

/// The five sub-loss values of one frame or batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub heat: f64,
    pub off: f64,
    pub z: f64,
    pub size: f64,
    pub ori: f64,
}

/// Weighted total: `L_heat + l_off L_off + l_z L_z + l_size L_size +
/// l_ori L_ori`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.heat
        + weights.lambda_off * parts.off
        + weights.lambda_z * parts.z
        + weights.lambda_size * parts.size
        + weights.lambda_ori * parts.ori
}
