//! AdamW with decoupled weight decay, and the one-cycle learning-rate /
//! momentum schedule.

/// One AdamW update on a flat parameter slice. `t` is the 1-based step
/// count used for bias correction. Weight decay is decoupled: it scales
/// the parameter directly and never enters the moment estimates.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * weight_decay * params[i];
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW state over an ordered list of parameter tensors. `beta1` comes
/// from the schedule at each step (one-cycle momentum).
#[derive(Debug)]
pub struct AdamW {
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    slots: Vec<AdamSlot>,
}

impl AdamW {
    pub fn new(sizes: &[usize], beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta2,
            eps,
            weight_decay,
            t: 0,
            slots: sizes
                .iter()
                .map(|&n| AdamSlot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    /// Begin a step; returns the 1-based step index for bias correction.
    pub fn next_step(&mut self) -> u64 {
        self.t += 1;
        self.t
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64, beta1: f64) {
        let s = &mut self.slots[slot];
        adamw_step(
            params,
            grads,
            &mut s.m,
            &mut s.v,
            self.t,
            lr,
            beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        );
    }
}

/// One-cycle schedule: cosine warmup from `lr_max / div_factor` to
/// `lr_max` over the first 40% of steps, then cosine annealing down to
/// `lr_max / (div_factor * 1e4)`. Momentum runs the inverse path between
/// `momentum_range.0` and `momentum_range.1`.
pub fn one_cycle_lr(
    step: usize,
    total_steps: usize,
    lr_max: f64,
    div_factor: f64,
    momentum_range: (f64, f64),
) -> (f64, f64) {
    assert!(total_steps >= 1 && step <= total_steps);
    let warmup = 0.4 * total_steps as f64;
    let lr_start = lr_max / div_factor;
    let lr_final = lr_max / (div_factor * 1e4);
    let (m_hi, m_lo) = momentum_range;
    let cos_blend = |t: f64| (1.0 - (std::f64::consts::PI * t).cos()) / 2.0;
    if (step as f64) <= warmup {
        let t = step as f64 / warmup;
        let b = cos_blend(t);
        (lr_start + (lr_max - lr_start) * b, m_hi + (m_lo - m_hi) * b)
    } else {
        let t = (step as f64 - warmup) / (total_steps as f64 - warmup);
        let b = cos_blend(t);
        (lr_max + (lr_final - lr_max) * b, m_lo + (m_hi - m_lo) * b)
    }
}
