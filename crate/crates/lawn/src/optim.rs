//! Norm-constrained step kernels wrapped around SGD-momentum, Adam and LAMB.
//!
//! Each optimizer runs free (unconstrained) until the switch step k. At
//! t == k the moment state is zeroed and every group's norm is captured;
//! from then on raw gradients and update directions are projected onto the
//! tangent plane of the group's norm sphere, and each update ends with a
//! renormalization back to the captured norm. Decoupled weight decay is
//! applied only while t < k.
//!
//! Step indices are 1-based and bias correction always uses the global step
//! counter; the counter is not restarted at the switch.

use crate::error::{LawnError, Result};
use crate::linalg::{dot, norm};
use crate::network::{GradSet, Network, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimFamily {
    Sgd,
    Adam,
    Lamb,
    /// LAMB with the trust ratio clipped to a max value of 1.0.
    LambPlus,
}

#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub family: OptimFamily,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub weight_decay_lambda: f64,
    /// Global-norm gradient clip applied to the raw gradient before any
    /// projection; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Switch step k; `None` means free training forever.
    pub switch_step_k: Option<u64>,
}

impl OptimConfig {
    /// Family defaults: beta1 0.9, beta2 0.999, epsilon 1e-8 for Adam and
    /// 1e-6 otherwise, momentum 0.9, clip 1.0 for the adaptive families and
    /// no clip for SGD.
    pub fn for_family(family: OptimFamily) -> Self {
        let epsilon = match family {
            OptimFamily::Adam => 1e-8,
            _ => 1e-6,
        };
        let grad_clip_norm = match family {
            OptimFamily::Sgd => None,
            _ => Some(1.0),
        };
        Self {
            family,
            beta1: 0.9,
            beta2: 0.999,
            epsilon,
            momentum: 0.9,
            weight_decay_lambda: 0.0,
            grad_clip_norm,
            switch_step_k: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(LawnError::Config(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(LawnError::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.weight_decay_lambda < 0.0 {
            return Err(LawnError::Config("weight decay must be >= 0".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(LawnError::Config("grad clip must be > 0".into()));
            }
        }
        if self.switch_step_k == Some(0) {
            return Err(LawnError::Config("switch step k is 1-based".into()));
        }
        Ok(())
    }
}

/// Moment buffers plus the 1-based step counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    momentum_buffer: Vec<Vec<f64>>,
    reset_done: bool,
    /// Trust ratios applied by the most recent LAMB step, per group.
    pub last_trust_ratios: Vec<f64>,
}

impl OptimState {
    pub fn new(net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.groups().iter().map(|g| vec![0.0; g.len()]).collect();
        Self {
            t: 1,
            m: zeros.clone(),
            v: zeros.clone(),
            momentum_buffer: zeros,
            reset_done: false,
            last_trust_ratios: Vec::new(),
        }
    }

    /// Next step index (1-based).
    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn momentum_buffer(&self) -> &[Vec<f64>] {
        &self.momentum_buffer
    }
}

/// True once step t has entered the constrained phase.
#[inline]
pub fn past_switch(k: Option<u64>, t: u64) -> bool {
    matches!(k, Some(k) if t >= k)
}

/// Removes the radial component of g relative to w: `h = g - (w.g)/c^2 w`.
/// Before the switch the gradient passes through unchanged.
pub fn project(g: &[f64], w: &[f64], c: f64, k: Option<u64>, t: u64) -> Vec<f64> {
    if !past_switch(k, t) {
        return g.to_vec();
    }
    assert!(c > 0.0, "projection needs a positive captured norm");
    let coeff = dot(w, g) / (c * c);
    g.iter().zip(w).map(|(gi, wi)| gi - coeff * wi).collect()
}

/// Rescales w back onto its captured norm sphere once t >= k.
///
/// The rescale `w <- (c/||w||) w` is skipped when the factor already sits
/// within the rounding tolerance of the norm computation itself (a few ulps
/// scaled by the vector length). One scaling pass always lands inside that
/// tolerance, so renormalization is bit-idempotent: feeding the output back
/// in returns it unchanged.
pub fn normalize_weights(w: &[f64], c: f64, k: Option<u64>, t: u64) -> Result<Vec<f64>> {
    if !past_switch(k, t) {
        return Ok(w.to_vec());
    }
    let mut cur = w.to_vec();
    let tol = f64::EPSILON * (w.len() as f64 + 4.0);
    for _ in 0..3 {
        let n = norm(&cur);
        if n < 1e-12 {
            return Err(LawnError::Numeric(
                "degenerate group: cannot renormalize a near-zero weight vector".into(),
            ));
        }
        let beta = c / n;
        if (beta - 1.0).abs() <= tol {
            break;
        }
        cur = cur.iter().map(|wi| beta * wi).collect();
    }
    Ok(cur)
}

/// Adds the decoupled weight-decay term `lambda * w` to an update while in
/// the free phase; the constrained phase drops decay entirely.
pub fn decay_update(r: &[f64], w: &[f64], lambda: f64, k: Option<u64>, t: u64) -> Vec<f64> {
    if past_switch(k, t) || lambda == 0.0 {
        return r.to_vec();
    }
    r.iter().zip(w).map(|(ri, wi)| ri + lambda * wi).collect()
}

/// Zeroes all moment and momentum buffers. Must be called exactly once, at
/// the switch step; the step counter is preserved.
pub fn reset_state(state: &mut OptimState) -> Result<()> {
    if state.reset_done {
        return Err(LawnError::Usage("optimizer state already reset".into()));
    }
    for buf in state
        .m
        .iter_mut()
        .chain(state.v.iter_mut())
        .chain(state.momentum_buffer.iter_mut())
    {
        for x in buf {
            *x = 0.0;
        }
    }
    state.reset_done = true;
    Ok(())
}

/// Captures each group's current norm as its constraint level. Groups with
/// norm below 1e-12 stay unconstrained forever.
pub fn capture_norms(groups: &mut [ParamGroup]) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let n = g.norm();
        if n < 1e-12 {
            g.captured_norm = None;
            g.constrained = false;
            out.push(None);
        } else {
            g.captured_norm = Some(n);
            g.constrained = true;
            out.push(Some(n));
        }
    }
    out
}

fn switch_if_due(net: &mut Network, state: &mut OptimState, config: &OptimConfig) -> Result<()> {
    if let Some(k) = config.switch_step_k {
        if state.t == k {
            reset_state(state)?;
            capture_norms(net.groups_mut());
        }
    }
    Ok(())
}

fn clipped(grads: &GradSet, config: &OptimConfig) -> GradSet {
    let mut g = grads.clone();
    if let Some(max_norm) = config.grad_clip_norm {
        let n = g.global_norm();
        if n > max_norm {
            g.scale(max_norm / n);
        }
    }
    g
}

fn check_finite(net: &Network, t: u64) -> Result<()> {
    for g in net.groups() {
        if g.weights.iter().any(|x| !x.is_finite()) {
            return Err(LawnError::Numeric(format!(
                "non-finite weights in group {} after step {}",
                g.group_id, t
            )));
        }
    }
    Ok(())
}

/// SGD-momentum step with the constrained-phase projection and renorm.
/// Both the raw gradient and the momentum-applied direction are projected,
/// and the momentum buffer is zeroed at the switch.
pub fn sgd_lawn_step(
    net: &mut Network,
    grads: &GradSet,
    state: &mut OptimState,
    config: &OptimConfig,
    lr: f64,
) -> Result<()> {
    let t = state.t;
    let k = config.switch_step_k;
    switch_if_due(net, state, config)?;
    let g_all = clipped(grads, config);
    for gid in 0..net.n_groups() {
        let (active, c) = {
            let group = &net.groups()[gid];
            let active = past_switch(k, t) && group.constrained;
            (active, group.captured_norm.unwrap_or(0.0))
        };
        let w = net.groups()[gid].weights.clone();
        let g = if active {
            project(&g_all.groups[gid], &w, c, k, t)
        } else {
            g_all.groups[gid].clone()
        };
        let buf = &mut state.momentum_buffer[gid];
        for (b, gi) in buf.iter_mut().zip(&g) {
            *b = config.momentum * *b + gi;
        }
        let d = if active {
            project(buf, &w, c, k, t)
        } else {
            buf.clone()
        };
        let d = decay_update(&d, &w, config.weight_decay_lambda, k, t);
        let group = &mut net.groups_mut()[gid];
        for (wi, di) in group.weights.iter_mut().zip(&d) {
            *wi -= lr * di;
        }
        if active {
            group.weights = normalize_weights(&group.weights, c, k, t)?;
        }
    }
    check_finite(net, t)?;
    state.t += 1;
    Ok(())
}

/// Adam step with decoupled weight decay in the free phase and the
/// projection/renorm kernel in the constrained phase. Both the raw gradient
/// and the bias-corrected ratio are projected.
pub fn adam_lawn_step(
    net: &mut Network,
    grads: &GradSet,
    state: &mut OptimState,
    config: &OptimConfig,
    lr: f64,
) -> Result<()> {
    adam_like_step(net, grads, state, config, lr, false)
}

/// LAMB step: Adam ratio scaled per group by the trust ratio
/// `phi(||w||) / ||r||` with phi = identity; the LambPlus family clips the
/// ratio at 1.0. Constrained-phase handling is identical to Adam.
pub fn lamb_lawn_step(
    net: &mut Network,
    grads: &GradSet,
    state: &mut OptimState,
    config: &OptimConfig,
    lr: f64,
) -> Result<()> {
    adam_like_step(net, grads, state, config, lr, true)
}

fn adam_like_step(
    net: &mut Network,
    grads: &GradSet,
    state: &mut OptimState,
    config: &OptimConfig,
    lr: f64,
    trust_ratio: bool,
) -> Result<()> {
    let t = state.t;
    let k = config.switch_step_k;
    switch_if_due(net, state, config)?;
    let g_all = clipped(grads, config);
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    if trust_ratio {
        state.last_trust_ratios = vec![1.0; net.n_groups()];
    }
    for gid in 0..net.n_groups() {
        let (active, c) = {
            let group = &net.groups()[gid];
            let active = past_switch(k, t) && group.constrained;
            (active, group.captured_norm.unwrap_or(0.0))
        };
        let w = net.groups()[gid].weights.clone();
        let g = if active {
            project(&g_all.groups[gid], &w, c, k, t)
        } else {
            g_all.groups[gid].clone()
        };
        let m = &mut state.m[gid];
        let v = &mut state.v[gid];
        for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
        }
        let mut r: Vec<f64> = m
            .iter()
            .zip(v.iter())
            .map(|(mi, vi)| (mi / bc1) / ((vi / bc2).sqrt() + config.epsilon))
            .collect();
        if active {
            r = project(&r, &w, c, k, t);
        }
        let r = decay_update(&r, &w, config.weight_decay_lambda, k, t);
        let scale = if trust_ratio {
            let rn = norm(&r);
            let wn = norm(&w);
            let mut ratio = if rn == 0.0 || wn == 0.0 { 1.0 } else { wn / rn };
            if config.family == OptimFamily::LambPlus {
                ratio = ratio.min(1.0);
            }
            state.last_trust_ratios[gid] = ratio;
            ratio
        } else {
            1.0
        };
        let group = &mut net.groups_mut()[gid];
        for (wi, ri) in group.weights.iter_mut().zip(&r) {
            *wi -= lr * scale * ri;
        }
        if active {
            group.weights = normalize_weights(&group.weights, c, k, t)?;
        }
    }
    check_finite(net, t)?;
    state.t += 1;
    Ok(())
}

/// Dispatches one step by family.
pub fn step(
    net: &mut Network,
    grads: &GradSet,
    state: &mut OptimState,
    config: &OptimConfig,
    lr: f64,
) -> Result<()> {
    match config.family {
        OptimFamily::Sgd => sgd_lawn_step(net, grads, state, config, lr),
        OptimFamily::Adam => adam_lawn_step(net, grads, state, config, lr),
        OptimFamily::Lamb | OptimFamily::LambPlus => lamb_lawn_step(net, grads, state, config, lr),
    }
}
