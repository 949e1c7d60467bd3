//! Homogeneous multilayer perceptron with exact reverse-mode gradients.
//!
//! Layers are dense affine maps with relu or identity activations. Each
//! layer's weights and bias live together in one flat `ParamGroup` vector
//! (row-major W, then b) so the optimizer can treat a whole layer as a
//! single norm-constrained subvector. All arithmetic is f64 with fixed
//! summation order, so identical inputs give bit-identical outputs.

use crate::error::{LawnError, Result};
use crate::linalg::{norm, Matrix};
use crate::losses::{batch_loss, LossKind};
use crate::rng::derive_key;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, has_bias: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            has_bias,
        }
    }

    /// Number of parameters in this layer's group.
    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.has_bias { self.out_dim } else { 0 }
    }
}

/// One layer's weights and bias as a flat vector, with the norm captured at
/// the free-to-constrained switch.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub group_id: usize,
    /// Row-major W (fan_out x fan_in), then b (fan_out) when present.
    pub weights: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub has_bias: bool,
    /// Norm captured at the switch step; `None` before the switch.
    pub captured_norm: Option<f64>,
    /// False for degenerate groups that must never be projected.
    pub constrained: bool,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.weights)
    }

    #[inline]
    fn weight(&self, o: usize, j: usize) -> f64 {
        self.weights[o * self.fan_in + j]
    }

    #[inline]
    fn bias(&self, o: usize) -> f64 {
        if self.has_bias {
            self.weights[self.fan_out * self.fan_in + o]
        } else {
            0.0
        }
    }
}

/// Per-layer activations retained by `forward` for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    inputs: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

/// One flat gradient vector per parameter group.
#[derive(Clone, Debug)]
pub struct GradSet {
    pub groups: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            groups: net.groups.iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }

    /// Euclidean norm over the concatenation of all groups.
    pub fn global_norm(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.groups {
            for x in g {
                *x *= s;
            }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for g in &self.groups {
            flat.extend_from_slice(g);
        }
        flat
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    specs: Vec<LayerSpec>,
    groups: Vec<ParamGroup>,
    logit_scale_alpha: f64,
    homogeneous_suffix_start: usize,
    version: u64,
}

/// Start index of the maximal homogeneous suffix given per-layer flags.
pub fn homogeneous_suffix_from_flags(homogeneous: &[bool]) -> usize {
    let mut start = homogeneous.len();
    for (i, &h) in homogeneous.iter().enumerate().rev() {
        if h {
            start = i;
        } else {
            break;
        }
    }
    start
}

/// Index of the first layer of the final homogeneous subnet. Relu and
/// identity layers are homogeneous; bias presence is ignored.
pub fn detect_homogeneous_suffix(specs: &[LayerSpec]) -> Result<usize> {
    let last = specs
        .last()
        .ok_or_else(|| LawnError::Config("network needs at least one layer".into()))?;
    if last.activation != Activation::Identity {
        return Err(LawnError::Config(
            "final layer must use the identity activation".into(),
        ));
    }
    let flags: Vec<bool> = specs
        .iter()
        .map(|s| matches!(s.activation, Activation::Relu | Activation::Identity))
        .collect();
    Ok(homogeneous_suffix_from_flags(&flags))
}

/// Builds a network with He-uniform weights U(-sqrt(6/fan_in), +sqrt(6/fan_in))
/// drawn from a SplitMix64 stream keyed by (seed, group, element), and zero
/// biases. Identical (specs, seed) give bit-identical weights on every
/// platform.
pub fn build_network(specs: &[LayerSpec], seed: u64) -> Result<Network> {
    let homogeneous_suffix_start = detect_homogeneous_suffix(specs)?;
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim < 1 || s.out_dim < 1 {
            return Err(LawnError::Config(format!(
                "layer {i} has zero dimension ({}x{})",
                s.in_dim, s.out_dim
            )));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(LawnError::Config(format!(
                "layer {i} expects in_dim {} but previous layer emits {}",
                s.in_dim,
                specs[i - 1].out_dim
            )));
        }
    }
    let mut groups = Vec::with_capacity(specs.len());
    for (gid, s) in specs.iter().enumerate() {
        let bound = (6.0 / s.in_dim as f64).sqrt();
        let n_w = s.in_dim * s.out_dim;
        let mut weights = Vec::with_capacity(s.param_count());
        for e in 0..n_w {
            let key = derive_key(seed, gid as u64, e as u64);
            const DEN: f64 = (1u64 << 53) as f64;
            let u = ((key >> 11) as f64) / DEN;
            weights.push(-bound + u * (2.0 * bound));
        }
        if s.has_bias {
            weights.extend(std::iter::repeat_n(0.0, s.out_dim));
        }
        groups.push(ParamGroup {
            group_id: gid,
            weights,
            fan_in: s.in_dim,
            fan_out: s.out_dim,
            has_bias: s.has_bias,
            captured_norm: None,
            constrained: false,
        });
    }
    Ok(Network {
        specs: specs.to_vec(),
        groups,
        logit_scale_alpha: 1.0,
        homogeneous_suffix_start,
        version: 0,
    })
}

impl Network {
    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Mutable group access. Any caller taking this invalidates outstanding
    /// forward caches.
    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        self.version += 1;
        &mut self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn logit_scale_alpha(&self) -> f64 {
        self.logit_scale_alpha
    }

    pub fn homogeneous_suffix_start(&self) -> usize {
        self.homogeneous_suffix_start
    }

    pub fn total_params(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    /// True when every layer is homogeneous (the homogeneous suffix covers the whole net).
    pub fn fully_homogeneous(&self) -> bool {
        self.homogeneous_suffix_start == 0
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.total_params());
        for g in &self.groups {
            flat.extend_from_slice(&g.weights);
        }
        flat
    }

    pub fn assign_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_params() {
            return Err(LawnError::Shape(format!(
                "expected {} params, got {}",
                self.total_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for g in &mut self.groups {
            let n = g.len();
            g.weights.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.version += 1;
        Ok(())
    }

    /// Sets the persistent output multiplier alpha in (0, 1]. Scaling is a
    /// pure output multiplier, so the classification argmax is unchanged.
    pub fn set_logit_scale(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(LawnError::Config(format!(
                "logit scale alpha must lie in (0, 1], got {alpha}"
            )));
        }
        self.logit_scale_alpha = alpha;
        self.version += 1;
        Ok(())
    }

    /// Runs the net on a batch (rows are examples). Returned logits already
    /// carry the alpha output scale.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols() != self.input_dim() {
            return Err(LawnError::Shape(format!(
                "input width {} does not match first layer in_dim {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let batch = inputs.rows();
        let mut pre = Vec::with_capacity(self.specs.len());
        let mut post = Vec::with_capacity(self.specs.len());
        for (l, spec) in self.specs.iter().enumerate() {
            let x = if l == 0 { inputs } else { &post[l - 1] };
            let g = &self.groups[l];
            let mut z = Matrix::zeros(batch, spec.out_dim);
            for i in 0..batch {
                let xr = x.row(i);
                for o in 0..spec.out_dim {
                    let mut acc = g.bias(o);
                    for (j, &xj) in xr.iter().enumerate() {
                        acc += g.weight(o, j) * xj;
                    }
                    z.set(i, o, acc);
                }
            }
            let a = match spec.activation {
                Activation::Identity => z.clone(),
                Activation::Relu => {
                    let mut a = z.clone();
                    for i in 0..batch {
                        for v in a.row_mut(i) {
                            if *v < 0.0 {
                                *v = 0.0;
                            }
                        }
                    }
                    a
                }
            };
            pre.push(z);
            post.push(a);
        }
        let mut logits = post[post.len() - 1].clone();
        if self.logit_scale_alpha != 1.0 {
            logits.scale(self.logit_scale_alpha);
        }
        let cache = ForwardCache {
            version: self.version,
            inputs: inputs.clone(),
            pre,
            post,
        };
        Ok((logits, cache))
    }

    /// Gradient of `sum_i <logits_i, dlogits_i>` w.r.t. each group; the
    /// alpha output scale is part of the chain.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<GradSet> {
        if cache.version != self.version {
            return Err(LawnError::Usage(
                "stale forward cache: weights changed since forward".into(),
            ));
        }
        let batch = cache.inputs.rows();
        if dlogits.rows() != batch || dlogits.cols() != self.output_dim() {
            return Err(LawnError::Shape(format!(
                "dlogits is {}x{}, expected {}x{}",
                dlogits.rows(),
                dlogits.cols(),
                batch,
                self.output_dim()
            )));
        }
        let mut grads = GradSet::zeros_like(self);
        let mut d = dlogits.clone();
        if self.logit_scale_alpha != 1.0 {
            d.scale(self.logit_scale_alpha);
        }
        for l in (0..self.specs.len()).rev() {
            let spec = &self.specs[l];
            // dz = d elementwise-masked by the activation derivative
            let mut dz = d;
            if spec.activation == Activation::Relu {
                for i in 0..batch {
                    let pre_row = cache.pre[l].row(i);
                    let dz_row = dz.row_mut(i);
                    for (v, &z) in dz_row.iter_mut().zip(pre_row) {
                        if z <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            let x = if l == 0 {
                &cache.inputs
            } else {
                &cache.post[l - 1]
            };
            let g = &self.groups[l];
            let out = &mut grads.groups[l];
            // dW[o][j] = sum_i dz[i][o] * x[i][j]
            for o in 0..spec.out_dim {
                for j in 0..spec.in_dim {
                    let mut acc = 0.0;
                    for i in 0..batch {
                        acc += dz.get(i, o) * x.get(i, j);
                    }
                    out[o * spec.in_dim + j] = acc;
                }
            }
            if spec.has_bias {
                let base = spec.out_dim * spec.in_dim;
                for o in 0..spec.out_dim {
                    let mut acc = 0.0;
                    for i in 0..batch {
                        acc += dz.get(i, o);
                    }
                    out[base + o] = acc;
                }
            }
            if l > 0 {
                // propagate: d_prev[i][j] = sum_o dz[i][o] * W[o][j]
                let mut d_prev = Matrix::zeros(batch, spec.in_dim);
                for i in 0..batch {
                    for o in 0..spec.out_dim {
                        let dv = dz.get(i, o);
                        if dv == 0.0 {
                            continue;
                        }
                        for j in 0..spec.in_dim {
                            let cur = d_prev.get(i, j);
                            d_prev.set(i, j, cur + dv * g.weight(o, j));
                        }
                    }
                }
                d = d_prev;
            } else {
                d = dz; // keep the borrow checker happy; unused afterwards
            }
        }
        Ok(grads)
    }
}

/// Forward + loss + backward for a labelled batch; returns the mean loss
/// value and its gradient per group.
pub fn loss_gradient(
    net: &Network,
    inputs: &Matrix,
    labels: &[usize],
    kind: LossKind,
    nc: usize,
) -> Result<(f64, GradSet)> {
    let (logits, cache) = net.forward(inputs)?;
    let loss = batch_loss(kind, &logits, labels, nc)?;
    let grads = net.backward(&cache, &loss.dlogits)?;
    Ok((loss.value, grads))
}

/// Hard cap on `per_example_gradients`: dense per-example storage only makes
/// sense on tiny nets.
pub const PER_EXAMPLE_PARAM_CAP: usize = 2000;

/// Full flat parameter gradient of each example's own loss. The mean over
/// examples equals the full-batch gradient of the mean loss.
pub fn per_example_gradients(
    net: &Network,
    inputs: &Matrix,
    labels: &[usize],
    kind: LossKind,
    nc: usize,
) -> Result<Vec<Vec<f64>>> {
    if net.total_params() > PER_EXAMPLE_PARAM_CAP {
        return Err(LawnError::Capability(format!(
            "per-example gradients capped at {} params, net has {}",
            PER_EXAMPLE_PARAM_CAP,
            net.total_params()
        )));
    }
    if inputs.rows() != labels.len() {
        return Err(LawnError::Shape(format!(
            "{} rows vs {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(inputs.rows());
    for i in 0..inputs.rows() {
        let row = Matrix::from_rows(&[inputs.row(i).to_vec()])?;
        let (_, grads) = loss_gradient(net, &row, &labels[i..i + 1], kind, nc)?;
        out.push(grads.to_flat());
    }
    Ok(out)
}
