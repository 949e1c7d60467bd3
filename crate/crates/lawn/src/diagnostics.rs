//! Everything measured about training: margins and normalized margins,
//! loss-flattening detection, the logit-attenuation trigger, exact Hessians
//! and gradient-noise covariance on tiny nets, the minibatch escape
//! indicator, and numerical checks of the two margin-maximization routes.

use crate::data::Dataset;
use crate::error::{LawnError, Result};
use crate::linalg::{dot, Matrix};
use crate::losses::{smooth_margin, smooth_margin_derivative, target_margin, LossKind};
use crate::network::{loss_gradient, per_example_gradients, Network};
use crate::optim::{normalize_weights, project};

/// Dense Hessian / covariance work is capped at this many parameters.
pub const DENSE_PARAM_CAP: usize = 200;
/// Per-example covariance work is capped at this many examples.
pub const COVARIANCE_EXAMPLE_CAP: usize = 1000;

pub const DEFAULT_FLAT_THRESHOLD: f64 = 3.0;
pub const DEFAULT_FLAT_FLAG_FRACTION: f64 = 0.9;

/// Median with the even-count mean-of-middles rule.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Clone, Debug)]
pub struct MarginReport {
    pub min_margin: f64,
    pub p50_margin: f64,
    /// min margin divided by the product of group norms.
    pub normalized_margin: f64,
    pub per_group_norms: Vec<f64>,
    /// Product over groups with norm >= 1e-12 (degenerate groups are not
    /// norm-constrained and do not enter the product).
    pub product_of_norms: f64,
    pub margins: Vec<f64>,
}

pub fn margin_report(net: &Network, dataset: &Dataset) -> Result<MarginReport> {
    if dataset.is_empty() {
        return Err(LawnError::Usage(
            "margin report needs a nonempty dataset".into(),
        ));
    }
    let (logits, _) = net.forward(&dataset.features)?;
    let margins: Vec<f64> = (0..logits.rows())
        .map(|i| target_margin(logits.row(i), dataset.labels[i]))
        .collect();
    let min_margin = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    let p50_margin = median(&margins);
    let per_group_norms: Vec<f64> = net.groups().iter().map(|g| g.norm()).collect();
    let product_of_norms: f64 = per_group_norms.iter().filter(|&&n| n >= 1e-12).product();
    let normalized_margin = if product_of_norms > 0.0 {
        min_margin / product_of_norms
    } else {
        f64::NAN
    };
    Ok(MarginReport {
        min_margin,
        p50_margin,
        normalized_margin,
        per_group_norms,
        product_of_norms,
        margins,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct FlatteningReport {
    /// Fraction of examples whose margin exceeds the threshold.
    pub fraction: f64,
    pub flagged: bool,
}

/// Fraction of margins strictly above `threshold`; flagged once the
/// fraction reaches `flag_fraction`.
pub fn flattening_detector(
    margins: &[f64],
    threshold: f64,
    flag_fraction: f64,
) -> FlatteningReport {
    if margins.is_empty() {
        return FlatteningReport {
            fraction: 0.0,
            flagged: false,
        };
    }
    let over = margins.iter().filter(|&&m| m > threshold).count();
    let fraction = over as f64 / margins.len() as f64;
    FlatteningReport {
        fraction,
        flagged: fraction >= flag_fraction,
    }
}

/// EMA tracker that fires the logit attenuation once the smoothed batch
/// median margin exceeds the flattening threshold. Fires at most once;
/// after firing the network keeps the attenuated scale permanently.
#[derive(Clone, Debug)]
pub struct AttenuationTracker {
    pub ema_logit: f64,
    pub decay: f64,
    pub threshold: f64,
    pub alpha: f64,
    pub fired: bool,
}

impl Default for AttenuationTracker {
    fn default() -> Self {
        Self {
            ema_logit: 0.0,
            decay: 0.99,
            threshold: 3.0,
            alpha: 0.2,
            fired: false,
        }
    }
}

impl AttenuationTracker {
    pub fn new(decay: f64, threshold: f64, alpha: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(LawnError::Config(format!(
                "attenuation decay must lie in (0, 1), got {decay}"
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(LawnError::Config(format!(
                "attenuation alpha must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            ema_logit: 0.0,
            decay,
            threshold,
            alpha,
            fired: false,
        })
    }
}

/// Feeds one batch's median logit into the tracker. Returns true on the
/// single call where the attenuation fires and rescales the network output.
pub fn attenuation_step(
    tracker: &mut AttenuationTracker,
    net: &mut Network,
    batch_median_logit: f64,
) -> Result<bool> {
    tracker.ema_logit =
        tracker.decay * tracker.ema_logit + (1.0 - tracker.decay) * batch_median_logit;
    if !tracker.fired && tracker.ema_logit > tracker.threshold {
        net.set_logit_scale(tracker.alpha)?;
        tracker.fired = true;
        return Ok(true);
    }
    Ok(false)
}

/// Hessian of a scalar function given its gradient, by central finite
/// differences of the gradient, symmetrized as (H + H^T)/2. Fails if the
/// raw asymmetry exceeds 1e-5, which signals a broken gradient.
pub fn hessian_from_grad_fn<F>(mut grad_fn: F, w0: &[f64], step: f64) -> Result<Matrix>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = w0.len();
    if n > DENSE_PARAM_CAP {
        return Err(LawnError::Capability(format!(
            "dense Hessian capped at {DENSE_PARAM_CAP} params, got {n}"
        )));
    }
    let mut h = Matrix::zeros(n, n);
    let mut plus = w0.to_vec();
    let mut minus = w0.to_vec();
    for j in 0..n {
        plus[j] = w0[j] + step;
        minus[j] = w0[j] - step;
        let gp = grad_fn(&plus)?;
        let gm = grad_fn(&minus)?;
        if gp.len() != n || gm.len() != n {
            return Err(LawnError::Shape("gradient length mismatch".into()));
        }
        for i in 0..n {
            h.set(i, j, (gp[i] - gm[i]) / (2.0 * step));
        }
        plus[j] = w0[j];
        minus[j] = w0[j];
    }
    let asym = h.asymmetry();
    if asym > 1e-5 {
        return Err(LawnError::Numeric(format!(
            "Hessian asymmetry {asym} exceeds 1e-5 before symmetrization"
        )));
    }
    Ok(h.symmetrized())
}

/// Exact (finite-difference) Hessian of the mean training loss, optionally
/// including a coupled l2 term `l2_lambda/2 * ||w||^2`.
pub fn exact_hessian(
    net: &Network,
    dataset: &Dataset,
    kind: LossKind,
    l2_lambda: f64,
) -> Result<Matrix> {
    let n = net.total_params();
    if n > DENSE_PARAM_CAP {
        return Err(LawnError::Capability(format!(
            "exact Hessian capped at {DENSE_PARAM_CAP} params, net has {n}"
        )));
    }
    let w0 = net.flatten_params();
    let max_w = w0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let step = 1e-4 * (1.0 + max_w);
    let template = net.clone();
    let nc = dataset.nc;
    let grad_fn = move |w: &[f64]| -> Result<Vec<f64>> {
        let mut probe = template.clone();
        probe.assign_flat_params(w)?;
        let (_, grads) = loss_gradient(&probe, &dataset.features, &dataset.labels, kind, nc)?;
        let mut flat = grads.to_flat();
        if l2_lambda != 0.0 {
            for (gi, wi) in flat.iter_mut().zip(w) {
                *gi += l2_lambda * wi;
            }
        }
        Ok(flat)
    };
    hessian_from_grad_fn(grad_fn, &w0, step)
}

/// Covariance of per-example full-parameter gradients:
/// `(1/m) sum_i (g_i - mean)(g_i - mean)^T`.
pub fn grad_covariance(net: &Network, dataset: &Dataset, kind: LossKind) -> Result<Matrix> {
    let n = net.total_params();
    if n > DENSE_PARAM_CAP {
        return Err(LawnError::Capability(format!(
            "gradient covariance capped at {DENSE_PARAM_CAP} params, net has {n}"
        )));
    }
    let m = dataset.len();
    if m > COVARIANCE_EXAMPLE_CAP {
        return Err(LawnError::Capability(format!(
            "gradient covariance capped at {COVARIANCE_EXAMPLE_CAP} examples, got {m}"
        )));
    }
    let per = per_example_gradients(net, &dataset.features, &dataset.labels, kind, dataset.nc)?;
    let mut mean = vec![0.0; n];
    for g in &per {
        for (acc, gi) in mean.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    for acc in &mut mean {
        *acc /= m as f64;
    }
    let mut sigma = Matrix::zeros(n, n);
    for g in &per {
        let centered: Vec<f64> = g.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..n {
            if centered[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                let cur = sigma.get(i, j);
                sigma.set(i, j, cur + centered[i] * centered[j]);
            }
        }
    }
    sigma.scale(1.0 / m as f64);
    Ok(sigma.symmetrized())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, swept until
/// every off-diagonal entry is at most 1e-12 in magnitude (relative to the
/// largest diagonal element). Diagonal inputs pass through exactly.
pub fn jacobi_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    let n = a.rows();
    if n != a.cols() {
        return Err(LawnError::Usage("eigensolve needs a square matrix".into()));
    }
    if n > DENSE_PARAM_CAP {
        return Err(LawnError::Capability(format!(
            "Jacobi eigensolve capped at {DENSE_PARAM_CAP}, got {n}"
        )));
    }
    let mut m = a.clone();
    let scale = m.max_abs().max(1.0);
    let tol = 1e-12 * scale;
    for _sweep in 0..100 {
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max(m.get(i, j).abs());
            }
        }
        if worst <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(p, k, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                    m.set(q, k, s * akp + c * akq);
                }
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
            }
        }
    }
    Ok((0..n).map(|i| m.get(i, i)).collect())
}

/// Inputs to the minibatch escape condition, evaluated at a minimum.
#[derive(Clone, Debug)]
pub struct EscapeInputs {
    /// Training-loss Hessian.
    pub hessian: Matrix,
    /// Covariance of per-example gradients.
    pub sigma: Matrix,
    pub eta: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
}

/// Largest eigenvalue of `(I - eta H)^2 + eta^2 (m - B) / (B (m - 1)) Sigma`.
/// Values above 1 predict escape from the minimum under minibatch descent;
/// at B = m the noise coefficient is exactly zero.
pub fn escape_indicator(inputs: &EscapeInputs) -> Result<f64> {
    let n = inputs.hessian.rows();
    if inputs.hessian.cols() != n || inputs.sigma.rows() != n || inputs.sigma.cols() != n {
        return Err(LawnError::Usage(
            "escape indicator needs square H and Sigma of matching size".into(),
        ));
    }
    if inputs.hessian.asymmetry() > 1e-8 || inputs.sigma.asymmetry() > 1e-8 {
        return Err(LawnError::Usage(
            "escape indicator needs symmetric H and Sigma (within 1e-8)".into(),
        ));
    }
    let b = inputs.batch_size;
    let m = inputs.dataset_size;
    if m < 2 || b < 1 || b > m {
        return Err(LawnError::Usage(format!(
            "need 1 <= B <= m and m >= 2, got B = {b}, m = {m}"
        )));
    }
    if !(inputs.eta > 0.0) {
        return Err(LawnError::Usage("eta must be > 0".into()));
    }
    let eta = inputs.eta;
    // A = I - eta H
    let mut a = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, a.get(i, j) - eta * inputs.hessian.get(i, j));
        }
    }
    let mut matrix = a.matmul(&a);
    let coeff = eta * eta * (m - b) as f64 / (b as f64 * (m - 1) as f64);
    for i in 0..n {
        for j in 0..n {
            let v = matrix.get(i, j) + coeff * inputs.sigma.get(i, j);
            matrix.set(i, j, v);
        }
    }
    let eigs = jacobi_eigenvalues(&matrix.symmetrized())?;
    Ok(eigs.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Knobs for the two margin-ascent runs of `lemma1_check`.
#[derive(Clone, Copy, Debug)]
pub struct Lemma1Options {
    pub steps: usize,
    /// Step size of the constrained (projected) ascent.
    pub lr_constrained: f64,
    /// Step size of the free normalized-objective ascent.
    pub lr_normalized: f64,
}

impl Default for Lemma1Options {
    fn default() -> Self {
        Self {
            steps: 100_000,
            lr_constrained: 0.5,
            lr_normalized: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lemma1Result {
    /// Unit per-group directions found by norm-constrained ascent.
    pub constrained_directions: Vec<Vec<f64>>,
    /// Unit per-group directions found by normalized-margin ascent.
    pub normalized_directions: Vec<Vec<f64>>,
    pub per_group_cosine: Vec<f64>,
    /// Final group norms of the constrained run (must sit on the constraint).
    pub constrained_final_norms: Vec<f64>,
}

fn unit_directions(net: &Network) -> Vec<Vec<f64>> {
    net.groups()
        .iter()
        .map(|g| {
            let n = g.norm();
            g.weights.iter().map(|w| w / n).collect()
        })
        .collect()
}

/// Runs the two equivalent margin-maximization formulations from the same
/// start and reports how well their final per-group directions agree.
///
/// Run A ascends the smooth margin surrogate h(mean loss) under fixed group
/// norms `c` via projected gradients plus renormalization. Run B ascends
/// h(mean loss) divided by the product of group norms, unconstrained, and
/// normalizes the result. Only fully homogeneous nets qualify.
pub fn lemma1_check(
    net: &Network,
    dataset: &Dataset,
    c: &[f64],
    opts: Lemma1Options,
) -> Result<Lemma1Result> {
    if !net.fully_homogeneous() {
        return Err(LawnError::Usage(
            "margin equivalence check needs a fully homogeneous network".into(),
        ));
    }
    if c.len() != net.n_groups() || c.iter().any(|&ci| !(ci > 0.0)) {
        return Err(LawnError::Usage(
            "need one positive norm target per group".into(),
        ));
    }
    let kind = LossKind::CrossEntropy;
    let nc = dataset.nc;

    // Run A: projected ascent on h(L) at fixed norms.
    let mut a = net.clone();
    for (gid, &cl) in c.iter().enumerate() {
        let g = &mut a.groups_mut()[gid];
        g.weights = normalize_weights(&g.weights, cl, Some(1), 1)?;
        g.captured_norm = Some(cl);
        g.constrained = true;
    }
    for _ in 0..opts.steps {
        let (l, grads) = loss_gradient(&a, &dataset.features, &dataset.labels, kind, nc)?;
        let scale = smooth_margin_derivative(l);
        for gid in 0..a.n_groups() {
            let w = a.groups()[gid].weights.clone();
            let ascent: Vec<f64> = grads.groups[gid].iter().map(|g| scale * g).collect();
            let h = project(&ascent, &w, c[gid], Some(1), 1);
            let g = &mut a.groups_mut()[gid];
            for (wi, hi) in g.weights.iter_mut().zip(&h) {
                *wi += opts.lr_constrained * hi;
            }
            g.weights = normalize_weights(&g.weights, c[gid], Some(1), 1)?;
        }
    }

    // Run B: plain ascent on h(L) / prod ||w^l||.
    let mut b = net.clone();
    for _ in 0..opts.steps {
        let (l, grads) = loss_gradient(&b, &dataset.features, &dataset.labels, kind, nc)?;
        let hv = smooth_margin(l)?;
        let hp = smooth_margin_derivative(l);
        let norms: Vec<f64> = b.groups().iter().map(|g| g.norm()).collect();
        let product: f64 = norms.iter().product();
        for gid in 0..b.n_groups() {
            let w = b.groups()[gid].weights.clone();
            let nj = norms[gid];
            let g = &mut b.groups_mut()[gid];
            for (i, wi) in g.weights.iter_mut().enumerate() {
                let grad_j = (hp * grads.groups[gid][i] - hv * w[i] / (nj * nj)) / product;
                *wi += opts.lr_normalized * grad_j;
            }
        }
    }

    let constrained_directions = unit_directions(&a);
    let normalized_directions = unit_directions(&b);
    let per_group_cosine = constrained_directions
        .iter()
        .zip(&normalized_directions)
        .map(|(u, v)| dot(u, v))
        .collect();
    let constrained_final_norms = a.groups().iter().map(|g| g.norm()).collect();
    Ok(Lemma1Result {
        constrained_directions,
        normalized_directions,
        per_group_cosine,
        constrained_final_norms,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct L2TrajectoryPoint {
    pub rho: f64,
    pub direction: [f64; 2],
    pub weight_norm: f64,
    /// Angle in radians between the optimum and the max-margin ray (2,1).
    pub angle_to_max_margin: f64,
}

/// Minimizes the two-point toy loss plus `rho/2 ||w||^2` for each rho by a
/// damped 2-d Newton solve and reports the optimum's angle to the
/// max-margin direction (2, 1)/sqrt(5).
pub fn l2_trajectory_check(rho_grid: &[f64]) -> Result<Vec<L2TrajectoryPoint>> {
    const X: [f64; 2] = [2.0, 1.0];
    let grad = |w: &[f64; 2], rho: f64| -> [f64; 2] {
        let z = w[0] * X[0] + w[1] * X[1];
        let s = 1.0 / (1.0 + z.exp()); // sigma(-z)
        [-s * X[0] + rho * w[0], -s * X[1] + rho * w[1]]
    };
    let mut out = Vec::with_capacity(rho_grid.len());
    for &rho in rho_grid {
        if !(rho > 0.0) {
            return Err(LawnError::Usage("rho grid must be positive".into()));
        }
        let mut w = [0.0f64, 0.0f64];
        for _ in 0..500 {
            let g = grad(&w, rho);
            let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
            if gn <= 1e-13 {
                break;
            }
            let z = w[0] * X[0] + w[1] * X[1];
            let s = 1.0 / (1.0 + z.exp());
            let d = s * (1.0 - s); // sigma'(z)
            let h00 = d * X[0] * X[0] + rho;
            let h01 = d * X[0] * X[1];
            let h11 = d * X[1] * X[1] + rho;
            let det = h00 * h11 - h01 * h01;
            let mut step = [
                (g[0] * h11 - g[1] * h01) / det,
                (h00 * g[1] - h01 * g[0]) / det,
            ];
            // backtrack if the full Newton step does not reduce the gradient
            let mut damping = 1.0;
            for _ in 0..40 {
                let trial = [w[0] - damping * step[0], w[1] - damping * step[1]];
                let gt = grad(&trial, rho);
                if (gt[0] * gt[0] + gt[1] * gt[1]).sqrt() < gn {
                    step = [damping * step[0], damping * step[1]];
                    break;
                }
                damping *= 0.5;
            }
            w = [w[0] - step[0], w[1] - step[1]];
        }
        let wn = (w[0] * w[0] + w[1] * w[1]).sqrt();
        // atan2 of the cross/dot pair stays accurate for tiny angles where
        // acos of a near-1 cosine would lose half the mantissa
        let angle = if wn == 0.0 {
            std::f64::consts::FRAC_PI_2
        } else {
            let cross = (w[0] * X[1] - w[1] * X[0]).abs();
            let dotv = w[0] * X[0] + w[1] * X[1];
            cross.atan2(dotv)
        };
        out.push(L2TrajectoryPoint {
            rho,
            direction: [w[0] / wn, w[1] / wn],
            weight_norm: wn,
            angle_to_max_margin: angle,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_dataset;
    use crate::network::{build_network, Activation, LayerSpec};

    fn toy_scorer(weights: Vec<f64>) -> Network {
        let spec = LayerSpec::new(2, 1, Activation::Identity, false);
        let mut net = build_network(&[spec], 0).unwrap();
        net.groups_mut()[0].weights = weights;
        net
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn margin_report_on_toy_max_margin_weights() {
        let net = toy_scorer(vec![2.0, 1.0]);
        let r = margin_report(&net, &toy_dataset()).unwrap();
        assert!((r.min_margin - 5.0).abs() < 1e-15);
        assert!((r.product_of_norms - 5.0f64.sqrt()).abs() < 1e-15);
        assert!((r.normalized_margin - 5.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn margin_report_boundary_weights() {
        let net = toy_scorer(vec![1.0, -2.0]);
        let r = margin_report(&net, &toy_dataset()).unwrap();
        assert_eq!(r.min_margin, 0.0);
    }

    #[test]
    fn doubling_weights_doubles_margin_not_normalized_margin() {
        let net = toy_scorer(vec![2.0, 1.0]);
        let doubled = toy_scorer(vec![4.0, 2.0]);
        let a = margin_report(&net, &toy_dataset()).unwrap();
        let b = margin_report(&doubled, &toy_dataset()).unwrap();
        assert!((b.min_margin - 2.0 * a.min_margin).abs() < 1e-12);
        assert!((b.normalized_margin - a.normalized_margin).abs() < 1e-12);
    }

    #[test]
    fn per_group_rescaling_is_invisible_to_normalized_margin() {
        let specs = [
            LayerSpec::new(2, 4, Activation::Relu, false),
            LayerSpec::new(4, 2, Activation::Identity, false),
        ];
        let net = build_network(&specs, 19).unwrap();
        let ds = toy_dataset();
        let before = margin_report(&net, &ds).unwrap();
        let mut scaled = net.clone();
        for (gid, factor) in [(0usize, 3.7), (1usize, 0.21)] {
            for w in &mut scaled.groups_mut()[gid].weights {
                *w *= factor;
            }
        }
        let after = margin_report(&scaled, &ds).unwrap();
        // sign pattern identical
        for (a, b) in before.margins.iter().zip(&after.margins) {
            assert_eq!(a > &0.0, b > &0.0);
        }
        let rel = (after.normalized_margin - before.normalized_margin).abs()
            / before.normalized_margin.abs().max(1e-300);
        assert!(rel <= 1e-10, "normalized margin moved by {rel}");
    }

    #[test]
    fn flattening_fractions() {
        let all5 = vec![5.0; 8];
        let r = flattening_detector(&all5, 3.0, 0.9);
        assert_eq!(r.fraction, 1.0);
        assert!(r.flagged);
        let zeros = vec![0.0; 8];
        assert_eq!(flattening_detector(&zeros, 3.0, 0.9).fraction, 0.0);
        let mixed = [2.6, 3.4];
        assert_eq!(flattening_detector(&mixed, 2.5, 0.9).fraction, 1.0);
        assert_eq!(flattening_detector(&mixed, 3.0, 0.9).fraction, 0.5);
    }

    #[test]
    fn attenuation_never_fires_below_threshold() {
        let mut tracker = AttenuationTracker::default();
        let mut net = toy_scorer(vec![2.0, 1.0]);
        for _ in 0..10_000 {
            let fired = attenuation_step(&mut tracker, &mut net, 2.5).unwrap();
            assert!(!fired);
        }
        assert_eq!(net.logit_scale_alpha(), 1.0);
    }

    #[test]
    fn attenuation_fires_once_at_the_ema_crossing() {
        // constant median 5: ema_t = 5 (1 - 0.99^t) crosses 3 at
        // t = ceil(ln((5-3)/5) / ln 0.99) = 92
        let mut tracker = AttenuationTracker::default();
        let mut net = toy_scorer(vec![2.0, 1.0]);
        let mut fired_at = None;
        for t in 1..=200u32 {
            if attenuation_step(&mut tracker, &mut net, 5.0).unwrap() {
                assert!(fired_at.is_none());
                fired_at = Some(t);
            }
        }
        assert_eq!(fired_at, Some(92));
        assert_eq!(net.logit_scale_alpha(), 0.2);
        assert!(tracker.fired);
    }

    #[test]
    fn attenuation_shrinks_margins_by_alpha() {
        let mut net = toy_scorer(vec![2.0, 1.0]);
        let ds = toy_dataset();
        let before = margin_report(&net, &ds).unwrap();
        let mut tracker = AttenuationTracker::default();
        tracker.ema_logit = 10.0; // already past the threshold
        attenuation_step(&mut tracker, &mut net, 10.0).unwrap();
        let after = margin_report(&net, &ds).unwrap();
        assert!((after.p50_margin - 0.2 * before.p50_margin).abs() <= 1e-9);
    }

    #[test]
    fn hessian_hook_recovers_quadratic_matrix() {
        // grad of 0.5 w^T A w is A w, so the FD Hessian must equal A
        let a = Matrix::from_rows(&[
            vec![2.0, 0.5, 0.0],
            vec![0.5, 1.0, -0.3],
            vec![0.0, -0.3, 4.0],
        ])
        .unwrap();
        let grad_fn = |w: &[f64]| -> Result<Vec<f64>> {
            Ok((0..3)
                .map(|i| (0..3).map(|j| a.get(i, j) * w[j]).sum())
                .collect())
        };
        let h = hessian_from_grad_fn(grad_fn, &[0.3, -1.0, 0.7], 1e-3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.get(i, j) - a.get(i, j)).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn hessian_of_scalar_logistic_model_matches_closed_form() {
        // 1-weight scorer on one positive example x: L = ln(1 + exp(-wx)),
        // d2L/dw2 = sigma(z(1-sigma(z)) x^2 with z = wx
        let spec = LayerSpec::new(1, 1, Activation::Identity, false);
        let mut net = build_network(&[spec], 0).unwrap();
        net.groups_mut()[0].weights = vec![0.8];
        let ds = Dataset {
            features: Matrix::from_rows(&[vec![1.7]]).unwrap(),
            labels: vec![1],
            nc: 2,
            name: "scalar".into(),
        };
        let h = exact_hessian(&net, &ds, LossKind::CrossEntropy, 0.0).unwrap();
        let z: f64 = 0.8 * 1.7;
        let sig = 1.0 / (1.0 + (-z).exp());
        let expected = sig * (1.0 - sig) * 1.7 * 1.7;
        assert!(
            (h.get(0, 0) - expected).abs() <= 1e-6,
            "{} vs {expected}",
            h.get(0, 0)
        );
    }

    #[test]
    fn l2_term_shifts_hessian_by_lambda_identity() {
        let specs = [LayerSpec::new(2, 2, Activation::Identity, true)];
        let net = build_network(&specs, 2).unwrap();
        let ds = toy_dataset();
        let h0 = exact_hessian(&net, &ds, LossKind::CrossEntropy, 0.0).unwrap();
        let lambda = 0.37;
        let h1 = exact_hessian(&net, &ds, LossKind::CrossEntropy, lambda).unwrap();
        let n = h0.rows();
        for i in 0..n {
            for j in 0..n {
                let want = h0.get(i, j) + if i == j { lambda } else { 0.0 };
                assert!((h1.get(i, j) - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn hessian_cap_enforced() {
        let specs = [
            LayerSpec::new(20, 20, Activation::Relu, false),
            LayerSpec::new(20, 2, Activation::Identity, false),
        ];
        let net = build_network(&specs, 0).unwrap();
        let ds = Dataset {
            features: Matrix::zeros(1, 20),
            labels: vec![0],
            nc: 2,
            name: "big".into(),
        };
        assert!(matches!(
            exact_hessian(&net, &ds, LossKind::CrossEntropy, 0.0),
            Err(LawnError::Capability(_))
        ));
    }

    #[test]
    fn covariance_of_single_example_is_zero() {
        let net = toy_scorer(vec![0.4, -0.3]);
        let ds = Dataset {
            features: Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            labels: vec![1],
            nc: 2,
            name: "one".into(),
        };
        let sigma = grad_covariance(&net, &ds, LossKind::CrossEntropy).unwrap();
        assert_eq!(sigma.max_abs(), 0.0);
    }

    #[test]
    fn covariance_of_symmetric_toy_pair_is_zero() {
        let net = toy_scorer(vec![0.4, -0.3]);
        let sigma = grad_covariance(&net, &toy_dataset(), LossKind::CrossEntropy).unwrap();
        assert!(sigma.max_abs() <= 1e-15);
    }

    #[test]
    fn covariance_is_positive_semidefinite() {
        let specs = [LayerSpec::new(2, 2, Activation::Identity, true)];
        let net = build_network(&specs, 9).unwrap();
        let ds = crate::data::gaussian_blobs(2, 10, 2, 1.0, 0.0, 5).unwrap();
        let sigma = grad_covariance(&net, &ds, LossKind::CrossEntropy).unwrap();
        let eigs = jacobi_eigenvalues(&sigma).unwrap();
        for e in eigs {
            assert!(e >= -1e-10, "negative eigenvalue {e}");
        }
    }

    #[test]
    fn jacobi_matches_analytic_tridiagonal_eigenvalues() {
        let a = Matrix::from_rows(&[
            vec![2.0, 1.0, 0.0],
            vec![1.0, 2.0, 1.0],
            vec![0.0, 1.0, 2.0],
        ])
        .unwrap();
        let mut eigs = jacobi_eigenvalues(&a).unwrap();
        eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let root2 = 2.0f64.sqrt();
        let expected = [2.0 - root2, 2.0, 2.0 + root2];
        for (e, w) in eigs.iter().zip(&expected) {
            assert!((e - w).abs() <= 1e-10, "{e} vs {w}");
        }
    }

    #[test]
    fn escape_scalar_closed_form() {
        let h = 0.7;
        let s = 0.9;
        let eta = 0.4;
        let (b, m) = (3usize, 10usize);
        let inputs = EscapeInputs {
            hessian: Matrix::from_rows(&[vec![h]]).unwrap(),
            sigma: Matrix::from_rows(&[vec![s]]).unwrap(),
            eta,
            batch_size: b,
            dataset_size: m,
        };
        let got = escape_indicator(&inputs).unwrap();
        let want = (1.0 - eta * h) * (1.0 - eta * h)
            + eta * eta * s * (m - b) as f64 / (b as f64 * (m - 1) as f64);
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn escape_diagonal_closed_form() {
        let hs = [0.2, 1.5, -0.4];
        let ss = [0.3, 0.0, 2.0];
        let eta = 0.25;
        let (b, m) = (4usize, 20usize);
        let mut h = Matrix::zeros(3, 3);
        let mut s = Matrix::zeros(3, 3);
        for i in 0..3 {
            h.set(i, i, hs[i]);
            s.set(i, i, ss[i]);
        }
        let inputs = EscapeInputs {
            hessian: h,
            sigma: s,
            eta,
            batch_size: b,
            dataset_size: m,
        };
        let coeff = eta * eta * (m - b) as f64 / (b as f64 * (m - 1) as f64);
        let want = (0..3)
            .map(|i| (1.0 - eta * hs[i]).powi(2) + coeff * ss[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let got = escape_indicator(&inputs).unwrap();
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn escape_full_batch_drops_the_noise_term() {
        let h = Matrix::from_rows(&[vec![0.5, 0.1], vec![0.1, 0.8]]).unwrap();
        let s = Matrix::from_rows(&[vec![100.0, 0.0], vec![0.0, 100.0]]).unwrap();
        let with_noise = EscapeInputs {
            hessian: h.clone(),
            sigma: s,
            eta: 0.3,
            batch_size: 16,
            dataset_size: 16,
        };
        let zero_noise = EscapeInputs {
            hessian: h,
            sigma: Matrix::zeros(2, 2),
            eta: 0.3,
            batch_size: 16,
            dataset_size: 16,
        };
        let a = escape_indicator(&with_noise).unwrap();
        let b = escape_indicator(&zero_noise).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "B = m must zero the noise term");
    }

    #[test]
    fn escape_identity_case_and_monotonicity() {
        let inputs = EscapeInputs {
            hessian: Matrix::zeros(2, 2),
            sigma: Matrix::zeros(2, 2),
            eta: 0.5,
            batch_size: 2,
            dataset_size: 8,
        };
        assert_eq!(escape_indicator(&inputs).unwrap(), 1.0);

        let sigma = Matrix::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.9]]).unwrap();
        let mut doubled = sigma.clone();
        doubled.scale(2.0);
        let base = EscapeInputs {
            hessian: Matrix::from_rows(&[vec![0.3, 0.0], vec![0.0, 0.6]]).unwrap(),
            sigma,
            eta: 0.5,
            batch_size: 2,
            dataset_size: 8,
        };
        let more = EscapeInputs {
            sigma: doubled,
            ..base.clone()
        };
        assert!(escape_indicator(&more).unwrap() >= escape_indicator(&base).unwrap());
    }

    #[test]
    fn escape_without_noise_at_psd_minimum_stays_bounded() {
        let mut h = Matrix::zeros(3, 3);
        for (i, v) in [0.5, 1.0, 2.0].into_iter().enumerate() {
            h.set(i, i, v);
        }
        let inputs = EscapeInputs {
            hessian: h,
            sigma: Matrix::zeros(3, 3),
            eta: 0.9, // eta * lambda_max = 1.8 < 2
            batch_size: 4,
            dataset_size: 16,
        };
        assert!(escape_indicator(&inputs).unwrap() <= 1.0);
    }

    #[test]
    fn escape_rejects_asymmetric_input() {
        let h = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let inputs = EscapeInputs {
            hessian: h,
            sigma: Matrix::zeros(2, 2),
            eta: 0.1,
            batch_size: 1,
            dataset_size: 4,
        };
        assert!(matches!(
            escape_indicator(&inputs),
            Err(LawnError::Usage(_))
        ));
    }

    #[test]
    fn lemma1_agreement_on_the_toy_problem() {
        let spec = LayerSpec::new(2, 1, Activation::Identity, false);
        let mut net = build_network(&[spec], 3).unwrap();
        net.groups_mut()[0].weights = vec![0.9, -0.4];
        let opts = Lemma1Options {
            steps: 20_000,
            ..Lemma1Options::default()
        };
        let r = lemma1_check(&net, &toy_dataset(), &[1.0], opts).unwrap();
        assert!(
            r.per_group_cosine[0] >= 0.9998,
            "cosine {}",
            r.per_group_cosine[0]
        );
        assert!(((r.constrained_final_norms[0] - 1.0) / 1.0).abs() <= 1e-9);
        // both land on (2,1)/sqrt(5)
        let target = [2.0 / 5.0f64.sqrt(), 1.0 / 5.0f64.sqrt()];
        for dirs in [&r.constrained_directions, &r.normalized_directions] {
            let cos = dirs[0][0] * target[0] + dirs[0][1] * target[1];
            assert!(cos >= 0.9998, "direction {:?}", dirs[0]);
        }
    }

    #[test]
    fn lemma1_requires_full_homogeneity() {
        let spec = LayerSpec::new(2, 1, Activation::Identity, false);
        let net = build_network(&[spec], 3).unwrap();
        assert!(lemma1_check(&net, &toy_dataset(), &[1.0, 1.0], Lemma1Options::default()).is_err());
    }

    #[test]
    fn l2_trajectory_sits_on_the_max_margin_ray() {
        let pts = l2_trajectory_check(&[1e-3, 1e-2, 1e-1]).unwrap();
        for p in &pts {
            assert!(
                p.angle_to_max_margin <= 1e-4,
                "rho {} angle {}",
                p.rho,
                p.angle_to_max_margin
            );
        }
        // direction is stable across the grid
        for w in pts.windows(2) {
            let cos = w[0].direction[0] * w[1].direction[0] + w[0].direction[1] * w[1].direction[1];
            assert!(cos.clamp(-1.0, 1.0).acos() <= 1e-4);
        }
        // angles do not grow as rho shrinks (grid is ascending in rho)
        for w in pts.windows(2) {
            assert!(w[0].angle_to_max_margin <= w[1].angle_to_max_margin + 1e-9);
        }
    }

    #[test]
    fn l2_huge_rho_shrinks_the_optimum_to_zero() {
        let pts = l2_trajectory_check(&[1e6]).unwrap();
        assert!(pts[0].weight_norm <= 1e-5, "norm {}", pts[0].weight_norm);
    }
}
