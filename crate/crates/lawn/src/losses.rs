//! Classification losses and the baseline loss modifications: cross entropy,
//! label smoothing, flooding, the coupled l2 penalty, and the smooth margin
//! map used by the margin diagnostics.
//!
//! Losses are means over the batch, so learning-rate scale is independent of
//! batch size. Binary problems may be fed as a single-column score matrix:
//! a row holding score `s` is treated as the two-class logit pair `(0, s)`,
//! which makes two-class cross entropy coincide with the logistic loss
//! `ln(1 + exp(-s))` for the positive class.

use crate::error::{LawnError, Result};
use crate::linalg::Matrix;

/// Which per-example loss to differentiate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    LabelSmoothing { epsilon: f64 },
}

/// Mean loss value plus its gradient w.r.t. the logits.
#[derive(Clone, Debug)]
pub struct LossResult {
    pub value: f64,
    /// Gradient of the mean loss; same shape as the logits that produced it.
    pub dlogits: Matrix,
}

/// Which penalty term, if any, augments the base loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyKind {
    None,
    /// Coupled: lambda * w is added to the loss gradient.
    L2,
    /// Decoupled: the optimizer adds lambda * w at the update step.
    DecoupledWeightDecay,
}

#[derive(Clone, Debug)]
pub struct RegularizerConfig {
    pub kind: PenaltyKind,
    pub lambda: f64,
    /// Label-smoothing mass; 0 disables smoothing.
    pub lsr_epsilon: f64,
    /// Flooding level; `None` disables the transform.
    pub flooding_epsilon: Option<f64>,
}

impl RegularizerConfig {
    pub fn none() -> Self {
        Self {
            kind: PenaltyKind::None,
            lambda: 0.0,
            lsr_epsilon: 0.0,
            flooding_epsilon: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(LawnError::Config(format!(
                "penalty lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.lsr_epsilon) {
            return Err(LawnError::Config(format!(
                "lsr epsilon must lie in [0, 1), got {}",
                self.lsr_epsilon
            )));
        }
        if let Some(eps) = self.flooding_epsilon {
            if !eps.is_finite() || eps < 0.0 {
                return Err(LawnError::Config(format!(
                    "flooding epsilon must be finite and >= 0, got {eps}"
                )));
            }
        }
        Ok(())
    }

    /// The decoupled-decay coefficient the optimizer should apply.
    pub fn decoupled_lambda(&self) -> f64 {
        match self.kind {
            PenaltyKind::DecoupledWeightDecay => self.lambda,
            _ => 0.0,
        }
    }
}

/// Log-probabilities for one logits row under the implicit-zero binary
/// convention: a 1-wide row with score s expands to logits (0, s).
fn log_softmax_row(row: &[f64], out: &mut Vec<f64>) {
    out.clear();
    if row.len() == 1 {
        let s = row[0];
        let m = s.max(0.0);
        let lse = m + ((0.0 - m).exp() + (s - m).exp()).ln();
        out.push(-lse);
        out.push(s - lse);
    } else {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
}

fn check_logits(logits: &Matrix, labels: &[usize]) -> Result<usize> {
    if !logits.is_finite() {
        return Err(LawnError::Numeric("non-finite logits".into()));
    }
    if logits.rows() != labels.len() {
        return Err(LawnError::Shape(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(LawnError::Shape("empty batch".into()));
    }
    let nc = if logits.cols() == 1 { 2 } else { logits.cols() };
    if nc < 2 {
        return Err(LawnError::Shape("need at least 2 classes".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= nc) {
        return Err(LawnError::Shape(format!(
            "label {y} out of range [0, {nc})"
        )));
    }
    Ok(nc)
}

/// Cross entropy of softmaxed logits against integer labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossResult> {
    let nc = check_logits(logits, labels)?;
    let batch = logits.rows() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut value = 0.0;
    let mut logp = Vec::with_capacity(nc);
    for i in 0..logits.rows() {
        log_softmax_row(logits.row(i), &mut logp);
        let y = labels[i];
        value += -logp[y];
        if logits.cols() == 1 {
            let p1 = logp[1].exp();
            dlogits.set(i, 0, (p1 - if y == 1 { 1.0 } else { 0.0 }) / batch);
        } else {
            for k in 0..nc {
                let p = logp[k].exp();
                dlogits.set(i, k, (p - if k == y { 1.0 } else { 0.0 }) / batch);
            }
        }
    }
    Ok(LossResult {
        value: value / batch,
        dlogits,
    })
}

/// Cross entropy against label-smoothed targets: the target class keeps mass
/// `1 - epsilon` and the remaining classes share `epsilon` evenly.
pub fn lsr_loss(logits: &Matrix, labels: &[usize], epsilon: f64, nc: usize) -> Result<LossResult> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(LawnError::Config(format!(
            "lsr epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    let inferred = check_logits(logits, labels)?;
    if inferred != nc {
        return Err(LawnError::Shape(format!(
            "logits imply {inferred} classes but nc = {nc}"
        )));
    }
    let off = epsilon / (nc as f64 - 1.0);
    let batch = logits.rows() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut value = 0.0;
    let mut logp = Vec::with_capacity(nc);
    for i in 0..logits.rows() {
        log_softmax_row(logits.row(i), &mut logp);
        let y = labels[i];
        let mut row_loss = 0.0;
        for k in 0..nc {
            let q = if k == y { 1.0 - epsilon } else { off };
            row_loss += -q * logp[k];
        }
        value += row_loss;
        if logits.cols() == 1 {
            let p1 = logp[1].exp();
            let q1 = if y == 1 { 1.0 - epsilon } else { off };
            dlogits.set(i, 0, (p1 - q1) / batch);
        } else {
            for k in 0..nc {
                let p = logp[k].exp();
                let q = if k == y { 1.0 - epsilon } else { off };
                dlogits.set(i, k, (p - q) / batch);
            }
        }
    }
    Ok(LossResult {
        value: value / batch,
        dlogits,
    })
}

/// Evaluates the configured per-example loss (cross entropy or LSR).
pub fn batch_loss(
    kind: LossKind,
    logits: &Matrix,
    labels: &[usize],
    nc: usize,
) -> Result<LossResult> {
    match kind {
        LossKind::CrossEntropy => cross_entropy(logits, labels),
        LossKind::LabelSmoothing { epsilon } => lsr_loss(logits, labels, epsilon, nc),
    }
}

/// Flooding transform `|L - eps|`. Returns the flooded value and the sign
/// that multiplies every parameter gradient. The tie `L == eps` maps to +1
/// so the transform is deterministic everywhere.
pub fn flood_transform(loss_value: f64, flooding_epsilon: f64) -> (f64, f64) {
    let d = loss_value - flooding_epsilon;
    let sign = if d >= 0.0 { 1.0 } else { -1.0 };
    (d.abs(), sign)
}

/// Coupled l2 penalty `(lambda/2) * sum ||w||^2` and its per-group gradient
/// contribution `lambda * w`.
pub fn l2_penalty(groups: &[&[f64]], lambda: f64) -> (f64, Vec<Vec<f64>>) {
    assert!(lambda >= 0.0, "l2 lambda must be >= 0");
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(groups.len());
    for g in groups {
        value += g.iter().map(|w| w * w).sum::<f64>();
        grads.push(g.iter().map(|w| lambda * w).collect());
    }
    (0.5 * lambda * value, grads)
}

/// Smooth margin surrogate `-ln(exp(L) - 1)`, the inverse of the binary
/// logistic loss: feeding it `ln(1 + exp(-z))` recovers z. Uses exp_m1 so
/// the tiny losses of well-separated batches (margins up to ~30) survive.
pub fn smooth_margin(loss: f64) -> Result<f64> {
    if !(loss > 0.0) || !loss.is_finite() {
        return Err(LawnError::Numeric(format!(
            "smooth margin needs a positive finite loss, got {loss}"
        )));
    }
    Ok(-loss.exp_m1().ln())
}

/// Derivative of `smooth_margin` w.r.t. the loss: `-exp(L) / (exp(L) - 1)`.
pub fn smooth_margin_derivative(loss: f64) -> f64 {
    // -1 / (1 - exp(-L)), stable for both tiny and large L.
    -1.0 / (-(-loss).exp_m1())
}

/// Target-class margin of one logits row: target score minus the best
/// non-target score. Single-column rows use the binary convention
/// (score for class 1, negated score for class 0).
pub fn target_margin(logits_row: &[f64], label: usize) -> f64 {
    if logits_row.len() == 1 {
        return if label == 1 {
            logits_row[0]
        } else {
            -logits_row[0]
        };
    }
    let mut best_other = f64::NEG_INFINITY;
    for (k, &v) in logits_row.iter().enumerate() {
        if k != label {
            best_other = best_other.max(v);
        }
    }
    logits_row[label] - best_other
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn binary_symmetric_logits_give_ln2() {
        // batch of two zero scores with opposite labels
        let l = logits(&[vec![0.0], vec![0.0]]);
        let r = cross_entropy(&l, &[1, 0]).unwrap();
        assert!((r.value - 2.0f64.ln()).abs() < 1e-15);
        assert!((r.dlogits.get(0, 0) + 0.25).abs() < 1e-15);
        assert!((r.dlogits.get(1, 0) - 0.25).abs() < 1e-15);
        // single two-column row: same loss, gradients halve only with batch
        let l2 = logits(&[vec![0.0, 0.0]]);
        let r2 = cross_entropy(&l2, &[0]).unwrap();
        assert!((r2.value - 2.0f64.ln()).abs() < 1e-15);
        assert!((r2.dlogits.get(0, 0) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_ten_class_logits_give_ln10() {
        let l = logits(&[vec![0.0; 10]]);
        let r = cross_entropy(&l, &[3]).unwrap();
        assert!((r.value - 10.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn logit_gap_past_flattening_threshold_gives_tiny_loss() {
        // gap 2.5 between target and other class
        let l = logits(&[vec![2.5, 0.0]]);
        let r = cross_entropy(&l, &[0]).unwrap();
        let expected = (1.0 + (-2.5f64).exp()).ln();
        assert!((r.value - expected).abs() < 1e-15);
        assert!(
            r.value < 0.08,
            "loss {} should be in the flat zone",
            r.value
        );
    }

    #[test]
    fn dlogit_rows_sum_to_zero() {
        let l = logits(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, -1.0]]);
        let r = cross_entropy(&l, &[2, 1]).unwrap();
        for i in 0..2 {
            let s: f64 = r.dlogits.row(i).iter().sum();
            assert!(s.abs() <= 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn binary_single_column_matches_two_column() {
        // score s stands for logits (0, s)
        let one = logits(&[vec![1.7]]);
        let two = logits(&[vec![0.0, 1.7]]);
        let r1 = cross_entropy(&one, &[1]).unwrap();
        let r2 = cross_entropy(&two, &[1]).unwrap();
        assert!((r1.value - r2.value).abs() < 1e-15);
        assert!((r1.dlogits.get(0, 0) - r2.dlogits.get(0, 1)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let l = logits(&[vec![f64::NAN, 0.0]]);
        assert!(matches!(
            cross_entropy(&l, &[0]),
            Err(LawnError::Numeric(_))
        ));
    }

    #[test]
    fn lsr_at_zero_epsilon_is_bitwise_cross_entropy() {
        let l = logits(&[vec![1.0, -0.3, 0.2], vec![-2.0, 0.1, 0.9]]);
        let ce = cross_entropy(&l, &[0, 2]).unwrap();
        let ls = lsr_loss(&l, &[0, 2], 0.0, 3).unwrap();
        assert_eq!(ce.value.to_bits(), ls.value.to_bits());
        for i in 0..2 {
            for k in 0..3 {
                assert_eq!(
                    ce.dlogits.get(i, k).to_bits(),
                    ls.dlogits.get(i, k).to_bits()
                );
            }
        }
    }

    #[test]
    fn lsr_gradient_vanishes_when_softmax_equals_target() {
        // softmax(ln q) = q, so build logits as ln(q)
        let eps = 0.1;
        let l = logits(&[vec![0.9f64.ln(), 0.1f64.ln()]]);
        let r = lsr_loss(&l, &[0], eps, 2).unwrap();
        assert!(r.dlogits.get(0, 0).abs() <= 1e-12);
        assert!(r.dlogits.get(0, 1).abs() <= 1e-12);
    }

    #[test]
    fn lsr_smoothed_target_definition() {
        // nc=2, eps=0.1, y=0 -> q = (0.9, 0.1); check via gradient at p = softmax
        let l = logits(&[vec![0.0, 0.0]]);
        let r = lsr_loss(&l, &[0], 0.1, 2).unwrap();
        // p = (0.5, 0.5), so dlogits = (0.5-0.9, 0.5-0.1) = (-0.4, 0.4)
        assert!((r.dlogits.get(0, 0) + 0.4).abs() < 1e-15);
        assert!((r.dlogits.get(0, 1) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn flooding_cases() {
        assert_eq!(flood_transform(0.5, 0.3), (0.2, 1.0));
        let (v, s) = flood_transform(0.1, 0.3);
        assert!((v - 0.2).abs() < 1e-15);
        assert_eq!(s, -1.0);
        assert_eq!(flood_transform(0.3, 0.3), (0.0, 1.0));
    }

    #[test]
    fn l2_penalty_closed_form() {
        let (v, g) = l2_penalty(&[&[3.0, 4.0]], 2.0);
        assert_eq!(v, 25.0);
        assert_eq!(g[0], vec![6.0, 8.0]);
        let (v0, g0) = l2_penalty(&[&[3.0, 4.0]], 0.0);
        assert_eq!(v0, 0.0);
        assert!(g0[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let w = [0.7, -1.3, 2.1];
        let lambda = 0.42;
        let (_, g) = l2_penalty(&[&w], lambda);
        // central differences are exact for quadratics, so a wide step
        // minimizes cancellation noise
        let h = 1e-3;
        for j in 0..w.len() {
            let mut wp = w;
            let mut wm = w;
            wp[j] += h;
            wm[j] -= h;
            let (vp, _) = l2_penalty(&[&wp], lambda);
            let (vm, _) = l2_penalty(&[&wm], lambda);
            let fd = (vp - vm) / (2.0 * h);
            assert!(
                (fd - g[0][j]).abs() / fd.abs().max(1.0) <= 1e-10,
                "fd {} vs grad {}",
                fd,
                g[0][j]
            );
        }
    }

    #[test]
    fn smooth_margin_fixed_points() {
        assert!(smooth_margin(2.0f64.ln()).unwrap().abs() < 1e-15);
        let l = (1.0 + (-5.0f64).exp()).ln();
        assert!((smooth_margin(l).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_margin_monotone_decreasing() {
        let mut prev = f64::INFINITY;
        let mut l = 0.01;
        while l <= 3.0 {
            let h = smooth_margin(l).unwrap();
            assert!(h < prev, "not decreasing at L = {l}");
            prev = h;
            l += 0.01;
        }
    }

    #[test]
    fn smooth_margin_inverts_logistic_loss() {
        // z -> ln(1 + exp(-z)) -> z for z in [-5, 30]
        let mut z: f64 = -5.0;
        while z <= 30.0 {
            let loss = (-z).exp().ln_1p();
            let back = smooth_margin(loss).unwrap();
            let rel = (back - z).abs() / z.abs().max(1.0);
            assert!(rel <= 1e-9, "z {z} came back as {back}");
            z += 0.25;
        }
    }

    #[test]
    fn smooth_margin_rejects_nonpositive() {
        assert!(smooth_margin(0.0).is_err());
        assert!(smooth_margin(-1.0).is_err());
    }

    #[test]
    fn flooding_gradient_matches_finite_differences_of_abs_loss() {
        use crate::network::{build_network, Activation, LayerSpec};
        let specs = [LayerSpec::new(2, 2, Activation::Identity, true)];
        let net = build_network(&specs, 14).unwrap();
        let x = Matrix::from_rows(&[vec![0.8, -0.4], vec![-0.2, 1.1]]).unwrap();
        let labels = [0usize, 1usize];
        let flood_eps = 0.9; // above the loss at this init, so sign is -1

        let flooded_value = |probe: &crate::network::Network| -> f64 {
            let (logits, _) = probe.forward(&x).unwrap();
            let l = cross_entropy(&logits, &labels).unwrap().value;
            flood_transform(l, flood_eps).0
        };

        let (logits, cache) = net.forward(&x).unwrap();
        let r = cross_entropy(&logits, &labels).unwrap();
        let (_, sign) = flood_transform(r.value, flood_eps);
        let mut dlogits = r.dlogits;
        dlogits.scale(sign);
        let bp = net.backward(&cache, &dlogits).unwrap().to_flat();

        let flat = net.flatten_params();
        let h = 1e-6;
        for j in 0..flat.len() {
            let mut plus = flat.clone();
            plus[j] += h;
            let mut minus = flat.clone();
            minus[j] -= h;
            let mut np = net.clone();
            np.assign_flat_params(&plus).unwrap();
            let mut nm = net.clone();
            nm.assign_flat_params(&minus).unwrap();
            let fd = (flooded_value(&np) - flooded_value(&nm)) / (2.0 * h);
            assert!(
                (fd - bp[j]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {j}: fd {fd} vs {}",
                bp[j]
            );
        }
    }

    #[test]
    fn target_margin_cases() {
        assert_eq!(target_margin(&[5.0, 1.0, 2.0], 0), 3.0);
        assert_eq!(target_margin(&[1.0, 1.0], 0), 0.0);
        // binary score convention: score 5 for class 1
        assert_eq!(target_margin(&[5.0], 1), 5.0);
        assert_eq!(target_margin(&[5.0], 0), -5.0);
    }

    #[test]
    fn regularizer_validation() {
        let mut cfg = RegularizerConfig::none();
        assert!(cfg.validate().is_ok());
        cfg.lsr_epsilon = 1.0;
        assert!(cfg.validate().is_err());
        cfg.lsr_epsilon = 0.1;
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }
}
