//! Experiment runner: builds the dataset, network, schedule and optimizer
//! from a `RunConfig`, drives the two-phase training loop, and emits one
//! metrics row per epoch. Identical configs produce byte-identical CSVs.

use crate::data::{
    batches, gather, gaussian_blobs, load_csv, split, toy_dataset, BatchPlan, Dataset,
};
use crate::diagnostics::{
    attenuation_step, flattening_detector, margin_report, median, AttenuationTracker,
};
use crate::error::{LawnError, Result};
use crate::linalg::Matrix;
use crate::losses::{batch_loss, flood_transform, target_margin, LossKind, PenaltyKind};
use crate::network::{build_network, Activation, LayerSpec, Network};
use crate::optim::{self, OptimConfig, OptimState};
use crate::rng::derive_key;
use crate::schedule::{Schedule, ScheduleKind};

use super::config::{ClipSetting, DatasetKind, RunConfig, SwitchMode, SwitchOverride};
use super::metrics::{MetricsRow, Phase};
use super::plateau::PlateauMonitor;

const BATCH_STREAM_SALT: u64 = 0xBA7C4E5;

/// What happened at the attenuation firing instant, measured at identical
/// weights with the old and new logit scale.
#[derive(Clone, Copy, Debug)]
pub struct AttenuationEvent {
    pub step: u64,
    pub p50_before: f64,
    pub p50_after: f64,
    pub acc_before: f64,
    pub acc_after: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_test_metric: f64,
    pub final_normalized_margin: f64,
    /// Switch step that actually applied (after any plateau trigger).
    pub switch_step: Option<u64>,
    pub attenuation: Option<AttenuationEvent>,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    /// Final weights, for checkpointing and follow-up diagnostics.
    pub net: Network,
}

/// Builds the dataset named by the config (before any split).
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.dataset.kind {
        DatasetKind::Toy => Ok(toy_dataset()),
        DatasetKind::Blobs => gaussian_blobs(
            cfg.dataset.nc,
            cfg.dataset.per_class,
            cfg.dataset.dim,
            cfg.dataset.sigma,
            cfg.dataset.label_noise,
            cfg.dataset.seed,
        ),
        DatasetKind::Csv => load_csv(
            cfg.dataset.path.as_ref().expect("validated"),
            &cfg.dataset.label_column,
        ),
    }
}

/// Builds the network named by the config for a given input width and class
/// count. Binary problems default to a single score output.
pub fn build_model(cfg: &RunConfig, input_dim: usize, nc: usize) -> Result<Network> {
    let out_dim = cfg.net.out_dim.unwrap_or(if nc == 2 { 1 } else { nc });
    let mut specs = Vec::with_capacity(cfg.net.hidden.len() + 1);
    let mut in_dim = input_dim;
    for &h in &cfg.net.hidden {
        specs.push(LayerSpec::new(in_dim, h, cfg.net.activation, cfg.net.bias));
        in_dim = h;
    }
    specs.push(LayerSpec::new(
        in_dim,
        out_dim,
        Activation::Identity,
        cfg.net.bias,
    ));
    build_network(&specs, cfg.seed)
}

fn build_optim_config(cfg: &RunConfig) -> Result<OptimConfig> {
    let mut ocfg = OptimConfig::for_family(cfg.family);
    if let Some(b1) = cfg.beta1 {
        ocfg.beta1 = b1;
    }
    if let Some(b2) = cfg.beta2 {
        ocfg.beta2 = b2;
    }
    if let Some(eps) = cfg.epsilon {
        ocfg.epsilon = eps;
    }
    ocfg.momentum = cfg.momentum;
    ocfg.weight_decay_lambda = cfg.reg.decoupled_lambda();
    match cfg.grad_clip {
        ClipSetting::FamilyDefault => {}
        ClipSetting::Disabled => ocfg.grad_clip_norm = None,
        ClipSetting::Value(v) => ocfg.grad_clip_norm = Some(v),
    }
    ocfg.validate()?;
    Ok(ocfg)
}

fn predicted_class(logits_row: &[f64]) -> usize {
    if logits_row.len() == 1 {
        return if logits_row[0] > 0.0 { 1 } else { 0 };
    }
    let mut best = 0;
    for (k, &v) in logits_row.iter().enumerate().skip(1) {
        if v > logits_row[best] {
            best = k;
        }
    }
    best
}

/// Top-1 accuracy with ties resolved toward the lowest class index.
pub fn accuracy(net: &Network, ds: &Dataset) -> Result<f64> {
    let (logits, _) = net.forward(&ds.features)?;
    let correct = (0..logits.rows())
        .filter(|&i| predicted_class(logits.row(i)) == ds.labels[i])
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

fn batch_accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = (0..logits.rows())
        .filter(|&i| predicted_class(logits.row(i)) == labels[i])
        .count();
    correct as f64 / labels.len() as f64
}

/// Full-batch training gradient (base loss plus any coupled l2 term).
fn training_grad_norm(net: &Network, ds: &Dataset, kind: LossKind, cfg: &RunConfig) -> Result<f64> {
    let (logits, cache) = net.forward(&ds.features)?;
    let loss = batch_loss(kind, &logits, &ds.labels, ds.nc)?;
    let mut grads = net.backward(&cache, &loss.dlogits)?;
    if cfg.reg.kind == PenaltyKind::L2 && cfg.reg.lambda > 0.0 {
        for (g, group) in grads.groups.iter_mut().zip(net.groups()) {
            for (gi, wi) in g.iter_mut().zip(&group.weights) {
                *gi += cfg.reg.lambda * wi;
            }
        }
    }
    Ok(grads.global_norm())
}

enum LrPlan {
    Fixed(Schedule),
    /// Plateau mode before the trigger: warm up over `free_steps` then hold.
    PlateauPending {
        eta: f64,
        free_steps: u64,
    },
}

impl LrPlan {
    fn lr_at(&self, t: u64) -> Result<f64> {
        match self {
            LrPlan::Fixed(s) => s.lr_at(t),
            LrPlan::PlateauPending { eta, free_steps } => {
                Ok(eta * ((t as f64 / *free_steps as f64).min(1.0)))
            }
        }
    }
}

/// Runs one experiment end to end. Numeric divergence aborts the loop and
/// is reported in the summary rather than as an error, so the rows gathered
/// so far can still be written.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let full = build_dataset(cfg)?;
    let (train, test): (Dataset, Option<Dataset>) = if cfg.dataset.test_frac > 0.0 {
        let (tr, te) = split(&full, cfg.dataset.test_frac, cfg.dataset.seed)?;
        (tr, Some(te))
    } else {
        (full, None)
    };
    let nc = train.nc;
    let mut net = build_model(cfg, train.dim(), nc)?;
    let mut ocfg = build_optim_config(cfg)?;

    let m = train.len();
    if cfg.batch_size > m {
        return Err(LawnError::Config(format!(
            "batch size {} exceeds training set size {m}",
            cfg.batch_size
        )));
    }
    let spe = m.div_ceil(cfg.batch_size);
    let n_epochs = cfg.e_total.round() as usize;
    let total_steps = (n_epochs * spe) as u64;
    let free_steps = (cfg.e_free * spe as f64).round() as u64;
    let warmup_steps = ((cfg.e_warmup * spe as f64).round() as u64).max(1);

    let plateau_pending = cfg.lawn && matches!(cfg.switch_mode, SwitchMode::Plateau { .. });
    let mut k: Option<u64> = match cfg.switch_override {
        SwitchOverride::Auto => {
            if cfg.lawn && !plateau_pending {
                Some(free_steps + 1)
            } else {
                None
            }
        }
        SwitchOverride::Never => None,
        SwitchOverride::Step(s) => Some(s),
    };

    let schedule_kind = cfg.schedule_kind.unwrap_or(if cfg.lawn {
        ScheduleKind::Lawn3
    } else {
        ScheduleKind::Base2
    });
    let mut plan = if plateau_pending && cfg.switch_override == SwitchOverride::Auto {
        LrPlan::PlateauPending {
            eta: cfg.eta_peak,
            free_steps: free_steps.max(1),
        }
    } else {
        LrPlan::Fixed(match schedule_kind {
            ScheduleKind::Lawn3 => {
                Schedule::lawn3_steps(cfg.eta_peak, free_steps, warmup_steps, total_steps)?
            }
            ScheduleKind::Base2 => Schedule::base2_steps(cfg.eta_peak, warmup_steps, total_steps)?,
        })
    };

    let kind = if cfg.reg.lsr_epsilon > 0.0 {
        LossKind::LabelSmoothing {
            epsilon: cfg.reg.lsr_epsilon,
        }
    } else {
        LossKind::CrossEntropy
    };

    let mut state = OptimState::new(&net);
    let mut tracker = if cfg.attenuation.enabled {
        Some(AttenuationTracker::new(
            cfg.attenuation.decay,
            cfg.attenuation.threshold,
            cfg.attenuation.alpha,
        )?)
    } else {
        None
    };
    let mut monitor = match cfg.switch_mode {
        SwitchMode::Plateau {
            window,
            delta,
            floor,
        } if plateau_pending => Some(PlateauMonitor::new(window, delta, floor)),
        _ => None,
    };

    let batch_seed = derive_key(cfg.seed, BATCH_STREAM_SALT, 0);
    let batch_plan = BatchPlan::new(batch_seed, cfg.batch_size);

    let mut rows: Vec<MetricsRow> = Vec::with_capacity(n_epochs);
    let mut attenuation_event: Option<AttenuationEvent> = None;
    let mut diverged = false;
    let mut t: u64 = 1;

    'training: for epoch in 1..=n_epochs {
        for batch in batches(&train, &batch_plan, (epoch - 1) as u64)? {
            let (bx, by) = gather(&train, &batch);
            let (logits, cache) = net.forward(&bx)?;
            let loss = batch_loss(kind, &logits, &by, nc)?;
            if !loss.value.is_finite() {
                diverged = true;
                break 'training;
            }
            let mut dlogits = loss.dlogits;
            if let Some(eps) = cfg.reg.flooding_epsilon {
                let (_, sign) = flood_transform(loss.value, eps);
                if sign < 0.0 {
                    dlogits.scale(-1.0);
                }
            }
            let mut grads = net.backward(&cache, &dlogits)?;
            if cfg.reg.kind == PenaltyKind::L2 && cfg.reg.lambda > 0.0 {
                for (g, group) in grads.groups.iter_mut().zip(net.groups()) {
                    for (gi, wi) in g.iter_mut().zip(&group.weights) {
                        *gi += cfg.reg.lambda * wi;
                    }
                }
            }

            if let Some(tr) = tracker.as_mut() {
                let margins: Vec<f64> = (0..logits.rows())
                    .map(|i| target_margin(logits.row(i), by[i]))
                    .collect();
                let fired = attenuation_step(tr, &mut net, median(&margins))?;
                if fired {
                    // measure the firing instant at identical weights
                    net.set_logit_scale(1.0)?;
                    let before = margin_report(&net, &train)?;
                    let acc_before = accuracy(&net, &train)?;
                    net.set_logit_scale(cfg.attenuation.alpha)?;
                    let after = margin_report(&net, &train)?;
                    let acc_after = accuracy(&net, &train)?;
                    attenuation_event = Some(AttenuationEvent {
                        step: t,
                        p50_before: before.p50_margin,
                        p50_after: after.p50_margin,
                        acc_before,
                        acc_after,
                    });
                }
            }

            if let Some(mon) = monitor.as_mut() {
                if k.is_none() && mon.push(batch_accuracy(&logits, &by)) && t + 1 < total_steps {
                    let switch_at = t + 1;
                    let w = warmup_steps.min(total_steps - switch_at).max(1);
                    plan = LrPlan::Fixed(Schedule::lawn3_steps(
                        cfg.eta_peak,
                        switch_at - 1,
                        w,
                        total_steps,
                    )?);
                    k = Some(switch_at);
                }
            }

            ocfg.switch_step_k = k;
            let lr = plan.lr_at(t)?;
            match optim::step(&mut net, &grads, &mut state, &ocfg, lr) {
                Ok(()) => {}
                Err(LawnError::Numeric(_)) => {
                    diverged = true;
                    break 'training;
                }
                Err(e) => return Err(e),
            }
            t += 1;
        }

        let step_last = (epoch * spe) as u64;
        let phase = if optim::past_switch(k, step_last) {
            Phase::Constrained
        } else {
            Phase::Free
        };
        let report = margin_report(&net, &train)?;
        let (logits, _) = net.forward(&train.features)?;
        let train_loss = batch_loss(kind, &logits, &train.labels, nc)?.value;
        let train_acc = batch_accuracy(&logits, &train.labels);
        let test_metric = match &test {
            Some(ds) => accuracy(&net, ds)?,
            None => train_acc,
        };
        let flat = flattening_detector(&report.margins, cfg.flat_threshold, cfg.flat_flag_fraction);
        let grad_norm = training_grad_norm(&net, &train, kind, cfg)?;
        rows.push(MetricsRow {
            epoch,
            step: step_last,
            phase,
            lr: plan.lr_at(step_last)?,
            train_loss,
            train_acc,
            test_metric,
            margin_min: report.min_margin,
            margin_p50: report.p50_margin,
            normalized_margin: report.normalized_margin,
            flat_fraction: flat.fraction,
            grad_norm,
            group_norms: report.per_group_norms,
        });
        if !train_loss.is_finite() {
            diverged = true;
            break;
        }
    }

    let last = rows.last();
    let summary = RunSummary {
        epochs_run: rows.len(),
        final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
        final_train_acc: last.map_or(f64::NAN, |r| r.train_acc),
        final_test_metric: last.map_or(f64::NAN, |r| r.test_metric),
        final_normalized_margin: last.map_or(f64::NAN, |r| r.normalized_margin),
        switch_step: k,
        attenuation: attenuation_event,
        diverged,
    };
    Ok(RunOutput { rows, summary, net })
}
