//! Piecewise-linear learning-rate programs.
//!
//! Two shapes: the 3-phase program (free warmup, constrained warmup, final
//! decay) and the 2-phase base program (warmup, decay). Interpolation runs
//! on step indices so trajectories are bit-reproducible; fractional epoch
//! boundaries round to the nearest step.

use crate::error::{LawnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Free warmup to the peak, second warmup from zero, linear decay.
    Lawn3,
    /// Single warmup to the peak, linear decay.
    Base2,
}

#[derive(Clone, Debug)]
pub struct Schedule {
    kind: ScheduleKind,
    eta_peak: f64,
    free_steps: u64,
    warmup_steps: u64,
    total_steps: u64,
}

fn round_steps(epochs: f64, steps_per_epoch: usize) -> u64 {
    (epochs * steps_per_epoch as f64).round() as u64
}

impl Schedule {
    pub fn lawn3(
        eta_peak: f64,
        e_free: f64,
        e_warmup: f64,
        e_total: f64,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        if e_free < 0.0 || e_warmup <= 0.0 || e_total <= 0.0 {
            return Err(LawnError::Config(
                "schedule epochs must satisfy e_free >= 0, e_warmup > 0, e_total > 0".into(),
            ));
        }
        if e_free + e_warmup > e_total {
            return Err(LawnError::Config(format!(
                "e_free + e_warmup = {} exceeds e_total = {e_total}",
                e_free + e_warmup
            )));
        }
        Self::lawn3_steps(
            eta_peak,
            round_steps(e_free, steps_per_epoch),
            round_steps(e_warmup, steps_per_epoch),
            round_steps(e_total, steps_per_epoch),
        )
    }

    /// 3-phase program with exact step boundaries.
    pub fn lawn3_steps(
        eta_peak: f64,
        free_steps: u64,
        warmup_steps: u64,
        total_steps: u64,
    ) -> Result<Self> {
        if !(eta_peak > 0.0) {
            return Err(LawnError::Config("eta_peak must be > 0".into()));
        }
        if warmup_steps == 0 || total_steps == 0 {
            return Err(LawnError::Config(
                "warmup and total steps must be >= 1".into(),
            ));
        }
        if free_steps + warmup_steps > total_steps {
            return Err(LawnError::Config(format!(
                "free ({free_steps}) + warmup ({warmup_steps}) steps exceed total ({total_steps})"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::Lawn3,
            eta_peak,
            free_steps,
            warmup_steps,
            total_steps,
        })
    }

    pub fn base2(
        eta_peak: f64,
        e_warmup: f64,
        e_total: f64,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        if e_warmup <= 0.0 || e_total <= 0.0 || e_warmup > e_total {
            return Err(LawnError::Config(
                "schedule epochs must satisfy 0 < e_warmup <= e_total".into(),
            ));
        }
        Self::base2_steps(
            eta_peak,
            round_steps(e_warmup, steps_per_epoch),
            round_steps(e_total, steps_per_epoch),
        )
    }

    /// 2-phase program with exact step boundaries.
    pub fn base2_steps(eta_peak: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(eta_peak > 0.0) {
            return Err(LawnError::Config("eta_peak must be > 0".into()));
        }
        if warmup_steps == 0 || warmup_steps > total_steps {
            return Err(LawnError::Config(format!(
                "need 1 <= warmup ({warmup_steps}) <= total ({total_steps})"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::Base2,
            eta_peak,
            free_steps: 0,
            warmup_steps,
            total_steps,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn eta_peak(&self) -> f64 {
        self.eta_peak
    }

    pub fn free_steps(&self) -> u64 {
        self.free_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Learning rate at 1-based step t. Each warmup ends exactly at the
    /// peak; the decay reaches exactly zero at the final step.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t < 1 || t > self.total_steps {
            return Err(LawnError::Usage(format!(
                "step {t} outside [1, {}]",
                self.total_steps
            )));
        }
        let eta = self.eta_peak;
        let f = self.free_steps;
        let w = self.warmup_steps;
        Ok(match self.kind {
            ScheduleKind::Lawn3 => {
                if t <= f {
                    eta * (t as f64 / f as f64)
                } else if t <= f + w {
                    eta * ((t - f) as f64 / w as f64)
                } else {
                    let decay = self.total_steps - f - w;
                    eta * (1.0 - (t - f - w) as f64 / decay as f64)
                }
            }
            ScheduleKind::Base2 => {
                if t <= w {
                    eta * (t as f64 / w as f64)
                } else {
                    let decay = self.total_steps - w;
                    eta * (1.0 - (t - w) as f64 / decay as f64)
                }
            }
        })
    }
}
