//! Run configuration: a flat `key = value` text format with dotted keys.

use std::path::PathBuf;

use crate::error::{LawnError, Result};
use crate::losses::{PenaltyKind, RegularizerConfig};
use crate::network::Activation;
use crate::optim::OptimFamily;
use crate::schedule::ScheduleKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Toy,
    Blobs,
    Csv,
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    pub label_column: String,
    pub nc: usize,
    pub per_class: usize,
    pub dim: usize,
    pub sigma: f64,
    pub label_noise: f64,
    /// 0 disables the train/test split.
    pub test_frac: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct NetConfig {
    /// Hidden layer widths; empty means a single linear layer.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
    /// Defaults to 1 output for binary problems, nc otherwise.
    pub out_dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClipSetting {
    /// Family default: 1.0 for Adam/LAMB, none for SGD.
    FamilyDefault,
    Disabled,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwitchOverride {
    /// k = round(e_free * steps_per_epoch) + 1 for LAWN families.
    Auto,
    /// Never switch (free training forever).
    Never,
    /// Explicit 1-based switch step.
    Step(u64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SwitchMode {
    Epoch,
    Plateau {
        window: usize,
        delta: f64,
        floor: f64,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct AttenuationConfig {
    pub enabled: bool,
    pub decay: f64,
    pub threshold: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub net: NetConfig,
    pub family: OptimFamily,
    /// True for the `*_lawn` family variants.
    pub lawn: bool,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub momentum: f64,
    pub grad_clip: ClipSetting,
    pub switch_override: SwitchOverride,
    pub reg: RegularizerConfig,
    pub schedule_kind: Option<ScheduleKind>,
    pub eta_peak: f64,
    pub e_free: f64,
    pub e_warmup: f64,
    pub e_total: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub attenuation: AttenuationConfig,
    pub switch_mode: SwitchMode,
    pub out_path: Option<PathBuf>,
    pub flat_threshold: f64,
    pub flat_flag_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                kind: DatasetKind::Toy,
                path: None,
                label_column: "y".into(),
                nc: 2,
                per_class: 50,
                dim: 4,
                sigma: 1.0,
                label_noise: 0.0,
                test_frac: 0.0,
                seed: 1,
            },
            net: NetConfig {
                hidden: Vec::new(),
                activation: Activation::Relu,
                bias: false,
                out_dim: None,
            },
            family: OptimFamily::Adam,
            lawn: false,
            beta1: None,
            beta2: None,
            epsilon: None,
            momentum: 0.9,
            grad_clip: ClipSetting::FamilyDefault,
            switch_override: SwitchOverride::Auto,
            reg: RegularizerConfig::none(),
            schedule_kind: None,
            eta_peak: 0.01,
            e_free: 5.0,
            e_warmup: 10.0,
            e_total: 50.0,
            batch_size: 2,
            seed: 1,
            attenuation: AttenuationConfig {
                enabled: false,
                decay: 0.99,
                threshold: 3.0,
                alpha: 0.2,
            },
            switch_mode: SwitchMode::Epoch,
            out_path: None,
            flat_threshold: 3.0,
            flat_flag_fraction: 0.9,
        }
    }
}

fn parse_f64(key: &str, value: &str, line: usize) -> Result<f64> {
    value.parse().map_err(|_| LawnError::Parse {
        line,
        msg: format!("{key}: {value:?} is not a number"),
    })
}

fn parse_usize(key: &str, value: &str, line: usize) -> Result<usize> {
    value.parse().map_err(|_| LawnError::Parse {
        line,
        msg: format!("{key}: {value:?} is not a nonnegative integer"),
    })
}

fn parse_u64(key: &str, value: &str, line: usize) -> Result<u64> {
    value.parse().map_err(|_| LawnError::Parse {
        line,
        msg: format!("{key}: {value:?} is not a nonnegative integer"),
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(LawnError::Parse {
            line,
            msg: format!("{key}: {value:?} is not a boolean"),
        }),
    }
}

impl RunConfig {
    /// Parses the line-oriented `key = value` config text. Blank lines and
    /// `#` comments are skipped; unknown keys are configuration errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| LawnError::Parse {
                line,
                msg: format!("expected `key = value`, got {trimmed:?}"),
            })?;
            cfg.apply(key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment (also used for CLI overrides
    /// and grid points).
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "dataset.kind" => {
                self.dataset.kind = match value {
                    "toy" => DatasetKind::Toy,
                    "blobs" => DatasetKind::Blobs,
                    "csv" => DatasetKind::Csv,
                    _ => {
                        return Err(LawnError::Parse {
                            line,
                            msg: format!("unknown dataset kind {value:?}"),
                        })
                    }
                }
            }
            "dataset.path" => self.dataset.path = Some(PathBuf::from(value)),
            "dataset.label_column" => self.dataset.label_column = value.to_string(),
            "dataset.nc" => self.dataset.nc = parse_usize(key, value, line)?,
            "dataset.per_class" => self.dataset.per_class = parse_usize(key, value, line)?,
            "dataset.dim" => self.dataset.dim = parse_usize(key, value, line)?,
            "dataset.sigma" => self.dataset.sigma = parse_f64(key, value, line)?,
            "dataset.label_noise" => self.dataset.label_noise = parse_f64(key, value, line)?,
            "dataset.test_frac" => self.dataset.test_frac = parse_f64(key, value, line)?,
            "dataset.seed" => self.dataset.seed = parse_u64(key, value, line)?,
            "net.hidden" => {
                self.net.hidden = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| parse_usize(key, s.trim(), line))
                        .collect::<Result<Vec<_>>>()?
                };
            }
            "net.activation" => {
                self.net.activation = match value {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => {
                        return Err(LawnError::Parse {
                            line,
                            msg: format!("unknown activation {value:?}"),
                        })
                    }
                }
            }
            "net.bias" => self.net.bias = parse_bool(key, value, line)?,
            "net.out_dim" => self.net.out_dim = Some(parse_usize(key, value, line)?),
            "optim.family" => {
                let (base, lawn) = match value {
                    "sgd" => (OptimFamily::Sgd, false),
                    "adam" => (OptimFamily::Adam, false),
                    "lamb" => (OptimFamily::Lamb, false),
                    "lamb_plus" => (OptimFamily::LambPlus, false),
                    "sgd_lawn" => (OptimFamily::Sgd, true),
                    "adam_lawn" => (OptimFamily::Adam, true),
                    "lamb_lawn" => (OptimFamily::Lamb, true),
                    "lamb_plus_lawn" => (OptimFamily::LambPlus, true),
                    _ => {
                        return Err(LawnError::Parse {
                            line,
                            msg: format!("unknown optimizer family {value:?}"),
                        })
                    }
                };
                self.family = base;
                self.lawn = lawn;
            }
            "optim.beta1" => self.beta1 = Some(parse_f64(key, value, line)?),
            "optim.beta2" => self.beta2 = Some(parse_f64(key, value, line)?),
            "optim.epsilon" => self.epsilon = Some(parse_f64(key, value, line)?),
            "optim.momentum" => self.momentum = parse_f64(key, value, line)?,
            "optim.grad_clip" => {
                self.grad_clip = if value == "none" {
                    ClipSetting::Disabled
                } else {
                    ClipSetting::Value(parse_f64(key, value, line)?)
                };
            }
            "optim.switch_step_k" => {
                self.switch_override = if value == "inf" {
                    SwitchOverride::Never
                } else {
                    SwitchOverride::Step(parse_u64(key, value, line)?)
                };
            }
            "reg.kind" => {
                self.reg.kind = match value {
                    "none" => PenaltyKind::None,
                    "l2" => PenaltyKind::L2,
                    "weight_decay" => PenaltyKind::DecoupledWeightDecay,
                    _ => {
                        return Err(LawnError::Parse {
                            line,
                            msg: format!("unknown penalty kind {value:?}"),
                        })
                    }
                }
            }
            "reg.lambda" => self.reg.lambda = parse_f64(key, value, line)?,
            "reg.lsr_epsilon" => self.reg.lsr_epsilon = parse_f64(key, value, line)?,
            "reg.flooding_epsilon" => {
                self.reg.flooding_epsilon = if value == "none" {
                    None
                } else {
                    Some(parse_f64(key, value, line)?)
                };
            }
            "schedule.kind" => {
                self.schedule_kind = Some(match value {
                    "lawn3" => ScheduleKind::Lawn3,
                    "base2" => ScheduleKind::Base2,
                    _ => {
                        return Err(LawnError::Parse {
                            line,
                            msg: format!("unknown schedule kind {value:?}"),
                        })
                    }
                })
            }
            "schedule.eta_peak" => self.eta_peak = parse_f64(key, value, line)?,
            "schedule.e_free" => self.e_free = parse_f64(key, value, line)?,
            "schedule.e_warmup" => self.e_warmup = parse_f64(key, value, line)?,
            "schedule.e_total" => self.e_total = parse_f64(key, value, line)?,
            "train.batch_size" => self.batch_size = parse_usize(key, value, line)?,
            "train.seed" => self.seed = parse_u64(key, value, line)?,
            "train.out" => self.out_path = Some(PathBuf::from(value)),
            "atten.enabled" => self.attenuation.enabled = parse_bool(key, value, line)?,
            "atten.decay" => self.attenuation.decay = parse_f64(key, value, line)?,
            "atten.threshold" => self.attenuation.threshold = parse_f64(key, value, line)?,
            "atten.alpha" => self.attenuation.alpha = parse_f64(key, value, line)?,
            "switch.mode" => {
                self.switch_mode = match value {
                    "epoch" => SwitchMode::Epoch,
                    "plateau" => SwitchMode::Plateau {
                        window: 50,
                        delta: 0.002,
                        floor: 0.8,
                    },
                    _ => {
                        return Err(LawnError::Parse {
                            line,
                            msg: format!("unknown switch mode {value:?}"),
                        })
                    }
                }
            }
            "switch.window" | "switch.delta" | "switch.floor" => {
                let (mut window, mut delta, mut floor) = match self.switch_mode {
                    SwitchMode::Plateau {
                        window,
                        delta,
                        floor,
                    } => (window, delta, floor),
                    SwitchMode::Epoch => (50, 0.002, 0.8),
                };
                match key {
                    "switch.window" => window = parse_usize(key, value, line)?,
                    "switch.delta" => delta = parse_f64(key, value, line)?,
                    _ => floor = parse_f64(key, value, line)?,
                }
                self.switch_mode = SwitchMode::Plateau {
                    window,
                    delta,
                    floor,
                };
            }
            "metrics.flat_threshold" => self.flat_threshold = parse_f64(key, value, line)?,
            "metrics.flat_fraction" => self.flat_flag_fraction = parse_f64(key, value, line)?,
            _ => {
                return Err(LawnError::Config(format!(
                    "unknown configuration key {key:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if self.batch_size < 1 {
            return Err(LawnError::Config("batch size must be >= 1".into()));
        }
        if !(self.e_total > 0.0) || (self.e_total - self.e_total.round()).abs() > 1e-9 {
            return Err(LawnError::Config(
                "e_total must be a positive whole number of epochs".into(),
            ));
        }
        if self.lawn && self.switch_override == SwitchOverride::Auto && !(self.e_free > 0.0) {
            return Err(LawnError::Config(
                "LAWN families need e_free > 0 (or an explicit switch step)".into(),
            ));
        }
        if self.dataset.kind == DatasetKind::Csv && self.dataset.path.is_none() {
            return Err(LawnError::Config("csv dataset needs dataset.path".into()));
        }
        if !(0.0..1.0).contains(&self.dataset.test_frac) {
            return Err(LawnError::Config("test fraction must lie in [0, 1)".into()));
        }
        if let SwitchMode::Plateau {
            window,
            delta,
            floor,
        } = self.switch_mode
        {
            if window < 1 || !(delta >= 0.0) || !(0.0..=1.0).contains(&floor) {
                return Err(LawnError::Config("bad plateau parameters".into()));
            }
        }
        if self.attenuation.enabled {
            if !(self.attenuation.decay > 0.0 && self.attenuation.decay < 1.0) {
                return Err(LawnError::Config(
                    "attenuation decay must lie in (0, 1)".into(),
                ));
            }
            if !(self.attenuation.alpha > 0.0 && self.attenuation.alpha < 1.0) {
                return Err(LawnError::Config(
                    "attenuation alpha must lie in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_of_common_keys() {
        let text = "\
# comment line
dataset.kind = blobs
dataset.nc = 3
dataset.per_class = 40
dataset.dim = 6
dataset.test_frac = 0.25

net.hidden = 16,8
optim.family = adam_lawn
schedule.eta_peak = 0.05
schedule.e_free = 2
schedule.e_total = 20
train.batch_size = 16
train.seed = 99
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.dataset.kind, DatasetKind::Blobs);
        assert_eq!(cfg.dataset.nc, 3);
        assert_eq!(cfg.net.hidden, vec![16, 8]);
        assert_eq!(cfg.family, OptimFamily::Adam);
        assert!(cfg.lawn);
        assert_eq!(cfg.eta_peak, 0.05);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.seed, 99);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(
            RunConfig::parse("bogus.key = 1\n"),
            Err(LawnError::Config(_))
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match RunConfig::parse("dataset.kind = toy\nnot a kv line\n") {
            Err(LawnError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn lawn_family_requires_free_epochs() {
        let mut cfg = RunConfig::default();
        cfg.apply("optim.family", "sgd_lawn", 0).unwrap();
        cfg.e_free = 0.0;
        assert!(cfg.validate().is_err());
        cfg.apply("optim.switch_step_k", "inf", 0).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn switch_step_override_parses_inf_and_numbers() {
        let mut cfg = RunConfig::default();
        cfg.apply("optim.switch_step_k", "inf", 0).unwrap();
        assert_eq!(cfg.switch_override, SwitchOverride::Never);
        cfg.apply("optim.switch_step_k", "120", 0).unwrap();
        assert_eq!(cfg.switch_override, SwitchOverride::Step(120));
    }

    #[test]
    fn fractional_e_total_rejected() {
        let mut cfg = RunConfig::default();
        cfg.e_total = 10.5;
        assert!(cfg.validate().is_err());
    }
}
