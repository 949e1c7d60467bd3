//! Tiny text checkpoint: the logit scale and every group's flat weights,
//! written as shortest round-trip decimals so save/load is lossless.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LawnError, Result};
use crate::network::Network;

const MAGIC: &str = "lawn-checkpoint v1";

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "alpha = {}", net.logit_scale_alpha());
    let _ = writeln!(out, "groups = {}", net.n_groups());
    for g in net.groups() {
        let _ = write!(out, "group {} =", g.group_id);
        for w in &g.weights {
            let _ = write!(out, " {w}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| LawnError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads weights saved by `save_checkpoint` into a network of the same
/// architecture.
pub fn load_checkpoint(net: &mut Network, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|source| LawnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: String| LawnError::Parse { line, msg };
    let (_, magic) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty checkpoint".into()))?;
    if magic.trim() != MAGIC {
        return Err(parse_err(1, format!("bad magic {magic:?}")));
    }
    let mut alpha = 1.0f64;
    let mut group_weights: Vec<Option<Vec<f64>>> = vec![None; net.n_groups()];
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected `key = value`, got {trimmed:?}")))?;
        let key = key.trim();
        let value = value.trim();
        if key == "alpha" {
            alpha = value
                .parse()
                .map_err(|_| parse_err(line, format!("bad alpha {value:?}")))?;
        } else if key == "groups" {
            let n: usize = value
                .parse()
                .map_err(|_| parse_err(line, format!("bad group count {value:?}")))?;
            if n != net.n_groups() {
                return Err(parse_err(
                    line,
                    format!("checkpoint has {n} groups, network has {}", net.n_groups()),
                ));
            }
        } else if let Some(gid_str) = key.strip_prefix("group ") {
            let gid: usize = gid_str
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad group id {gid_str:?}")))?;
            if gid >= net.n_groups() {
                return Err(parse_err(line, format!("group {gid} out of range")));
            }
            let weights = value
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| parse_err(line, format!("bad weight {tok:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if weights.len() != net.groups()[gid].len() {
                return Err(parse_err(
                    line,
                    format!(
                        "group {gid} has {} weights, network expects {}",
                        weights.len(),
                        net.groups()[gid].len()
                    ),
                ));
            }
            group_weights[gid] = Some(weights);
        } else {
            return Err(parse_err(line, format!("unknown checkpoint key {key:?}")));
        }
    }
    for (gid, slot) in group_weights.iter().enumerate() {
        if slot.is_none() {
            return Err(LawnError::Parse {
                line: 0,
                msg: format!("checkpoint is missing group {gid}"),
            });
        }
    }
    for (gid, slot) in group_weights.into_iter().enumerate() {
        net.groups_mut()[gid].weights = slot.unwrap();
    }
    net.set_logit_scale(alpha)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, Activation, LayerSpec};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let specs = [
            LayerSpec::new(2, 3, Activation::Relu, true),
            LayerSpec::new(3, 2, Activation::Identity, false),
        ];
        let mut net = build_network(&specs, 77).unwrap();
        net.set_logit_scale(0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let mut restored = build_network(&specs, 0).unwrap();
        load_checkpoint(&mut restored, &path).unwrap();
        assert_eq!(restored.logit_scale_alpha(), 0.2);
        for (a, b) in net.groups().iter().zip(restored.groups()) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let specs = [LayerSpec::new(2, 2, Activation::Identity, false)];
        let net = build_network(&specs, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let other = [LayerSpec::new(3, 2, Activation::Identity, false)];
        let mut wrong = build_network(&other, 1).unwrap();
        assert!(load_checkpoint(&mut wrong, &path).is_err());
    }
}
