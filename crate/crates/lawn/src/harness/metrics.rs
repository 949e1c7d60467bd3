//! Per-epoch metrics rows and the CSV writer.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LawnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Free,
    Constrained,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Free => f.write_str("free"),
            Phase::Constrained => f.write_str("constrained"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Global step index of the epoch's last step.
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_metric: f64,
    pub margin_min: f64,
    pub margin_p50: f64,
    pub normalized_margin: f64,
    pub flat_fraction: f64,
    /// Norm of the full-batch training gradient at epoch end.
    pub grad_norm: f64,
    pub group_norms: Vec<f64>,
}

/// Renders rows as CSV text: fixed header, one `norm_g{i}` column per group,
/// floats as shortest round-trip decimals, LF line endings. With no rows the
/// header carries no norm columns.
pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let n_groups = rows.first().map_or(0, |r| r.group_norms.len());
    let mut out = String::from(
        "epoch,step,phase,lr,train_loss,train_acc,test_metric,margin_min,margin_p50,normalized_margin,flat_fraction,grad_norm",
    );
    for g in 0..n_groups {
        let _ = write!(out, ",norm_g{g}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.phase,
            r.lr,
            r.train_loss,
            r.train_acc,
            r.test_metric,
            r.margin_min,
            r.margin_p50,
            r.normalized_margin,
            r.flat_fraction,
            r.grad_norm
        );
        for v in &r.group_norms {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, format_metrics(rows)).map_err(|source| LawnError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row() -> MetricsRow {
        MetricsRow {
            epoch: 1,
            step: 10,
            phase: Phase::Free,
            lr: 0.1,
            train_loss: 0.6931471805599453,
            train_acc: 0.5,
            test_metric: 0.25,
            margin_min: -1.5,
            margin_p50: 0.125,
            normalized_margin: 0.07071067811865475,
            flat_fraction: 0.0,
            grad_norm: 1e-3,
            group_norms: vec![1.4142135623730951, 2.0],
        }
    }

    #[test]
    fn header_only_for_zero_rows() {
        let text = format_metrics(&[]);
        assert_eq!(
            text,
            "epoch,step,phase,lr,train_loss,train_acc,test_metric,margin_min,margin_p50,normalized_margin,flat_fraction,grad_norm\n"
        );
    }

    #[test]
    fn group_columns_follow_row_width() {
        let text = format_metrics(&[sample_row()]);
        let header = text.lines().next().unwrap();
        assert!(header.ends_with("grad_norm,norm_g0,norm_g1"));
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn floats_round_trip_exactly() {
        let row = sample_row();
        let text = format_metrics(std::slice::from_ref(&row));
        let line = text.lines().nth(1).unwrap();
        let cells: Vec<&str> = line.split(',').collect();
        let parsed: f64 = cells[4].parse().unwrap();
        assert_eq!(parsed.to_bits(), row.train_loss.to_bits());
        let norm0: f64 = cells[12].parse().unwrap();
        assert_eq!(norm0.to_bits(), row.group_norms[0].to_bits());
    }

    #[test]
    fn write_then_read_back_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![sample_row()];
        write_metrics(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format_metrics(&rows));
    }
}
