//! Dataset generators, CSV ingestion, splits, and deterministic batching.

use std::path::Path;

use crate::error::{LawnError, Result};
use crate::linalg::Matrix;
use crate::rng::{GaussianStream, SplitMix64};

// Salts for the independent random streams a dataset seed fans out into.
const SALT_DRAW: u64 = 0xD5;
const SALT_FLIP_PICK: u64 = 0xF1;
const SALT_FLIP_CLASS: u64 = 0xF2;
const SALT_SPLIT: u64 = 0x51;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub nc: usize,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn check(self) -> Result<Self> {
        if self.is_empty() {
            return Err(LawnError::Config(format!("dataset {} is empty", self.name)));
        }
        if self.features.rows() != self.len() {
            return Err(LawnError::Shape("feature/label count mismatch".into()));
        }
        if !self.features.is_finite() {
            return Err(LawnError::Numeric("non-finite features".into()));
        }
        if self.labels.iter().any(|&y| y >= self.nc) {
            return Err(LawnError::Config("label out of class range".into()));
        }
        Ok(self)
    }
}

/// The two-point symmetric problem: (2, 1) labelled positive (class 1) and
/// (-2, -1) labelled negative (class 0). For a bias-free linear scorer the
/// max-margin direction is (2, 1)/sqrt(5), and both points always share the
/// same loss.
pub fn toy_dataset() -> Dataset {
    Dataset {
        features: Matrix::from_rows(&[vec![2.0, 1.0], vec![-2.0, -1.0]]).unwrap(),
        labels: vec![1, 0],
        nc: 2,
        name: "toy".into(),
    }
}

/// Gaussian class blobs with means on a scaled coordinate simplex.
///
/// Mean for class k is `s * e_k` with `s = 4 * sigma * sqrt(d) / sqrt(2)`,
/// so every pair of class means sits exactly `4 * sigma * sqrt(d)` apart:
/// comfortably separable at small sigma but with controllable overlap.
/// `label_noise_frac` of the labels (rounded to a whole count) are flipped
/// to a uniformly chosen wrong class.
pub fn gaussian_blobs(
    nc: usize,
    per_class: usize,
    d: usize,
    sigma: f64,
    label_noise_frac: f64,
    seed: u64,
) -> Result<Dataset> {
    if nc < 2 {
        return Err(LawnError::Config("need at least 2 classes".into()));
    }
    if per_class < 1 {
        return Err(LawnError::Config("per_class must be >= 1".into()));
    }
    if d < nc {
        return Err(LawnError::Config(format!(
            "simplex means need d >= nc, got d = {d}, nc = {nc}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(LawnError::Config("sigma must be > 0".into()));
    }
    if !(0.0..0.5).contains(&label_noise_frac) {
        return Err(LawnError::Config(
            "label noise fraction must lie in [0, 0.5)".into(),
        ));
    }
    let m = nc * per_class;
    let scale = 4.0 * sigma * (d as f64).sqrt() / std::f64::consts::SQRT_2;
    let mut gauss = GaussianStream::new(SplitMix64::keyed(seed, SALT_DRAW));
    let mut features = Matrix::zeros(m, d);
    let mut labels = Vec::with_capacity(m);
    for k in 0..nc {
        for p in 0..per_class {
            let row = k * per_class + p;
            for j in 0..d {
                let mean = if j == k { scale } else { 0.0 };
                features.set(row, j, mean + sigma * gauss.next());
            }
            labels.push(k);
        }
    }
    let n_flip = (label_noise_frac * m as f64).round() as usize;
    if n_flip > 0 {
        let mut order: Vec<usize> = (0..m).collect();
        SplitMix64::keyed(seed, SALT_FLIP_PICK).shuffle(&mut order);
        let mut cls = SplitMix64::keyed(seed, SALT_FLIP_CLASS);
        for &i in order.iter().take(n_flip) {
            let offset = 1 + cls.below(nc as u64 - 1) as usize;
            labels[i] = (labels[i] + offset) % nc;
        }
    }
    Dataset {
        features,
        labels,
        nc,
        name: "blobs".into(),
    }
    .check()
}

/// Loads a dataset from a headered CSV of decimal features and one integer
/// label column. Row order is preserved; `nc` is one plus the largest label,
/// so class gaps are allowed.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|source| LawnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(LawnError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = columns
        .iter()
        .position(|c| *c == label_column)
        .ok_or_else(|| LawnError::Parse {
            line: 1,
            msg: format!("label column {label_column:?} not in header"),
        })?;
    let width = columns.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(LawnError::Parse {
                line: lineno,
                msg: format!("expected {width} cells, found {}", cells.len()),
            });
        }
        let mut row = Vec::with_capacity(width - 1);
        for (j, cell) in cells.iter().enumerate() {
            if j == label_idx {
                let y: i64 = cell.parse().map_err(|_| LawnError::Parse {
                    line: lineno,
                    msg: format!("label {cell:?} is not an integer"),
                })?;
                if y < 0 {
                    return Err(LawnError::Parse {
                        line: lineno,
                        msg: format!("label {y} is negative"),
                    });
                }
                labels.push(y as usize);
            } else {
                let v: f64 = cell.parse().map_err(|_| LawnError::Parse {
                    line: lineno,
                    msg: format!("cell {cell:?} is not numeric"),
                })?;
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(LawnError::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    let nc = 1 + labels.iter().copied().max().unwrap_or(0);
    let nc = nc.max(2);
    Dataset {
        features: Matrix::from_rows(&rows)?,
        labels,
        nc,
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
    }
    .check()
}

/// Seeded permutation then prefix/suffix split; disjoint and exhaustive.
pub fn split(dataset: &Dataset, test_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(LawnError::Config(format!(
            "test fraction must lie in (0, 1), got {test_frac}"
        )));
    }
    let m = dataset.len();
    let n_test = (test_frac * m as f64).round() as usize;
    let n_train = m - n_test;
    if n_train < 1 || n_test < 1 {
        return Err(LawnError::Config(format!(
            "degenerate split sizes {n_train}/{n_test} from m = {m}"
        )));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    SplitMix64::keyed(seed, SALT_SPLIT).shuffle(&mut perm);
    let take = |indices: &[usize], suffix: &str| -> Result<Dataset> {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| dataset.features.row(i).to_vec())
            .collect();
        Ok(Dataset {
            features: Matrix::from_rows(&rows)?,
            labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
            nc: dataset.nc,
            name: format!("{}-{suffix}", dataset.name),
        })
    };
    Ok((
        take(&perm[..n_train], "train")?,
        take(&perm[n_train..], "test")?,
    ))
}

/// Deterministic minibatch plan.
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub base_seed: u64,
    pub batch_size: usize,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(base_seed: u64, batch_size: usize) -> Self {
        Self {
            base_seed,
            batch_size,
            drop_last: false,
        }
    }
}

/// Index slices for one epoch: a Fisher-Yates shuffle keyed by
/// (base_seed, epoch) cut into contiguous batches. The trailing partial
/// batch is kept unless `drop_last` is set.
pub fn batches(dataset: &Dataset, plan: &BatchPlan, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let m = dataset.len();
    if plan.batch_size < 1 || plan.batch_size > m {
        return Err(LawnError::Config(format!(
            "batch size {} outside [1, {m}]",
            plan.batch_size
        )));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    SplitMix64::keyed(plan.base_seed, epoch).shuffle(&mut perm);
    let mut out = Vec::new();
    let mut start = 0;
    while start < m {
        let end = (start + plan.batch_size).min(m);
        if end - start < plan.batch_size && plan.drop_last {
            break;
        }
        out.push(perm[start..end].to_vec());
        start = end;
    }
    Ok(out)
}

/// Copies the rows of a dataset selected by a batch.
pub fn gather(dataset: &Dataset, indices: &[usize]) -> (Matrix, Vec<usize>) {
    let rows: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| dataset.features.row(i).to_vec())
        .collect();
    let labels = indices.iter().map(|&i| dataset.labels[i]).collect();
    (Matrix::from_rows(&rows).unwrap(), labels)
}
