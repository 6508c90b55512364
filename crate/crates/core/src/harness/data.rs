//! Dataset generation, CSV ingestion, splitting, and standardization.

use crate::numerics::Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv read: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: String, message: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("dataset is empty")]
    Empty,
}

/// Per-feature affine normalization, stored so predictions can be mapped
/// back to original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

/// Supervised dataset with row-major inputs and one target vector per row.
/// Regression targets hold the response; classification targets hold the
/// class index as a float.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn from_parts(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Self {
        assert_eq!(inputs.len(), targets.len());
        assert!(
            inputs.iter().flatten().chain(targets.iter().flatten()).all(|v| v.is_finite()),
            "non-finite entries in dataset"
        );
        Dataset { inputs, targets, normalization: None }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |r| r.len())
    }

    pub fn input(&self, d: usize) -> &[f64] {
        &self.inputs[d]
    }

    pub fn target(&self, d: usize) -> &[f64] {
        &self.targets[d]
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            normalization: self.normalization.clone(),
        }
    }

    /// Deterministic shuffled train/test split.
    pub fn split(&self, test_fraction: f64, rng: &mut Rng) -> (Dataset, Dataset) {
        let perm = rng.permutation(self.len());
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.clamp(1, self.len() - 1);
        let (test_idx, train_idx) = perm.split_at(n_test);
        (self.subset(train_idx), self.subset(test_idx))
    }

    /// Z-score both splits using train statistics only. Regression targets
    /// are standardized alongside the features.
    pub fn standardize_pair(train: &Dataset, test: &Dataset) -> (Dataset, Dataset) {
        let dim = train.input_dim();
        let n = train.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut scale = vec![0.0; dim];
        for row in &train.inputs {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        for row in &train.inputs {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = s.sqrt().max(1e-12);
        }
        let t_mean = train.targets.iter().map(|t| t[0]).sum::<f64>() / n;
        let t_var =
            train.targets.iter().map(|t| (t[0] - t_mean) * (t[0] - t_mean)).sum::<f64>() / n;
        let t_scale = t_var.sqrt().max(1e-12);
        let norm = Normalization {
            input_mean: mean.clone(),
            input_scale: scale.clone(),
            target_mean: t_mean,
            target_scale: t_scale,
        };
        let apply = |ds: &Dataset| Dataset {
            inputs: ds
                .inputs
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&mean)
                        .zip(&scale)
                        .map(|((v, m), s)| (v - m) / s)
                        .collect()
                })
                .collect(),
            targets: ds.targets.iter().map(|t| vec![(t[0] - t_mean) / t_scale]).collect(),
            normalization: Some(norm.clone()),
        };
        (apply(train), apply(test))
    }
}

/// One-dimensional toy regression: 12 inputs from Uniform(0, 0.6) and 8 from
/// Uniform(0, 0.8), response `y = x + sin 4(x+ε) + sin 13(x+ε) + ε` with
/// ε ~ N(0, 0.0009). `n` scales the 12/8 mixture proportionally.
pub fn toy_regression(rng: &mut Rng, n: usize) -> Dataset {
    let n_narrow = (n * 12 + 10) / 20; // 12 of 20 by default
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let x = if i < n_narrow { rng.uniform(0.0, 0.6) } else { rng.uniform(0.0, 0.8) };
        let eps = 0.03 * rng.normal();
        let y = x + (4.0 * (x + eps)).sin() + (13.0 * (x + eps)).sin() + eps;
        inputs.push(vec![x]);
        targets.push(vec![y]);
    }
    Dataset::from_parts(inputs, targets)
}

/// Synthetic regression surrogate with the same dimensionality as a typical
/// tabular benchmark; a noisy nonlinear map of a random linear projection.
pub fn synthetic_regression(rng: &mut Rng, n: usize, input_dim: usize) -> Dataset {
    let w: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
        let proj: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let y = proj.tanh() * 3.0 + 0.5 * proj + 0.1 * rng.normal();
        inputs.push(x);
        targets.push(vec![y]);
    }
    Dataset::from_parts(inputs, targets)
}

/// Load a numeric CSV with a header, splitting off `target_column` as the
/// regression response.
pub fn load_csv_regression(
    path: &Path,
    target_column: &str,
    standardize: bool,
) -> Result<Dataset, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => DataError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: {e}", path.display()),
        )),
        _ => DataError::Parse { row: 0, column: String::new(), message: e.to_string() },
    })?;
    let headers: Vec<String> =
        reader
            .headers()
            .map_err(|e| DataError::Parse { row: 0, column: String::new(), message: e.to_string() })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| DataError::MissingColumn(target_column.to_string()))?;

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Parse {
            row: row_idx + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(headers.len() - 1);
        let mut target = 0.0;
        for (col_idx, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                row: row_idx + 1,
                column: headers[col_idx].clone(),
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    row: row_idx + 1,
                    column: headers[col_idx].clone(),
                    message: "non-finite value".to_string(),
                });
            }
            if col_idx == target_idx {
                target = v;
            } else {
                row.push(v);
            }
        }
        inputs.push(row);
        targets.push(vec![target]);
    }
    if inputs.is_empty() {
        return Err(DataError::Empty);
    }
    let ds = Dataset::from_parts(inputs, targets);
    if standardize {
        // whole-set standardization; experiment drivers re-standardize per
        // split with train statistics
        let (std_ds, _) = Dataset::standardize_pair(&ds, &ds);
        Ok(std_ds)
    } else {
        Ok(ds)
    }
}
