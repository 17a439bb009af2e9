//! Paired permutation test, permutation feature importance, polarity
//! precision, train-fitted z-scoring and Pearson correlation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Precision -----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
}

/// Share of predicted polarities that match the truth.
pub fn precision(predicted: &[i8], truth: &[i8]) -> Result<ClassifierReport> {
    if predicted.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predicted.len() != truth.len() {
        return Err(Error::DimMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let tp = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    let fp = predicted.len() - tp;
    Ok(ClassifierReport {
        tp,
        fp,
        precision: tp as f64 / (tp + fp) as f64,
    })
}

// Permutation test ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// `|mean(a) - mean(b)|` over paired per-window errors.
    #[default]
    MeanAbsErrDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermutationConfig {
    pub n_permutations: usize,
    pub seed: u64,
    pub statistic: Statistic,
    /// Consecutive pairs flipped together; 1 flips each pair independently.
    pub block_len: usize,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        PermutationConfig {
            n_permutations: 10_000,
            seed: 0,
            statistic: Statistic::MeanAbsErrDiff,
            block_len: 1,
        }
    }
}

pub const MIN_PERMUTATIONS: usize = 100;
pub const MIN_PAIRS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed: f64,
    pub p_value: f64,
    pub n_permutations: usize,
}

/// Two-sided paired sign-flip test. `p = (1 + #{stat >= observed}) / (1 + n)`.
pub fn permutation_test(a: &[f64], b: &[f64], cfg: &PermutationConfig) -> Result<PermutationResult> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < MIN_PAIRS {
        return Err(Error::TooShort {
            len: a.len(),
            min: MIN_PAIRS,
        });
    }
    if cfg.n_permutations < MIN_PERMUTATIONS {
        return Err(Error::Config(format!(
            "n_permutations must be at least {MIN_PERMUTATIONS}"
        )));
    }
    if cfg.block_len == 0 {
        return Err(Error::Config("block_len must be at least 1".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("permutation test input".into()));
    }
    let n = a.len() as f64;
    // Block sums of the paired differences; flipping a block flips its sum.
    let blocks: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .collect::<Vec<_>>()
        .chunks(cfg.block_len)
        .map(|c| c.iter().sum())
        .collect();
    let observed = (blocks.iter().sum::<f64>() / n).abs();
    let tol = 1e-12 * observed.max(1e-300);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut hits = 0usize;
    for _ in 0..cfg.n_permutations {
        let s: f64 = blocks
            .iter()
            .map(|d| if rng.gen::<bool>() { *d } else { -*d })
            .sum();
        if (s / n).abs() >= observed - tol {
            hits += 1;
        }
    }
    Ok(PermutationResult {
        observed,
        p_value: (1 + hits) as f64 / (1 + cfg.n_permutations) as f64,
        n_permutations: cfg.n_permutations,
    })
}

// Permutation importance ------------------------------------------------------------

/// Anything that maps row-major `rows x cols` windows to scalar predictions.
pub trait Predictor {
    fn predict_windows(&self, windows: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl<F> Predictor for F
where
    F: Fn(&[f64]) -> f64,
{
    fn predict_windows(&self, windows: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(windows.iter().map(|w| self(w)).collect())
    }
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub feature: usize,
    pub importance: f64,
    pub baseline_mae: f64,
}

fn check_windows(windows: &[Vec<f64>], targets: &[f64], cols: usize, feature: usize) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if windows.len() != targets.len() {
        return Err(Error::DimMismatch {
            expected: windows.len(),
            got: targets.len(),
        });
    }
    if cols == 0 || feature >= cols {
        return Err(Error::Invalid(format!("feature index {feature} out of range 0..{cols}")));
    }
    if let Some(w) = windows.iter().find(|w| w.len() % cols != 0) {
        return Err(Error::Invalid(format!("window of length {} not a multiple of {cols}", w.len())));
    }
    Ok(())
}

/// Mean MAE increase after shuffling column `feature` (every row of it)
/// across samples.
pub fn permutation_importance<P: Predictor + ?Sized>(
    model: &P,
    windows: &[Vec<f64>],
    targets: &[f64],
    cols: usize,
    feature: usize,
    n_repeats: usize,
    seed: u64,
) -> Result<Importance> {
    check_windows(windows, targets, cols, feature)?;
    let baseline_mae = mae(&model.predict_windows(windows)?, targets);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (feature as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut perm: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0;
    for _ in 0..n_repeats.max(1) {
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = windows
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let src = &windows[perm[i]];
                let mut out = w.clone();
                for r in 0..w.len() / cols {
                    out[r * cols + feature] = src[r * cols + feature];
                }
                out
            })
            .collect();
        total += mae(&model.predict_windows(&shuffled)?, targets) - baseline_mae;
    }
    Ok(Importance {
        feature,
        importance: total / n_repeats.max(1) as f64,
        baseline_mae,
    })
}

/// Importance of every column, sorted descending (rank 1 first).
pub fn rank_importances<P: Predictor + ?Sized>(
    model: &P,
    windows: &[Vec<f64>],
    targets: &[f64],
    cols: usize,
    n_repeats: usize,
    seed: u64,
) -> Result<Vec<Importance>> {
    let mut out = (0..cols)
        .map(|j| permutation_importance(model, windows, targets, cols, j, n_repeats, seed))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.feature.cmp(&b.feature)));
    Ok(out)
}

pub fn write_importance_csv(path: impl AsRef<Path>, ranked: &[Importance], names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "feature", "importance"])?;
    for (r, imp) in ranked.iter().enumerate() {
        let name = names
            .get(imp.feature)
            .cloned()
            .unwrap_or_else(|| format!("feature_{}", imp.feature));
        w.write_record([(r + 1).to_string(), name, imp.importance.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

// Z-scoring ---------------------------------------------------------------------

/// Column statistics fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Columns with zero variance; they map to zero.
    pub degenerate: Vec<usize>,
}

impl ZScaler {
    /// Fits on row-major data of `cols` columns.
    pub fn fit_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, cols: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = vec![0.0; cols];
        let mut m2 = vec![0.0; cols];
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            n += 1;
            // Welford update
            for j in 0..cols {
                let d = r[j] - mean[j];
                mean[j] += d / n as f64;
                m2[j] += d * (r[j] - mean[j]);
            }
        }
        if n == 0 {
            return Err(Error::Empty("training rows"));
        }
        let mut stds = Vec::with_capacity(cols);
        let mut degenerate = Vec::new();
        for j in 0..cols {
            let s = (m2[j] / n as f64).sqrt();
            if !(s > 1e-12 * mean[j].abs().max(1.0)) {
                log::warn!("column {j} has zero variance; standardized to zeros");
                degenerate.push(j);
                stds.push(0.0);
            } else {
                stds.push(s);
            }
        }
        Ok(ZScaler {
            means: mean,
            stds,
            degenerate,
        })
    }

    pub fn cols(&self) -> usize {
        self.means.len()
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.means).zip(&self.stds) {
            *v = if *s > 0.0 { (*v - m) / s } else { 0.0 };
        }
    }

    /// Applies to row-major data whose width is a multiple of `cols`.
    pub fn apply_flat(&self, data: &mut [f64]) {
        for row in data.chunks_mut(self.cols()) {
            self.apply_row(row);
        }
    }
}

/// Column-oriented fit on `train`, applied to both `train` and `other`.
pub fn zscore_fit_apply(
    train: &[Vec<f64>],
    other: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, ZScaler)> {
    if train.len() != other.len() {
        return Err(Error::DimMismatch {
            expected: train.len(),
            got: other.len(),
        });
    }
    let n = train.first().map_or(0, Vec::len);
    let rows: Vec<Vec<f64>> = (0..n).map(|i| train.iter().map(|c| c[i]).collect()).collect();
    let scaler = ZScaler::fit_rows(rows.iter().map(Vec::as_slice), train.len())?;
    let tf = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
        cols.iter()
            .enumerate()
            .map(|(j, c)| {
                let (m, s) = (scaler.means[j], scaler.stds[j]);
                c.iter().map(|v| if s > 0.0 { (v - m) / s } else { 0.0 }).collect()
            })
            .collect()
    };
    Ok((tf(train), tf(other), scaler))
}

// Correlation --------------------------------------------------------------------

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance("constant column".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Symmetric correlation matrix with unit diagonal.
pub fn pearson_matrix(columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if columns.len() < 2 {
        return Err(Error::Invalid("need at least two columns".into()));
    }
    let c = columns.len();
    let mut m = vec![vec![1.0; c]; c];
    for i in 0..c {
        for j in i + 1..c {
            let r = pearson(&columns[i], &columns[j])
                .map_err(|e| match e {
                    Error::ZeroVariance(_) => Error::ZeroVariance(format!("column {i} or {j}")),
                    e => e,
                })?;
            m[i][j] = r;
            m[j][i] = r;
        }
        // a constant column only shows up when paired
        if columns[i].iter().all(|v| *v == columns[i][0]) {
            return Err(Error::ZeroVariance(format!("column {i}")));
        }
    }
    Ok(m)
}

pub fn write_correlation_csv(path: impl AsRef<Path>, names: &[String], m: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(m) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
