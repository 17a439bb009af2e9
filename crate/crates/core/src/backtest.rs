//! Rolling-window backtest: train the forecaster with and without sentiment
//! columns on a shared bond split and compare test errors.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::composite::CompositeSeries;
use crate::corpus::{split_bonds, BondPanel, Calendar, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::forecast::{
    align_to_panel, build_windows, evaluate, evaluate_per_bond, prediction_rows, prepare_training,
    train_forecaster, EvalReport, ForecasterConfig, ForecasterModel, Metrics, PredictionRow, WindowSample, WindowSpec,
};
use crate::matrix::SentimentMatrix;
use crate::stats::{permutation_test, PermutationConfig, PermutationResult};
use crate::wavelet::{smooth, WaveletSpec};

/// Which sentiment columns are appended to each window row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Panel features only.
    Baseline,
    /// Smoothed sum of firm and industry sentiment.
    Composite,
    /// Sum of firm and industry sentiment without smoothing.
    Unsmoothed,
    /// Smoothed firm-level sentiment alone.
    MicroOnly,
    /// Smoothed industry-level sentiment alone.
    MesoOnly,
    /// Smoothed firm and industry sentiment as two columns.
    Separate,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Composite,
        Variant::Unsmoothed,
        Variant::MicroOnly,
        Variant::MesoOnly,
        Variant::Separate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Composite => "composite",
            Variant::Unsmoothed => "unsmoothed",
            Variant::MicroOnly => "micro_only",
            Variant::MesoOnly => "meso_only",
            Variant::Separate => "separate",
        }
    }

    pub fn n_columns(self) -> usize {
        match self {
            Variant::Baseline => 0,
            Variant::Separate => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sentiment variant {s:?}")))
    }
}

/// Calendar-indexed sentiment series for one bond, in every form a variant
/// may ask for.
#[derive(Debug, Clone, PartialEq)]
pub struct BondSentiment {
    pub micro: Vec<f64>,
    pub meso: Vec<f64>,
    pub raw: Vec<f64>,
    pub composite: Vec<f64>,
    pub micro_smoothed: Vec<f64>,
    pub meso_smoothed: Vec<f64>,
}

impl BondSentiment {
    pub fn columns(&self, v: Variant) -> Vec<&[f64]> {
        match v {
            Variant::Baseline => vec![],
            Variant::Composite => vec![&self.composite],
            Variant::Unsmoothed => vec![&self.raw],
            Variant::MicroOnly => vec![&self.micro_smoothed],
            Variant::MesoOnly => vec![&self.meso_smoothed],
            Variant::Separate => vec![&self.micro_smoothed, &self.meso_smoothed],
        }
    }
}

/// Builds every bond's sentiment forms from the firm-level matrix, the
/// per-bond industry matrix and the composite series.
pub fn bond_sentiment(
    alpha: &SentimentMatrix,
    meso: &SentimentMatrix,
    composite: &BTreeMap<String, CompositeSeries>,
    spec: &WaveletSpec,
) -> Result<BTreeMap<String, BondSentiment>> {
    let zeros = vec![0.0; alpha.n_days()];
    composite
        .iter()
        .map(|(b, c)| {
            let micro = alpha.row_by_name(b).ok_or_else(|| Error::UnknownBond(b.clone()))?.to_vec();
            let meso = meso.row_by_name(b).unwrap_or(&zeros).to_vec();
            let s = BondSentiment {
                micro_smoothed: smooth(&micro, spec)?.values,
                meso_smoothed: smooth(&meso, spec)?.values,
                micro,
                meso,
                raw: c.raw.clone(),
                composite: c.smoothed.clone(),
            };
            Ok((b.clone(), s))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    pub window: WindowSpec,
    pub forecaster: ForecasterConfig,
    pub split_ratios: (u32, u32, u32),
    pub split_seed: u64,
    pub permutation: PermutationConfig,
    /// Average metrics per bond instead of pooling all test windows.
    pub per_bond_metrics: bool,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            window: WindowSpec::default(),
            forecaster: ForecasterConfig::default(),
            split_ratios: (7, 1, 2),
            split_seed: 0,
            permutation: PermutationConfig::default(),
            per_bond_metrics: false,
        }
    }
}

/// Train, valid and test windows for one variant.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<WindowSample>,
    pub valid: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

pub fn build_datasets(
    panels: &[BondPanel],
    splits: &SplitAssignment,
    sentiment: Option<&BTreeMap<String, BondSentiment>>,
    calendar: &Calendar,
    variant: Variant,
    spec: &WindowSpec,
) -> Result<Datasets> {
    let mut ds = Datasets {
        train: vec![],
        valid: vec![],
        test: vec![],
    };
    for p in panels {
        let split = splits.get(&p.bond_id).ok_or_else(|| Error::UnknownBond(p.bond_id.clone()))?;
        let cols: Vec<Vec<f64>> = if variant == Variant::Baseline {
            vec![]
        } else {
            let s = sentiment
                .ok_or_else(|| Error::Config(format!("variant {variant} needs sentiment inputs")))?
                .get(&p.bond_id)
                .ok_or_else(|| Error::UnknownBond(p.bond_id.clone()))?;
            s.columns(variant)
                .into_iter()
                .map(|c| align_to_panel(c, calendar, p))
                .collect::<Result<_>>()?
        };
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let w = build_windows(p, spec, &refs)?;
        match split {
            Split::Train => ds.train.extend(w),
            Split::Valid => ds.valid.extend(w),
            Split::Test => ds.test.extend(w),
        }
    }
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(Error::Empty("train or test windows"));
    }
    Ok(ds)
}

/// One trained variant and its test-set output.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub model: ForecasterModel,
    pub metrics: Metrics,
    pub predictions: Vec<PredictionRow>,
    /// Absolute error per test window, in test-window order.
    pub abs_errors: Vec<f64>,
}

pub fn run_variant(
    panels: &[BondPanel],
    splits: &SplitAssignment,
    sentiment: Option<&BTreeMap<String, BondSentiment>>,
    calendar: &Calendar,
    variant: Variant,
    cfg: &BacktestConfig,
) -> Result<VariantRun> {
    let mut ds = build_datasets(panels, splits, sentiment, calendar, variant, &cfg.window)?;
    let scaler = prepare_training(&mut ds.train, &mut ds.valid, &mut ds.test)?;
    let mut model = train_forecaster(&ds.train, &ds.valid, &cfg.forecaster)?;
    // test windows are already scaled; attach the scaler afterwards so the
    // saved model accepts raw windows
    let preds = model.predict_batch(&ds.test)?;
    model.scaler = Some(scaler);
    let targets: Vec<f64> = ds.test.iter().map(|s| s.target).collect();
    let metrics = if cfg.per_bond_metrics {
        evaluate_per_bond(&ds.test, &preds)?
    } else {
        evaluate(&preds, &targets)?
    };
    log::info!("{variant}: mae {:.5} mape {:.5} on {} windows", metrics.mae, metrics.mape, metrics.n);
    Ok(VariantRun {
        variant,
        model,
        metrics,
        abs_errors: preds.iter().zip(&targets).map(|(p, t)| (p - t).abs()).collect(),
        predictions: prediction_rows(&ds.test, &preds),
    })
}

/// Compares a sentiment variant against the baseline on the same windows.
pub fn compare(base: &VariantRun, with: &VariantRun, perm: &PermutationConfig) -> Result<(EvalReport, PermutationResult)> {
    let same = base.predictions.len() == with.predictions.len()
        && base
            .predictions
            .iter()
            .zip(&with.predictions)
            .all(|(a, b)| a.bond_id == b.bond_id && a.target_date == b.target_date);
    if !same {
        return Err(Error::Invalid("runs were evaluated on different test windows".into()));
    }
    let pt = permutation_test(&base.abs_errors, &with.abs_errors, perm)?;
    Ok((EvalReport::compared(&base.metrics, &with.metrics, pt.p_value)?, pt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub t: usize,
    pub q: usize,
    pub seed: u64,
    pub baseline: EvalReport,
    pub variants: BTreeMap<Variant, EvalReport>,
}

#[derive(Debug, Clone)]
pub struct BacktestOutcome {
    pub splits: SplitAssignment,
    pub baseline: VariantRun,
    pub runs: Vec<VariantRun>,
    pub report: BacktestReport,
}

/// Baseline plus each requested sentiment variant, all on the same split,
/// seed and batch order.
pub fn run_backtest(
    panels: &[BondPanel],
    sentiment: Option<&BTreeMap<String, BondSentiment>>,
    calendar: &Calendar,
    variants: &[Variant],
    cfg: &BacktestConfig,
) -> Result<BacktestOutcome> {
    cfg.forecaster.validate()?;
    let ids: Vec<String> = panels.iter().map(|p| p.bond_id.clone()).collect();
    let splits = split_bonds(&ids, cfg.split_ratios, cfg.split_seed)?;
    let baseline = run_variant(panels, &splits, sentiment, calendar, Variant::Baseline, cfg)?;
    let mut runs = Vec::new();
    let mut reports = BTreeMap::new();
    for &v in variants.iter().filter(|v| **v != Variant::Baseline) {
        let run = run_variant(panels, &splits, sentiment, calendar, v, cfg)?;
        let (rep, _) = compare(&baseline, &run, &cfg.permutation)?;
        reports.insert(v, rep);
        runs.push(run);
    }
    Ok(BacktestOutcome {
        splits,
        report: BacktestReport {
            t: cfg.window.t,
            q: cfg.window.q,
            seed: cfg.forecaster.seed,
            baseline: EvalReport::baseline(&baseline.metrics),
            variants: reports,
        },
        baseline,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composite::build_composite;
    use crate::corpus::{build_calendar, N_FEATURES};
    use crate::matrix::MatrixAxis;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n_bonds: usize, k: usize, seed: u64) -> (Vec<BondPanel>, Calendar, BTreeMap<String, BondSentiment>) {
        let start = NaiveDate::from_ymd_opt(2022, 1, 1).unwrap();
        let cal = build_calendar(start, start + chrono::Duration::days(k as i64 - 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..n_bonds).map(|i| format!("B{i}")).collect();
        let mut alpha = SentimentMatrix::zeros(MatrixAxis::Alpha, ids.clone(), cal).unwrap();
        let meso = SentimentMatrix::zeros(MatrixAxis::Meso, ids.clone(), cal).unwrap();
        let panels = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let sent: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for (d, v) in sent.iter().enumerate() {
                    alpha.set(i, d, *v);
                }
                BondPanel {
                    bond_id: id.clone(),
                    industry_ids: vec!["I".into()],
                    dates: cal.days().collect(),
                    features: (0..k).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect(),
                    credit_spread: (0..k).map(|d| 100.0 + 5.0 * sent[d.saturating_sub(2)]).collect(),
                }
            })
            .collect();
        let comp = build_composite(&alpha, &meso, &ids, &WaveletSpec::default()).unwrap();
        let s = bond_sentiment(&alpha, &meso, &comp, &WaveletSpec::default()).unwrap();
        (panels, cal, s)
    }

    fn quick() -> BacktestConfig {
        BacktestConfig {
            window: WindowSpec {
                t: 5,
                q: 2,
                include_spread: true,
            },
            forecaster: ForecasterConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                epochs: 3,
                batch_size: 16,
                lr: 1e-3,
                ..Default::default()
            },
            permutation: PermutationConfig {
                n_permutations: 200,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(
                BondSentiment {
                    micro: vec![],
                    meso: vec![],
                    raw: vec![],
                    composite: vec![],
                    micro_smoothed: vec![],
                    meso_smoothed: vec![],
                }
                .columns(v)
                .len(),
                v.n_columns()
            );
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn widths_follow_variant() {
        let (panels, cal, s) = toy(10, 40, 1);
        let splits = split_bonds(&panels.iter().map(|p| p.bond_id.clone()).collect::<Vec<_>>(), (7, 1, 2), 0).unwrap();
        for v in Variant::ALL {
            let ds = build_datasets(&panels, &splits, Some(&s), &cal, v, &quick().window).unwrap();
            assert_eq!(ds.train[0].d, N_FEATURES + 1 + v.n_columns());
            assert_eq!(ds.test.len(), 2 * 34);
        }
        assert!(build_datasets(&panels, &splits, None, &cal, Variant::Composite, &quick().window).is_err());
    }

    #[test]
    fn backtest_reports_every_variant_on_shared_windows() {
        let (panels, cal, s) = toy(10, 60, 2);
        let out = run_backtest(&panels, Some(&s), &cal, &[Variant::Composite, Variant::Separate], &quick()).unwrap();
        assert_eq!(out.report.variants.len(), 2);
        for r in &out.runs {
            assert_eq!(r.predictions.len(), out.baseline.predictions.len());
            let rep = out.report.variants[&r.variant];
            let p = rep.p.unwrap();
            assert!((0.0..=1.0).contains(&p));
            assert!(rep.mae >= 0.0);
        }
        // deterministic
        let again = run_backtest(&panels, Some(&s), &cal, &[Variant::Composite, Variant::Separate], &quick()).unwrap();
        assert_eq!(again.report, out.report);
    }
}
