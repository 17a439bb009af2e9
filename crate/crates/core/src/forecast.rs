//! Rolling windows over bond panels, an attention-encoder spread forecaster
//! trained on RMSE, and MAE/MAPE evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Optimizer, ParamSet, RmsProp, RmsPropConfig, Tensor, Var};
use crate::corpus::{BondPanel, Calendar, N_FEATURES};
use crate::error::{Error, Result};
use crate::stats::{Predictor, ZScaler};

// Windows -------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowSpec {
    /// Window length in panel days.
    pub t: usize,
    /// Forecast offset after the last window day.
    pub q: usize,
    /// Add the past credit spread as a column after the panel features. Off by
    /// default so rows hold exactly the panel features plus sentiment.
    pub include_spread: bool,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            t: 21,
            q: 2,
            include_spread: false,
        }
    }
}

impl WindowSpec {
    /// Width of a window row with `extra` appended columns.
    pub fn width(&self, extra: usize) -> usize {
        N_FEATURES + usize::from(self.include_spread) + extra
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub bond_id: String,
    pub target_date: NaiveDate,
    /// Row-major `t x d`.
    pub window: Vec<f64>,
    pub t: usize,
    pub d: usize,
    pub target: f64,
}

/// Number of windows a series of length `k` yields.
pub fn window_count(k: usize, t: usize, q: usize) -> usize {
    (k + 1).saturating_sub(t + q)
}

/// One sample per start index with stride 1. `extra` columns must have one
/// value per panel day and are appended in order.
pub fn build_windows(panel: &BondPanel, spec: &WindowSpec, extra: &[&[f64]]) -> Result<Vec<WindowSample>> {
    if spec.t == 0 || spec.q == 0 {
        return Err(Error::Config("window length and offset must be at least 1".into()));
    }
    let k = panel.len();
    for col in extra {
        if col.len() != k {
            return Err(Error::DimMismatch {
                expected: k,
                got: col.len(),
            });
        }
    }
    let d = spec.width(extra.len());
    let n = window_count(k, spec.t, spec.q);
    let mut out = Vec::with_capacity(n);
    for start in 0..n {
        let mut window = Vec::with_capacity(spec.t * d);
        for day in start..start + spec.t {
            window.extend_from_slice(&panel.features[day]);
            if spec.include_spread {
                window.push(panel.credit_spread[day]);
            }
            window.extend(extra.iter().map(|c| c[day]));
        }
        let ti = start + spec.t - 1 + spec.q;
        let target = panel.credit_spread[ti];
        if !target.is_finite() || window.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "window for {} ending {}",
                panel.bond_id, panel.dates[start + spec.t - 1]
            )));
        }
        out.push(WindowSample {
            bond_id: panel.bond_id.clone(),
            target_date: panel.dates[ti],
            window,
            t: spec.t,
            d,
            target,
        });
    }
    Ok(out)
}

/// Picks calendar-indexed values at the panel's dates.
pub fn align_to_panel(series: &[f64], calendar: &Calendar, panel: &BondPanel) -> Result<Vec<f64>> {
    if series.len() != calendar.len() {
        return Err(Error::DimMismatch {
            expected: calendar.len(),
            got: series.len(),
        });
    }
    panel
        .dates
        .iter()
        .map(|d| calendar.index(*d).map(|k| series[k]))
        .collect()
}

/// Fits column statistics on every row of the given windows.
pub fn fit_window_scaler(samples: &[WindowSample]) -> Result<ZScaler> {
    let d = samples.first().ok_or(Error::Empty("training windows"))?.d;
    ZScaler::fit_rows(samples.iter().flat_map(|s| s.window.chunks(d)), d)
}

pub fn scale_windows(samples: &mut [WindowSample], scaler: &ZScaler) -> Result<()> {
    for s in samples {
        if s.d != scaler.cols() {
            return Err(Error::DimMismatch {
                expected: scaler.cols(),
                got: s.d,
            });
        }
        scaler.apply_flat(&mut s.window);
    }
    Ok(())
}

// Model -------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Last time step after the encoder stack.
    #[default]
    Last,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub pooling: Pooling,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Train on z-scored targets and map predictions back.
    pub standardize_target: bool,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            d_model: 64,
            n_layers: 5,
            n_heads: 4,
            d_ff: 128,
            pooling: Pooling::Last,
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-7,
            momentum: 0.9,
            alpha: 0.99,
            seed: 0,
            standardize_target: true,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.batch_size == 0 {
            return Err(Error::Config("d_ff and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;
const PER_LAYER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecasterModel {
    pub cfg: ForecasterConfig,
    pub t: usize,
    pub d_in: usize,
    pub params: ParamSet,
    /// Input scaling fitted on training windows, if any.
    pub scaler: Option<ZScaler>,
    pub y_mean: f64,
    pub y_std: f64,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_rmse: f64,
    pub valid_rmse: Option<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-b..b)).collect()).expect("shape")
}

fn positional(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let k = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(k as f64 / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl ForecasterModel {
    /// Fresh weights. The input projection draws from its own stream so that
    /// models differing only in input width share every other weight.
    pub fn init(cfg: &ForecasterConfig, t: usize, d_in: usize) -> Result<Self> {
        cfg.validate()?;
        let dm = cfg.d_model;
        let mut rng_in = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a2b_3c4d);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamSet::default();
        p.push("in.w", uniform(&mut rng_in, d_in, d_in, dm));
        p.push("in.b", uniform(&mut rng, d_in, 1, dm));
        for l in 0..cfg.n_layers {
            for name in ["q", "k", "v", "o"] {
                p.push(format!("l{l}.{name}.w"), uniform(&mut rng, dm, dm, dm));
                p.push(format!("l{l}.{name}.b"), uniform(&mut rng, dm, 1, dm));
            }
            p.push(format!("l{l}.ln1.g"), Tensor::full(1, dm, 1.0));
            p.push(format!("l{l}.ln1.b"), Tensor::zeros(1, dm));
            p.push(format!("l{l}.ff1.w"), uniform(&mut rng, dm, dm, cfg.d_ff));
            p.push(format!("l{l}.ff1.b"), uniform(&mut rng, dm, 1, cfg.d_ff));
            p.push(format!("l{l}.ff2.w"), uniform(&mut rng, cfg.d_ff, cfg.d_ff, dm));
            p.push(format!("l{l}.ff2.b"), uniform(&mut rng, cfg.d_ff, 1, dm));
            p.push(format!("l{l}.ln2.g"), Tensor::full(1, dm, 1.0));
            p.push(format!("l{l}.ln2.b"), Tensor::zeros(1, dm));
        }
        p.push("head1.w", uniform(&mut rng, dm, dm, dm));
        p.push("head1.b", uniform(&mut rng, dm, 1, dm));
        p.push("head2.w", uniform(&mut rng, dm, dm, 1));
        p.push("head2.b", uniform(&mut rng, dm, 1, 1));
        Ok(ForecasterModel {
            cfg: cfg.clone(),
            t,
            d_in,
            params: p,
            scaler: None,
            y_mean: 0.0,
            y_std: 1.0,
            log: Vec::new(),
        })
    }

    /// Builds the batch forward pass; `x` is `(batch * t) x d_in`. Returns
    /// `batch x 1` outputs on the standardized target scale.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, batch: usize) -> Var {
        forward(&self.cfg, self.t, g, p, x, batch)
    }

    fn check_window(&self, s: &WindowSample) -> Result<()> {
        if s.t != self.t || s.d != self.d_in || s.window.len() != self.t * self.d_in {
            return Err(Error::Shape {
                op: "predict",
                detail: format!(
                    "window {}x{} (len {}) for a {}x{} model",
                    s.t,
                    s.d,
                    s.window.len(),
                    self.t,
                    self.d_in
                ),
            });
        }
        Ok(())
    }

    /// Predictions on the original target scale. Windows are scaled with the
    /// model's fitted scaler when present.
    pub fn predict_raw(&self, windows: &[&[f64]]) -> Result<Vec<f64>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * self.t * self.d_in);
            for w in chunk {
                if w.len() != self.t * self.d_in {
                    return Err(Error::DimMismatch {
                        expected: self.t * self.d_in,
                        got: w.len(),
                    });
                }
                let start = data.len();
                data.extend_from_slice(w);
                if let Some(sc) = &self.scaler {
                    sc.apply_flat(&mut data[start..]);
                }
            }
            let mut g = Graph::new();
            let p: Vec<Var> = self.params.tensors.iter().map(|t| g.constant(t.clone())).collect();
            let x = g.constant(Tensor::new(chunk.len() * self.t, self.d_in, data)?);
            let y = self.forward(&mut g, &p, x, chunk.len());
            for v in g.value(y).data() {
                let v = v * self.y_std + self.y_mean;
                if !v.is_finite() {
                    return Err(Error::NonFinite("forecaster output".into()));
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, sample: &WindowSample) -> Result<f64> {
        self.check_window(sample)?;
        Ok(self.predict_raw(&[&sample.window])?[0])
    }

    pub fn predict_batch(&self, samples: &[WindowSample]) -> Result<Vec<f64>> {
        for s in samples {
            self.check_window(s)?;
        }
        let w: Vec<&[f64]> = samples.iter().map(|s| s.window.as_slice()).collect();
        self.predict_raw(&w)
    }

    pub fn to_json(&self) -> serde_json::Value {
        self.params.to_manifest(
            "forecaster",
            serde_json::json!({
                "cfg": self.cfg,
                "t": self.t,
                "d_in": self.d_in,
                "scaler": self.scaler,
                "y_mean": self.y_mean,
                "y_std": self.y_std,
                "log": self.log,
            }),
        )
    }

    pub fn from_json(v: serde_json::Value) -> Result<Self> {
        let (params, meta) = ParamSet::from_manifest(v, "forecaster")?;
        let cfg: ForecasterConfig = serde_json::from_value(meta["cfg"].clone())?;
        let t = meta["t"].as_u64().unwrap_or(0) as usize;
        let d_in = meta["d_in"].as_u64().unwrap_or(0) as usize;
        let fresh = Self::init(&cfg, t, d_in)?;
        let want: Vec<[usize; 2]> = fresh.params.tensors.iter().map(Tensor::shape).collect();
        let got: Vec<[usize; 2]> = params.tensors.iter().map(Tensor::shape).collect();
        if want != got || fresh.params.names != params.names {
            return Err(Error::Invalid("forecaster manifest does not match its config".into()));
        }
        Ok(ForecasterModel {
            cfg,
            t,
            d_in,
            params,
            scaler: serde_json::from_value(meta["scaler"].clone())?,
            y_mean: meta["y_mean"].as_f64().unwrap_or(0.0),
            y_std: meta["y_std"].as_f64().unwrap_or(1.0),
            log: serde_json::from_value(meta["log"].clone()).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), &self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_json(v)
    }
}

impl Predictor for ForecasterModel {
    fn predict_windows(&self, windows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let w: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
        self.predict_raw(&w)
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn add_norm(g: &mut Graph, x: Var, y: Var, gamma: Var, beta: Var) -> Var {
    let s = g.add(x, y);
    let n = g.layer_norm(s, LN_EPS);
    let n = g.mul_row(n, gamma);
    g.add_row(n, beta)
}

/// Multi-head self-attention applied to each sample's block of `t` rows.
fn attention(g: &mut Graph, q: Var, k: Var, v: Var, batch: usize, t: usize, heads: usize) -> Var {
    let dm = g.value(q).cols();
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut blocks = Vec::with_capacity(batch);
    for b in 0..batch {
        let (qb, kb, vb) = (
            g.slice_rows(q, b * t, t),
            g.slice_rows(k, b * t, t),
            g.slice_rows(v, b * t, t),
        );
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(qb, h * dh, dh);
            let kh = g.slice_cols(kb, h * dh, dh);
            let vh = g.slice_cols(vb, h * dh, dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh));
        }
        blocks.push(if heads == 1 { outs[0] } else { g.concat_cols(&outs) });
    }
    if batch == 1 {
        blocks[0]
    } else {
        g.concat_rows(&blocks)
    }
}

fn forward(cfg: &ForecasterConfig, t: usize, g: &mut Graph, p: &[Var], x: Var, batch: usize) -> Var {
    let dm = cfg.d_model;
    let h = linear(g, x, p[0], p[1]);
    let pe = positional(t, dm);
    let mut tiled = Vec::with_capacity(batch * t * dm);
    for _ in 0..batch {
        tiled.extend_from_slice(&pe);
    }
    let pe = g.constant(Tensor::new(batch * t, dm, tiled).expect("shape"));
    let mut h = g.add(h, pe);
    for l in 0..cfg.n_layers {
        let o = 2 + l * PER_LAYER;
        let q = linear(g, h, p[o], p[o + 1]);
        let k = linear(g, h, p[o + 2], p[o + 3]);
        let v = linear(g, h, p[o + 4], p[o + 5]);
        let a = attention(g, q, k, v, batch, t, cfg.n_heads);
        let a = linear(g, a, p[o + 6], p[o + 7]);
        h = add_norm(g, h, a, p[o + 8], p[o + 9]);
        let f = linear(g, h, p[o + 10], p[o + 11]);
        let f = g.relu(f);
        let f = linear(g, f, p[o + 12], p[o + 13]);
        h = add_norm(g, h, f, p[o + 14], p[o + 15]);
    }
    let pooled: Vec<Var> = (0..batch)
        .map(|b| match cfg.pooling {
            Pooling::Last => g.select_row(h, b * t + t - 1),
            Pooling::Mean => {
                let blk = g.slice_rows(h, b * t, t);
                g.mean_rows(blk)
            }
        })
        .collect();
    let z = if batch == 1 { pooled[0] } else { g.concat_rows(&pooled) };
    let o = 2 + cfg.n_layers * PER_LAYER;
    let z = linear(g, z, p[o], p[o + 1]);
    let z = g.relu(z);
    linear(g, z, p[o + 2], p[o + 3])
}

/// Attention weights of the first layer for one (already scaled) window,
/// one `t x t` matrix per head.
pub fn first_layer_attention(model: &ForecasterModel, window: &[f64]) -> Result<Vec<Tensor>> {
    let (t, dm, heads) = (model.t, model.cfg.d_model, model.cfg.n_heads);
    if model.cfg.n_layers == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let p: Vec<Var> = model.params.tensors.iter().map(|x| g.constant(x.clone())).collect();
    let x = g.constant(Tensor::new(t, model.d_in, window.to_vec())?);
    let h = linear(&mut g, x, p[0], p[1]);
    let pe = g.constant(Tensor::new(t, dm, positional(t, dm))?);
    let h = g.add(h, pe);
    let q = linear(&mut g, h, p[2], p[3]);
    let k = linear(&mut g, h, p[4], p[5]);
    let dh = dm / heads;
    let mut out = Vec::new();
    for hd in 0..heads {
        let qh = g.slice_cols(q, hd * dh, dh);
        let kh = g.slice_cols(k, hd * dh, dh);
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt);
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.softmax(s);
        out.push(g.value(a).clone());
    }
    Ok(out)
}

fn batch_tensors(samples: &[&WindowSample], y_mean: f64, y_std: f64) -> (Tensor, Tensor) {
    let (t, d) = (samples[0].t, samples[0].d);
    let mut xs = Vec::with_capacity(samples.len() * t * d);
    let mut ys = Vec::with_capacity(samples.len());
    for s in samples {
        xs.extend_from_slice(&s.window);
        ys.push((s.target - y_mean) / y_std);
    }
    (
        Tensor::new(samples.len() * t, d, xs).expect("shape"),
        Tensor::new(samples.len(), 1, ys).expect("shape"),
    )
}

/// Batch RMSE; a small floor keeps the square root differentiable at zero.
fn rmse_loss(g: &mut Graph, pred: Var, y: Var) -> Var {
    let m = g.mse(pred, y);
    let floor = g.constant(Tensor::scalar(1e-12));
    let m = g.add(m, floor);
    g.sqrt(m)
}

fn dataset_rmse(model: &ForecasterModel, samples: &[WindowSample]) -> Result<f64> {
    let w: Vec<&[f64]> = samples.iter().map(|s| s.window.as_slice()).collect();
    // samples are already scaled; bypass the model's scaler
    let unscaled = ForecasterModel {
        scaler: None,
        ..model.clone()
    };
    let preds = unscaled.predict_raw(&w)?;
    let se: f64 = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| ((p - s.target) / model.y_std).powi(2))
        .sum();
    Ok((se / samples.len() as f64).sqrt())
}

/// Trains on windows already on the model's input scale (see
/// [`prepare_training`]). Logged losses are on the standardized target scale.
pub fn train_forecaster(
    train: &[WindowSample],
    valid: &[WindowSample],
    cfg: &ForecasterConfig,
) -> Result<ForecasterModel> {
    let first = train.first().ok_or(Error::Empty("training windows"))?;
    let (t, d) = (first.t, first.d);
    if let Some(s) = train.iter().chain(valid).find(|s| s.t != t || s.d != d) {
        return Err(Error::Shape {
            op: "train_forecaster",
            detail: format!("window {}x{} among {t}x{d}", s.t, s.d),
        });
    }
    let mut model = ForecasterModel::init(cfg, t, d)?;
    if cfg.standardize_target {
        let n = train.len() as f64;
        let mean = train.iter().map(|s| s.target).sum::<f64>() / n;
        let var = train.iter().map(|s| (s.target - mean).powi(2)).sum::<f64>() / n;
        model.y_mean = mean;
        model.y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let mut opt = RmsProp::new(RmsPropConfig {
        lr: cfg.lr,
        alpha: cfg.alpha,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba7c_4e55);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut se = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = batch_tensors(&batch, model.y_mean, model.y_std);
            let mut g = Graph::new();
            let p = model.params.attach(&mut g);
            let xv = g.constant(x);
            let yv = g.constant(y);
            let pred = model.forward(&mut g, &p, xv, batch.len());
            let loss = rmse_loss(&mut g, pred, yv);
            let l = g.value(loss).item();
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {bi}")));
            }
            se += l * l * batch.len() as f64;
            g.backward(loss)?;
            let grads = model.params.grads(&g, &p);
            opt.step(&mut model.params.tensors, &grads)
                .map_err(|e| Error::NonFinite(format!("gradient at epoch {epoch}, batch {bi}: {e}")))?;
        }
        let train_rmse = (se / train.len() as f64).sqrt();
        let valid_rmse = if valid.is_empty() {
            None
        } else {
            Some(dataset_rmse(&model, valid)?)
        };
        log::debug!("epoch {epoch}: train {train_rmse:.5} valid {valid_rmse:?}");
        model.log.push(EpochLog {
            epoch,
            train_rmse,
            valid_rmse,
        });
    }
    Ok(model)
}

/// Fits the input scaler on `train`, scales all three sets in place and
/// returns the scaler for attaching to the trained model.
pub fn prepare_training(
    train: &mut [WindowSample],
    valid: &mut [WindowSample],
    test: &mut [WindowSample],
) -> Result<ZScaler> {
    let scaler = fit_window_scaler(train)?;
    scale_windows(train, &scaler)?;
    scale_windows(valid, &scaler)?;
    scale_windows(test, &scaler)?;
    Ok(scaler)
}

// Evaluation ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    /// Fraction, not percent.
    pub mape: f64,
    pub n: usize,
}

pub fn evaluate(preds: &[f64], targets: &[f64]) -> Result<Metrics> {
    if preds.len() != targets.len() {
        return Err(Error::DimMismatch {
            expected: targets.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let zeros: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == 0.0)
        .map(|(i, _)| i)
        .collect();
    if !zeros.is_empty() {
        return Err(Error::ZeroTarget(zeros));
    }
    let n = preds.len() as f64;
    let mae = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mape = preds.iter().zip(targets).map(|(p, t)| ((p - t) / t).abs()).sum::<f64>() / n;
    Ok(Metrics {
        mae,
        mape,
        n: preds.len(),
    })
}

/// Metrics per bond, then averaged across bonds.
pub fn evaluate_per_bond(samples: &[WindowSample], preds: &[f64]) -> Result<Metrics> {
    if samples.len() != preds.len() {
        return Err(Error::DimMismatch {
            expected: samples.len(),
            got: preds.len(),
        });
    }
    let mut by_bond: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (s, p) in samples.iter().zip(preds) {
        let e = by_bond.entry(&s.bond_id).or_default();
        e.0.push(*p);
        e.1.push(s.target);
    }
    let per: Vec<Metrics> = by_bond
        .values()
        .map(|(p, t)| evaluate(p, t))
        .collect::<Result<_>>()?;
    if per.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let k = per.len() as f64;
    Ok(Metrics {
        mae: per.iter().map(|m| m.mae).sum::<f64>() / k,
        mape: per.iter().map(|m| m.mape).sum::<f64>() / k,
        n: samples.len(),
    })
}

/// `(base - with) / base * 100` for MAE and MAPE.
pub fn delta_report(base: &Metrics, with: &Metrics) -> Result<(f64, f64)> {
    if base.mae == 0.0 || base.mape == 0.0 {
        return Err(Error::Invalid("baseline metric is zero".into()));
    }
    Ok((
        (base.mae - with.mae) / base.mae * 100.0,
        (base.mape - with.mape) / base.mape * 100.0,
    ))
}

/// Report row mirroring the comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub mape: f64,
    pub p: Option<f64>,
    pub delta_mae_pct: Option<f64>,
    pub delta_mape_pct: Option<f64>,
    pub n_test: usize,
}

impl EvalReport {
    pub fn baseline(m: &Metrics) -> Self {
        EvalReport {
            mae: m.mae,
            mape: m.mape,
            p: None,
            delta_mae_pct: None,
            delta_mape_pct: None,
            n_test: m.n,
        }
    }

    pub fn compared(base: &Metrics, with: &Metrics, p: f64) -> Result<Self> {
        let (dm, dp) = delta_report(base, with)?;
        Ok(EvalReport {
            mae: with.mae,
            mape: with.mape,
            p: Some(p),
            delta_mae_pct: Some(dm),
            delta_mape_pct: Some(dp),
            n_test: with.n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub bond_id: String,
    pub target_date: NaiveDate,
    pub y_true: f64,
    pub y_pred: f64,
}

pub fn prediction_rows(samples: &[WindowSample], preds: &[f64]) -> Vec<PredictionRow> {
    samples
        .iter()
        .zip(preds)
        .map(|(s, p)| PredictionRow {
            bond_id: s.bond_id.clone(),
            target_date: s.target_date,
            y_true: s.target,
            y_pred: *p,
        })
        .collect()
}

pub fn write_predictions(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn panel(k: usize, seed: u64) -> BondPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        BondPanel {
            bond_id: format!("B{seed}"),
            industry_ids: vec!["i".into()],
            dates: (0..k).map(|i| start + chrono::Duration::days(i as i64)).collect(),
            features: (0..k)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
                .collect(),
            credit_spread: (0..k).map(|_| rng.gen_range(1.0..3.0)).collect(),
        }
    }

    #[test]
    fn window_counts() {
        let spec = WindowSpec {
            t: 21,
            q: 2,
            include_spread: false,
        };
        assert_eq!(build_windows(&panel(25, 1), &spec, &[]).unwrap().len(), 3);
        assert_eq!(build_windows(&panel(23, 1), &spec, &[]).unwrap().len(), 1);
        assert!(build_windows(&panel(22, 1), &spec, &[]).unwrap().is_empty());
        for k in 0..40 {
            for t in 1..8 {
                for q in 1..4 {
                    let oracle = (0..k).filter(|s| s + t - 1 + q < k).count();
                    assert_eq!(window_count(k, t, q), oracle);
                }
            }
        }
    }

    #[test]
    fn window_contents_and_sentiment_column() {
        let p = panel(30, 2);
        let spec = WindowSpec {
            t: 5,
            q: 2,
            include_spread: false,
        };
        let sent: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let a = build_windows(&p, &spec, &[]).unwrap();
        let b = build_windows(&p, &spec, &[&sent]).unwrap();
        assert_eq!((a[0].d, b[0].d), (45, 46));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.target, y.target);
            for r in 0..5 {
                assert_eq!(x.window[r * 45..(r + 1) * 45], y.window[r * 46..r * 46 + 45]);
            }
        }
        let s = &b[3];
        assert_eq!(s.window[4 * 46 + 45], 7.0);
        assert_eq!(s.target, p.credit_spread[3 + 4 + 2]);
        assert_eq!(s.target_date, p.dates[9]);
        let with_spread = build_windows(
            &p,
            &WindowSpec {
                include_spread: true,
                ..Default::default()
            },
            &[],
        )
        .unwrap();
        assert_eq!(with_spread[0].d, 46);
        assert_eq!(with_spread[0].window[20 * 46 + 45], p.credit_spread[20]);
    }

    fn toy_cfg() -> ForecasterConfig {
        ForecasterConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            ..Default::default()
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = toy_cfg();
        let model = ForecasterModel::init(&cfg, 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new(2 * 5, 3, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::new(2, 1, vec![0.3, -0.5]).unwrap();
        for pooling in [Pooling::Last, Pooling::Mean] {
            let m = ForecasterModel {
                cfg: ForecasterConfig { pooling, ..cfg.clone() },
                ..model.clone()
            };
            let res = grad_check(&m.params.tensors, 1e-5, |g, p| {
                let xv = g.constant(x.clone());
                let yv = g.constant(y.clone());
                let pred = m.forward(g, p, xv, 2);
                rmse_loss(g, pred, yv)
            })
            .unwrap();
            assert!(res.max_rel_err < 1e-3, "{pooling:?}: {res:?}");
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let model = ForecasterModel::init(&toy_cfg(), 6, 4).unwrap();
        let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        for a in first_layer_attention(&model, &w).unwrap() {
            for r in 0..6 {
                let s: f64 = a.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn predict_is_pure_and_batch_matches_single() {
        let model = ForecasterModel::init(&toy_cfg(), 21, 45).unwrap();
        let samples = build_windows(&panel(40, 3), &WindowSpec::default(), &[]).unwrap();
        let batch = model.predict_batch(&samples).unwrap();
        for (s, b) in samples.iter().zip(&batch) {
            let single = model.predict(s).unwrap();
            assert!((single - b).abs() < 1e-12);
            assert_eq!(single, model.predict(s).unwrap());
        }
        let zero = WindowSample {
            window: vec![0.0; 21 * 45],
            ..samples[0].clone()
        };
        assert!(model.predict(&zero).unwrap().is_finite());
        let bad = WindowSample {
            d: 46,
            window: vec![0.0; 21 * 46],
            ..samples[0].clone()
        };
        assert!(model.predict(&bad).is_err());
    }

    #[test]
    fn default_hyperparameters() {
        let c = ForecasterConfig::default();
        assert_eq!((c.n_layers, c.d_model, c.epochs), (5, 64, 50));
        assert_eq!((c.lr, c.weight_decay, c.momentum), (1e-4, 1e-7, 0.9));
        assert_eq!(WindowSpec::default().t, 21);
    }

    fn small_train_cfg(seed: u64) -> ForecasterConfig {
        ForecasterConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let mut samples = build_windows(&panel(80, 5), &WindowSpec::default(), &[]).unwrap();
        for s in &mut samples {
            s.target = 2.5;
        }
        let scaler = fit_window_scaler(&samples).unwrap();
        scale_windows(&mut samples, &scaler).unwrap();
        let cfg = ForecasterConfig {
            standardize_target: false,
            lr: 1e-3,
            epochs: 40,
            ..small_train_cfg(1)
        };
        let model = train_forecaster(&samples, &[], &cfg).unwrap();
        for p in model.predict_batch(&samples).unwrap() {
            assert!((p - 2.5).abs() < 0.05 * 2.5, "{p}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let samples = build_windows(&panel(40, 6), &WindowSpec::default(), &[]).unwrap();
        let cfg = ForecasterConfig {
            epochs: 2,
            ..small_train_cfg(3)
        };
        let a = train_forecaster(&samples, &samples[..5], &cfg).unwrap();
        let b = train_forecaster(&samples, &samples[..5], &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
    }

    #[test]
    fn learnable_mapping_loss_drops() {
        // target = linear function of the window mean of the first feature
        let mut ok = 0;
        for seed in 0..5 {
            let mut samples = build_windows(&panel(400, 10 + seed), &WindowSpec::default(), &[]).unwrap();
            for s in &mut samples {
                let m: f64 = (0..s.t).map(|r| s.window[r * s.d]).sum::<f64>() / s.t as f64;
                s.target = 5.0 + 3.0 * m;
            }
            let cfg = ForecasterConfig {
                lr: 3e-4,
                epochs: 40,
                ..small_train_cfg(seed)
            };
            let model = train_forecaster(&samples, &[], &cfg).unwrap();
            // standardized targets: predicting the mean scores 1.0
            let last = model.log.last().unwrap().train_rmse;
            if last < 0.2 {
                ok += 1;
            }
        }
        assert!(ok >= 4, "{ok}/5");
    }

    #[test]
    fn manifest_round_trip() {
        let mut model = ForecasterModel::init(&toy_cfg(), 5, 3).unwrap();
        model.y_mean = 1.5;
        let back = ForecasterModel::from_json(model.to_json()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn metric_examples() {
        let m = evaluate(&[1.1, 1.8], &[1.0, 2.0]).unwrap();
        assert!((m.mae - 0.15).abs() < 1e-12 && (m.mape - 0.10).abs() < 1e-12);
        let m = evaluate(&[0.0], &[1.0]).unwrap();
        assert_eq!((m.mae, m.mape), (1.0, 1.0));
        assert_eq!(evaluate(&[1.0, 2.0], &[1.0, 2.0]).unwrap().mae, 0.0);
        assert!(matches!(evaluate(&[1.0, 1.0, 1.0], &[1.0, 0.0, 0.0]), Err(Error::ZeroTarget(v)) if v == vec![1, 2]));
    }

    #[test]
    fn reference_deltas() {
        let base = Metrics { mae: 8.9683, mape: 8.0033, n: 1 };
        let with = Metrics { mae: 8.6765, mape: 7.1257, n: 1 };
        let (dm, dp) = delta_report(&base, &with).unwrap();
        assert!((dm - 3.2539).abs() < 1e-3);
        assert!((dp - 10.9658).abs() < 1e-3);
        assert_eq!(delta_report(&base, &base).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn per_bond_averaging() {
        let mk = |b: &str, t: f64| WindowSample {
            bond_id: b.into(),
            target_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            window: vec![],
            t: 0,
            d: 0,
            target: t,
        };
        let s = vec![mk("a", 1.0), mk("a", 1.0), mk("b", 2.0)];
        let m = evaluate_per_bond(&s, &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(m.mae, 0.5);
    }
}
