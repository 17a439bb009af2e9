//! Command-line front end. Every subcommand reads a TOML run configuration,
//! applies environment and flag overrides, writes its artifacts into the
//! output directory and records a run manifest next to them.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::absa::{write_scores, AbsaHead, HeadConfig};
use crate::backtest::{bond_sentiment, build_datasets, run_backtest, BacktestConfig, BacktestReport, Variant};
use crate::composite::{build_composite, read_composite_csv, write_composite_csv, CompositeSeries};
use crate::corpus::{ingest_texts, load_splits, split_bonds, write_splits, Stream, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::forecast::{delta_report, read_predictions, write_predictions, ForecasterModel, Metrics};
use crate::matrix::{MatrixAxis, SentimentMatrix};
use crate::meso::MesoConfig;
use crate::pipeline::{score_meso, score_micro, train_absa, SentimentInputs};
use crate::stats::{permutation_test, rank_importances, write_importance_csv, PermutationConfig};
use crate::synth::{generate, SynthConfig, SynthPaths};
use crate::wavelet::{SmoothMode, WaveletSpec};

/// Prefix of environment variables that override configuration keys, with
/// `__` separating nesting levels: `SENTISPREAD__BACKTEST__FORECASTER__EPOCHS=3`.
pub const ENV_PREFIX: &str = "SENTISPREAD__";

#[derive(Debug, Parser)]
#[command(name = "sentispread", version, about = "Composite bond sentiment and credit-spread backtesting")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, env = "SENTISPREAD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seeds every random stream of the run.
    #[arg(long, global = true, env = "SENTISPREAD_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "SENTISPREAD_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Input files in the layout written by `synth`; defaults to the output
    /// directory.
    #[arg(long, global = true, env = "SENTISPREAD_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and bond panel.
    Synth(SynthArgs),
    /// Validate every input file and write the bond split.
    Ingest,
    /// Train the firm-level sentiment head on soft-labeled texts.
    TrainAbsa,
    /// Score firm-level texts and build the bond x day matrix.
    ScoreMicro {
        /// Head weights; defaults to `head.json` in the output directory.
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// Map industry-level texts through the knowledge graph.
    ScoreMeso,
    /// Sum and smooth firm and industry sentiment per bond.
    Compose {
        /// `full_sample` or `causal`.
        #[arg(long)]
        mode: Option<SmoothMode>,
    },
    /// Train forecasters with and without sentiment and compare them.
    Backtest(BacktestArgs),
    /// Paired permutation test on two prediction files.
    PermTest(PermTestArgs),
    /// Permutation importance of every window column.
    Importance(ImportanceArgs),
    /// Comparison tables and optional SVG plots.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_bonds: Option<usize>,
    #[arg(long)]
    pub n_days: Option<usize>,
    #[arg(long)]
    pub effect_size: Option<f64>,
    #[arg(long)]
    pub effect_lag: Option<usize>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct BacktestArgs {
    /// Include the composite variant.
    #[arg(long)]
    pub with_sentiment: bool,
    /// Kept for symmetry; the baseline always runs.
    #[arg(long)]
    pub without_sentiment: bool,
    /// Add firm and industry sentiment as two columns.
    #[arg(long)]
    pub separate_features: bool,
    /// Variants to compare against the baseline (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    /// Causal smoothing instead of full-sample.
    #[arg(long)]
    pub causal: bool,
    /// Use the sentiment artifacts already in the output directory.
    #[arg(long)]
    pub reuse: bool,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PermTestArgs {
    /// Predictions of the first model.
    #[arg(long)]
    pub a: PathBuf,
    /// Predictions of the second model.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub n_permutations: Option<usize>,
    #[arg(long)]
    pub block_len: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ImportanceArgs {
    #[arg(long, default_value = "composite")]
    pub variant: Variant,
    /// Model file; defaults to `model_<variant>.json` in the output directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ReportArgs {
    /// Backtest reports or comparison tables (JSON); defaults to
    /// `report.json` in the output directory.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    /// Also write SVG charts of composite sentiment and spreads.
    #[arg(long)]
    pub plots: bool,
    /// Bonds to plot; defaults to the first three.
    #[arg(long, value_delimiter = ',')]
    pub bonds: Vec<String>,
}

// Configuration -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub head: HeadConfig,
    pub meso: MesoConfig,
    pub wavelet: WaveletSpec,
    pub backtest: BacktestConfig,
    pub variants: Vec<Variant>,
    pub importance_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data_dir: None,
            synth: SynthConfig::default(),
            head: HeadConfig::default(),
            meso: MesoConfig::default(),
            wavelet: WaveletSpec::default(),
            backtest: BacktestConfig::default(),
            variants: vec![Variant::Composite],
            importance_repeats: 5,
        }
    }
}

fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path` (already lowercased segments) inside a TOML table.
fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table key {seg:?}")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// File, then `SENTISPREAD__*` variables, then `overrides`.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut vars: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (k, v) in vars {
            let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
            set_path(&mut table, &path, env_value(&v))?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Applies the common flags and fans the seed out to every component.
    pub fn with_common(mut self, c: &Common) -> Self {
        if let Some(s) = c.seed {
            self.seed = s;
        }
        if let Some(d) = &c.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(d) = &c.data_dir {
            self.data_dir = Some(d.clone());
        }
        self.synth.seed = self.seed;
        self.head.seed = self.seed;
        self.backtest.forecaster.seed = self.seed;
        self.backtest.split_seed = self.seed;
        self.backtest.permutation.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.wavelet.validate()?;
        self.backtest.forecaster.validate()?;
        if self.backtest.window.t == 0 || self.backtest.window.q == 0 {
            return Err(Error::Config("window length and horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> &Path {
        self.data_dir.as_deref().unwrap_or(&self.out_dir)
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

// Run bookkeeping ---------------------------------------------------------------------

/// Exclusive claim on an output directory for the lifetime of a run.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".sentispread.lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Invalid(format!(
                    "output directory is locked by another run (remove {} if stale)",
                    path.display()
                )),
                _ => e.into(),
            })?;
        Ok(OutDirLock { path })
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// File name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn write_manifest(cfg: &RunConfig, command: &str, outputs: &[PathBuf]) -> Result<PathBuf> {
    let m = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        outputs: outputs
            .iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, file_hash(p)?))
            })
            .collect::<Result<_>>()?,
    };
    let path = cfg.out_dir.join(format!("manifest_{command}.json"));
    write_json(&path, &m)?;
    Ok(path)
}

// Stages ------------------------------------------------------------------------------

/// Artifact locations inside the output directory.
pub struct OutPaths {
    pub dir: PathBuf,
}

impl OutPaths {
    pub fn new(dir: &Path) -> Self {
        OutPaths { dir: dir.to_path_buf() }
    }
    pub fn splits(&self) -> PathBuf {
        self.dir.join("splits.csv")
    }
    pub fn ingest_summary(&self) -> PathBuf {
        self.dir.join("ingest_summary.json")
    }
    pub fn head(&self) -> PathBuf {
        self.dir.join("head.json")
    }
    pub fn micro_scores(&self) -> PathBuf {
        self.dir.join("micro_scores.jsonl")
    }
    pub fn alpha(&self) -> PathBuf {
        self.dir.join("alpha.csv")
    }
    pub fn beta_raw(&self) -> PathBuf {
        self.dir.join("beta_raw.csv")
    }
    pub fn beta(&self) -> PathBuf {
        self.dir.join("beta.csv")
    }
    pub fn meso(&self) -> PathBuf {
        self.dir.join("meso.csv")
    }
    pub fn meso_summary(&self) -> PathBuf {
        self.dir.join("meso_summary.json")
    }
    pub fn composite(&self, mode: SmoothMode) -> PathBuf {
        self.dir.join(match mode {
            SmoothMode::FullSample => "composite_full_sample.csv",
            SmoothMode::Causal => "composite_causal.csv",
        })
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn predictions(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("predictions_{v}.csv"))
    }
    pub fn model(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("model_{v}.json"))
    }
    pub fn importance(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("importance_{v}.csv"))
    }
    pub fn perm_test(&self) -> PathBuf {
        self.dir.join("perm_test.json")
    }
    pub fn report_md(&self) -> PathBuf {
        self.dir.join("report.md")
    }
}

pub fn stage_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = generate(&cfg.synth)?;
    let p = data.write(&cfg.out_dir)?;
    Ok(vec![
        p.micro_texts,
        p.meso_texts,
        p.token_features,
        p.topic_polarities,
        p.topic_embeddings,
        p.text_embeddings,
        p.graph,
        p.panel,
        p.bond_industries,
        p.ground_truth,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub n_micro_texts: usize,
    pub n_labeled: usize,
    pub n_meso_texts: usize,
    pub n_bonds: usize,
    pub n_industries: usize,
    pub n_topics: usize,
    pub calendar_start: String,
    pub calendar_end: String,
    pub n_days: usize,
    pub split_sizes: (usize, usize, usize),
}

pub fn stage_ingest(cfg: &RunConfig, inputs: &SentimentInputs) -> Result<Vec<PathBuf>> {
    let out = OutPaths::new(&cfg.out_dir);
    let meso = ingest_texts(SynthPaths::in_dir(cfg.data_dir()).meso_texts, Stream::Meso, Some(&inputs.calendar))?;
    let splits = split_bonds(&inputs.bond_ids(), cfg.backtest.split_ratios, cfg.backtest.split_seed)?;
    write_splits(out.splits(), &splits)?;
    let summary = IngestSummary {
        n_micro_texts: inputs.micro_texts.len(),
        n_labeled: inputs.micro_texts.iter().filter(|r| r.soft_label.is_some()).count(),
        n_meso_texts: meso.len(),
        n_bonds: inputs.panels.len(),
        n_industries: inputs.graph.n_industries(),
        n_topics: inputs.graph.n_topics(),
        calendar_start: inputs.calendar.start().to_string(),
        calendar_end: inputs.calendar.end().to_string(),
        n_days: inputs.calendar.len(),
        split_sizes: splits.sizes(),
    };
    write_json(&out.ingest_summary(), &summary)?;
    Ok(vec![out.splits(), out.ingest_summary()])
}

pub fn stage_train_absa(cfg: &RunConfig, inputs: &SentimentInputs) -> Result<(AbsaHead, Vec<PathBuf>)> {
    let out = OutPaths::new(&cfg.out_dir);
    let head = train_absa(inputs, &cfg.head)?;
    head.save(out.head())?;
    Ok((head, vec![out.head()]))
}

pub fn stage_score_micro(cfg: &RunConfig, inputs: &SentimentInputs, head: &AbsaHead) -> Result<(SentimentMatrix, Vec<PathBuf>)> {
    let out = OutPaths::new(&cfg.out_dir);
    let (scores, alpha) = score_micro(inputs, head)?;
    write_scores(out.micro_scores(), &scores)?;
    alpha.write_csv(out.alpha())?;
    Ok((alpha, vec![out.micro_scores(), out.alpha()]))
}

pub fn stage_score_meso(cfg: &RunConfig, inputs: &SentimentInputs) -> Result<(SentimentMatrix, Vec<PathBuf>)> {
    let out = OutPaths::new(&cfg.out_dir);
    let m = score_meso(inputs, &cfg.meso)?;
    m.beta_raw.write_csv(out.beta_raw())?;
    m.beta.matrix.write_csv(out.beta())?;
    m.bonds.write_csv(out.meso())?;
    write_json(
        &out.meso_summary(),
        &serde_json::json!({ "zero_variance_industries": m.beta.zero_variance }),
    )?;
    Ok((m.bonds, vec![out.beta_raw(), out.beta(), out.meso(), out.meso_summary()]))
}

pub fn stage_compose(
    cfg: &RunConfig,
    inputs: &SentimentInputs,
    alpha: &SentimentMatrix,
    meso: &SentimentMatrix,
) -> Result<(BTreeMap<String, CompositeSeries>, Vec<PathBuf>)> {
    let out = OutPaths::new(&cfg.out_dir);
    let comp = build_composite(alpha, meso, &inputs.bond_ids(), &cfg.wavelet)?;
    let path = out.composite(cfg.wavelet.mode);
    write_composite_csv(&path, &comp, &inputs.calendar)?;
    Ok((comp, vec![path]))
}

fn missing(path: &Path, stage: &str) -> Error {
    Error::Invalid(format!("{} not found; run `{stage}` first", path.display()))
}

fn read_matrix(path: &Path, axis: MatrixAxis, inputs: &SentimentInputs, stage: &str) -> Result<SentimentMatrix> {
    if !path.exists() {
        return Err(missing(path, stage));
    }
    SentimentMatrix::read_csv(path, axis, inputs.calendar)
}

fn load_stage_outputs(
    cfg: &RunConfig,
    inputs: &SentimentInputs,
) -> Result<(SentimentMatrix, SentimentMatrix, BTreeMap<String, CompositeSeries>)> {
    let out = OutPaths::new(&cfg.out_dir);
    let alpha = read_matrix(&out.alpha(), MatrixAxis::Alpha, inputs, "score-micro")?;
    let meso = read_matrix(&out.meso(), MatrixAxis::Meso, inputs, "score-meso")?;
    let cp = out.composite(cfg.wavelet.mode);
    if !cp.exists() {
        return Err(missing(&cp, "compose"));
    }
    let comp = read_composite_csv(&cp, &inputs.calendar, &cfg.wavelet)?;
    Ok((alpha, meso, comp))
}

type Composites = BTreeMap<String, CompositeSeries>;

/// Runs every sentiment stage in order, or loads their artifacts with `reuse`.
pub fn sentiment_stages(
    cfg: &RunConfig,
    inputs: &SentimentInputs,
    reuse: bool,
) -> Result<(SentimentMatrix, SentimentMatrix, Composites, Vec<PathBuf>)> {
    if reuse {
        let (a, m, c) = load_stage_outputs(cfg, inputs)?;
        return Ok((a, m, c, vec![]));
    }
    let (head, mut files) = stage_train_absa(cfg, inputs)?;
    let (alpha, f) = stage_score_micro(cfg, inputs, &head)?;
    files.extend(f);
    let (meso, f) = stage_score_meso(cfg, inputs)?;
    files.extend(f);
    let (comp, f) = stage_compose(cfg, inputs, &alpha, &meso)?;
    files.extend(f);
    Ok((alpha, meso, comp, files))
}

fn backtest_variants(cfg: &RunConfig, a: &BacktestArgs) -> Vec<Variant> {
    let mut v: Vec<Variant> = if a.variants.is_empty() {
        cfg.variants.clone()
    } else {
        a.variants.clone()
    };
    if a.with_sentiment {
        v.push(Variant::Composite);
    }
    if a.separate_features {
        v.push(Variant::Separate);
    }
    v.retain(|x| *x != Variant::Baseline);
    v.sort();
    v.dedup();
    v
}

pub fn stage_backtest(cfg: &RunConfig, inputs: &SentimentInputs, args: &BacktestArgs) -> Result<(BacktestReport, Vec<PathBuf>)> {
    let out = OutPaths::new(&cfg.out_dir);
    let variants = backtest_variants(cfg, args);
    let (alpha, meso, comp, mut files) = sentiment_stages(cfg, inputs, args.reuse)?;
    let sent = bond_sentiment(&alpha, &meso, &comp, &cfg.wavelet)?;
    let res = run_backtest(&inputs.panels, Some(&sent), &inputs.calendar, &variants, &cfg.backtest)?;
    write_splits(out.splits(), &res.splits)?;
    files.push(out.splits());
    for run in std::iter::once(&res.baseline).chain(&res.runs) {
        write_predictions(out.predictions(run.variant), &run.predictions)?;
        run.model.save(out.model(run.variant))?;
        files.push(out.predictions(run.variant));
        files.push(out.model(run.variant));
    }
    write_json(&out.report(), &res.report)?;
    files.push(out.report());
    Ok((res.report, files))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTestOutput {
    pub n_pairs: usize,
    pub mae_a: f64,
    pub mae_b: f64,
    pub observed: f64,
    pub p_value: f64,
    pub n_permutations: usize,
}

pub fn stage_perm_test(cfg: &RunConfig, a: &Path, b: &Path, perm: &PermutationConfig) -> Result<(PermTestOutput, Vec<PathBuf>)> {
    let ra = read_predictions(a)?;
    let rb = read_predictions(b)?;
    let mut by_key: BTreeMap<(String, chrono::NaiveDate), f64> = rb
        .iter()
        .map(|r| ((r.bond_id.clone(), r.target_date), (r.y_pred - r.y_true).abs()))
        .collect();
    let mut ea = Vec::with_capacity(ra.len());
    let mut eb = Vec::with_capacity(ra.len());
    for r in &ra {
        let e = by_key
            .remove(&(r.bond_id.clone(), r.target_date))
            .ok_or_else(|| Error::Invalid(format!("{} {} missing from {}", r.bond_id, r.target_date, b.display())))?;
        ea.push((r.y_pred - r.y_true).abs());
        eb.push(e);
    }
    if !by_key.is_empty() {
        return Err(Error::Invalid(format!("{} has {} windows absent from {}", b.display(), by_key.len(), a.display())));
    }
    let t = permutation_test(&ea, &eb, perm)?;
    let n = ea.len() as f64;
    let o = PermTestOutput {
        n_pairs: ea.len(),
        mae_a: ea.iter().sum::<f64>() / n,
        mae_b: eb.iter().sum::<f64>() / n,
        observed: t.observed,
        p_value: t.p_value,
        n_permutations: t.n_permutations,
    };
    let path = OutPaths::new(&cfg.out_dir).perm_test();
    write_json(&path, &o)?;
    Ok((o, vec![path]))
}

/// Names of the window columns for a variant.
pub fn column_names(cfg: &BacktestConfig, v: Variant) -> Vec<String> {
    let mut names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    if cfg.window.include_spread {
        names.push("Credit Spread".into());
    }
    names.extend(match v {
        Variant::Baseline => vec![],
        Variant::Separate => vec!["Micro Sentiment".to_string(), "Meso Sentiment".to_string()],
        Variant::MicroOnly => vec!["Micro Sentiment".to_string()],
        Variant::MesoOnly => vec!["Meso Sentiment".to_string()],
        Variant::Composite | Variant::Unsmoothed => vec!["Composite Sentiment".to_string()],
    });
    names
}

pub fn stage_importance(cfg: &RunConfig, inputs: &SentimentInputs, args: &ImportanceArgs) -> Result<Vec<PathBuf>> {
    let out = OutPaths::new(&cfg.out_dir);
    let model_path = args.model.clone().unwrap_or_else(|| out.model(args.variant));
    if !model_path.exists() {
        return Err(missing(&model_path, "backtest"));
    }
    let model = ForecasterModel::load(&model_path)?;
    let splits = if out.splits().exists() {
        load_splits(out.splits())?
    } else {
        split_bonds(&inputs.bond_ids(), cfg.backtest.split_ratios, cfg.backtest.split_seed)?
    };
    let sent = if args.variant == Variant::Baseline {
        None
    } else {
        let (a, m, c) = load_stage_outputs(cfg, inputs)?;
        Some(bond_sentiment(&a, &m, &c, &cfg.wavelet)?)
    };
    let ds = build_datasets(&inputs.panels, &splits, sent.as_ref(), &inputs.calendar, args.variant, &cfg.backtest.window)?;
    let windows: Vec<Vec<f64>> = ds.test.iter().map(|s| s.window.clone()).collect();
    let targets: Vec<f64> = ds.test.iter().map(|s| s.target).collect();
    let d = ds.test[0].d;
    let ranked = rank_importances(&model, &windows, &targets, d, args.repeats.unwrap_or(cfg.importance_repeats), cfg.seed)?;
    let path = out.importance(args.variant);
    write_importance_csv(&path, &ranked, &column_names(&cfg.backtest, args.variant))?;
    Ok(vec![path])
}

// Reports ---------------------------------------------------------------------------------

/// One comparison row: baseline and with-sentiment metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub baseline: MetricPair,
    pub with: MetricPair,
    #[serde(default)]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub mae: f64,
    pub mape: f64,
}

/// Hand-written table of comparisons, e.g. figures reported elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportInput {
    Backtest(BacktestReport),
    Table(ComparisonTable),
}

/// A row ready for printing: MAPE already in display units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub mae: f64,
    pub mape: f64,
    pub delta_mae_pct: Option<f64>,
    pub delta_mape_pct: Option<f64>,
    pub p: Option<f64>,
}

pub fn report_rows(input: &ReportInput) -> Result<Vec<ReportRow>> {
    match input {
        ReportInput::Table(t) => {
            let mut rows = Vec::new();
            for r in &t.rows {
                let base = Metrics {
                    mae: r.baseline.mae,
                    mape: r.baseline.mape,
                    n: 0,
                };
                let with = Metrics {
                    mae: r.with.mae,
                    mape: r.with.mape,
                    n: 0,
                };
                let (dm, dp) = delta_report(&base, &with)?;
                rows.push(ReportRow {
                    label: format!("{} without sentiment", r.label),
                    mae: base.mae,
                    mape: base.mape,
                    delta_mae_pct: None,
                    delta_mape_pct: None,
                    p: None,
                });
                rows.push(ReportRow {
                    label: format!("{} with sentiment", r.label),
                    mae: with.mae,
                    mape: with.mape,
                    delta_mae_pct: Some(dm),
                    delta_mape_pct: Some(dp),
                    p: r.p,
                });
            }
            Ok(rows)
        }
        ReportInput::Backtest(b) => {
            // MAPE is a fraction; tables show it in units of 1e-3
            let tag = format!("T={} q={}", b.t, b.q);
            let mut rows = vec![ReportRow {
                label: format!("{tag} baseline"),
                mae: b.baseline.mae,
                mape: b.baseline.mape * 1e3,
                delta_mae_pct: None,
                delta_mape_pct: None,
                p: None,
            }];
            for (v, r) in &b.variants {
                rows.push(ReportRow {
                    label: format!("{tag} {v}"),
                    mae: r.mae,
                    mape: r.mape * 1e3,
                    delta_mae_pct: r.delta_mae_pct,
                    delta_mape_pct: r.delta_mape_pct,
                    p: r.p,
                });
            }
            Ok(rows)
        }
    }
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut s = String::from("| setting | MAE | MAPE (1e-3) | dMAE (%) | dMAPE (%) | p |\n|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {} | {} | {} |\n",
            r.label,
            r.mae,
            r.mape,
            opt(r.delta_mae_pct),
            opt(r.delta_mape_pct),
            opt(r.p)
        ));
    }
    s
}

fn line_chart(path: &Path, title: &str, days: usize, series: &[(&str, &[f64])], right: Option<(&str, &[f64])>) -> Result<()> {
    use plotters::prelude::*;
    let plot_err = |e: &dyn std::fmt::Display| Error::Invalid(format!("plot {}: {e}", path.display()));
    let bounds = |xs: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if lo < hi {
            (lo, hi)
        } else {
            (lo - 1.0, hi + 1.0)
        }
    };
    let (lo, hi) = bounds(&mut series.iter().flat_map(|(_, s)| s.iter().copied()));
    let root = SVGBackend::new(path, (900, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut b = ChartBuilder::on(&root);
    b.caption(title, ("sans-serif", 18)).margin(10).x_label_area_size(30).y_label_area_size(50);
    if right.is_some() {
        b.right_y_label_area_size(50);
    }
    let palette = [BLUE, RED, GREEN];
    let mut chart = b
        .build_cartesian_2d(0..days, lo..hi)
        .map_err(|e| plot_err(&e))?
        .set_secondary_coord(0..days, match right {
            Some((_, r)) => {
                let (a, z) = bounds(&mut r.iter().copied());
                a..z
            }
            None => 0.0..1.0,
        });
    chart.configure_mesh().x_desc("day").draw().map_err(|e| plot_err(&e))?;
    for (i, (name, s)) in series.iter().enumerate() {
        let c = palette[i % palette.len()];
        chart
            .draw_series(LineSeries::new(s.iter().enumerate().map(|(k, v)| (k, *v)), c))
            .map_err(|e| plot_err(&e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c));
    }
    if let Some((name, r)) = right {
        chart.configure_secondary_axes().y_desc(name).draw().map_err(|e| plot_err(&e))?;
        chart
            .draw_secondary_series(LineSeries::new(r.iter().enumerate().map(|(k, v)| (k, *v)), BLACK))
            .map_err(|e| plot_err(&e))?
            .label(name)
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLACK));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Composite series per bond, and smoothed composite against the spread.
pub fn write_plots(cfg: &RunConfig, inputs: &SentimentInputs, bonds: &[String]) -> Result<Vec<PathBuf>> {
    let out = OutPaths::new(&cfg.out_dir);
    let cp = out.composite(cfg.wavelet.mode);
    if !cp.exists() {
        return Err(missing(&cp, "compose"));
    }
    let comp = read_composite_csv(&cp, &inputs.calendar, &cfg.wavelet)?;
    let chosen: Vec<String> = if bonds.is_empty() {
        comp.keys().take(3).cloned().collect()
    } else {
        bonds.to_vec()
    };
    let mut files = Vec::new();
    for b in &chosen {
        let c = comp.get(b).ok_or_else(|| Error::UnknownBond(b.clone()))?;
        let p = out.dir.join(format!("composite_{b}.svg"));
        line_chart(&p, &format!("{b} composite sentiment"), c.raw.len(), &[("raw", &c.raw), ("smoothed", &c.smoothed)], None)?;
        files.push(p);
        let panel = inputs
            .panels
            .iter()
            .find(|x| &x.bond_id == b)
            .ok_or_else(|| Error::UnknownBond(b.clone()))?;
        let sm = crate::forecast::align_to_panel(&c.smoothed, &inputs.calendar, panel)?;
        let p = out.dir.join(format!("sentiment_vs_spread_{b}.svg"));
        line_chart(
            &p,
            &format!("{b} sentiment and credit spread"),
            panel.len(),
            &[("smoothed sentiment", &sm)],
            Some(("credit spread", &panel.credit_spread)),
        )?;
        files.push(p);
    }
    Ok(files)
}

pub fn stage_report(cfg: &RunConfig, args: &ReportArgs) -> Result<(String, Vec<PathBuf>)> {
    let out = OutPaths::new(&cfg.out_dir);
    let inputs = if args.input.is_empty() { vec![out.report()] } else { args.input.clone() };
    let mut rows = Vec::new();
    for p in &inputs {
        if !p.exists() {
            return Err(missing(p, "backtest"));
        }
        let input: ReportInput = serde_json::from_reader(File::open(p)?)
            .map_err(|e| Error::Invalid(format!("{}: not a backtest report or comparison table: {e}", p.display())))?;
        rows.extend(report_rows(&input)?);
    }
    let table = render_table(&rows);
    fs::create_dir_all(&out.dir)?;
    fs::write(out.report_md(), &table)?;
    let mut files = vec![out.report_md()];
    if args.plots {
        let data = SentimentInputs::load(cfg.data_dir())?;
        files.extend(write_plots(cfg, &data, &args.bonds)?);
    }
    Ok((table, files))
}

// Entry point --------------------------------------------------------------------------------

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Ingest => "ingest",
        Command::TrainAbsa => "train-absa",
        Command::ScoreMicro { .. } => "score-micro",
        Command::ScoreMeso => "score-meso",
        Command::Compose { .. } => "compose",
        Command::Backtest(_) => "backtest",
        Command::PermTest(_) => "perm-test",
        Command::Importance(_) => "importance",
        Command::Report(_) => "report",
    }
}

/// Resolves configuration and runs one subcommand. Returns what it prints.
pub fn run(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<String> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), env)?.with_common(&cli.common);
    match &cli.command {
        Command::Synth(a) => {
            if let Some(v) = a.n_bonds {
                cfg.synth.n_bonds = v;
            }
            if let Some(v) = a.n_days {
                cfg.synth.n_days = v;
            }
            if let Some(v) = a.effect_size {
                cfg.synth.effect_size = v;
            }
            if let Some(v) = a.effect_lag {
                cfg.synth.effect_lag = v;
            }
        }
        Command::Compose { mode: Some(m) } => cfg.wavelet.mode = *m,
        Command::Backtest(a) => {
            if a.causal {
                cfg.wavelet.mode = SmoothMode::Causal;
            }
            if let Some(t) = a.window {
                cfg.backtest.window.t = t;
            }
            if let Some(q) = a.horizon {
                cfg.backtest.window.q = q;
            }
            if let Some(e) = a.epochs {
                cfg.backtest.forecaster.epochs = e;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let name = command_name(&cli.command);
    let load = || SentimentInputs::load(cfg.data_dir());
    let (msg, files) = match &cli.command {
        Command::Synth(_) => {
            let f = stage_synth(&cfg)?;
            (format!("wrote {} files to {}", f.len(), cfg.out_dir.display()), f)
        }
        Command::Ingest => {
            let inputs = load()?;
            let f = stage_ingest(&cfg, &inputs)?;
            (fs::read_to_string(OutPaths::new(&cfg.out_dir).ingest_summary())?, f)
        }
        Command::TrainAbsa => {
            let (h, f) = stage_train_absa(&cfg, &load()?)?;
            (format!("final loss {:?}", h.loss_history.last()), f)
        }
        Command::ScoreMicro { head } => {
            let hp = head.clone().unwrap_or_else(|| OutPaths::new(&cfg.out_dir).head());
            if !hp.exists() {
                return Err(missing(&hp, "train-absa"));
            }
            let h = AbsaHead::load(&hp)?;
            let (_, f) = stage_score_micro(&cfg, &load()?, &h)?;
            (format!("wrote {}", f[1].display()), f)
        }
        Command::ScoreMeso => {
            let (_, f) = stage_score_meso(&cfg, &load()?)?;
            (format!("wrote {}", f[2].display()), f)
        }
        Command::Compose { .. } => {
            let inputs = load()?;
            let out = OutPaths::new(&cfg.out_dir);
            let alpha = read_matrix(&out.alpha(), MatrixAxis::Alpha, &inputs, "score-micro")?;
            let meso = read_matrix(&out.meso(), MatrixAxis::Meso, &inputs, "score-meso")?;
            let (_, f) = stage_compose(&cfg, &inputs, &alpha, &meso)?;
            (format!("wrote {}", f[0].display()), f)
        }
        Command::Backtest(a) => {
            let (rep, f) = stage_backtest(&cfg, &load()?, a)?;
            (serde_json::to_string_pretty(&rep)?, f)
        }
        Command::PermTest(a) => {
            let mut perm = cfg.backtest.permutation.clone();
            if let Some(n) = a.n_permutations {
                perm.n_permutations = n;
            }
            if let Some(b) = a.block_len {
                perm.block_len = b;
            }
            let (o, f) = stage_perm_test(&cfg, &a.a, &a.b, &perm)?;
            (serde_json::to_string_pretty(&o)?, f)
        }
        Command::Importance(a) => {
            let f = stage_importance(&cfg, &load()?, a)?;
            (format!("wrote {}", f[0].display()), f)
        }
        Command::Report(a) => stage_report(&cfg, a)?,
    };
    write_manifest(&cfg, name, &files)?;
    Ok(msg)
}

/// Parses `args`, runs, and maps failures to a JSON error on stderr.
/// Returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": e.to_string().trim() }));
            return 2;
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli, std::env::vars()) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn precedence_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "seed = 3\n[backtest.forecaster]\nepochs = 7\nd_model = 16\n").unwrap();
        let cfg = RunConfig::load(Some(&p), env(&[("SENTISPREAD__BACKTEST__FORECASTER__EPOCHS", "2"), ("OTHER", "x")])).unwrap();
        assert_eq!(cfg.backtest.forecaster.epochs, 2);
        assert_eq!(cfg.backtest.forecaster.d_model, 16);
        assert_eq!(cfg.seed, 3);
        let cfg = cfg.with_common(&Common {
            seed: Some(9),
            ..Default::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.backtest.forecaster.seed, 9);
        assert_eq!(cfg.synth.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "sed = 3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.backtest.window.q = 5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let l = OutDirLock::acquire(dir.path()).unwrap();
        assert!(OutDirLock::acquire(dir.path()).is_err());
        drop(l);
        OutDirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn reference_table_row() {
        let t = ReportInput::Table(ComparisonTable {
            rows: vec![ComparisonRow {
                label: "q=2".into(),
                baseline: MetricPair {
                    mae: 8.9683,
                    mape: 8.0033,
                },
                with: MetricPair {
                    mae: 8.6765,
                    mape: 7.1257,
                },
                p: None,
            }],
        });
        let rows = report_rows(&t).unwrap();
        assert!((rows[1].delta_mae_pct.unwrap() - 3.2539).abs() < 1e-3);
        assert!((rows[1].delta_mape_pct.unwrap() - 10.9658).abs() < 1e-3);
        // the reference deltas come from unrounded errors, so only the
        // first three decimals agree with the rounded inputs
        let s = render_table(&rows);
        assert!(s.contains("| 3.253") && s.contains("| 10.965"), "{s}");
    }

    #[test]
    fn usage_errors_are_json_with_nonzero_exit() {
        let code = main_with_args(["sentispread".to_string(), "bogus".to_string()]);
        assert_eq!(code, 2);
    }
}
