//! Firm-level (aspect) sentiment: mean-max pooling over a bond's token
//! vectors, an MLP head trained on soft labels, per-text polarity and
//! daily aggregation into the bond x day alpha matrix.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Optimizer, ParamSet, Tensor, Var};
use crate::corpus::{Calendar, SoftLabel, TextCollection};
use crate::error::{Error, Result};
use crate::matrix::{MatrixAxis, SentimentMatrix};

/// Encoder outputs for one text: the sentence vector plus token vectors
/// for each bond it mentions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatureSet {
    pub text_id: String,
    pub cls: Vec<f64>,
    pub bonds: BTreeMap<String, Vec<Vec<f64>>>,
}

impl TokenFeatureSet {
    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    fn check(&self) -> std::result::Result<(), String> {
        let d = self.cls.len();
        if d == 0 {
            return Err("empty cls vector".into());
        }
        for (bond, toks) in &self.bonds {
            if toks.is_empty() {
                return Err(format!("bond {bond}: empty token list"));
            }
            if let Some(t) = toks.iter().find(|t| t.len() != d) {
                return Err(format!("bond {bond}: token of dim {} (cls dim {d})", t.len()));
            }
        }
        Ok(())
    }

    /// Every bond key must be among the text's mentioned bonds.
    pub fn check_against(&self, texts: &TextCollection) -> Result<()> {
        let rec = texts
            .get(&self.text_id)
            .ok_or_else(|| Error::Invalid(format!("features for unknown text {}", self.text_id)))?;
        for b in self.bonds.keys() {
            if !rec.mentioned_bonds.contains(b) {
                return Err(Error::Invalid(format!(
                    "text {} has features for unmentioned bond {b}",
                    self.text_id
                )));
            }
        }
        Ok(())
    }
}

pub fn load_token_features(path: impl AsRef<Path>) -> Result<Vec<TokenFeatureSet>> {
    let path = path.as_ref();
    let mut out: Vec<TokenFeatureSet> = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: TokenFeatureSet =
            serde_json::from_str(&line).map_err(|e| Error::schema(path, i + 1, e.to_string()))?;
        f.check().map_err(|m| Error::schema(path, i + 1, m))?;
        if let Some(first) = out.first() {
            if first.dim() != f.dim() {
                return Err(Error::schema(
                    path,
                    i + 1,
                    format!("dim {} differs from {}", f.dim(), first.dim()),
                ));
            }
        }
        out.push(f);
    }
    Ok(out)
}

pub fn write_token_features(path: impl AsRef<Path>, feats: &[TokenFeatureSet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in feats {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `[cls; mean(tokens); max(tokens)]`, length `3d`.
pub fn mean_max_pool(cls: &[f64], tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Empty("token list"));
    }
    let d = cls.len();
    if let Some(t) = tokens.iter().find(|t| t.len() != d) {
        return Err(Error::DimMismatch {
            expected: d,
            got: t.len(),
        });
    }
    let mut mean = vec![0.0; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for t in tokens {
        for j in 0..d {
            mean[j] += t[j];
            max[j] = max[j].max(t[j]);
        }
    }
    let n = tokens.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    let mut out = Vec::with_capacity(3 * d);
    out.extend_from_slice(cls);
    out.extend(mean);
    out.extend(max);
    Ok(out)
}

/// How a head's probability triple becomes a per-text value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Most probable polarity in {-1, 0, 1}; ties go to neutral.
    #[default]
    Argmax,
    /// `p_pos - p_neg`.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub score_mode: ScoreMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 256,
            lr: 1e-4,
            weight_decay: 1e-7,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            score_mode: ScoreMode::Argmax,
        }
    }
}

/// One training item: pooled features and the soft label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub pooled: Vec<f64>,
    pub label: SoftLabel,
}

impl LabeledExample {
    pub fn from_features(f: &TokenFeatureSet, bond: &str, label: SoftLabel) -> Result<Self> {
        let toks = f
            .bonds
            .get(bond)
            .ok_or_else(|| Error::UnknownBond(bond.to_string()))?;
        Ok(LabeledExample {
            pooled: mean_max_pool(&f.cls, toks)?,
            label,
        })
    }
}

/// Collects one example per (labeled text, bond with token features).
pub fn labeled_examples(
    texts: &TextCollection,
    feats: &[TokenFeatureSet],
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for f in feats {
        let Some(rec) = texts.get(&f.text_id) else { continue };
        let Some(label) = rec.soft_label else { continue };
        for bond in f.bonds.keys() {
            out.push(LabeledExample::from_features(f, bond, label)?);
        }
    }
    Ok(out)
}

/// Two-layer perceptron `3d -> hidden (ReLU) -> 3 (softmax)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsaHead {
    pub input_dim: usize,
    pub hidden: usize,
    pub params: ParamSet,
    pub score_mode: ScoreMode,
    /// Full-set loss before training followed by one entry per epoch.
    pub loss_history: Vec<f64>,
}

fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("shape")
}

impl AbsaHead {
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        params.push("w1", linear_init(&mut rng, input_dim, input_dim, hidden));
        params.push("b1", linear_init(&mut rng, input_dim, 1, hidden));
        params.push("w2", linear_init(&mut rng, hidden, hidden, 3));
        params.push("b2", linear_init(&mut rng, hidden, 1, 3));
        AbsaHead {
            input_dim,
            hidden,
            params,
            score_mode: ScoreMode::Argmax,
            loss_history: Vec::new(),
        }
    }

    /// Builds the probability rows for a batch `x` (B x 3d) on `g`.
    pub fn forward_graph(g: &mut Graph, p: &[Var], x: Var) -> Var {
        let h = g.matmul(x, p[0]);
        let h = g.add_row(h, p[1]);
        let h = g.relu(h);
        let z = g.matmul(h, p[2]);
        let z = g.add_row(z, p[3]);
        g.softmax(z)
    }

    /// Probability triple (neg, neu, pos) for one pooled vector.
    pub fn predict_proba(&self, pooled: &[f64]) -> Result<[f64; 3]> {
        if pooled.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                got: pooled.len(),
            });
        }
        let t = &self.params.tensors;
        let (w1, b1, w2, b2) = (&t[0], &t[1], &t[2], &t[3]);
        let mut h = b1.data().to_vec();
        for (i, x) in pooled.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for (hv, w) in h.iter_mut().zip(w1.row_slice(i)) {
                *hv += x * w;
            }
        }
        let mut z = [b2.data()[0], b2.data()[1], b2.data()[2]];
        for (j, hv) in h.iter().enumerate() {
            let hv = hv.max(0.0);
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += hv * w2.at(j, c);
            }
        }
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = z.map(|v| (v - mx).exp());
        let s: f64 = e.iter().sum();
        let p = e.map(|v| v / s);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("head output {z:?}")));
        }
        Ok(p)
    }

    pub fn score(&self, pooled: &[f64]) -> Result<f64> {
        let p = self.predict_proba(pooled)?;
        Ok(match self.score_mode {
            ScoreMode::Argmax => polarity_from_probs(p) as f64,
            ScoreMode::Expected => p[2] - p[0],
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        self.params.to_manifest(
            "absa_head",
            serde_json::json!({
                "input_dim": self.input_dim,
                "hidden": self.hidden,
                "score_mode": self.score_mode,
                "loss_history": self.loss_history,
            }),
        )
    }

    pub fn from_json(v: serde_json::Value) -> Result<Self> {
        let (params, meta) = ParamSet::from_manifest(v, "absa_head")?;
        let input_dim = meta["input_dim"].as_u64().unwrap_or(0) as usize;
        let hidden = meta["hidden"].as_u64().unwrap_or(0) as usize;
        let shapes: Vec<[usize; 2]> = params.tensors.iter().map(Tensor::shape).collect();
        if shapes != [[input_dim, hidden], [1, hidden], [hidden, 3], [1, 3]] {
            return Err(Error::Invalid(format!("head manifest shapes {shapes:?}")));
        }
        Ok(AbsaHead {
            input_dim,
            hidden,
            params,
            score_mode: serde_json::from_value(meta["score_mode"].clone()).unwrap_or_default(),
            loss_history: serde_json::from_value(meta["loss_history"].clone()).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, &self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_json(v)
    }
}

/// Argmax over (neg, neu, pos) mapped to -1/0/+1; any tie resolves to 0.
pub fn polarity_from_probs(p: [f64; 3]) -> i8 {
    let mx = p[0].max(p[1]).max(p[2]);
    let winners: Vec<usize> = (0..3).filter(|&i| p[i] == mx).collect();
    match winners.as_slice() {
        [0] => -1,
        [2] => 1,
        _ => 0,
    }
}

/// Per-text polarity under the head's score mode.
pub fn score_text(head: &AbsaHead, pooled: &[f64]) -> Result<f64> {
    head.score(pooled)
}

fn batch_loss(g: &mut Graph, p: &[Var], batch: &[&LabeledExample], d: usize) -> Var {
    let mut xs = Vec::with_capacity(batch.len() * d);
    let mut ys = Vec::with_capacity(batch.len() * 3);
    for ex in batch {
        xs.extend_from_slice(&ex.pooled);
        ys.extend_from_slice(&ex.label.as_array());
    }
    let x = g.constant(Tensor::new(batch.len(), d, xs).expect("shape"));
    let y = g.constant(Tensor::new(batch.len(), 3, ys).expect("shape"));
    let probs = AbsaHead::forward_graph(g, p, x);
    // Squared error summed over the three probabilities, averaged over items.
    let mse = g.mse(probs, y);
    g.scale(mse, 3.0)
}

fn dataset_loss(head: &AbsaHead, data: &[LabeledExample]) -> f64 {
    let refs: Vec<&LabeledExample> = data.iter().collect();
    let mut g = Graph::new();
    let p: Vec<Var> = head.params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let l = batch_loss(&mut g, &p, &refs, head.input_dim);
    g.value(l).item()
}

/// Trains a fresh head on soft labels with Adam.
pub fn train_head(data: &[LabeledExample], cfg: &HeadConfig) -> Result<AbsaHead> {
    let first = data.first().ok_or(Error::Empty("labeled training set"))?;
    let d = first.pooled.len();
    if let Some(ex) = data.iter().find(|e| e.pooled.len() != d) {
        return Err(Error::DimMismatch {
            expected: d,
            got: ex.pooled.len(),
        });
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::Config("hidden and batch_size must be positive".into()));
    }
    let mut head = AbsaHead::init(d, cfg.hidden, cfg.seed);
    head.score_mode = cfg.score_mode;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ab5a);
    let mut order: Vec<usize> = (0..data.len()).collect();
    head.loss_history.push(dataset_loss(&head, data));
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::new();
            let vars = head.params.attach(&mut g);
            let loss = batch_loss(&mut g, &vars, &batch, d);
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite("absa training loss".into()));
            }
            g.backward(loss)?;
            let grads = head.params.grads(&g, &vars);
            opt.step(&mut head.params.tensors, &grads)?;
        }
        head.loss_history.push(dataset_loss(&head, data));
    }
    Ok(head)
}

// Scoring and daily aggregation ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerTextScore {
    pub text_id: String,
    pub target_id: String,
    pub date: NaiveDate,
    pub value: f64,
}

/// Scores every (text, bond) pair that has token features.
pub fn score_texts(
    head: &AbsaHead,
    texts: &TextCollection,
    feats: &[TokenFeatureSet],
) -> Result<Vec<PerTextScore>> {
    let mut out = Vec::new();
    for f in feats {
        let rec = texts
            .get(&f.text_id)
            .ok_or_else(|| Error::Invalid(format!("features for unknown text {}", f.text_id)))?;
        f.check_against(texts)?;
        for (bond, toks) in &f.bonds {
            let pooled = mean_max_pool(&f.cls, toks)?;
            out.push(PerTextScore {
                text_id: f.text_id.clone(),
                target_id: bond.clone(),
                date: rec.date,
                value: head.score(&pooled)?,
            });
        }
    }
    Ok(out)
}

/// Mean of one bond-day's text values; zero when there are none.
pub fn daily_micro(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn build_alpha_matrix(
    scores: &[PerTextScore],
    bonds: &[String],
    calendar: &Calendar,
) -> Result<SentimentMatrix> {
    let mut m = SentimentMatrix::zeros(MatrixAxis::Alpha, bonds.to_vec(), *calendar)?;
    let mut cells: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for s in scores {
        let i = m
            .entity_index(&s.target_id)
            .ok_or_else(|| Error::UnknownBond(s.target_id.clone()))?;
        let k = calendar.index(s.date)?;
        cells.entry((i, k)).or_default().push(s.value);
    }
    for ((i, k), vals) in cells {
        m.set(i, k, daily_micro(&vals));
    }
    Ok(m)
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[PerTextScore]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scores {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_calendar;
    use proptest::prelude::*;
    use rand::Rng;

    fn day(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn pooling_by_hand() {
        let out = mean_max_pool(&[0.0, 0.0], &[vec![1.0, 3.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 1.5, 1.5, 2.0, 3.0]);
        let t = vec![0.3, -0.2];
        assert_eq!(
            mean_max_pool(&[1.0, 2.0], &[t.clone()]).unwrap(),
            vec![1.0, 2.0, 0.3, -0.2, 0.3, -0.2]
        );
        assert!(mean_max_pool(&[1.0], &[]).is_err());
        assert!(mean_max_pool(&[1.0], &[vec![1.0, 2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn pooling_ignores_token_order(
            toks in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..8),
            seed in any::<u64>(),
        ) {
            let cls = vec![0.1, 0.2, 0.3];
            let mut shuffled = toks.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = mean_max_pool(&cls, &toks).unwrap();
            let b = mean_max_pool(&cls, &shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_survives_positive_rescaling(
            p in prop::array::uniform3(0.01f64..1.0),
            s in prop::array::uniform3(0.5f64..2.0),
        ) {
            // rescale each output by a common factor then renormalize
            let c = s[0];
            let q = p.map(|v| v * c);
            let z: f64 = q.iter().sum();
            let q = q.map(|v| v / z);
            prop_assert_eq!(polarity_from_probs(p), polarity_from_probs(q));
        }
    }

    #[test]
    fn polarity_rules() {
        assert_eq!(polarity_from_probs([0.7, 0.2, 0.1]), -1);
        assert_eq!(polarity_from_probs([0.2, 0.6, 0.2]), 0);
        assert_eq!(polarity_from_probs([0.1, 0.2, 0.7]), 1);
        assert_eq!(polarity_from_probs([0.4, 0.4, 0.2]), 0);
        assert_eq!(polarity_from_probs([0.45, 0.1, 0.45]), 0);
    }

    #[test]
    fn daily_micro_cases() {
        assert_eq!(daily_micro(&[]), 0.0);
        assert_eq!(daily_micro(&[1.0, -1.0]), 0.0);
        assert!((daily_micro(&[1.0, 1.0, -1.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_matrix_cells() {
        let cal = build_calendar(day("2020-01-01"), day("2020-01-05")).unwrap();
        let bonds = vec!["A".to_string(), "B".to_string()];
        let m = build_alpha_matrix(&[], &bonds, &cal).unwrap();
        assert!(m.values().iter().all(|v| *v == 0.0));
        let s = PerTextScore {
            text_id: "t".into(),
            target_id: "B".into(),
            date: day("2020-01-03"),
            value: 1.0,
        };
        let m = build_alpha_matrix(std::slice::from_ref(&s), &bonds, &cal).unwrap();
        assert_eq!(m.get(1, 2), 1.0);
        assert_eq!(m.values().iter().filter(|v| **v != 0.0).count(), 1);
        let bad = PerTextScore {
            target_id: "Z".into(),
            ..s
        };
        assert!(matches!(build_alpha_matrix(&[bad], &bonds, &cal), Err(Error::UnknownBond(_))));
    }

    #[test]
    fn alpha_matrix_matches_per_cell_recomputation() {
        let cal = build_calendar(day("2020-01-01"), day("2020-01-20")).unwrap();
        let bonds: Vec<String> = (0..4).map(|i| format!("B{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<PerTextScore> = (0..300)
            .map(|j| PerTextScore {
                text_id: format!("t{j}"),
                target_id: bonds[rng.gen_range(0..4)].clone(),
                date: cal.day(rng.gen_range(0..20)).unwrap(),
                value: rng.gen_range(-1i32..=1) as f64,
            })
            .collect();
        let m = build_alpha_matrix(&scores, &bonds, &cal).unwrap();
        for (i, b) in bonds.iter().enumerate() {
            for (k, d) in cal.days().enumerate() {
                let vals: Vec<f64> = scores
                    .iter()
                    .filter(|s| &s.target_id == b && s.date == d)
                    .map(|s| s.value)
                    .collect();
                let expect = if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                assert_eq!(m.get(i, k), expect);
                assert!((-1.0..=1.0).contains(&m.get(i, k)));
            }
        }
    }

    fn toy_data(n: usize, d: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| LabeledExample {
                pooled: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                label: SoftLabel::new(0.0, 0.0, 1.0).unwrap(),
            })
            .collect()
    }

    #[test]
    fn constant_label_is_learned() {
        let data = toy_data(40, 12, 1);
        let cfg = HeadConfig {
            hidden: 16,
            epochs: 50,
            lr: 1e-2,
            ..Default::default()
        };
        let head = train_head(&data, &cfg).unwrap();
        assert!(head.loss_history.last().unwrap() < &head.loss_history[0]);
        for ex in &data {
            assert!(head.predict_proba(&ex.pooled).unwrap()[2] > 0.9);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(20, 6, 2);
        let cfg = HeadConfig {
            hidden: 8,
            epochs: 3,
            seed: 42,
            ..Default::default()
        };
        let a = train_head(&data, &cfg).unwrap();
        let b = train_head(&data, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn default_hyperparameters() {
        let c = HeadConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.epochs, c.hidden), (1e-4, 1e-7, 50, 256));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let head = AbsaHead::init(12, 8, rng.gen());
            let data: Vec<LabeledExample> = (0..4)
                .map(|_| {
                    let a: f64 = rng.gen_range(0.0..1.0);
                    let b: f64 = rng.gen_range(0.0..1.0 - a);
                    LabeledExample {
                        pooled: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        label: SoftLabel::new(a, b, 1.0 - a - b).unwrap(),
                    }
                })
                .collect();
            let refs: Vec<&LabeledExample> = data.iter().collect();
            let res = crate::autodiff::grad_check(&head.params.tensors, 1e-5, |g, v| {
                batch_loss(g, v, &refs, 12)
            })
            .unwrap();
            assert!(res.max_rel_err < 1e-4, "{res:?}");
        }
    }

    #[test]
    fn graph_and_direct_forward_agree() {
        let head = AbsaHead::init(9, 5, 3);
        let x: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) / 3.0).collect();
        let direct = head.predict_proba(&x).unwrap();
        let mut g = Graph::new();
        let p: Vec<Var> = head.params.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let xv = g.constant(Tensor::row(x));
        let probs = AbsaHead::forward_graph(&mut g, &p, xv);
        for (a, b) in direct.iter().zip(g.value(probs).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((direct.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn manifest_round_trip() {
        let head = AbsaHead::init(6, 4, 1);
        let back = AbsaHead::from_json(head.to_json()).unwrap();
        assert_eq!(back, head);
    }
}
