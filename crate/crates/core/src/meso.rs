//! Industry-level sentiment: the industry x topic Boolean graph, topic
//! recall for each text, propagation into industry-day sums, per-row
//! z-scoring and the per-bond industry average.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::{BondPanel, Calendar};
use crate::error::{Error, Result};
use crate::matrix::{MatrixAxis, SentimentMatrix};
use crate::vecstore::VectorStore;

/// Number of topics recalled per text.
pub const DEFAULT_TOP_K: usize = 5;

/// Boolean industries x topics matrix; `g[m][n]` is true when topic `n`
/// affects industry `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    industries: Vec<String>,
    topics: Vec<String>,
    g: Vec<bool>,
    industry_index: HashMap<String, usize>,
    topic_index: HashMap<String, usize>,
}

fn registry(names: &[String]) -> Result<HashMap<String, usize>> {
    let mut out = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if out.insert(n.clone(), i).is_some() {
            return Err(Error::DuplicateName(n.clone()));
        }
    }
    Ok(out)
}

impl KnowledgeGraph {
    pub fn new(industries: Vec<String>, topics: Vec<String>, rows: Vec<Vec<bool>>) -> Result<Self> {
        let industry_index = registry(&industries)?;
        let topic_index = registry(&topics)?;
        if rows.len() != industries.len() {
            return Err(Error::DimMismatch {
                expected: industries.len(),
                got: rows.len(),
            });
        }
        let mut g = Vec::with_capacity(industries.len() * topics.len());
        for r in rows {
            if r.len() != topics.len() {
                return Err(Error::DimMismatch {
                    expected: topics.len(),
                    got: r.len(),
                });
            }
            g.extend(r);
        }
        Ok(KnowledgeGraph {
            industries,
            topics,
            g,
            industry_index,
            topic_index,
        })
    }

    pub fn industries(&self) -> &[String] {
        &self.industries
    }

    pub fn topics(&self) -> &[String] {
        &self.topics
    }

    pub fn n_industries(&self) -> usize {
        self.industries.len()
    }

    pub fn n_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn industry_index(&self, name: &str) -> Option<usize> {
        self.industry_index.get(name).copied()
    }

    pub fn topic_index(&self, name: &str) -> Option<usize> {
        self.topic_index.get(name).copied()
    }

    pub fn get(&self, industry: usize, topic: usize) -> bool {
        self.g[industry * self.topics.len() + topic]
    }

    pub fn get_by_name(&self, industry: &str, topic: &str) -> Result<bool> {
        let m = self
            .industry_index(industry)
            .ok_or_else(|| Error::UnknownIndustry(industry.to_string()))?;
        let n = self
            .topic_index(topic)
            .ok_or_else(|| Error::Invalid(format!("unknown topic {topic:?}")))?;
        Ok(self.get(m, n))
    }

    pub fn row(&self, industry: usize) -> &[bool] {
        let t = self.topics.len();
        &self.g[industry * t..(industry + 1) * t]
    }

    /// Errors unless the graph has exactly `industries x topics` cells.
    pub fn expect_dims(&self, industries: usize, topics: usize) -> Result<()> {
        if self.n_industries() != industries {
            return Err(Error::DimMismatch {
                expected: industries,
                got: self.n_industries(),
            });
        }
        if self.n_topics() != topics {
            return Err(Error::DimMismatch {
                expected: topics,
                got: self.n_topics(),
            });
        }
        Ok(())
    }

    /// CSV with a header of topic names after one label column, then one row
    /// per industry with 0/1 cells.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let topics: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut industries = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != topics.len() + 1 {
                return Err(Error::schema(
                    path,
                    line,
                    format!("expected {} cells, got {}", topics.len() + 1, rec.len()),
                ));
            }
            industries.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|c| match c.trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::schema(path, line, format!("non-Boolean cell {other:?}"))),
                })
                .collect::<Result<Vec<bool>>>()?;
            rows.push(row);
        }
        Self::new(industries, topics, rows)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["industry".to_string()];
        header.extend(self.topics.iter().cloned());
        w.write_record(&header)?;
        for (m, name) in self.industries.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.row(m).iter().map(|&b| if b { "1" } else { "0" }.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-text topic-level polarity from the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicPolarity {
    pub text_id: String,
    pub date: NaiveDate,
    pub polarity: i8,
}

pub fn load_topic_polarities(path: impl AsRef<Path>) -> Result<Vec<TopicPolarity>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TopicPolarity =
            serde_json::from_str(&line).map_err(|e| Error::schema(path, i + 1, e.to_string()))?;
        if !(-1..=1).contains(&r.polarity) {
            return Err(Error::schema(path, i + 1, format!("polarity {} not in -1/0/1", r.polarity)));
        }
        if !seen.insert(r.text_id.clone()) {
            return Err(Error::DuplicateText(r.text_id));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_topic_polarities(path: impl AsRef<Path>, recs: &[TopicPolarity]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in recs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One recalled topic for one text.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicIncrement {
    pub text_id: String,
    pub date: NaiveDate,
    /// Index into the graph's topic registry.
    pub topic: usize,
    pub similarity: f64,
    pub polarity: i8,
}

impl TopicIncrement {
    pub fn weight(&self) -> f64 {
        self.similarity * self.polarity as f64
    }
}

/// Increments grouped by topic and day.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicDaySentiment {
    pub topic: usize,
    pub date: NaiveDate,
    /// `(text_id, similarity, polarity)`.
    pub contributions: Vec<(String, f64, i8)>,
}

pub fn group_by_topic_day(increments: &[TopicIncrement]) -> Vec<TopicDaySentiment> {
    let mut groups: BTreeMap<(NaiveDate, usize), Vec<(String, f64, i8)>> = BTreeMap::new();
    for inc in increments {
        groups
            .entry((inc.date, inc.topic))
            .or_default()
            .push((inc.text_id.clone(), inc.similarity, inc.polarity));
    }
    groups
        .into_iter()
        .map(|((date, topic), contributions)| TopicDaySentiment {
            topic,
            date,
            contributions,
        })
        .collect()
}

/// Recalls the `k` topics nearest to a text embedding. `topics` must be
/// keyed by the graph's topic names.
pub fn map_text(
    text: &TopicPolarity,
    embedding: &[f64],
    topics: &VectorStore,
    graph: &KnowledgeGraph,
    k: usize,
) -> Result<Vec<TopicIncrement>> {
    if !(-1..=1).contains(&text.polarity) {
        return Err(Error::Invalid(format!("polarity {} not in -1/0/1", text.polarity)));
    }
    topics
        .top_k(embedding, k)?
        .into_iter()
        .map(|m| {
            let key = topics.key(m.index);
            let topic = graph
                .topic_index(key)
                .ok_or_else(|| Error::Invalid(format!("topic {key:?} missing from graph")))?;
            Ok(TopicIncrement {
                text_id: text.text_id.clone(),
                date: text.date,
                topic,
                similarity: m.similarity,
                polarity: text.polarity,
            })
        })
        .collect()
}

/// Sum over increments of `c * polarity * g[m, topic]`.
pub fn industry_day(graph: &KnowledgeGraph, increments: &[TopicIncrement], industry: usize) -> Result<f64> {
    if industry >= graph.n_industries() {
        return Err(Error::UnknownIndustry(format!("#{industry}")));
    }
    Ok(increments
        .iter()
        .filter(|inc| graph.get(industry, inc.topic))
        .map(TopicIncrement::weight)
        .sum())
}

/// Unstandardized industries x days matrix.
pub fn build_beta(
    graph: &KnowledgeGraph,
    increments: &[TopicIncrement],
    calendar: &Calendar,
) -> Result<SentimentMatrix> {
    let mut m = SentimentMatrix::zeros(MatrixAxis::Beta, graph.industries().to_vec(), *calendar)?;
    for inc in increments {
        let k = calendar.index(inc.date)?;
        let w = inc.weight();
        if w == 0.0 {
            continue;
        }
        for ind in 0..graph.n_industries() {
            if graph.get(ind, inc.topic) {
                m.add(ind, k, w);
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeMode {
    /// Each industry row over the full sample.
    #[default]
    PerRow,
    /// One mean and std over every cell.
    Global,
}

impl std::str::FromStr for StandardizeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_row" | "per-row" => Ok(StandardizeMode::PerRow),
            "global" => Ok(StandardizeMode::Global),
            _ => Err(Error::Config(format!("unknown standardize mode {s:?}"))),
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population z-score; a constant input is an error.
pub fn zscore(xs: &[f64], label: &str) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Empty("series"));
    }
    let (mean, std) = mean_std(xs);
    if !(std > 0.0) || std <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::ZeroVariance(label.to_string()));
    }
    Ok(xs.iter().map(|x| (x - mean) / std).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedBeta {
    pub matrix: SentimentMatrix,
    /// Industries whose row had zero variance; their rows are zero.
    pub zero_variance: Vec<String>,
}

pub fn standardize_beta(beta: &SentimentMatrix, mode: StandardizeMode) -> Result<StandardizedBeta> {
    let mut out = beta.clone();
    let mut zero_variance = Vec::new();
    match mode {
        StandardizeMode::PerRow => {
            for i in 0..beta.n_entities() {
                let name = &beta.entities()[i];
                match zscore(beta.row(i), name) {
                    Ok(z) => out.row_mut(i).copy_from_slice(&z),
                    Err(Error::ZeroVariance(_)) => {
                        log::warn!("industry {name:?} has zero variance; row set to zero");
                        out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
                        zero_variance.push(name.clone());
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        StandardizeMode::Global => {
            let z = zscore(beta.values(), "beta matrix")?;
            let k = beta.n_days();
            for i in 0..beta.n_entities() {
                out.row_mut(i).copy_from_slice(&z[i * k..(i + 1) * k]);
            }
        }
    }
    Ok(StandardizedBeta {
        matrix: out,
        zero_variance,
    })
}

fn industry_rows(industry_ids: &[String], beta: &SentimentMatrix, bond: &str) -> Result<Vec<usize>> {
    if industry_ids.is_empty() {
        return Err(Error::NoIndustry(bond.to_string()));
    }
    industry_ids
        .iter()
        .map(|m| beta.entity_index(m).ok_or_else(|| Error::UnknownIndustry(m.clone())))
        .collect()
}

/// Mean of the bond's industry cells on day `k`.
pub fn bond_meso(bond: &BondPanel, beta: &SentimentMatrix, k: usize) -> Result<f64> {
    let rows = industry_rows(&bond.industry_ids, beta, &bond.bond_id)?;
    Ok(rows.iter().map(|&m| beta.get(m, k)).sum::<f64>() / rows.len() as f64)
}

/// Bonds x days meso matrix from `(bond_id, industry_ids)` pairs.
pub fn meso_matrix(bonds: &[(String, Vec<String>)], beta: &SentimentMatrix) -> Result<SentimentMatrix> {
    let ids: Vec<String> = bonds.iter().map(|(b, _)| b.clone()).collect();
    let mut out = SentimentMatrix::zeros(MatrixAxis::Meso, ids, *beta.calendar())?;
    for (i, (bond, inds)) in bonds.iter().enumerate() {
        let rows = industry_rows(inds, beta, bond)?;
        let inv = 1.0 / rows.len() as f64;
        for k in 0..beta.n_days() {
            let s: f64 = rows.iter().map(|&m| beta.get(m, k)).sum();
            out.set(i, k, s * inv);
        }
    }
    Ok(out)
}

/// Every text's recalled topics. Texts missing an embedding are an error.
pub fn map_texts(
    polarities: &[TopicPolarity],
    text_embeddings: &VectorStore,
    topics: &VectorStore,
    graph: &KnowledgeGraph,
    k: usize,
) -> Result<Vec<TopicIncrement>> {
    let mut out = Vec::with_capacity(polarities.len() * k);
    for p in polarities {
        let emb = text_embeddings
            .get(&p.text_id)
            .ok_or_else(|| Error::Invalid(format!("no embedding for text {:?}", p.text_id)))?;
        out.extend(map_text(p, emb, topics, graph, k)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MesoConfig {
    pub top_k: usize,
    pub standardize: StandardizeMode,
}

impl Default for MesoConfig {
    fn default() -> Self {
        MesoConfig {
            top_k: DEFAULT_TOP_K,
            standardize: StandardizeMode::PerRow,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MesoOutput {
    pub beta_raw: SentimentMatrix,
    pub beta: StandardizedBeta,
    pub bonds: SentimentMatrix,
}

/// Recall, propagation, standardization and bond averaging in one call.
#[allow(clippy::too_many_arguments)]
pub fn run_meso(
    polarities: &[TopicPolarity],
    text_embeddings: &VectorStore,
    topics: &VectorStore,
    graph: &KnowledgeGraph,
    bonds: &[(String, Vec<String>)],
    calendar: &Calendar,
    cfg: &MesoConfig,
) -> Result<MesoOutput> {
    let inc = map_texts(polarities, text_embeddings, topics, graph, cfg.top_k)?;
    let beta_raw = build_beta(graph, &inc, calendar)?;
    let beta = standardize_beta(&beta_raw, cfg.standardize)?;
    let bonds = meso_matrix(bonds, &beta.matrix)?;
    Ok(MesoOutput {
        beta_raw,
        beta,
        bonds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_calendar;
    use crate::vecstore::EmbeddingRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn day(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn names(p: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    fn fixture() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/disaster_graph.csv")
    }

    #[test]
    fn disaster_subset_cells() {
        let g = KnowledgeGraph::load_csv(fixture()).unwrap();
        g.expect_dims(40, 6).unwrap();
        assert!(g
            .get_by_name("Agriculture, Forestry, Livestock, and Fishery", "Natural Disasters")
            .unwrap());
        assert!(!g.get_by_name("Gaming", "Natural Disasters").unwrap());
        assert!(!g.get_by_name("Steel", "Disaster Relief").unwrap());
        assert!(g.get_by_name("Defense and Military Industry", "Disaster Relief").unwrap());
        assert!(g.expect_dims(40, 117).is_err());
    }

    #[test]
    fn graph_csv_round_trip_and_validation() {
        let g = KnowledgeGraph::load_csv(fixture()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.save_csv(&p).unwrap();
        assert_eq!(KnowledgeGraph::load_csv(&p).unwrap(), g);

        std::fs::write(&p, "industry,a,b\nx,1,2\n").unwrap();
        assert!(matches!(KnowledgeGraph::load_csv(&p), Err(Error::Schema { line: 2, .. })));
        std::fs::write(&p, "industry,a,b\nx,1,0\nx,0,0\n").unwrap();
        assert!(matches!(KnowledgeGraph::load_csv(&p), Err(Error::DuplicateName(_))));
        std::fs::write(&p, "industry,a,a\nx,1,0\n").unwrap();
        assert!(matches!(KnowledgeGraph::load_csv(&p), Err(Error::DuplicateName(_))));
    }

    fn inc(topic: usize, sim: f64, pol: i8) -> TopicIncrement {
        TopicIncrement {
            text_id: "t".into(),
            date: day("2021-01-01"),
            topic,
            similarity: sim,
            polarity: pol,
        }
    }

    #[test]
    fn hand_worked_industry_day() {
        // topics 0..5 recalled with 0.9..0.5; the row picks the 1st and 3rd
        let g = KnowledgeGraph::new(
            vec!["m".into(), "z".into()],
            names("t", 5),
            vec![
                vec![true, false, true, false, false],
                vec![false; 5],
            ],
        )
        .unwrap();
        let incs: Vec<_> = [0.9, 0.8, 0.7, 0.6, 0.5]
            .iter()
            .enumerate()
            .map(|(n, &c)| inc(n, c, 1))
            .collect();
        assert!((industry_day(&g, &incs, 0).unwrap() - 1.6).abs() < 1e-12);
        assert_eq!(industry_day(&g, &incs, 1).unwrap(), 0.0);
        let doubled: Vec<_> = incs.iter().chain(&incs).cloned().collect();
        assert_eq!(
            industry_day(&g, &doubled, 0).unwrap(),
            2.0 * industry_day(&g, &incs, 0).unwrap()
        );
        let neutral: Vec<_> = incs.iter().map(|i| TopicIncrement { polarity: 0, ..i.clone() }).collect();
        assert_eq!(industry_day(&g, &neutral, 0).unwrap(), 0.0);
        assert!(industry_day(&g, &incs, 2).is_err());
    }

    #[test]
    fn zscore_examples() {
        let z = zscore(&[1.0, 2.0, 3.0], "r").unwrap();
        for (a, b) in z.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((a - b).abs() < 1e-4);
        }
        let again = zscore(&z, "r").unwrap();
        for (a, b) in z.iter().zip(&again) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(zscore(&[2.0, 2.0, 2.0], "flat"), Err(Error::ZeroVariance(n)) if n == "flat"));
    }

    #[test]
    fn degenerate_row_reported_and_zeroed() {
        let cal = build_calendar(day("2021-01-01"), day("2021-01-03")).unwrap();
        let mut m = SentimentMatrix::zeros(MatrixAxis::Beta, names("i", 2), cal).unwrap();
        m.row_mut(0).copy_from_slice(&[1.0, 2.0, 3.0]);
        m.row_mut(1).copy_from_slice(&[5.0, 5.0, 5.0]);
        let s = standardize_beta(&m, StandardizeMode::PerRow).unwrap();
        assert_eq!(s.zero_variance, vec!["i1".to_string()]);
        assert_eq!(s.matrix.row(1), &[0.0, 0.0, 0.0]);
        assert!((s.matrix.get(0, 2) - 1.224744871391589).abs() < 1e-12);

        let g = standardize_beta(&m, StandardizeMode::Global).unwrap();
        let (mean, std) = mean_std(g.matrix.values());
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn standardized_rows_have_unit_moments(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 20), 1..5)
        ) {
            let cal = build_calendar(day("2021-01-01"), day("2021-01-20")).unwrap();
            let mut m = SentimentMatrix::zeros(MatrixAxis::Beta, names("i", rows.len()), cal).unwrap();
            for (i, r) in rows.iter().enumerate() {
                m.row_mut(i).copy_from_slice(r);
            }
            let s = standardize_beta(&m, StandardizeMode::PerRow).unwrap();
            for i in 0..rows.len() {
                if s.zero_variance.contains(&m.entities()[i]) {
                    continue;
                }
                let (mean, std) = mean_std(s.matrix.row(i));
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
        }
    }

    fn bond(inds: &[&str]) -> BondPanel {
        BondPanel {
            bond_id: "b".into(),
            industry_ids: inds.iter().map(|s| s.to_string()).collect(),
            dates: vec![],
            features: vec![],
            credit_spread: vec![],
        }
    }

    #[test]
    fn bond_meso_cases() {
        let cal = build_calendar(day("2021-01-01"), day("2021-01-02")).unwrap();
        let mut m = SentimentMatrix::zeros(MatrixAxis::Beta, names("i", 3), cal).unwrap();
        m.set(0, 0, 0.4);
        m.set(1, 0, -0.4);
        m.set(2, 0, 0.7);
        assert_eq!(bond_meso(&bond(&["i2"]), &m, 0).unwrap(), 0.7);
        assert_eq!(bond_meso(&bond(&["i0", "i1"]), &m, 0).unwrap(), 0.0);
        assert!(matches!(bond_meso(&bond(&[]), &m, 0), Err(Error::NoIndustry(_))));
        assert!(matches!(bond_meso(&bond(&["nope"]), &m, 0), Err(Error::UnknownIndustry(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for (i, v) in vals.iter().enumerate() {
                m.set(i, 1, *v);
            }
            let got = bond_meso(&bond(&["i0", "i1", "i2"]), &m, 1).unwrap();
            assert_eq!(got, (vals[0] + vals[1] + vals[2]) / 3.0);
        }
    }

    #[test]
    fn identical_embedding_is_recalled_with_unit_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let topics: Vec<EmbeddingRecord> = (0..20)
            .map(|i| EmbeddingRecord {
                key: format!("t{i}"),
                vector: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let g = KnowledgeGraph::new(vec!["m".into()], names("t", 20), vec![vec![true; 20]]).unwrap();
        let store = VectorStore::new(8, topics.clone()).unwrap();
        let text = TopicPolarity {
            text_id: "x".into(),
            date: day("2021-01-01"),
            polarity: 1,
        };
        let out = map_text(&text, &topics[7].vector, &store, &g, 5).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].topic, 7);
        assert!((out[0].similarity - 1.0).abs() < 1e-12);
        let out = map_text(&text, &topics[7].vector, &store, &g, 50).unwrap();
        assert_eq!(out.len(), 20);
    }

    #[test]
    fn polarity_file_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let recs = vec![TopicPolarity {
            text_id: "a".into(),
            date: day("2021-01-01"),
            polarity: -1,
        }];
        write_topic_polarities(&p, &recs).unwrap();
        assert_eq!(load_topic_polarities(&p).unwrap(), recs);
        std::fs::write(&p, "{\"text_id\":\"a\",\"date\":\"2021-01-01\",\"polarity\":2}\n").unwrap();
        assert!(matches!(load_topic_polarities(&p), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn grouping_keeps_every_contribution() {
        let incs = vec![inc(0, 0.5, 1), inc(1, 0.4, 1), inc(0, 0.3, -1)];
        let g = group_by_topic_day(&incs);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].contributions.len(), 2);
    }
}
