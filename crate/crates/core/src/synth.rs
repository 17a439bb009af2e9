//! Synthetic corpus and bond panel with a planted, lagged effect of latent
//! sentiment on credit spreads.
//!
//! Each bond's latent sentiment is its issuer's latent plus the mean latent
//! of its industries. Spreads follow
//! `s_t = mu + phi (s_{t-1} - mu) + effect * L_{t-lag} + noise`. Texts and
//! encoder features are noisy emissions of the latents.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::absa::{write_token_features, TokenFeatureSet};
use crate::corpus::{
    build_calendar, write_panels, write_texts, BondPanel, Calendar, SoftLabel, Stream, TextRecord, N_FEATURES,
    N_MACRO_FEATURES,
};
use crate::error::{Error, Result};
use crate::meso::{write_topic_polarities, KnowledgeGraph, TopicPolarity};
use crate::vecstore::{EmbeddingRecord, VectorStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_bonds: usize,
    pub n_days: usize,
    pub n_industries: usize,
    pub n_topics: usize,
    pub embedding_dim: usize,
    /// Poisson mean of firm-level texts per bond-day.
    pub text_rate: f64,
    /// Poisson mean of industry-level texts per day.
    pub meso_rate: f64,
    /// Coefficient of lagged latent sentiment in the spread recursion.
    pub effect_size: f64,
    pub effect_lag: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub start: NaiveDate,
    /// Persistence of the latent sentiment processes.
    pub latent_ar: f64,
    /// Persistence of spreads around their mean.
    pub spread_ar: f64,
    pub spread_mean: f64,
    /// Std of the noise added to latents before polarity quantization.
    pub polarity_noise: f64,
    /// Half-width of the neutral band in polarity quantization.
    pub dead_zone: f64,
    /// Std of token and embedding noise around their prototypes.
    pub feature_noise: f64,
    /// Share of single-bond firm-level texts carrying a soft label.
    pub labeled_fraction: f64,
    /// Probability that a graph cell is 1.
    pub graph_density: f64,
    pub max_industries_per_bond: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_bonds: 40,
            n_days: 500,
            n_industries: 10,
            n_topics: 30,
            embedding_dim: 32,
            text_rate: 1.0,
            meso_rate: 20.0,
            effect_size: 3.0,
            effect_lag: 2,
            noise_std: 1.0,
            seed: 0,
            start: NaiveDate::from_ymd_opt(2021, 1, 1).expect("date"),
            latent_ar: 0.98,
            spread_ar: 0.95,
            spread_mean: 300.0,
            polarity_noise: 0.8,
            dead_zone: 0.4,
            feature_noise: 0.6,
            labeled_fraction: 0.2,
            graph_density: 0.15,
            max_industries_per_bond: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_bonds", self.n_bonds),
            ("n_days", self.n_days),
            ("n_industries", self.n_industries),
            ("n_topics", self.n_topics),
            ("embedding_dim", self.embedding_dim),
            ("max_industries_per_bond", self.max_industries_per_bond),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let non_neg = [
            ("noise_std", self.noise_std),
            ("text_rate", self.text_rate),
            ("meso_rate", self.meso_rate),
            ("polarity_noise", self.polarity_noise),
            ("dead_zone", self.dead_zone),
            ("feature_noise", self.feature_noise),
        ];
        for (name, v) in non_neg {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.latent_ar) || !(0.0..1.0).contains(&self.spread_ar) {
            return Err(Error::Config("AR coefficients must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) || !(0.0..=1.0).contains(&self.graph_density) {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if !self.effect_size.is_finite() {
            return Err(Error::Config("effect_size must be finite".into()));
        }
        Ok(())
    }
}

/// Latent series recorded for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    /// Issuer latent per bond, `n_days` each.
    pub firm_latent: BTreeMap<String, Vec<f64>>,
    pub industry_latent: BTreeMap<String, Vec<f64>>,
    /// Issuer latent plus mean industry latent; drives spreads.
    pub bond_latent: BTreeMap<String, Vec<f64>>,
}

/// Everything [`generate`] produces, in memory.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub calendar: Calendar,
    pub micro_texts: Vec<TextRecord>,
    pub meso_texts: Vec<TextRecord>,
    pub token_features: Vec<TokenFeatureSet>,
    pub topic_polarities: Vec<TopicPolarity>,
    pub topic_embeddings: Vec<EmbeddingRecord>,
    pub text_embeddings: Vec<EmbeddingRecord>,
    pub graph: KnowledgeGraph,
    pub panels: Vec<BondPanel>,
    pub truth: GroundTruth,
}

/// Output file names inside a synth directory.
pub struct SynthPaths {
    pub micro_texts: PathBuf,
    pub meso_texts: PathBuf,
    pub token_features: PathBuf,
    pub topic_polarities: PathBuf,
    pub topic_embeddings: PathBuf,
    pub text_embeddings: PathBuf,
    pub graph: PathBuf,
    pub panel: PathBuf,
    pub bond_industries: PathBuf,
    pub ground_truth: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        SynthPaths {
            micro_texts: d.join("texts_micro.jsonl"),
            meso_texts: d.join("texts_meso.jsonl"),
            token_features: d.join("token_features.jsonl"),
            topic_polarities: d.join("topic_polarities.jsonl"),
            topic_embeddings: d.join("topic_embeddings.jsonl"),
            text_embeddings: d.join("text_embeddings.jsonl"),
            graph: d.join("graph.csv"),
            panel: d.join("panel.csv"),
            bond_industries: d.join("bond_industries.csv"),
            ground_truth: d.join("ground_truth.json"),
        }
    }
}

fn ar_series(rng: &mut ChaCha8Rng, n: usize, phi: f64) -> Vec<f64> {
    // unit stationary variance
    let innov = Normal::new(0.0, (1.0 - phi * phi).sqrt()).expect("std");
    let mut x = Normal::new(0.0, 1.0).expect("std").sample(rng);
    (0..n)
        .map(|_| {
            let out = x;
            x = phi * x + innov.sample(rng);
            out
        })
        .collect()
}

fn quantize(v: f64, dead_zone: f64) -> i8 {
    if v > dead_zone {
        1
    } else if v < -dead_zone {
        -1
    } else {
        0
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let nd = Normal::new(0.0, 1.0).expect("std");
    loop {
        let v: Vec<f64> = (0..d).map(|_| nd.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, base: &[f64], std: f64) -> Vec<f64> {
    let nd = Normal::new(0.0, std.max(1e-12)).expect("std");
    base.iter().map(|b| b + nd.sample(rng)).collect()
}

fn soft_label(pol: i8) -> SoftLabel {
    match pol {
        -1 => SoftLabel::new(0.8, 0.15, 0.05),
        0 => SoftLabel::new(0.1, 0.8, 0.1),
        _ => SoftLabel::new(0.05, 0.15, 0.8),
    }
    .expect("valid label")
}

/// Deterministic per `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let last = cfg.start + chrono::Duration::days(cfg.n_days as i64 - 1);
    let calendar = build_calendar(cfg.start, last)?;
    let days: Vec<NaiveDate> = calendar.days().collect();
    // Independent streams so changing one block leaves the others intact.
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(k));
    let mut rng_struct = stream(1);
    let mut rng_latent = stream(2);
    let mut rng_spread = stream(3);
    let mut rng_micro = stream(4);
    let mut rng_meso = stream(5);
    let mut rng_feat = stream(6);

    let industries: Vec<String> = (0..cfg.n_industries).map(|i| format!("IND{i:02}")).collect();
    let topics: Vec<String> = (0..cfg.n_topics).map(|i| format!("TOPIC{i:03}")).collect();
    let bonds: Vec<String> = (0..cfg.n_bonds).map(|i| format!("BOND{i:04}")).collect();

    // Graph: random cells, then make sure every topic and industry is linked.
    let mut rows: Vec<Vec<bool>> = (0..cfg.n_industries)
        .map(|_| (0..cfg.n_topics).map(|_| rng_struct.gen_bool(cfg.graph_density)).collect())
        .collect();
    for n in 0..cfg.n_topics {
        if !rows.iter().any(|r| r[n]) {
            rows[rng_struct.gen_range(0..cfg.n_industries)][n] = true;
        }
    }
    for r in rows.iter_mut() {
        if !r.iter().any(|c| *c) {
            r[rng_struct.gen_range(0..cfg.n_topics)] = true;
        }
    }
    let graph = KnowledgeGraph::new(industries.clone(), topics.clone(), rows)?;

    let bond_inds: Vec<Vec<usize>> = bonds
        .iter()
        .map(|_| {
            let k = rng_struct.gen_range(1..=cfg.max_industries_per_bond.min(cfg.n_industries));
            let mut idx: Vec<usize> = (0..cfg.n_industries).collect();
            idx.shuffle(&mut rng_struct);
            let mut pick = idx[..k].to_vec();
            pick.sort_unstable();
            pick
        })
        .collect();

    let d = cfg.embedding_dim;
    let topic_vecs: Vec<Vec<f64>> = (0..cfg.n_topics).map(|_| unit_vector(&mut rng_struct, d)).collect();
    // polarity prototypes for (neg, neu, pos)
    let protos: Vec<Vec<f64>> = (0..3).map(|_| unit_vector(&mut rng_struct, d)).collect();

    // Latents.
    let firm: Vec<Vec<f64>> = bonds.iter().map(|_| ar_series(&mut rng_latent, cfg.n_days, cfg.latent_ar)).collect();
    let ind: Vec<Vec<f64>> = industries
        .iter()
        .map(|_| ar_series(&mut rng_latent, cfg.n_days, cfg.latent_ar))
        .collect();
    let bond_latent: Vec<Vec<f64>> = bond_inds
        .iter()
        .enumerate()
        .map(|(i, inds)| {
            (0..cfg.n_days)
                .map(|k| firm[i][k] + inds.iter().map(|&m| ind[m][k]).sum::<f64>() / inds.len() as f64)
                .collect()
        })
        .collect();

    // Spreads and features. Macro columns are common to every bond.
    let macro_cols: Vec<Vec<f64>> = (0..N_MACRO_FEATURES)
        .map(|j| {
            ar_series(&mut rng_feat, cfg.n_days, 0.99)
                .into_iter()
                .map(|v| v * (1.0 + j as f64) + 50.0)
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-300)).expect("std");
    let panels: Vec<BondPanel> = bonds
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut s = Vec::with_capacity(cfg.n_days);
            let mut prev = cfg.spread_mean;
            for k in 0..cfg.n_days {
                let lagged = if k >= cfg.effect_lag { bond_latent[i][k - cfg.effect_lag] } else { 0.0 };
                let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng_spread) } else { 0.0 };
                let v = cfg.spread_mean + cfg.spread_ar * (prev - cfg.spread_mean) + cfg.effect_size * lagged + eps;
                s.push(v);
                prev = v;
            }
            let cols: Vec<Vec<f64>> = (0..N_FEATURES)
                .map(|j| {
                    if j < N_MACRO_FEATURES {
                        return macro_cols[j].clone();
                    }
                    let phi = 0.5 + 0.45 * ((j * 7 + i) % 10) as f64 / 9.0;
                    let scale = 1.0 + (j % 5) as f64;
                    ar_series(&mut rng_feat, cfg.n_days, phi).into_iter().map(|v| v * scale + 10.0).collect()
                })
                .collect();
            BondPanel {
                bond_id: b.clone(),
                industry_ids: bond_inds[i].iter().map(|&m| industries[m].clone()).collect(),
                dates: days.clone(),
                features: (0..cfg.n_days).map(|k| std::array::from_fn(|j| cols[j][k])).collect(),
                credit_spread: s,
            }
        })
        .collect();

    // Firm-level texts.
    let pol_noise = Normal::new(0.0, cfg.polarity_noise.max(1e-300)).expect("std");
    let mut micro_texts = Vec::new();
    let mut token_features = Vec::new();
    let micro_pois = if cfg.text_rate > 0.0 { Some(Poisson::new(cfg.text_rate).expect("rate")) } else { None };
    let mut tid = 0usize;
    for k in 0..cfg.n_days {
        for i in 0..cfg.n_bonds {
            let n = micro_pois.as_ref().map_or(0, |p| p.sample(&mut rng_micro) as usize);
            for _ in 0..n {
                let mut mentioned = vec![i];
                if cfg.n_bonds > 1 && rng_micro.gen_bool(0.1) {
                    let other = (i + rng_micro.gen_range(1..cfg.n_bonds)) % cfg.n_bonds;
                    mentioned.push(other);
                }
                let mut feats = BTreeMap::new();
                let mut pols = Vec::new();
                for &b in &mentioned {
                    let pol = quantize(firm[b][k] + pol_noise.sample(&mut rng_micro), cfg.dead_zone);
                    pols.push(pol);
                    let n_tok = rng_micro.gen_range(1..=3);
                    let toks: Vec<Vec<f64>> = (0..n_tok)
                        .map(|_| noisy(&mut rng_micro, &protos[(pol + 1) as usize], cfg.feature_noise))
                        .collect();
                    feats.insert(bonds[b].clone(), toks);
                }
                let mut cls_base = vec![0.0; d];
                for p in &pols {
                    for (c, v) in cls_base.iter_mut().zip(&protos[(p + 1) as usize]) {
                        *c += v / pols.len() as f64;
                    }
                }
                let cls = noisy(&mut rng_micro, &cls_base, cfg.feature_noise);
                let labeled = mentioned.len() == 1 && rng_micro.gen_bool(cfg.labeled_fraction);
                let text_id = format!("m{tid:07}");
                tid += 1;
                micro_texts.push(TextRecord {
                    text_id: text_id.clone(),
                    date: days[k],
                    stream: Stream::Micro,
                    mentioned_bonds: mentioned.iter().map(|&b| bonds[b].clone()).collect(),
                    soft_label: labeled.then(|| soft_label(pols[0])),
                });
                token_features.push(TokenFeatureSet {
                    text_id,
                    cls,
                    bonds: feats,
                });
            }
        }
    }

    // Industry-level texts: each is about one topic; its polarity follows the
    // mean latent of the industries that topic touches.
    let topic_inds: Vec<Vec<usize>> = (0..cfg.n_topics)
        .map(|n| (0..cfg.n_industries).filter(|&m| graph.get(m, n)).collect())
        .collect();
    let meso_pois = if cfg.meso_rate > 0.0 { Some(Poisson::new(cfg.meso_rate).expect("rate")) } else { None };
    let mut meso_texts = Vec::new();
    let mut topic_polarities = Vec::new();
    let mut text_embeddings = Vec::new();
    let mut sid = 0usize;
    for (k, day) in days.iter().enumerate() {
        let n = meso_pois.as_ref().map_or(0, |p| p.sample(&mut rng_meso) as usize);
        for _ in 0..n {
            let topic = rng_meso.gen_range(0..cfg.n_topics);
            let inds = &topic_inds[topic];
            let level = inds.iter().map(|&m| ind[m][k]).sum::<f64>() / inds.len() as f64;
            let pol = quantize(level + pol_noise.sample(&mut rng_meso), cfg.dead_zone);
            let text_id = format!("s{sid:07}");
            sid += 1;
            meso_texts.push(TextRecord {
                text_id: text_id.clone(),
                date: *day,
                stream: Stream::Meso,
                mentioned_bonds: vec![],
                soft_label: None,
            });
            topic_polarities.push(TopicPolarity {
                text_id: text_id.clone(),
                date: *day,
                polarity: pol,
            });
            text_embeddings.push(EmbeddingRecord {
                key: text_id,
                vector: noisy(&mut rng_meso, &topic_vecs[topic], cfg.feature_noise / (d as f64).sqrt()),
            });
        }
    }

    let topic_embeddings = topics
        .iter()
        .zip(topic_vecs)
        .map(|(k, v)| EmbeddingRecord { key: k.clone(), vector: v })
        .collect();

    let name_map = |names: &[String], series: &[Vec<f64>]| -> BTreeMap<String, Vec<f64>> {
        names.iter().cloned().zip(series.iter().cloned()).collect()
    };
    let truth = GroundTruth {
        config: cfg.clone(),
        firm_latent: name_map(&bonds, &firm),
        industry_latent: name_map(&industries, &ind),
        bond_latent: name_map(&bonds, &bond_latent),
    };

    Ok(SynthData {
        calendar,
        micro_texts,
        meso_texts,
        token_features,
        topic_polarities,
        topic_embeddings,
        text_embeddings,
        graph,
        panels,
        truth,
    })
}

impl SynthData {
    pub fn topic_store(&self) -> Result<VectorStore> {
        VectorStore::new(self.truth.config.embedding_dim, self.topic_embeddings.clone())
    }

    pub fn text_store(&self) -> Result<VectorStore> {
        VectorStore::new(self.truth.config.embedding_dim, self.text_embeddings.clone())
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SynthPaths> {
        std::fs::create_dir_all(dir.as_ref())?;
        let p = SynthPaths::in_dir(dir);
        write_texts(&p.micro_texts, &self.micro_texts)?;
        write_texts(&p.meso_texts, &self.meso_texts)?;
        write_token_features(&p.token_features, &self.token_features)?;
        write_topic_polarities(&p.topic_polarities, &self.topic_polarities)?;
        self.topic_store()?.save(&p.topic_embeddings)?;
        self.text_store()?.save(&p.text_embeddings)?;
        self.graph.save_csv(&p.graph)?;
        write_panels(&p.panel, &p.bond_industries, &self.panels)?;
        serde_json::to_writer(BufWriter::new(File::create(&p.ground_truth)?), &self.truth)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::absa::load_token_features;
    use crate::corpus::{ingest_texts, load_panels};
    use crate::meso::load_topic_polarities;
    use crate::stats::pearson;

    fn small(seed: u64, effect: f64) -> SynthConfig {
        SynthConfig {
            n_bonds: 6,
            n_days: 500,
            effect_size: effect,
            seed,
            ..Default::default()
        }
    }

    fn innovations(s: &[f64], phi: f64, mu: f64) -> Vec<f64> {
        s.windows(2).map(|w| (w[1] - mu) - phi * (w[0] - mu)).collect()
    }

    #[test]
    fn no_effect_means_no_dependence() {
        // pooled over bonds; a single 500-day pair has stderr ~0.045
        for seed in 0..3 {
            let data = generate(&small(seed, 0.0)).unwrap();
            let (mut xs, mut ys) = (vec![], vec![]);
            for p in &data.panels {
                let lat = &data.truth.bond_latent[&p.bond_id];
                let e = innovations(&p.credit_spread, 0.95, 300.0);
                xs.extend_from_slice(&e[1..]);
                ys.extend_from_slice(&lat[..e.len() - 1]);
            }
            let r = pearson(&xs, &ys).unwrap();
            assert!(r.abs() < 0.1, "{r}");
        }
    }

    #[test]
    fn planted_lag_is_recovered() {
        let data = generate(&small(1, 5.0)).unwrap();
        let mut votes = 0;
        for p in &data.panels {
            let lat = &data.truth.bond_latent[&p.bond_id];
            // innovation at day k (k >= 1) is e[k - 1]
            let e = innovations(&p.credit_spread, 0.95, 300.0);
            let xcorr = |lag: usize| {
                let x: Vec<f64> = (10..e.len()).map(|k| e[k]).collect();
                let y: Vec<f64> = (10..e.len()).map(|k| lat[k + 1 - lag]).collect();
                pearson(&x, &y).unwrap()
            };
            let best = (0..6).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
            if best == 2 {
                votes += 1;
            }
        }
        assert!(votes >= 5, "{votes}/6");
    }

    #[test]
    fn files_are_deterministic_and_pass_validators() {
        let cfg = SynthConfig {
            n_bonds: 4,
            n_days: 60,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = generate(&cfg).unwrap().write(a.path()).unwrap();
        generate(&cfg).unwrap().write(b.path()).unwrap();
        for entry in std::fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read(a.path().join(&name)).unwrap();
            let y = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(x, y, "{name:?}");
        }
        let cal = generate(&cfg).unwrap().calendar;
        let micro = ingest_texts(&pa.micro_texts, Stream::Micro, Some(&cal)).unwrap();
        ingest_texts(&pa.meso_texts, Stream::Meso, Some(&cal)).unwrap();
        for f in load_token_features(&pa.token_features).unwrap() {
            f.check_against(&micro).unwrap();
        }
        load_topic_polarities(&pa.topic_polarities).unwrap();
        VectorStore::load(&pa.topic_embeddings).unwrap();
        VectorStore::load(&pa.text_embeddings).unwrap();
        KnowledgeGraph::load_csv(&pa.graph).unwrap();
        let panels = load_panels(&pa.panel, &pa.bond_industries).unwrap();
        assert_eq!(panels.len(), 4);
        assert!(panels.iter().all(|p| p.credit_spread.iter().all(|s| *s > 0.0)));
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&small(1, 3.0)).unwrap();
        let b = generate(&small(2, 3.0)).unwrap();
        assert_ne!(a.panels[0].credit_spread, b.panels[0].credit_spread);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { n_bonds: 0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { noise_std: -1.0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }
}
