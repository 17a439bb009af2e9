//! End-to-end sentiment construction: head training, firm-level scoring,
//! industry propagation and composition. The CLI stages call the same
//! functions, so running them one by one gives identical artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::absa::{
    build_alpha_matrix, labeled_examples, load_token_features, score_texts, train_head, AbsaHead, HeadConfig,
    PerTextScore, TokenFeatureSet,
};
use crate::backtest::{bond_sentiment, BacktestConfig, BondSentiment};
use crate::composite::{build_composite, CompositeSeries};
use crate::corpus::{build_calendar, ingest_texts, load_panels, BondPanel, Calendar, Stream, TextCollection};
use crate::error::{Error, Result};
use crate::matrix::SentimentMatrix;
use crate::meso::{load_topic_polarities, run_meso, KnowledgeGraph, MesoConfig, MesoOutput, TopicPolarity};
use crate::synth::{SynthData, SynthPaths};
use crate::vecstore::VectorStore;
use crate::wavelet::WaveletSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub head: HeadConfig,
    pub meso: MesoConfig,
    pub wavelet: WaveletSpec,
    pub backtest: BacktestConfig,
}

/// Everything the sentiment stages read.
#[derive(Debug, Clone)]
pub struct SentimentInputs {
    pub calendar: Calendar,
    pub micro_texts: TextCollection,
    pub token_features: Vec<TokenFeatureSet>,
    pub topic_polarities: Vec<TopicPolarity>,
    pub text_embeddings: VectorStore,
    pub topic_embeddings: VectorStore,
    pub graph: KnowledgeGraph,
    pub panels: Vec<BondPanel>,
}

/// Calendar spanning every panel date.
pub fn panel_calendar(panels: &[BondPanel]) -> Result<Calendar> {
    let days = panels.iter().flat_map(|p| p.dates.iter().copied());
    let lo = days.clone().min().ok_or(Error::Empty("panels"))?;
    let hi = days.max().ok_or(Error::Empty("panels"))?;
    build_calendar(lo, hi)
}

impl SentimentInputs {
    pub fn from_synth(data: &SynthData) -> Result<Self> {
        Ok(SentimentInputs {
            calendar: data.calendar,
            micro_texts: TextCollection::new(data.micro_texts.clone())?,
            token_features: data.token_features.clone(),
            topic_polarities: data.topic_polarities.clone(),
            text_embeddings: data.text_store()?,
            topic_embeddings: data.topic_store()?,
            graph: data.graph.clone(),
            panels: data.panels.clone(),
        })
    }

    /// Reads the standard file layout of a data directory. The calendar is
    /// taken from the panel dates.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let p = SynthPaths::in_dir(dir);
        for f in [
            &p.panel,
            &p.bond_industries,
            &p.micro_texts,
            &p.token_features,
            &p.topic_polarities,
            &p.text_embeddings,
            &p.topic_embeddings,
            &p.graph,
        ] {
            if !f.exists() {
                return Err(Error::Invalid(format!(
                    "{} not found; run `synth` or point --data-dir at the inputs",
                    f.display()
                )));
            }
        }
        let panels = load_panels(&p.panel, &p.bond_industries)?;
        let calendar = panel_calendar(&panels)?;
        let micro_texts = ingest_texts(&p.micro_texts, Stream::Micro, Some(&calendar))?;
        let token_features = load_token_features(&p.token_features)?;
        for f in &token_features {
            f.check_against(&micro_texts)?;
        }
        Ok(SentimentInputs {
            calendar,
            micro_texts,
            token_features,
            topic_polarities: load_topic_polarities(&p.topic_polarities)?,
            text_embeddings: VectorStore::load(&p.text_embeddings)?,
            topic_embeddings: VectorStore::load(&p.topic_embeddings)?,
            graph: KnowledgeGraph::load_csv(&p.graph)?,
            panels,
        })
    }

    pub fn bond_ids(&self) -> Vec<String> {
        self.panels.iter().map(|p| p.bond_id.clone()).collect()
    }

    pub fn bond_industries(&self) -> Vec<(String, Vec<String>)> {
        self.panels
            .iter()
            .map(|p| (p.bond_id.clone(), p.industry_ids.clone()))
            .collect()
    }
}

pub fn train_absa(inputs: &SentimentInputs, cfg: &HeadConfig) -> Result<AbsaHead> {
    let data = labeled_examples(&inputs.micro_texts, &inputs.token_features)?;
    log::info!("training firm-level head on {} labeled pairs", data.len());
    train_head(&data, cfg)
}

pub fn score_micro(inputs: &SentimentInputs, head: &AbsaHead) -> Result<(Vec<PerTextScore>, SentimentMatrix)> {
    let scores = score_texts(head, &inputs.micro_texts, &inputs.token_features)?;
    let alpha = build_alpha_matrix(&scores, &inputs.bond_ids(), &inputs.calendar)?;
    Ok((scores, alpha))
}

pub fn score_meso(inputs: &SentimentInputs, cfg: &MesoConfig) -> Result<MesoOutput> {
    let out = run_meso(
        &inputs.topic_polarities,
        &inputs.text_embeddings,
        &inputs.topic_embeddings,
        &inputs.graph,
        &inputs.bond_industries(),
        &inputs.calendar,
        cfg,
    )?;
    if !out.beta.zero_variance.is_empty() {
        log::warn!("zero-variance industries set to 0: {:?}", out.beta.zero_variance);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SentimentOutput {
    pub head: AbsaHead,
    pub scores: Vec<PerTextScore>,
    pub alpha: SentimentMatrix,
    pub meso: MesoOutput,
    pub composite: BTreeMap<String, CompositeSeries>,
    pub sentiment: BTreeMap<String, BondSentiment>,
}

/// Runs head training through composition. `head` skips training when given.
pub fn run_sentiment(inputs: &SentimentInputs, cfg: &PipelineConfig, head: Option<AbsaHead>) -> Result<SentimentOutput> {
    let head = match head {
        Some(h) => h,
        None => train_absa(inputs, &cfg.head)?,
    };
    let (scores, alpha) = score_micro(inputs, &head)?;
    let meso = score_meso(inputs, &cfg.meso)?;
    let composite = build_composite(&alpha, &meso.bonds, &inputs.bond_ids(), &cfg.wavelet)?;
    let sentiment = bond_sentiment(&alpha, &meso.bonds, &composite, &cfg.wavelet)?;
    Ok(SentimentOutput {
        head,
        scores,
        alpha,
        meso,
        composite,
        sentiment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::pearson;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn recovered_composite_tracks_latent() {
        let data = generate(&SynthConfig {
            n_bonds: 12,
            ..Default::default()
        })
        .unwrap();
        let inputs = SentimentInputs::from_synth(&data).unwrap();
        let cfg = PipelineConfig {
            head: HeadConfig {
                epochs: 20,
                lr: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = run_sentiment(&inputs, &cfg, None).unwrap();
        let (mut x, mut y) = (vec![], vec![]);
        for (b, c) in &out.composite {
            x.extend_from_slice(&c.smoothed);
            y.extend_from_slice(&data.truth.bond_latent[b]);
        }
        let r = pearson(&x, &y).unwrap();
        assert!(r > 0.3, "{r}");
    }

    #[test]
    fn file_round_trip_matches_in_memory() {
        let data = generate(&SynthConfig {
            n_bonds: 5,
            n_days: 80,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        let a = SentimentInputs::from_synth(&data).unwrap();
        let b = SentimentInputs::load(dir.path()).unwrap();
        assert_eq!(a.calendar, b.calendar);
        assert_eq!(a.panels, b.panels);
        let cfg = PipelineConfig {
            head: HeadConfig {
                epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let x = run_sentiment(&a, &cfg, None).unwrap();
        let y = run_sentiment(&b, &cfg, None).unwrap();
        assert_eq!(x.scores, y.scores);
        assert_eq!(x.alpha, y.alpha);
        assert_eq!(x.meso.beta_raw.values(), y.meso.beta_raw.values());
        assert_eq!(x.composite, y.composite);
    }
}
