//! Push topic-level polarity through a small knowledge graph to industries
//! and then to bonds.

use chrono::NaiveDate;
use sentispread::corpus::build_calendar;
use sentispread::meso::{run_meso, KnowledgeGraph, MesoConfig, TopicPolarity};
use sentispread::vecstore::{EmbeddingRecord, VectorStore};

fn rec(key: &str, v: &[f64]) -> EmbeddingRecord {
    EmbeddingRecord {
        key: key.into(),
        vector: v.to_vec(),
    }
}

fn main() -> sentispread::Result<()> {
    let d0 = NaiveDate::from_ymd_opt(2023, 5, 1).unwrap();
    let cal = build_calendar(d0, d0 + chrono::Duration::days(2))?;
    let graph = KnowledgeGraph::new(
        vec!["Airlines".into(), "Insurance".into(), "Utilities".into()],
        vec!["hurricane".into(), "fuel prices".into(), "rate cuts".into()],
        vec![
            vec![true, true, false],
            vec![true, false, true],
            vec![false, false, true],
        ],
    )?;
    let topics = VectorStore::new(
        3,
        vec![
            rec("hurricane", &[1.0, 0.0, 0.0]),
            rec("fuel prices", &[0.0, 1.0, 0.0]),
            rec("rate cuts", &[0.0, 0.0, 1.0]),
        ],
    )?;
    let texts = VectorStore::new(
        3,
        vec![
            rec("storm-warning", &[0.9, 0.1, 0.0]),
            rec("oil-rally", &[0.1, 1.0, 0.2]),
            rec("fed-cut", &[0.0, 0.1, 1.0]),
        ],
    )?;
    let polarities = vec![
        TopicPolarity {
            text_id: "storm-warning".into(),
            date: d0,
            polarity: -1,
        },
        TopicPolarity {
            text_id: "oil-rally".into(),
            date: d0 + chrono::Duration::days(1),
            polarity: -1,
        },
        TopicPolarity {
            text_id: "fed-cut".into(),
            date: d0 + chrono::Duration::days(2),
            polarity: 1,
        },
    ];
    let bonds = vec![
        ("AIR-2030".to_string(), vec!["Airlines".to_string()]),
        ("MIXED-2028".to_string(), vec!["Insurance".to_string(), "Utilities".to_string()]),
    ];
    let out = run_meso(
        &polarities,
        &texts,
        &topics,
        &graph,
        &bonds,
        &cal,
        &MesoConfig {
            top_k: 1,
            ..Default::default()
        },
    )?;
    for (i, ind) in graph.industries().iter().enumerate() {
        println!("{ind:>10}: raw {:?}  standardized {:.3?}", out.beta_raw.row(i), out.beta.matrix.row(i));
    }
    for (i, (b, _)) in bonds.iter().enumerate() {
        println!("{b:>10}: {:.3?}", out.bonds.row(i));
    }
    Ok(())
}
