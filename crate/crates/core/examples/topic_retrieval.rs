//! Exact cosine top-k over an embedding store, saved to and reloaded from
//! JSONL.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sentispread::vecstore::{EmbeddingRecord, VectorStore};

fn main() -> sentispread::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let records: Vec<EmbeddingRecord> = (0..500)
        .map(|i| EmbeddingRecord {
            key: format!("topic-{i:03}"),
            vector: (0..16).map(|_| nd.sample(&mut rng)).collect(),
        })
        .collect();
    let store = VectorStore::new(16, records)?;
    let path = std::env::temp_dir().join("sentispread_topics.jsonl");
    store.save(&path)?;
    let store = VectorStore::load(&path)?;

    // a perturbed copy of topic 42 should find it first
    let query: Vec<f64> = store.get("topic-042").unwrap().iter().map(|v| v + 0.3 * nd.sample(&mut rng)).collect();
    for m in store.top_k(&query, 5)? {
        println!("{}  cos {:.4}", store.key(m.index), m.similarity);
    }
    Ok(())
}
