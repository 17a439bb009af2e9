//! Fixed-dimension embedding store with exact cosine top-k retrieval.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopicMatch {
    /// Registry index of the matched entry.
    pub index: usize,
    pub similarity: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector("<query>".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dim: usize,
}

/// Immutable store; entries keep their insertion order as registry index.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    keys: Vec<String>,
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
    by_key: HashMap<String, usize>,
}

impl VectorStore {
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut store = VectorStore {
            dim,
            keys: Vec::with_capacity(records.len()),
            vectors: Vec::with_capacity(records.len()),
            norms: Vec::with_capacity(records.len()),
            by_key: HashMap::with_capacity(records.len()),
        };
        for r in records {
            store.push(r)?;
        }
        Ok(store)
    }

    fn push(&mut self, r: EmbeddingRecord) -> Result<()> {
        if r.vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: r.vector.len(),
            });
        }
        if r.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {}", r.key)));
        }
        let n = norm(&r.vector);
        if n == 0.0 {
            return Err(Error::ZeroVector(r.key));
        }
        if self.by_key.insert(r.key.clone(), self.keys.len()).is_some() {
            return Err(Error::DuplicateName(r.key));
        }
        self.keys.push(r.key);
        self.vectors.push(r.vector);
        self.norms.push(n);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, index: usize) -> &str {
        &self.keys[index]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.by_key.get(key).copied()
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        &self.vectors[index]
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.index_of(key).map(|i| self.vectors[i].as_slice())
    }

    /// Cosine similarity of `query` against every entry, in registry order.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let nq = norm(query);
        if nq == 0.0 {
            return Err(Error::ZeroVector("<query>".into()));
        }
        Ok(self
            .vectors
            .iter()
            .zip(&self.norms)
            .map(|(v, nv)| {
                let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
                (dot / (nq * nv)).clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// The `k` most similar entries, similarity descending, ties by index.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<TopicMatch>> {
        if self.is_empty() {
            return Err(Error::Empty("vector store"));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let sims = self.similarities(query)?;
        // Bounded insertion keeps the best k without sorting the whole list.
        let mut best: Vec<TopicMatch> = Vec::with_capacity(k + 1);
        for (index, &similarity) in sims.iter().enumerate() {
            if best.len() == k && similarity <= best[k - 1].similarity {
                continue;
            }
            let pos = best
                .iter()
                .position(|m| similarity > m.similarity)
                .unwrap_or(best.len());
            best.insert(pos, TopicMatch { index, similarity });
            best.truncate(k);
        }
        Ok(best)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut lines = BufReader::new(File::open(path)?).lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line)
                        .map_err(|e| Error::schema(path, i + 1, format!("bad header: {e}")))?;
                }
                None => return Err(Error::schema(path, 1, "missing {\"dim\": ...} header")),
            }
        };
        let mut store = VectorStore::new(header.dim, Vec::new())?;
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line)
                .map_err(|e| Error::schema(path, i + 1, e.to_string()))?;
            store
                .push(rec)
                .map_err(|e| Error::schema(path, i + 1, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &Header { dim: self.dim })?;
        out.write_all(b"\n")?;
        for (key, vector) in self.keys.iter().zip(&self.vectors) {
            serde_json::to_writer(
                &mut out,
                &EmbeddingRecord {
                    key: key.clone(),
                    vector: vector.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(key: &str, v: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord {
            key: key.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[3.0, -1.0, 2.0], &[3.0, -1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector(_))));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn top_k_truncates_and_finds_self() {
        let store = VectorStore::new(
            2,
            vec![rec("a", &[1.0, 0.0]), rec("b", &[0.0, 1.0]), rec("c", &[1.0, 1.0])],
        )
        .unwrap();
        let m = store.top_k(&[0.0, 2.0], 5).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(store.key(m[0].index), "b");
        assert!((m[0].similarity - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_registry_index() {
        let store = VectorStore::new(
            2,
            vec![rec("x", &[1.0, 0.0]), rec("y", &[2.0, 0.0]), rec("z", &[0.0, 1.0])],
        )
        .unwrap();
        let m = store.top_k(&[1.0, 0.0], 2).unwrap();
        assert_eq!((m[0].index, m[1].index), (0, 1));
    }

    #[test]
    fn store_rejects_bad_records() {
        assert!(VectorStore::new(2, vec![rec("a", &[0.0, 0.0])]).is_err());
        assert!(VectorStore::new(2, vec![rec("a", &[1.0])]).is_err());
        assert!(VectorStore::new(2, vec![rec("a", &[1.0, 0.0]), rec("a", &[0.0, 1.0])]).is_err());
        let empty = VectorStore::new(2, vec![]).unwrap();
        assert!(matches!(empty.top_k(&[1.0, 0.0], 5), Err(Error::Empty(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let store =
            VectorStore::new(3, vec![rec("t1", &[0.5, 0.25, -1.0]), rec("t2", &[1.0, 2.0, 3.0])])
                .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        store.save(f.path()).unwrap();
        assert_eq!(VectorStore::load(f.path()).unwrap(), store);
    }

    /// Exhaustive scan: sort every similarity, take the prefix.
    fn oracle(store: &VectorStore, q: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(usize, f64)> = (0..store.len())
            .map(|i| {
                let v = store.vector(i);
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                (i, dot / (nv * nq))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(i, _)| i).collect()
    }

    #[test]
    fn top_k_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let records = (0..1000)
            .map(|i| rec(&format!("k{i}"), &(0..16).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let store = VectorStore::new(16, records).unwrap();
        for _ in 0..20 {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got: Vec<usize> = store.top_k(&q, 5).unwrap().iter().map(|m| m.index).collect();
            assert_eq!(got, oracle(&store, &q, 5));
        }
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            u in prop::collection::vec(-10.0f64..10.0, 4),
            v in prop::collection::vec(-10.0f64..10.0, 4),
            alpha in 0.001f64..1000.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let scaled: Vec<f64> = u.iter().map(|x| alpha * x).collect();
            let a = cosine(&u, &v).unwrap();
            prop_assert!((a - cosine(&scaled, &v).unwrap()).abs() < 1e-12);
            prop_assert!((a - cosine(&v, &u).unwrap()).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn top_k_is_prefix_of_sorted(
            vecs in prop::collection::vec(prop::collection::vec(-3i32..4, 3), 1..40),
            q in prop::collection::vec(-3i32..4, 3),
            k in 1usize..8,
        ) {
            let recs: Vec<EmbeddingRecord> = vecs
                .iter()
                .enumerate()
                .filter(|(_, v)| v.iter().any(|x| *x != 0))
                .map(|(i, v)| rec(&format!("k{i}"), &v.iter().map(|x| *x as f64).collect::<Vec<_>>()))
                .collect();
            prop_assume!(!recs.is_empty() && q.iter().any(|x| *x != 0));
            let store = VectorStore::new(3, recs).unwrap();
            let qf: Vec<f64> = q.iter().map(|x| *x as f64).collect();
            let got: Vec<usize> = store.top_k(&qf, k).unwrap().iter().map(|m| m.index).collect();
            prop_assert_eq!(got.len(), k.min(store.len()));
            // Integer vectors make exact ties common; compare on similarity
            // values, allowing index order to follow the tie rule.
            let exp = oracle(&store, &qf, k);
            let sims = store.similarities(&qf).unwrap();
            for (g, e) in got.iter().zip(&exp) {
                prop_assert!((sims[*g] - sims[*e]).abs() < 1e-12);
            }
        }
    }
}
