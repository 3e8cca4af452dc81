//! TransE pretraining and the on-disk embedding container.
//!
//! Binary layout (little-endian): magic `KGEM`, `u32` version, `u32` dim,
//! `u32` entity count, `u32` relation count, `u64` seed, then the entity and
//! relation matrices as row-major `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Split, Triple};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"KGEM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entities: Vec<f32>,
    relations: Vec<f32>,
    seed: u64,
}

impl EmbeddingStore {
    pub fn new(dim: usize, entities: Vec<f32>, relations: Vec<f32>, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if entities.len() % dim != 0 || relations.len() % dim != 0 {
            return Err(Error::Shape {
                op: "EmbeddingStore::new",
                detail: format!(
                    "matrix lengths {} / {} not divisible by dim {dim}",
                    entities.len(),
                    relations.len()
                ),
            });
        }
        if entities.iter().chain(&relations).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding entry".into()));
        }
        Ok(Self {
            dim,
            entities,
            relations,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len() / self.dim
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len() / self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entity(&self, e: EntityId) -> &[f32] {
        &self.entities[e.index() * self.dim..(e.index() + 1) * self.dim]
    }

    pub fn relation(&self, r: RelationId) -> &[f32] {
        &self.relations[r.index() * self.dim..(r.index() + 1) * self.dim]
    }

    pub fn entity_matrix(&self) -> &[f32] {
        &self.entities
    }

    pub fn relation_matrix(&self) -> &[f32] {
        &self.relations
    }

    pub fn entity_norm(&self, e: EntityId) -> f64 {
        l2(self.entity(e))
    }

    /// `‖s + r − o‖₂`.
    pub fn distance(&self, t: Triple) -> f64 {
        let (s, r, o) = (self.entity(t.source), self.relation(t.relation), self.entity(t.target));
        s.iter()
            .zip(r)
            .zip(o)
            .map(|((&s, &r), &o)| {
                let d = s as f64 + r as f64 - o as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Checks that this store fits `kg` (entities and raw relations) at `dim`.
    pub fn validate(&self, kg: &KnowledgeGraph, dim: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::DimensionMismatch {
                what: "embedding dimension",
                expected: dim,
                found: self.dim,
            });
        }
        if self.num_entities() != kg.num_entities() {
            return Err(Error::DimensionMismatch {
                what: "entity count",
                expected: kg.num_entities(),
                found: self.num_entities(),
            });
        }
        if self.num_relations() != kg.num_raw_relations() {
            return Err(Error::DimensionMismatch {
                what: "relation count",
                expected: kg.num_raw_relations(),
                found: self.num_relations(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(MAGIC)?;
        write(&VERSION.to_le_bytes())?;
        write(&(self.dim as u32).to_le_bytes())?;
        write(&(self.num_entities() as u32).to_le_bytes())?;
        write(&(self.num_relations() as u32).to_le_bytes())?;
        write(&self.seed.to_le_bytes())?;
        for v in self.entities.iter().chain(&self.relations) {
            write(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));
        let mut magic = [0u8; 4];
        read(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: not an embedding file", path.display())));
        }
        let mut u = [0u8; 4];
        read(&mut u)?;
        let version = u32::from_le_bytes(u);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported embedding file version {version}")));
        }
        let next_u32 = |read: &mut dyn FnMut(&mut [u8]) -> Result<()>| -> Result<usize> {
            let mut u = [0u8; 4];
            read(&mut u)?;
            Ok(u32::from_le_bytes(u) as usize)
        };
        let dim = next_u32(&mut read)?;
        let n_ent = next_u32(&mut read)?;
        let n_rel = next_u32(&mut read)?;
        let mut s = [0u8; 8];
        read(&mut s)?;
        let seed = u64::from_le_bytes(s);
        let mut floats = |n: usize| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; n * 4];
            read(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let entities = floats(n_ent * dim)?;
        let relations = floats(n_rel * dim)?;
        Self::new(dim, entities, relations, seed)
    }

    /// Human-readable dump: `token<TAB>v0 v1 ...` for entities then relations.
    pub fn write_text(&self, kg: &KnowledgeGraph, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut row = |tok: &str, v: &[f32]| -> Result<()> {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{tok}\t{}", vals.join(" ")).map_err(|e| Error::io(path, e))
        };
        for i in 0..self.num_entities() {
            let e = EntityId::from_index(i);
            row(kg.entity_token(e), self.entity(e))?;
        }
        for i in 0..self.num_relations() {
            let r = RelationId::from_index(i);
            row(kg.relation_token(r), self.relation(r))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 500,
            negatives: 1,
            seed: 0,
        }
    }
}

/// Trains TransE on the training split of `kg` (raw relations only).
pub fn train_transe(kg: &KnowledgeGraph, config: &TransEConfig) -> Result<EmbeddingStore> {
    train_transe_with(kg, config, |_, _, _| {})
}

/// Like [`train_transe`], calling `on_epoch(epoch, mean_loss, store)` after
/// each epoch's renormalization.
pub fn train_transe_with(
    kg: &KnowledgeGraph,
    config: &TransEConfig,
    mut on_epoch: impl FnMut(usize, f64, &EmbeddingStore),
) -> Result<EmbeddingStore> {
    let train = kg.triples(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    if config.dim == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
    }
    let d = config.dim;
    let n_ent = kg.num_entities();
    let n_rel = kg.num_raw_relations();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 6.0 / (d as f64).sqrt();
    let mut init = |n: usize| -> Vec<f32> {
        (0..n * d)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect()
    };
    let entities = init(n_ent);
    let mut relations = init(n_rel);
    for row in relations.chunks_mut(d) {
        let n = l2(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
    }
    let mut store = EmbeddingStore::new(d, entities, relations, config.seed)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let lr = config.learning_rate;
    let mut grad = vec![0.0f64; d];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in &order {
            let pos = train[i];
            for _ in 0..config.negatives.max(1) {
                let neg = corrupt(pos, n_ent, &mut rng);
                if neg == pos {
                    continue;
                }
                let dp = store.distance(pos);
                let dn = store.distance(neg);
                let loss = config.margin + dp - dn;
                count += 1;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "TransE loss diverged at epoch {epoch} on triple {pos:?} (d+={dp}, d-={dn})"
                    )));
                }
                if loss <= 0.0 {
                    continue;
                }
                total += loss;
                // positive: descend on ‖s+r−o‖
                store.unit_residual(pos, &mut grad);
                store.apply(pos, &grad, -lr);
                // negative: ascend on ‖s'+r−o'‖
                store.unit_residual(neg, &mut grad);
                store.apply(neg, &grad, lr);
            }
        }
        for row in store.entities.chunks_mut(d) {
            let n = l2(row);
            if n > 1.0 {
                row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
        }
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        on_epoch(epoch, mean, &store);
    }
    Ok(store)
}

fn corrupt(t: Triple, n_ent: usize, rng: &mut impl Rng) -> Triple {
    let e = EntityId::from_index(rng.random_range(0..n_ent));
    if rng.random_bool(0.5) {
        Triple::new(e, t.relation, t.target)
    } else {
        Triple::new(t.source, t.relation, e)
    }
}

impl EmbeddingStore {
    /// `(s + r − o) / ‖s + r − o‖`, zero when the residual vanishes.
    fn unit_residual(&self, t: Triple, out: &mut [f64]) {
        let (s, r, o) = (self.entity(t.source), self.relation(t.relation), self.entity(t.target));
        let mut n = 0.0;
        for k in 0..self.dim {
            out[k] = s[k] as f64 + r[k] as f64 - o[k] as f64;
            n += out[k] * out[k];
        }
        let n = n.sqrt();
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        out.iter_mut().for_each(|x| *x *= inv);
    }

    /// Moves `s` and `r` by `step·g` and `o` by `−step·g`.
    fn apply(&mut self, t: Triple, g: &[f64], step: f64) {
        let d = self.dim;
        for k in 0..d {
            let delta = step * g[k];
            self.entities[t.source.index() * d + k] += delta as f32;
            self.relations[t.relation.index() * d + k] += delta as f32;
            self.entities[t.target.index() * d + k] -= delta as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{GraphBuilder, GraphOptions};

    fn graph(edges: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let mut b = GraphBuilder::new();
        for (s, r, o) in edges {
            b.add(Split::Train, s, r, o);
        }
        b.build(GraphOptions::default()).unwrap()
    }

    #[test]
    fn zero_epochs_is_seeded_init() {
        let kg = graph(&[("a", "r", "b"), ("b", "r", "c")]);
        let cfg = TransEConfig {
            dim: 8,
            epochs: 0,
            seed: 7,
            ..Default::default()
        };
        let s1 = train_transe(&kg, &cfg).unwrap();
        let s2 = train_transe(&kg, &cfg).unwrap();
        assert_eq!(s1, s2);
        let bound = 6.0 / (8f32).sqrt();
        assert!(s1.entity_matrix().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn single_edge_prefers_true_direction() {
        let kg = graph(&[("a", "r", "b")]);
        let cfg = TransEConfig {
            dim: 50,
            epochs: 100,
            learning_rate: 0.01,
            seed: 1,
            ..Default::default()
        };
        let s = train_transe(&kg, &cfg).unwrap();
        let (a, b) = (kg.entity_id("a").unwrap(), kg.entity_id("b").unwrap());
        let r = kg.relation_id("r").unwrap();
        assert!(s.distance(Triple::new(a, r, b)) < s.distance(Triple::new(b, r, a)));
    }

    #[test]
    fn entity_rows_in_unit_ball() {
        let kg = graph(&[("a", "r", "b"), ("b", "s", "c"), ("c", "r", "d"), ("d", "s", "a")]);
        let cfg = TransEConfig {
            dim: 16,
            epochs: 20,
            learning_rate: 0.1,
            ..Default::default()
        };
        let s = train_transe(&kg, &cfg).unwrap();
        for i in 0..s.num_entities() {
            assert!(s.entity_norm(EntityId::from_index(i)) <= 1.0 + 1e-5);
        }
    }

    #[test]
    fn chain_translation_improves() {
        let kg = graph(&[("a", "r", "b"), ("b", "r", "c")]);
        let (a, c) = (kg.entity_id("a").unwrap(), kg.entity_id("c").unwrap());
        let r = kg.relation_id("r").unwrap();
        let two_hop = |s: &EmbeddingStore| -> f64 {
            let (a, r, c) = (s.entity(a), s.relation(r), s.entity(c));
            a.iter()
                .zip(r)
                .zip(c)
                .map(|((&a, &r), &c)| {
                    let d = a as f64 + 2.0 * r as f64 - c as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        let cfg = TransEConfig {
            dim: 20,
            epochs: 200,
            learning_rate: 0.01,
            seed: 3,
            ..Default::default()
        };
        let init = train_transe(&kg, &TransEConfig { epochs: 0, ..cfg.clone() }).unwrap();
        let trained = train_transe(&kg, &cfg).unwrap();
        assert!(two_hop(&trained) < two_hop(&init));
    }

    #[test]
    fn round_trip_and_stable_bytes() {
        let store = EmbeddingStore::new(
            50,
            (0..150).map(|i| (i as f32).sin()).collect(),
            (0..50).map(|i| i as f32 * 0.5).collect(),
            11,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        store.save(&p1).unwrap();
        store.save(&p2).unwrap();
        assert_eq!(EmbeddingStore::load(&p1).unwrap(), store);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn dimension_mismatch_detected() {
        let kg = graph(&[("a", "r", "b"), ("b", "r", "c")]);
        let s = train_transe(&kg, &TransEConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(s.validate(&kg, 50).is_ok());
        assert!(matches!(
            s.validate(&kg, 64),
            Err(Error::DimensionMismatch { expected: 64, found: 50, .. })
        ));
    }
}
