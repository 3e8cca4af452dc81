//! Small generated graphs with planted reasoning rules and a planted
//! cluster assignment, for learning tests and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterMap;
use crate::embed::{train_transe, EmbeddingStore, TransEConfig};
use crate::kg::{ClusterId, GraphBuilder, GraphOptions, KnowledgeGraph, RelationId, Split};
use crate::Result;

/// A generated graph, its planted clusters, and the relation to query.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub kg: KnowledgeGraph,
    pub assignment: Vec<ClusterId>,
    pub query_relation: RelationId,
}

impl SynthWorld {
    /// Pretrains embeddings and builds the cluster map on the planted
    /// assignment.
    pub fn embed_and_cluster(&self, transe: &TransEConfig) -> Result<(EmbeddingStore, ClusterMap)> {
        let store = train_transe(&self.kg, transe)?;
        let map = ClusterMap::from_assignment(&self.kg, &store, self.assignment.clone())?;
        Ok((store, map))
    }
}

/// Split sizes for the query-relation facts; the rest go to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoldOut {
    pub dev: usize,
    pub test: usize,
}

impl Default for HoldOut {
    fn default() -> Self {
        Self { dev: 10, test: 10 }
    }
}

fn split_queries(
    b: &mut GraphBuilder,
    mut facts: Vec<(String, String)>,
    relation: &str,
    hold: HoldOut,
    rng: &mut impl Rng,
) {
    facts.shuffle(rng);
    for (k, (s, o)) in facts.iter().enumerate() {
        let split = if k < hold.dev {
            Split::Dev
        } else if k < hold.dev + hold.test {
            Split::Test
        } else {
            Split::Train
        };
        b.add(split, s, relation, o);
    }
}

fn finish(
    b: GraphBuilder,
    tokens: &[(String, u32)],
    query_relation: &str,
) -> Result<SynthWorld> {
    let kg = b.build(GraphOptions::default())?;
    let mut assignment = vec![ClusterId(0); kg.num_entities()];
    for (tok, c) in tokens {
        assignment[kg.entity_id(tok)?.index()] = ClusterId(*c);
    }
    let query_relation = kg.relation_id(query_relation)?;
    Ok(SynthWorld {
        kg,
        assignment,
        query_relation,
    })
}

/// Two groups `a*` and `b*` of `group` entities each. `r1` is a random
/// bijection from the `a` group onto the `b` group and `r2` a random
/// fixed-point-free permutation of the `b` group; the query relation `rq`
/// holds exactly when `r1` followed by `r2` does, so every source is an `a`
/// entity and every answer a `b` entity two hops away. Planted clusters
/// are the groups, and both relations keep the groups apart under
/// translation embeddings.
pub fn composition_world(group: usize, hold: HoldOut, seed: u64) -> Result<SynthWorld> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = |i: usize| format!("a{i}");
    let b = |i: usize| format!("b{i}");
    let mut r1: Vec<usize> = (0..group).collect();
    r1.shuffle(&mut rng);
    // A random cyclic order has no fixed points when group > 1.
    let mut cycle: Vec<usize> = (0..group).collect();
    cycle.shuffle(&mut rng);
    let mut r2 = vec![0usize; group];
    for k in 0..group {
        r2[cycle[k]] = cycle[(k + 1) % group];
    }
    let mut builder = GraphBuilder::new();
    for i in 0..group {
        builder.add(Split::Train, &a(i), "r1", &b(r1[i]));
    }
    for i in 0..group {
        builder.add(Split::Train, &b(i), "r2", &b(r2[i]));
    }
    let facts = (0..group).map(|i| (a(i), b(r2[r1[i]]))).collect();
    split_queries(&mut builder, facts, "rq", hold, &mut rng);
    let tokens: Vec<_> = (0..group)
        .map(|i| (a(i), 0))
        .chain((0..group).map(|i| (b(i), 1)))
        .collect();
    finish(builder, &tokens, "rq")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub clusters: usize,
    pub cluster_size: usize,
    /// Hops between a source and its answer.
    pub hops: usize,
    /// Source clusters are `0..source_clusters`.
    pub source_clusters: usize,
    /// Extra `next` edges per entity into its own cluster.
    pub lateral: usize,
    /// Extra `next` edges per entity into the previous cluster.
    pub backward: usize,
    pub hold: HoldOut,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            cluster_size: 25,
            hops: 5,
            source_clusters: 3,
            lateral: 1,
            backward: 1,
            hold: HoldOut { dev: 15, test: 15 },
        }
    }
}

/// `clusters` blocks of `cluster_size` entities (`c{k}_{i}`) joined into a
/// chain: relation `next` maps each block onto the following one by a
/// random bijection, and the same relation also adds lateral and backward
/// distractor edges. The query relation `far` links each entity of the
/// first `source_clusters` blocks to the entity exactly `hops` forward
/// steps away. Planted clusters are the blocks.
///
/// `far` facts are labels only: their edges are hidden from the walkable
/// adjacency, so no walk can jump to an answer block through another
/// source's training fact.
pub fn chain_world(cfg: ChainConfig, seed: u64) -> Result<SynthWorld> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, m) = (cfg.clusters, cfg.cluster_size);
    let name = |c: usize, i: usize| format!("c{c}_{i}");
    let mut forward: Vec<Vec<usize>> = Vec::with_capacity(k.saturating_sub(1));
    let mut b = GraphBuilder::new();
    for c in 0..k.saturating_sub(1) {
        let mut p: Vec<usize> = (0..m).collect();
        p.shuffle(&mut rng);
        for i in 0..m {
            b.add(Split::Train, &name(c, i), "next", &name(c + 1, p[i]));
        }
        forward.push(p);
    }
    for c in 0..k {
        for i in 0..m {
            for _ in 0..cfg.lateral {
                let j = (i + rng.random_range(1..m)) % m;
                b.add(Split::Train, &name(c, i), "next", &name(c, j));
            }
            if c > 0 {
                for _ in 0..cfg.backward {
                    let j = rng.random_range(0..m);
                    b.add(Split::Train, &name(c, i), "next", &name(c - 1, j));
                }
            }
        }
    }
    let mut facts = Vec::new();
    for c in 0..cfg.source_clusters.min(k.saturating_sub(cfg.hops)) {
        for i in 0..m {
            let mut j = i;
            for step in 0..cfg.hops {
                j = forward[c + step][j];
            }
            facts.push((name(c, i), name(c + cfg.hops, j)));
        }
    }
    split_queries(&mut b, facts, "far", cfg.hold, &mut rng);
    let tokens: Vec<_> = (0..k)
        .flat_map(|c| (0..m).map(move |i| (name(c, i), c as u32)))
        .collect();
    let mut world = finish(b, &tokens, "far")?;
    let hidden: Vec<_> = world
        .kg
        .triples(Split::Train)
        .iter()
        .copied()
        .filter(|t| t.relation == world.query_relation)
        .collect();
    for t in hidden {
        world.kg.remove_edge(t);
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{AnswerIndex, EntityId, Triple};

    #[test]
    fn composition_world_obeys_its_rule() {
        let w = composition_world(25, HoldOut { dev: 10, test: 0 }, 3).unwrap();
        let kg = &w.kg;
        assert_eq!(kg.num_entities(), 50);
        assert_eq!(kg.num_raw_relations(), 3);
        let r1 = kg.relation_id("r1").unwrap();
        let r2 = kg.relation_id("r2").unwrap();
        let all = [Split::Train, Split::Dev, Split::Test];
        let total: usize = all.iter().map(|&s| kg.triples(s).len()).sum();
        assert_eq!(total, 50 + 25);
        assert_eq!(kg.triples(Split::Dev).len(), 10);
        let hop = |e: EntityId, r| {
            kg.all_outgoing(e)
                .iter()
                .find(|&&(rr, _)| rr == r)
                .map(|&(_, o)| o)
                .unwrap()
        };
        for s in all {
            for t in kg.triples(s).iter().filter(|t| t.relation == w.query_relation) {
                let mid = hop(t.source, r1);
                assert_eq!(hop(mid, r2), t.target);
                assert_ne!(mid, t.target);
                assert_eq!(w.assignment[t.source.index()], ClusterId(0));
                assert_eq!(w.assignment[t.target.index()], ClusterId(1));
            }
        }
        for t in kg.triples(Split::Dev) {
            assert!(!kg.has_edge(*t));
        }
    }

    #[test]
    fn chain_world_answers_are_exact_forward_hops() {
        let w = chain_world(ChainConfig::default(), 1).unwrap();
        let kg = &w.kg;
        assert_eq!(kg.num_entities(), 200);
        let far = w.query_relation;
        let idx = AnswerIndex::from_splits(kg, &[Split::Train, Split::Dev, Split::Test]);
        let mut n = 0;
        for s in [Split::Train, Split::Dev, Split::Test] {
            for t in kg.triples(s).iter().filter(|t| t.relation == far) {
                n += 1;
                let (cs, ct) = (w.assignment[t.source.index()].0, w.assignment[t.target.index()].0);
                assert!(cs < 3);
                assert_eq!(ct, cs + 5);
                assert_eq!(idx.answers(t.source, far).unwrap().len(), 1);
            }
        }
        assert_eq!(n, 75);
        assert_eq!(kg.triples(Split::Test).len(), 15);
        let next = kg.relation_id("next").unwrap();
        let e = kg.entity_id("c3_0").unwrap();
        let forward = kg
            .all_outgoing(e)
            .iter()
            .filter(|&&(r, o)| r == next && w.assignment[o.index()].0 == 4)
            .count();
        assert_eq!(forward, 1);
        assert!(!kg.has_edge(Triple::new(e, far, e)));
        for t in kg.triples(Split::Train).iter().filter(|t| t.relation == far) {
            assert!(!kg.has_edge(*t));
        }
        assert_eq!(kg.removed_edges().count(), 45);
    }
}
