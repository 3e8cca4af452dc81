//! Entity clustering and the cluster-level connection graph.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::embed::EmbeddingStore;
use crate::kg::{ClusterId, EntityId, KnowledgeGraph};
use crate::{Error, Result};

/// A cluster-level move: stay put, or walk to a neighboring cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClusterAction {
    Stop,
    Move(ClusterId),
}

impl ClusterAction {
    /// Cluster reached by taking this action from `from`.
    pub fn target(self, from: ClusterId) -> ClusterId {
        match self {
            ClusterAction::Stop => from,
            ClusterAction::Move(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KMeansInit {
    Random,
    KMeansPlusPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once the relative centroid shift drops below this.
    pub tolerance: f64,
    pub seed: u64,
    pub init: KMeansInit,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tolerance: 1e-4,
            seed: 0,
            init: KMeansInit::KMeansPlusPlus,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    pub assignment: Vec<ClusterId>,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// Lloyd's algorithm over rows of `points` (each `dim` wide).
pub fn kmeans_points(points: &[f32], dim: usize, k: usize, config: &KMeansConfig) -> Result<KMeansOutcome> {
    let n = points.len() / dim;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("cluster count must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cluster count {k} exceeds number of points {n}"
        )));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = match config.init {
        KMeansInit::Random => {
            let picks = rand::seq::index::sample(&mut rng, n, k);
            picks
                .iter()
                .flat_map(|i| row(i).iter().map(|&v| v as f64))
                .collect::<Vec<f64>>()
        }
        KMeansInit::KMeansPlusPlus => plus_plus(points, dim, k, &mut rng),
    };

    let assign = |centroids: &[f64]| -> Vec<(usize, f64)> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let p = row(i);
                let mut best = (0usize, f64::INFINITY);
                for c in 0..k {
                    let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best
            })
            .collect()
    };

    let mut wcss_history = Vec::new();
    let mut assignment;
    let mut iterations = 0;
    loop {
        let mut labels = assign(&centroids);
        repair_empty(&mut labels, &mut centroids, points, dim, k);
        wcss_history.push(labels.iter().map(|l| l.1).sum());
        assignment = labels.iter().map(|l| l.0).collect::<Vec<_>>();
        if iterations >= config.max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v as f64;
            }
        }
        let mut shift = 0.0;
        let mut norm = 0.0;
        for c in 0..k {
            for j in 0..dim {
                let new = sums[c * dim + j] / counts[c] as f64;
                let old = centroids[c * dim + j];
                shift += (new - old) * (new - old);
                norm += new * new;
                centroids[c * dim + j] = new;
            }
        }
        let rel = shift.sqrt() / norm.sqrt().max(1e-12);
        debug!(iteration = iterations, relative_shift = rel, "k-means step");
        if rel < config.tolerance {
            // one more assignment against the settled centroids
            let mut labels = assign(&centroids);
            repair_empty(&mut labels, &mut centroids, points, dim, k);
            wcss_history.push(labels.iter().map(|l| l.1).sum());
            assignment = labels.iter().map(|l| l.0).collect();
            break;
        }
    }
    Ok(KMeansOutcome {
        assignment: assignment.into_iter().map(ClusterId::from_index).collect(),
        centroids,
        iterations,
        wcss_history,
    })
}

fn plus_plus(points: &[f32], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut chosen = vec![rng.random_range(0..n)];
    let to_f64 = |i: usize| row(i).iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &to_f64(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // all remaining mass is zero: duplicates only, pick any unchosen point
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        let c = to_f64(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        dist[next] = 0.0;
    }
    chosen.into_iter().flat_map(to_f64).collect()
}

/// Reseeds each empty cluster with the point farthest from its centroid,
/// taken from a cluster that keeps at least one member.
fn repair_empty(labels: &mut [(usize, f64)], centroids: &mut [f64], points: &[f32], dim: usize, k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for l in labels.iter() {
            counts[l.0] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| counts[l.0] > 1)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("k <= n guarantees a donor cluster");
        for j in 0..dim {
            centroids[empty * dim + j] = points[far * dim + j] as f64;
        }
        labels[far] = (empty, 0.0);
    }
}

/// Entity-to-cluster assignment, the cluster graph, and cluster embeddings.
#[derive(Debug, Clone)]
pub struct ClusterMap {
    assignment: Vec<ClusterId>,
    members: Vec<Vec<EntityId>>,
    dim: usize,
    /// `N × dim` member means of the pretrained entity embeddings.
    means: Vec<f32>,
    adjacency: Vec<Vec<ClusterId>>,
}

impl ClusterMap {
    /// Builds the map from a total assignment. Cluster ids must be dense and
    /// every cluster non-empty.
    pub fn from_assignment(
        kg: &KnowledgeGraph,
        store: &EmbeddingStore,
        assignment: Vec<ClusterId>,
    ) -> Result<Self> {
        if assignment.len() != kg.num_entities() {
            return Err(Error::DimensionMismatch {
                what: "assignment length",
                expected: kg.num_entities(),
                found: assignment.len(),
            });
        }
        if store.num_entities() != kg.num_entities() {
            return Err(Error::DimensionMismatch {
                what: "embedding entity count",
                expected: kg.num_entities(),
                found: store.num_entities(),
            });
        }
        let n = assignment.iter().map(|c| c.index() + 1).max().unwrap_or(0);
        let mut members = vec![Vec::new(); n];
        for (e, c) in assignment.iter().enumerate() {
            members[c.index()].push(EntityId::from_index(e));
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("cluster {c} has no members")));
        }
        let dim = store.dim();
        let mut means = vec![0.0f32; n * dim];
        for (c, ms) in members.iter().enumerate() {
            let mut acc = vec![0.0f64; dim];
            for &e in ms {
                for (a, &v) in acc.iter_mut().zip(store.entity(e)) {
                    *a += v as f64;
                }
            }
            for j in 0..dim {
                means[c * dim + j] = (acc[j] / ms.len() as f64) as f32;
            }
        }
        let adjacency = build_cluster_graph(kg, &assignment, n);
        Ok(Self {
            assignment,
            members,
            dim,
            means,
            adjacency,
        })
    }

    /// Runs k-means on the entity rows of `store` and builds the map.
    pub fn kmeans(
        kg: &KnowledgeGraph,
        store: &EmbeddingStore,
        n_clusters: usize,
        config: &KMeansConfig,
    ) -> Result<(Self, KMeansOutcome)> {
        let out = kmeans_points(store.entity_matrix(), store.dim(), n_clusters, config)?;
        let map = Self::from_assignment(kg, store, out.assignment.clone())?;
        Ok((map, out))
    }

    /// Re-derives the cluster graph from the current (possibly ablated) adjacency.
    pub fn rebuild_graph(&mut self, kg: &KnowledgeGraph) {
        self.adjacency = build_cluster_graph(kg, &self.assignment, self.members.len());
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cluster_of(&self, e: EntityId) -> ClusterId {
        self.assignment[e.index()]
    }

    pub fn assignment(&self) -> &[ClusterId] {
        &self.assignment
    }

    pub fn members(&self, c: ClusterId) -> &[EntityId] {
        &self.members[c.index()]
    }

    pub fn neighbors(&self, c: ClusterId) -> &[ClusterId] {
        &self.adjacency[c.index()]
    }

    /// `STOP` followed by every neighbor in id order.
    pub fn actions(&self, c: ClusterId) -> Vec<ClusterAction> {
        std::iter::once(ClusterAction::Stop)
            .chain(self.neighbors(c).iter().map(|&n| ClusterAction::Move(n)))
            .collect()
    }

    /// Mean of the member entities' pretrained embeddings (`dim` wide).
    pub fn mean(&self, c: ClusterId) -> &[f32] {
        &self.means[c.index() * self.dim..(c.index() + 1) * self.dim]
    }

    /// The mean lifted to `2·dim` by concatenation with itself.
    pub fn cluster_embedding(&self, c: ClusterId) -> Vec<f32> {
        let m = self.mean(c);
        m.iter().chain(m).copied().collect()
    }

    pub fn write_assignment(&self, kg: &KnowledgeGraph, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (e, c) in self.assignment.iter().enumerate() {
            writeln!(w, "{}\t{}", kg.entity_token(EntityId::from_index(e)), c)
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_graph(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (c, ns) in self.adjacency.iter().enumerate() {
            for n in ns {
                writeln!(w, "{c}\t{n}").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads an `entity_token<TAB>cluster_id` file into a dense assignment.
pub fn read_assignment(kg: &KnowledgeGraph, path: &Path) -> Result<Vec<ClusterId>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<Option<ClusterId>> = vec![None; kg.num_entities()];
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedLine {
            path: path.to_owned(),
            line: i + 1,
            reason,
        };
        let (tok, c) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `entity<TAB>cluster`".into()))?;
        let c: u32 = c.parse().map_err(|_| bad(format!("bad cluster id `{c}`")))?;
        out[kg.entity_id(tok)?.index()] = Some(ClusterId(c));
    }
    out.into_iter()
        .enumerate()
        .map(|(e, c)| {
            c.ok_or_else(|| {
                Error::Format(format!(
                    "entity `{}` missing from assignment file",
                    kg.entity_token(EntityId::from_index(e))
                ))
            })
        })
        .collect()
}

/// Clusters `a != b` are connected iff some indexed entity edge joins a
/// member of `a` to a member of `b`. Self-loops are ignored.
pub fn build_cluster_graph(kg: &KnowledgeGraph, assignment: &[ClusterId], n: usize) -> Vec<Vec<ClusterId>> {
    let mut sets = vec![BTreeSet::new(); n];
    for (e, &c) in assignment.iter().enumerate() {
        for &(r, o) in kg.all_outgoing(EntityId::from_index(e)) {
            if Some(r) == kg.no_op() {
                continue;
            }
            let co = assignment[o.index()];
            if co != c {
                sets[c.index()].insert(co);
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{GraphBuilder, GraphOptions, RelationId, Split, Triple};

    fn store_from(rows: &[&[f32]]) -> EmbeddingStore {
        let dim = rows[0].len();
        EmbeddingStore::new(dim, rows.concat(), vec![0.0; dim], 0).unwrap()
    }

    #[test]
    fn square_corners_split_into_adjacent_pairs() {
        let pts: Vec<f32> = vec![0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0];
        let out = kmeans_points(&pts, 2, 2, &KMeansConfig::default()).unwrap();
        let a = &out.assignment;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn one_cluster_per_point() {
        let pts: Vec<f32> = (0..12).map(|i| (i * i) as f32 * 0.37).collect();
        let out = kmeans_points(&pts, 2, 6, &KMeansConfig::default()).unwrap();
        let distinct: BTreeSet<_> = out.assignment.iter().collect();
        assert_eq!(distinct.len(), 6);
        assert!(out.wcss_history.last().unwrap().abs() < 1e-12);
    }

    #[test]
    fn too_many_clusters_rejected() {
        let pts = vec![0.0f32; 6];
        assert!(kmeans_points(&pts, 2, 4, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn wcss_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f32> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        for seed in 0..5 {
            let cfg = KMeansConfig {
                seed,
                tolerance: 0.0,
                max_iters: 30,
                ..Default::default()
            };
            let out = kmeans_points(&pts, 4, 7, &cfg).unwrap();
            for w in out.wcss_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", out.wcss_history);
            }
        }
    }

    #[test]
    fn empty_cluster_repaired() {
        // duplicated points push plain random init towards empty clusters
        let pts: Vec<f32> = [0.0f32, 0.0, 0.0, 0.0, 5.0, 5.0].to_vec();
        let cfg = KMeansConfig {
            init: KMeansInit::Random,
            ..Default::default()
        };
        for seed in 0..10 {
            let out = kmeans_points(&pts, 1, 3, &KMeansConfig { seed, ..cfg.clone() }).unwrap();
            let distinct: BTreeSet<_> = out.assignment.iter().collect();
            assert_eq!(distinct.len(), 3);
        }
    }

    fn two_node_graph() -> KnowledgeGraph {
        let mut b = GraphBuilder::new();
        b.add(Split::Train, "a", "r", "b").add(Split::Train, "c", "r", "c2");
        b.build(GraphOptions::default()).unwrap()
    }

    #[test]
    fn bridging_edge_connects_clusters_until_removed() {
        let mut kg = two_node_graph();
        let store = store_from(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[2.0, 2.0]]);
        // a,c,c2 in cluster 0; b in cluster 1
        let assign = vec![ClusterId(0), ClusterId(1), ClusterId(0), ClusterId(0)];
        let mut map = ClusterMap::from_assignment(&kg, &store, assign).unwrap();
        assert_eq!(map.neighbors(ClusterId(0)), &[ClusterId(1)]);
        assert_eq!(map.neighbors(ClusterId(1)), &[ClusterId(0)]);
        let (a, b) = (kg.entity_id("a").unwrap(), kg.entity_id("b").unwrap());
        assert!(kg.remove_edge(Triple::new(a, RelationId(0), b)));
        map.rebuild_graph(&kg);
        assert!(map.neighbors(ClusterId(0)).is_empty());
        assert_eq!(map.actions(ClusterId(1)), vec![ClusterAction::Stop]);
    }

    #[test]
    fn single_cluster_has_only_stop() {
        let kg = two_node_graph();
        let store = store_from(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        let map = ClusterMap::from_assignment(&kg, &store, vec![ClusterId(0); 4]).unwrap();
        assert_eq!(map.actions(ClusterId(0)), vec![ClusterAction::Stop]);
    }

    #[test]
    fn cluster_embeddings_are_lifted_means() {
        let kg = two_node_graph();
        let store = store_from(&[&[1.0, -2.0], &[-1.0, 2.0], &[0.5, 0.25], &[3.0, 3.0]]);
        let assign = vec![ClusterId(0), ClusterId(0), ClusterId(1), ClusterId(2)];
        let map = ClusterMap::from_assignment(&kg, &store, assign).unwrap();
        assert_eq!(map.cluster_embedding(ClusterId(0)), vec![0.0; 4]);
        assert_eq!(map.cluster_embedding(ClusterId(1)), vec![0.5, 0.25, 0.5, 0.25]);
    }

    #[test]
    fn three_member_mean_matches_direct_sum() {
        let mut b = GraphBuilder::new();
        b.add(Split::Train, "x", "r", "y").add(Split::Train, "y", "r", "z");
        let kg = b.build(GraphOptions::default()).unwrap();
        let rows: [&[f32]; 3] = [&[0.1, 0.7, -0.3], &[0.9, -0.2, 0.4], &[-0.5, 0.3, 0.8]];
        let store = store_from(&rows);
        let map = ClusterMap::from_assignment(&kg, &store, vec![ClusterId(0); 3]).unwrap();
        for j in 0..3 {
            let direct = (rows[0][j] as f64 + rows[1][j] as f64 + rows[2][j] as f64) / 3.0;
            assert!((map.mean(ClusterId(0))[j] as f64 - direct).abs() < 1e-7);
        }
    }
}
