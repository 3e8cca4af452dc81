//! Long-path harness: find the short paths that already connect task
//! triples, delete their edges so answers need longer walks, and measure a
//! model across walk lengths. A recovery mode keeps the graph intact and
//! only raises the walk length.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::csv_error;
use crate::kg::{EntityId, KnowledgeGraph, Triple};
use crate::trainer::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShortPathConfig {
    /// Intermediate samples per triple.
    pub repetitions: usize,
    /// Longest path (in edges) considered short.
    pub max_len: usize,
    /// Paths visited fewer times than this are kept in the graph.
    pub min_visits: usize,
    pub seed: u64,
}

impl Default for ShortPathConfig {
    fn default() -> Self {
        Self {
            repetitions: 50,
            max_len: 2,
            min_visits: 1,
            seed: 0,
        }
    }
}

/// A concrete walk from a task triple's source to its target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoundPath {
    pub query: Triple,
    /// Edges in walking order; inverse edges appear as their augmented form.
    pub edges: Vec<Triple>,
    pub visits: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShortPathSearch {
    pub paths: Vec<FoundPath>,
    /// Sampled intermediates per input triple, in input order.
    pub intermediates: Vec<Vec<EntityId>>,
}

impl ShortPathSearch {
    /// Union of edges over paths meeting the visit threshold.
    pub fn traversed_edges(&self, min_visits: usize) -> BTreeSet<Triple> {
        self.paths
            .iter()
            .filter(|p| p.visits >= min_visits)
            .flat_map(|p| p.edges.iter().copied())
            .collect()
    }
}

fn step_edges(kg: &KnowledgeGraph, e: EntityId) -> impl Iterator<Item = Triple> + '_ {
    let no_op = kg.no_op();
    kg.all_outgoing(e)
        .iter()
        .filter(move |&&(r, _)| Some(r) != no_op)
        .map(move |&(r, o)| Triple::new(e, r, o))
}

/// Hop distance from `from` to `to` over the live adjacency, if at most
/// `limit`.
pub fn bounded_distance(kg: &KnowledgeGraph, from: EntityId, to: EntityId, limit: usize) -> Option<usize> {
    if from == to {
        return Some(0);
    }
    let mut seen = BTreeSet::from([from]);
    let mut queue = VecDeque::from([(from, 0usize)]);
    while let Some((e, d)) = queue.pop_front() {
        if d == limit {
            continue;
        }
        for t in step_edges(kg, e) {
            if t.target == to {
                return Some(d + 1);
            }
            if seen.insert(t.target) {
                queue.push_back((t.target, d + 1));
            }
        }
    }
    None
}

/// Every simple walk from `s` to `o` with at most `max_len` edges.
fn simple_paths(kg: &KnowledgeGraph, s: EntityId, o: EntityId, max_len: usize) -> Vec<Vec<Triple>> {
    fn go(
        kg: &KnowledgeGraph,
        o: EntityId,
        max_len: usize,
        prefix: &mut Vec<Triple>,
        on_path: &mut Vec<EntityId>,
        out: &mut Vec<Vec<Triple>>,
    ) {
        let here = *on_path.last().expect("path has a start");
        for t in step_edges(kg, here) {
            if t.target == o {
                prefix.push(t);
                out.push(prefix.clone());
                prefix.pop();
            } else if prefix.len() + 1 < max_len && !on_path.contains(&t.target) {
                prefix.push(t);
                on_path.push(t.target);
                go(kg, o, max_len, prefix, on_path, out);
                on_path.pop();
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    if s != o && max_len > 0 {
        go(kg, o, max_len, &mut Vec::new(), &mut vec![s], &mut out);
    }
    out
}

/// Sampled short-path search. For each triple, `repetitions` intermediates
/// are drawn uniformly over all entities; a sample that is reachable from
/// the source and reaches the target within `max_len` total hops visits
/// every simple short path through it as an interior node. Single-edge
/// paths have no interior and count as visited on every repetition.
pub fn find_short_paths(kg: &KnowledgeGraph, triples: &[Triple], config: &ShortPathConfig) -> ShortPathSearch {
    let n = kg.num_entities();
    let per_triple: Vec<(Vec<FoundPath>, Vec<EntityId>)> = triples
        .par_iter()
        .enumerate()
        .map(|(k, &q)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[k as u64]));
            let samples: Vec<EntityId> = (0..config.repetitions)
                .map(|_| EntityId::from_index(rng.random_range(0..n)))
                .collect();
            let candidates = simple_paths(kg, q.source, q.target, config.max_len);
            let mut visits = vec![0usize; candidates.len()];
            for (i, path) in candidates.iter().enumerate() {
                if path.len() == 1 {
                    visits[i] = config.repetitions;
                }
            }
            for &m in &samples {
                if m == q.source || m == q.target {
                    continue;
                }
                let Some(a) = bounded_distance(kg, q.source, m, config.max_len) else {
                    continue;
                };
                let traversable = bounded_distance(kg, m, q.target, config.max_len - a)
                    .is_some_and(|b| a + b <= config.max_len);
                if !traversable {
                    continue;
                }
                for (i, path) in candidates.iter().enumerate() {
                    if path[..path.len() - 1].iter().any(|t| t.target == m) {
                        visits[i] += 1;
                    }
                }
            }
            let found = candidates
                .into_iter()
                .zip(visits)
                .filter(|&(_, v)| v > 0)
                .map(|(edges, visits)| FoundPath {
                    query: q,
                    edges,
                    visits,
                })
                .collect();
            (found, samples)
        })
        .collect();
    let mut out = ShortPathSearch::default();
    for (paths, samples) in per_triple {
        out.paths.extend(paths);
        out.intermediates.push(samples);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Canonical edges newly removed; each also hides its inverse twin.
    pub removed: Vec<Triple>,
    /// Query sources left with no outgoing edge besides the self-loop.
    pub stranded_sources: Vec<EntityId>,
}

/// Removes the union of traversed edges of paths visited at least
/// `min_visits` times. Queries whose source loses every edge are logged and
/// kept.
pub fn remove_short_paths(
    kg: &mut KnowledgeGraph,
    search: &ShortPathSearch,
    queries: &[Triple],
    min_visits: usize,
) -> Ablation {
    let before: BTreeSet<Triple> = kg.removed_edges().copied().collect();
    for t in search.traversed_edges(min_visits) {
        if kg.has_edge(t) {
            kg.remove_edge(t);
        }
    }
    let removed = kg.removed_edges().filter(|t| !before.contains(t)).copied().collect();
    let sources: BTreeSet<EntityId> = queries.iter().map(|q| q.source).collect();
    let stranded_sources: Vec<EntityId> = sources
        .into_iter()
        .filter(|&s| step_edges(kg, s).next().is_none())
        .collect();
    for &s in &stranded_sources {
        tracing::warn!(entity = kg.entity_token(s), "ablation left a query source without edges");
    }
    Ablation {
        removed,
        stranded_sources,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LongPathMode {
    /// Remove short paths, then sweep walk lengths.
    Ablate,
    /// Keep the graph and sweep longer walk lengths.
    Recovery,
}

impl LongPathMode {
    pub fn default_horizons(self) -> Vec<usize> {
        match self {
            Self::Ablate => vec![3, 4, 5],
            Self::Recovery => vec![4, 5, 6, 7],
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Ablate => "ablate",
            Self::Recovery => "recovery",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthMetrics {
    pub horizon: usize,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongPathReport {
    pub mode: LongPathMode,
    pub ablation: Option<Ablation>,
    pub rows: Vec<LengthMetrics>,
}

/// Runs `run(kg, horizon)` for each horizon on the ablated graph (or the
/// intact one in recovery mode). `run` sees the live adjacency and must
/// rebuild anything derived from it, such as the cluster graph. The graph
/// is restored before returning, also on error.
pub fn ablate_and_run<F>(
    kg: &mut KnowledgeGraph,
    mode: LongPathMode,
    queries: &[Triple],
    search: &ShortPathConfig,
    horizons: &[usize],
    mut run: F,
) -> Result<LongPathReport>
where
    F: FnMut(&KnowledgeGraph, usize) -> Result<Vec<(String, f64)>>,
{
    if kg.removed_edges().next().is_some() {
        return Err(Error::InvalidArgument(
            "long-path harness needs an unablated graph".into(),
        ));
    }
    let ablation = match mode {
        LongPathMode::Ablate => {
            let found = find_short_paths(kg, queries, search);
            let a = remove_short_paths(kg, &found, queries, search.min_visits);
            tracing::info!(
                paths = found.paths.len(),
                removed = a.removed.len(),
                stranded = a.stranded_sources.len(),
                "short paths removed"
            );
            Some(a)
        }
        LongPathMode::Recovery => None,
    };
    let mut rows = Vec::with_capacity(horizons.len());
    let mut outcome = Ok(());
    for &h in horizons {
        match run(kg, h) {
            Ok(metrics) => rows.push(LengthMetrics { horizon: h, metrics }),
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    kg.restore_all();
    outcome.map(|()| LongPathReport { mode, ablation, rows })
}

/// Writes `mode, horizon, metric, value` rows.
pub fn write_length_metrics(report: &LongPathReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["mode", "horizon", "metric", "value"])
        .map_err(|e| csv_error(path, e))?;
    let mut ordered: BTreeMap<usize, &LengthMetrics> = BTreeMap::new();
    for row in &report.rows {
        ordered.insert(row.horizon, row);
    }
    for row in ordered.values() {
        for (name, value) in &row.metrics {
            w.write_record([
                report.mode.label(),
                &row.horizon.to_string(),
                name,
                &value.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{GraphBuilder, GraphOptions, Split};

    fn graph(edges: &[(&str, &str, &str)], extra: &[&str]) -> KnowledgeGraph {
        let mut b = GraphBuilder::new();
        for &(s, r, o) in edges {
            b.add(Split::Train, s, r, o);
        }
        for &e in extra {
            b.add(Split::Test, e, "q", e);
        }
        b.build(GraphOptions::default()).unwrap()
    }

    fn t(kg: &KnowledgeGraph, s: &str, r: &str, o: &str) -> Triple {
        Triple::new(kg.entity_id(s).unwrap(), kg.relation_id(r).unwrap(), kg.entity_id(o).unwrap())
    }

    #[test]
    fn direct_edge_is_always_found() {
        let kg = graph(&[("a", "r", "b"), ("c", "r", "d")], &[]);
        let q = t(&kg, "a", "r", "b");
        let cfg = ShortPathConfig { repetitions: 3, ..Default::default() };
        let found = find_short_paths(&kg, &[q], &cfg);
        assert_eq!(found.paths.len(), 1);
        assert_eq!(found.paths[0].edges, vec![q]);
        assert_eq!(found.paths[0].visits, 3);
    }

    #[test]
    fn disconnected_endpoints_yield_nothing() {
        let kg = graph(&[("a", "r", "b"), ("c", "r", "d")], &[]);
        let q = t(&kg, "a", "r", "d");
        let found = find_short_paths(&kg, &[q], &ShortPathConfig::default());
        assert!(found.paths.is_empty());
        assert_eq!(found.intermediates[0].len(), 50);
    }

    #[test]
    fn two_hop_paths_need_a_sampled_middle() {
        let kg = graph(&[("a", "r", "m"), ("m", "s", "b"), ("a", "r", "n"), ("n", "s", "b")], &[]);
        let q = t(&kg, "a", "r", "b");
        let found = find_short_paths(&kg, &[q], &ShortPathConfig { repetitions: 200, ..Default::default() });
        assert_eq!(found.paths.len(), 2);
        for p in &found.paths {
            let mid = p.edges[0].target;
            let hits = found.intermediates[0].iter().filter(|&&m| m == mid).count();
            assert_eq!(p.visits, hits);
        }
    }

    #[test]
    fn removal_clears_short_paths_and_restores() {
        let kg0 = graph(
            &[("a", "r", "b"), ("a", "r", "m"), ("m", "s", "b"), ("b", "s", "z"), ("z", "r", "y")],
            &[],
        );
        let mut kg = kg0.clone();
        let q = t(&kg, "a", "r", "b");
        let cfg = ShortPathConfig { repetitions: 100, ..Default::default() };
        let found = find_short_paths(&kg, &[q], &cfg);
        let edges_before = kg.edge_count();
        let ab = remove_short_paths(&mut kg, &found, &[q], 1);
        assert_eq!(ab.removed.len(), 3);
        assert_eq!(edges_before - kg.edge_count(), 2 * ab.removed.len());
        assert!(find_short_paths(&kg, &[q], &cfg).paths.is_empty());
        assert_eq!(ab.stranded_sources, vec![kg.entity_id("a").unwrap()]);
        kg.restore_all();
        for e in 0..kg.num_entities() {
            let e = EntityId::from_index(e);
            assert_eq!(kg.all_outgoing(e), kg0.all_outgoing(e));
        }
    }

    #[test]
    fn harness_restores_after_error_and_orders_rows() {
        let mut kg = graph(&[("a", "r", "b"), ("b", "r", "c")], &[]);
        let q = t(&kg, "a", "r", "b");
        let before = kg.edge_count();
        let err = ablate_and_run(&mut kg, LongPathMode::Ablate, &[q], &ShortPathConfig::default(), &[3, 4], |g, h| {
            assert!(!g.has_edge(q));
            if h == 4 {
                Err(Error::Numeric("boom".into()))
            } else {
                Ok(vec![])
            }
        });
        assert!(err.is_err());
        assert_eq!(kg.edge_count(), before);
        let report = ablate_and_run(&mut kg, LongPathMode::Recovery, &[q], &ShortPathConfig::default(), &[5, 4], |g, h| {
            assert!(g.has_edge(q));
            Ok(vec![("hits1".into(), h as f64)])
        })
        .unwrap();
        assert!(report.ablation.is_none());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("len.csv");
        write_length_metrics(&report, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "mode,horizon,metric,value\nrecovery,4,hits1,4\nrecovery,5,hits1,5\n");
    }
}
