//! Beam-search inference over the entity agent, entity ranking, and the
//! Hits@K / MRR / MAP metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAction;
use crate::diffnet::Tape;
use crate::env::{argmax, csv_error, rollout, Chooser, DualEnv, DualState, Query};
use crate::kg::{AnswerIndex, Edge, EntityId, KnowledgeGraph, RelationId, Triple};
use crate::policy::{AgentHistory, PolicyNet};
use crate::{Error, Result};

/// A walker the beam search can drive: it scores the entity agent's
/// candidates at a state and advances its private memory along a choice.
pub trait Walker: Sync {
    type Memory: Clone + Send;

    fn start(&self, env: &DualEnv<'_>, query: Query) -> Result<(DualState, Self::Memory)>;

    /// The entity agent's legal actions, their log-probabilities, and the
    /// cluster action taken alongside.
    fn expand(
        &self,
        env: &DualEnv<'_>,
        state: &DualState,
        memory: &Self::Memory,
    ) -> Result<Expansion>;

    fn advance(
        &self,
        env: &DualEnv<'_>,
        state: &DualState,
        memory: &Self::Memory,
        expansion: &Expansion,
        choice: usize,
    ) -> Result<(DualState, Self::Memory)>;
}

#[derive(Debug, Clone)]
pub struct Expansion {
    pub actions: Vec<Edge>,
    pub log_probs: Vec<f64>,
    pub giant_action: ClusterAction,
    pub giant_choice: usize,
}

/// The trained dual policy; the cluster agent advances greedily.
pub struct PolicyWalker<'p> {
    pub policy: &'p PolicyNet,
}

impl Walker for PolicyWalker<'_> {
    type Memory = (AgentHistory, AgentHistory);

    fn start(&self, env: &DualEnv<'_>, query: Query) -> Result<(DualState, Self::Memory)> {
        let s = env.reset(query)?;
        let h = self.policy.initial_histories(s.cluster, query.source)?;
        Ok((s, h))
    }

    fn expand(&self, env: &DualEnv<'_>, state: &DualState, (hc, he): &Self::Memory) -> Result<Expansion> {
        let (gc, dc) = env.legal_actions(state)?;
        let mut tape = Tape::new(&self.policy.params);
        let hcn = hc.on_tape(&mut tape);
        let hen = he.on_tape(&mut tape);
        let gs = self.policy.score_giant(&mut tape, state.cluster, hcn, &gc)?;
        let ds = self
            .policy
            .score_dwarf(&mut tape, state.entity, state.query.relation, hen, &dc)?;
        let gi = argmax(tape.value(gs.log_probs));
        Ok(Expansion {
            log_probs: tape.value(ds.log_probs).to_vec(),
            actions: dc,
            giant_action: gc[gi],
            giant_choice: gi,
        })
    }

    fn advance(
        &self,
        env: &DualEnv<'_>,
        state: &DualState,
        (hc, he): &Self::Memory,
        x: &Expansion,
        choice: usize,
    ) -> Result<(DualState, Self::Memory)> {
        let a_e = x.actions[choice];
        let next = env.advance(state, x.giant_action, a_e);
        let mem = if next.terminal {
            (hc.clone(), he.clone())
        } else {
            self.policy.next_histories(hc, he, x.giant_action, a_e)?
        };
        Ok((next, mem))
    }
}

/// Uniform random walk over the entity agent's actions; the cluster agent
/// always stops.
pub struct UniformWalker;

impl Walker for UniformWalker {
    type Memory = ();

    fn start(&self, env: &DualEnv<'_>, query: Query) -> Result<(DualState, ())> {
        Ok((env.reset(query)?, ()))
    }

    fn expand(&self, env: &DualEnv<'_>, state: &DualState, _: &()) -> Result<Expansion> {
        let actions = env.dwarf_actions(state)?;
        let lp = -(actions.len() as f64).ln();
        Ok(Expansion {
            log_probs: vec![lp; actions.len()],
            actions,
            giant_action: ClusterAction::Stop,
            giant_choice: 0,
        })
    }

    fn advance(
        &self,
        env: &DualEnv<'_>,
        state: &DualState,
        _: &(),
        x: &Expansion,
        choice: usize,
    ) -> Result<(DualState, ())> {
        Ok((env.advance(state, x.giant_action, x.actions[choice]), ()))
    }
}

/// The best trajectory found for one final entity.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub entity: EntityId,
    pub log_prob: f64,
    pub dwarf_choices: Vec<usize>,
    pub giant_choices: Vec<usize>,
    pub path: Vec<Edge>,
}

/// Entities reached by a query's search, best first. Entities absent
/// from `hits` are unreachable (rank ∞).
#[derive(Debug, Clone, PartialEq)]
pub struct RankedAnswers {
    pub query: Query,
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieMode {
    /// `1 + #strictly better`.
    #[default]
    Optimistic,
    /// Equal scores with a smaller entity id rank above.
    ById,
    /// `1 + #better or equal`.
    Pessimistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankOptions {
    /// Remove other known answers before ranking.
    pub filtered: bool,
    pub ties: TieMode,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            filtered: true,
            ties: TieMode::Optimistic,
        }
    }
}

impl RankedAnswers {
    pub fn score_of(&self, e: EntityId) -> Option<f64> {
        self.hits.iter().find(|h| h.entity == e).map(|h| h.log_prob)
    }

    pub fn top(&self) -> Option<EntityId> {
        self.hits.first().map(|h| h.entity)
    }

    /// Rank of `gold` (`None` = unreachable). With filtering, entities in
    /// `known` other than `gold` are skipped.
    pub fn rank_of(&self, gold: EntityId, known: &BTreeSet<EntityId>, opts: RankOptions) -> Option<usize> {
        let g = self.score_of(gold)?;
        let above = self
            .hits
            .iter()
            .filter(|h| h.entity != gold)
            .filter(|h| !(opts.filtered && known.contains(&h.entity)))
            .filter(|h| match opts.ties {
                TieMode::Optimistic => h.log_prob > g,
                TieMode::ById => h.log_prob > g || (h.log_prob == g && h.entity < gold),
                TieMode::Pessimistic => h.log_prob >= g,
            })
            .count();
        Some(1 + above)
    }
}

/// Keeps the `width` best partial trajectories by cumulative entity-agent
/// log-probability for the full horizon, then keeps each final entity's
/// best score. Ties keep generation order (earlier beam, lower action).
pub fn beam_search<W: Walker>(env: &DualEnv<'_>, walker: &W, query: Query, width: usize) -> Result<RankedAnswers> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be positive".into()));
    }
    struct Beam<M> {
        state: DualState,
        memory: M,
        score: f64,
        dwarf: Vec<usize>,
        giant: Vec<usize>,
        path: Vec<Edge>,
    }
    let (state, memory) = walker.start(env, query)?;
    let mut beams = vec![Beam {
        state,
        memory,
        score: 0.0,
        dwarf: vec![],
        giant: vec![],
        path: vec![],
    }];
    while !beams[0].state.terminal {
        let expansions = beams
            .iter()
            .map(|b| walker.expand(env, &b.state, &b.memory))
            .collect::<Result<Vec<_>>>()?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, (b, x)) in beams.iter().zip(&expansions).enumerate() {
            for (ai, &lp) in x.log_probs.iter().enumerate() {
                cands.push((b.score + lp, bi, ai));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (score, bi, ai) in cands {
            let (b, x) = (&beams[bi], &expansions[bi]);
            let (state, memory) = walker.advance(env, &b.state, &b.memory, x, ai)?;
            let mut dwarf = b.dwarf.clone();
            dwarf.push(ai);
            let mut giant = b.giant.clone();
            giant.push(x.giant_choice);
            let mut path = b.path.clone();
            path.push(x.actions[ai]);
            next.push(Beam {
                state,
                memory,
                score,
                dwarf,
                giant,
                path,
            });
        }
        beams = next;
    }
    let mut best: BTreeMap<EntityId, Hit> = BTreeMap::new();
    for b in beams {
        let e = b.state.entity;
        if best.get(&e).is_none_or(|h| b.score > h.log_prob) {
            best.insert(
                e,
                Hit {
                    entity: e,
                    log_prob: b.score,
                    dwarf_choices: b.dwarf,
                    giant_choices: b.giant,
                    path: b.path,
                },
            );
        }
    }
    Ok(RankedAnswers {
        query,
        hits: sort_hits(best.into_values().collect()),
    })
}

fn sort_hits(mut hits: Vec<Hit>) -> Vec<Hit> {
    hits.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then(a.entity.cmp(&b.entity)));
    hits
}

/// Ranking from independent sampled rollouts, each final entity scored by
/// its best sampled trajectory.
pub fn sampled_ranking(
    env: &DualEnv<'_>,
    policy: &PolicyNet,
    query: Query,
    rollouts: usize,
    seed: u64,
) -> Result<RankedAnswers> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: BTreeMap<EntityId, Hit> = BTreeMap::new();
    for _ in 0..rollouts {
        let t = rollout(env, policy, query, &mut Chooser::Sample(&mut rng))?;
        let (e, lp) = (t.final_entity(), t.dwarf_log_prob());
        if best.get(&e).is_none_or(|h| lp > h.log_prob) {
            best.insert(
                e,
                Hit {
                    entity: e,
                    log_prob: lp,
                    dwarf_choices: t.dwarf_choices,
                    giant_choices: t.giant_choices,
                    path: t.dwarf_actions,
                },
            );
        }
    }
    Ok(RankedAnswers {
        query,
        hits: sort_hits(best.into_values().collect()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mrr: f64,
    pub count: usize,
}

/// Fraction of ranks `≤ k`; unreachable ranks never count.
pub fn hits_at(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / ranks.len() as f64
}

pub fn mean_reciprocal_rank(ranks: &[Option<usize>]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / ranks.len() as f64
}

pub fn link_prediction_metrics(ranks: &[Option<usize>]) -> LinkMetrics {
    LinkMetrics {
        hits1: hits_at(ranks, 1),
        hits3: hits_at(ranks, 3),
        hits10: hits_at(ranks, 10),
        mrr: mean_reciprocal_rank(ranks),
        count: ranks.len(),
    }
}

/// One evaluated test triple.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub triple: Triple,
    pub rank: Option<usize>,
}

/// Beam-searches every distinct `(source, relation)` among `triples` in
/// parallel and ranks each triple's target.
pub fn evaluate_link_prediction<W: Walker>(
    env: &DualEnv<'_>,
    walker: &W,
    triples: &[Triple],
    known: &AnswerIndex,
    beam: usize,
    opts: RankOptions,
) -> Result<(LinkMetrics, Vec<QueryOutcome>)> {
    let mut groups: BTreeMap<(EntityId, RelationId), Vec<Triple>> = BTreeMap::new();
    for &t in triples {
        groups.entry((t.source, t.relation)).or_default().push(t);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let empty = BTreeSet::new();
    let per_group = groups
        .par_iter()
        .map(|((s, r), ts)| {
            let ranked = beam_search(env, walker, Query::new(*s, *r), beam)?;
            let known = known.answers(*s, *r).unwrap_or(&empty);
            Ok(ts
                .iter()
                .map(|&t| QueryOutcome {
                    triple: t,
                    rank: ranked.rank_of(t.target, known, opts),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<QueryOutcome> = per_group.into_iter().flatten().collect();
    let ranks: Vec<_> = outcomes.iter().map(|o| o.rank).collect();
    Ok((link_prediction_metrics(&ranks), outcomes))
}

/// Mean over positives of the precision at each positive's position;
/// 0 when there are no positives.
pub fn average_precision(labels: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

/// Candidate labels in ranked order: reached candidates by descending
/// score (ties by entity id), then unreached ones in seeded random order.
pub fn order_candidates(ranked: &RankedAnswers, candidates: &[(EntityId, bool)], rng: &mut impl Rng) -> Vec<bool> {
    let mut reached = Vec::new();
    let mut unreached = Vec::new();
    for &(e, y) in candidates {
        match ranked.score_of(e) {
            Some(s) => reached.push((s, e, y)),
            None => unreached.push(y),
        }
    }
    reached.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    unreached.shuffle(rng);
    reached.into_iter().map(|(_, _, y)| y).chain(unreached).collect()
}

/// A fact-prediction query: candidate targets labelled true or false.
#[derive(Debug, Clone, PartialEq)]
pub struct FactQuery {
    pub source: EntityId,
    pub relation: RelationId,
    pub candidates: Vec<(EntityId, bool)>,
}

/// Mean average precision over `queries`; query `i` shuffles its
/// unreached candidates with a stream seeded from `(seed, i)`.
pub fn fact_prediction_map<W: Walker>(
    env: &DualEnv<'_>,
    walker: &W,
    queries: &[FactQuery],
    beam: usize,
    seed: u64,
) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let aps = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let ranked = beam_search(env, walker, Query::new(q.source, q.relation), beam)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Ok(average_precision(&order_candidates(&ranked, &q.candidates, &mut rng)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Reads labelled candidates, one per line, either as
/// `source<TAB>target<TAB>+|-` or as `source,target: +|-` (an optional
/// `thing$` prefix on entity tokens is dropped). Candidates sharing a
/// source form one query.
pub fn read_fact_queries(kg: &KnowledgeGraph, relation: RelationId, path: &Path) -> Result<Vec<FactQuery>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_source: BTreeMap<EntityId, Vec<(EntityId, bool)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::MalformedLine {
            path: path.to_path_buf(),
            line: n + 1,
            reason: reason.to_string(),
        };
        let (s, o, label) = if let Some((pair, label)) = line.rsplit_once(':') {
            let (s, o) = pair.split_once(',').ok_or_else(|| bad("expected `source,target: label`"))?;
            (s, o, label)
        } else {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad("expected three tab-separated fields"));
            }
            (f[0], f[1], f[2])
        };
        let strip = |t: &str| t.trim().trim_start_matches("thing$").to_string();
        let y = match label.trim() {
            "+" | "1" => true,
            "-" | "0" => false,
            _ => return Err(bad("label must be + or -")),
        };
        let s = kg.entity_id(&strip(s))?;
        let o = kg.entity_id(&strip(o))?;
        by_source.entry(s).or_default().push((o, y));
    }
    Ok(by_source
        .into_iter()
        .map(|(source, candidates)| FactQuery {
            source,
            relation,
            candidates,
        })
        .collect())
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub dataset: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub beam: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
}

pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClusterMap;
    use crate::embed::EmbeddingStore;
    use crate::env::greedy_rollout;
    use crate::kg::{ClusterId, GraphBuilder, GraphOptions, Split};
    use crate::policy::{PolicyDims, PolicyShape};
    use proptest::prelude::*;

    fn world() -> (KnowledgeGraph, ClusterMap) {
        let mut b = GraphBuilder::new();
        for (s, r, o) in [("a", "r", "b"), ("b", "r", "c"), ("a", "s", "c"), ("c", "s", "d"), ("d", "r", "a")] {
            b.add(Split::Train, s, r, o);
        }
        let kg = b.build(GraphOptions::default()).unwrap();
        let n = kg.num_entities();
        let store = EmbeddingStore::new(
            2,
            (0..n * 2).map(|i| (i as f32 * 0.71).cos()).collect(),
            vec![0.2; kg.num_raw_relations() * 2],
            0,
        )
        .unwrap();
        let assign = (0..n).map(|i| ClusterId((i % 2) as u32)).collect();
        let cm = ClusterMap::from_assignment(&kg, &store, assign).unwrap();
        (kg, cm)
    }

    fn policy(kg: &KnowledgeGraph, cm: &ClusterMap) -> PolicyNet {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = PolicyDims {
            emb_dim: 3,
            hidden: 5,
        };
        PolicyNet::new(dims, PolicyShape::of(kg, cm), &mut rng).unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        let (kg, cm) = world();
        let p = policy(&kg, &cm);
        let env = DualEnv::new(&kg, &cm, 3);
        let w = PolicyWalker { policy: &p };
        for e in 0..kg.num_entities() {
            let q = Query::new(EntityId::from_index(e), RelationId(0));
            let g = greedy_rollout(&env, &p, q).unwrap();
            let b = beam_search(&env, &w, q, 1).unwrap();
            assert_eq!(b.top(), Some(g.final_entity()));
            assert!((b.hits[0].log_prob - g.dwarf_log_prob()).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_top_score_monotone_and_replayable() {
        let (kg, cm) = world();
        let p = policy(&kg, &cm);
        let env = DualEnv::new(&kg, &cm, 3);
        let w = PolicyWalker { policy: &p };
        let q = Query::new(EntityId(0), RelationId(1));
        let mut last = f64::NEG_INFINITY;
        for width in [1, 2, 4, 8, 50] {
            let r = beam_search(&env, &w, q, width).unwrap();
            assert!(r.hits[0].log_prob >= last);
            last = r.hits[0].log_prob;
            for h in &r.hits {
                let mut ch = Chooser::<ChaCha8Rng>::Replay {
                    giant: &h.giant_choices,
                    dwarf: &h.dwarf_choices,
                };
                let t = rollout(&env, &p, q, &mut ch).unwrap();
                assert_eq!(t.final_entity(), h.entity);
                assert!((t.dwarf_log_prob() - h.log_prob).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_walker_spreads_mass() {
        let (kg, cm) = world();
        let env = DualEnv::new(&kg, &cm, 1);
        let q = Query::new(EntityId(0), RelationId(0));
        let r = beam_search(&env, &UniformWalker, q, 100).unwrap();
        let n = kg.outgoing_actions(EntityId(0)).len();
        assert_eq!(r.hits.len(), n);
        assert!(r.hits.iter().all(|h| (h.log_prob + (n as f64).ln()).abs() < 1e-12));
    }

    fn ranked(scores: &[(u32, f64)]) -> RankedAnswers {
        RankedAnswers {
            query: Query::new(EntityId(0), RelationId(0)),
            hits: sort_hits(
                scores
                    .iter()
                    .map(|&(e, s)| Hit {
                        entity: EntityId(e),
                        log_prob: s,
                        dwarf_choices: vec![],
                        giant_choices: vec![],
                        path: vec![],
                    })
                    .collect(),
            ),
        }
    }

    #[test]
    fn rank_modes_and_filtering() {
        let r = ranked(&[(1, -1.0), (2, -2.0), (3, -2.0), (4, -3.0)]);
        let none = BTreeSet::new();
        let raw = RankOptions {
            filtered: false,
            ties: TieMode::Optimistic,
        };
        assert_eq!(r.rank_of(EntityId(3), &none, raw), Some(2));
        assert_eq!(r.rank_of(EntityId(3), &none, RankOptions { ties: TieMode::ById, ..raw }), Some(3));
        assert_eq!(
            r.rank_of(EntityId(2), &none, RankOptions { ties: TieMode::Pessimistic, ..raw }),
            Some(3)
        );
        assert_eq!(r.rank_of(EntityId(9), &none, raw), None);
        let known: BTreeSet<_> = [EntityId(1), EntityId(4)].into();
        assert_eq!(r.rank_of(EntityId(4), &known, RankOptions::default()), Some(3));
        assert_eq!(r.rank_of(EntityId(4), &known, raw), Some(4));
    }

    #[test]
    fn metric_hand_cases() {
        let m = link_prediction_metrics(&[Some(1), Some(2), None]);
        assert!((m.hits1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.hits3 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.mrr - 0.5).abs() < 1e-15);
        assert_eq!(link_prediction_metrics(&[Some(1); 4]).mrr, 1.0);
        assert_eq!(link_prediction_metrics(&[None; 4]).hits10, 0.0);
        assert!((average_precision(&[true, false, true]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true, false, false]), 1.0);
    }

    #[test]
    fn unreached_candidates_follow_reached_ones() {
        let r = ranked(&[(1, -1.0), (2, -0.5)]);
        let cands = [(EntityId(5), false), (EntityId(1), true), (EntityId(2), true), (EntityId(6), false)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let order = order_candidates(&r, &cands, &mut rng);
        assert_eq!(&order[..2], &[true, true]);
        assert_eq!(average_precision(&order), 1.0);
    }

    #[test]
    fn fact_queries_parse_both_formats() {
        let (kg, _) = world();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        std::fs::write(&p, "thing$a,thing$b: +\na\tc\t-\nb,d: -\n").unwrap();
        let qs = read_fact_queries(&kg, RelationId(0), &p).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].candidates.len(), 2);
        std::fs::write(&p, "a\tb\n").unwrap();
        assert!(matches!(read_fact_queries(&kg, RelationId(0), &p), Err(Error::MalformedLine { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn filtering_only_improves_rank(
            scores in proptest::collection::vec(-5.0f64..0.0, 2..12),
            extra in proptest::collection::btree_set(0u32..12, 0..6),
        ) {
            let list: Vec<_> = scores.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect();
            let r = ranked(&list);
            let gold = EntityId(0);
            let known: BTreeSet<EntityId> = extra.into_iter().map(EntityId).collect();
            let raw = r.rank_of(gold, &known, RankOptions { filtered: false, ..Default::default() }).unwrap();
            let filt = r.rank_of(gold, &known, RankOptions::default()).unwrap();
            prop_assert!(filt <= raw);
        }
    }
}
