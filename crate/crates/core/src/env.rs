//! The synchronized two-agent walk: the cluster agent moves over the
//! cluster graph (with STOP), the entity agent over graph edges (with the
//! self-loop). Both act exactly once per step for a fixed horizon.

use std::path::Path;

use rand::Rng;

use crate::cluster::{ClusterAction, ClusterMap};
use crate::diffnet::{NodeId, Tape};
use crate::kg::{ClusterId, Edge, EntityId, KnowledgeGraph, RelationId};
use crate::policy::PolicyNet;
use crate::{Error, Result};

/// A query `(source, relation, ?)`. `target`, when known, is the query's
/// own answer; it is only used to mask the direct query edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Query {
    pub source: EntityId,
    pub relation: RelationId,
    pub target: Option<EntityId>,
}

impl Query {
    pub fn new(source: EntityId, relation: RelationId) -> Self {
        Self {
            source,
            relation,
            target: None,
        }
    }

    pub fn with_target(mut self, target: EntityId) -> Self {
        self.target = Some(target);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualState {
    pub query: Query,
    pub source_cluster: ClusterId,
    pub entity: EntityId,
    pub cluster: ClusterId,
    pub step: usize,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct DualEnv<'a> {
    kg: &'a KnowledgeGraph,
    clusters: &'a ClusterMap,
    horizon: usize,
    mask_query_edge: bool,
}

impl<'a> DualEnv<'a> {
    pub fn new(kg: &'a KnowledgeGraph, clusters: &'a ClusterMap, horizon: usize) -> Self {
        Self {
            kg,
            clusters,
            horizon,
            mask_query_edge: false,
        }
    }

    /// Hides the edge `(source, relation, target)` from the entity agent
    /// whenever it stands on the source, so a training query cannot be
    /// answered by its own fact.
    pub fn with_query_edge_masking(mut self, on: bool) -> Self {
        self.mask_query_edge = on;
        self
    }

    pub fn kg(&self) -> &'a KnowledgeGraph {
        self.kg
    }

    pub fn clusters(&self) -> &'a ClusterMap {
        self.clusters
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn reset(&self, query: Query) -> Result<DualState> {
        if query.source.index() >= self.kg.num_entities() {
            return Err(Error::UnknownToken {
                kind: "entity",
                token: query.source.0.to_string(),
            });
        }
        if query.relation.index() >= self.kg.num_relations() {
            return Err(Error::UnknownToken {
                kind: "relation",
                token: query.relation.0.to_string(),
            });
        }
        let c = self.clusters.cluster_of(query.source);
        Ok(DualState {
            query,
            source_cluster: c,
            entity: query.source,
            cluster: c,
            step: 0,
            terminal: self.horizon == 0,
        })
    }

    pub fn giant_actions(&self, state: &DualState) -> Vec<ClusterAction> {
        self.clusters.actions(state.cluster)
    }

    pub fn dwarf_actions(&self, state: &DualState) -> Result<Vec<Edge>> {
        let q = state.query;
        let masked = match q.target {
            Some(o) if self.mask_query_edge && state.entity == q.source => Some((q.relation, o)),
            _ => None,
        };
        let list: Vec<Edge> = self
            .kg
            .outgoing_actions(state.entity)
            .iter()
            .copied()
            .filter(|&a| Some(a) != masked)
            .collect();
        if list.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "entity {} has no actions; self-loops must be enabled",
                state.entity.0
            )));
        }
        Ok(list)
    }

    pub fn legal_actions(&self, state: &DualState) -> Result<(Vec<ClusterAction>, Vec<Edge>)> {
        Ok((self.giant_actions(state), self.dwarf_actions(state)?))
    }

    /// Applies one synchronized move given indices into the legal lists.
    pub fn step(&self, state: &DualState, giant: usize, dwarf: usize) -> Result<DualState> {
        if state.terminal {
            return Err(Error::InvalidArgument("step on a terminal state".into()));
        }
        let (gc, dc) = self.legal_actions(state)?;
        let a_c = *gc.get(giant).ok_or(Error::IllegalAction {
            index: giant,
            available: gc.len(),
        })?;
        let a_e = *dc.get(dwarf).ok_or(Error::IllegalAction {
            index: dwarf,
            available: dc.len(),
        })?;
        Ok(self.advance(state, a_c, a_e))
    }

    /// Applies already-validated actions.
    pub(crate) fn advance(&self, state: &DualState, a_c: ClusterAction, a_e: Edge) -> DualState {
        let step = state.step + 1;
        DualState {
            entity: a_e.1,
            cluster: a_c.target(state.cluster),
            step,
            terminal: step >= self.horizon,
            ..state.clone()
        }
    }
}

/// A finished synchronized episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub query: Query,
    /// `T + 1` visited entities, starting at the source.
    pub entities: Vec<EntityId>,
    /// `T + 1` visited clusters, starting at the source's cluster.
    pub clusters: Vec<ClusterId>,
    pub giant_actions: Vec<ClusterAction>,
    pub giant_choices: Vec<usize>,
    pub giant_log_probs: Vec<f64>,
    pub giant_entropies: Vec<f64>,
    pub dwarf_actions: Vec<Edge>,
    pub dwarf_choices: Vec<usize>,
    pub dwarf_log_probs: Vec<f64>,
    pub dwarf_entropies: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.giant_actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.giant_actions.is_empty()
    }

    pub fn final_entity(&self) -> EntityId {
        *self.entities.last().expect("trajectory has a start entity")
    }

    pub fn final_cluster(&self) -> ClusterId {
        *self.clusters.last().expect("trajectory has a start cluster")
    }

    pub fn dwarf_log_prob(&self) -> f64 {
        self.dwarf_log_probs.iter().sum()
    }

    pub fn giant_log_prob(&self) -> f64 {
        self.giant_log_probs.iter().sum()
    }
}

/// Tape nodes of a rollout recorded for backpropagation, one per step.
#[derive(Debug, Clone, Default)]
pub struct RolloutNodes {
    pub giant_log_prob: Vec<NodeId>,
    pub dwarf_log_prob: Vec<NodeId>,
    pub giant_entropy: Vec<NodeId>,
    pub dwarf_entropy: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agent {
    Giant,
    Dwarf,
}

/// How a rollout picks each action from the per-step log-probabilities.
pub enum Chooser<'r, R: Rng + ?Sized> {
    Sample(&'r mut R),
    Greedy,
    /// Replays fixed per-step indices for both agents.
    Replay { giant: &'r [usize], dwarf: &'r [usize] },
}

impl<R: Rng + ?Sized> Chooser<'_, R> {
    fn choose(&mut self, agent: Agent, step: usize, log_probs: &[f64]) -> Result<usize> {
        match self {
            Chooser::Sample(rng) => Ok(sample_categorical(*rng, log_probs)),
            Chooser::Greedy => Ok(argmax(log_probs)),
            Chooser::Replay { giant, dwarf } => {
                let seq = if agent == Agent::Giant { giant } else { dwarf };
                let i = *seq.get(step).ok_or_else(|| {
                    Error::InvalidArgument(format!("replay has no action for step {step}"))
                })?;
                if i >= log_probs.len() {
                    return Err(Error::IllegalAction {
                        index: i,
                        available: log_probs.len(),
                    });
                }
                Ok(i)
            }
        }
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a distribution given as log-probabilities.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, log_probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left `u` above the total mass: take the last reachable action
    log_probs
        .iter()
        .rposition(|lp| lp.is_finite())
        .unwrap_or(log_probs.len() - 1)
}

/// Runs one full episode on `tape`, recording the nodes needed for the
/// policy gradient.
pub fn rollout_on_tape<R: Rng + ?Sized>(
    env: &DualEnv<'_>,
    policy: &PolicyNet,
    tape: &mut Tape<'_>,
    query: Query,
    chooser: &mut Chooser<'_, R>,
) -> Result<(Trajectory, RolloutNodes)> {
    let mut state = env.reset(query)?;
    let (mut hc, mut he) = policy.init_histories(tape, state.cluster, query.source)?;
    let t_max = env.horizon();
    let mut traj = Trajectory {
        query,
        entities: vec![state.entity],
        clusters: vec![state.cluster],
        giant_actions: Vec::with_capacity(t_max),
        giant_choices: Vec::with_capacity(t_max),
        giant_log_probs: Vec::with_capacity(t_max),
        giant_entropies: Vec::with_capacity(t_max),
        dwarf_actions: Vec::with_capacity(t_max),
        dwarf_choices: Vec::with_capacity(t_max),
        dwarf_log_probs: Vec::with_capacity(t_max),
        dwarf_entropies: Vec::with_capacity(t_max),
    };
    let mut nodes = RolloutNodes::default();
    while !state.terminal {
        let t = state.step;
        let (gc, dc) = env.legal_actions(&state)?;
        let gs = policy.score_giant(tape, state.cluster, hc, &gc)?;
        let ds = policy.score_dwarf(tape, state.entity, query.relation, he, &dc)?;
        let gi = chooser.choose(Agent::Giant, t, tape.value(gs.log_probs))?;
        let di = chooser.choose(Agent::Dwarf, t, tape.value(ds.log_probs))?;
        let glp = tape.pick(gs.log_probs, gi)?;
        let dlp = tape.pick(ds.log_probs, di)?;
        let gh = tape.entropy(gs.log_probs);
        let dh = tape.entropy(ds.log_probs);
        traj.giant_actions.push(gc[gi]);
        traj.giant_choices.push(gi);
        traj.giant_log_probs.push(tape.scalar(glp));
        traj.giant_entropies.push(tape.scalar(gh));
        traj.dwarf_actions.push(dc[di]);
        traj.dwarf_choices.push(di);
        traj.dwarf_log_probs.push(tape.scalar(dlp));
        traj.dwarf_entropies.push(tape.scalar(dh));
        nodes.giant_log_prob.push(glp);
        nodes.dwarf_log_prob.push(dlp);
        nodes.giant_entropy.push(gh);
        nodes.dwarf_entropy.push(dh);
        state = env.advance(&state, gc[gi], dc[di]);
        traj.entities.push(state.entity);
        traj.clusters.push(state.cluster);
        if !state.terminal {
            (hc, he) = policy.step_histories(tape, hc, he, gs.embeddings[gi], ds.embeddings[di])?;
        }
    }
    Ok((traj, nodes))
}

/// Runs one episode on a private tape and returns only the trajectory.
pub fn rollout<R: Rng + ?Sized>(
    env: &DualEnv<'_>,
    policy: &PolicyNet,
    query: Query,
    chooser: &mut Chooser<'_, R>,
) -> Result<Trajectory> {
    let mut tape = Tape::new(&policy.params);
    rollout_on_tape(env, policy, &mut tape, query, chooser).map(|(t, _)| t)
}

pub fn greedy_rollout(env: &DualEnv<'_>, policy: &PolicyNet, query: Query) -> Result<Trajectory> {
    rollout::<rand_chacha::ChaCha8Rng>(env, policy, query, &mut Chooser::Greedy)
}

/// Replays a trajectory's recorded choices and returns its
/// `(giant, dwarf)` log-probabilities.
pub fn replay_log_prob(env: &DualEnv<'_>, policy: &PolicyNet, traj: &Trajectory) -> Result<(f64, f64)> {
    let mut chooser = Chooser::<rand_chacha::ChaCha8Rng>::Replay {
        giant: &traj.giant_choices,
        dwarf: &traj.dwarf_choices,
    };
    let t = rollout(env, policy, traj.query, &mut chooser)?;
    Ok((t.giant_log_prob(), t.dwarf_log_prob()))
}

/// Writes one row per step: query, step, giant_cluster, giant_logp,
/// dwarf_relation, dwarf_entity, dwarf_logp.
pub fn write_trajectories(kg: &KnowledgeGraph, trajectories: &[Trajectory], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let row_err = |e| csv_error(path, e);
    w.write_record([
        "query",
        "step",
        "giant_cluster",
        "giant_logp",
        "dwarf_relation",
        "dwarf_entity",
        "dwarf_logp",
    ])
    .map_err(row_err)?;
    for t in trajectories {
        let q = format!(
            "{}|{}",
            kg.entity_token(t.query.source),
            kg.relation_token(t.query.relation)
        );
        for s in 0..t.len() {
            let (r, e) = t.dwarf_actions[s];
            w.write_record([
                q.as_str(),
                &(s + 1).to_string(),
                &t.clusters[s + 1].0.to_string(),
                &t.giant_log_probs[s].to_string(),
                kg.relation_token(r),
                kg.entity_token(e),
                &t.dwarf_log_probs[s].to_string(),
            ])
            .map_err(row_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingStore;
    use crate::kg::{GraphBuilder, GraphOptions, Split, Triple};
    use crate::policy::{PolicyDims, PolicyShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> (KnowledgeGraph, ClusterMap) {
        let mut b = GraphBuilder::new();
        b.add(Split::Train, "a", "r", "b")
            .add(Split::Train, "b", "r", "c")
            .add(Split::Train, "a", "s", "c")
            .add(Split::Train, "c", "s", "d")
            .add(Split::Train, "e", "r", "e2");
        let kg = b.build(GraphOptions::default()).unwrap();
        let n = kg.num_entities();
        let store = EmbeddingStore::new(
            2,
            (0..n * 2).map(|i| (i as f32 * 0.37).sin()).collect(),
            vec![0.1; kg.num_raw_relations() * 2],
            0,
        )
        .unwrap();
        let assign: Vec<ClusterId> = (0..n).map(|i| ClusterId((i % 3) as u32)).collect();
        let cm = ClusterMap::from_assignment(&kg, &store, assign).unwrap();
        (kg, cm)
    }

    fn policy(kg: &KnowledgeGraph, cm: &ClusterMap, seed: u64) -> PolicyNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyNet::new(
            PolicyDims {
                emb_dim: 3,
                hidden: 4,
            },
            PolicyShape::of(kg, cm),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_in_source_cluster() {
        let (kg, cm) = world();
        let env = DualEnv::new(&kg, &cm, 3);
        let q = Query::new(kg.entity_id("a").unwrap(), kg.relation_id("r").unwrap());
        let s = env.reset(q).unwrap();
        assert_eq!(s, env.reset(q).unwrap());
        assert_eq!(s.cluster, cm.cluster_of(q.source));
        assert_eq!(s.step, 0);
        assert!(!s.terminal);
        let bad = Query::new(EntityId(999), q.relation);
        assert!(env.reset(bad).is_err());
    }

    #[test]
    fn self_loop_and_stop_keep_positions() {
        let (kg, cm) = world();
        let env = DualEnv::new(&kg, &cm, 2);
        let q = Query::new(kg.entity_id("d").unwrap(), kg.relation_id("r").unwrap());
        let s = env.reset(q).unwrap();
        let (gc, dc) = env.legal_actions(&s).unwrap();
        assert_eq!(gc[0], ClusterAction::Stop);
        assert_eq!(dc[0], (kg.no_op().unwrap(), s.entity));
        let s1 = env.step(&s, 0, 0).unwrap();
        assert_eq!((s1.entity, s1.cluster, s1.step), (s.entity, s.cluster, 1));
        assert!(!s1.terminal);
        let s2 = env.step(&s1, 0, 0).unwrap();
        assert!(s2.terminal);
        assert!(env.step(&s2, 0, 0).is_err());
        assert!(matches!(
            env.step(&s, 0, 99),
            Err(Error::IllegalAction { index: 99, .. })
        ));
    }

    #[test]
    fn query_edge_masked_only_on_request() {
        let (kg, cm) = world();
        let a = kg.entity_id("a").unwrap();
        let r = kg.relation_id("r").unwrap();
        let b = kg.entity_id("b").unwrap();
        let q = Query::new(a, r).with_target(b);
        let plain = DualEnv::new(&kg, &cm, 3);
        let masked = plain.with_query_edge_masking(true);
        let s = plain.reset(q).unwrap();
        assert!(plain.dwarf_actions(&s).unwrap().contains(&(r, b)));
        assert!(!masked.dwarf_actions(&s).unwrap().contains(&(r, b)));
        assert_eq!(
            plain.dwarf_actions(&s).unwrap().len(),
            masked.dwarf_actions(&s).unwrap().len() + 1
        );
    }

    #[test]
    fn rollouts_are_valid_paths_and_replay_matches() {
        let (kg, cm) = world();
        let p = policy(&kg, &cm, 7);
        let env = DualEnv::new(&kg, &cm, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for e in 0..kg.num_entities() {
            let q = Query::new(EntityId::from_index(e), RelationId(0));
            let t = rollout(&env, &p, q, &mut Chooser::Sample(&mut rng)).unwrap();
            assert_eq!(t.len(), 3);
            assert_eq!(t.entities.len(), 4);
            for s in 0..3 {
                let (r, o) = t.dwarf_actions[s];
                assert_eq!(o, t.entities[s + 1]);
                let from = t.entities[s];
                assert!(
                    Some(r) == kg.no_op() && o == from || kg.has_edge(Triple::new(from, r, o))
                );
                let (c0, c1) = (t.clusters[s], t.clusters[s + 1]);
                assert!(c0 == c1 && t.giant_actions[s] == ClusterAction::Stop || cm.neighbors(c0).contains(&c1));
                assert!(t.dwarf_log_probs[s] <= 0.0 && t.giant_log_probs[s] <= 0.0);
            }
            let (g, d) = replay_log_prob(&env, &p, &t).unwrap();
            assert!((g - t.giant_log_prob()).abs() < 1e-12);
            assert!((d - t.dwarf_log_prob()).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_is_deterministic_and_seeded_sampling_reproducible() {
        let (kg, cm) = world();
        let p = policy(&kg, &cm, 3);
        let env = DualEnv::new(&kg, &cm, 3);
        let q = Query::new(kg.entity_id("a").unwrap(), RelationId(1));
        assert_eq!(greedy_rollout(&env, &p, q).unwrap(), greedy_rollout(&env, &p, q).unwrap());
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rollout(&env, &p, q, &mut Chooser::Sample(&mut rng)).unwrap()
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn sampled_frequencies_match_policy() {
        let (kg, cm) = world();
        let p = policy(&kg, &cm, 9);
        let env = DualEnv::new(&kg, &cm, 1);
        let a = kg.entity_id("a").unwrap();
        let q = Query::new(a, RelationId(0));
        let s = env.reset(q).unwrap();
        let dc = env.dwarf_actions(&s).unwrap();
        let (_, he) = p.initial_histories(s.cluster, a).unwrap();
        let probs = p.dwarf_probabilities(a, RelationId(0), &he, &dc).unwrap();
        let mut counts = vec![0usize; dc.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        for _ in 0..n {
            let t = rollout(&env, &p, q, &mut Chooser::Sample(&mut rng)).unwrap();
            counts[t.dwarf_choices[0]] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02);
        }
    }

    #[test]
    fn trajectory_csv_has_one_row_per_step() {
        let (kg, cm) = world();
        let p = policy(&kg, &cm, 1);
        let env = DualEnv::new(&kg, &cm, 3);
        let t = greedy_rollout(&env, &p, Query::new(EntityId(0), RelationId(0))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectories(&kg, &[t.clone(), t], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 6);
        assert!(text.starts_with("query,step,giant_cluster"));
    }
}
