//! The two collaborating policy networks.
//!
//! Both agents encode their history with their own LSTM. At every step
//! after the first, each LSTM's previous hidden state is replaced by a
//! learned projection of `[own hidden; partner hidden]` (cell states stay
//! per-agent). Action scores are dot products between candidate action
//! embeddings and the output of a two-layer ReLU head, projected to the
//! action-embedding width.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterAction, ClusterMap};
use crate::diffnet::{
    load_checkpoint, save_checkpoint, Gradients, LstmCell, LstmCellState, LstmNodes, Mlp2, NodeId, ParamId,
    ParamSet, Tape, Tensor,
};
use crate::embed::EmbeddingStore;
use crate::kg::{ClusterId, EntityId, KnowledgeGraph, RelationId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    /// Entity/relation embedding width `d`; cluster embeddings are `2d`.
    pub emb_dim: usize,
    /// LSTM hidden size.
    pub hidden: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            emb_dim: 50,
            hidden: 200,
        }
    }
}

/// Vocabulary sizes the tables are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub entities: usize,
    /// All graph relations, inverse and `NO_OP` included.
    pub relations: usize,
    pub clusters: usize,
}

impl PolicyShape {
    pub fn of(kg: &KnowledgeGraph, clusters: &ClusterMap) -> Self {
        Self {
            entities: kg.num_entities(),
            relations: kg.num_relations(),
            clusters: clusters.num_clusters(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    entity: ParamId,
    relation: ParamId,
    cluster: ParamId,
    lstm_c: LstmCell,
    lstm_e: LstmCell,
    share_c: ParamId,
    share_e: ParamId,
    head_c: Mlp2,
    head_e: Mlp2,
    out_c: ParamId,
    out_e: ParamId,
}

impl Ids {
    fn lookup(p: &ParamSet) -> Result<Self> {
        let get = |n: &str| -> Result<ParamId> {
            p.id(n).ok_or_else(|| Error::Format(format!("parameter `{n}` missing")))
        };
        Ok(Self {
            entity: get("entity_emb")?,
            relation: get("relation_emb")?,
            cluster: get("cluster_emb")?,
            lstm_c: LstmCell::lookup(p, "lstm_c")?,
            lstm_e: LstmCell::lookup(p, "lstm_e")?,
            share_c: get("share_c")?,
            share_e: get("share_e")?,
            head_c: Mlp2::lookup(p, "head_c")?,
            head_e: Mlp2::lookup(p, "head_e")?,
            out_c: get("out_c")?,
            out_e: get("out_e")?,
        })
    }
}

/// One agent's recurrent state on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HistoryNodes {
    pub lstm: LstmNodes,
    pub step: usize,
}

/// One agent's recurrent state as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentHistory {
    pub state: LstmCellState,
    pub step: usize,
}

impl AgentHistory {
    pub fn on_tape(&self, tape: &mut Tape<'_>) -> HistoryNodes {
        HistoryNodes {
            lstm: self.state.on_tape(tape),
            step: self.step,
        }
    }

    pub fn from_tape(tape: &Tape<'_>, h: HistoryNodes) -> Self {
        Self {
            state: LstmCellState::from_tape(tape, h.lstm),
            step: h.step,
        }
    }
}

/// Scores over one agent's candidates, with the embedding node of each
/// candidate (fed back as the next LSTM input once chosen).
#[derive(Debug, Clone)]
pub struct ScoredActions {
    pub scores: NodeId,
    pub log_probs: NodeId,
    pub embeddings: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub params: ParamSet,
    ids: Ids,
    dims: PolicyDims,
    shape: PolicyShape,
    share_partner: bool,
}

impl PolicyNet {
    /// Fresh parameters: Xavier-uniform matrices and tables, zero biases,
    /// forget-gate bias 1.
    pub fn new(dims: PolicyDims, shape: PolicyShape, rng: &mut impl Rng) -> Result<Self> {
        if dims.emb_dim == 0 || dims.hidden == 0 {
            return Err(Error::InvalidArgument("policy dimensions must be positive".into()));
        }
        let (d, h) = (dims.emb_dim, dims.hidden);
        let mut p = ParamSet::new();
        fn matrix(
            p: &mut ParamSet,
            rng: &mut impl Rng,
            name: &str,
            rows: usize,
            cols: usize,
            row_sparse: bool,
        ) -> Result<ParamId> {
            let mut t = Tensor::zeros(name, rows, cols);
            t.xavier_uniform(rng);
            t.row_sparse = row_sparse;
            p.insert(t)
        }
        let entity = matrix(&mut p, rng, "entity_emb", shape.entities, d, true)?;
        // extra row: the dummy start relation
        let relation = matrix(&mut p, rng, "relation_emb", shape.relations + 1, d, true)?;
        // extra row: STOP
        let cluster = matrix(&mut p, rng, "cluster_emb", shape.clusters + 1, 2 * d, true)?;
        let lstm_c = LstmCell::register(&mut p, "lstm_c", 2 * d, h, rng)?;
        let lstm_e = LstmCell::register(&mut p, "lstm_e", 2 * d, h, rng)?;
        let share_c = matrix(&mut p, rng, "share_c", h, 2 * h, false)?;
        let share_e = matrix(&mut p, rng, "share_e", h, 2 * h, false)?;
        let width = 2 * d + h;
        let head_c = Mlp2::register(&mut p, "head_c", width, width, width, rng)?;
        let head_e = Mlp2::register(&mut p, "head_e", width, width, width, rng)?;
        let out_c = matrix(&mut p, rng, "out_c", 2 * d, width, false)?;
        let out_e = matrix(&mut p, rng, "out_e", 2 * d, width, false)?;
        Ok(Self {
            params: p,
            ids: Ids {
                entity,
                relation,
                cluster,
                lstm_c,
                lstm_e,
                share_c,
                share_e,
                head_c,
                head_e,
                out_c,
                out_e,
            },
            dims,
            shape,
            share_partner: true,
        })
    }

    /// Copies pretrained vectors into the policy tables: entities and raw
    /// relations directly, inverse relations negated, clusters as lifted
    /// member means. Requires `store.dim() == emb_dim`.
    pub fn warm_start(
        &mut self,
        kg: &KnowledgeGraph,
        store: &EmbeddingStore,
        clusters: &ClusterMap,
    ) -> Result<()> {
        store.validate(kg, self.dims.emb_dim)?;
        if clusters.num_clusters() != self.shape.clusters {
            return Err(Error::DimensionMismatch {
                what: "cluster count",
                expected: self.shape.clusters,
                found: clusters.num_clusters(),
            });
        }
        let ent = self.params.get_mut(self.ids.entity);
        for e in 0..kg.num_entities() {
            ent.row_mut(e).copy_from_slice(store.entity(EntityId::from_index(e)));
        }
        let rel = self.params.get_mut(self.ids.relation);
        for r in 0..kg.num_raw_relations() {
            let rid = RelationId::from_index(r);
            rel.row_mut(r).copy_from_slice(store.relation(rid));
            if let Some(inv) = kg.inverse_relation(rid) {
                for (dst, &src) in rel.row_mut(inv.index()).iter_mut().zip(store.relation(rid)) {
                    *dst = -src;
                }
            }
        }
        let cl = self.params.get_mut(self.ids.cluster);
        for c in 0..clusters.num_clusters() {
            cl.row_mut(c)
                .copy_from_slice(&clusters.cluster_embedding(ClusterId::from_index(c)));
        }
        Ok(())
    }

    /// Enables or disables the partner half of both sharing projections.
    /// When disabled those columns are zeroed now and after every update.
    pub fn set_share_partner(&mut self, on: bool) {
        self.share_partner = on;
        self.enforce_constraints();
    }

    pub fn share_partner(&self) -> bool {
        self.share_partner
    }

    /// Re-applies structural constraints after a parameter update.
    pub fn enforce_constraints(&mut self) {
        if self.share_partner {
            return;
        }
        let h = self.dims.hidden;
        for id in [self.ids.share_c, self.ids.share_e] {
            let t = self.params.get_mut(id);
            for r in 0..t.rows {
                t.row_mut(r)[h..2 * h].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Drops gradient on the partner halves when sharing is disabled, so
    /// they neither move nor count toward the clipping norm.
    pub fn mask_gradients(&self, grads: &mut Gradients) {
        if self.share_partner {
            return;
        }
        let h = self.dims.hidden;
        for id in [self.ids.share_c, self.ids.share_e] {
            if grads.get(id).is_none() {
                continue;
            }
            let g = grads.dense_mut(id);
            for r in 0..h {
                g[r * 2 * h + h..(r + 1) * 2 * h].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn dims(&self) -> PolicyDims {
        self.dims
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    /// `(entity table, relation table)`.
    pub fn embedding_table_ids(&self) -> (ParamId, ParamId) {
        (self.ids.entity, self.ids.relation)
    }

    pub fn share_projection_ids(&self) -> (ParamId, ParamId) {
        (self.ids.share_c, self.ids.share_e)
    }

    fn dummy_relation_row(&self) -> usize {
        self.shape.relations
    }

    fn stop_row(&self) -> usize {
        self.shape.clusters
    }

    /// Zero-state LSTM passes on the start cluster and `[r_0; e_s]`.
    pub fn init_histories(
        &self,
        tape: &mut Tape<'_>,
        start_cluster: ClusterId,
        source: EntityId,
    ) -> Result<(HistoryNodes, HistoryNodes)> {
        let h = self.dims.hidden;
        let zc = LstmCellState::zeros(h).on_tape(tape);
        let ze = LstmCellState::zeros(h).on_tape(tape);
        let c0 = tape.param_row(self.ids.cluster, start_cluster.index())?;
        let r0 = tape.param_row(self.ids.relation, self.dummy_relation_row())?;
        let es = tape.param_row(self.ids.entity, source.index())?;
        let xe = tape.concat(&[r0, es]);
        let hc = self.ids.lstm_c.step(tape, zc, c0)?;
        let he = self.ids.lstm_e.step(tape, ze, xe)?;
        Ok((HistoryNodes { lstm: hc, step: 0 }, HistoryNodes { lstm: he, step: 0 }))
    }

    /// Advances both histories by one step with hidden-state sharing.
    pub fn step_histories(
        &self,
        tape: &mut Tape<'_>,
        giant: HistoryNodes,
        dwarf: HistoryNodes,
        giant_action: NodeId,
        dwarf_action: NodeId,
    ) -> Result<(HistoryNodes, HistoryNodes)> {
        if giant.step != dwarf.step {
            return Err(Error::InvalidArgument(format!(
                "agents out of sync: steps {} and {}",
                giant.step, dwarf.step
            )));
        }
        let cat_c = tape.concat(&[giant.lstm.hidden, dwarf.lstm.hidden]);
        let cat_e = tape.concat(&[dwarf.lstm.hidden, giant.lstm.hidden]);
        let hc = tape.matvec(self.ids.share_c, cat_c)?;
        let he = tape.matvec(self.ids.share_e, cat_e)?;
        let nc = self.ids.lstm_c.step(
            tape,
            LstmNodes {
                hidden: hc,
                cell: giant.lstm.cell,
            },
            giant_action,
        )?;
        let ne = self.ids.lstm_e.step(
            tape,
            LstmNodes {
                hidden: he,
                cell: dwarf.lstm.cell,
            },
            dwarf_action,
        )?;
        let step = giant.step + 1;
        Ok((HistoryNodes { lstm: nc, step }, HistoryNodes { lstm: ne, step }))
    }

    pub fn cluster_action_embedding(&self, tape: &mut Tape<'_>, a: ClusterAction) -> Result<NodeId> {
        let row = match a {
            ClusterAction::Stop => self.stop_row(),
            ClusterAction::Move(c) => c.index(),
        };
        tape.param_row(self.ids.cluster, row)
    }

    /// `[r; e]`.
    pub fn edge_action_embedding(
        &self,
        tape: &mut Tape<'_>,
        (r, e): (RelationId, EntityId),
    ) -> Result<NodeId> {
        let rn = tape.param_row(self.ids.relation, r.index())?;
        let en = tape.param_row(self.ids.entity, e.index())?;
        Ok(tape.concat(&[rn, en]))
    }

    fn score(
        &self,
        tape: &mut Tape<'_>,
        head: Mlp2,
        out: ParamId,
        input: NodeId,
        embeddings: Vec<NodeId>,
    ) -> Result<ScoredActions> {
        if embeddings.is_empty() {
            return Err(Error::InvalidArgument("empty candidate list".into()));
        }
        let z = head.forward(tape, input)?;
        let q = tape.matvec(out, z)?;
        let scores = tape.row_dots(&embeddings, q)?;
        let mask = vec![true; embeddings.len()];
        let log_probs = tape.log_softmax(scores, &mask)?;
        Ok(ScoredActions {
            scores,
            log_probs,
            embeddings,
        })
    }

    /// Cluster-agent distribution over `candidates` at cluster `current`.
    pub fn score_giant(
        &self,
        tape: &mut Tape<'_>,
        current: ClusterId,
        history: HistoryNodes,
        candidates: &[ClusterAction],
    ) -> Result<ScoredActions> {
        let ct = tape.param_row(self.ids.cluster, current.index())?;
        let x = tape.concat(&[ct, history.lstm.hidden]);
        let embs = candidates
            .iter()
            .map(|&a| self.cluster_action_embedding(tape, a))
            .collect::<Result<Vec<_>>>()?;
        self.score(tape, self.ids.head_c, self.ids.out_c, x, embs)
    }

    /// Entity-agent distribution over `candidates` at entity `current`.
    pub fn score_dwarf(
        &self,
        tape: &mut Tape<'_>,
        current: EntityId,
        query_relation: RelationId,
        history: HistoryNodes,
        candidates: &[(RelationId, EntityId)],
    ) -> Result<ScoredActions> {
        let et = tape.param_row(self.ids.entity, current.index())?;
        let rq = tape.param_row(self.ids.relation, query_relation.index())?;
        let x = tape.concat(&[et, rq, history.lstm.hidden]);
        let embs = candidates
            .iter()
            .map(|&a| self.edge_action_embedding(tape, a))
            .collect::<Result<Vec<_>>>()?;
        self.score(tape, self.ids.head_e, self.ids.out_e, x, embs)
    }

    /// Probability vector over cluster candidates for plain-value history.
    pub fn giant_probabilities(
        &self,
        current: ClusterId,
        history: &AgentHistory,
        candidates: &[ClusterAction],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let h = history.on_tape(&mut tape);
        let s = self.score_giant(&mut tape, current, h, candidates)?;
        Ok(tape.value(s.log_probs).iter().map(|l| l.exp()).collect())
    }

    /// Probability vector over edge candidates for plain-value history.
    pub fn dwarf_probabilities(
        &self,
        current: EntityId,
        query_relation: RelationId,
        history: &AgentHistory,
        candidates: &[(RelationId, EntityId)],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let h = history.on_tape(&mut tape);
        let s = self.score_dwarf(&mut tape, current, query_relation, h, candidates)?;
        Ok(tape.value(s.log_probs).iter().map(|l| l.exp()).collect())
    }

    /// Plain-value initial histories.
    pub fn initial_histories(
        &self,
        start_cluster: ClusterId,
        source: EntityId,
    ) -> Result<(AgentHistory, AgentHistory)> {
        let mut tape = Tape::new(&self.params);
        let (c, e) = self.init_histories(&mut tape, start_cluster, source)?;
        Ok((AgentHistory::from_tape(&tape, c), AgentHistory::from_tape(&tape, e)))
    }

    /// Plain-value history update.
    pub fn next_histories(
        &self,
        giant: &AgentHistory,
        dwarf: &AgentHistory,
        giant_action: ClusterAction,
        dwarf_action: (RelationId, EntityId),
    ) -> Result<(AgentHistory, AgentHistory)> {
        let mut tape = Tape::new(&self.params);
        let gc = giant.on_tape(&mut tape);
        let de = dwarf.on_tape(&mut tape);
        let ac = self.cluster_action_embedding(&mut tape, giant_action)?;
        let ae = self.edge_action_embedding(&mut tape, dwarf_action)?;
        let (c, e) = self.step_histories(&mut tape, gc, de, ac, ae)?;
        Ok((AgentHistory::from_tape(&tape, c), AgentHistory::from_tape(&tape, e)))
    }

    fn manifest(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "kind": "dual-policy",
            "dims": self.dims,
            "shape": self.shape,
            "share_partner": self.share_partner,
            "extra": extra,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        save_checkpoint(path, &self.params, &self.manifest(extra))
    }

    /// Loads a checkpoint; returns the net and the caller's `extra` manifest.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (params, manifest) = load_checkpoint(path)?;
        let field = |k: &str| {
            manifest
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `{k}`")))
        };
        fn from<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
            serde_json::from_value(v).map_err(|e| Error::Format(e.to_string()))
        }
        let dims: PolicyDims = from(field("dims")?)?;
        let shape: PolicyShape = from(field("shape")?)?;
        let share_partner: bool = from(field("share_partner")?)?;
        let ids = Ids::lookup(&params)?;
        let extra = manifest.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((
            Self {
                params,
                ids,
                dims,
                shape,
                share_partner,
            },
            extra,
        ))
    }
}
