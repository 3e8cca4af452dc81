//! Joint REINFORCE training of both agents.
//!
//! Each batch runs in two phases. Rollouts are first sampled in parallel
//! against the current parameters and scored; baselines are then updated
//! from the whole batch, and the recorded action sequences are replayed on
//! fresh tapes to backpropagate the advantage-weighted objective. Gradients
//! are reduced in a fixed chunk order, so results do not depend on the
//! number of worker threads.

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterMap;
use crate::diffnet::{AdamConfig, AdamState, Gradients, Tape};
use crate::embed::EmbeddingStore;
use crate::env::{csv_error, rollout, rollout_on_tape, Chooser, DualEnv, Query, Trajectory};
use crate::eval::{evaluate_link_prediction, PolicyWalker, RankOptions};
use crate::kg::{AnswerIndex, KnowledgeGraph, RelationId, Split, Triple};
use crate::policy::{PolicyDims, PolicyNet};
use crate::reward::{episode_rewards, RewardVector};
use crate::{Error, Result};

/// How each step's log-probability is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Credit {
    /// The step's own reward.
    #[default]
    PerStep,
    /// The sum of rewards from the step to the end.
    ReturnToGo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetPreset {
    Fb15k237,
    Wn18rr,
    Nell995,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Steps per episode.
    pub horizon: usize,
    /// Passes over the training queries.
    pub epochs: usize,
    /// Sampled rollouts per query during training.
    pub rollouts: usize,
    /// Sampled rollouts per query for sampled-ranking evaluation.
    pub test_rollouts: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub entropy_beta: f64,
    /// Moving-average decay of the baselines.
    pub baseline_lambda: f64,
    pub seed: u64,
    /// Expected number of clusters in the cluster map.
    pub clusters: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    /// Beam width for dev evaluation.
    pub beam: usize,
    pub grad_clip: f64,
    pub credit: Credit,
    /// Partner halves of the sharing projections stay live.
    pub share_hidden: bool,
    /// Partner rewards weighted by the consistency score; off forces it to 0.
    pub use_phi: bool,
    /// Hide each training query's own edge from the entity agent.
    pub mask_query_edge: bool,
    /// Update the policy's entity table; off keeps the pretrained rows.
    pub train_entity_embeddings: bool,
    /// Update the policy's relation table.
    pub train_relation_embeddings: bool,
    /// Restrict training and dev queries to these relation tokens.
    pub query_relations: Vec<String>,
    /// Dev triples evaluated per epoch (0 = all).
    pub dev_queries: usize,
    /// Evaluate on dev every this many epochs (0 = never).
    pub eval_every: usize,
    /// Rollouts per gradient chunk; fixes the reduction order.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(DatasetPreset::Fb15k237)
    }
}

impl TrainConfig {
    pub fn preset(p: DatasetPreset) -> Self {
        let (beta, lambda, clusters) = match p {
            DatasetPreset::Fb15k237 => (0.2, 0.2, 50),
            DatasetPreset::Wn18rr => (0.06, 0.0, 75),
            DatasetPreset::Nell995 => (0.07, 0.07, 75),
        };
        Self {
            horizon: 3,
            epochs: 20,
            rollouts: 20,
            test_rollouts: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            entropy_beta: beta,
            baseline_lambda: lambda,
            seed: 0,
            clusters,
            emb_dim: 50,
            hidden: 200,
            beam: 50,
            grad_clip: 5.0,
            credit: Credit::PerStep,
            share_hidden: true,
            use_phi: true,
            mask_query_edge: true,
            train_entity_embeddings: true,
            train_relation_embeddings: true,
            query_relations: Vec::new(),
            dev_queries: 0,
            eval_every: 1,
            chunk_size: 16,
        }
    }

    pub fn dims(&self) -> PolicyDims {
        PolicyDims {
            emb_dim: self.emb_dim,
            hidden: self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("epochs", self.epochs),
            ("rollouts", self.rollouts),
            ("test_rollouts", self.test_rollouts),
            ("batch_size", self.batch_size),
            ("clusters", self.clusters),
            ("emb_dim", self.emb_dim),
            ("hidden", self.hidden),
            ("beam", self.beam),
            ("chunk_size", self.chunk_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("`{k}` must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("`learning_rate` must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidArgument("`grad_clip` must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_lambda) {
            return Err(Error::InvalidArgument("`baseline_lambda` must lie in [0, 1)".into()));
        }
        if !(self.entropy_beta >= 0.0 && self.entropy_beta.is_finite()) {
            return Err(Error::InvalidArgument("`entropy_beta` must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-agent moving averages subtracted from the step weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineState {
    pub giant: f64,
    pub dwarf: f64,
}

impl BaselineState {
    /// `b ← λ·b + (1 − λ)·mean`.
    pub fn update(&mut self, lambda: f64, giant_mean: f64, dwarf_mean: f64) {
        self.giant = lambda * self.giant + (1.0 - lambda) * giant_mean;
        self.dwarf = lambda * self.dwarf + (1.0 - lambda) * dwarf_mean;
    }
}

/// Per-step weights for one agent under a credit scheme.
pub fn step_weights(rewards: &[f64], credit: Credit) -> Vec<f64> {
    match credit {
        Credit::PerStep => rewards.to_vec(),
        Credit::ReturnToGo => {
            let mut out = vec![0.0; rewards.len()];
            let mut acc = 0.0;
            for t in (0..rewards.len()).rev() {
                acc += rewards[t];
                out[t] = acc;
            }
            out
        }
    }
}

/// Fraction of episodes whose final entity-agent reward is positive.
pub fn positive_reward_rate(rewards: &[RewardVector]) -> f64 {
    if rewards.is_empty() {
        return 0.0;
    }
    rewards.iter().filter(|r| r.final_dwarf() > 0.0).count() as f64 / rewards.len() as f64
}

/// A trajectory with the per-step multipliers of its log-probabilities.
#[derive(Debug, Clone)]
pub struct WeightedEpisode<'t> {
    pub trajectory: &'t Trajectory,
    pub giant_weights: Vec<f64>,
    pub dwarf_weights: Vec<f64>,
}

/// Gradient of
/// `mean_episodes[ −Σ_t w_t·log π(a_t) − β·mean_t H(π_t) ]` summed over
/// both agents. Episodes are replayed in chunks of `chunk_size`; chunk
/// gradients are summed in chunk order.
pub fn policy_gradient(
    env: &DualEnv<'_>,
    policy: &PolicyNet,
    episodes: &[WeightedEpisode<'_>],
    entropy_beta: f64,
    chunk_size: usize,
) -> Result<Gradients> {
    let mut total = Gradients::for_params(&policy.params);
    if episodes.is_empty() {
        return Ok(total);
    }
    let n = episodes.len() as f64;
    let chunks: Vec<&[WeightedEpisode<'_>]> = episodes.chunks(chunk_size.max(1)).collect();
    let wave = (rayon::current_num_threads() * 2).max(1);
    for group in chunks.chunks(wave) {
        let grads = group
            .par_iter()
            .map(|chunk| {
                let mut g = Gradients::for_params(&policy.params);
                for ep in chunk.iter() {
                    let t = ep.trajectory;
                    let mut tape = Tape::new(&policy.params);
                    let mut chooser = Chooser::<ChaCha8Rng>::Replay {
                        giant: &t.giant_choices,
                        dwarf: &t.dwarf_choices,
                    };
                    let (_, nodes) = rollout_on_tape(env, policy, &mut tape, t.query, &mut chooser)?;
                    let steps = nodes.giant_log_prob.len().max(1) as f64;
                    let ent = -entropy_beta / (steps * n);
                    let mut seeds = Vec::with_capacity(4 * nodes.giant_log_prob.len());
                    for s in 0..nodes.giant_log_prob.len() {
                        seeds.push((nodes.giant_log_prob[s], -ep.giant_weights[s] / n));
                        seeds.push((nodes.dwarf_log_prob[s], -ep.dwarf_weights[s] / n));
                        if entropy_beta != 0.0 {
                            seeds.push((nodes.giant_entropy[s], ent));
                            seeds.push((nodes.dwarf_entropy[s], ent));
                        }
                    }
                    if !seeds.is_empty() {
                        tape.backward(&seeds, &mut g)?;
                    }
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        for g in &grads {
            total.accumulate(g);
        }
    }
    Ok(total)
}

/// Mixes a base seed with a position to give an independent stream seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |h, &p| mix(h ^ mix(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub loss_c: f64,
    pub loss_e: f64,
    pub positive: usize,
    pub rollouts: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_e: f64,
    pub positive_reward_rate: f64,
    pub dev_hits1: Option<f64>,
    pub dev_mrr: Option<f64>,
    pub wall_time: f64,
}

pub struct TrainOutcome {
    /// Parameters with the best dev MRR (the last ones without dev data).
    pub best: PolicyNet,
    pub best_epoch: Option<usize>,
    pub last: PolicyNet,
    pub metrics: Vec<EpochMetrics>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    kg: &'a KnowledgeGraph,
    clusters: &'a ClusterMap,
    store: &'a EmbeddingStore,
    policy: PolicyNet,
    adam: AdamState,
    baseline: BaselineState,
    train_queries: Vec<Triple>,
    dev_queries: Vec<Triple>,
    train_answers: AnswerIndex,
    known: AnswerIndex,
}

impl<'a> Trainer<'a> {
    pub fn new(
        kg: &'a KnowledgeGraph,
        clusters: &'a ClusterMap,
        store: &'a EmbeddingStore,
        mut policy: PolicyNet,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if clusters.num_clusters() != config.clusters {
            return Err(Error::DimensionMismatch {
                what: "cluster count",
                expected: config.clusters,
                found: clusters.num_clusters(),
            });
        }
        if policy.dims() != config.dims() {
            return Err(Error::InvalidArgument(format!(
                "policy dims {:?} differ from configured {:?}",
                policy.dims(),
                config.dims()
            )));
        }
        policy.set_share_partner(config.share_hidden);
        let relations: Vec<RelationId> = config
            .query_relations
            .iter()
            .map(|r| kg.relation_id(r))
            .collect::<Result<_>>()?;
        let keep = |t: &&Triple| relations.is_empty() || relations.contains(&t.relation);
        let train_queries: Vec<Triple> = kg.triples(Split::Train).iter().filter(keep).copied().collect();
        if train_queries.is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        let mut dev_queries: Vec<Triple> = kg.triples(Split::Dev).iter().filter(keep).copied().collect();
        if config.dev_queries > 0 {
            dev_queries.truncate(config.dev_queries);
        }
        let adam = AdamState::new(
            &policy.params,
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            train_answers: AnswerIndex::from_splits(kg, &[Split::Train]),
            known: AnswerIndex::from_splits(kg, &Split::ALL),
            config,
            kg,
            clusters,
            store,
            policy,
            adam,
            baseline: BaselineState::default(),
            train_queries,
            dev_queries,
        })
    }

    pub fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    pub fn baseline(&self) -> BaselineState {
        self.baseline
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn train_env(&self) -> DualEnv<'a> {
        DualEnv::new(self.kg, self.clusters, self.config.horizon).with_query_edge_masking(self.config.mask_query_edge)
    }

    fn eval_env(&self) -> DualEnv<'a> {
        DualEnv::new(self.kg, self.clusters, self.config.horizon)
    }

    /// Samples `rollouts` episodes per query and scores them.
    pub fn sample_batch(
        &self,
        batch: &[Triple],
        epoch: usize,
        index: usize,
    ) -> Result<Vec<(Trajectory, RewardVector)>> {
        let env = self.train_env();
        let l = self.config.rollouts;
        let empty = Default::default();
        (0..batch.len() * l)
            .into_par_iter()
            .map(|k| {
                let t = batch[k / l];
                let seed = derive_seed(self.config.seed, &[epoch as u64, index as u64, k as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q = Query::new(t.source, t.relation).with_target(t.target);
                let traj = rollout(&env, &self.policy, q, &mut Chooser::Sample(&mut rng))?;
                let answers = self.train_answers.answers(t.source, t.relation).unwrap_or(&empty);
                let r = episode_rewards(&traj, answers, self.clusters, self.store, self.config.use_phi);
                Ok((traj, r))
            })
            .collect()
    }

    /// One REINFORCE update on `batch`.
    pub fn train_batch(&mut self, batch: &[Triple], epoch: usize, index: usize) -> Result<BatchStats> {
        let episodes = self.sample_batch(batch, epoch, index)?;
        let cfg = &self.config;
        let wc: Vec<Vec<f64>> = episodes.iter().map(|(_, r)| step_weights(&r.giant, cfg.credit)).collect();
        let we: Vec<Vec<f64>> = episodes.iter().map(|(_, r)| step_weights(&r.dwarf, cfg.credit)).collect();
        let mean = |w: &[Vec<f64>]| {
            let n: usize = w.iter().map(Vec::len).sum();
            w.iter().flatten().sum::<f64>() / n.max(1) as f64
        };
        self.baseline.update(cfg.baseline_lambda, mean(&wc), mean(&we));
        let b = self.baseline;
        let weighted: Vec<WeightedEpisode<'_>> = episodes
            .iter()
            .zip(wc.iter().zip(&we))
            .map(|((t, _), (c, e))| WeightedEpisode {
                trajectory: t,
                giant_weights: c.iter().map(|x| x - b.giant).collect(),
                dwarf_weights: e.iter().map(|x| x - b.dwarf).collect(),
            })
            .collect();
        let n = weighted.len() as f64;
        let beta = cfg.entropy_beta;
        let agent_loss = |lp: &[f64], h: &[f64], w: &[f64]| {
            let pg: f64 = lp.iter().zip(w).map(|(l, w)| -w * l).sum();
            pg - beta * h.iter().sum::<f64>() / h.len().max(1) as f64
        };
        let (mut loss_c, mut loss_e) = (0.0, 0.0);
        for w in &weighted {
            let t = w.trajectory;
            loss_c += agent_loss(&t.giant_log_probs, &t.giant_entropies, &w.giant_weights) / n;
            loss_e += agent_loss(&t.dwarf_log_probs, &t.dwarf_entropies, &w.dwarf_weights) / n;
        }
        if !(loss_c.is_finite() && loss_e.is_finite()) {
            let dump: Vec<String> = batch
                .iter()
                .map(|t| {
                    format!(
                        "{}\t{}\t{}",
                        self.kg.entity_token(t.source),
                        self.kg.relation_token(t.relation),
                        self.kg.entity_token(t.target)
                    )
                })
                .collect();
            return Err(Error::Numeric(format!(
                "non-finite loss (cluster {loss_c}, entity {loss_e}) in epoch {epoch} batch {index}; batch:\n{}",
                dump.join("\n")
            )));
        }
        let env = self.train_env();
        let mut grads = policy_gradient(&env, &self.policy, &weighted, beta, cfg.chunk_size)?;
        self.policy.mask_gradients(&mut grads);
        let (entity_table, relation_table) = self.policy.embedding_table_ids();
        if !cfg.train_entity_embeddings {
            grads.zero_param(entity_table);
        }
        if !cfg.train_relation_embeddings {
            grads.zero_param(relation_table);
        }
        if !grads.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in epoch {epoch} batch {index}")));
        }
        let grad_norm = grads.clip_global_norm(cfg.grad_clip);
        self.adam.step(&mut self.policy.params, &mut grads);
        self.policy.enforce_constraints();
        let positive = episodes.iter().filter(|(_, r)| r.final_dwarf() > 0.0).count();
        Ok(BatchStats {
            loss_c,
            loss_e,
            positive,
            rollouts: episodes.len(),
            grad_norm,
        })
    }

    /// Filtered dev Hits@1 and MRR with the current parameters.
    pub fn evaluate_dev(&self) -> Result<Option<(f64, f64)>> {
        if self.dev_queries.is_empty() {
            return Ok(None);
        }
        let walker = PolicyWalker { policy: &self.policy };
        let (m, _) = evaluate_link_prediction(
            &self.eval_env(),
            &walker,
            &self.dev_queries,
            &self.known,
            self.config.beam,
            RankOptions::default(),
        )?;
        Ok(Some((m.hits1, m.mrr)))
    }

    /// One pass over the shuffled training queries (`epoch` is 1-based).
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let started = Instant::now();
        let mut order = self.train_queries.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[epoch as u64])));
        let (mut lc, mut le, mut pos, mut n) = (0.0, 0.0, 0usize, 0usize);
        for (i, batch) in order.chunks(self.config.batch_size).enumerate() {
            let s = self.train_batch(batch, epoch, i)?;
            lc += s.loss_c * s.rollouts as f64;
            le += s.loss_e * s.rollouts as f64;
            pos += s.positive;
            n += s.rollouts;
        }
        let every = self.config.eval_every;
        let dev = if every > 0 && (epoch % every == 0 || epoch == self.config.epochs) {
            self.evaluate_dev()?
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            loss_c: lc / n as f64,
            loss_e: le / n as f64,
            positive_reward_rate: pos as f64 / n as f64,
            dev_hits1: dev.map(|d| d.0),
            dev_mrr: dev.map(|d| d.1),
            wall_time: started.elapsed().as_secs_f64(),
        };
        tracing::info!(
            epoch,
            loss_c = m.loss_c,
            loss_e = m.loss_e,
            positive_rate = m.positive_reward_rate,
            dev_hits1 = ?m.dev_hits1,
            dev_mrr = ?m.dev_mrr,
            "epoch finished"
        );
        Ok(m)
    }

    /// Runs every epoch, reporting each to `on_epoch`, and keeps the
    /// parameters with the best dev MRR.
    pub fn train(mut self, mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>) -> Result<TrainOutcome> {
        let mut metrics = Vec::with_capacity(self.config.epochs);
        let mut best: Option<(f64, usize, PolicyNet)> = None;
        for epoch in 1..=self.config.epochs {
            let m = self.run_epoch(epoch)?;
            on_epoch(&m)?;
            if let Some(mrr) = m.dev_mrr {
                if best.as_ref().is_none_or(|(b, _, _)| mrr > *b) {
                    best = Some((mrr, epoch, self.policy.clone()));
                }
            }
            metrics.push(m);
        }
        let (best, best_epoch) = match best {
            Some((_, e, p)) => (p, Some(e)),
            None => (self.policy.clone(), None),
        };
        Ok(TrainOutcome {
            best,
            best_epoch,
            last: self.policy,
            metrics,
        })
    }
}

/// Append-only metrics log; `wall_time` can be left out so that logs of
/// identical runs compare byte for byte.
pub struct MetricsWriter {
    writer: csv::Writer<File>,
    path: std::path::PathBuf,
    wall_time: bool,
}

impl MetricsWriter {
    pub fn create(path: &Path, wall_time: bool) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec![
            "epoch",
            "loss_c",
            "loss_e",
            "positive_reward_rate",
            "dev_hits1",
            "dev_mrr",
        ];
        if wall_time {
            header.push("wall_time");
        }
        writer.write_record(&header).map_err(|e| csv_error(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
            wall_time,
        })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut row = vec![
            m.epoch.to_string(),
            m.loss_c.to_string(),
            m.loss_e.to_string(),
            m.positive_reward_rate.to_string(),
            opt(m.dev_hits1),
            opt(m.dev_mrr),
        ];
        if self.wall_time {
            row.push(format!("{:.3}", m.wall_time));
        }
        self.writer.write_record(&row).map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn return_to_go_sums_suffixes() {
        assert_eq!(step_weights(&[1.0, 2.0, 3.0], Credit::ReturnToGo), vec![6.0, 5.0, 3.0]);
        assert_eq!(step_weights(&[1.0, 2.0], Credit::PerStep), vec![1.0, 2.0]);
    }

    #[test]
    fn baseline_zero_lambda_is_batch_mean() {
        let mut b = BaselineState { giant: 7.0, dwarf: -3.0 };
        b.update(0.0, 0.25, 0.5);
        assert_eq!(b, BaselineState { giant: 0.25, dwarf: 0.5 });
        b.update(0.5, 1.25, 0.5);
        assert_eq!(b, BaselineState { giant: 0.75, dwarf: 0.5 });
    }

    fn rv(final_dwarf: f64) -> RewardVector {
        RewardVector {
            cluster_terminal: 0.0,
            entity_terminal: final_dwarf,
            phi: vec![0.0],
            giant: vec![0.0],
            dwarf: vec![final_dwarf],
        }
    }

    #[test]
    fn positive_rate_counts() {
        let r: Vec<_> = (0..8).map(|i| rv(if i < 3 { 1.0 } else { 0.0 })).collect();
        assert_eq!(positive_reward_rate(&r), 0.375);
        assert_eq!(positive_reward_rate(&[rv(1.0), rv(1.5)]), 1.0);
        assert_eq!(positive_reward_rate(&[rv(0.0)]), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            baseline_lambda: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            entropy_beta: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            rollouts: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let wn = TrainConfig::preset(DatasetPreset::Wn18rr);
        assert_eq!((wn.horizon, wn.entropy_beta, wn.baseline_lambda, wn.clusters), (3, 0.06, 0.0, 75));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"horizon": 4, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"horizon": 4}"#).unwrap();
        assert_eq!(ok.horizon, 4);
        assert_eq!(ok.batch_size, 128);
    }

    #[test]
    fn derived_seeds_differ_by_position() {
        let a = derive_seed(1, &[0, 0, 1]);
        assert_ne!(a, derive_seed(1, &[0, 0, 2]));
        assert_ne!(a, derive_seed(2, &[0, 0, 1]));
        assert_eq!(a, derive_seed(1, &[0, 0, 1]));
    }
}
