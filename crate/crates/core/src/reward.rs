//! Terminal rewards, the cluster/entity consistency score, and the mutual
//! per-step rewards that gate each agent's partner term on the partner's
//! success.

use std::collections::BTreeSet;
use std::path::Path;

use crate::cluster::ClusterMap;
use crate::embed::EmbeddingStore;
use crate::env::{csv_error, Trajectory};
use crate::kg::{ClusterId, EntityId};
use crate::{Error, Result};

/// Per-step rewards for `t = 1..=T` plus the components they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector {
    pub cluster_terminal: f64,
    pub entity_terminal: f64,
    pub phi: Vec<f64>,
    pub giant: Vec<f64>,
    pub dwarf: Vec<f64>,
}

impl RewardVector {
    /// The entity agent's reward at the last step (0 for an empty episode).
    pub fn final_dwarf(&self) -> f64 {
        self.dwarf.last().copied().unwrap_or(0.0)
    }
}

/// `(r_c, r_e)`: whether the final cluster contains any answer, and
/// whether the final entity is one.
pub fn default_rewards(traj: &Trajectory, answers: &BTreeSet<EntityId>, clusters: &ClusterMap) -> (f64, f64) {
    let e = traj.final_entity();
    let c = traj.final_cluster();
    let r_e = f64::from(u8::from(answers.contains(&e)));
    let r_c = f64::from(u8::from(answers.iter().any(|&a| clusters.cluster_of(a) == c)));
    (r_c, r_e)
}

/// Cosine between an entity's pretrained embedding and a cluster's mean;
/// 0 when either vector has zero norm.
pub fn phi(cluster: ClusterId, entity: EntityId, store: &EmbeddingStore, clusters: &ClusterMap) -> f64 {
    cosine(clusters.mean(cluster), store.entity(entity))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        tracing::debug!("zero-norm vector in consistency score; using 0");
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// `R_c,t = r_c + Φ_t·r_e` and `R_e,t = r_e + Φ_t·r_c` for every step.
pub fn mutual_rewards(r_c: f64, r_e: f64, phi: &[f64]) -> RewardVector {
    RewardVector {
        cluster_terminal: r_c,
        entity_terminal: r_e,
        phi: phi.to_vec(),
        giant: phi.iter().map(|&p| r_c + p * r_e).collect(),
        dwarf: phi.iter().map(|&p| r_e + p * r_c).collect(),
    }
}

/// Full reward computation for a finished episode. With `use_phi` off every
/// consistency score is 0 and each agent only sees its own terminal reward.
pub fn episode_rewards(
    traj: &Trajectory,
    answers: &BTreeSet<EntityId>,
    clusters: &ClusterMap,
    store: &EmbeddingStore,
    use_phi: bool,
) -> RewardVector {
    let (r_c, r_e) = default_rewards(traj, answers, clusters);
    let phis: Vec<f64> = (1..traj.entities.len())
        .map(|t| {
            if use_phi {
                phi(traj.clusters[t], traj.entities[t], store, clusters)
            } else {
                0.0
            }
        })
        .collect();
    mutual_rewards(r_c, r_e, &phis)
}

/// Writes `episode, t, phi, reward_c, reward_e` rows.
pub fn write_reward_breakdown(rewards: &[RewardVector], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["episode", "t", "phi", "reward_c", "reward_e"])
        .map_err(|e| csv_error(path, e))?;
    for (i, r) in rewards.iter().enumerate() {
        for t in 0..r.phi.len() {
            w.write_record([
                i.to_string(),
                (t + 1).to_string(),
                r.phi[t].to_string(),
                r.giant[t].to_string(),
                r.dwarf[t].to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        let r = mutual_rewards(1.0, 1.0, &[0.8]);
        assert_eq!((r.giant[0], r.dwarf[0]), (1.8, 1.8));
        let r = mutual_rewards(1.0, 0.0, &[0.3, -0.7]);
        assert_eq!(r.giant, vec![1.0, 1.0]);
        let r = mutual_rewards(0.0, 1.0, &[-0.5]);
        assert_eq!(r.dwarf[0], 1.0);
        assert_eq!(r.giant[0], -0.5);
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    proptest! {
        #[test]
        fn gating_bounds_and_reduction(
            r_c in 0u8..2,
            r_e in 0u8..2,
            phi in proptest::collection::vec(-1.0f64..=1.0, 1..8),
        ) {
            let (r_c, r_e) = (f64::from(r_c), f64::from(r_e));
            let r = mutual_rewards(r_c, r_e, &phi);
            for t in 0..phi.len() {
                if r.dwarf[t] != r_e { prop_assert_eq!(r_c, 1.0); }
                if r.giant[t] != r_c { prop_assert_eq!(r_e, 1.0); }
                prop_assert!(r.giant[t].abs() <= 2.0 && r.dwarf[t].abs() <= 2.0);
            }
            let z = mutual_rewards(r_c, r_e, &vec![0.0; phi.len()]);
            prop_assert!(z.giant.iter().all(|&g| g == r_c));
            prop_assert!(z.dwarf.iter().all(|&d| d == r_e));
        }
    }
}
