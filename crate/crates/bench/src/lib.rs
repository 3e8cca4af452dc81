//! Shared fixtures for the benchmarks: a mid-sized chain world with its
//! planted clusters and a randomly initialized policy.

use dualwalk::cluster::ClusterMap;
use dualwalk::embed::{EmbeddingStore, TransEConfig};
use dualwalk::policy::{PolicyDims, PolicyNet, PolicyShape};
use dualwalk::synth::{chain_world, ChainConfig, SynthWorld};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub world: SynthWorld,
    pub store: EmbeddingStore,
    pub clusters: ClusterMap,
    pub policy: PolicyNet,
}

/// `dims` are the policy sizes; embeddings use `dims.emb_dim`.
pub fn fixture(dims: PolicyDims) -> Fixture {
    let world = chain_world(ChainConfig::default(), 0).expect("chain world builds");
    let transe = TransEConfig {
        dim: dims.emb_dim,
        epochs: 20,
        ..TransEConfig::default()
    };
    let (store, clusters) = world.embed_and_cluster(&transe).expect("embedding succeeds");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy =
        PolicyNet::new(dims, PolicyShape::of(&world.kg, &clusters), &mut rng).expect("policy builds");
    policy.warm_start(&world.kg, &store, &clusters).expect("dims match");
    Fixture {
        world,
        store,
        clusters,
        policy,
    }
}
