//! One function per pipeline stage. Each writes into a fresh [`Run`] and
//! returns its directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dualwalk::cluster::{read_assignment, ClusterMap};
use dualwalk::embed::{train_transe_with, EmbeddingStore};
use dualwalk::env::DualEnv;
use dualwalk::eval::{
    beam_search, evaluate_link_prediction, fact_prediction_map, read_fact_queries, write_results, LinkMetrics,
    PolicyWalker, RankOptions, ResultRow, TieMode, UniformWalker, Walker,
};
use dualwalk::kg::{load_graph, AnswerIndex, GraphOptions, KnowledgeGraph, RelationId, Split, SplitPaths, Triple};
use dualwalk::longpath::{ablate_and_run, write_length_metrics};
use dualwalk::policy::{PolicyNet, PolicyShape};
use dualwalk::trainer::{derive_seed, MetricsWriter, TrainConfig, Trainer};
use dualwalk::env::Query;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::artifact::{Loaded, Run};
use crate::config::{RunConfig, WalkerKind};
use crate::error::{CliError, CliResult};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Artifact(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn relation_ids(kg: &KnowledgeGraph, tokens: &[String]) -> CliResult<Vec<RelationId>> {
    tokens
        .iter()
        .map(|t| kg.relation_id(t).map_err(|e| CliError::Config(e.to_string())))
        .collect()
}

fn select(kg: &KnowledgeGraph, split: Split, relations: &[RelationId]) -> Vec<Triple> {
    kg.triples(split)
        .iter()
        .filter(|t| relations.is_empty() || relations.contains(&t.relation))
        .copied()
        .collect()
}

fn task_label(tokens: &[String]) -> String {
    if tokens.is_empty() {
        "all".into()
    } else {
        tokens.join("+")
    }
}

// Upstream loading.

pub fn load_kg(up: &Loaded) -> CliResult<KnowledgeGraph> {
    let opts_path = up.artifact("graph_options")?;
    let text = std::fs::read_to_string(opts_path).map_err(|e| io_err(opts_path, e))?;
    let options: GraphOptions = serde_json::from_str(&text).map_err(|e| io_err(opts_path, e))?;
    let paths = SplitPaths {
        train: up.artifact("train")?.to_path_buf(),
        dev: Some(up.artifact("dev")?.to_path_buf()),
        test: Some(up.artifact("test")?.to_path_buf()),
    };
    Ok(load_graph(&paths, options)?)
}

pub fn load_store(up: &Loaded, kg: &KnowledgeGraph) -> CliResult<EmbeddingStore> {
    let store = EmbeddingStore::load(up.artifact("embeddings")?)?;
    store.validate(kg, store.dim())?;
    Ok(store)
}

pub fn load_clusters(up: &Loaded, kg: &KnowledgeGraph, store: &EmbeddingStore) -> CliResult<ClusterMap> {
    let assignment = read_assignment(kg, up.artifact("clusters")?)?;
    Ok(ClusterMap::from_assignment(kg, store, assignment)?)
}

pub fn load_policy(up: &Loaded) -> CliResult<(PolicyNet, serde_json::Value)> {
    Ok(PolicyNet::load(up.artifact("policy")?)?)
}

// Stage bodies, shared by the standalone commands and `train --data`.

fn preprocess_into(run: &mut Run, cfg: &RunConfig, data: &SplitPaths) -> CliResult<KnowledgeGraph> {
    let kg = load_graph(data, cfg.graph)?;
    for split in Split::ALL {
        let name = format!("{}.txt", split.file_stem());
        kg.write_triples(&run.path(&name), kg.triples(split))?;
        run.record(split.file_stem(), &name)?;
    }
    kg.entities().write_tsv(&run.path("entities.tsv"))?;
    run.record("entities", "entities.tsv")?;
    kg.relations().write_tsv(&run.path("relations.tsv"))?;
    run.record("relations", "relations.tsv")?;
    write_json(&run.path("graph_options.json"), &serde_json::to_value(cfg.graph).expect("serializes"))?;
    run.record("graph_options", "graph_options.json")?;
    let (mean, median) = kg.degree_stats();
    write_json(
        &run.path("stats.json"),
        &json!({
            "entities": kg.num_entities(),
            "raw_relations": kg.num_raw_relations(),
            "relations": kg.num_relations(),
            "train": kg.triples(Split::Train).len(),
            "dev": kg.triples(Split::Dev).len(),
            "test": kg.triples(Split::Test).len(),
            "indexed_edges": kg.edge_count(),
            "degree_mean": mean,
            "degree_median": median,
        }),
    )?;
    run.record("stats", "stats.json")?;
    tracing::info!(entities = kg.num_entities(), relations = kg.num_raw_relations(), "graph loaded");
    Ok(kg)
}

fn pretrain_into(run: &mut Run, cfg: &RunConfig, kg: &KnowledgeGraph) -> CliResult<EmbeddingStore> {
    let mut losses = Vec::with_capacity(cfg.transe.epochs);
    let store = train_transe_with(kg, &cfg.transe, |epoch, loss, _| {
        tracing::debug!(epoch, loss, "transe epoch");
        losses.push(loss);
    })?;
    store.save(&run.path("embeddings.bin"))?;
    run.record("embeddings", "embeddings.bin")?;
    let p = run.path("transe_loss.csv");
    let body: String = losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)).collect();
    std::fs::write(&p, format!("epoch,loss\n{body}")).map_err(|e| io_err(&p, e))?;
    run.record("transe_loss", "transe_loss.csv")?;
    Ok(store)
}

fn cluster_into(run: &mut Run, cfg: &RunConfig, kg: &KnowledgeGraph, store: &EmbeddingStore) -> CliResult<ClusterMap> {
    let (map, outcome) = ClusterMap::kmeans(kg, store, cfg.train.clusters, &cfg.kmeans)?;
    map.write_assignment(kg, &run.path("clusters.tsv"))?;
    run.record("clusters", "clusters.tsv")?;
    map.write_graph(&run.path("cluster_graph.tsv"))?;
    run.record("cluster_graph", "cluster_graph.tsv")?;
    write_json(
        &run.path("kmeans.json"),
        &json!({ "iterations": outcome.iterations, "wcss": outcome.wcss_history }),
    )?;
    run.record("kmeans", "kmeans.json")?;
    Ok(map)
}

fn check_dims(cfg: &RunConfig, store: &EmbeddingStore) -> CliResult<()> {
    if store.dim() != cfg.train.emb_dim {
        return Err(CliError::Config(format!(
            "train.emb_dim = {} but the pretrained embeddings have dimension {}; set them equal",
            cfg.train.emb_dim,
            store.dim()
        )));
    }
    Ok(())
}

/// Fresh warm-started policy trained under `tc`; returns (best, last, best epoch).
fn fit(
    kg: &KnowledgeGraph,
    clusters: &ClusterMap,
    store: &EmbeddingStore,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&dualwalk::trainer::EpochMetrics) -> dualwalk::Result<()>,
) -> CliResult<(PolicyNet, PolicyNet, Option<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[0]));
    let mut policy = PolicyNet::new(tc.dims(), PolicyShape::of(kg, clusters), &mut rng)?;
    policy.warm_start(kg, store, clusters)?;
    let trainer = Trainer::new(kg, clusters, store, policy, tc.clone())?;
    let out = trainer.train(&mut on_epoch)?;
    Ok((out.best, out.last, out.best_epoch))
}

fn train_into(
    run: &mut Run,
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    store: &EmbeddingStore,
    clusters: &ClusterMap,
) -> CliResult<()> {
    check_dims(cfg, store)?;
    let mut metrics = MetricsWriter::create(&run.path("metrics.csv"), false)?;
    let mut timing = String::from("epoch,wall_time\n");
    let t0 = Instant::now();
    let (best, last, best_epoch) = fit(kg, clusters, store, &cfg.train, |m| {
        tracing::info!(
            epoch = m.epoch,
            loss_c = m.loss_c,
            loss_e = m.loss_e,
            positive_rate = m.positive_reward_rate,
            dev_hits1 = m.dev_hits1,
            dev_mrr = m.dev_mrr,
            "epoch done"
        );
        timing.push_str(&format!("{},{:.3}\n", m.epoch, m.wall_time));
        metrics.append(m)
    })?;
    let extra = json!({ "horizon": cfg.train.horizon, "best_epoch": best_epoch });
    best.save(&run.path("policy.ckpt"), extra.clone())?;
    last.save(&run.path("policy_last.ckpt"), extra)?;
    let p = run.path("timing.csv");
    std::fs::write(&p, timing).map_err(|e| io_err(&p, e))?;
    for (role, file) in [
        ("policy", "policy.ckpt"),
        ("policy_last", "policy_last.ckpt"),
        ("metrics", "metrics.csv"),
        ("timing", "timing.csv"),
    ] {
        run.record(role, file)?;
    }
    tracing::info!(?best_epoch, seconds = t0.elapsed().as_secs_f64(), "training finished");
    Ok(())
}

// Commands.

pub fn preprocess(root: &Path, cfg: &RunConfig, data: &SplitPaths) -> CliResult<PathBuf> {
    let mut run = Run::create(root, "preprocess", cfg, None)?;
    preprocess_into(&mut run, cfg, data)?;
    run.finish()
}

pub fn pretrain(root: &Path, cfg: &RunConfig, graph: &Path) -> CliResult<PathBuf> {
    let up = Loaded::open(graph)?;
    let kg = load_kg(&up)?;
    let mut run = Run::create(root, "pretrain", cfg, Some(&up))?;
    pretrain_into(&mut run, cfg, &kg)?;
    run.finish()
}

pub fn cluster(root: &Path, cfg: &RunConfig, embeddings: &Path) -> CliResult<PathBuf> {
    let up = Loaded::open(embeddings)?;
    let kg = load_kg(&up)?;
    let store = load_store(&up, &kg)?;
    let mut run = Run::create(root, "cluster", cfg, Some(&up))?;
    cluster_into(&mut run, cfg, &kg, &store)?;
    run.finish()
}

pub enum TrainSource<'a> {
    Clusters(&'a Path),
    /// Run every earlier stage into the same directory first.
    Data(SplitPaths),
}

pub fn train(root: &Path, cfg: &RunConfig, source: TrainSource<'_>) -> CliResult<PathBuf> {
    match source {
        TrainSource::Clusters(dir) => {
            let up = Loaded::open(dir)?;
            let kg = load_kg(&up)?;
            let store = load_store(&up, &kg)?;
            let clusters = load_clusters(&up, &kg, &store)?;
            let mut run = Run::create(root, "train", cfg, Some(&up))?;
            train_into(&mut run, cfg, &kg, &store, &clusters)?;
            run.finish()
        }
        TrainSource::Data(paths) => {
            if cfg.transe.dim != cfg.train.emb_dim {
                return Err(CliError::Config(format!(
                    "transe.dim = {} differs from train.emb_dim = {}",
                    cfg.transe.dim, cfg.train.emb_dim
                )));
            }
            let mut run = Run::create(root, "train", cfg, None)?;
            let kg = preprocess_into(&mut run, cfg, &paths)?;
            let store = pretrain_into(&mut run, cfg, &kg)?;
            let clusters = cluster_into(&mut run, cfg, &kg, &store)?;
            train_into(&mut run, cfg, &kg, &store, &clusters)?;
            run.finish()
        }
    }
}

fn metric_rows(cfg: &RunConfig, task: &str, beam: usize, horizon: usize, m: &LinkMetrics) -> Vec<ResultRow> {
    [("hits@1", m.hits1), ("hits@3", m.hits3), ("hits@10", m.hits10), ("mrr", m.mrr)]
        .into_iter()
        .map(|(metric, value)| ResultRow {
            dataset: cfg.dataset.clone(),
            task: task.to_string(),
            metric: metric.into(),
            value,
            beam,
            horizon,
            seed: cfg.seed,
        })
        .collect()
}

fn evaluate_with<W: Walker>(
    run: &mut Run,
    cfg: &RunConfig,
    env: &DualEnv<'_>,
    walker: &W,
    queries: &[Triple],
    relations: &[RelationId],
) -> CliResult<Vec<ResultRow>> {
    let kg = env.kg();
    let known = AnswerIndex::from_splits(kg, &Split::ALL);
    let opts = RankOptions {
        filtered: cfg.eval.filtered,
        ties: cfg.eval.ties,
    };
    let task = task_label(&cfg.eval.relations);
    let (metrics, outcomes) = evaluate_link_prediction(env, walker, queries, &known, cfg.eval.beam, opts)?;
    let mut rows = metric_rows(cfg, &task, cfg.eval.beam, env.horizon(), &metrics);
    let mut ranks = String::from("source\trelation\ttarget\trank\n");
    for o in &outcomes {
        let t = o.triple;
        ranks.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            kg.entity_token(t.source),
            kg.relation_token(t.relation),
            kg.entity_token(t.target),
            o.rank.map(|r| r.to_string()).unwrap_or_else(|| "inf".into())
        ));
    }
    let p = run.path("ranks.tsv");
    std::fs::write(&p, ranks).map_err(|e| io_err(&p, e))?;
    run.record("ranks", "ranks.tsv")?;
    if let Some(path) = &cfg.eval.fact_queries {
        let &[relation] = relations else {
            return Err(CliError::Config(
                "fact prediction needs exactly one relation in eval.relations".into(),
            ));
        };
        let facts = read_fact_queries(kg, relation, path)?;
        let map = fact_prediction_map(env, walker, &facts, cfg.eval.beam, cfg.eval_seed())?;
        rows.push(ResultRow {
            dataset: cfg.dataset.clone(),
            task,
            metric: "map".into(),
            value: map,
            beam: cfg.eval.beam,
            horizon: env.horizon(),
            seed: cfg.seed,
        });
    }
    Ok(rows)
}

pub fn eval(root: &Path, cfg: &RunConfig, upstream: &Path) -> CliResult<PathBuf> {
    let up = Loaded::open(upstream)?;
    let kg = load_kg(&up)?;
    let store = load_store(&up, &kg)?;
    let clusters = load_clusters(&up, &kg, &store)?;
    let relations = relation_ids(&kg, &cfg.eval.relations)?;
    let queries = select(&kg, cfg.eval.split, &relations);
    let mut run = Run::create(root, "eval", cfg, Some(&up))?;
    let rows = match cfg.eval.walker {
        WalkerKind::Policy => {
            let (policy, extra) = load_policy(&up)?;
            let horizon = match cfg.eval.horizon {
                0 => extra["horizon"].as_u64().map(|h| h as usize).unwrap_or(cfg.train.horizon),
                h => h,
            };
            let env = DualEnv::new(&kg, &clusters, horizon);
            evaluate_with(&mut run, cfg, &env, &PolicyWalker { policy: &policy }, &queries, &relations)?
        }
        WalkerKind::Uniform => {
            let horizon = if cfg.eval.horizon == 0 { cfg.train.horizon } else { cfg.eval.horizon };
            let env = DualEnv::new(&kg, &clusters, horizon);
            evaluate_with(&mut run, cfg, &env, &UniformWalker, &queries, &relations)?
        }
    };
    write_results(&rows, &run.path("results.csv"))?;
    run.record("results", "results.csv")?;
    for r in &rows {
        println!("{}\t{}\t{:.4}", r.task, r.metric, r.value);
    }
    run.finish()
}

pub fn longpath(root: &Path, cfg: &RunConfig, upstream: &Path) -> CliResult<PathBuf> {
    let up = Loaded::open(upstream)?;
    let mut kg = load_kg(&up)?;
    let store = load_store(&up, &kg)?;
    check_dims(cfg, &store)?;
    let base_clusters = load_clusters(&up, &kg, &store)?;
    let relations = relation_ids(&kg, &cfg.train.query_relations)?;
    let queries = select(&kg, cfg.longpath.split, &relations);
    let horizons = if cfg.longpath.horizons.is_empty() {
        cfg.longpath.mode.default_horizons()
    } else {
        cfg.longpath.horizons.clone()
    };
    let mut run = Run::create(root, "longpath", cfg, Some(&up))?;
    let known = AnswerIndex::from_splits(&kg, &Split::ALL);
    let opts = RankOptions {
        filtered: cfg.eval.filtered,
        ties: cfg.eval.ties,
    };
    let report = ablate_and_run(
        &mut kg,
        cfg.longpath.mode,
        &queries,
        &cfg.longpath.search,
        &horizons,
        |g, horizon| {
            let mut clusters = base_clusters.clone();
            clusters.rebuild_graph(g);
            let tc = TrainConfig { horizon, ..cfg.train.clone() };
            let (best, _, _) = fit(g, &clusters, &store, &tc, |_| Ok(())).map_err(|e| match e {
                CliError::Core(e) => e,
                other => dualwalk::Error::InvalidArgument(other.to_string()),
            })?;
            let env = DualEnv::new(g, &clusters, horizon);
            let (m, _) = evaluate_link_prediction(
                &env,
                &PolicyWalker { policy: &best },
                &queries,
                &known,
                cfg.eval.beam,
                opts,
            )?;
            tracing::info!(horizon, hits1 = m.hits1, mrr = m.mrr, "long-path length done");
            Ok(vec![
                ("hits@1".into(), m.hits1),
                ("hits@3".into(), m.hits3),
                ("hits@10".into(), m.hits10),
                ("mrr".into(), m.mrr),
            ])
        },
    )?;
    write_length_metrics(&report, &run.path("length_metrics.csv"))?;
    run.record("length_metrics", "length_metrics.csv")?;
    let removed = report.ablation.as_ref().map(|a| a.removed.as_slice()).unwrap_or_default();
    kg.write_triples(&run.path("removed_edges.txt"), removed)?;
    run.record("removed_edges", "removed_edges.txt")?;
    if let Some(a) = &report.ablation {
        tracing::info!(removed = a.removed.len(), stranded = a.stranded_sources.len(), "ablation summary");
    }
    run.finish()
}

pub fn dump_policy(root: &Path, cfg: &RunConfig, upstream: &Path, values: bool) -> CliResult<PathBuf> {
    let up = Loaded::open(upstream)?;
    let (policy, extra) = load_policy(&up)?;
    let tensors: Vec<serde_json::Value> = policy
        .params
        .iter()
        .map(|(_, t)| {
            let l2 = t.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            let mut o = json!({ "name": t.name, "rows": t.rows, "cols": t.cols, "l2": l2 });
            if values {
                o["values"] = json!(t.data);
            }
            o
        })
        .collect();
    let summary = json!({
        "dims": policy.dims(),
        "shape": policy.shape(),
        "share_partner": policy.share_partner(),
        "parameters": policy.params.num_values(),
        "checkpoint": extra,
        "tensors": tensors,
    });
    let mut run = Run::create(root, "dump-policy", cfg, Some(&up))?;
    write_json(&run.path("policy.json"), &summary)?;
    run.record("policy_dump", "policy.json")?;
    run.finish()
}

pub fn dump_trajectories(root: &Path, cfg: &RunConfig, upstream: &Path, limit: usize, top: usize) -> CliResult<PathBuf> {
    let up = Loaded::open(upstream)?;
    let kg = load_kg(&up)?;
    let store = load_store(&up, &kg)?;
    let clusters = load_clusters(&up, &kg, &store)?;
    let (policy, extra) = load_policy(&up)?;
    let horizon = match cfg.eval.horizon {
        0 => extra["horizon"].as_u64().map(|h| h as usize).unwrap_or(cfg.train.horizon),
        h => h,
    };
    let relations = relation_ids(&kg, &cfg.eval.relations)?;
    let mut queries = select(&kg, cfg.eval.split, &relations);
    queries.truncate(limit);
    let env = DualEnv::new(&kg, &clusters, horizon);
    let walker = PolicyWalker { policy: &policy };
    let mut run = Run::create(root, "dump-trajectories", cfg, Some(&up))?;
    let p = run.path("trajectories.tsv");
    let mut out = String::from("source\trelation\tgold\tposition\tentity\tcorrect\tlog_prob\tpath\n");
    for q in &queries {
        let ranked = beam_search(&env, &walker, Query::new(q.source, q.relation), cfg.eval.beam)?;
        for (i, h) in ranked.hits.iter().take(top).enumerate() {
            let mut path = kg.entity_token(q.source).to_string();
            for &(r, e) in &h.path {
                path.push_str(&format!(" -{}-> {}", kg.relation_token(r), kg.entity_token(e)));
            }
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                kg.entity_token(q.source),
                kg.relation_token(q.relation),
                kg.entity_token(q.target),
                i + 1,
                kg.entity_token(h.entity),
                h.entity == q.target,
                h.log_prob,
                path
            ));
        }
    }
    std::fs::write(&p, out).map_err(|e| io_err(&p, e))?;
    run.record("trajectories", "trajectories.tsv")?;
    run.finish()
}

/// Tie handling used by `--ties`.
pub fn parse_ties(s: &str) -> Result<TieMode, String> {
    match s {
        "optimistic" => Ok(TieMode::Optimistic),
        "by-id" => Ok(TieMode::ById),
        "pessimistic" => Ok(TieMode::Pessimistic),
        other => Err(format!("unknown tie mode `{other}` (optimistic | by-id | pessimistic)")),
    }
}

pub fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.file_stem() == s)
        .ok_or_else(|| format!("unknown split `{s}` (train | dev | test)"))
}
