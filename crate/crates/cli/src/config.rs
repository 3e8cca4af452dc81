//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by `--set key=value` pairs and dedicated flags.

use std::path::{Path, PathBuf};

use dualwalk::cluster::KMeansConfig;
use dualwalk::embed::TransEConfig;
use dualwalk::eval::TieMode;
use dualwalk::kg::{GraphOptions, Split};
use dualwalk::longpath::{LongPathMode, ShortPathConfig};
use dualwalk::trainer::{derive_seed, DatasetPreset, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WalkerKind {
    #[default]
    Policy,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam: usize,
    pub split: Split,
    pub filtered: bool,
    pub ties: TieMode,
    pub walker: WalkerKind,
    /// Restrict to these relation tokens (empty = all).
    pub relations: Vec<String>,
    /// Walk length; 0 reuses the trained one.
    pub horizon: usize,
    /// Labelled candidates for fact-prediction MAP, scored on `relations[0]`.
    pub fact_queries: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: 50,
            split: Split::Test,
            filtered: true,
            ties: TieMode::default(),
            walker: WalkerKind::default(),
            relations: Vec::new(),
            horizon: 0,
            fact_queries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongPathSection {
    pub mode: LongPathMode,
    /// Empty = the mode's default sweep.
    pub horizons: Vec<usize>,
    pub search: ShortPathConfig,
    /// Task triples come from this split.
    pub split: Split,
}

impl Default for LongPathSection {
    fn default() -> Self {
        Self {
            mode: LongPathMode::Ablate,
            horizons: Vec::new(),
            search: ShortPathConfig::default(),
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed; every stage seed is derived from it.
    pub seed: u64,
    /// Label for result rows.
    pub dataset: String,
    /// Selects the per-dataset training defaults when no `[train]` value
    /// overrides them.
    pub preset: DatasetPreset,
    pub graph: GraphOptions,
    pub transe: TransEConfig,
    pub kmeans: KMeansConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub longpath: LongPathSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: "dataset".into(),
            preset: DatasetPreset::Fb15k237,
            graph: GraphOptions::default(),
            transe: TransEConfig::default(),
            kmeans: KMeansConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            longpath: LongPathSection::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_set(root: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("`--set {assignment}`: expected key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("`--set {assignment}`: empty key segment")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

/// Preset-dependent training defaults live under `[train]`; a missing
/// `preset` key keeps the FB15K-237 values.
fn preset_defaults(preset: DatasetPreset) -> toml::Table {
    let mut cfg = RunConfig {
        preset,
        train: TrainConfig::preset(preset),
        ..RunConfig::default()
    };
    cfg.train.seed = 0;
    toml::Table::try_from(&cfg).expect("config serializes to a table")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Derived seeds keep 63 bits so they stay valid TOML integers.
fn stage_seed(base: u64, stage: u64) -> u64 {
    derive_seed(base, &[stage]) >> 1
}

impl RunConfig {
    /// Defaults, then `file`, then `sets`, in increasing precedence.
    pub fn load(file: Option<&Path>, sets: &[String]) -> CliResult<Self> {
        let mut layer = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            apply_set(&mut layer, s)?;
        }
        let preset = match layer.get("preset") {
            Some(v) => v
                .clone()
                .try_into::<DatasetPreset>()
                .map_err(|e| CliError::Config(format!("preset: {e}")))?,
            None => DatasetPreset::Fb15k237,
        };
        let mut table = preset_defaults(preset);
        merge(&mut table, layer);
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Overwrites every stage seed with one derived from the base seed.
    pub fn derive_seeds(&mut self) {
        self.transe.seed = stage_seed(self.seed, 1);
        self.kmeans.seed = stage_seed(self.seed, 2);
        self.train.seed = stage_seed(self.seed, 3);
        self.longpath.search.seed = stage_seed(self.seed, 4);
    }

    pub fn eval_seed(&self) -> u64 {
        stage_seed(self.seed, 5)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
