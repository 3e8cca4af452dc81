//! Triple store with vocabulary tables and an adjacency index over the
//! training split.
//!
//! Adjacency lists are sorted by `(relation, entity)`; when self-loop
//! augmentation is on, the `NO_OP` self edge is always placed first so that
//! truncating a hub's action list never drops it.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Token used for the self-loop relation.
pub const NO_OP_TOKEN: &str = "NO_OP";
/// Suffix appended to a relation token to name its inverse.
pub const INVERSE_SUFFIX: &str = "_inv";

macro_rules! dense_id {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }

            #[inline]
            pub fn from_index(i: usize) -> Self {
                Self(i as u32)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

dense_id!(EntityId);
dense_id!(RelationId);
dense_id!(ClusterId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub source: EntityId,
    pub relation: RelationId,
    pub target: EntityId,
}

impl Triple {
    pub fn new(source: EntityId, relation: RelationId, target: EntityId) -> Self {
        Self {
            source,
            relation,
            target,
        }
    }
}

/// Bijective token <-> dense id table.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id for `token`, inserting it if unseen.
    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (i as u32, t.as_str()))
    }

    /// Writes `token<TAB>id` lines.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (id, tok) in self.iter() {
            writeln!(w, "{tok}\t{id}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphOptions {
    /// Materialize `r_inv` for every relation and index `(o, r_inv, s)`.
    pub inverse_edges: bool,
    /// Give every entity a `(NO_OP, self)` edge.
    pub self_loops: bool,
    /// Cap on the number of actions returned per entity, self-loop included.
    pub max_out_degree: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            inverse_edges: true,
            self_loops: true,
            max_out_degree: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Per-split triple file locations. Dev and test may be absent.
#[derive(Debug, Clone)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl SplitPaths {
    /// `train.txt`, `dev.txt`, `test.txt` under `dir`; missing dev/test files are skipped.
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        Self {
            train: dir.join("train.txt"),
            dev: opt("dev.txt"),
            test: opt("test.txt"),
        }
    }
}

/// Reads raw `source<TAB>relation<TAB>target` lines.
pub fn read_token_triples(path: &Path) -> Result<Vec<[String; 3]>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = |reason: &str| Error::MalformedLine {
            path: path.to_owned(),
            line: i + 1,
            reason: reason.to_owned(),
        };
        if parts.len() != 3 {
            return Err(bad(&format!(
                "expected exactly two TAB separators, found {}",
                parts.len() - 1
            )));
        }
        if parts.iter().any(|p| p.is_empty()) {
            return Err(bad("empty field"));
        }
        out.push([parts[0].to_owned(), parts[1].to_owned(), parts[2].to_owned()]);
    }
    Ok(out)
}

/// Collects token triples per split and builds an indexed [`KnowledgeGraph`].
#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    splits: [Vec<[String; 3]>; 3],
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, split: Split, source: &str, relation: &str, target: &str) -> &mut Self {
        self.splits[split as usize].push([source.to_owned(), relation.to_owned(), target.to_owned()]);
        self
    }

    pub fn extend(&mut self, split: Split, triples: Vec<[String; 3]>) -> &mut Self {
        self.splits[split as usize].extend(triples);
        self
    }

    pub fn build(self, options: GraphOptions) -> Result<KnowledgeGraph> {
        KnowledgeGraph::from_token_splits(self.splits, options)
    }
}

/// Loads all splits and indexes the training split.
pub fn load_graph(paths: &SplitPaths, options: GraphOptions) -> Result<KnowledgeGraph> {
    let mut b = GraphBuilder::new();
    b.extend(Split::Train, read_token_triples(&paths.train)?);
    if let Some(p) = &paths.dev {
        b.extend(Split::Dev, read_token_triples(p)?);
    }
    if let Some(p) = &paths.test {
        b.extend(Split::Test, read_token_triples(p)?);
    }
    b.build(options)
}

pub type Edge = (RelationId, EntityId);

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    raw_relations: usize,
    splits: [Vec<Triple>; 3],
    options: GraphOptions,
    no_op: Option<RelationId>,
    /// Sorted adjacency without self-loops, as loaded.
    base: Vec<Vec<Edge>>,
    /// Current adjacency: removals applied, self-loop first when enabled.
    live: Vec<Vec<Edge>>,
    /// Hidden edges, stored in the forward (raw relation) direction.
    removed: BTreeSet<Triple>,
    missed_removals: usize,
}

impl KnowledgeGraph {
    fn from_token_splits(splits: [Vec<[String; 3]>; 3], options: GraphOptions) -> Result<Self> {
        if splits[0].is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        if options.max_out_degree == 0 {
            return Err(Error::InvalidArgument("max_out_degree must be positive".into()));
        }
        let mut entities = Vocab::new();
        let mut relations = Vocab::new();
        let mut id_splits: [Vec<Triple>; 3] = Default::default();
        for (k, split) in splits.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for [s, r, o] in split {
                let t = Triple::new(
                    EntityId(entities.intern(s)),
                    RelationId(relations.intern(r)),
                    EntityId(entities.intern(o)),
                );
                if seen.insert(t) {
                    id_splits[k].push(t);
                }
            }
        }
        let raw_relations = relations.len();
        if options.inverse_edges {
            for r in 0..raw_relations {
                let tok = format!("{}{}", relations.token(r as u32), INVERSE_SUFFIX);
                if relations.get(&tok).is_some() {
                    return Err(Error::Format(format!(
                        "relation token `{tok}` collides with a generated inverse name"
                    )));
                }
                relations.intern(&tok);
            }
        }
        let no_op = if options.self_loops {
            if relations.get(NO_OP_TOKEN).is_some() {
                return Err(Error::Format(format!("relation token `{NO_OP_TOKEN}` is reserved")));
            }
            Some(RelationId(relations.intern(NO_OP_TOKEN)))
        } else {
            None
        };

        let mut base: Vec<Vec<Edge>> = vec![Vec::new(); entities.len()];
        for t in &id_splits[0] {
            base[t.source.index()].push((t.relation, t.target));
            if options.inverse_edges {
                let inv = RelationId((t.relation.index() + raw_relations) as u32);
                base[t.target.index()].push((inv, t.source));
            }
        }
        for list in &mut base {
            list.sort_unstable();
            list.dedup();
        }
        let mut kg = Self {
            entities,
            relations,
            raw_relations,
            splits: id_splits,
            options,
            no_op,
            base,
            live: Vec::new(),
            removed: BTreeSet::new(),
            missed_removals: 0,
        };
        kg.rebuild_live();
        Ok(kg)
    }

    fn rebuild_live(&mut self) {
        self.live = self
            .base
            .iter()
            .enumerate()
            .map(|(e, list)| {
                let mut out = Vec::with_capacity(list.len() + 1);
                if let Some(no_op) = self.no_op {
                    out.push((no_op, EntityId::from_index(e)));
                }
                out.extend_from_slice(list);
                out
            })
            .collect();
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation count including inverse and `NO_OP` ids.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Relation count as found in the files.
    pub fn num_raw_relations(&self) -> usize {
        self.raw_relations
    }

    pub fn options(&self) -> &GraphOptions {
        &self.options
    }

    pub fn no_op(&self) -> Option<RelationId> {
        self.no_op
    }

    pub fn triples(&self, split: Split) -> &[Triple] {
        &self.splits[split as usize]
    }

    pub fn entity_id(&self, token: &str) -> Result<EntityId> {
        self.entities
            .get(token)
            .map(EntityId)
            .ok_or_else(|| Error::UnknownToken {
                kind: "entity",
                token: token.to_owned(),
            })
    }

    pub fn relation_id(&self, token: &str) -> Result<RelationId> {
        self.relations
            .get(token)
            .map(RelationId)
            .ok_or_else(|| Error::UnknownToken {
                kind: "relation",
                token: token.to_owned(),
            })
    }

    pub fn entity_token(&self, e: EntityId) -> &str {
        self.entities.token(e.0)
    }

    pub fn relation_token(&self, r: RelationId) -> &str {
        self.relations.token(r.0)
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        self.options.inverse_edges
            && r.index() >= self.raw_relations
            && r.index() < 2 * self.raw_relations
    }

    /// Inverse relation id. `NO_OP` is its own inverse; without inverse
    /// augmentation only `NO_OP` has one.
    pub fn inverse_relation(&self, r: RelationId) -> Option<RelationId> {
        if Some(r) == self.no_op {
            return Some(r);
        }
        if !self.options.inverse_edges {
            return None;
        }
        let i = r.index();
        let n = self.raw_relations;
        if i < n {
            Some(RelationId::from_index(i + n))
        } else if i < 2 * n {
            Some(RelationId::from_index(i - n))
        } else {
            None
        }
    }

    /// Outgoing actions of `e` over the current adjacency, truncated to
    /// `max_out_degree` entries (self-loop first when enabled).
    pub fn outgoing_actions(&self, e: EntityId) -> &[Edge] {
        let list = &self.live[e.index()];
        &list[..list.len().min(self.options.max_out_degree)]
    }

    /// Untruncated current adjacency of `e`, self-loop included.
    pub fn all_outgoing(&self, e: EntityId) -> &[Edge] {
        &self.live[e.index()]
    }

    /// Whether the non-self-loop edge `(s, r, o)` is currently indexed.
    pub fn has_edge(&self, t: Triple) -> bool {
        let list = &self.live[t.source.index()];
        let start = usize::from(self.no_op.is_some());
        list[start..].binary_search(&(t.relation, t.target)).is_ok()
    }

    /// Number of indexed edges, self-loops excluded.
    pub fn edge_count(&self) -> usize {
        let per = usize::from(self.no_op.is_some());
        self.live.iter().map(|l| l.len() - per).sum()
    }

    fn canonical(&self, t: Triple) -> Triple {
        if self.is_inverse(t.relation) {
            Triple::new(
                t.target,
                RelationId::from_index(t.relation.index() - self.raw_relations),
                t.source,
            )
        } else {
            t
        }
    }

    fn drop_from_live(&mut self, t: Triple) -> bool {
        let start = usize::from(self.no_op.is_some());
        let list = &mut self.live[t.source.index()];
        match list[start..].binary_search(&(t.relation, t.target)) {
            Ok(pos) => {
                list.remove(start + pos);
                true
            }
            Err(_) => false,
        }
    }

    /// Hides an edge (and its inverse twin) from all adjacency answers.
    ///
    /// Accepts either direction of an augmented edge. Returns `false` and
    /// bumps [`missed_removals`](Self::missed_removals) if the edge is absent.
    pub fn remove_edge(&mut self, t: Triple) -> bool {
        if Some(t.relation) == self.no_op {
            self.missed_removals += 1;
            return false;
        }
        let fwd = self.canonical(t);
        if !self.has_edge(fwd) {
            self.missed_removals += 1;
            return false;
        }
        self.drop_from_live(fwd);
        if self.options.inverse_edges {
            let inv = RelationId::from_index(fwd.relation.index() + self.raw_relations);
            self.drop_from_live(Triple::new(fwd.target, inv, fwd.source));
        }
        self.removed.insert(fwd);
        true
    }

    /// Reverts every removal.
    pub fn restore_all(&mut self) {
        self.removed.clear();
        self.rebuild_live();
    }

    pub fn removed_edges(&self) -> impl Iterator<Item = &Triple> {
        self.removed.iter()
    }

    pub fn missed_removals(&self) -> usize {
        self.missed_removals
    }

    /// Mean and median out-degree of the loaded training adjacency,
    /// self-loops excluded.
    pub fn degree_stats(&self) -> (f64, f64) {
        let mut deg: Vec<usize> = self.base.iter().map(Vec::len).collect();
        if deg.is_empty() {
            return (0.0, 0.0);
        }
        deg.sort_unstable();
        let mean = deg.iter().sum::<usize>() as f64 / deg.len() as f64;
        let n = deg.len();
        let median = if n % 2 == 1 {
            deg[n / 2] as f64
        } else {
            (deg[n / 2 - 1] + deg[n / 2]) as f64 / 2.0
        };
        (mean, median)
    }

    pub fn write_triples<'a>(
        &self,
        path: &Path,
        triples: impl IntoIterator<Item = &'a Triple>,
    ) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for t in triples {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entity_token(t.source),
                self.relation_token(t.relation),
                self.entity_token(t.target)
            )
            .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Resolves token triples against this graph's vocabularies.
    pub fn resolve(&self, tokens: &[[String; 3]]) -> Result<Vec<Triple>> {
        tokens
            .iter()
            .map(|[s, r, o]| {
                Ok(Triple::new(
                    self.entity_id(s)?,
                    self.relation_id(r)?,
                    self.entity_id(o)?,
                ))
            })
            .collect()
    }
}

/// Map from `(source, relation)` to the set of known targets.
#[derive(Debug, Clone, Default)]
pub struct AnswerIndex {
    map: HashMap<(EntityId, RelationId), BTreeSet<EntityId>>,
}

impl AnswerIndex {
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut map: HashMap<_, BTreeSet<_>> = HashMap::new();
        for t in triples {
            map.entry((t.source, t.relation)).or_default().insert(t.target);
        }
        Self { map }
    }

    /// Answers over the given splits of `kg`.
    pub fn from_splits(kg: &KnowledgeGraph, splits: &[Split]) -> Self {
        Self::from_triples(splits.iter().flat_map(|&s| kg.triples(s)))
    }

    pub fn answers(&self, source: EntityId, relation: RelationId) -> Option<&BTreeSet<EntityId>> {
        self.map.get(&(source, relation))
    }

    pub fn contains(&self, t: Triple) -> bool {
        self.map
            .get(&(t.source, t.relation))
            .is_some_and(|s| s.contains(&t.target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(options: GraphOptions) -> KnowledgeGraph {
        let mut b = GraphBuilder::new();
        b.add(Split::Train, "a", "r", "b")
            .add(Split::Train, "b", "r", "c")
            .add(Split::Train, "a", "s", "c");
        b.build(options).unwrap()
    }

    fn plain() -> GraphOptions {
        GraphOptions {
            inverse_edges: false,
            self_loops: false,
            max_out_degree: 200,
        }
    }

    fn e(kg: &KnowledgeGraph, t: &str) -> EntityId {
        kg.entity_id(t).unwrap()
    }

    fn r(kg: &KnowledgeGraph, t: &str) -> RelationId {
        kg.relation_id(t).unwrap()
    }

    #[test]
    fn load_without_augmentation() {
        let kg = tiny(plain());
        assert_eq!(kg.num_entities(), 3);
        assert_eq!(kg.num_relations(), 2);
        let a = e(&kg, "a");
        assert_eq!(
            kg.outgoing_actions(a),
            &[(r(&kg, "r"), e(&kg, "b")), (r(&kg, "s"), e(&kg, "c"))]
        );
    }

    #[test]
    fn load_with_augmentation() {
        let kg = tiny(GraphOptions::default());
        assert_eq!(kg.num_relations(), 5);
        let b = e(&kg, "b");
        let acts = kg.outgoing_actions(b);
        assert!(acts.contains(&(r(&kg, "r_inv"), e(&kg, "a"))));
        assert!(acts.contains(&(r(&kg, "r"), e(&kg, "c"))));
        assert_eq!(acts[0], (r(&kg, NO_OP_TOKEN), b));
        assert_eq!(acts.iter().filter(|(rel, _)| Some(*rel) == kg.no_op()).count(), 1);
    }

    #[test]
    fn sorted_with_self_loop_first() {
        let kg = tiny(GraphOptions {
            inverse_edges: false,
            ..Default::default()
        });
        let a = e(&kg, "a");
        assert_eq!(
            kg.outgoing_actions(a),
            &[
                (kg.no_op().unwrap(), a),
                (r(&kg, "r"), e(&kg, "b")),
                (r(&kg, "s"), e(&kg, "c"))
            ]
        );
    }

    #[test]
    fn remove_hides_inverse_twin_and_restores() {
        let mut kg = tiny(GraphOptions::default());
        let before: Vec<Vec<Edge>> = (0..3).map(|i| kg.all_outgoing(EntityId(i)).to_vec()).collect();
        let (a, b) = (e(&kg, "a"), e(&kg, "b"));
        let rr = r(&kg, "r");
        assert!(kg.remove_edge(Triple::new(a, rr, b)));
        assert!(!kg.outgoing_actions(a).contains(&(rr, b)));
        assert!(!kg.outgoing_actions(b).contains(&(r(&kg, "r_inv"), a)));
        assert!(!kg.remove_edge(Triple::new(a, rr, b)));
        assert_eq!(kg.missed_removals(), 1);
        kg.restore_all();
        let after: Vec<Vec<Edge>> = (0..3).map(|i| kg.all_outgoing(EntityId(i)).to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn removing_inverse_direction_removes_forward() {
        let mut kg = tiny(GraphOptions::default());
        let (a, b) = (e(&kg, "a"), e(&kg, "b"));
        assert!(kg.remove_edge(Triple::new(b, r(&kg, "r_inv"), a)));
        assert!(!kg.has_edge(Triple::new(a, r(&kg, "r"), b)));
        assert_eq!(kg.removed_edges().count(), 1);
    }

    #[test]
    fn inverse_is_involution() {
        let kg = tiny(GraphOptions::default());
        for i in 0..kg.num_relations() {
            let rel = RelationId::from_index(i);
            let inv = kg.inverse_relation(rel).unwrap();
            assert_eq!(kg.inverse_relation(inv), Some(rel));
        }
    }

    #[test]
    fn truncation_keeps_self_loop() {
        let mut b = GraphBuilder::new();
        for i in 0..10 {
            b.add(Split::Train, "hub", "r", &format!("n{i}"));
        }
        let kg = b
            .build(GraphOptions {
                max_out_degree: 4,
                ..Default::default()
            })
            .unwrap();
        let hub = e(&kg, "hub");
        let acts = kg.outgoing_actions(hub);
        assert_eq!(acts.len(), 4);
        assert_eq!(acts[0], (kg.no_op().unwrap(), hub));
    }

    #[test]
    fn dev_test_not_indexed_and_duplicates_dropped() {
        let mut b = GraphBuilder::new();
        b.add(Split::Train, "a", "r", "b")
            .add(Split::Train, "a", "r", "b")
            .add(Split::Test, "a", "r", "c")
            .add(Split::Dev, "c", "q", "a");
        let kg = b.build(plain()).unwrap();
        assert_eq!(kg.triples(Split::Train).len(), 1);
        assert_eq!(kg.num_entities(), 3);
        assert_eq!(kg.num_relations(), 2);
        let (a, c) = (e(&kg, "a"), e(&kg, "c"));
        assert!(!kg.has_edge(Triple::new(a, r(&kg, "r"), c)));
        assert!(kg.outgoing_actions(c).is_empty());
    }

    #[test]
    fn isolated_entity_has_only_self_loop() {
        let mut b = GraphBuilder::new();
        b.add(Split::Train, "a", "r", "b").add(Split::Test, "z", "r", "a");
        let kg = b.build(GraphOptions::default()).unwrap();
        let z = e(&kg, "z");
        assert_eq!(kg.outgoing_actions(z), &[(kg.no_op().unwrap(), z)]);
    }

    #[test]
    fn empty_train_rejected() {
        let mut b = GraphBuilder::new();
        b.add(Split::Test, "a", "r", "b");
        assert!(matches!(b.build(plain()), Err(Error::EmptyTrainSplit)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.txt");
        std::fs::write(&p, "a\tr\tb\nbad line\n").unwrap();
        match read_token_triples(&p) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
