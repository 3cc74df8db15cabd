//! Dataset plumbing: patch embeddings, pair protocols, and fold handling.
//!
//! A dataset is two files. The *manifest* (JSON lines) maps image ids to
//! nine facial-component embeddings; its first line is a header object
//! `{"d_in": N}` fixing the embedding width. The *protocol* (CSV) lists
//! labeled (parent, child) pairs with family ids and an optional fold
//! assignment, mirroring the published kinship verification splits: one row
//! per candidate pair, positives and negatives balanced within every
//! relationship (and within every fold once folds are assigned).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: invalid record: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: first line must be a header object like {{\"d_in\": 64}}")]
    MissingHeader { path: String },
    #[error("{path}: d_in must be at least 1")]
    BadDim { path: String },
    #[error("duplicate image id `{id}`")]
    DuplicateImage { id: String },
    #[error("image `{id}` patch `{kind}`: expected {expected} values, got {got}")]
    PatchDim { id: String, kind: &'static str, expected: usize, got: usize },
    #[error("{path}: expected protocol header `{expected}`, got `{got}`")]
    ProtocolHeader { path: String, expected: String, got: String },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path} record {row}: label must be 0 or 1, got {label}")]
    BadLabel { path: String, row: usize, label: u8 },
    #[error("{path} record {row}: fold must be 0..=5 (0 = unassigned), got {fold}")]
    BadFold { path: String, row: usize, fold: u8 },
    #[error("{path} record {row}: unknown relationship `{value}` (expected FS, FD, MS, or MD)")]
    BadRelationship { path: String, row: usize, value: String },
    #[error("pair ({parent_id}, {child_id}): image id `{missing}` is not in the manifest")]
    DanglingId { parent_id: String, child_id: String, missing: String },
    #[error("pair ({parent_id}, {child_id}): kin pairs must share a family id, got {family_parent} and {family_child}")]
    KinFamilyMismatch { parent_id: String, child_id: String, family_parent: u32, family_child: u32 },
    #[error("pair ({parent_id}, {child_id}): non-kin pairs must span two families, both are {family}")]
    NonKinSameFamily { parent_id: String, child_id: String, family: u32 },
    #[error("{relationship}: {positives} positive vs {negatives} negative pairs; the protocol must be label-balanced within each relationship")]
    UnbalancedRelationship { relationship: Relationship, positives: usize, negatives: usize },
    #[error("{relationship} fold {fold}: {positives} positive vs {negatives} negative pairs; folds must stay label-balanced")]
    UnbalancedFold { relationship: Relationship, fold: u8, positives: usize, negatives: usize },
    #[error("protocol mixes assigned and unassigned folds; assign every fold or none")]
    MixedFoldAssignment,
    #[error("unknown image id `{id}`")]
    UnknownImage { id: String },
    #[error("cannot split {relationship} into {k} folds: only {pairs} positive pairs")]
    BadFoldCount { relationship: Relationship, k: usize, pairs: usize },
    #[error("fold count must be between 1 and 255, got {0}")]
    BadK(usize),
    #[error("fold assignment has {got} entries for {expected} pairs")]
    FoldLength { expected: usize, got: usize },
    #[error("synthetic generator: {0}")]
    BadGeneratorArg(String),
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

/// The nine facial components feeding the forest, in canonical order:
/// the whole face, four local crops, and four complement crops with one
/// component masked out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchKind {
    Face,
    RightEye,
    LeftEye,
    Nose,
    Mouth,
    FaceNoRightEye,
    FaceNoLeftEye,
    FaceNoNose,
    FaceNoMouth,
}

impl PatchKind {
    pub const ALL: [PatchKind; 9] = [
        PatchKind::Face,
        PatchKind::RightEye,
        PatchKind::LeftEye,
        PatchKind::Nose,
        PatchKind::Mouth,
        PatchKind::FaceNoRightEye,
        PatchKind::FaceNoLeftEye,
        PatchKind::FaceNoNose,
        PatchKind::FaceNoMouth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatchKind::Face => "face",
            PatchKind::RightEye => "right_eye",
            PatchKind::LeftEye => "left_eye",
            PatchKind::Nose => "nose",
            PatchKind::Mouth => "mouth",
            PatchKind::FaceNoRightEye => "face_no_right_eye",
            PatchKind::FaceNoLeftEye => "face_no_left_eye",
            PatchKind::FaceNoNose => "face_no_nose",
            PatchKind::FaceNoMouth => "face_no_mouth",
        }
    }
}

impl fmt::Display for PatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One embedding vector per patch kind for a single face image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSet {
    pub face: Vec<f64>,
    pub right_eye: Vec<f64>,
    pub left_eye: Vec<f64>,
    pub nose: Vec<f64>,
    pub mouth: Vec<f64>,
    pub face_no_right_eye: Vec<f64>,
    pub face_no_left_eye: Vec<f64>,
    pub face_no_nose: Vec<f64>,
    pub face_no_mouth: Vec<f64>,
}

impl PatchSet {
    pub fn get(&self, kind: PatchKind) -> &[f64] {
        match kind {
            PatchKind::Face => &self.face,
            PatchKind::RightEye => &self.right_eye,
            PatchKind::LeftEye => &self.left_eye,
            PatchKind::Nose => &self.nose,
            PatchKind::Mouth => &self.mouth,
            PatchKind::FaceNoRightEye => &self.face_no_right_eye,
            PatchKind::FaceNoLeftEye => &self.face_no_left_eye,
            PatchKind::FaceNoNose => &self.face_no_nose,
            PatchKind::FaceNoMouth => &self.face_no_mouth,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (PatchKind, &[f64])> {
        PatchKind::ALL.iter().map(move |&k| (k, self.get(k)))
    }
}

// ---------------------------------------------------------------------------
// Pairs
// ---------------------------------------------------------------------------

/// Parent/child relationship class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relationship {
    /// Father-son.
    FS,
    /// Father-daughter.
    FD,
    /// Mother-son.
    MS,
    /// Mother-daughter.
    MD,
}

impl Relationship {
    pub const ALL: [Relationship; 4] =
        [Relationship::FS, Relationship::FD, Relationship::MS, Relationship::MD];

    pub fn code(self) -> &'static str {
        match self {
            Relationship::FS => "FS",
            Relationship::FD => "FD",
            Relationship::MS => "MS",
            Relationship::MD => "MD",
        }
    }

    /// Hyphenated form used in result tables ("F-S", ...).
    pub fn table_label(self) -> &'static str {
        match self {
            Relationship::FS => "F-S",
            Relationship::FD => "F-D",
            Relationship::MS => "M-S",
            Relationship::MD => "M-D",
        }
    }
}

impl fmt::Display for Relationship {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Relationship {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FS" => Ok(Relationship::FS),
            "FD" => Ok(Relationship::FD),
            "MS" => Ok(Relationship::MS),
            "MD" => Ok(Relationship::MD),
            _ => Err(()),
        }
    }
}

/// One labeled (parent image, child image) candidate pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub relationship: Relationship,
    /// Cross-validation fold in `1..=5`; `None` until folds are assigned.
    pub fold: Option<u8>,
    pub parent_id: String,
    pub child_id: String,
    /// True for genuine kin pairs.
    pub label: bool,
    pub family_parent: u32,
    pub family_child: u32,
}

impl PairSample {
    /// Label as the 0/1 target used by the losses.
    pub fn y(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Embedding table (manifest file)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    d_in: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    image_id: String,
    patches: PatchSet,
}

/// All image embeddings of a dataset, keyed by image id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    d_in: usize,
    images: BTreeMap<String, PatchSet>,
}

impl EmbeddingTable {
    pub fn new(d_in: usize) -> Self {
        EmbeddingTable { d_in, images: BTreeMap::new() }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PatchSet> {
        self.images.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.images.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    /// Adds an image after checking the id is fresh and every patch vector
    /// has width `d_in`.
    pub fn insert(&mut self, id: String, patches: PatchSet) -> Result<(), DataError> {
        if self.images.contains_key(&id) {
            return Err(DataError::DuplicateImage { id });
        }
        for (kind, v) in patches.iter() {
            if v.len() != self.d_in {
                return Err(DataError::PatchDim {
                    id,
                    kind: kind.name(),
                    expected: self.d_in,
                    got: v.len(),
                });
            }
        }
        self.images.insert(id, patches);
        Ok(())
    }
}

/// Reads a manifest (JSON lines: one header, then one record per image).
pub fn load_manifest(path: &Path) -> Result<EmbeddingTable, DataError> {
    let pstr = || path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: pstr(), source })?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, first) = lines.next().ok_or_else(|| DataError::MissingHeader { path: pstr() })?;
    let first = first.map_err(|source| DataError::Io { path: pstr(), source })?;
    let header: HeaderRecord = serde_json::from_str(&first)
        .map_err(|_| DataError::MissingHeader { path: pstr() })?;
    if header.d_in == 0 {
        return Err(DataError::BadDim { path: pstr() });
    }

    let mut table = EmbeddingTable::new(header.d_in);
    for (idx, line) in lines {
        let line = line.map_err(|source| DataError::Io { path: pstr(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line)
            .map_err(|source| DataError::Json { path: pstr(), line: idx + 1, source })?;
        table.insert(record.image_id, record.patches)?;
    }
    Ok(table)
}

/// Writes a manifest; images are emitted in sorted id order, so identical
/// tables produce identical bytes.
pub fn write_manifest(table: &EmbeddingTable, path: &Path) -> Result<(), DataError> {
    let pstr = || path.display().to_string();
    let file = std::fs::File::create(path).map_err(|source| DataError::Io { path: pstr(), source })?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |source| DataError::Io { path: pstr(), source };
    let header = serde_json::to_string(&HeaderRecord { d_in: table.d_in }).expect("header is serializable");
    writeln!(w, "{header}").map_err(io_err)?;
    for (id, patches) in &table.images {
        let record = ImageRecord { image_id: id.clone(), patches: patches.clone() };
        let line = serde_json::to_string(&record).expect("image record is serializable");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Protocol file (CSV)
// ---------------------------------------------------------------------------

const PROTOCOL_HEADER: [&str; 7] =
    ["relationship", "fold", "parent_id", "child_id", "label", "family_parent", "family_child"];

#[derive(Serialize, Deserialize)]
struct PairRow {
    relationship: String,
    fold: u8,
    parent_id: String,
    child_id: String,
    label: u8,
    family_parent: u32,
    family_child: u32,
}

/// Reads a protocol CSV. This validates syntax (header, label and fold
/// ranges, relationship codes); cross-file checks against the manifest
/// happen in [`DatasetManifest::assemble`].
pub fn load_protocol(path: &Path) -> Result<Vec<PairSample>, DataError> {
    let pstr = || path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| DataError::Csv { path: pstr(), source })?;

    let headers = reader.headers().map_err(|source| DataError::Csv { path: pstr(), source })?;
    let got: Vec<&str> = headers.iter().collect();
    if got != PROTOCOL_HEADER {
        return Err(DataError::ProtocolHeader {
            path: pstr(),
            expected: PROTOCOL_HEADER.join(","),
            got: got.join(","),
        });
    }

    let mut pairs = Vec::new();
    for (idx, row) in reader.deserialize::<PairRow>().enumerate() {
        let row = row.map_err(|source| DataError::Csv { path: pstr(), source })?;
        let record = idx + 1;
        let relationship = row
            .relationship
            .parse::<Relationship>()
            .map_err(|_| DataError::BadRelationship { path: pstr(), row: record, value: row.relationship.clone() })?;
        if row.label > 1 {
            return Err(DataError::BadLabel { path: pstr(), row: record, label: row.label });
        }
        if row.fold > 5 {
            return Err(DataError::BadFold { path: pstr(), row: record, fold: row.fold });
        }
        pairs.push(PairSample {
            relationship,
            fold: if row.fold == 0 { None } else { Some(row.fold) },
            parent_id: row.parent_id,
            child_id: row.child_id,
            label: row.label == 1,
            family_parent: row.family_parent,
            family_child: row.family_child,
        });
    }
    Ok(pairs)
}

/// Writes a protocol CSV in pair order with the canonical header.
pub fn write_protocol(pairs: &[PairSample], path: &Path) -> Result<(), DataError> {
    let pstr = || path.display().to_string();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|source| DataError::Csv { path: pstr(), source })?;
    w.write_record(PROTOCOL_HEADER).map_err(|source| DataError::Csv { path: pstr(), source })?;
    for p in pairs {
        let row = PairRow {
            relationship: p.relationship.code().to_string(),
            fold: p.fold.unwrap_or(0),
            parent_id: p.parent_id.clone(),
            child_id: p.child_id.clone(),
            label: u8::from(p.label),
            family_parent: p.family_parent,
            family_child: p.family_child,
        };
        w.serialize(row).map_err(|source| DataError::Csv { path: pstr(), source })?;
    }
    w.flush().map_err(|source| DataError::Io { path: pstr(), source })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset = embeddings + pairs
// ---------------------------------------------------------------------------

/// A validated dataset: embedding table plus pair protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub embeddings: EmbeddingTable,
    pub pairs: Vec<PairSample>,
}

impl DatasetManifest {
    /// Joins embeddings and pairs, enforcing the cross-file invariants:
    /// ids resolve, kin labels agree with family ids, and labels stay
    /// balanced per relationship (and per fold, once assigned).
    pub fn assemble(embeddings: EmbeddingTable, pairs: Vec<PairSample>) -> Result<Self, DataError> {
        validate_pairs(&embeddings, &pairs)?;
        Ok(DatasetManifest { embeddings, pairs })
    }

    /// Loads and validates a manifest/protocol file pair.
    pub fn load(manifest: &Path, protocol: &Path) -> Result<Self, DataError> {
        let embeddings = load_manifest(manifest)?;
        let pairs = load_protocol(protocol)?;
        Self::assemble(embeddings, pairs)
    }

    pub fn write(&self, manifest: &Path, protocol: &Path) -> Result<(), DataError> {
        write_manifest(&self.embeddings, manifest)?;
        write_protocol(&self.pairs, protocol)
    }

    pub fn d_in(&self) -> usize {
        self.embeddings.d_in()
    }

    /// True once every pair carries a fold.
    pub fn folds_assigned(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.fold.is_some())
    }

    /// Installs a fold assignment produced by [`make_folds`] and re-checks
    /// balance.
    pub fn set_folds(&mut self, folds: &[u8]) -> Result<(), DataError> {
        if folds.len() != self.pairs.len() {
            return Err(DataError::FoldLength { expected: self.pairs.len(), got: folds.len() });
        }
        let mut pairs = self.pairs.clone();
        for (p, &f) in pairs.iter_mut().zip(folds) {
            p.fold = Some(f);
        }
        validate_pairs(&self.embeddings, &pairs)?;
        self.pairs = pairs;
        Ok(())
    }

    /// Indices of pairs matching a relationship filter and fold filter, in
    /// protocol order.
    pub fn pair_indices(&self, relationship: Option<Relationship>, fold: FoldFilter) -> Vec<usize> {
        self.pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| relationship.is_none_or(|r| p.relationship == r))
            .filter(|(_, p)| match fold {
                FoldFilter::All => true,
                FoldFilter::Only(f) => p.fold == Some(f),
                FoldFilter::Except(f) => p.fold.is_some() && p.fold != Some(f),
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Relationships present in the protocol, in canonical order.
    pub fn relationships(&self) -> Vec<Relationship> {
        Relationship::ALL
            .into_iter()
            .filter(|r| self.pairs.iter().any(|p| p.relationship == *r))
            .collect()
    }
}

/// Fold selector for [`DatasetManifest::pair_indices`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldFilter {
    All,
    Only(u8),
    Except(u8),
}

fn validate_pairs(embeddings: &EmbeddingTable, pairs: &[PairSample]) -> Result<(), DataError> {
    for p in pairs {
        for id in [&p.parent_id, &p.child_id] {
            if !embeddings.contains(id) {
                return Err(DataError::DanglingId {
                    parent_id: p.parent_id.clone(),
                    child_id: p.child_id.clone(),
                    missing: id.clone(),
                });
            }
        }
        if p.label && p.family_parent != p.family_child {
            return Err(DataError::KinFamilyMismatch {
                parent_id: p.parent_id.clone(),
                child_id: p.child_id.clone(),
                family_parent: p.family_parent,
                family_child: p.family_child,
            });
        }
        if !p.label && p.family_parent == p.family_child {
            return Err(DataError::NonKinSameFamily {
                parent_id: p.parent_id.clone(),
                child_id: p.child_id.clone(),
                family: p.family_parent,
            });
        }
    }

    let assigned = pairs.iter().filter(|p| p.fold.is_some()).count();
    if assigned != 0 && assigned != pairs.len() {
        return Err(DataError::MixedFoldAssignment);
    }

    // Per-relationship label balance; per-(relationship, fold) once assigned.
    for rel in Relationship::ALL {
        let group: Vec<&PairSample> = pairs.iter().filter(|p| p.relationship == rel).collect();
        if group.is_empty() {
            continue;
        }
        let positives = group.iter().filter(|p| p.label).count();
        let negatives = group.len() - positives;
        if positives != negatives {
            return Err(DataError::UnbalancedRelationship { relationship: rel, positives, negatives });
        }
        if assigned == pairs.len() {
            for fold in 1..=5u8 {
                let pos = group.iter().filter(|p| p.fold == Some(fold) && p.label).count();
                let neg = group.iter().filter(|p| p.fold == Some(fold) && !p.label).count();
                if pos != neg {
                    return Err(DataError::UnbalancedFold {
                        relationship: rel,
                        fold,
                        positives: pos,
                        negatives: neg,
                    });
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fold assignment
// ---------------------------------------------------------------------------

/// Assigns folds `1..=k` to every pair, stratified by relationship and
/// label: within each relationship, positives are shuffled and dealt
/// round-robin across folds, then negatives likewise, so every
/// (relationship, fold) cell stays label-balanced and fold sizes differ by
/// at most one. The same `(pairs, k, seed)` always yields the same
/// assignment. Returns one fold per pair, aligned with the input order.
pub fn make_folds(pairs: &[PairSample], k: usize, seed: u64) -> Result<Vec<u8>, DataError> {
    if k == 0 || k > u8::MAX as usize {
        return Err(DataError::BadK(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0u8; pairs.len()];
    for rel in Relationship::ALL {
        let mut pos: Vec<usize> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            if p.relationship == rel {
                if p.label {
                    pos.push(i);
                } else {
                    neg.push(i);
                }
            }
        }
        if pos.is_empty() && neg.is_empty() {
            continue;
        }
        if pos.len() != neg.len() {
            return Err(DataError::UnbalancedRelationship {
                relationship: rel,
                positives: pos.len(),
                negatives: neg.len(),
            });
        }
        if k > pos.len() {
            return Err(DataError::BadFoldCount { relationship: rel, k, pairs: pos.len() });
        }
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        for (slot, &idx) in pos.iter().enumerate() {
            folds[idx] = (slot % k) as u8 + 1;
        }
        for (slot, &idx) in neg.iter().enumerate() {
            folds[idx] = (slot % k) as u8 + 1;
        }
    }
    Ok(folds)
}

// ---------------------------------------------------------------------------
// Forest inputs and batches
// ---------------------------------------------------------------------------

/// Input to one component graph: the parent's and child's embedding for a
/// single patch kind.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedGraphInput {
    pub kind: PatchKind,
    pub parent: Vec<f64>,
    pub child: Vec<f64>,
}

/// Gathers the nine paired graph inputs for one (parent, child) candidate,
/// in [`PatchKind::ALL`] order.
pub fn build_forest(
    table: &EmbeddingTable,
    parent_id: &str,
    child_id: &str,
) -> Result<Vec<PairedGraphInput>, DataError> {
    let parent = table.get(parent_id).ok_or_else(|| DataError::UnknownImage { id: parent_id.to_string() })?;
    let child = table.get(child_id).ok_or_else(|| DataError::UnknownImage { id: child_id.to_string() })?;
    Ok(PatchKind::ALL
        .iter()
        .map(|&kind| PairedGraphInput {
            kind,
            parent: parent.get(kind).to_vec(),
            child: child.get(kind).to_vec(),
        })
        .collect())
}

/// A batch of pairs laid out as matrices: for each patch kind, an
/// `[n, d_in]` matrix of parent embeddings and one of child embeddings,
/// row `i` belonging to pair `i`.
#[derive(Clone, Debug)]
pub struct ForestBatch {
    pub n: usize,
    pub parent_x: Vec<Tensor>,
    pub child_x: Vec<Tensor>,
    pub y: Vec<f64>,
    pub parent_family: Vec<u32>,
    pub child_family: Vec<u32>,
}

/// Assembles a batch from pair indices into the protocol.
pub fn build_batch(manifest: &DatasetManifest, idx: &[usize]) -> Result<ForestBatch, DataError> {
    let n = idx.len();
    let d = manifest.d_in();
    let mut parent_x = vec![vec![0.0; n * d]; PatchKind::ALL.len()];
    let mut child_x = vec![vec![0.0; n * d]; PatchKind::ALL.len()];
    let mut y = Vec::with_capacity(n);
    let mut parent_family = Vec::with_capacity(n);
    let mut child_family = Vec::with_capacity(n);

    for (row, &pi) in idx.iter().enumerate() {
        let pair = &manifest.pairs[pi];
        let parent = manifest
            .embeddings
            .get(&pair.parent_id)
            .ok_or_else(|| DataError::UnknownImage { id: pair.parent_id.clone() })?;
        let child = manifest
            .embeddings
            .get(&pair.child_id)
            .ok_or_else(|| DataError::UnknownImage { id: pair.child_id.clone() })?;
        for (ki, &kind) in PatchKind::ALL.iter().enumerate() {
            parent_x[ki][row * d..(row + 1) * d].copy_from_slice(parent.get(kind));
            child_x[ki][row * d..(row + 1) * d].copy_from_slice(child.get(kind));
        }
        y.push(pair.y());
        parent_family.push(pair.family_parent);
        child_family.push(pair.family_child);
    }

    Ok(ForestBatch {
        n,
        parent_x: parent_x.into_iter().map(|v| Tensor::matrix(n, d, v)).collect(),
        child_x: child_x.into_iter().map(|v| Tensor::matrix(n, d, v)).collect(),
        y,
        parent_family,
        child_family,
    })
}
