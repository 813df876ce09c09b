//! File entries, layer operations, content digests, and union-filesystem
//! materialization with whiteout (delete) semantics.
//!
//! A [`Layer`] is an ordered list of add/delete operations over abstract file
//! entries. Layers are content-addressed: the digest is the SHA-256 of a
//! canonical, line-oriented encoding of the operations, so two layers with
//! equal operations are interchangeable everywhere (storage, transfer, dedup).

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, LayerError>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayerError {
    #[error("invalid path `{path}`: {reason}")]
    InvalidPath { path: String, reason: &'static str },
    #[error("invalid content id `{content_id}`: {reason}")]
    InvalidContentId {
        content_id: String,
        reason: &'static str,
    },
    #[error("invalid layer: duplicate path `{path}`")]
    InvalidLayer { path: String },
    #[error("malformed canonical record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

/// Checks the path rules shared by adds and deletes: absolute, slash
/// separated, no empty segments, no trailing slash. Whitespace and control
/// characters are rejected so the canonical single-line encoding stays
/// unambiguous.
pub fn validate_path(path: &str) -> Result<()> {
    let err = |reason| {
        Err(LayerError::InvalidPath {
            path: path.to_string(),
            reason,
        })
    };
    if path.is_empty() {
        return err("empty");
    }
    if !path.starts_with('/') {
        return err("must start with `/`");
    }
    if path.ends_with('/') {
        return err("trailing `/`");
    }
    if path.contains("//") {
        return err("empty segment (`//`)");
    }
    if path.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return err("whitespace or control character");
    }
    Ok(())
}

fn validate_content_id(content_id: &str) -> Result<()> {
    let err = |reason| {
        Err(LayerError::InvalidContentId {
            content_id: content_id.to_string(),
            reason,
        })
    };
    if content_id.is_empty() {
        return err("empty");
    }
    if content_id
        .chars()
        .any(|c| c.is_whitespace() || c.is_control())
    {
        return err("whitespace or control character");
    }
    Ok(())
}

/// A single file in a layer or filesystem view. Content is abstract: only the
/// size and an opaque content identifier are tracked, never real bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEntry {
    pub path: String,
    pub size: u64,
    pub content_id: String,
}

impl FileEntry {
    pub fn new(
        path: impl Into<String>,
        size: u64,
        content_id: impl Into<String>,
    ) -> Result<FileEntry> {
        let entry = FileEntry {
            path: path.into(),
            size,
            content_id: content_id.into(),
        };
        entry.validate()?;
        Ok(entry)
    }

    fn validate(&self) -> Result<()> {
        validate_path(&self.path)?;
        validate_content_id(&self.content_id)
    }
}

/// One operation in a layer. An overwrite is an `Add` at an existing path; a
/// `Delete` is a whiteout hiding the path from lower layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerOp {
    Add(FileEntry),
    Delete(String),
}

impl LayerOp {
    pub fn path(&self) -> &str {
        match self {
            LayerOp::Add(entry) => &entry.path,
            LayerOp::Delete(path) => path,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LayerOp::Add(entry) => entry.validate(),
            LayerOp::Delete(path) => validate_path(path),
        }
    }
}

/// Canonical byte encoding of an op list: one newline-terminated record per
/// op, in op order. `A <path> <size> <content_id>` for adds, `D <path>` for
/// deletes. Injective over valid op lists; the digest is computed over it.
pub fn canonicalize(ops: &[LayerOp]) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    let mut out = String::new();
    for op in ops {
        op.validate()?;
        if !seen.insert(op.path()) {
            return Err(LayerError::InvalidLayer {
                path: op.path().to_string(),
            });
        }
        match op {
            LayerOp::Add(entry) => {
                out.push_str("A ");
                out.push_str(&entry.path);
                out.push(' ');
                out.push_str(&entry.size.to_string());
                out.push(' ');
                out.push_str(&entry.content_id);
                out.push('\n');
            }
            LayerOp::Delete(path) => {
                out.push_str("D ");
                out.push_str(path);
                out.push('\n');
            }
        }
    }
    Ok(out.into_bytes())
}

/// Parses bytes produced by [`canonicalize`] back into the op list. Strict:
/// accepts only the exact canonical form, so `canonicalize(parse(b)) == b`.
pub fn parse_canonical(bytes: &[u8]) -> Result<Vec<LayerOp>> {
    let malformed = |line: usize, reason: &str| LayerError::MalformedRecord {
        line,
        reason: reason.to_string(),
    };
    let text = std::str::from_utf8(bytes).map_err(|_| malformed(0, "not valid UTF-8"))?;
    let mut ops = Vec::new();
    for (idx, record) in text.split('\n').enumerate() {
        let line = idx + 1;
        if record.is_empty() {
            continue; // trailing newline
        }
        let fields: Vec<&str> = record.split(' ').collect();
        match fields.as_slice() {
            ["A", path, size, content_id] => {
                if size.is_empty() || !size.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(malformed(line, "size is not a decimal integer"));
                }
                if size.len() > 1 && size.starts_with('0') {
                    return Err(malformed(line, "size has a leading zero"));
                }
                let size: u64 = size
                    .parse()
                    .map_err(|_| malformed(line, "size out of range"))?;
                ops.push(LayerOp::Add(FileEntry::new(*path, size, *content_id)?));
            }
            ["D", path] => {
                validate_path(path)?;
                ops.push(LayerOp::Delete(path.to_string()));
            }
            _ => return Err(malformed(line, "unrecognized record")),
        }
    }
    Ok(ops)
}

/// Lowercase hex SHA-256 of the given bytes, prefixed `sha256:`.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let raw = hasher.finalize();
    let mut out = String::with_capacity(7 + raw.len() * 2);
    out.push_str("sha256:");
    for byte in raw {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// An ordered list of layer operations with its derived digest and size.
/// Immutable after construction, so the digest always matches the ops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    ops: Vec<LayerOp>,
    digest: String,
    uncompressed_size: u64,
}

impl Layer {
    /// Builds a layer from ops, rejecting duplicate paths within the list.
    pub fn new(ops: Vec<LayerOp>) -> Result<Layer> {
        let canonical = canonicalize(&ops)?;
        let digest = digest_bytes(&canonical);
        let uncompressed_size = ops
            .iter()
            .map(|op| match op {
                LayerOp::Add(entry) => entry.size,
                LayerOp::Delete(_) => 0,
            })
            .sum();
        Ok(Layer {
            ops,
            digest,
            uncompressed_size,
        })
    }

    pub fn empty() -> Layer {
        Layer::new(Vec::new()).expect("empty op list is valid")
    }

    pub fn ops(&self) -> &[LayerOp] {
        &self.ops
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Sum of the sizes of all `Add` ops; deletes contribute nothing.
    pub fn uncompressed_size(&self) -> u64 {
        self.uncompressed_size
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonicalize(&self.ops).expect("ops were validated at construction")
    }
}

/// The union of a layer stack: a map from path to the visible file entry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileSystemView {
    entries: BTreeMap<String, FileEntry>,
}

impl FileSystemView {
    pub fn new() -> FileSystemView {
        FileSystemView::default()
    }

    pub fn get(&self, path: &str) -> Option<&FileEntry> {
        self.entries.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &FileEntry> {
        self.entries.values()
    }

    /// Total size of all visible entries.
    pub fn total_size(&self) -> u64 {
        self.entries.values().map(|e| e.size).sum()
    }
}

/// Applies one layer on top of a view: adds insert or replace, deletes remove
/// (a delete of an absent path is a no-op). The input view is not mutated.
pub fn apply(view: &FileSystemView, layer: &Layer) -> FileSystemView {
    let mut next = view.clone();
    for op in layer.ops() {
        match op {
            LayerOp::Add(entry) => {
                next.entries.insert(entry.path.clone(), entry.clone());
            }
            LayerOp::Delete(path) => {
                next.entries.remove(path);
            }
        }
    }
    next
}

/// Folds [`apply`] over the layers in order, starting from the empty view.
pub fn materialize(layers: &[Layer]) -> FileSystemView {
    let mut view = FileSystemView::new();
    for layer in layers {
        view = apply(&view, layer);
    }
    view
}

/// Minimal op list turning `before` into `after`: a delete for every path
/// that disappears, an add for every new or changed entry. Deletes are
/// emitted first, then adds, each group ordered by path; no path appears
/// twice.
pub fn diff(before: &FileSystemView, after: &FileSystemView) -> Vec<LayerOp> {
    let mut ops = Vec::new();
    for path in before.entries.keys() {
        if !after.entries.contains_key(path) {
            ops.push(LayerOp::Delete(path.clone()));
        }
    }
    for (path, entry) in &after.entries {
        if before.entries.get(path) != Some(entry) {
            ops.push(LayerOp::Add(entry.clone()));
        }
    }
    ops
}
