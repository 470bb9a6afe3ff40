//! Item to semantic-index mapping, the prefix trie used to mask illegal
//! tokens, the `<a_12><b_3>` surface form, and TSV persistence.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rqvae::RqVae;
use crate::usm::{resolve_conflicts, ConflictReport};
use crate::util::{sha256_hex, ArtifactMeta};

/// Levels beyond this have no letter in the surface form.
pub const MAX_TOKEN_LEVELS: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticIndex(pub Vec<u32>);

impl SemanticIndex {
    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }
}

/// `<a_c1><b_c2>...`, one bracketed token per level.
pub fn token_form(index: &SemanticIndex) -> Result<String> {
    if index.levels() > MAX_TOKEN_LEVELS {
        return Err(Error::Unsupported(format!(
            "token form supports at most {MAX_TOKEN_LEVELS} levels, index has {}",
            index.levels()
        )));
    }
    let mut s = String::with_capacity(index.levels() * 8);
    for (level, code) in index.codes().iter().enumerate() {
        write!(s, "{}", level_token(level, *code)).expect("writing to a String cannot fail");
    }
    Ok(s)
}

/// The single token for `code` at zero-based `level`, e.g. `<b_7>`.
pub fn level_token(level: usize, code: u32) -> String {
    format!("<{}_{code}>", (b'a' + level as u8) as char)
}

/// Inverse of [`token_form`]. Letters must run `a, b, c, ...` in order.
pub fn parse_token_form(s: &str) -> Result<SemanticIndex> {
    let bytes = s.as_bytes();
    let mut pos = 0;
    let mut codes = Vec::new();
    let fail = |offset: usize, message: String| Error::ParseOffset { offset, message };
    while pos < bytes.len() {
        let level = codes.len();
        if level >= MAX_TOKEN_LEVELS {
            return Err(fail(pos, format!("more than {MAX_TOKEN_LEVELS} levels")));
        }
        if bytes[pos] != b'<' {
            return Err(fail(pos, "expected `<`".into()));
        }
        let letter = (b'a' + level as u8) as char;
        if bytes.get(pos + 1) != Some(&(letter as u8)) {
            return Err(fail(pos + 1, format!("expected level letter `{letter}`")));
        }
        if bytes.get(pos + 2) != Some(&b'_') {
            return Err(fail(pos + 2, "expected `_`".into()));
        }
        let start = pos + 3;
        let mut end = start;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        if end == start {
            return Err(fail(start, "expected a code number".into()));
        }
        if end - start > 1 && bytes[start] == b'0' {
            return Err(fail(start, "code has a leading zero".into()));
        }
        let code: u32 = s[start..end]
            .parse()
            .map_err(|_| fail(start, "code does not fit in 32 bits".into()))?;
        if bytes.get(end) != Some(&b'>') {
            return Err(fail(end, "expected `>`".into()));
        }
        codes.push(code);
        pos = end + 1;
    }
    if codes.is_empty() {
        return Err(fail(0, "empty index".into()));
    }
    Ok(SemanticIndex(codes))
}

/// Conflict-free assignment of a semantic index to every item, in canonical
/// item order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    levels: usize,
    codes_per_level: usize,
    items: Vec<String>,
    indices: Vec<SemanticIndex>,
    by_item: HashMap<String, usize>,
}

impl IndexMap {
    /// Validates lengths, ranges and uniqueness of items and indices.
    pub fn new(levels: usize, codes_per_level: usize, entries: Vec<(String, SemanticIndex)>) -> Result<Self> {
        if levels == 0 || codes_per_level == 0 {
            return Err(Error::Config("index needs at least one level and one code".into()));
        }
        let mut items = Vec::with_capacity(entries.len());
        let mut indices = Vec::with_capacity(entries.len());
        let mut by_item = HashMap::with_capacity(entries.len());
        let mut by_index: HashMap<&[u32], usize> = HashMap::with_capacity(entries.len());
        for (pos, (item, index)) in entries.iter().enumerate() {
            if index.levels() != levels {
                return Err(Error::Schema(format!(
                    "item `{item}` has {} codes, expected {levels}",
                    index.levels()
                )));
            }
            if let Some(&c) = index.codes().iter().find(|&&c| c as usize >= codes_per_level) {
                return Err(Error::Range(format!(
                    "item `{item}` has code {c}, codes must be below {codes_per_level}"
                )));
            }
            if by_item.insert(item.clone(), pos).is_some() {
                return Err(Error::DuplicateId(item.clone()));
            }
            if let Some(&other) = by_index.get(index.codes()) {
                return Err(Error::IndexConflict {
                    first: entries[other].0.clone(),
                    second: item.clone(),
                    index: token_form(index).unwrap_or_else(|_| format!("{:?}", index.codes())),
                });
            }
            by_index.insert(index.codes(), pos);
        }
        for (item, index) in entries {
            items.push(item);
            indices.push(index);
        }
        Ok(Self {
            levels,
            codes_per_level,
            items,
            indices,
            by_item,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codes_per_level(&self) -> usize {
        self.codes_per_level
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SemanticIndex)> {
        self.items.iter().map(String::as_str).zip(&self.indices)
    }

    pub fn get(&self, item: &str) -> Option<&SemanticIndex> {
        self.by_item.get(item).map(|&i| &self.indices[i])
    }

    pub fn position(&self, item: &str) -> Option<usize> {
        self.by_item.get(item).copied()
    }

    pub fn index_at(&self, pos: usize) -> &SemanticIndex {
        &self.indices[pos]
    }

    /// Surface form of an item's index.
    pub fn tokens(&self, item: &str) -> Option<String> {
        self.get(item).map(|ix| token_form(ix).expect("levels checked at construction"))
    }

    pub fn trie(&self) -> IndexTrie {
        IndexTrie::build(self).expect("an IndexMap is conflict-free by construction")
    }

    /// Write `path` (TSV) and `path.meta.json`.
    pub fn save(&self, path: impl AsRef<Path>, meta: Option<ArtifactMeta>) -> Result<()> {
        let path = path.as_ref();
        let mut tsv = String::from("item_id");
        for h in 1..=self.levels {
            write!(tsv, "\tc_{h}").unwrap();
        }
        tsv.push('\n');
        for (item, index) in self.iter() {
            tsv.push_str(item);
            for c in index.codes() {
                write!(tsv, "\t{c}").unwrap();
            }
            tsv.push('\n');
        }
        let sidecar = IndexMeta {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            levels: self.levels,
            codes: self.codes_per_level,
            items: self.len(),
            checksum: sha256_hex(tsv.as_bytes()),
            meta,
        };
        fs::write(path, &tsv).map_err(|e| Error::io(path, e))?;
        let meta_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, IndexMeta)> {
        let path = path.as_ref();
        let meta_path = sidecar_path(path);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: IndexMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", meta_path.display()),
        })?;
        if meta.format != INDEX_FORMAT || meta.version != INDEX_VERSION {
            return Err(Error::Schema(format!(
                "expected {INDEX_FORMAT} v{INDEX_VERSION}, found {} v{}",
                meta.format, meta.version
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map = parse_index_tsv(&text, &meta)?;
        if sha256_hex(text.as_bytes()) != meta.checksum {
            return Err(Error::Integrity(format!(
                "{} does not match the checksum in its sidecar",
                path.display()
            )));
        }
        Ok((map, meta))
    }
}

fn parse_index_tsv(text: &str, meta: &IndexMeta) -> Result<IndexMap> {
    let levels = meta.levels;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let expected: Vec<String> = std::iter::once("item_id".to_string())
        .chain((1..=levels).map(|h| format!("c_{h}")))
        .collect();
    if !header.ends_with('\n') || header.trim_end_matches('\n').split('\t').ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must be `{}`", expected.join("\\t")),
        });
    }
    let mut entries = Vec::with_capacity(meta.items);
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        let Some(body) = raw.strip_suffix('\n') else {
            return Err(Error::Parse {
                line,
                message: "file ends mid-record".into(),
            });
        };
        let fields: Vec<&str> = body.split('\t').collect();
        if fields.len() != levels + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", levels + 1, fields.len()),
            });
        }
        let codes = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<u32>().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{f}` is not a code"),
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        if let Some(c) = codes.iter().find(|&&c| c as usize >= meta.codes) {
            return Err(Error::Range(format!(
                "line {line}: code {c} is not below {}",
                meta.codes
            )));
        }
        entries.push((fields[0].to_string(), SemanticIndex(codes)));
    }
    if entries.len() != meta.items {
        return Err(Error::Parse {
            line: entries.len() + 1,
            message: format!("file ends after {} of {} records", entries.len(), meta.items),
        });
    }
    IndexMap::new(levels, meta.codes, entries)
}

const INDEX_FORMAT: &str = "lcrec-index";
const INDEX_VERSION: u32 = 1;

/// JSON sidecar stored next to an index TSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub format: String,
    pub version: u32,
    pub levels: usize,
    pub codes: usize,
    pub items: usize,
    /// SHA-256 of the TSV bytes.
    pub checksum: String,
    #[serde(default)]
    pub meta: Option<ArtifactMeta>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    children: BTreeMap<u32, NodeId>,
    leaf: Option<usize>,
}

/// Prefix tree over all indices. Every root-to-leaf path has exactly
/// `levels` edges and each leaf holds one item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTrie {
    levels: usize,
    nodes: Vec<Node>,
    items: Vec<String>,
}

impl IndexTrie {
    pub const ROOT: NodeId = 0;

    pub fn build(map: &IndexMap) -> Result<Self> {
        Self::from_entries(map.levels(), map.iter().map(|(i, ix)| (i.to_string(), ix.clone())))
    }

    /// Build from raw entries; a repeated index is a conflict naming both items.
    pub fn from_entries(levels: usize, entries: impl IntoIterator<Item = (String, SemanticIndex)>) -> Result<Self> {
        let mut trie = Self {
            levels,
            nodes: vec![Node {
                children: BTreeMap::new(),
                leaf: None,
            }],
            items: Vec::new(),
        };
        for (item, index) in entries {
            if index.levels() != levels {
                return Err(Error::Schema(format!(
                    "item `{item}` has {} codes, expected {levels}",
                    index.levels()
                )));
            }
            let mut node = Self::ROOT;
            for &c in index.codes() {
                node = match trie.nodes[node].children.get(&c) {
                    Some(&child) => child,
                    None => {
                        trie.nodes.push(Node {
                            children: BTreeMap::new(),
                            leaf: None,
                        });
                        let child = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(c, child);
                        child
                    }
                };
            }
            if let Some(existing) = trie.nodes[node].leaf {
                return Err(Error::IndexConflict {
                    first: trie.items[existing].clone(),
                    second: item,
                    index: token_form(&index).unwrap_or_else(|_| format!("{:?}", index.codes())),
                });
            }
            trie.nodes[node].leaf = Some(trie.items.len());
            trie.items.push(item);
        }
        Ok(trie)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn child(&self, node: NodeId, code: u32) -> Option<NodeId> {
        self.nodes[node].children.get(&code).copied()
    }

    /// Codes leading out of `node`, ascending.
    pub fn children(&self, node: NodeId) -> impl Iterator<Item = (u32, NodeId)> + '_ {
        self.nodes[node].children.iter().map(|(&c, &n)| (c, n))
    }

    pub fn leaf_item(&self, node: NodeId) -> Option<&str> {
        self.nodes[node].leaf.map(|i| self.items[i].as_str())
    }

    pub fn walk(&self, prefix: &[u32]) -> Option<NodeId> {
        prefix.iter().try_fold(Self::ROOT, |node, &c| self.child(node, c))
    }

    /// Codes that extend `prefix` toward at least one item; empty when the
    /// prefix is not in the trie.
    pub fn valid_next(&self, prefix: &[u32]) -> Vec<u32> {
        match self.walk(prefix) {
            Some(node) => self.nodes[node].children.keys().copied().collect(),
            None => Vec::new(),
        }
    }

    pub fn lookup(&self, index: &[u32]) -> Option<&str> {
        if index.len() != self.levels {
            return None;
        }
        self.walk(index).and_then(|n| self.leaf_item(n))
    }

    /// Every (item, index) reachable from the root, in code order.
    pub fn enumerate(&self) -> Vec<(String, SemanticIndex)> {
        let mut out = Vec::with_capacity(self.items.len());
        let mut path = Vec::with_capacity(self.levels);
        self.collect(Self::ROOT, &mut path, &mut out);
        out
    }

    fn collect(&self, node: NodeId, path: &mut Vec<u32>, out: &mut Vec<(String, SemanticIndex)>) {
        if let Some(item) = self.leaf_item(node) {
            out.push((item.to_string(), SemanticIndex(path.clone())));
        }
        for (c, child) in self.children(node) {
            path.push(c);
            self.collect(child, path, out);
            path.pop();
        }
    }
}

/// Outcome of turning a trained model into a conflict-free index.
#[derive(Debug, Clone)]
pub struct IndexAssignment {
    pub map: IndexMap,
    pub conflicts: ConflictReport,
    /// Items whose greedy index was unique before resolution.
    pub unique_before: usize,
}

/// Greedy residual quantization of every item followed by conflict resolution
/// on the last level.
pub fn assign_indices(model: &RqVae, matrix: &EmbeddingMatrix) -> Result<IndexAssignment> {
    let q = model.quantize_all(matrix)?;
    let levels = q.levels;
    let mut codes = q.codes;
    let last = levels - 1;
    let conflicts = resolve_conflicts(
        &mut codes,
        levels,
        &q.residuals[last],
        model.codebook.level(last),
        model.codebook.dim(),
    )?;
    let entries = matrix
        .items()
        .iter()
        .enumerate()
        .map(|(i, item)| (item.clone(), SemanticIndex(codes[i * levels..(i + 1) * levels].to_vec())))
        .collect();
    let map = IndexMap::new(levels, model.codebook.codes(), entries)?;
    Ok(IndexAssignment {
        unique_before: map.len() - conflicts.colliding_items(),
        map,
        conflicts,
    })
}
