//! Item embeddings: JSON Lines ingestion, mean pooling, and a deterministic
//! n-gram hashing fallback for corpora without precomputed vectors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{splitmix64, stable_hash};

/// One line of an embeddings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbedding {
    pub item_id: String,
    pub vector: Vec<f64>,
}

/// Row-major `|items| x dim` matrix. Row order is the canonical item order
/// for every downstream stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    items: Vec<String>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<ItemEmbedding>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.vector.len());
        let mut seen = HashMap::with_capacity(rows.len());
        let mut items = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.into_iter().enumerate() {
            if row.vector.len() != dim {
                return Err(Error::Schema(format!(
                    "row {} (`{}`) has {} components, expected {dim}",
                    i + 1,
                    row.item_id,
                    row.vector.len()
                )));
            }
            if row.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!(
                    "row {} (`{}`) has a non-finite component",
                    i + 1,
                    row.item_id
                )));
            }
            if seen.insert(row.item_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(row.item_id));
            }
            items.push(row.item_id);
            data.extend_from_slice(&row.vector);
        }
        Ok(Self { items, dim, data })
    }

    /// Build from a flat buffer; `data.len()` must equal `items.len() * dim`.
    pub fn from_flat(items: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != items.len() * dim {
            return Err(Error::Schema(format!(
                "flat buffer of {} values does not fit {} x {dim}",
                data.len(),
                items.len()
            )));
        }
        let rows = items
            .into_iter()
            .enumerate()
            .map(|(i, item_id)| ItemEmbedding {
                item_id,
                vector: data[i * dim..(i + 1) * dim].to_vec(),
            })
            .collect();
        Self::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), self.row(i)))
    }

    /// Zero mean and unit variance per dimension over the corpus.
    /// Constant dimensions are centred but left unscaled.
    pub fn standardize(&mut self) {
        let n = self.len();
        if n == 0 {
            return;
        }
        for j in 0..self.dim {
            let mean = (0..n).map(|i| self.data[i * self.dim + j]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (self.data[i * self.dim + j] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for i in 0..n {
                let x = &mut self.data[i * self.dim + j];
                *x = (*x - mean) * scale;
            }
        }
    }
}

pub fn read_embeddings(reader: impl BufRead) -> Result<EmbeddingMatrix> {
    let mut rows = Vec::new();
    let mut dim: Option<usize> = None;
    let mut seen = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemEmbedding = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        match dim {
            None => dim = Some(rec.vector.len()),
            Some(d) if d != rec.vector.len() => {
                return Err(Error::Schema(format!(
                    "line {lineno}: vector has {} components, expected {d}",
                    rec.vector.len()
                )))
            }
            _ => {}
        }
        if seen.insert(rec.item_id.clone(), lineno).is_some() {
            return Err(Error::DuplicateId(rec.item_id));
        }
        rows.push(rec);
    }
    EmbeddingMatrix::from_rows(rows)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file))
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, mut writer: impl Write) -> std::io::Result<()> {
    for (id, row) in matrix.rows() {
        let rec = ItemEmbedding {
            item_id: id.to_string(),
            vector: row.to_vec(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(matrix, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Componentwise arithmetic mean of token vectors.
pub fn mean_pool(token_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = token_vectors
        .first()
        .ok_or_else(|| Error::Domain("mean_pool of an empty list".into()))?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for v in token_vectors {
        if v.len() != dim {
            return Err(Error::Schema(format!(
                "mean_pool: vector of length {} among vectors of length {dim}",
                v.len()
            )));
        }
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    let n = token_vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

const NGRAM: usize = 3;
const PROJECTIONS: u64 = 2;

/// Signed feature hashing of character trigrams and whitespace words,
/// centred to zero mean. Empty text maps to the zero vector.
pub fn hash_embed(text: &str, d_emb: usize, seed: u64) -> Vec<f64> {
    assert!(d_emb >= 1, "hash_embed: d_emb must be positive");
    let mut out = vec![0.0; d_emb];
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut add = |gram: &str, salt: u64| {
        let h = stable_hash(gram.as_bytes(), seed ^ salt);
        for j in 0..PROJECTIONS {
            let hj = splitmix64(h.wrapping_add(j));
            let idx = (hj % d_emb as u64) as usize;
            out[idx] += if hj >> 63 == 1 { 1.0 } else { -1.0 };
        }
    };
    if !chars.is_empty() {
        if chars.len() < NGRAM {
            add(&lower, 0);
        } else {
            let mut buf = String::new();
            for w in chars.windows(NGRAM) {
                buf.clear();
                buf.extend(w);
                add(&buf, 0);
            }
        }
        for word in lower.split_whitespace() {
            add(word, 1);
        }
    }
    let mean = out.iter().sum::<f64>() / d_emb as f64;
    out.iter_mut().for_each(|x| *x -= mean);
    out
}
