//! Caption embeddings: a signed feature-hashing bag-of-words encoder, a
//! lookup table for externally computed sentence vectors, and the null
//! condition used for classifier-free guidance.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEXT_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    values: Vec<f64>,
    is_null: bool,
}

impl TextEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(Self {
            values,
            is_null: false,
        })
    }

    /// The "no text" condition. Its values are zeros; the learned vector it
    /// stands for lives in the denoiser parameters.
    pub fn null(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim.max(1)],
            is_null: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }
}

pub fn null_embedding(dim: usize) -> TextEmbedding {
    TextEmbedding::null(dim)
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

const SIGN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// FNV-1a over the seed and token bytes, then a splitmix64 finalizer.
fn token_hash(token: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Lowercased alphanumeric tokens hashed into `dim` signed buckets and
/// L2-normalized.
pub fn encode_hashed_bow(text: &str, dim: usize, seed: u64) -> Result<TextEmbedding> {
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "embedding dimension must be positive".into(),
        ));
    }
    let mut acc = vec![0.0; dim];
    let mut n_tokens = 0;
    for tok in tokens(text) {
        let bucket = (token_hash(&tok, seed) % dim as u64) as usize;
        let positive = token_hash(&tok, seed ^ SIGN_SALT) & 1 == 0;
        acc[bucket] += if positive { 1.0 } else { -1.0 };
        n_tokens += 1;
    }
    if n_tokens == 0 {
        return Err(Error::Empty(format!("caption {text:?} has no tokens")));
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "caption {text:?} hashes to the zero vector"
        )));
    }
    acc.iter_mut().for_each(|v| *v /= norm);
    TextEmbedding::new(acc)
}

/// Exact-match table of precomputed sentence embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: Option<usize>,
    entries: HashMap<String, TextEmbedding>,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    text: String,
    embedding: Vec<f64>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, text: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let text = text.into();
        let emb = TextEmbedding::new(values)?;
        match self.dim {
            Some(d) if d != emb.dim() => {
                return Err(Error::Shape(format!(
                    "embedding for {text:?} has width {}, table width is {d}",
                    emb.dim()
                )))
            }
            _ => self.dim = Some(emb.dim()),
        }
        if self.entries.contains_key(&text) {
            return Err(Error::DuplicateKey(text));
        }
        self.entries.insert(text, emb);
        Ok(())
    }

    pub fn get(&self, text: &str) -> Result<&TextEmbedding> {
        self.entries
            .get(text)
            .ok_or_else(|| Error::UnknownText(text.to_string()))
    }

    /// Rows sorted by text so the written file is deterministic.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for k in keys {
            let row = TableRow {
                text: k.clone(),
                embedding: self.entries[k].values.clone(),
            };
            serde_json::to_writer(&mut out, &row).expect("finite row serializes");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_table(&src, &path.display().to_string())
}

fn parse_embedding_table(src: &str, origin: &str) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::default();
    for (n, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: TableRow = serde_json::from_str(line)
            .map_err(|e| Error::malformed(format!("{origin} line {}", n + 1), e))?;
        table.insert(row.text, row.embedding)?;
    }
    Ok(table)
}

/// Which encoder a model was trained with; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextEncoderSpec {
    HashedBow { dim: usize, seed: u64 },
    Table { dim: usize, path: PathBuf },
}

impl TextEncoderSpec {
    pub fn dim(&self) -> usize {
        match self {
            TextEncoderSpec::HashedBow { dim, .. } | TextEncoderSpec::Table { dim, .. } => *dim,
        }
    }
}

/// A ready-to-use encoder built from a [`TextEncoderSpec`].
#[derive(Debug, Clone)]
pub enum TextEncoder {
    HashedBow { dim: usize, seed: u64 },
    Table(EmbeddingTable),
}

impl TextEncoder {
    pub fn from_spec(spec: &TextEncoderSpec) -> Result<Self> {
        match spec {
            TextEncoderSpec::HashedBow { dim, seed } => Ok(TextEncoder::HashedBow {
                dim: *dim,
                seed: *seed,
            }),
            TextEncoderSpec::Table { dim, path } => {
                let table = load_embedding_table(path)?;
                match table.dim() {
                    Some(d) if d != *dim => Err(Error::Shape(format!(
                        "table {} has width {d}, expected {dim}",
                        path.display()
                    ))),
                    _ => Ok(TextEncoder::Table(table)),
                }
            }
        }
    }

    pub fn encode(&self, text: &str) -> Result<TextEmbedding> {
        match self {
            TextEncoder::HashedBow { dim, seed } => encode_hashed_bow(text, *dim, *seed),
            TextEncoder::Table(t) => t.get(text).cloned(),
        }
    }
}
