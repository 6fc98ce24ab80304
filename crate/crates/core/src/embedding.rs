//! Semantic vectors and full feature-vector assembly.
//!
//! The built-in embedder hashes word unigrams and character n-grams into
//! `dim` signed buckets with tf-idf weights and L2-normalizes the result.
//! Precomputed vectors (for example from a transformer) can be supplied
//! through [`ExternalEmbedder`], keyed by [`message_hash`].

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{message_hash, seeded_hash};
use crate::ingest::{Label, LogRecord};
use crate::template_miner::STRUCTURAL_DIM;

pub const DEFAULT_DIM: usize = 768;
pub const DEFAULT_CHAR_NGRAM: usize = 3;

/// Anything that maps text to a fixed-size vector.
pub trait SemanticEmbedder: Sync {
    fn dim(&self) -> usize;
    /// Unit-norm vector, or all zeros when the text carries no features.
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Lowercased alphabetic word tokens; tokens containing digits are
/// parameters and carry no meaning.
fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !w.chars().any(|c| c.is_ascii_digit()))
        .map(|w| w.to_lowercase())
}

/// Feature keys of a text: `w:<word>` per word and `c:<gram>` per character
/// n-gram of the `^word$`-padded word.
fn feature_keys(text: &str, ngram: usize) -> Vec<String> {
    let mut keys = Vec::new();
    for w in words(text) {
        let padded: Vec<char> = format!("^{w}$").chars().collect();
        keys.push(format!("w:{w}"));
        if ngram > 0 && padded.len() >= ngram {
            for win in padded.windows(ngram) {
                keys.push(format!("c:{}", win.iter().collect::<String>()));
            }
        }
    }
    keys
}

/// Fitted state of the hashed tf-idf embedder. Immutable after fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderState {
    pub dim: usize,
    pub idf: HashMap<String, f64>,
    pub hash_seed: u64,
    pub char_ngram: usize,
    pub documents: usize,
}

impl EmbedderState {
    /// `idf = ln((1 + N) / (1 + df)) + 1` over the feature keys of each
    /// message.
    pub fn fit<'a, I>(messages: I, dim: usize, char_ngram: usize, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dim must be >= 1".into()));
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n = 0usize;
        for m in messages {
            n += 1;
            let mut keys = feature_keys(m, char_ngram);
            keys.sort_unstable();
            keys.dedup();
            for k in keys {
                *df.entry(k).or_default() += 1;
            }
        }
        if n == 0 {
            return Err(Error::InvalidInput("cannot fit embedder on an empty corpus".into()));
        }
        let idf = df
            .into_iter()
            .map(|(k, d)| (k, idf_value(n, d)))
            .collect();
        Ok(EmbedderState {
            dim,
            idf,
            hash_seed: seed,
            char_ngram,
            documents: n,
        })
    }

    fn idf_of(&self, key: &str) -> f64 {
        self.idf
            .get(key)
            .copied()
            .unwrap_or_else(|| idf_value(self.documents, 0))
    }
}

pub fn idf_value(documents: usize, df: usize) -> f64 {
    ((1.0 + documents as f64) / (1.0 + df as f64)).ln() + 1.0
}

/// Fit on every message of a record collection.
pub fn fit_embedder<'a>(
    records: impl IntoIterator<Item = &'a LogRecord>,
    dim: usize,
    seed: u64,
) -> Result<EmbedderState> {
    EmbedderState::fit(
        records.into_iter().map(|r| r.message.as_str()),
        dim,
        DEFAULT_CHAR_NGRAM,
        seed,
    )
}

impl SemanticEmbedder for EmbedderState {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut tf: HashMap<String, usize> = HashMap::new();
        for k in feature_keys(text, self.char_ngram) {
            *tf.entry(k).or_default() += 1;
        }
        // Sorted accumulation keeps the float sums order-independent of the
        // hash map.
        let mut keys: Vec<(&String, &usize)> = tf.iter().collect();
        keys.sort_unstable();
        let mut v = vec![0.0; self.dim];
        for (k, &count) in keys {
            let h = seeded_hash(self.hash_seed, k.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[idx] += sign * count as f64 * self.idf_of(k);
        }
        normalize(&mut v);
        v
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Cosine similarity; 0 when either vector has zero norm, exactly 1 for
/// identical non-zero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Read an external embedding file: a `dim=<d>` header, then rows of
/// `<hex16 message hash>,<d comma-separated decimals>`. Malformed rows are
/// skipped and counted.
pub fn load_external_embeddings(
    path: &Path,
    expected_dim: usize,
) -> Result<(HashMap<u64, Vec<f64>>, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_external_embeddings(std::io::BufReader::new(file), path, expected_dim)
}

pub fn read_external_embeddings<R: BufRead>(
    r: R,
    path: &Path,
    expected_dim: usize,
) -> Result<(HashMap<u64, Vec<f64>>, usize)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::format(path, 1, "missing dim=<d> header"))?;
    let dim: usize = header
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::format(path, 1, "header must be dim=<d>"))?;
    if dim != expected_dim {
        return Err(Error::DimensionMismatch {
            expected: expected_dim,
            found: dim,
        });
    }
    let mut map = HashMap::new();
    let mut skipped = 0;
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = (|| {
            let mut parts = line.split(',');
            let key = parts.next()?.trim();
            if key.len() != 16 {
                return None;
            }
            let key = u64::from_str_radix(key, 16).ok()?;
            let vals: Vec<f64> = parts
                .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<_>>()?;
            (vals.len() == dim).then_some((key, vals))
        })();
        match parsed {
            Some((k, v)) => {
                map.insert(k, v);
            }
            None => {
                skipped += 1;
                log::warn!("{}:{}: malformed embedding row skipped", path.display(), n + 2);
            }
        }
    }
    Ok((map, skipped))
}

pub fn write_external_embeddings<W: Write>(
    mut w: W,
    dim: usize,
    rows: &[(u64, Vec<f64>)],
) -> std::io::Result<()> {
    writeln!(w, "dim={dim}")?;
    for (k, v) in rows {
        write!(w, "{k:016x}")?;
        for x in v {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Externally supplied vectors with the built-in embedder as fallback.
/// Vectors are used as given (not renormalized).
#[derive(Debug)]
pub struct ExternalEmbedder {
    table: HashMap<u64, Vec<f64>>,
    fallback: EmbedderState,
    fallbacks: AtomicUsize,
}

impl ExternalEmbedder {
    pub fn new(table: HashMap<u64, Vec<f64>>, fallback: EmbedderState) -> Result<Self> {
        if let Some(v) = table.values().find(|v| v.len() != fallback.dim) {
            return Err(Error::DimensionMismatch {
                expected: fallback.dim,
                found: v.len(),
            });
        }
        Ok(ExternalEmbedder {
            table,
            fallback,
            fallbacks: AtomicUsize::new(0),
        })
    }

    /// Lookups that missed the table and used the built-in embedder.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    pub fn fallback(&self) -> &EmbedderState {
        &self.fallback
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl SemanticEmbedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.fallback.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        match self.table.get(&message_hash(text)) {
            Some(v) => v.clone(),
            None => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                self.fallback.embed(text)
            }
        }
    }
}

/// Semantic block followed by the structural block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub record_id: u64,
    pub source_id: String,
    pub label: Label,
    pub drift_flag: bool,
    /// The semantic block is all zeros because the message had no features.
    pub empty_semantic: bool,
}

impl FeatureVector {
    pub fn semantic(&self) -> &[f64] {
        &self.values[..self.values.len() - STRUCTURAL_DIM]
    }

    pub fn structural(&self) -> &[f64] {
        &self.values[self.values.len() - STRUCTURAL_DIM..]
    }
}

/// Concatenate the blocks. Fails on a wrong semantic width or any
/// non-finite entry.
pub fn assemble(
    record: &LogRecord,
    semantic: &[f64],
    structural: &[f64],
    dim: usize,
    label: Label,
    drift_flag: bool,
) -> Result<FeatureVector> {
    if semantic.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: semantic.len(),
        });
    }
    if structural.len() != STRUCTURAL_DIM {
        return Err(Error::DimensionMismatch {
            expected: STRUCTURAL_DIM,
            found: structural.len(),
        });
    }
    if let Some(i) = semantic
        .iter()
        .chain(structural)
        .position(|v| !v.is_finite())
    {
        return Err(Error::NonFinite(format!(
            "feature {i} of record {}",
            record.record_id
        )));
    }
    let mut values = Vec::with_capacity(dim + STRUCTURAL_DIM);
    values.extend_from_slice(semantic);
    values.extend_from_slice(structural);
    Ok(FeatureVector {
        values,
        record_id: record.record_id,
        source_id: record.source_id.clone(),
        label,
        drift_flag,
        empty_semantic: semantic.iter().all(|&v| v == 0.0),
    })
}

/// Feature matrix CSV: `record_id,source_id,label,drift_flag,f0,...`.
pub fn write_feature_matrix<W: Write>(mut w: W, rows: &[FeatureVector]) -> std::io::Result<()> {
    let width = rows.first().map(|r| r.values.len()).unwrap_or(0);
    write!(w, "record_id,source_id,label,drift_flag")?;
    for i in 0..width {
        write!(w, ",f{i}")?;
    }
    writeln!(w)?;
    for r in rows {
        write!(
            w,
            "{},{},{},{}",
            r.record_id,
            r.source_id,
            r.label.bit(),
            u8::from(r.drift_flag)
        )?;
        for v in &r.values {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_feature_matrix<R: BufRead>(r: R, path: &Path) -> Result<Vec<FeatureVector>> {
    let mut out = Vec::new();
    let mut width = None;
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if !line.starts_with("record_id,") {
                return Err(Error::format(path, 1, "missing feature matrix header"));
            }
            width = Some(line.split(',').count() - 4);
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, n + 1, format!("bad {what}"));
        let mut parts = line.split(',');
        let record_id = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad("record_id"))?;
        let source_id = parts.next().ok_or_else(|| bad("source_id"))?.to_string();
        let label = parts
            .next()
            .and_then(|p| p.parse::<u8>().ok())
            .and_then(Label::from_bit)
            .ok_or_else(|| bad("label"))?;
        let drift_flag = match parts.next() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(bad("drift_flag")),
        };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("value"))?;
        if Some(values.len()) != width {
            return Err(bad("row width"));
        }
        let empty_semantic = values
            .len()
            .checked_sub(STRUCTURAL_DIM)
            .map(|d| values[..d].iter().all(|&v| v == 0.0))
            .unwrap_or(false);
        out.push(FeatureVector {
            values,
            record_id,
            source_id,
            label,
            drift_flag,
            empty_semantic,
        });
    }
    Ok(out)
}
