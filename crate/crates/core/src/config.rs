//! Run configuration.
//!
//! A TOML file with top-level keys and one table per stage; every key has a
//! default, so an empty file is a valid configuration:
//!
//! ```toml
//! manifest = "corpus/manifest.toml"
//! seed = 42
//! split_ratio = 0.7
//!
//! [embedding]
//! dim = 768
//!
//! [transfer]
//! tau = 0.8
//!
//! [meta]
//! inner_steps = 5
//! episodes_per_phase = [300, 300, 400]
//! ```
//!
//! Any key can be overridden with `section.key=value` strings (see
//! [`RunConfig::apply_override`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::DEFAULT_SMOTE_K;
use crate::embedding::{DEFAULT_CHAR_NGRAM, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::feature_select::SelectConfig;
use crate::hashing::derive_seed;
use crate::label_transfer::DEFAULT_TAU;
use crate::meta_learner::MetaConfig;
use crate::neural_core::{Alpha, FocalConfig};
use crate::template_miner::TreeParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub char_ngram: usize,
    /// Optional precomputed vectors keyed by message hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: DEFAULT_DIM,
            char_ngram: DEFAULT_CHAR_NGRAM,
            external: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub tau: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { tau: DEFAULT_TAU }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub smote_k: usize,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            smote_k: DEFAULT_SMOTE_K,
        }
    }
}

/// `alpha` is `"balanced"` or a `[normal, anomaly]` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalSection {
    pub gamma: f64,
    pub alpha: AlphaSetting,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Named(AlphaName),
    Fixed([f64; 2]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaName {
    Balanced,
}

impl Default for FocalSection {
    fn default() -> Self {
        FocalSection {
            gamma: 2.0,
            alpha: AlphaSetting::Named(AlphaName::Balanced),
        }
    }
}

impl FocalSection {
    pub fn to_focal(self) -> FocalConfig {
        FocalConfig {
            gamma: self.gamma,
            alpha: match self.alpha {
                AlphaSetting::Named(AlphaName::Balanced) => Alpha::Balanced,
                AlphaSetting::Fixed(a) => Alpha::Fixed(a),
            },
        }
    }
}

/// Meta-training knobs as they appear in the config file (the focal loss
/// has its own table).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub meta_batch: usize,
    pub episodes_per_phase: [usize; 3],
    pub support_minority: usize,
    pub support_majority: usize,
    pub balanced_query_per_class: usize,
    pub query_cap: usize,
    pub hidden: Vec<usize>,
}

impl Default for MetaSection {
    fn default() -> Self {
        let m = MetaConfig::default();
        MetaSection {
            inner_steps: m.inner_steps,
            inner_lr: m.inner_lr,
            outer_lr: m.outer_lr,
            meta_batch: m.meta_batch,
            episodes_per_phase: m.episodes_per_phase,
            support_minority: m.support_minority,
            support_majority: m.support_majority,
            balanced_query_per_class: m.balanced_query_per_class,
            query_cap: m.query_cap,
            hidden: m.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    pub seed: u64,
    pub split_ratio: f64,
    pub embedding: EmbeddingConfig,
    pub miner: TreeParams,
    pub transfer: TransferConfig,
    pub select: SelectConfig,
    pub balance: BalanceConfig,
    pub focal: FocalSection,
    pub meta: MetaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("manifest.toml"),
            seed: 42,
            split_ratio: 0.7,
            embedding: EmbeddingConfig::default(),
            miner: TreeParams::default(),
            transfer: TransferConfig::default(),
            select: SelectConfig::default(),
            balance: BalanceConfig::default(),
            focal: FocalSection::default(),
            meta: MetaSection::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Parse as a TOML value when possible, otherwise take the text verbatim.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides::<&str>(text, &[])
    }

    /// Parse, apply `section.key=value` overrides, then validate.
    pub fn from_toml_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            Self::apply_override(&mut table, o.as_ref())?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a file; a relative `manifest` (and external embedding path)
    /// is resolved against the file's directory.
    pub fn load<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_with_overrides(&text, overrides)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.manifest.is_relative() {
            self.manifest = base.join(&self.manifest);
        }
        if let Some(e) = &mut self.embedding.external {
            if e.is_relative() {
                *e = base.join(&*e);
            }
        }
    }

    /// Set `key` (dotted for sections, e.g. `meta.inner_steps`) to `value`.
    pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, sections) = parts.split_last().expect("split yields one part");
        let mut t = table;
        for s in sections {
            t = t
                .entry(s.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key}: {s} is not a table")))?;
        }
        t.insert(last.to_string(), parse_override_value(value.trim()));
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} not in (0, 1)", self.split_ratio));
        }
        if self.embedding.dim == 0 || self.embedding.char_ngram == 0 {
            return bad("embedding.dim and embedding.char_ngram must be positive".into());
        }
        if !(self.transfer.tau > 0.0 && self.transfer.tau <= 1.0) {
            return bad(format!("transfer.tau {} not in (0, 1]", self.transfer.tau));
        }
        if self.select.k == 0 || self.select.bins < 2 || self.select.trees == 0 {
            return bad("select: k, trees must be positive and bins >= 2".into());
        }
        if self.balance.smote_k == 0 {
            return bad("balance.smote_k must be positive".into());
        }
        if !(self.focal.gamma >= 0.0) {
            return bad("focal.gamma must be >= 0".into());
        }
        if let AlphaSetting::Fixed(a) = self.focal.alpha {
            if a.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                return bad("focal.alpha values must be in (0, 1]".into());
            }
        }
        if !(0.0..=1.0).contains(&self.miner.sim_threshold) || self.miner.depth < 3 {
            return bad("miner: depth >= 3 and sim_threshold in [0, 1]".into());
        }
        self.meta_config().validate()
    }

    pub fn meta_config(&self) -> MetaConfig {
        let m = &self.meta;
        MetaConfig {
            inner_steps: m.inner_steps,
            inner_lr: m.inner_lr,
            outer_lr: m.outer_lr,
            meta_batch: m.meta_batch,
            episodes_per_phase: m.episodes_per_phase,
            support_minority: m.support_minority,
            support_majority: m.support_majority,
            balanced_query_per_class: m.balanced_query_per_class,
            query_cap: m.query_cap,
            hidden: m.hidden.clone(),
            focal: self.focal.to_focal(),
        }
    }

    /// Canonical TOML rendering (fixed field order, resolved defaults).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.canonical().as_bytes());
        h.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-stage seed: `splitmix64(seed ^ fnv1a64(stage))`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.embedding.dim, 768);
        assert_eq!(c.select.k, 200);
        assert_eq!(c.transfer.tau, 0.8);
        assert_eq!(c.balance.smote_k, 5);
        assert_eq!(c.split_ratio, 0.7);
        let m = c.meta_config();
        assert_eq!((m.inner_steps, m.meta_batch), (5, 4));
        assert_eq!(m.focal, FocalConfig::default());
    }

    #[test]
    fn round_trips_through_canonical_form() {
        let c = RunConfig::from_toml_with_overrides("seed = 7", &["focal.alpha=[0.25, 0.75]"]).unwrap();
        assert_eq!(c.focal.alpha, AlphaSetting::Fixed([0.25, 0.75]));
        let back = RunConfig::from_toml_str(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn overrides_and_digest() {
        let a = RunConfig::from_toml_str("[meta]\ninner_steps = 3").unwrap();
        let b = RunConfig::from_toml_with_overrides("", &["meta.inner_steps=3"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), RunConfig::default().digest());
        let c = RunConfig::from_toml_with_overrides("", &["manifest=corpus/m.toml"]).unwrap();
        assert_eq!(c.manifest, PathBuf::from("corpus/m.toml"));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("split_ratio = 1.5").is_err());
        assert!(RunConfig::from_toml_str("[transfer]\ntau = 0").is_err());
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[meta]\nmeta_batch = 0").is_err());
        assert!(RunConfig::from_toml_with_overrides("", &["nokey"]).is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let c = RunConfig::default();
        assert_ne!(c.stage_seed("split"), c.stage_seed("meta"));
        assert_eq!(c.stage_seed("split"), derive_seed(42, "split"));
    }
}
