//! Corpus loading and per-source stratified splitting.
//!
//! A corpus is described by a [`CorpusManifest`]: one entry per source with
//! its log file, the name of a registered header pattern and an optional
//! label sidecar (`record_index,label` CSV). Records receive globally unique
//! ids in manifest order.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::derive_seed;

/// Binary anomaly label. `Anomaly` is the positive (minority) class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Normal),
            1 => Some(Label::Anomaly),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomaly => 1,
        }
    }

    /// Class index used by the two-way classifiers.
    pub fn index(self) -> usize {
        self.bit() as usize
    }

    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "Normal",
            Label::Anomaly => "Anomaly",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub record_id: u64,
    pub source_id: String,
    pub raw_line: String,
    /// `raw_line` minus its header; the whole line when the header did not match.
    pub message: String,
    pub gold_label: Option<Label>,
}

/// Registered header layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderPattern {
    /// `Jun 14 15:16:01 ` (BSD syslog timestamp).
    Syslog,
    /// `[Sun Dec 04 04:47:44 2005] ` (Apache error log).
    Apache,
    /// `081109 203615 148 INFO dfs.DataNode$PacketResponder: ` (HDFS, block-id logs).
    Hdfs,
    /// `2015-10-18 18:01:47,978 INFO [main] org.apache.Foo: ` (Hadoop/log4j).
    Hadoop,
    /// `2024-01-02T03:04:05.123Z ` and similar ISO-like stamps.
    GenericTimestamp,
    /// No header; the whole line is the message.
    None,
}

static SYSLOG_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Z][a-z]{2}\s+\d{1,2}\s+\d{2}:\d{2}:\d{2}\s+").unwrap());
static APACHE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\[[A-Z][a-z]{2} [A-Z][a-z]{2}\s+\d{1,2} \d{2}:\d{2}:\d{2} \d{4}\]\s+").unwrap()
});
static HDFS_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\d{6} \d{6} \d+ [A-Z]+ [\w.$]+:\s+").unwrap());
static HADOOP_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2},\d{3} [A-Z]+ \[[^\]]*\] [\w.$]+:\s+").unwrap()
});
static GENERIC_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:[.,]\d+)?(?:Z|[+-]\d{2}:?\d{2})?\s+")
        .unwrap()
});

impl HeaderPattern {
    pub const ALL: [HeaderPattern; 6] = [
        HeaderPattern::Syslog,
        HeaderPattern::Apache,
        HeaderPattern::Hdfs,
        HeaderPattern::Hadoop,
        HeaderPattern::GenericTimestamp,
        HeaderPattern::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeaderPattern::Syslog => "syslog",
            HeaderPattern::Apache => "apache",
            HeaderPattern::Hdfs => "hdfs",
            HeaderPattern::Hadoop => "hadoop",
            HeaderPattern::GenericTimestamp => "generic_timestamp",
            HeaderPattern::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Option<HeaderPattern> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Strip the header. `None` when the pattern does not match or leaves
    /// nothing behind.
    pub fn strip(self, line: &str) -> Option<&str> {
        let re = match self {
            HeaderPattern::Syslog => &*SYSLOG_RE,
            HeaderPattern::Apache => &*APACHE_RE,
            HeaderPattern::Hdfs => &*HDFS_RE,
            HeaderPattern::Hadoop => &*HADOOP_RE,
            HeaderPattern::GenericTimestamp => &*GENERIC_RE,
            HeaderPattern::None => {
                let t = line.trim();
                return (!t.is_empty()).then_some(t);
            }
        };
        let m = re.find(line)?;
        let rest = line[m.end()..].trim();
        (!rest.is_empty()).then_some(rest)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: String,
    pub path: PathBuf,
    /// Registered header pattern name, see [`HeaderPattern::name`].
    pub header: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_count: Option<usize>,
}

/// Corpus description, stored as TOML:
///
/// ```toml
/// seed = 42
///
/// [[source]]
/// id = "Apache"
/// path = "Apache.log"
/// header = "apache"
/// labels = "Apache.labels.csv"
/// expected_count = 2000
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "source", default)]
    pub sources: Vec<SourceSpec>,
}

impl CorpusManifest {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: CorpusManifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        for s in &mut m.sources {
            if s.path.is_relative() {
                s.path = base_dir.join(&s.path);
            }
            if let Some(l) = &mut s.labels {
                if l.is_relative() {
                    *l = base_dir.join(&*l);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sources {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate source id {:?}", s.id)));
            }
            if s.id.is_empty() || s.id.contains(|c: char| c == ',' || c == '\t' || c.is_whitespace())
            {
                return Err(Error::Config(format!("invalid source id {:?}", s.id)));
            }
            if HeaderPattern::from_name(&s.header).is_none() {
                return Err(Error::Config(format!(
                    "source {}: unknown header pattern {:?}",
                    s.id, s.header
                )));
            }
        }
        Ok(())
    }

    pub fn source_ids(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.id.clone()).collect()
    }
}

/// Contiguous record-id runs belonging to one source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub source_id: String,
    pub ranges: Vec<Range<u64>>,
}

/// Ordered records plus an index of which record ids belong to which source.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSet {
    pub records: Vec<LogRecord>,
    /// One entry per source, in manifest order (sources with no records
    /// included, with no ranges).
    pub source_index: Vec<SourceSpan>,
}

impl RecordSet {
    /// Build from records, computing the index. `source_order` fixes the
    /// order of index entries; sources that only appear in `records` are
    /// appended in first-seen order.
    pub fn from_records(records: Vec<LogRecord>, source_order: &[String]) -> Self {
        let mut index: Vec<SourceSpan> = source_order
            .iter()
            .map(|s| SourceSpan {
                source_id: s.clone(),
                ranges: Vec::new(),
            })
            .collect();
        for r in &records {
            let pos = match index.iter().position(|s| s.source_id == r.source_id) {
                Some(p) => p,
                None => {
                    index.push(SourceSpan {
                        source_id: r.source_id.clone(),
                        ranges: Vec::new(),
                    });
                    index.len() - 1
                }
            };
            let ranges = &mut index[pos].ranges;
            match ranges.last_mut() {
                Some(last) if last.end == r.record_id => last.end += 1,
                _ => ranges.push(r.record_id..r.record_id + 1),
            }
        }
        RecordSet {
            records,
            source_index: index,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn source_ids(&self) -> impl Iterator<Item = &str> {
        self.source_index.iter().map(|s| s.source_id.as_str())
    }

    pub fn ranges_for(&self, source_id: &str) -> Option<&[Range<u64>]> {
        self.source_index
            .iter()
            .find(|s| s.source_id == source_id)
            .map(|s| s.ranges.as_slice())
    }

    /// Source owning `record_id`, via the index.
    pub fn source_of(&self, record_id: u64) -> Option<&str> {
        self.source_index
            .iter()
            .find(|s| s.ranges.iter().any(|r| r.contains(&record_id)))
            .map(|s| s.source_id.as_str())
    }

    pub fn records_of<'a>(&'a self, source_id: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.source_id == source_id)
    }

    pub fn count_of(&self, source_id: &str) -> usize {
        self.ranges_for(source_id)
            .map(|rs| rs.iter().map(|r| (r.end - r.start) as usize).sum())
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLoadStats {
    pub source_id: String,
    pub records: usize,
    /// Lines whose header did not match; their message is the full line.
    pub header_misses: usize,
    pub labeled: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub per_source: Vec<SourceLoadStats>,
    pub warnings: Vec<String>,
}

impl LoadReport {
    pub fn header_misses(&self) -> usize {
        self.per_source.iter().map(|s| s.header_misses).sum()
    }
}

struct LoadedSource {
    lines: Vec<(String, Option<String>)>,
    labels: Vec<Option<Label>>,
    stats: SourceLoadStats,
    warnings: Vec<String>,
}

fn load_source(spec: &SourceSpec) -> Result<LoadedSource> {
    let pattern = HeaderPattern::from_name(&spec.header).ok_or_else(|| {
        Error::Config(format!("source {}: unknown header pattern {:?}", spec.id, spec.header))
    })?;
    let text = std::fs::read_to_string(&spec.path).map_err(|e| Error::io(&spec.path, e))?;
    let mut stats = SourceLoadStats {
        source_id: spec.id.clone(),
        ..Default::default()
    };
    let mut warnings = Vec::new();
    let mut lines = Vec::new();
    for raw in text.lines() {
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let message = match pattern.strip(raw) {
            Some(m) => Some(m.to_string()),
            None => {
                stats.header_misses += 1;
                None
            }
        };
        lines.push((raw.to_string(), message));
    }
    stats.records = lines.len();
    if lines.is_empty() {
        warnings.push(format!("source {}: {} contains no records", spec.id, spec.path.display()));
    }
    if stats.header_misses > 0 {
        warnings.push(format!(
            "source {}: {} line(s) did not match header pattern {}",
            spec.id,
            stats.header_misses,
            pattern.name()
        ));
    }
    if let Some(expected) = spec.expected_count {
        if expected != lines.len() {
            warnings.push(format!(
                "source {}: expected {expected} records, found {}",
                spec.id,
                lines.len()
            ));
        }
    }
    let mut labels = vec![None; lines.len()];
    if let Some(path) = &spec.labels {
        for (idx, label) in read_label_sidecar(path)? {
            match labels.get_mut(idx) {
                Some(slot) => *slot = Some(label),
                None => warnings.push(format!(
                    "source {}: label for record_index {idx} beyond {} records",
                    spec.id,
                    lines.len()
                )),
            }
        }
        stats.labeled = labels.iter().filter(|l| l.is_some()).count();
    }
    Ok(LoadedSource {
        lines,
        labels,
        stats,
        warnings,
    })
}

/// Read a `record_index,label` sidecar. A header row is accepted and skipped.
pub fn read_label_sidecar(path: &Path) -> Result<Vec<(usize, Label)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("record_index")) {
            continue;
        }
        let (idx, lab) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, n + 1, "expected record_index,label"))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::format(path, n + 1, "bad record_index"))?;
        let label = lab
            .trim()
            .parse::<u8>()
            .ok()
            .and_then(Label::from_bit)
            .ok_or_else(|| Error::format(path, n + 1, "label must be 0 or 1"))?;
        out.push((idx, label));
    }
    Ok(out)
}

pub fn write_label_sidecar(path: &Path, labels: &[Label]) -> Result<()> {
    let mut s = String::from("record_index,label\n");
    for (i, l) in labels.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", l.bit()));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Load every source of the manifest. Files are read in parallel; records
/// are numbered in manifest order so the result does not depend on
/// scheduling.
pub fn load_corpus(manifest: &CorpusManifest) -> Result<(RecordSet, LoadReport)> {
    manifest.validate()?;
    let loaded: Vec<LoadedSource> = manifest
        .sources
        .par_iter()
        .map(load_source)
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut report = LoadReport::default();
    let mut next_id = 0u64;
    for (spec, src) in manifest.sources.iter().zip(loaded) {
        for ((raw, message), label) in src.lines.into_iter().zip(src.labels) {
            let message = message.unwrap_or_else(|| raw.trim().to_string());
            records.push(LogRecord {
                record_id: next_id,
                source_id: spec.id.clone(),
                raw_line: raw,
                message,
                gold_label: label,
            });
            next_id += 1;
        }
        report.per_source.push(src.stats);
        report.warnings.extend(src.warnings);
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok((RecordSet::from_records(records, &manifest.source_ids()), report))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: RecordSet,
    pub test: RecordSet,
    pub warnings: Vec<String>,
}

/// Split counts of `groups` so the total is `round(ratio * n)` and each group
/// gets its floor share plus largest-remainder top-ups (ties to the earlier
/// group).
fn allocate_train_counts(groups: &[usize], ratio: f64) -> Vec<usize> {
    let n: usize = groups.iter().sum();
    let total = (ratio * n as f64).round() as usize;
    let quotas: Vec<f64> = groups.iter().map(|&g| ratio * g as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(counts.iter().sum());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if counts[g] < groups[g] {
            counts[g] += 1;
            remaining -= 1;
        }
    }
    counts
}

/// Stratified train/test split: within each source, records are grouped by
/// gold label (anomaly, normal, unlabeled), each group is shuffled with a
/// ChaCha8 stream seeded by `derive_seed(seed, source_id)`, and the first
/// share goes to train. Both partitions keep record-id order.
pub fn split_train_test(rs: &RecordSet, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut train_pos = Vec::new();
    let mut test_pos = Vec::new();
    let mut warnings = Vec::new();
    let order: Vec<String> = rs.source_ids().map(str::to_string).collect();

    for source in &order {
        let positions: Vec<usize> = rs
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.source_id == source)
            .map(|(i, _)| i)
            .collect();
        if positions.len() < 2 {
            if !positions.is_empty() {
                warnings.push(format!(
                    "source {source}: {} record(s), all assigned to train",
                    positions.len()
                ));
            }
            train_pos.extend(positions);
            continue;
        }
        let mut groups: [Vec<usize>; 3] = Default::default();
        for &p in &positions {
            let g = match rs.records[p].gold_label {
                Some(Label::Anomaly) => 0,
                Some(Label::Normal) => 1,
                None => 2,
            };
            groups[g].push(p);
        }
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        let counts = allocate_train_counts(&sizes, ratio);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, source));
        for (mut group, take) in groups.into_iter().zip(counts) {
            group.shuffle(&mut rng);
            train_pos.extend_from_slice(&group[..take]);
            test_pos.extend_from_slice(&group[take..]);
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    train_pos.sort_unstable();
    test_pos.sort_unstable();
    let pick = |pos: &[usize]| -> RecordSet {
        RecordSet::from_records(pos.iter().map(|&p| rs.records[p].clone()).collect(), &order)
    };
    Ok(Split {
        train: pick(&train_pos),
        test: pick(&test_pos),
        warnings,
    })
}
