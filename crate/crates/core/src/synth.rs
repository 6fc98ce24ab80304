//! Seeded synthetic multi-source corpus.
//!
//! Every source gets its own pseudo-word vocabulary, header layout and set of
//! normal templates. Anomalies are built around a shared pool of error
//! phrases, so what makes a line anomalous carries over between sources
//! while the surrounding vocabulary does not. A share of normal traffic uses
//! "confuser" templates that contain benign error words (`error counter
//! reset`), so a single error-ish token is not enough to flag a line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hashing::{derive_seed, derive_seed_indexed};
use crate::ingest::{write_label_sidecar, CorpusManifest, HeaderPattern, Label, SourceSpec};

const ERROR_PHRASES: [&str; 12] = [
    "fatal error",
    "connection refused",
    "checksum mismatch",
    "out of memory",
    "kernel panic",
    "permission denied",
    "timeout expired",
    "segmentation fault",
    "disk failure",
    "corrupted block",
    "unhandled exception",
    "stack overflow",
];

const BENIGN_PHRASES: [&str; 8] = [
    "error counter reset",
    "no failure detected",
    "retry timeout configured",
    "exception handler registered",
    "memory check passed",
    "denied list refreshed",
    "fault monitor started",
    "overflow buffer cleared",
];

const HEADERS: [HeaderPattern; 6] = [
    HeaderPattern::Syslog,
    HeaderPattern::Apache,
    HeaderPattern::Hdfs,
    HeaderPattern::Hadoop,
    HeaderPattern::GenericTimestamp,
    HeaderPattern::None,
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub sources: usize,
    pub per_source: usize,
    /// Normal lines per anomalous line (`50.0` for 50:1).
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sources: 6,
            per_source: 1000,
            imbalance: 50.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Planted anomalies per source: `round(per_source / (imbalance + 1))`,
    /// at least one.
    pub fn anomalies_per_source(&self) -> usize {
        ((self.per_source as f64 / (self.imbalance + 1.0)).round() as usize)
            .clamp(1, self.per_source.saturating_sub(1).max(1))
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Word(String),
    Phrase(&'static str),
    Num,
    Hex,
    Ip,
    Path,
}

#[derive(Clone, Debug)]
struct Grammar {
    slots: Vec<Slot>,
}

struct SourceGen {
    id: String,
    header: HeaderPattern,
    vocab: Vec<String>,
    component: String,
    normal: Vec<(Grammar, f64)>,
    anomalous: Vec<Grammar>,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const C: &[u8] = b"bcdfghklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syl = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syl {
        w.push(C[rng.random_range(0..C.len())] as char);
        w.push(V[rng.random_range(0..V.len())] as char);
    }
    if rng.random_bool(0.4) {
        w.push(C[rng.random_range(0..C.len())] as char);
    }
    w
}

fn random_slots(rng: &mut ChaCha8Rng, vocab: &[String], len: usize) -> Vec<Slot> {
    (0..len)
        .map(|_| match rng.random_range(0..10) {
            0 => Slot::Num,
            1 => [Slot::Hex, Slot::Ip, Slot::Path][rng.random_range(0..3)].clone(),
            _ => Slot::Word(vocab.choose(rng).unwrap().clone()),
        })
        .collect()
}

fn insert_phrase(rng: &mut ChaCha8Rng, mut slots: Vec<Slot>, phrase: &'static str) -> Vec<Slot> {
    let at = rng.random_range(0..=slots.len());
    slots.insert(at, Slot::Phrase(phrase));
    slots
}

impl SourceGen {
    fn new(index: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "synth-source", index as u64));
        let vocab: Vec<String> = (0..48).map(|_| pseudo_word(&mut rng)).collect();
        let component = format!("{}.{}", vocab[0], vocab[1]);
        let n_templates = 14;
        let mut normal: Vec<(Grammar, f64)> = (0..n_templates)
            .map(|rank| {
                let len = rng.random_range(4..=9);
                (
                    Grammar {
                        slots: random_slots(&mut rng, &vocab, len),
                    },
                    1.0 / (rank as f64 + 1.0),
                )
            })
            .collect();
        // Confusers: about a fifth of normal traffic.
        let mass: f64 = normal.iter().map(|(_, w)| w).sum();
        let mut benign = BENIGN_PHRASES.to_vec();
        benign.shuffle(&mut rng);
        for phrase in benign.into_iter().take(3) {
            let len = rng.random_range(2..=5);
            let base = random_slots(&mut rng, &vocab, len);
            let slots = insert_phrase(&mut rng, base, phrase);
            normal.push((Grammar { slots }, mass * 0.25 / 3.0));
        }
        let mut phrases = ERROR_PHRASES.to_vec();
        phrases.shuffle(&mut rng);
        // Anomalies read like real error lines: a component word, the shared
        // error phrase, then parameters and at most one more source word.
        let anomalous = phrases
            .into_iter()
            .take(5)
            .map(|phrase| {
                let mut slots = vec![Slot::Word(vocab.choose(&mut rng).unwrap().clone()), Slot::Phrase(phrase)];
                for _ in 0..rng.random_range(1..=2) {
                    slots.push([Slot::Num, Slot::Hex, Slot::Ip, Slot::Path][rng.random_range(0..4)].clone());
                }
                if rng.random_bool(0.5) {
                    slots.push(Slot::Word(vocab.choose(&mut rng).unwrap().clone()));
                }
                Grammar { slots }
            })
            .collect();
        SourceGen {
            id: format!("src{:02}", index + 1),
            header: HEADERS[index % HEADERS.len()],
            vocab,
            component,
            normal,
            anomalous,
        }
    }

    fn render(&self, g: &Grammar, rng: &mut ChaCha8Rng) -> String {
        let mut parts = Vec::with_capacity(g.slots.len());
        for s in &g.slots {
            parts.push(match s {
                Slot::Word(w) => w.clone(),
                Slot::Phrase(p) => p.to_string(),
                Slot::Num => rng.random_range(1..100_000u32).to_string(),
                Slot::Hex => format!("0x{:08x}", rng.random::<u32>()),
                Slot::Ip => format!(
                    "10.{}.{}.{}",
                    rng.random_range(0..256),
                    rng.random_range(0..256),
                    rng.random_range(1..255)
                ),
                Slot::Path => format!(
                    "/var/{}/{}.dat",
                    self.vocab.choose(rng).unwrap(),
                    self.vocab.choose(rng).unwrap()
                ),
            });
        }
        parts.join(" ")
    }

    fn header(&self, line_no: usize, anomalous: bool) -> String {
        let sec = line_no * 7;
        let (h, m, s) = ((sec / 3600) % 24, (sec / 60) % 60, sec % 60);
        let level = if anomalous { "WARN" } else { "INFO" };
        match self.header {
            HeaderPattern::Syslog => format!("Jun 14 {h:02}:{m:02}:{s:02} "),
            HeaderPattern::Apache => format!("[Sun Dec 04 {h:02}:{m:02}:{s:02} 2005] "),
            HeaderPattern::Hdfs => format!("081109 {h:02}{m:02}{s:02} {} {level} {}: ", 100 + line_no % 900, self.component),
            HeaderPattern::Hadoop => format!(
                "2015-10-18 {h:02}:{m:02}:{s:02},{:03} {level} [main] {}: ",
                line_no % 1000,
                self.component
            ),
            HeaderPattern::GenericTimestamp => format!("2024-01-02T{h:02}:{m:02}:{s:02}.{:03}Z ", line_no % 1000),
            HeaderPattern::None => String::new(),
        }
    }
}

/// Generated lines and gold labels of one source.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSource {
    pub id: String,
    pub header: HeaderPattern,
    pub lines: Vec<String>,
    pub labels: Vec<Label>,
}

impl SynthSource {
    pub fn anomalies(&self) -> usize {
        self.labels.iter().filter(|l| l.is_anomaly()).count()
    }
}

/// Generate the corpus in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSource>> {
    if cfg.sources < 2 {
        return Err(Error::InvalidInput("synthetic corpus needs at least 2 sources".into()));
    }
    if cfg.per_source < 2 || !(cfg.imbalance > 0.0 && cfg.imbalance.is_finite()) {
        return Err(Error::InvalidInput(
            "per_source must be >= 2 and imbalance positive".into(),
        ));
    }
    let n_anom = cfg.anomalies_per_source();
    Ok((0..cfg.sources)
        .map(|i| {
            let gen = SourceGen::new(i, cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.seed, "synth-lines", i as u64));
            let mut labels: Vec<Label> = (0..cfg.per_source)
                .map(|k| if k < n_anom { Label::Anomaly } else { Label::Normal })
                .collect();
            labels.shuffle(&mut rng);
            let total: f64 = gen.normal.iter().map(|(_, w)| w).sum();
            let lines = labels
                .iter()
                .enumerate()
                .map(|(k, l)| {
                    let g = if l.is_anomaly() {
                        gen.anomalous.choose(&mut rng).unwrap()
                    } else {
                        let mut r = rng.random_range(0.0..total);
                        let mut pick = &gen.normal[0].0;
                        for (g, w) in &gen.normal {
                            pick = g;
                            if r < *w {
                                break;
                            }
                            r -= w;
                        }
                        pick
                    };
                    let body = gen.render(g, &mut rng);
                    format!("{}{body}", gen.header(k, l.is_anomaly()))
                })
                .collect();
            SynthSource {
                id: gen.id.clone(),
                header: gen.header,
                lines,
                labels,
            }
        })
        .collect())
}

/// Write `<id>.log`, `<id>.labels.csv` and `manifest.toml` into `dir`.
/// Returns the manifest path.
pub fn write_corpus(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    let sources = generate(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut specs = Vec::new();
    for s in &sources {
        let log = dir.join(format!("{}.log", s.id));
        let mut text = String::new();
        for l in &s.lines {
            writeln!(text, "{l}").unwrap();
        }
        std::fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
        let labels = dir.join(format!("{}.labels.csv", s.id));
        write_label_sidecar(&labels, &s.labels)?;
        specs.push(SourceSpec {
            id: s.id.clone(),
            path: PathBuf::from(format!("{}.log", s.id)),
            header: s.header.name().to_string(),
            labels: Some(PathBuf::from(format!("{}.labels.csv", s.id))),
            expected_count: Some(s.lines.len()),
        });
    }
    let manifest = CorpusManifest {
        seed: derive_seed(cfg.seed, "corpus"),
        sources: specs,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_headers() {
        let cfg = SynthConfig::default();
        let c = generate(&cfg).unwrap();
        assert_eq!(c.len(), 6);
        for s in &c {
            assert_eq!(s.lines.len(), 1000);
            assert_eq!(s.anomalies(), 20);
            for l in &s.lines {
                assert!(s.header.strip(l).is_some(), "{}: {l}", s.id);
            }
        }
        let ids: std::collections::BTreeSet<_> = c.iter().map(|s| s.header).map(|h| h.name()).collect();
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = SynthConfig {
            per_source: 200,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..cfg };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn balanced_and_invalid() {
        let cfg = SynthConfig {
            sources: 2,
            per_source: 100,
            imbalance: 1.0,
            seed: 1,
        };
        assert!(generate(&cfg).unwrap().iter().all(|s| s.anomalies() == 50));
        assert!(generate(&SynthConfig { sources: 1, ..cfg }).is_err());
    }

    #[test]
    fn anomalies_share_error_vocabulary() {
        let c = generate(&SynthConfig::default()).unwrap();
        for s in &c {
            for (l, lab) in s.lines.iter().zip(&s.labels) {
                if lab.is_anomaly() {
                    assert!(ERROR_PHRASES.iter().any(|p| l.contains(p)), "{l}");
                }
            }
        }
    }
}
