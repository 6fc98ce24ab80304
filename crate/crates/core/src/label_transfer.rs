//! Label transfer from labeled templates to unlabeled ones.
//!
//! Every candidate template is scored against each knowledge-base entry as
//! `0.5 * max(cos, 0) + 0.5 * (1 - token_edit_distance / max_len)`. The best
//! entry's label is taken when its score reaches `tau`; otherwise the
//! template is `Drifted`, which downstream means "Normal, with a drift flag".

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, SemanticEmbedder};
use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::template_miner::{LogTemplate, Token};

pub const DEFAULT_TAU: f64 = 0.8;
pub const SEMANTIC_WEIGHT: f64 = 0.5;
pub const FUZZY_WEIGHT: f64 = 0.5;

/// Text fed to the embedder for a template: its literal tokens.
pub fn semantic_text(tokens: &[Token]) -> String {
    tokens
        .iter()
        .filter(|t| !t.is_wildcard)
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub template_id: u64,
    pub tokens: Vec<Token>,
    pub rendered: String,
    pub semantic: Vec<f64>,
    pub label: Label,
    pub origin_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub dim: usize,
    pub entries: Vec<KbEntry>,
    /// Distinct rendered templates that appear with both labels.
    pub conflicts: usize,
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One entry per labeled template, semantic vectors precomputed.
pub fn build_knowledge_base(
    labeled: &[(LogTemplate, Label)],
    embedder: &dyn SemanticEmbedder,
) -> Result<KnowledgeBase> {
    if labeled.is_empty() {
        return Err(Error::InvalidInput(
            "knowledge base needs at least one labeled template".into(),
        ));
    }
    let entries: Vec<KbEntry> = labeled
        .iter()
        .map(|(t, label)| {
            let semantic = embedder.embed(&semantic_text(&t.tokens));
            if semantic.len() != embedder.dim() || semantic.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "semantic vector of template {}",
                    t.template_id
                )));
            }
            Ok(KbEntry {
                template_id: t.template_id,
                tokens: t.tokens.clone(),
                rendered: t.render(),
                semantic,
                label: *label,
                origin_source: t.source_ids_seen.iter().next().cloned().unwrap_or_default(),
            })
        })
        .collect::<Result<_>>()?;

    let mut seen: BTreeMap<&str, [bool; 2]> = BTreeMap::new();
    for e in &entries {
        seen.entry(&e.rendered).or_default()[e.label.index()] = true;
    }
    let conflicts = seen.values().filter(|v| v[0] && v[1]).count();
    if conflicts > 0 {
        log::warn!("knowledge base: {conflicts} template(s) carry conflicting labels");
    }
    Ok(KnowledgeBase {
        dim: embedder.dim(),
        entries,
        conflicts,
    })
}

/// Token-level Levenshtein distance; a wildcard equals any token.
pub fn token_edit_distance(a: &[Token], b: &[Token]) -> usize {
    let eq = |x: &Token, y: &Token| x.is_wildcard || y.is_wildcard || x.text == y.text;
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(!eq(x, y));
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - distance / max(len)`; 1 for two empty sequences.
pub fn fuzzy_similarity(a: &[Token], b: &[Token]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - token_edit_distance(a, b) as f64 / longest as f64
}

/// Combine a cosine and a fuzzy similarity into a score in [0, 1].
pub fn combine_scores(cos: f64, fuzzy: f64) -> f64 {
    (SEMANTIC_WEIGHT * cos.clamp(0.0, 1.0) + FUZZY_WEIGHT * fuzzy.clamp(0.0, 1.0)).clamp(0.0, 1.0)
}

fn score_prepared(tokens: &[Token], rendered: &str, semantic: &[f64], entry: &KbEntry) -> f64 {
    if rendered == entry.rendered {
        return 1.0;
    }
    let cos = if semantic.iter().all(|&v| v == 0.0) || entry.semantic.iter().all(|&v| v == 0.0) {
        0.0
    } else {
        cosine(semantic, &entry.semantic)
    };
    combine_scores(cos, fuzzy_similarity(tokens, &entry.tokens))
}

pub fn match_score(candidate: &LogTemplate, entry: &KbEntry, embedder: &dyn SemanticEmbedder) -> f64 {
    let semantic = embedder.embed(&semantic_text(&candidate.tokens));
    if semantic.iter().all(|&v| v == 0.0) {
        log::warn!(
            "template {} has a zero semantic vector; cosine term is 0",
            candidate.template_id
        );
    }
    score_prepared(&candidate.tokens, &candidate.render(), &semantic, entry)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferLabel {
    Normal,
    Anomaly,
    Drifted,
}

impl TransferLabel {
    pub fn name(self) -> &'static str {
        match self {
            TransferLabel::Normal => "Normal",
            TransferLabel::Anomaly => "Anomaly",
            TransferLabel::Drifted => "Drifted",
        }
    }
}

impl From<Label> for TransferLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Normal => TransferLabel::Normal,
            Label::Anomaly => TransferLabel::Anomaly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub template_id: u64,
    pub assigned_label: TransferLabel,
    pub score: f64,
    pub best_match: Option<u64>,
}

impl TransferResult {
    pub fn drift_flag(&self) -> bool {
        self.assigned_label == TransferLabel::Drifted
    }

    /// Label and drift flag inherited by the template's records.
    pub fn record_label(&self) -> (Label, bool) {
        match self.assigned_label {
            TransferLabel::Anomaly => (Label::Anomaly, false),
            TransferLabel::Normal => (Label::Normal, false),
            TransferLabel::Drifted => (Label::Normal, true),
        }
    }
}

/// Score every candidate against the whole knowledge base. The best entry
/// wins by score, then by exact rendered-text equality, then by lower
/// template id.
pub fn transfer_labels(
    candidates: &[LogTemplate],
    kb: &KnowledgeBase,
    tau: f64,
    embedder: &dyn SemanticEmbedder,
) -> Result<Vec<TransferResult>> {
    if kb.entries.is_empty() {
        return Err(Error::InvalidInput("empty knowledge base".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidInput(format!("tau {tau} not in (0, 1]")));
    }
    Ok(candidates
        .par_iter()
        .map(|c| {
            let rendered = c.render();
            let semantic = embedder.embed(&semantic_text(&c.tokens));
            let mut best: Option<(&KbEntry, f64, bool)> = None;
            for e in &kb.entries {
                let s = score_prepared(&c.tokens, &rendered, &semantic, e);
                let exact = e.rendered == rendered;
                let better = match best {
                    None => true,
                    Some((b, bs, bexact)) => {
                        s > bs
                            || (s == bs
                                && ((exact && !bexact)
                                    || (exact == bexact && e.template_id < b.template_id)))
                    }
                };
                if better {
                    best = Some((e, s, exact));
                }
            }
            let (entry, score, _) = best.expect("non-empty knowledge base");
            let assigned_label = if score >= tau {
                entry.label.into()
            } else {
                TransferLabel::Drifted
            };
            TransferResult {
                template_id: c.template_id,
                assigned_label,
                score,
                best_match: Some(entry.template_id),
            }
        })
        .collect())
}

/// Transfer report CSV: `template_id,assigned_label,score,best_match_id,drift_flag`.
pub fn write_transfer_report<W: Write>(mut w: W, results: &[TransferResult]) -> std::io::Result<()> {
    writeln!(w, "template_id,assigned_label,score,best_match_id,drift_flag")?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.template_id,
            r.assigned_label.name(),
            r.score,
            r.best_match.map(|b| b.to_string()).unwrap_or_default(),
            u8::from(r.drift_flag())
        )?;
    }
    Ok(())
}

pub fn read_transfer_report(text: &str) -> Result<Vec<TransferResult>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let bad = || Error::InvalidInput(format!("transfer report line {}: malformed", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let assigned_label = match f[1] {
            "Normal" => TransferLabel::Normal,
            "Anomaly" => TransferLabel::Anomaly,
            "Drifted" => TransferLabel::Drifted,
            _ => return Err(bad()),
        };
        out.push(TransferResult {
            template_id: f[0].parse().map_err(|_| bad())?,
            assigned_label,
            score: f[2].parse().map_err(|_| bad())?,
            best_match: if f[3].is_empty() {
                None
            } else {
                Some(f[3].parse().map_err(|_| bad())?)
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Embedder with fixed vectors for known texts.
    struct TableEmbedder(Vec<(&'static str, Vec<f64>)>);

    impl SemanticEmbedder for TableEmbedder {
        fn dim(&self) -> usize {
            self.0[0].1.len()
        }
        fn embed(&self, text: &str) -> Vec<f64> {
            self.0
                .iter()
                .find(|(t, _)| *t == text)
                .map(|(_, v)| v.clone())
                .unwrap_or_else(|| vec![0.0; self.dim()])
        }
    }

    fn template(id: u64, text: &str) -> LogTemplate {
        let tokens: Vec<Token> = text
            .split(' ')
            .map(|w| if w == "<*>" { Token::wildcard() } else { Token::literal(w) })
            .collect();
        LogTemplate {
            template_id: id,
            token_count: tokens.len(),
            tokens,
            occurrences: 1,
            source_ids_seen: BTreeSet::from(["S".to_string()]),
        }
    }

    #[test]
    fn edit_distance_with_wildcards() {
        let a = template(0, "a b c").tokens;
        assert_eq!(token_edit_distance(&a, &template(1, "a b d").tokens), 1);
        assert_eq!(token_edit_distance(&a, &template(1, "a <*> c").tokens), 0);
        assert_eq!(token_edit_distance(&a, &template(1, "x y").tokens), 3);
        assert_eq!(token_edit_distance(&[], &a), 3);
    }

    #[test]
    fn worked_score_example() {
        // cosine 0.9 between the two semantic vectors
        let emb = TableEmbedder(vec![
            ("a b c", vec![1.0, 0.0]),
            ("a b d", vec![0.9, (1.0f64 - 0.81).sqrt()]),
        ]);
        let kb = build_knowledge_base(&[(template(7, "a b c"), Label::Anomaly)], &emb).unwrap();
        let s = match_score(&template(1, "a b d"), &kb.entries[0], &emb);
        let expected = 0.5 * 0.9 + 0.5 * (1.0 - 1.0 / 3.0);
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.7833).abs() < 1e-4);
    }

    #[test]
    fn identity_and_zero_scores() {
        let emb = TableEmbedder(vec![("a b", vec![1.0, 0.0]), ("x y z", vec![0.0, 1.0])]);
        let kb = build_knowledge_base(&[(template(1, "a b"), Label::Normal)], &emb).unwrap();
        assert_eq!(match_score(&template(2, "a b"), &kb.entries[0], &emb), 1.0);
        let kb2 = build_knowledge_base(&[(template(1, "x y z"), Label::Normal)], &emb).unwrap();
        // orthogonal, and every token differs over max length 3
        assert_eq!(match_score(&template(2, "p q r"), &kb2.entries[0], &TableEmbedder(vec![
            ("p q r", vec![1.0, 0.0]),
            ("x y z", vec![0.0, 1.0]),
        ])), 0.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let emb = TableEmbedder(vec![("a", vec![1.0])]);
        assert!(build_knowledge_base(&[], &emb).is_err());
        let kb = KnowledgeBase {
            dim: 1,
            entries: vec![],
            conflicts: 0,
        };
        assert!(transfer_labels(&[template(0, "a")], &kb, 0.8, &emb).is_err());
    }

    #[test]
    fn conflicting_duplicates_are_kept() {
        let emb = TableEmbedder(vec![("a b", vec![1.0])]);
        let kb = build_knowledge_base(
            &[
                (template(3, "a b"), Label::Normal),
                (template(2, "a b"), Label::Anomaly),
            ],
            &emb,
        )
        .unwrap();
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.conflicts, 1);
        let r = transfer_labels(&[template(9, "a b")], &kb, 0.8, &emb).unwrap();
        assert_eq!(r[0].best_match, Some(2));
        assert_eq!(r[0].assigned_label, TransferLabel::Anomaly);
    }

    #[test]
    fn threshold_semantics() {
        let emb = TableEmbedder(vec![
            ("a b c", vec![1.0, 0.0]),
            ("a b d", vec![0.9, (1.0f64 - 0.81).sqrt()]),
        ]);
        let kb = build_knowledge_base(&[(template(7, "a b c"), Label::Anomaly)], &emb).unwrap();
        let cands = [template(1, "a b c"), template(2, "a b d")];
        let r = transfer_labels(&cands, &kb, 0.8, &emb).unwrap();
        assert_eq!(r[0].assigned_label, TransferLabel::Anomaly);
        assert_eq!(r[0].score, 1.0);
        assert_eq!(r[1].assigned_label, TransferLabel::Drifted);
        assert_eq!(r[1].record_label(), (Label::Normal, true));
        let r = transfer_labels(&cands, &kb, 0.75, &emb).unwrap();
        assert_eq!(r[1].assigned_label, TransferLabel::Anomaly);
    }

    #[test]
    fn report_round_trip() {
        let rs = vec![
            TransferResult {
                template_id: 4,
                assigned_label: TransferLabel::Drifted,
                score: 0.25,
                best_match: Some(8),
            },
            TransferResult {
                template_id: 5,
                assigned_label: TransferLabel::Anomaly,
                score: 1.0,
                best_match: None,
            },
        ];
        let mut buf = Vec::new();
        write_transfer_report(&mut buf, &rs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("template_id,assigned_label,score,best_match_id,drift_flag\n"));
        assert!(text.contains("4,Drifted,0.25,8,1"));
        assert_eq!(read_transfer_report(&text).unwrap(), rs);
    }
}
