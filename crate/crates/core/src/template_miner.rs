//! Drain-style template mining.
//!
//! Each source gets its own fixed-depth prefix tree. The first level is keyed
//! by token count, the next `depth` levels by the leading tokens (masked
//! tokens and overflow go to a `<*>` child), and leaves hold candidate
//! templates. A message joins the most similar leaf template when the
//! similarity reaches `sim_threshold`; differing positions become wildcards.
//!
//! ```text
//!                 root
//!                   |
//!                  "4"            token count
//!                   |
//!             "Connection"        leading tokens
//!                   |
//!                 "from"
//!                   |
//!                 "<*>"
//!                   |
//!    [Connection from <*> closed]  leaf templates
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::fnv1a64;
use crate::ingest::LogRecord;

pub const WILDCARD: &str = "<*>";
pub const STRUCTURAL_DIM: usize = 80;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub is_wildcard: bool,
}

impl Token {
    pub fn literal(text: impl Into<String>) -> Self {
        Token {
            text: text.into(),
            is_wildcard: false,
        }
    }

    pub fn wildcard() -> Self {
        Token {
            text: WILDCARD.to_string(),
            is_wildcard: true,
        }
    }

    fn from_rendered(s: &str) -> Self {
        if s == WILDCARD {
            Token::wildcard()
        } else {
            Token::literal(s)
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn is_hex_like(tok: &str) -> bool {
    let body = tok
        .strip_prefix("0x")
        .or_else(|| tok.strip_prefix("0X"));
    match body {
        Some(b) => !b.is_empty() && b.chars().all(|c| c.is_ascii_hexdigit()),
        // Plain words such as "added" or "deadline"-prefixes are hex-only by
        // accident; without a prefix require hash-like length.
        None => tok.len() >= 8 && tok.chars().all(|c| c.is_ascii_hexdigit()),
    }
}

fn is_path_like(tok: &str) -> bool {
    tok.starts_with('/')
        || tok.starts_with("~/")
        || tok.contains("://")
        || tok.contains(":\\")
        || tok.matches('/').count() >= 2
}

/// Parameter heuristic: digits, hex strings, IPs and paths are variables.
pub fn is_parameter(tok: &str) -> bool {
    tok.bytes().any(|b| b.is_ascii_digit()) || is_hex_like(tok) || is_path_like(tok)
}

/// Whitespace tokenization with parameter pre-masking. A message with no
/// tokens yields a single wildcard.
pub fn tokenize(message: &str) -> Vec<Token> {
    let toks: Vec<Token> = message
        .split_whitespace()
        .map(|t| {
            if is_parameter(t) {
                Token::wildcard()
            } else {
                Token::literal(t)
            }
        })
        .collect();
    if toks.is_empty() {
        vec![Token::wildcard()]
    } else {
        toks
    }
}

fn raw_tokens(message: &str) -> Vec<&str> {
    let v: Vec<&str> = message.split_whitespace().collect();
    if v.is_empty() {
        vec![""]
    } else {
        v
    }
}

/// Fraction of positions where the tokens are equal or either is a wildcard.
///
/// # Panics
/// When the lengths differ.
pub fn sequence_similarity(a: &[Token], b: &[Token]) -> f64 {
    assert_eq!(a.len(), b.len(), "sequence_similarity needs equal lengths");
    if a.is_empty() {
        return 1.0;
    }
    let matches = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_wildcard || y.is_wildcard || x.text == y.text)
        .count();
    matches as f64 / a.len() as f64
}

pub fn render(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogTemplate {
    pub template_id: u64,
    pub tokens: Vec<Token>,
    pub token_count: usize,
    pub occurrences: u64,
    pub source_ids_seen: BTreeSet<String>,
}

impl LogTemplate {
    pub fn render(&self) -> String {
        render(&self.tokens)
    }

    pub fn wildcard_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_wildcard).count()
    }

    fn merge(&mut self, tokens: &[Token]) {
        for (t, m) in self.tokens.iter_mut().zip(tokens) {
            if !t.is_wildcard && (m.is_wildcard || t.text != m.text) {
                *t = Token::wildcard();
            }
        }
        self.occurrences += 1;
    }
}

/// Pack a source ordinal and a per-tree id into a global template id.
pub fn pack_template_id(source_ordinal: u32, local_id: u32) -> u64 {
    (u64::from(source_ordinal) << 32) | u64::from(local_id)
}

pub fn unpack_template_id(id: u64) -> (u32, u32) {
    ((id >> 32) as u32, id as u32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub depth: usize,
    pub sim_threshold: f64,
    pub max_children: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            depth: 4,
            sim_threshold: 0.4,
            max_children: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Node {
    children: BTreeMap<String, usize>,
    wildcard: Option<usize>,
    templates: Vec<u32>,
}

/// Outcome of parsing one message.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseOutcome {
    pub template_id: u64,
    /// Message tokens at the template's wildcard positions.
    pub parameter_values: Vec<String>,
    /// Best leaf similarity, `None` when the leaf was empty.
    pub similarity: Option<f64>,
    pub created: bool,
    /// The message had no tokens.
    pub empty_message: bool,
}

/// One source's prefix tree.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseTree {
    pub source_id: String,
    pub ordinal: u32,
    pub params: TreeParams,
    nodes: Vec<Node>,
    by_length: BTreeMap<usize, usize>,
    templates: Vec<LogTemplate>,
    template_leaf: Vec<usize>,
    parsed: u64,
}

impl ParseTree {
    pub fn new(source_id: impl Into<String>, ordinal: u32, params: TreeParams) -> Result<Self> {
        if params.depth < 1 {
            return Err(Error::InvalidInput("tree depth must be >= 1".into()));
        }
        if !(params.sim_threshold > 0.0 && params.sim_threshold < 1.0) {
            return Err(Error::InvalidInput(format!(
                "sim_threshold {} not in (0, 1)",
                params.sim_threshold
            )));
        }
        if params.max_children < 1 {
            return Err(Error::InvalidInput("max_children must be >= 1".into()));
        }
        Ok(ParseTree {
            source_id: source_id.into(),
            ordinal,
            params,
            nodes: vec![Node::default()],
            by_length: BTreeMap::new(),
            templates: Vec::new(),
            template_leaf: Vec::new(),
            parsed: 0,
        })
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    pub fn template(&self, template_id: u64) -> Option<&LogTemplate> {
        let (ord, local) = unpack_template_id(template_id);
        (ord == self.ordinal)
            .then(|| self.templates.get(local as usize))
            .flatten()
    }

    /// Messages parsed in training mode.
    pub fn parsed_count(&self) -> u64 {
        self.parsed
    }

    /// Number of templates sharing the leaf of `template_id`.
    pub fn leaf_size(&self, template_id: u64) -> usize {
        let (_, local) = unpack_template_id(template_id);
        self.template_leaf
            .get(local as usize)
            .map(|&leaf| self.nodes[leaf].templates.len())
            .unwrap_or(0)
    }

    /// Longest root-to-leaf path, counting the token-count level.
    pub fn max_path_len(&self) -> usize {
        fn walk(nodes: &[Node], n: usize) -> usize {
            let node = &nodes[n];
            node.children
                .values()
                .copied()
                .chain(node.wildcard)
                .map(|c| 1 + walk(nodes, c))
                .max()
                .unwrap_or(0)
        }
        self.by_length
            .values()
            .map(|&n| 1 + walk(&self.nodes, n))
            .max()
            .unwrap_or(0)
    }

    fn new_node(&mut self) -> usize {
        self.nodes.push(Node::default());
        self.nodes.len() - 1
    }

    fn descend_mut(&mut self, tokens: &[Token]) -> usize {
        let len_node = match self.by_length.get(&tokens.len()) {
            Some(&n) => n,
            None => {
                let n = self.new_node();
                self.by_length.insert(tokens.len(), n);
                n
            }
        };
        let mut cur = len_node;
        for tok in tokens.iter().take(self.params.depth) {
            let named = if tok.is_wildcard {
                None
            } else {
                self.nodes[cur].children.get(&tok.text).copied()
            };
            cur = match named {
                Some(c) => c,
                None if !tok.is_wildcard
                    && self.nodes[cur].children.len() < self.params.max_children =>
                {
                    let c = self.new_node();
                    self.nodes[cur].children.insert(tok.text.clone(), c);
                    c
                }
                None => match self.nodes[cur].wildcard {
                    Some(c) => c,
                    None => {
                        let c = self.new_node();
                        self.nodes[cur].wildcard = Some(c);
                        c
                    }
                },
            };
        }
        cur
    }

    fn descend(&self, tokens: &[Token]) -> Option<usize> {
        let mut cur = *self.by_length.get(&tokens.len())?;
        for tok in tokens.iter().take(self.params.depth) {
            let named = if tok.is_wildcard {
                None
            } else {
                self.nodes[cur].children.get(&tok.text).copied()
            };
            cur = named.or(self.nodes[cur].wildcard)?;
        }
        Some(cur)
    }

    /// Best template in a leaf: highest similarity, then fewest wildcards,
    /// then lowest id.
    fn best_in_leaf(&self, leaf: usize, tokens: &[Token]) -> Option<(u32, f64)> {
        let mut best: Option<(u32, f64, usize)> = None;
        for &local in &self.nodes[leaf].templates {
            let t = &self.templates[local as usize];
            let sim = sequence_similarity(&t.tokens, tokens);
            let wc = t.wildcard_count();
            let better = match best {
                None => true,
                Some((bl, bs, bw)) => {
                    sim > bs || (sim == bs && (wc < bw || (wc == bw && local < bl)))
                }
            };
            if better {
                best = Some((local, sim, wc));
            }
        }
        best.map(|(l, s, _)| (l, s))
    }

    fn outcome(&self, local: u32, message: &str, similarity: Option<f64>, created: bool) -> ParseOutcome {
        let template = &self.templates[local as usize];
        let raw = raw_tokens(message);
        let parameter_values = template
            .tokens
            .iter()
            .zip(&raw)
            .filter(|(t, _)| t.is_wildcard)
            .map(|(_, r)| r.to_string())
            .collect();
        ParseOutcome {
            template_id: template.template_id,
            parameter_values,
            similarity,
            created,
            empty_message: message.split_whitespace().next().is_none(),
        }
    }

    /// Training-mode parse: may merge into or create a template.
    pub fn parse_message(&mut self, message: &str) -> ParseOutcome {
        let tokens = tokenize(message);
        let leaf = self.descend_mut(&tokens);
        self.parsed += 1;
        let best = self.best_in_leaf(leaf, &tokens);
        if let Some((local, sim)) = best {
            if sim >= self.params.sim_threshold {
                self.templates[local as usize].merge(&tokens);
                return self.outcome(local, message, Some(sim), false);
            }
        }
        let local = self.templates.len() as u32;
        self.templates.push(LogTemplate {
            template_id: pack_template_id(self.ordinal, local),
            token_count: tokens.len(),
            tokens,
            occurrences: 1,
            source_ids_seen: BTreeSet::from([self.source_id.clone()]),
        });
        self.template_leaf.push(leaf);
        self.nodes[leaf].templates.push(local);
        self.outcome(local, message, best.map(|b| b.1), true)
    }

    /// Frozen-tree lookup. Never mutates; `None` when no leaf template
    /// reaches the threshold.
    pub fn match_message(&self, message: &str) -> Option<ParseOutcome> {
        let tokens = tokenize(message);
        let leaf = self.descend(&tokens)?;
        let (local, sim) = self.best_in_leaf(leaf, &tokens)?;
        (sim >= self.params.sim_threshold).then(|| self.outcome(local, message, Some(sim), false))
    }
}

/// One [`ParseTree`] per source, addressed by source id.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateMiner {
    params: TreeParams,
    trees: Vec<ParseTree>,
}

impl TemplateMiner {
    /// Trees are created up front so ordinals follow `source_ids` order.
    pub fn new<S: AsRef<str>>(params: TreeParams, source_ids: &[S]) -> Result<Self> {
        let trees = source_ids
            .iter()
            .enumerate()
            .map(|(i, s)| ParseTree::new(s.as_ref(), i as u32, params))
            .collect::<Result<_>>()?;
        Ok(TemplateMiner { params, trees })
    }

    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn trees(&self) -> &[ParseTree] {
        &self.trees
    }

    pub fn tree(&self, source_id: &str) -> Option<&ParseTree> {
        self.trees.iter().find(|t| t.source_id == source_id)
    }

    fn tree_mut(&mut self, source_id: &str) -> Result<&mut ParseTree> {
        self.trees
            .iter_mut()
            .find(|t| t.source_id == source_id)
            .ok_or_else(|| Error::InvalidInput(format!("no parse tree for source {source_id}")))
    }

    pub fn tree_for_template(&self, template_id: u64) -> Option<&ParseTree> {
        self.trees.get(unpack_template_id(template_id).0 as usize)
    }

    pub fn template(&self, template_id: u64) -> Option<&LogTemplate> {
        self.tree_for_template(template_id)?.template(template_id)
    }

    pub fn parse(&mut self, record: &LogRecord) -> Result<ParseOutcome> {
        Ok(self.tree_mut(&record.source_id)?.parse_message(&record.message))
    }

    pub fn match_record(&self, record: &LogRecord) -> Option<ParseOutcome> {
        self.tree(&record.source_id)?.match_message(&record.message)
    }

    /// All templates, ordered by template id.
    pub fn all_templates(&self) -> impl Iterator<Item = &LogTemplate> {
        self.trees.iter().flat_map(|t| t.templates.iter())
    }

    /// Parse every record in order. Returns the assigned template ids.
    pub fn mine<'a>(&mut self, records: impl IntoIterator<Item = &'a LogRecord>) -> Result<Vec<u64>> {
        records
            .into_iter()
            .map(|r| self.parse(r).map(|o| o.template_id))
            .collect()
    }
}

fn ratio(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

fn byte_entropy_bits(bytes: &[u8]) -> f64 {
    if bytes.is_empty() {
        return 0.0;
    }
    let mut counts = [0usize; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// The 80 structural features of a parsed record.
///
/// | index | feature |
/// |-------|---------|
/// | 0..64 | one-hot of `template_id mod 64` |
/// | 64 | template token count / 32 |
/// | 65 | template wildcard count / token count |
/// | 66 | message chars / 256, clamped to 1 |
/// | 67 | digit chars / chars |
/// | 68 | uppercase chars / chars |
/// | 69 | ASCII punctuation chars / chars |
/// | 70 | hex-like message tokens / token count |
/// | 71 | `ln(1 + occurrences) / ln(1 + parsed in tree)` |
/// | 72 | number of parameter values |
/// | 73 | mean parameter length / 16 |
/// | 74 | other templates in the same leaf / 8, clamped to 1 |
/// | 75 | byte entropy of the message / 8 |
/// | 76..80 | one-hot of `fnv1a(first 4 template tokens) mod 4` |
pub fn structural_features(
    record: &LogRecord,
    template: &LogTemplate,
    tree: &ParseTree,
) -> [f64; STRUCTURAL_DIM] {
    let mut f = [0.0; STRUCTURAL_DIM];
    f[(template.template_id % 64) as usize] = 1.0;

    let msg = record.message.as_str();
    let chars: Vec<char> = msg.chars().collect();
    let n_chars = chars.len();
    let tc = template.token_count;
    let wildcards = template.wildcard_count();

    f[64] = tc as f64 / 32.0;
    f[65] = ratio(wildcards, tc);
    f[66] = (n_chars as f64 / 256.0).min(1.0);
    f[67] = ratio(chars.iter().filter(|c| c.is_ascii_digit()).count(), n_chars);
    f[68] = ratio(chars.iter().filter(|c| c.is_uppercase()).count(), n_chars);
    f[69] = ratio(chars.iter().filter(|c| c.is_ascii_punctuation()).count(), n_chars);

    let raw = raw_tokens(msg);
    let hex = raw.iter().filter(|t| is_hex_like(t)).count();
    f[70] = ratio(hex, raw.len());

    let parsed = tree.parsed_count();
    f[71] = if parsed == 0 {
        0.0
    } else {
        (template.occurrences as f64).ln_1p() / (parsed as f64).ln_1p()
    };

    let params: Vec<&str> = template
        .tokens
        .iter()
        .zip(&raw)
        .filter(|(t, _)| t.is_wildcard)
        .map(|(_, r)| *r)
        .collect();
    f[72] = params.len() as f64;
    f[73] = if params.is_empty() {
        0.0
    } else {
        params.iter().map(|p| p.chars().count()).sum::<usize>() as f64 / params.len() as f64 / 16.0
    };
    f[74] = (tree.leaf_size(template.template_id).saturating_sub(1) as f64 / 8.0).min(1.0);
    f[75] = byte_entropy_bits(msg.as_bytes()) / 8.0;

    let head = template
        .tokens
        .iter()
        .take(4)
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    f[76 + (fnv1a64(head.as_bytes()) % 4) as usize] = 1.0;
    f
}

/// One line of the persisted template store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredTemplate {
    pub template_id: u64,
    pub source_id: String,
    pub token_count: usize,
    pub occurrences: u64,
    pub template: String,
}

impl StoredTemplate {
    pub fn from_template(t: &LogTemplate, source_id: &str) -> Self {
        StoredTemplate {
            template_id: t.template_id,
            source_id: source_id.to_string(),
            token_count: t.token_count,
            occurrences: t.occurrences,
            template: t.render(),
        }
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.template.split(' ').map(Token::from_rendered).collect()
    }

    /// Rebuild a [`LogTemplate`] (the source set holds only `source_id`).
    pub fn to_template(&self) -> LogTemplate {
        LogTemplate {
            template_id: self.template_id,
            tokens: self.tokens(),
            token_count: self.token_count,
            occurrences: self.occurrences,
            source_ids_seen: BTreeSet::from([self.source_id.clone()]),
        }
    }
}

/// Tab-separated store: `template_id  source_id  token_count  occurrences  template`.
pub fn write_template_store<W: Write>(mut w: W, templates: &[StoredTemplate]) -> std::io::Result<()> {
    for t in templates {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            t.template_id, t.source_id, t.token_count, t.occurrences, t.template
        )?;
    }
    Ok(())
}

pub fn read_template_store<R: BufRead>(r: R, path: &Path) -> Result<Vec<StoredTemplate>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(5, '\t');
        let mut field = |name: &str| {
            parts
                .next()
                .ok_or_else(|| Error::format(path, n + 1, format!("missing {name}")))
        };
        let bad = |name: &str| Error::format(path, n + 1, format!("bad {name}"));
        let template_id = field("template_id")?.parse().map_err(|_| bad("template_id"))?;
        let source_id = field("source_id")?.to_string();
        let token_count = field("token_count")?.parse().map_err(|_| bad("token_count"))?;
        let occurrences = field("occurrences")?.parse().map_err(|_| bad("occurrences"))?;
        let template = field("template")?.to_string();
        out.push(StoredTemplate {
            template_id,
            source_id,
            token_count,
            occurrences,
            template,
        });
    }
    Ok(out)
}
