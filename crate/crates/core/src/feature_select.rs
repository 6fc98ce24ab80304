//! Feature scoring and top-K selection.
//!
//! Two rankings are fused by rank sum: mutual information with the label
//! (quantile-binned features, nats) and Gini importance from a small random
//! forest. The fused order is `rank_mi + rank_forest`, ties to lower index.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::derive_seed_indexed;
use crate::ingest::Label;

pub const DEFAULT_K: usize = 200;
pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_TREES: usize = 50;
pub const DEFAULT_MAX_DEPTH: usize = 8;

fn class_counts(y: &[Label]) -> [usize; 2] {
    let mut c = [0; 2];
    for l in y {
        c[l.index()] += 1;
    }
    c
}

fn check_inputs(x: &ArrayView2<'_, f64>, y: &[Label]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidInput("need at least two rows".into()));
    }
    let c = class_counts(y);
    if c[0] == 0 || c[1] == 0 {
        return Err(Error::InvalidInput(
            "both classes must be present to score features".into(),
        ));
    }
    Ok(())
}

/// Bin index per row. Edges are the distinct values at quantiles
/// `i / bins` (i = 1..bins-1, lower order statistic); a value's bin is the
/// number of edges strictly below it, so duplicate edges merge empty bins.
pub fn quantile_bins(column: ArrayView1<'_, f64>, bins: usize) -> Vec<usize> {
    let n = column.len();
    let mut sorted: Vec<f64> = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..bins)
        .map(|i| sorted[((i * n) / bins).min(n - 1)])
        .collect();
    edges.dedup();
    column
        .iter()
        .map(|v| edges.partition_point(|e| e < v))
        .collect()
}

/// Mutual information between a discrete variable and the label, in nats.
pub fn discrete_mi(bins: &[usize], y: &[Label]) -> f64 {
    let n_bins = bins.iter().copied().max().map_or(0, |m| m + 1);
    let mut joint = vec![[0usize; 2]; n_bins];
    for (&b, l) in bins.iter().zip(y) {
        joint[b][l.index()] += 1;
    }
    let n = y.len() as f64;
    let py = class_counts(y).map(|c| c as f64 / n);
    let mut mi = 0.0;
    for row in &joint {
        let pb = (row[0] + row[1]) as f64 / n;
        for c in 0..2 {
            if row[c] > 0 {
                let pbc = row[c] as f64 / n;
                mi += pbc * (pbc / (pb * py[c])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// MI of every column with the label.
pub fn mi_scores(x: ArrayView2<'_, f64>, y: &[Label], bins: usize) -> Result<Vec<f64>> {
    check_inputs(&x, y)?;
    if bins < 2 {
        return Err(Error::InvalidInput("bins must be >= 2".into()));
    }
    Ok((0..x.ncols())
        .into_par_iter()
        .map(|j| {
            let col = x.column(j);
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                0.0
            } else {
                discrete_mi(&quantile_bins(col, bins), y)
            }
        })
        .collect())
}

fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

#[derive(Clone, Copy, Debug)]
struct ForestParams {
    max_depth: usize,
    mtry: usize,
}

struct Split {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

fn best_split(
    x: &ArrayView2<'_, f64>,
    y: &[Label],
    rows: &[usize],
    features: &[usize],
) -> Option<Split> {
    let mut parent = [0usize; 2];
    for &r in rows {
        parent[y[r].index()] += 1;
    }
    let n = rows.len() as f64;
    let parent_gini = gini(parent);
    let mut best: Option<Split> = None;
    let mut sorted: Vec<(f64, Label)> = Vec::with_capacity(rows.len());
    for &f in features {
        sorted.clear();
        sorted.extend(rows.iter().map(|&r| (x[[r, f]], y[r])));
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0usize; 2];
        for i in 0..sorted.len() - 1 {
            left[sorted[i].1.index()] += 1;
            if sorted[i].0 == sorted[i + 1].0 {
                continue;
            }
            let right = [parent[0] - left[0], parent[1] - left[1]];
            let nl = (i + 1) as f64;
            let weighted = (nl * gini(left) + (n - nl) * gini(right)) / n;
            let decrease = parent_gini - weighted;
            let better = match &best {
                None => decrease > 0.0,
                Some(b) => decrease > b.decrease,
            };
            if better {
                best = Some(Split {
                    feature: f,
                    threshold: 0.5 * (sorted[i].0 + sorted[i + 1].0),
                    decrease,
                });
            }
        }
    }
    best
}

fn grow(
    x: &ArrayView2<'_, f64>,
    y: &[Label],
    rows: Vec<usize>,
    depth: usize,
    params: ForestParams,
    rng: &mut ChaCha8Rng,
    importance: &mut [f64],
) {
    if depth >= params.max_depth || rows.len() < 2 {
        return;
    }
    let first = y[rows[0]];
    if rows.iter().all(|&r| y[r] == first) {
        return;
    }
    let mut features = sample(rng, x.ncols(), params.mtry).into_vec();
    features.sort_unstable();
    let Some(split) = best_split(x, y, &rows, &features) else {
        return;
    };
    importance[split.feature] += rows.len() as f64 * split.decrease;
    let (left, right): (Vec<usize>, Vec<usize>) = rows
        .into_iter()
        .partition(|&r| x[[r, split.feature]] <= split.threshold);
    grow(x, y, left, depth + 1, params, rng, importance);
    grow(x, y, right, depth + 1, params, rng, importance);
}

/// Gini importance from `trees` randomized trees (bootstrap rows,
/// `floor(sqrt(d))` candidate features per split, depth <= `max_depth`),
/// normalized to sum 1. All zeros when no split ever reduces impurity.
pub fn forest_scores(
    x: ArrayView2<'_, f64>,
    y: &[Label],
    trees: usize,
    max_depth: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_inputs(&x, y)?;
    let d = x.ncols();
    let n = x.nrows();
    if d == 0 {
        return Ok(Vec::new());
    }
    let params = ForestParams {
        max_depth,
        mtry: ((d as f64).sqrt().floor() as usize).clamp(1, d),
    };
    let per_tree: Vec<Vec<f64>> = (0..trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "forest", t as u64));
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut imp = vec![0.0; d];
            grow(&x, y, rows, 0, params, &mut rng, &mut imp);
            imp
        })
        .collect();
    let mut total = vec![0.0; d];
    for imp in &per_tree {
        for (t, v) in total.iter_mut().zip(imp) {
            *t += v;
        }
    }
    let sum: f64 = total.iter().sum();
    if sum > 0.0 {
        total.iter_mut().for_each(|v| *v /= sum);
    } else {
        log::warn!("forest found no impurity-reducing split; importances are all zero");
    }
    Ok(total)
}

/// Position of each feature when sorted by descending score, ties to the
/// lower index.
pub fn descending_ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (pos, &j) in order.iter().enumerate() {
        rank[j] = pos;
    }
    rank
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    pub mi: Vec<f64>,
    pub forest: Vec<f64>,
    /// Position of each feature in the fused order (a permutation of 0..d).
    pub fused_rank: Vec<usize>,
}

impl FeatureScores {
    pub fn new(mi: Vec<f64>, forest: Vec<f64>) -> Result<Self> {
        if mi.len() != forest.len() {
            return Err(Error::DimensionMismatch {
                expected: mi.len(),
                found: forest.len(),
            });
        }
        let rm = descending_ranks(&mi);
        let rf = descending_ranks(&forest);
        let mut order: Vec<usize> = (0..mi.len()).collect();
        order.sort_by_key(|&j| (rm[j] + rf[j], j));
        let mut fused_rank = vec![0; mi.len()];
        for (pos, &j) in order.iter().enumerate() {
            fused_rank[j] = pos;
        }
        Ok(FeatureScores {
            mi,
            forest,
            fused_rank,
        })
    }

    pub fn select(&self, k: usize) -> Result<SelectionMask> {
        let d = self.fused_rank.len();
        if k == 0 || k > d {
            return Err(Error::InvalidInput(format!("K = {k} must be in 1..={d}")));
        }
        let indices = (0..d).filter(|&j| self.fused_rank[j] < k).collect();
        Ok(SelectionMask { indices, d })
    }
}

/// Sorted selected feature indices out of `d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub indices: Vec<usize>,
    pub d: usize,
}

impl SelectionMask {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: row.len(),
            });
        }
        Ok(self.indices.iter().map(|&j| row[j]).collect())
    }

    /// Text format: `k=<K> d=<d>` then one index per line.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k={} d={}", self.k(), self.d)?;
        for i in &self.indices {
            writeln!(w, "{i}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R, path: &Path) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::format(path, 1, "empty selection mask"))?;
        let parse_kv = |tok: Option<&str>, key: &str| -> Result<usize> {
            tok.and_then(|t| t.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, 1, "header must be k=<K> d=<d>"))
        };
        let mut hp = header.split_whitespace();
        let k = parse_kv(hp.next(), "k=")?;
        let d = parse_kv(hp.next(), "d=")?;
        let mut indices = Vec::with_capacity(k);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let i: usize = line
                .trim()
                .parse()
                .map_err(|_| Error::format(path, n + 2, "bad index"))?;
            if i >= d || indices.last().is_some_and(|&p| p >= i) {
                return Err(Error::format(path, n + 2, "indices must be ascending and < d"));
            }
            indices.push(i);
        }
        if indices.len() != k {
            return Err(Error::format(path, 1, format!("expected {k} indices, found {}", indices.len())));
        }
        Ok(SelectionMask { indices, d })
    }
}

/// Fuse two score vectors and keep the `k` best features.
pub fn select_top_k(mi: &[f64], forest: &[f64], k: usize) -> Result<SelectionMask> {
    FeatureScores::new(mi.to_vec(), forest.to_vec())?.select(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub k: usize,
    pub bins: usize,
    pub trees: usize,
    pub max_depth: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            k: DEFAULT_K,
            bins: DEFAULT_BINS,
            trees: DEFAULT_TREES,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

/// Score all features and select `cfg.k` of them (capped at `d`).
pub fn fit_selection(
    x: ArrayView2<'_, f64>,
    y: &[Label],
    cfg: &SelectConfig,
    seed: u64,
) -> Result<(FeatureScores, SelectionMask)> {
    let mi = mi_scores(x, y, cfg.bins)?;
    let forest = forest_scores(x, y, cfg.trees, cfg.max_depth, seed)?;
    let scores = FeatureScores::new(mi, forest)?;
    let mask = scores.select(cfg.k.min(x.ncols()))?;
    Ok((scores, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| Label::from_bit(b).unwrap()).collect()
    }

    #[test]
    fn mi_of_label_copy_is_entropy() {
        let bits: Vec<u8> = (0..1000).map(|i| u8::from(i % 2 == 0)).collect();
        let y = labels(&bits);
        let x = Array2::from_shape_fn((1000, 2), |(i, j)| if j == 0 { bits[i] as f64 } else { 3.0 });
        let mi = mi_scores(x.view(), &y, 10).unwrap();
        assert!((mi[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(mi[1], 0.0);
    }

    #[test]
    fn mi_ninety_ten() {
        let bits: Vec<u8> = (0..1000).map(|i| u8::from(i < 100)).collect();
        let y = labels(&bits);
        let x = Array2::from_shape_fn((1000, 1), |(i, _)| bits[i] as f64);
        let mi = mi_scores(x.view(), &y, 10).unwrap();
        let h = -0.9f64 * 0.9f64.ln() - 0.1 * 0.1f64.ln();
        assert!((mi[0] - h).abs() < 1e-12);
        assert!((mi[0] - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn single_class_is_error() {
        let x = Array2::<f64>::zeros((4, 2));
        let y = labels(&[0, 0, 0, 0]);
        assert!(mi_scores(x.view(), &y, 10).is_err());
        assert!(forest_scores(x.view(), &y, 3, 3, 0).is_err());
    }

    #[test]
    fn quantile_bins_merge_duplicates() {
        let col = ndarray::arr1(&[1.0, 1.0, 1.0, 2.0]);
        let b = quantile_bins(col.view(), 10);
        assert_eq!(b, vec![0, 0, 0, 1]);
        let col = ndarray::arr1(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert!(quantile_bins(col.view(), 10).iter().all(|&b| b < 10));
    }

    #[test]
    fn forest_finds_separator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 500;
        let bits: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let y = labels(&bits);
        let x = Array2::from_shape_fn((n, 10), |(i, j)| {
            if j == 6 {
                bits[i] as f64 * 2.0 - 1.0
            } else {
                rng.random::<f64>()
            }
        });
        let imp = forest_scores(x.view(), &y, 50, 8, 17).unwrap();
        let argmax = (0..10).max_by(|&a, &b| imp[a].total_cmp(&imp[b])).unwrap();
        assert_eq!(argmax, 6);
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(imp, forest_scores(x.view(), &y, 50, 8, 17).unwrap());
    }

    #[test]
    fn constant_data_gives_zero_importance() {
        let x = Array2::<f64>::ones((20, 4));
        let y = labels(&[0, 1].repeat(10));
        assert_eq!(forest_scores(x.view(), &y, 5, 4, 1).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn selection_examples() {
        let mask = select_top_k(&[0.1, 0.5, 0.3], &[0.2, 0.2, 0.6], 3).unwrap();
        assert_eq!(mask.indices, vec![0, 1, 2]);
        // features 0 and 2 tie on both scores, 1 is worse: lower index wins
        let mask = select_top_k(&[0.5, 0.1, 0.5], &[0.4, 0.2, 0.4], 1).unwrap();
        assert_eq!(mask.indices, vec![0]);
        let mask = select_top_k(&[0.5, 0.1, 0.5], &[0.4, 0.2, 0.4], 2).unwrap();
        assert_eq!(mask.indices, vec![0, 2]);
        assert!(select_top_k(&[0.1], &[0.1], 2).is_err());
        assert!(select_top_k(&[0.1], &[0.1], 0).is_err());
    }

    #[test]
    fn default_k_on_848() {
        let mi: Vec<f64> = (0..848).map(|i| ((i * 37) % 101) as f64).collect();
        let fr: Vec<f64> = (0..848).map(|i| ((i * 53) % 97) as f64).collect();
        let mask = select_top_k(&mi, &fr, 200).unwrap();
        assert_eq!(mask.k(), 200);
        assert!(mask.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mask_file_round_trip() {
        let mask = SelectionMask {
            indices: vec![1, 4, 9],
            d: 12,
        };
        let mut buf = Vec::new();
        mask.write(&mut buf).unwrap();
        assert!(buf.starts_with(b"k=3 d=12\n"));
        assert_eq!(SelectionMask::read(&buf[..], Path::new("m")).unwrap(), mask);
        assert!(SelectionMask::read(&b"k=2 d=3\n2\n1\n"[..], Path::new("m")).is_err());
    }
}
