//! Dense encoder with hand-written backpropagation.
//!
//! The encoder is a stack of affine layers with ReLU between them and an
//! identity output. Losses are attached through [`LossHead`]; the
//! prototypical heads differentiate through prototype construction, so
//! support embeddings receive gradient both as prototype members and, in the
//! leave-one-out head, as scored points.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Encoder weights. An empty layer list is the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type Gradients = EncoderParams;

impl EncoderParams {
    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn he_uniform(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / w[0] as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((w[1], w[0]), || {
                        rng.random_range(-limit..limit)
                    }),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(EncoderParams { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        Ok(EncoderParams {
            layers: sizes
                .windows(2)
                .map(|w| Layer {
                    weight: Array2::zeros((w[1], w[0])),
                    bias: Array1::zeros(w[1]),
                })
                .collect(),
        })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "layer sizes {sizes:?} need at least two positive entries"
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.first().map(|l| vec![l.weight.ncols()]).unwrap_or_default();
        s.extend(self.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.weight.ncols())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights row-major then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend(l.weight.iter().copied());
            v.extend(l.bias.iter().copied());
        }
        v
    }

    /// Same layout as `self`, values from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        for l in &mut out.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(out)
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.raw_dim() == b.weight.raw_dim() && a.bias.raw_dim() == b.bias.raw_dim()
            })
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| Layer {
                    weight: ndarray::Zip::from(&a.weight).and(&b.weight).map_collect(|&x, &y| f(x, y)),
                    bias: ndarray::Zip::from(&a.bias).and(&b.bias).map_collect(|&x, &y| f(x, y)),
                })
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.zip_map(self, |x, _| x * s)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |x, y| x + y)
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, width: usize) -> Result<()> {
        match self.input_dim() {
            Some(d) if d != width => Err(Error::DimensionMismatch {
                expected: d,
                found: width,
            }),
            _ => Ok(()),
        }
    }

    /// Embed one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(row)?.row(0).to_vec())
    }

    /// Embed each row of `x`.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(x)?.0)
    }

    fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.weight.t()) + &l.bias;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("activation of layer {i}")));
            }
            let next = if i < last { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        Ok((a, inputs, pre))
    }
}

/// Class weighting for the focal loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alpha {
    /// Inverse class frequency of the scored points, normalized to sum 1.
    Balanced,
    /// Fixed `[normal, anomaly]` weights.
    Fixed([f64; 2]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: Alpha,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            gamma: 2.0,
            alpha: Alpha::Balanced,
        }
    }
}

impl FocalConfig {
    pub fn cross_entropy() -> Self {
        FocalConfig {
            gamma: 0.0,
            alpha: Alpha::Fixed([1.0, 1.0]),
        }
    }

    /// Per-class weights for a set of scored labels.
    pub fn resolve_alpha(&self, labels: impl IntoIterator<Item = Label>) -> [f64; 2] {
        match self.alpha {
            Alpha::Fixed(a) => a,
            Alpha::Balanced => {
                let mut counts = [0usize; 2];
                for l in labels {
                    counts[l.index()] += 1;
                }
                let inv: Vec<f64> = counts
                    .iter()
                    .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
                    .collect();
                let total: f64 = inv.iter().sum();
                if total == 0.0 {
                    [0.5, 0.5]
                } else {
                    [inv[0] / total, inv[1] / total]
                }
            }
        }
    }
}

/// `-alpha_t * (1 - p_t)^gamma * ln(p_t)`, with `p_t` floored at 1e-12.
pub fn focal_loss(probs: &[f64], target: usize, gamma: f64, alpha_t: f64) -> f64 {
    let p = probs[target];
    let one_minus: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, q)| q)
        .sum();
    if p < PROB_FLOOR {
        log::warn!("focal loss: p_target {p} clamped to {PROB_FLOOR}");
    }
    -alpha_t * one_minus.powf(gamma) * p.max(PROB_FLOOR).ln()
}

/// d focal / d logit_j for softmax probabilities.
fn focal_logit_grad(probs: &[f64], target: usize, gamma: f64, alpha_t: f64) -> Vec<f64> {
    let p = probs[target].max(PROB_FLOOR);
    let one_minus: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, q)| q)
        .sum();
    let modulating = if gamma == 0.0 || one_minus <= 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0) * p * p.ln()
    };
    let a = alpha_t * (modulating - one_minus.powf(gamma));
    probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| a * (f64::from(u8::from(j == target)) - pj))
        .collect()
}

/// Softmax over `-||e - mu_c||^2`.
pub fn softmax_neg_sq_dist(e: &[f64], protos: &[&[f64]]) -> Vec<f64> {
    let logits: Vec<f64> = protos
        .iter()
        .map(|mu| -e.iter().zip(*mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    softmax(&logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / s).collect()
}

/// Loss attached to the encoder output.
#[derive(Clone, Debug, PartialEq)]
pub enum LossHead {
    /// Mean over rows of `||e - t||^2`.
    SquaredError { targets: Array2<f64> },
    /// Rows `0..n_support` build class prototypes; the remaining rows are
    /// scored with the focal loss of the prototype softmax.
    Prototypical {
        labels: Vec<Label>,
        n_support: usize,
        focal: FocalConfig,
    },
    /// Every row is scored against prototypes built from the other rows.
    LeaveOneOut { labels: Vec<Label>, focal: FocalConfig },
}

struct ScoredPoint {
    row: usize,
    label: Label,
    /// Prototype members per class index; empty when the class is absent.
    members: [Vec<usize>; 2],
}

fn mean_rows(e: &ArrayView2<'_, f64>, rows: &[usize]) -> Array1<f64> {
    let mut mu = Array1::zeros(e.ncols());
    for &r in rows {
        mu += &e.row(r);
    }
    mu / rows.len() as f64
}

fn prototype_focal(
    e: ArrayView2<'_, f64>,
    points: &[ScoredPoint],
    focal: &FocalConfig,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(e.raw_dim());
    let scored: Vec<&ScoredPoint> = points
        .iter()
        .filter(|p| p.members.iter().all(|m| !m.is_empty()))
        .collect();
    if scored.is_empty() {
        return (0.0, grad);
    }
    let alpha = focal.resolve_alpha(scored.iter().map(|p| p.label));
    let scale = 1.0 / scored.len() as f64;
    let mut loss = 0.0;
    for p in scored {
        let eq = e.row(p.row);
        let protos: Vec<Array1<f64>> = p.members.iter().map(|m| mean_rows(&e, m)).collect();
        let diffs: Vec<Array1<f64>> = protos.iter().map(|mu| &eq - mu).collect();
        let logits: Vec<f64> = diffs.iter().map(|d| -d.dot(d)).collect();
        let probs = softmax(&logits);
        let t = p.label.index();
        loss += focal_loss(&probs, t, focal.gamma, alpha[t]);
        let g = focal_logit_grad(&probs, t, focal.gamma, alpha[t]);
        for c in 0..2 {
            let gc = g[c] * scale;
            if gc == 0.0 {
                continue;
            }
            // dz_c/de_q = -2 (e_q - mu_c); dz_c/dmu_c = 2 (e_q - mu_c)
            grad.row_mut(p.row).scaled_add(-2.0 * gc, &diffs[c]);
            let share = 2.0 * gc / p.members[c].len() as f64;
            for &m in &p.members[c] {
                grad.row_mut(m).scaled_add(share, &diffs[c]);
            }
        }
    }
    (loss * scale, grad)
}

impl LossHead {
    /// Loss and its gradient with respect to the embeddings.
    pub fn loss_and_grad(&self, e: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        match self {
            LossHead::SquaredError { targets } => {
                if targets.raw_dim() != e.raw_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: e.len(),
                        found: targets.len(),
                    });
                }
                let n = e.nrows().max(1) as f64;
                let diff = &e - targets;
                Ok((diff.mapv(|v| v * v).sum() / n, diff * (2.0 / n)))
            }
            LossHead::Prototypical {
                labels,
                n_support,
                focal,
            } => {
                self.check_labels(labels, e.nrows())?;
                let mut members: [Vec<usize>; 2] = Default::default();
                for (r, l) in labels[..*n_support].iter().enumerate() {
                    members[l.index()].push(r);
                }
                let points: Vec<ScoredPoint> = (*n_support..labels.len())
                    .map(|row| ScoredPoint {
                        row,
                        label: labels[row],
                        members: members.clone(),
                    })
                    .collect();
                Ok(prototype_focal(e, &points, focal))
            }
            LossHead::LeaveOneOut { labels, focal } => {
                self.check_labels(labels, e.nrows())?;
                let points: Vec<ScoredPoint> = (0..labels.len())
                    .map(|row| {
                        let mut members: [Vec<usize>; 2] = Default::default();
                        for (r, l) in labels.iter().enumerate() {
                            if r != row {
                                members[l.index()].push(r);
                            }
                        }
                        ScoredPoint {
                            row,
                            label: labels[row],
                            members,
                        }
                    })
                    .collect();
                Ok(prototype_focal(e, &points, focal))
            }
        }
    }

    fn check_labels(&self, labels: &[Label], rows: usize) -> Result<()> {
        if labels.len() != rows {
            return Err(Error::DimensionMismatch {
                expected: rows,
                found: labels.len(),
            });
        }
        if let LossHead::Prototypical { n_support, .. } = self {
            if *n_support > rows {
                return Err(Error::InvalidInput("n_support exceeds batch size".into()));
            }
        }
        Ok(())
    }
}

/// Mean loss of the batch under `head`.
pub fn loss(p: &EncoderParams, batch: ArrayView2<'_, f64>, head: &LossHead) -> Result<f64> {
    let e = p.forward_batch(batch)?;
    Ok(head.loss_and_grad(e.view())?.0)
}

/// Loss and exact gradients with respect to every parameter.
pub fn backward(p: &EncoderParams, batch: ArrayView2<'_, f64>, head: &LossHead) -> Result<(f64, Gradients)> {
    if batch.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let (out, inputs, pre) = p.forward_trace(batch)?;
    let (loss, mut delta) = head.loss_and_grad(out.view())?;
    let mut grads = p.zeros_like();
    let last = p.layers.len().saturating_sub(1);
    for i in (0..p.layers.len()).rev() {
        if i < last {
            ndarray::Zip::from(&mut delta)
                .and(&pre[i])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
        }
        grads.layers[i].weight = delta.t().dot(&inputs[i]);
        grads.layers[i].bias = delta.sum_axis(Axis(0));
        if i > 0 {
            delta = delta.dot(&p.layers[i].weight);
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    Ok((loss, grads))
}

fn check_congruent(p: &EncoderParams, g: &Gradients) -> Result<()> {
    if !p.same_shape(g) {
        return Err(Error::InvalidInput("parameter and gradient shapes differ".into()));
    }
    Ok(())
}

/// `p - lr * g`.
pub fn sgd_step(p: &EncoderParams, g: &Gradients, lr: f64) -> Result<EncoderParams> {
    check_congruent(p, g)?;
    Ok(p.zip_map(g, |w, d| w - lr * d))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(p: &EncoderParams) -> Self {
        AdamState {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    p: &EncoderParams,
    g: &Gradients,
    state: &AdamState,
    lr: f64,
) -> Result<(EncoderParams, AdamState)> {
    check_congruent(p, g)?;
    let t = state.t + 1;
    let m = state.m.zip_map(g, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g);
    let v = state.v.zip_map(g, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g);
    let c1 = 1.0 - ADAM_BETA1.powf(t as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(t as f64);
    let step = m.zip_map(&v, |m, v| lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS));
    Ok((p.zip_map(&step, |w, s| w - s), AdamState { m, v, t }))
}

/// Relative error used by the gradient checks: `|a - n| / max(|n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-6)
}

/// Compare `analytic` with central differences of the loss at `p`.
pub fn finite_diff_check_against(
    p: &EncoderParams,
    batch: ArrayView2<'_, f64>,
    head: &LossHead,
    analytic: &Gradients,
    eps: f64,
) -> Result<f64> {
    check_congruent(p, analytic)?;
    let base = p.to_flat();
    let a = analytic.to_flat();
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let up = loss(&p.with_flat(&probe)?, batch, head)?;
        probe[i] = base[i] - eps;
        let down = loss(&p.with_flat(&probe)?, batch, head)?;
        probe[i] = base[i];
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(a[i], numeric));
    }
    Ok(worst)
}

/// Max relative error between backprop and central differences.
pub fn finite_diff_check(p: &EncoderParams, batch: ArrayView2<'_, f64>, head: &LossHead, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let (_, g) = backward(p, batch, head)?;
    finite_diff_check_against(p, batch, head, &g, eps)
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "logmeta-encoder";

/// Encoder weights plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub seed: u64,
    pub config_digest: String,
    /// Free-form `key=value` metadata (for example the meta-training config).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Text format: header lines `key=value`, then per layer a
    /// `layer <i> <out> <in>` line, `out` weight rows and one bias row.
    /// Values use Rust's shortest round-trip formatting, so reading back is
    /// bit-exact.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC} format_version={CHECKPOINT_VERSION}")?;
        let sizes = self.params.layer_sizes();
        writeln!(
            w,
            "layer_sizes={}",
            sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        )?;
        writeln!(w, "seed={}", self.seed)?;
        writeln!(w, "config_digest={}", self.config_digest)?;
        for (k, v) in &self.meta {
            writeln!(w, "meta.{k}={v}")?;
        }
        let row = |vals: &mut dyn Iterator<Item = f64>| {
            vals.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
        };
        for (i, l) in self.params.layers.iter().enumerate() {
            writeln!(w, "layer {i} {} {}", l.weight.nrows(), l.weight.ncols())?;
            for r in l.weight.rows() {
                writeln!(w, "{}", row(&mut r.iter().copied()))?;
            }
            writeln!(w, "{}", row(&mut l.bias.iter().copied()))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R, path: &Path) -> Result<Self> {
        let lines: Vec<String> = r
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        let mut it = lines.iter().enumerate().peekable();
        let (_, first) = it.next().ok_or_else(|| Error::format(path, 1, "empty checkpoint"))?;
        let version = first
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|s| s.trim().strip_prefix("format_version="))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::format(path, 1, "not an encoder checkpoint"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, 1, format!("unsupported format version {version}")));
        }
        let mut sizes = None;
        let mut seed = 0;
        let mut config_digest = String::new();
        let mut meta = BTreeMap::new();
        while let Some((_, l)) = it.peek() {
            if l.starts_with("layer ") {
                break;
            }
            let (n, l) = it.next().unwrap();
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::format(path, n + 1, "expected key=value"))?;
            match k {
                "layer_sizes" => {
                    sizes = Some(
                        v.split(',')
                            .map(|s| s.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| Error::format(path, n + 1, "bad layer_sizes"))?,
                    )
                }
                "seed" => seed = v.parse().map_err(|_| Error::format(path, n + 1, "bad seed"))?,
                "config_digest" => config_digest = v.to_string(),
                _ => {
                    let key = k.strip_prefix("meta.").unwrap_or(k);
                    meta.insert(key.to_string(), v.to_string());
                }
            }
        }
        let sizes = sizes.ok_or_else(|| Error::format(path, 2, "missing layer_sizes"))?;
        let parse_row = |n: usize, s: &str, want: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = s
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, n + 1, "bad value"))?;
            if v.len() != want {
                return Err(Error::format(path, n + 1, format!("expected {want} values")));
            }
            Ok(v)
        };
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let (n, head) = it
                .next()
                .ok_or_else(|| Error::format(path, lines.len(), format!("missing layer {i}")))?;
            if head != &format!("layer {i} {} {}", w[1], w[0]) {
                return Err(Error::format(path, n + 1, "layer header does not match layer_sizes"));
            }
            let mut weight = Vec::with_capacity(w[0] * w[1]);
            for _ in 0..w[1] {
                let (n, l) = it
                    .next()
                    .ok_or_else(|| Error::format(path, lines.len(), "truncated weights"))?;
                weight.extend(parse_row(n, l, w[0])?);
            }
            let (n, l) = it
                .next()
                .ok_or_else(|| Error::format(path, lines.len(), "truncated bias"))?;
            let bias = parse_row(n, l, w[1])?;
            layers.push(Layer {
                weight: Array2::from_shape_vec((w[1], w[0]), weight).expect("shape checked"),
                bias: Array1::from_vec(bias),
            });
        }
        Ok(Checkpoint {
            params: EncoderParams { layers },
            seed,
            config_digest,
            meta,
        })
    }
}
