//! Episodic meta-training of a prototypical encoder.
//!
//! Meta-training runs first-order MAML: every task adapts a copy of the
//! parameters on its support set with a few SGD steps of the leave-one-out
//! prototypical focal loss, then the query loss gradient at the adapted
//! parameters is averaged over the meta-batch and applied to the shared
//! initialization with Adam.
//!
//! The curriculum has three phases:
//!
//! 1. one source, 5+5 support, balanced 15+15 query;
//! 2. one source, 5+5 support, query at the source's natural imbalance;
//! 3. support from one source, query from a different source.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::derive_seed_indexed;
use crate::ingest::Label;
use crate::neural_core::{
    adam_step, backward, sgd_step, softmax_neg_sq_dist, AdamState, EncoderParams, FocalConfig, Gradients,
    LossHead,
};

/// One labeled training point in selected-feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolPoint {
    pub x: Vec<f64>,
    pub label: Label,
    /// `None` for SMOTE output.
    pub record_id: Option<u64>,
    pub drift: bool,
}

impl PoolPoint {
    pub fn is_synthetic(&self) -> bool {
        self.record_id.is_none()
    }

    fn support_eligible(&self) -> bool {
        !self.drift
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourcePool {
    pub source_id: String,
    pub points: Vec<PoolPoint>,
}

impl SourcePool {
    fn indices(&self, pred: impl Fn(&PoolPoint) -> bool) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| pred(&self.points[i])).collect()
    }
}

/// Pool CSV: `source_id,record_id,label,drift_flag,f0,...`; `record_id` is
/// empty for synthetic points. Sources keep their order of first appearance.
pub fn write_pools<W: Write>(mut w: W, pools: &[SourcePool]) -> std::io::Result<()> {
    let width = pools.iter().flat_map(|p| &p.points).map(|p| p.x.len()).next().unwrap_or(0);
    write!(w, "source_id,record_id,label,drift_flag")?;
    for i in 0..width {
        write!(w, ",f{i}")?;
    }
    writeln!(w)?;
    for pool in pools {
        for p in &pool.points {
            let id = p.record_id.map(|r| r.to_string()).unwrap_or_default();
            write!(w, "{},{id},{},{}", pool.source_id, p.label.bit(), u8::from(p.drift))?;
            for v in &p.x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn read_pools<R: BufRead>(r: R, path: &Path) -> Result<Vec<SourcePool>> {
    let mut pools: Vec<SourcePool> = Vec::new();
    let mut width = None;
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if !line.starts_with("source_id,record_id,") {
                return Err(Error::format(path, 1, "missing pool header"));
            }
            width = Some(line.split(',').count() - 4);
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, n + 1, format!("bad {what}"));
        let mut f = line.split(',');
        let source = f.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("source_id"))?;
        let record_id = match f.next() {
            Some("") => None,
            Some(v) => Some(v.parse().map_err(|_| bad("record_id"))?),
            None => return Err(bad("record_id")),
        };
        let label = f
            .next()
            .and_then(|v| v.parse::<u8>().ok())
            .and_then(Label::from_bit)
            .ok_or_else(|| bad("label"))?;
        let drift = match f.next() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(bad("drift_flag")),
        };
        let x: Vec<f64> = f
            .map(|v| v.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("value"))?;
        if Some(x.len()) != width {
            return Err(bad("row width"));
        }
        let point = PoolPoint {
            x,
            label,
            record_id,
            drift,
        };
        match pools.iter_mut().find(|p| p.source_id == source) {
            Some(p) => p.points.push(point),
            None => pools.push(SourcePool {
                source_id: source.to_string(),
                points: vec![point],
            }),
        }
    }
    Ok(pools)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Balanced = 1,
    Natural = 2,
    CrossSource = 3,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Balanced, Phase::Natural, Phase::CrossSource];

    pub fn number(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Index of a point inside a pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointRef {
    pub source: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub phase: Phase,
    pub support: Vec<PointRef>,
    pub query: Vec<PointRef>,
}

impl Episode {
    pub fn support_source(&self) -> usize {
        self.support[0].source
    }

    /// Support rows followed by query rows, with labels in the same order.
    pub fn batch(&self, pool: &[SourcePool]) -> (Array2<f64>, Vec<Label>) {
        let refs: Vec<&PointRef> = self.support.iter().chain(&self.query).collect();
        let d = pool[refs[0].source].points[refs[0].index].x.len();
        let mut x = Array2::zeros((refs.len(), d));
        let mut y = Vec::with_capacity(refs.len());
        for (row, r) in refs.iter().enumerate() {
            let p = &pool[r.source].points[r.index];
            x.row_mut(row).assign(&ndarray::ArrayView1::from(&p.x[..]));
            y.push(p.label);
        }
        (x, y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub meta_batch: usize,
    pub episodes_per_phase: [usize; 3],
    pub support_minority: usize,
    pub support_majority: usize,
    /// Per-class query size of phase 1.
    pub balanced_query_per_class: usize,
    /// Query size cap of phases 2 and 3.
    pub query_cap: usize,
    /// Encoder widths after the input layer.
    pub hidden: Vec<usize>,
    pub focal: FocalConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_steps: 5,
            inner_lr: 0.01,
            outer_lr: 1e-3,
            meta_batch: 4,
            episodes_per_phase: [300, 300, 400],
            support_minority: 5,
            support_majority: 5,
            balanced_query_per_class: 15,
            query_cap: 50,
            hidden: vec![128, 64, 32],
            focal: FocalConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("meta: {m}")));
        if self.meta_batch == 0 || self.support_minority == 0 || self.support_majority == 0 {
            return bad("meta_batch and support sizes must be positive");
        }
        if !(self.inner_lr >= 0.0 && self.outer_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.balanced_query_per_class == 0 || self.query_cap < 2 {
            return bad("query sizes too small");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.focal.gamma >= 0.0) {
            return bad("focal gamma must be >= 0");
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input: usize) -> Vec<usize> {
        std::iter::once(input).chain(self.hidden.iter().copied()).collect()
    }

    /// Outer iterations of each phase.
    pub fn iterations_per_phase(&self) -> [usize; 3] {
        self.episodes_per_phase.map(|e| e.div_ceil(self.meta_batch))
    }
}

fn sample_from(rng: &mut ChaCha8Rng, idx: &[usize], n: usize) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.shuffle(rng);
    v.truncate(n);
    v
}

/// Natural-imbalance query of at most `cap` real points, with at least one
/// of each class present.
fn natural_query(
    rng: &mut ChaCha8Rng,
    normals: &[usize],
    anomalies: &[usize],
    cap: usize,
) -> Option<(Vec<usize>, Vec<usize>)> {
    if normals.is_empty() || anomalies.is_empty() {
        return None;
    }
    let avail = normals.len() + anomalies.len();
    let total = avail.min(cap);
    let frac = anomalies.len() as f64 / avail as f64;
    let n_anom = ((total as f64 * frac).round() as usize).clamp(1, anomalies.len().min(total - 1));
    let n_norm = (total - n_anom).min(normals.len());
    Some((sample_from(rng, normals, n_norm), sample_from(rng, anomalies, n_anom)))
}

struct SupportDraw {
    support: Vec<usize>,
}

fn draw_source_support(src: &SourcePool, cfg: &MetaConfig, rng: &mut ChaCha8Rng) -> Option<SupportDraw> {
    let anom = src.indices(|p| p.label.is_anomaly() && p.support_eligible());
    let norm = src.indices(|p| !p.label.is_anomaly() && p.support_eligible());
    if anom.len() < cfg.support_minority || norm.len() < cfg.support_majority {
        return None;
    }
    let mut support = sample_from(rng, &anom, cfg.support_minority);
    support.extend(sample_from(rng, &norm, cfg.support_majority));
    Some(SupportDraw { support })
}

fn real_remaining(src: &SourcePool, used: &[usize], label: Label) -> Vec<usize> {
    src.indices(|p| p.label == label && !p.is_synthetic())
        .into_iter()
        .filter(|i| !used.contains(i))
        .collect()
}

fn support_feasible(src: &SourcePool, cfg: &MetaConfig) -> bool {
    let anom = src.points.iter().filter(|p| p.label.is_anomaly() && p.support_eligible()).count();
    let norm = src.points.iter().filter(|p| !p.label.is_anomaly() && p.support_eligible()).count();
    anom >= cfg.support_minority && norm >= cfg.support_majority
}

fn has_real_classes(src: &SourcePool, min_each: usize) -> bool {
    let a = src.points.iter().filter(|p| p.label.is_anomaly() && !p.is_synthetic()).count();
    let n = src.points.iter().filter(|p| !p.label.is_anomaly() && !p.is_synthetic()).count();
    a >= min_each && n >= min_each
}

/// Draw one episode of `phase` from `pool`.
pub fn sample_episode(pool: &[SourcePool], phase: Phase, cfg: &MetaConfig, seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feasible: Vec<usize> = (0..pool.len()).filter(|&s| support_feasible(&pool[s], cfg)).collect();
    if feasible.is_empty() {
        return Err(Error::Sampling(format!(
            "no source has {} non-drifted minority and {} majority points for a support set",
            cfg.support_minority, cfg.support_majority
        )));
    }
    let to_refs = |source: usize, idx: Vec<usize>| -> Vec<PointRef> {
        idx.into_iter().map(|index| PointRef { source, index }).collect()
    };
    match phase {
        Phase::Balanced | Phase::Natural => {
            // A single-source episode also needs real query points of each
            // class that are not in the support.
            let min_extra = cfg.support_minority.max(cfg.support_majority) + 1;
            let usable: Vec<usize> = feasible
                .iter()
                .copied()
                .filter(|&s| has_real_classes(&pool[s], 1) && pool[s].points.len() > min_extra)
                .collect();
            let order: Vec<usize> = if usable.is_empty() { feasible.clone() } else { usable };
            let mut candidates = order;
            candidates.shuffle(&mut rng);
            for s in candidates {
                let src = &pool[s];
                let Some(draw) = draw_source_support(src, cfg, &mut rng) else {
                    continue;
                };
                let normals = real_remaining(src, &draw.support, Label::Normal);
                let anomalies = real_remaining(src, &draw.support, Label::Anomaly);
                let query = match phase {
                    Phase::Balanced => {
                        if normals.is_empty() || anomalies.is_empty() {
                            continue;
                        }
                        let k = cfg.balanced_query_per_class;
                        let mut q = sample_from(&mut rng, &normals, k.min(normals.len()));
                        q.extend(sample_from(&mut rng, &anomalies, k.min(anomalies.len())));
                        q
                    }
                    _ => match natural_query(&mut rng, &normals, &anomalies, cfg.query_cap) {
                        Some((mut n, a)) => {
                            n.extend(a);
                            n
                        }
                        None => continue,
                    },
                };
                return Ok(Episode {
                    phase,
                    support: to_refs(s, draw.support),
                    query: to_refs(s, query),
                });
            }
            Err(Error::Sampling(format!(
                "phase {phase}: no source has real query points of both classes left after drawing support"
            )))
        }
        Phase::CrossSource => {
            if pool.len() < 2 {
                return Err(Error::Sampling(
                    "phase 3 needs at least two sources in the pool".into(),
                ));
            }
            let query_ok: Vec<usize> = (0..pool.len()).filter(|&s| has_real_classes(&pool[s], 1)).collect();
            let mut pairs: Vec<(usize, usize)> = feasible
                .iter()
                .flat_map(|&a| query_ok.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
                .collect();
            if pairs.is_empty() {
                return Err(Error::Sampling(
                    "phase 3: no pair of distinct sources with a feasible support and a two-class query".into(),
                ));
            }
            let (a, b) = pairs[rng.random_range(0..pairs.len())];
            pairs.clear();
            let draw = draw_source_support(&pool[a], cfg, &mut rng).expect("feasible source");
            let normals = real_remaining(&pool[b], &[], Label::Normal);
            let anomalies = real_remaining(&pool[b], &[], Label::Anomaly);
            let (mut q, qa) = natural_query(&mut rng, &normals, &anomalies, cfg.query_cap).expect("two-class source");
            q.extend(qa);
            Ok(Episode {
                phase,
                support: to_refs(a, draw.support),
                query: to_refs(b, q),
            })
        }
    }
}

/// Class means in embedding space, indexed by [`Label::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub means: [Vec<f64>; 2],
}

pub fn compute_prototypes(embeddings: ArrayView2<'_, f64>, labels: &[Label]) -> Result<Prototypes> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.nrows(),
            found: labels.len(),
        });
    }
    let mut means = [vec![0.0; embeddings.ncols()], vec![0.0; embeddings.ncols()]];
    let mut counts = [0usize; 2];
    for (row, l) in embeddings.axis_iter(Axis(0)).zip(labels) {
        counts[l.index()] += 1;
        for (m, v) in means[l.index()].iter_mut().zip(row) {
            *m += v;
        }
    }
    for l in [Label::Normal, Label::Anomaly] {
        if counts[l.index()] == 0 {
            return Err(Error::InvalidInput(format!("no support embedding of class {l}")));
        }
        let n = counts[l.index()] as f64;
        means[l.index()].iter_mut().for_each(|m| *m /= n);
    }
    Ok(Prototypes { means })
}

/// `[p(normal), p(anomaly)]` from a softmax over negative squared distances.
pub fn proto_probabilities(e: &[f64], protos: &Prototypes) -> [f64; 2] {
    let p = softmax_neg_sq_dist(e, &[&protos.means[0], &protos.means[1]]);
    [p[0], p[1]]
}

pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn decide(p_anomaly: f64) -> Label {
    if p_anomaly > DECISION_THRESHOLD {
        Label::Anomaly
    } else {
        Label::Normal
    }
}

/// `steps` SGD updates of the leave-one-out prototypical loss on the support.
pub fn inner_adapt(
    theta: &EncoderParams,
    support_x: ArrayView2<'_, f64>,
    support_y: &[Label],
    steps: usize,
    inner_lr: f64,
    focal: &FocalConfig,
) -> Result<EncoderParams> {
    let head = LossHead::LeaveOneOut {
        labels: support_y.to_vec(),
        focal: *focal,
    };
    let mut p = theta.clone();
    for _ in 0..steps {
        if inner_lr == 0.0 {
            break;
        }
        let (_, g) = backward(&p, support_x, &head)?;
        p = sgd_step(&p, &g, inner_lr)?;
    }
    Ok(p)
}

/// Outcome of one task at its adapted parameters.
#[derive(Clone, Debug)]
pub struct TaskResult {
    pub query_loss: f64,
    pub grad: Gradients,
    pub predictions: Vec<Label>,
    pub golds: Vec<Label>,
}

/// Adapt on the support, then differentiate the query loss at the adapted
/// parameters (prototypes are built from the adapted support embeddings).
pub fn task_gradient(theta: &EncoderParams, episode: &Episode, pool: &[SourcePool], cfg: &MetaConfig) -> Result<TaskResult> {
    let (x, y) = episode.batch(pool);
    let ns = episode.support.len();
    let sx = x.slice(ndarray::s![..ns, ..]);
    let adapted = inner_adapt(theta, sx, &y[..ns], cfg.inner_steps, cfg.inner_lr, &cfg.focal)?;
    let head = LossHead::Prototypical {
        labels: y.clone(),
        n_support: ns,
        focal: cfg.focal,
    };
    let (query_loss, grad) = backward(&adapted, x.view(), &head)?;
    let e = adapted.forward_batch(x.view())?;
    let protos = compute_prototypes(e.slice(ndarray::s![..ns, ..]), &y[..ns])?;
    let predictions = (ns..y.len())
        .map(|r| decide(proto_probabilities(e.row(r).as_slice().unwrap(), &protos)[1]))
        .collect();
    Ok(TaskResult {
        query_loss,
        grad,
        predictions,
        golds: y[ns..].to_vec(),
    })
}

/// Mean first-order meta-gradient over `episodes`, reduced in task order.
pub fn meta_gradient(
    theta: &EncoderParams,
    episodes: &[Episode],
    pool: &[SourcePool],
    cfg: &MetaConfig,
) -> Result<(f64, Gradients, Vec<TaskResult>)> {
    if episodes.is_empty() {
        return Err(Error::InvalidInput("empty meta-batch".into()));
    }
    let results: Vec<TaskResult> = episodes
        .par_iter()
        .map(|ep| task_gradient(theta, ep, pool, cfg))
        .collect::<Result<_>>()?;
    let mut sum = theta.zeros_like();
    let mut loss = 0.0;
    for r in &results {
        sum = sum.add(&r.grad);
        loss += r.query_loss;
    }
    let n = results.len() as f64;
    Ok((loss / n, sum.scaled(1.0 / n), results))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub phase: Phase,
    pub mean_query_loss: f64,
    pub mean_query_f1: f64,
}

pub fn write_curve<W: Write>(mut w: W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "iteration,phase,mean_query_loss,mean_query_f1")?;
    for c in curve {
        writeln!(w, "{},{},{},{}", c.iteration, c.phase, c.mean_query_loss, c.mean_query_f1)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MetaTrained {
    pub params: EncoderParams,
    pub curve: Vec<CurvePoint>,
    /// Episodes run per phase.
    pub episode_counts: [usize; 3],
}

fn binary_f1(preds: &[Label], golds: &[Label]) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        match (p.is_anomaly(), g.is_anomaly()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    }
}

/// First-order MAML over the three-phase curriculum.
pub fn meta_train(pool: &[SourcePool], cfg: &MetaConfig, theta0: &EncoderParams, seed: u64) -> Result<MetaTrained> {
    cfg.validate()?;
    let mut theta = theta0.clone();
    let mut adam = AdamState::new(&theta);
    let mut curve = Vec::new();
    let mut counts = [0usize; 3];
    let mut iteration = 0usize;
    let mut episode_no = 0u64;
    for (pi, phase) in Phase::ALL.into_iter().enumerate() {
        let mut remaining = cfg.episodes_per_phase[pi];
        while remaining > 0 {
            let b = remaining.min(cfg.meta_batch);
            let episodes: Vec<Episode> = (0..b)
                .map(|t| sample_episode(pool, phase, cfg, derive_seed_indexed(seed, "episode", episode_no + t as u64)))
                .collect::<Result<_>>()
                .map_err(|e| Error::Sampling(format!("phase {phase}, iteration {iteration}: {e}")))?;
            episode_no += b as u64;
            let (loss, g, tasks) = meta_gradient(&theta, &episodes, pool, cfg)
                .map_err(|e| annotate(e, phase, iteration))?;
            let (next, st) = adam_step(&theta, &g, &adam, cfg.outer_lr)?;
            theta = next;
            adam = st;
            let f1 = tasks.iter().map(|t| binary_f1(&t.predictions, &t.golds)).sum::<f64>() / tasks.len() as f64;
            curve.push(CurvePoint {
                iteration,
                phase,
                mean_query_loss: loss,
                mean_query_f1: f1,
            });
            counts[pi] += b;
            remaining -= b;
            iteration += 1;
        }
    }
    Ok(MetaTrained {
        params: theta,
        curve,
        episode_counts: counts,
    })
}

fn annotate(e: Error, phase: Phase, iteration: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("phase {phase}, iteration {iteration}: {m}")),
        other => other,
    }
}

/// Target-source support chosen from labeled real points.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSupport {
    pub indices: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Draw `n_min` minority and `n_maj` majority points, falling back to all
/// available points of a short class (at least one is required).
pub fn draw_target_support(labels: &[Label], n_min: usize, n_maj: usize, seed: u64) -> Result<TargetSupport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut indices = Vec::new();
    for (label, want) in [(Label::Anomaly, n_min), (Label::Normal, n_maj)] {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.is_empty() {
            return Err(Error::Sampling(format!("target support has no {label} examples")));
        }
        if idx.len() < want {
            warnings.push(format!(
                "target support: only {} {label} example(s) available, wanted {want}",
                idx.len()
            ));
        }
        indices.extend(sample_from(&mut rng, &idx, want));
    }
    Ok(TargetSupport { indices, warnings })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub labels: Vec<Label>,
    pub p_anomaly: Vec<f64>,
}

/// Adapt on the target support and classify the queries against prototypes
/// of the adapted support embeddings.
pub fn adapt_and_predict(
    theta: &EncoderParams,
    support_x: ArrayView2<'_, f64>,
    support_y: &[Label],
    query_x: ArrayView2<'_, f64>,
    cfg: &MetaConfig,
) -> Result<Predictions> {
    let adapted = inner_adapt(theta, support_x, support_y, cfg.inner_steps, cfg.inner_lr, &cfg.focal)?;
    let protos = compute_prototypes(adapted.forward_batch(support_x)?.view(), support_y)?;
    if query_x.nrows() == 0 {
        return Ok(Predictions {
            labels: vec![],
            p_anomaly: vec![],
        });
    }
    let e = adapted.forward_batch(query_x)?;
    let p_anomaly: Vec<f64> = e
        .axis_iter(Axis(0))
        .map(|r| proto_probabilities(&r.to_vec(), &protos)[1])
        .collect();
    Ok(Predictions {
        labels: p_anomaly.iter().map(|&p| decide(p)).collect(),
        p_anomaly,
    })
}

/// No-adaptation baseline: nearest class mean in feature space.
pub fn nearest_prototype_baseline(
    support_x: ArrayView2<'_, f64>,
    support_y: &[Label],
    query_x: ArrayView2<'_, f64>,
) -> Result<Predictions> {
    let protos = compute_prototypes(support_x, support_y)?;
    let p_anomaly: Vec<f64> = query_x
        .axis_iter(Axis(0))
        .map(|r| proto_probabilities(&r.to_vec(), &protos)[1])
        .collect();
    Ok(Predictions {
        labels: p_anomaly.iter().map(|&p| decide(p)).collect(),
        p_anomaly,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Two well-separated Gaussian-ish clusters per source.
    pub(crate) fn toy_pool(sources: usize, n_norm: usize, n_anom: usize, d: usize, seed: u64) -> Vec<SourcePool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next_id = 0u64;
        (0..sources)
            .map(|s| {
                let mut points = Vec::new();
                for (label, n, center) in [(Label::Normal, n_norm, -1.0), (Label::Anomaly, n_anom, 1.0)] {
                    for _ in 0..n {
                        let x = (0..d)
                            .map(|j| {
                                let c = if j == 0 { center } else { 0.0 };
                                c + 0.3 * rng.random_range(-1.0..1.0) + if j == 1 { s as f64 * 0.5 } else { 0.0 }
                            })
                            .collect();
                        points.push(PoolPoint {
                            x,
                            label,
                            record_id: Some(next_id),
                            drift: false,
                        });
                        next_id += 1;
                    }
                }
                SourcePool {
                    source_id: format!("s{s}"),
                    points,
                }
            })
            .collect()
    }

    fn small_cfg() -> MetaConfig {
        MetaConfig {
            episodes_per_phase: [8, 8, 8],
            hidden: vec![4, 3],
            ..MetaConfig::default()
        }
    }

    #[test]
    fn phase_shapes() {
        let pool = toy_pool(3, 60, 25, 4, 1);
        let cfg = small_cfg();
        let ep = sample_episode(&pool, Phase::Balanced, &cfg, 3).unwrap();
        assert_eq!(ep.support.len(), 10);
        let labels: Vec<Label> = ep.support.iter().map(|r| pool[r.source].points[r.index].label).collect();
        assert_eq!(labels.iter().filter(|l| l.is_anomaly()).count(), 5);
        assert_eq!(ep.query.len(), 30);
        for r in &ep.query {
            assert!(!ep.support.contains(r));
        }

        let ep = sample_episode(&pool, Phase::Natural, &cfg, 4).unwrap();
        assert!(ep.query.len() <= 50);
        assert!(ep.query.iter().any(|r| pool[r.source].points[r.index].label.is_anomaly()));

        for seed in 0..20 {
            let ep = sample_episode(&pool, Phase::CrossSource, &cfg, seed).unwrap();
            assert!(ep.query.iter().all(|r| r.source != ep.support_source()));
        }
        assert_eq!(
            sample_episode(&pool, Phase::Natural, &cfg, 4).unwrap(),
            sample_episode(&pool, Phase::Natural, &cfg, 4).unwrap()
        );
    }

    #[test]
    fn infeasible_pools() {
        let cfg = small_cfg();
        let pool = toy_pool(1, 60, 25, 4, 1);
        assert!(sample_episode(&pool, Phase::CrossSource, &cfg, 0).is_err());
        let pool = toy_pool(2, 60, 3, 4, 1);
        let err = sample_episode(&pool, Phase::Balanced, &cfg, 0).unwrap_err().to_string();
        assert!(err.contains("minority"), "{err}");
    }

    #[test]
    fn synthetic_and_drifted_points_stay_out_of_place() {
        let mut pool = toy_pool(2, 40, 12, 3, 2);
        for src in &mut pool {
            for p in src.points.iter_mut().filter(|p| p.label.is_anomaly()).take(6) {
                p.record_id = None;
            }
            for p in src.points.iter_mut().filter(|p| !p.label.is_anomaly()).take(10) {
                p.drift = true;
            }
        }
        let cfg = small_cfg();
        for seed in 0..30 {
            for phase in Phase::ALL {
                let ep = sample_episode(&pool, phase, &cfg, seed).unwrap();
                assert!(ep.query.iter().all(|r| !pool[r.source].points[r.index].is_synthetic()));
                assert!(ep.support.iter().all(|r| !pool[r.source].points[r.index].drift));
            }
        }
    }

    #[test]
    fn prototype_examples() {
        let e = array![[0.0, 0.0], [2.0, 2.0], [5.0, 1.0]];
        let y = [Label::Normal, Label::Normal, Label::Anomaly];
        let p = compute_prototypes(e.view(), &y).unwrap();
        assert_eq!(p.means[0], vec![1.0, 1.0]);
        assert_eq!(p.means[1], vec![5.0, 1.0]);
        let e2 = array![[5.0, 1.0], [2.0, 2.0], [0.0, 0.0]];
        let y2 = [Label::Anomaly, Label::Normal, Label::Normal];
        assert_eq!(compute_prototypes(e2.view(), &y2).unwrap(), p);
        assert!(compute_prototypes(e.view(), &[Label::Normal; 3]).is_err());

        let protos = Prototypes {
            means: [vec![0.0], vec![2.0]],
        };
        let pr = proto_probabilities(&[0.5], &protos);
        assert!((pr[0] - 0.8808).abs() < 1e-4);
        assert_eq!(proto_probabilities(&[1.0], &protos), [0.5, 0.5]);
        assert!(proto_probabilities(&[2.0], &protos)[1] > 0.5);
    }

    #[test]
    fn inner_adapt_trivial_cases_and_descent() {
        let pool = toy_pool(1, 20, 20, 3, 5);
        let cfg = small_cfg();
        let theta = EncoderParams::he_uniform(&cfg.layer_sizes(3), 9).unwrap();
        let ep = sample_episode(&pool, Phase::Balanced, &cfg, 1).unwrap();
        let (x, y) = ep.batch(&pool);
        let sx = x.slice(ndarray::s![..10, ..]);
        assert_eq!(inner_adapt(&theta, sx, &y[..10], 0, 0.01, &cfg.focal).unwrap(), theta);
        assert_eq!(inner_adapt(&theta, sx, &y[..10], 5, 0.0, &cfg.focal).unwrap(), theta);
        let head = LossHead::LeaveOneOut {
            labels: y[..10].to_vec(),
            focal: cfg.focal,
        };
        let before = crate::neural_core::loss(&theta, sx, &head).unwrap();
        let adapted = inner_adapt(&theta, sx, &y[..10], 5, 0.01, &cfg.focal).unwrap();
        let after = crate::neural_core::loss(&adapted, sx, &head).unwrap();
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn meta_train_is_deterministic_and_covers_phases() {
        let pool = toy_pool(3, 40, 15, 4, 7);
        let cfg = small_cfg();
        let theta = EncoderParams::he_uniform(&cfg.layer_sizes(4), 1).unwrap();
        let a = meta_train(&pool, &cfg, &theta, 11).unwrap();
        let b = meta_train(&pool, &cfg, &theta, 11).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.episode_counts, [8, 8, 8]);
        let phases: Vec<Phase> = a.curve.iter().map(|c| c.phase).collect();
        let mut sorted = phases.clone();
        sorted.sort();
        assert_eq!(phases, sorted);
        assert_ne!(a.params, theta);
    }

    #[test]
    fn single_task_without_inner_steps_is_plain_gradient_step() {
        let pool = toy_pool(2, 30, 12, 3, 3);
        let cfg = MetaConfig {
            inner_steps: 0,
            meta_batch: 1,
            ..small_cfg()
        };
        let theta = EncoderParams::he_uniform(&cfg.layer_sizes(3), 2).unwrap();
        let ep = sample_episode(&pool, Phase::Balanced, &cfg, 5).unwrap();
        let (_, g, _) = meta_gradient(&theta, std::slice::from_ref(&ep), &pool, &cfg).unwrap();
        let (x, y) = ep.batch(&pool);
        let head = LossHead::Prototypical {
            labels: y,
            n_support: ep.support.len(),
            focal: cfg.focal,
        };
        let (_, direct) = backward(&theta, x.view(), &head).unwrap();
        assert_eq!(g, direct);
    }

    #[test]
    fn prediction_cases() {
        let cfg = MetaConfig {
            inner_lr: 0.0,
            ..small_cfg()
        };
        let mut id = EncoderParams::zeros(&[2, 2]).unwrap();
        id.layers[0].weight = Array2::eye(2);
        let sx = array![[0.0, 0.0], [0.2, 0.1], [3.0, 3.0], [3.1, 2.9]];
        let sy = [Label::Normal, Label::Normal, Label::Anomaly, Label::Anomaly];
        let qx = array![[3.0, 3.0], [0.1, 0.0], [1.4, 1.4], [1.6, 1.6]];
        let p = adapt_and_predict(&id, sx.view(), &sy, qx.view(), &cfg).unwrap();
        let b = nearest_prototype_baseline(sx.view(), &sy, qx.view()).unwrap();
        assert_eq!(p.labels, b.labels);
        assert_eq!(p.labels, vec![Label::Anomaly, Label::Normal, Label::Normal, Label::Anomaly]);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(adapt_and_predict(&id, sx.view(), &sy, empty.view(), &cfg).unwrap().labels.is_empty());
    }

    #[test]
    fn target_support_fallback() {
        let mut y = vec![Label::Normal; 30];
        y[3] = Label::Anomaly;
        y[7] = Label::Anomaly;
        let s = draw_target_support(&y, 5, 5, 1).unwrap();
        assert_eq!(s.indices.len(), 7);
        assert_eq!(s.warnings.len(), 1);
        assert!(draw_target_support(&[Label::Normal; 4], 5, 5, 1).is_err());
    }
}
