//! Stage glue shared by the LOSO driver and the command-line stages.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::balance::balance_training_set;
use crate::config::RunConfig;
use crate::feature_select::{fit_selection, FeatureScores, SelectionMask};
use crate::embedding::{
    assemble, load_external_embeddings, EmbedderState, ExternalEmbedder, FeatureVector, SemanticEmbedder,
};
use crate::error::{Error, Result};
use crate::hashing::{derive_seed, derive_seed_indexed};
use crate::ingest::{load_corpus, split_train_test, CorpusManifest, Label, LoadReport, LogRecord, RecordSet, Split};
use crate::label_transfer::{build_knowledge_base, transfer_labels, TransferResult};
use crate::meta_learner::{
    adapt_and_predict, draw_target_support, meta_train, nearest_prototype_baseline, MetaTrained, PoolPoint,
    Predictions, SourcePool,
};
use crate::neural_core::EncoderParams;
use crate::template_miner::{structural_features, LogTemplate, TemplateMiner};

/// Loaded, split and template-mined corpus.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub records: RecordSet,
    pub split: Split,
    pub load_report: LoadReport,
    pub miner: TemplateMiner,
    /// record id → template id.
    pub template_of: HashMap<u64, u64>,
}

impl Prepared {
    pub fn source_ids(&self) -> Vec<String> {
        self.records.source_ids().map(str::to_string).collect()
    }

    pub fn template_for(&self, r: &LogRecord) -> Result<&LogTemplate> {
        self.template_of
            .get(&r.record_id)
            .and_then(|t| self.miner.template(*t))
            .ok_or_else(|| Error::InvalidInput(format!("record {} has no template", r.record_id)))
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let manifest = CorpusManifest::load(&cfg.manifest)?;
    let (records, load_report) = load_corpus(&manifest)?;
    prepare_records(records, load_report, cfg)
}

/// Split, then mine templates per source over every record in id order.
pub fn prepare_records(records: RecordSet, load_report: LoadReport, cfg: &RunConfig) -> Result<Prepared> {
    if records.is_empty() {
        return Err(Error::InvalidInput("corpus has no records".into()));
    }
    let split = split_train_test(&records, cfg.split_ratio, cfg.stage_seed("split"))?;
    let ids: Vec<String> = records.source_ids().map(str::to_string).collect();
    let mut miner = TemplateMiner::new(cfg.miner, &ids)?;
    let assigned = miner.mine(records.records.iter())?;
    let template_of = records
        .records
        .iter()
        .zip(assigned)
        .map(|(r, t)| (r.record_id, t))
        .collect();
    Ok(Prepared {
        records,
        split,
        load_report,
        miner,
        template_of,
    })
}

/// Built-in or external semantic embedder.
#[derive(Debug)]
pub enum FoldEmbedder {
    Builtin(EmbedderState),
    External(ExternalEmbedder),
}

impl SemanticEmbedder for FoldEmbedder {
    fn dim(&self) -> usize {
        match self {
            FoldEmbedder::Builtin(e) => e.dim(),
            FoldEmbedder::External(e) => e.dim(),
        }
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        match self {
            FoldEmbedder::Builtin(e) => e.embed(text),
            FoldEmbedder::External(e) => e.embed(text),
        }
    }
}

impl FoldEmbedder {
    pub fn state(&self) -> &EmbedderState {
        match self {
            FoldEmbedder::Builtin(e) => e,
            FoldEmbedder::External(e) => e.fallback(),
        }
    }
}

/// Fit the idf table on `records` and attach external vectors if
/// configured.
pub fn fit_fold_embedder(records: &[&LogRecord], cfg: &RunConfig, seed: u64) -> Result<FoldEmbedder> {
    let state = EmbedderState::fit(
        records.iter().map(|r| r.message.as_str()),
        cfg.embedding.dim,
        cfg.embedding.char_ngram,
        seed,
    )?;
    match &cfg.embedding.external {
        None => Ok(FoldEmbedder::Builtin(state)),
        Some(path) => {
            let (table, skipped) = load_external_embeddings(path, cfg.embedding.dim)?;
            if skipped > 0 {
                log::warn!("{}: {skipped} malformed embedding row(s) skipped", path.display());
            }
            Ok(FoldEmbedder::External(ExternalEmbedder::new(table, state)?))
        }
    }
}

/// Training labels for a set of records.
#[derive(Clone, Debug, Default)]
pub struct ResolvedLabels {
    /// record id → (label, drift flag).
    pub labels: HashMap<u64, (Label, bool)>,
    pub transfer: Vec<TransferResult>,
    /// Records labeled by their template's gold majority rather than gold.
    pub inherited: usize,
}

/// Gold labels where present. Unlabeled records take the gold majority of
/// their template (ties count as anomaly); templates without any gold label
/// are labeled by transfer from the templates that have one.
pub fn resolve_labels(
    records: &[&LogRecord],
    prepared: &Prepared,
    embedder: &dyn SemanticEmbedder,
    tau: f64,
) -> Result<ResolvedLabels> {
    let mut votes: BTreeMap<u64, [usize; 2]> = BTreeMap::new();
    for r in records {
        let t = prepared.template_of[&r.record_id];
        let v = votes.entry(t).or_default();
        if let Some(l) = r.gold_label {
            v[l.index()] += 1;
        }
    }
    let template_label = |v: &[usize; 2]| -> Option<Label> {
        match v {
            [0, 0] => None,
            [n, a] if a >= n => Some(Label::Anomaly),
            _ => Some(Label::Normal),
        }
    };
    let labeled: Vec<(LogTemplate, Label)> = votes
        .iter()
        .filter_map(|(t, v)| template_label(v).map(|l| (prepared.miner.template(*t).unwrap().clone(), l)))
        .collect();
    let unlabeled: Vec<LogTemplate> = votes
        .iter()
        .filter(|(_, v)| template_label(v).is_none())
        .map(|(t, _)| prepared.miner.template(*t).unwrap().clone())
        .collect();
    if labeled.is_empty() {
        return Err(Error::InvalidInput("no labeled records to train on".into()));
    }
    let transfer = if unlabeled.is_empty() {
        Vec::new()
    } else {
        let kb = build_knowledge_base(&labeled, embedder)?;
        transfer_labels(&unlabeled, &kb, tau, embedder)?
    };
    let transferred: HashMap<u64, (Label, bool)> =
        transfer.iter().map(|t| (t.template_id, t.record_label())).collect();
    let mut out = ResolvedLabels {
        transfer,
        ..Default::default()
    };
    for r in records {
        let t = prepared.template_of[&r.record_id];
        let l = match r.gold_label {
            Some(l) => (l, false),
            None => match template_label(&votes[&t]) {
                Some(l) => {
                    out.inherited += 1;
                    (l, false)
                }
                None => transferred[&t],
            },
        };
        out.labels.insert(r.record_id, l);
    }
    Ok(out)
}

/// Feature vectors in input order. `labels` supplies (label, drift) per
/// record; records missing from it use their gold label or Normal.
pub fn featurize(
    records: &[&LogRecord],
    prepared: &Prepared,
    embedder: &dyn SemanticEmbedder,
    labels: &HashMap<u64, (Label, bool)>,
) -> Result<Vec<FeatureVector>> {
    let dim = embedder.dim();
    records
        .par_iter()
        .map(|r| {
            let template = prepared.template_for(r)?;
            let tree = prepared.miner.tree_for_template(template.template_id).expect("template has a tree");
            let structural = structural_features(r, template, tree);
            let semantic = embedder.embed(&r.message);
            let (label, drift) = labels
                .get(&r.record_id)
                .copied()
                .unwrap_or((r.gold_label.unwrap_or(Label::Normal), false));
            assemble(r, &semantic, &structural, dim, label, drift)
        })
        .collect()
}

pub fn to_matrix(rows: &[FeatureVector]) -> Array2<f64> {
    let d = rows.first().map(|r| r.values.len()).unwrap_or(0);
    let mut x = Array2::zeros((rows.len(), d));
    for (mut row, r) in x.axis_iter_mut(Axis(0)).zip(rows) {
        row.assign(&ndarray::ArrayView1::from(&r.values[..]));
    }
    x
}

/// Per-source meta-training pools: selected features, SMOTE applied to each
/// source separately. A source whose minority class is too small for SMOTE
/// keeps its real points only.
pub fn build_pools(
    rows: &[FeatureVector],
    projected: &Array2<f64>,
    source_order: &[String],
    smote_k: usize,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<Vec<SourcePool>> {
    let mut pools = Vec::new();
    for (si, source) in source_order.iter().enumerate() {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| &rows[i].source_id == source).collect();
        if idx.is_empty() {
            continue;
        }
        let mut points: Vec<PoolPoint> = idx
            .iter()
            .map(|&i| PoolPoint {
                x: projected.row(i).to_vec(),
                label: rows[i].label,
                record_id: Some(rows[i].record_id),
                drift: rows[i].drift_flag,
            })
            .collect();
        let x = projected.select(Axis(0), &idx);
        let y: Vec<Label> = idx.iter().map(|&i| rows[i].label).collect();
        match balance_training_set(x.view(), &y, smote_k, derive_seed_indexed(seed, "smote", si as u64)) {
            Ok(b) => {
                let n = idx.len();
                for (row, &label) in b.x.axis_iter(Axis(0)).skip(n).zip(&b.y[n..]) {
                    points.push(PoolPoint {
                        x: row.to_vec(),
                        label,
                        record_id: None,
                        drift: false,
                    });
                }
            }
            Err(e) => warnings.push(format!("source {source}: balancing skipped: {e}")),
        }
        pools.push(SourcePool {
            source_id: source.clone(),
            points,
        });
    }
    Ok(pools)
}

/// Seed for `stage` of the fold holding out `source`.
pub fn fold_seed(global: u64, source: &str, stage: &str) -> u64 {
    derive_seed(derive_seed(global, &format!("fold:{source}")), stage)
}

/// Which sources a run learns from and which one (if any) it adapts to.
/// Without a held-out source every source is in the pool and seeds come
/// straight from the global seed.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub target: Option<String>,
    pub pool_sources: Vec<String>,
    global_seed: u64,
}

impl FoldPlan {
    pub fn new(prepared: &Prepared, cfg: &RunConfig, target: Option<&str>) -> Result<Self> {
        Self::from_sources(prepared.source_ids(), cfg, target)
    }

    /// Plan over the sources of a corpus in manifest order.
    pub fn from_sources(sources: Vec<String>, cfg: &RunConfig, target: Option<&str>) -> Result<Self> {
        if let Some(t) = target {
            if !sources.iter().any(|s| s == t) {
                return Err(Error::InvalidInput(format!("unknown source {t}")));
            }
            if sources.len() < 2 {
                return Err(Error::InvalidInput(
                    "leave-one-source-out needs at least 2 sources".into(),
                ));
            }
        }
        Ok(FoldPlan {
            target: target.map(str::to_string),
            pool_sources: sources.into_iter().filter(|s| Some(s.as_str()) != target).collect(),
            global_seed: cfg.seed,
        })
    }

    pub fn seed(&self, stage: &str) -> u64 {
        match &self.target {
            Some(t) => fold_seed(self.global_seed, t, stage),
            None => derive_seed(self.global_seed, stage),
        }
    }

    /// Training-partition records of the pool sources.
    pub fn pool_records<'a>(&self, prepared: &'a Prepared) -> Vec<&'a LogRecord> {
        prepared
            .split
            .train
            .records
            .iter()
            .filter(|r| self.pool_sources.contains(&r.source_id))
            .collect()
    }

    /// Gold-labeled records of the held-out source: its training partition
    /// (adaptation pool) or its test partition (scored queries).
    pub fn target_records<'a>(&self, prepared: &'a Prepared, test: bool) -> Vec<&'a LogRecord> {
        let Some(t) = &self.target else { return Vec::new() };
        let part = if test { &prepared.split.test } else { &prepared.split.train };
        part.records
            .iter()
            .filter(|r| &r.source_id == t && r.gold_label.is_some())
            .collect()
    }
}

/// Fitted embedder and resolved labels of a plan's pool.
pub struct PoolLabels<'a> {
    pub records: Vec<&'a LogRecord>,
    pub embedder: FoldEmbedder,
    pub resolved: ResolvedLabels,
}

pub fn label_pool<'a>(prepared: &'a Prepared, cfg: &RunConfig, plan: &FoldPlan) -> Result<PoolLabels<'a>> {
    let records = plan.pool_records(prepared);
    if records.is_empty() {
        return Err(Error::InvalidInput("empty training pool".into()));
    }
    let embedder = fit_fold_embedder(&records, cfg, plan.seed("embed"))?;
    let resolved = resolve_labels(&records, prepared, &embedder, cfg.transfer.tau)?;
    Ok(PoolLabels {
        records,
        embedder,
        resolved,
    })
}

pub fn select_features(rows: &[FeatureVector], cfg: &RunConfig, plan: &FoldPlan) -> Result<(FeatureScores, SelectionMask)> {
    let x = to_matrix(rows);
    let y: Vec<Label> = rows.iter().map(|r| r.label).collect();
    fit_selection(x.view(), &y, &cfg.select, plan.seed("select"))
}

/// Project the pool onto the selection and balance each source.
pub fn balance_pool(
    rows: &[FeatureVector],
    mask: &SelectionMask,
    cfg: &RunConfig,
    plan: &FoldPlan,
    warnings: &mut Vec<String>,
) -> Result<Vec<SourcePool>> {
    let projected = to_matrix(rows).select(Axis(1), &mask.indices);
    build_pools(rows, &projected, &plan.pool_sources, cfg.balance.smote_k, plan.seed("smote"), warnings)
}

pub fn train_encoder(pools: &[SourcePool], cfg: &RunConfig, plan: &FoldPlan) -> Result<MetaTrained> {
    let input = pools
        .iter()
        .flat_map(|p| &p.points)
        .map(|p| p.x.len())
        .next()
        .ok_or_else(|| Error::InvalidInput("empty meta-training pool".into()))?;
    let meta = cfg.meta_config();
    let theta0 = EncoderParams::he_uniform(&meta.layer_sizes(input), plan.seed("init"))?;
    meta_train(pools, &meta, &theta0, plan.seed("meta"))
}

/// Adapted and baseline predictions for the held-out source.
#[derive(Clone, Debug)]
pub struct TargetScores {
    pub support_record_ids: Vec<u64>,
    pub query_record_ids: Vec<u64>,
    pub golds: Vec<Label>,
    pub predictions: Predictions,
    pub baseline: Predictions,
    pub warnings: Vec<String>,
}

/// Draw the support from `train_rows`, adapt, and score `test_rows`.
pub fn score_target(
    params: &EncoderParams,
    mask: &SelectionMask,
    train_rows: &[FeatureVector],
    test_rows: &[FeatureVector],
    cfg: &RunConfig,
    plan: &FoldPlan,
) -> Result<TargetScores> {
    let meta = cfg.meta_config();
    let train_y: Vec<Label> = train_rows.iter().map(|r| r.label).collect();
    let support = draw_target_support(&train_y, meta.support_minority, meta.support_majority, plan.seed("support"))?;
    let support_x = to_matrix(train_rows)
        .select(Axis(1), &mask.indices)
        .select(Axis(0), &support.indices);
    let support_y: Vec<Label> = support.indices.iter().map(|&i| train_y[i]).collect();
    let query_x = project(test_rows, mask);
    let predictions = adapt_and_predict(params, support_x.view(), &support_y, query_x.view(), &meta)?;
    let baseline = nearest_prototype_baseline(support_x.view(), &support_y, query_x.view())?;
    Ok(TargetScores {
        support_record_ids: support.indices.iter().map(|&i| train_rows[i].record_id).collect(),
        query_record_ids: test_rows.iter().map(|r| r.record_id).collect(),
        golds: test_rows.iter().map(|r| r.label).collect(),
        predictions,
        baseline,
        warnings: support.warnings,
    })
}

/// Rows restricted to the selected columns.
pub fn project(rows: &[FeatureVector], mask: &SelectionMask) -> Array2<f64> {
    if rows.is_empty() {
        return Array2::zeros((0, mask.k()));
    }
    to_matrix(rows).select(Axis(1), &mask.indices)
}
