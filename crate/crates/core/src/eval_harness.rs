//! Leave-one-source-out evaluation, metrics and reports.
//!
//! Each fold holds out one source. Everything learned — idf table, label
//! transfer, feature selection, SMOTE, meta-training — is fitted on the
//! training partitions of the other sources only. The held-out source
//! contributes a small labeled adaptation support from its training
//! partition, and its test partition is scored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::feature_select::SelectionMask;
use crate::ingest::Label;
use crate::meta_learner::{write_curve, CurvePoint};
use crate::neural_core::EncoderParams;
use crate::pipeline::{
    balance_pool, featurize, fold_seed, label_pool, score_target, select_features, train_encoder, FoldPlan, Prepared,
};

/// Anomaly is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(preds: &[Label], golds: &[Label]) -> Result<Confusion> {
    if preds.len() != golds.len() {
        return Err(Error::DimensionMismatch {
            expected: golds.len(),
            found: preds.len(),
        });
    }
    let mut c = Confusion::default();
    for (p, g) in preds.iter().zip(golds) {
        match (p.is_anomaly(), g.is_anomaly()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Precision, recall and their harmonic mean; 0 for empty denominators.
pub fn prf(c: &Confusion) -> Prf {
    let precision = safe_div(c.tp as f64, (c.tp + c.fp) as f64);
    let recall = safe_div(c.tp as f64, (c.tp + c.fn_) as f64);
    Prf {
        precision,
        recall,
        f1: safe_div(2.0 * precision * recall, precision + recall),
    }
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum FoldStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SourceRow {
    pub source_id: String,
    pub status: FoldStatus,
    pub n_support: usize,
    pub n_queries: usize,
    pub confusion: Confusion,
    pub metrics: Prf,
    /// Nearest class mean in selected-feature space, same support and queries.
    pub baseline: Prf,
    pub support_warning: bool,
}

impl SourceRow {
    /// Row of a completed fold, scored from raw predictions.
    pub fn scored(
        source_id: &str,
        n_support: usize,
        predictions: &[Label],
        baseline: &[Label],
        golds: &[Label],
        support_warning: bool,
    ) -> Result<Self> {
        let c = confusion(predictions, golds)?;
        let b = confusion(baseline, golds)?;
        Ok(SourceRow {
            source_id: source_id.to_string(),
            status: FoldStatus::Ok,
            n_support,
            n_queries: golds.len(),
            confusion: c,
            metrics: prf(&c),
            baseline: prf(&b),
            support_warning,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LosoReport {
    pub rows: Vec<SourceRow>,
    /// Over successful folds.
    pub mean_f1: f64,
    pub std_f1: f64,
    pub baseline_mean_f1: f64,
    pub baseline_std_f1: f64,
    pub config_digest: String,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl LosoReport {
    pub fn failed_folds(&self) -> usize {
        self.rows.iter().filter(|r| r.status != FoldStatus::Ok).count()
    }

    pub fn from_rows(rows: Vec<SourceRow>, config_digest: String, seed: u64, warnings: Vec<String>) -> Self {
        let ok: Vec<&SourceRow> = rows.iter().filter(|r| r.status == FoldStatus::Ok).collect();
        let (mean_f1, std_f1) = mean_std(&ok.iter().map(|r| r.metrics.f1).collect::<Vec<_>>());
        let (baseline_mean_f1, baseline_std_f1) = mean_std(&ok.iter().map(|r| r.baseline.f1).collect::<Vec<_>>());
        LosoReport {
            rows,
            mean_f1,
            std_f1,
            baseline_mean_f1,
            baseline_std_f1,
            config_digest,
            seed,
            warnings,
        }
    }
}

/// Everything a fold saw and produced, for leakage and metric audits.
#[derive(Clone, Debug)]
pub struct FoldAudit {
    pub source_id: String,
    /// Record ids of every real point in the meta-training pool.
    pub pool_record_ids: Vec<u64>,
    pub support_record_ids: Vec<u64>,
    pub query_record_ids: Vec<u64>,
    pub predictions: Vec<Label>,
    pub p_anomaly: Vec<f64>,
    pub golds: Vec<Label>,
    pub baseline_predictions: Vec<Label>,
    pub curve: Vec<CurvePoint>,
    pub episode_counts: [usize; 3],
    pub selection: SelectionMask,
    pub params: EncoderParams,
    pub synthetic_points: usize,
    pub transferred_templates: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct LosoOutcome {
    pub report: LosoReport,
    /// One entry per report row; `None` for failed folds.
    pub audits: Vec<Option<FoldAudit>>,
}

/// Train on every source but `target`, then adapt to and score `target`.
pub fn run_fold(prepared: &Prepared, cfg: &RunConfig, target: &str) -> Result<FoldAudit> {
    let plan = FoldPlan::new(prepared, cfg, Some(target))?;
    let mut warnings = Vec::new();

    let pool = label_pool(prepared, cfg, &plan)?;
    let pool_rows = featurize(&pool.records, prepared, &pool.embedder, &pool.resolved.labels)?;
    let (_, mask) = select_features(&pool_rows, cfg, &plan)?;
    let pools = balance_pool(&pool_rows, &mask, cfg, &plan, &mut warnings)?;
    let synthetic_points = pools.iter().flat_map(|p| &p.points).filter(|p| p.is_synthetic()).count();
    let trained = train_encoder(&pools, cfg, &plan)?;

    let no_labels = Default::default();
    let train_rows = featurize(&plan.target_records(prepared, false), prepared, &pool.embedder, &no_labels)?;
    let test_rows = featurize(&plan.target_records(prepared, true), prepared, &pool.embedder, &no_labels)?;
    let scores = score_target(&trained.params, &mask, &train_rows, &test_rows, cfg, &plan)?;
    warnings.extend(scores.warnings);

    Ok(FoldAudit {
        source_id: target.to_string(),
        pool_record_ids: pool_rows.iter().map(|r| r.record_id).collect(),
        support_record_ids: scores.support_record_ids,
        query_record_ids: scores.query_record_ids,
        predictions: scores.predictions.labels,
        p_anomaly: scores.predictions.p_anomaly,
        golds: scores.golds,
        baseline_predictions: scores.baseline.labels,
        curve: trained.curve,
        episode_counts: trained.episode_counts,
        selection: mask,
        params: trained.params,
        synthetic_points,
        transferred_templates: pool.resolved.transfer.len(),
        warnings,
    })
}

fn row_from_audit(a: &FoldAudit) -> Result<SourceRow> {
    SourceRow::scored(
        &a.source_id,
        a.support_record_ids.len(),
        &a.predictions,
        &a.baseline_predictions,
        &a.golds,
        a.warnings.iter().any(|w| w.starts_with("target support")),
    )
}

/// Run every fold (in parallel) and assemble the report in source order.
pub fn run_loso(prepared: &Prepared, cfg: &RunConfig) -> Result<LosoOutcome> {
    let sources = prepared.source_ids();
    if sources.len() < 2 {
        return Err(Error::InvalidInput("leave-one-source-out needs at least 2 sources".into()));
    }
    let results: Vec<Result<FoldAudit>> = sources.par_iter().map(|s| run_fold(prepared, cfg, s)).collect();
    let mut rows = Vec::new();
    let mut audits = Vec::new();
    let mut warnings: Vec<String> = prepared.load_report.warnings.clone();
    warnings.extend(prepared.split.warnings.iter().cloned());
    for (s, r) in sources.iter().zip(results) {
        match r.and_then(|a| row_from_audit(&a).map(|row| (row, a))) {
            Ok((row, a)) => {
                warnings.extend(a.warnings.iter().map(|w| format!("fold {s}: {w}")));
                rows.push(row);
                audits.push(Some(a));
            }
            Err(e) => {
                log::error!("fold {s} failed: {e}");
                warnings.push(format!("fold {s}: failed: {e}"));
                rows.push(SourceRow {
                    source_id: s.clone(),
                    status: FoldStatus::Failed(e.to_string()),
                    n_support: 0,
                    n_queries: 0,
                    confusion: Confusion::default(),
                    metrics: Prf::default(),
                    baseline: Prf::default(),
                    support_warning: false,
                });
                audits.push(None);
            }
        }
    }
    Ok(LosoOutcome {
        report: LosoReport::from_rows(rows, cfg.digest(), cfg.seed, warnings),
        audits,
    })
}

/// Fixed-width table for the terminal.
pub fn render_table(r: &LosoReport) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<16} {:<7} {:>7} {:>9} {:>9} {:>9} {:>11}  {}",
        "source", "status", "queries", "precision", "recall", "f1", "baseline_f1", "warning"
    )
    .unwrap();
    for row in &r.rows {
        let status = match &row.status {
            FoldStatus::Ok => "ok",
            FoldStatus::Failed(_) => "FAILED",
        };
        writeln!(
            s,
            "{:<16} {:<7} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>11.4}  {}",
            row.source_id,
            status,
            row.n_queries,
            row.metrics.precision,
            row.metrics.recall,
            row.metrics.f1,
            row.baseline.f1,
            if row.support_warning { "support" } else { "" }
        )
        .unwrap();
    }
    writeln!(
        s,
        "mean f1 {:.4} ± {:.4} (baseline {:.4} ± {:.4}), {} fold(s) failed",
        r.mean_f1,
        r.std_f1,
        r.baseline_mean_f1,
        r.baseline_std_f1,
        r.failed_folds()
    )
    .unwrap();
    s
}

/// One row per source plus a `summary` row carrying mean and std.
pub fn render_csv(r: &LosoReport) -> String {
    let mut s = String::from(
        "source_id,status,n_support,n_queries,tp,fp,tn,fn,precision,recall,f1,\
         baseline_precision,baseline_recall,baseline_f1,support_warning,std_f1,baseline_std_f1\n",
    );
    for row in &r.rows {
        let status = match &row.status {
            FoldStatus::Ok => "ok",
            FoldStatus::Failed(_) => "failed",
        };
        let c = row.confusion;
        writeln!(
            s,
            "{},{status},{},{},{},{},{},{},{},{},{},{},{},{},{},,",
            row.source_id,
            row.n_support,
            row.n_queries,
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            row.metrics.precision,
            row.metrics.recall,
            row.metrics.f1,
            row.baseline.precision,
            row.baseline.recall,
            row.baseline.f1,
            u8::from(row.support_warning)
        )
        .unwrap();
    }
    writeln!(
        s,
        "summary,{},,,,,,,,,{},,,{},,{},{}",
        if r.failed_folds() == 0 { "ok" } else { "failed" },
        r.mean_f1,
        r.baseline_mean_f1,
        r.std_f1,
        r.baseline_std_f1
    )
    .unwrap();
    s
}

#[derive(Serialize)]
struct FoldMeta<'a> {
    status: &'a FoldStatus,
    fold_seed: u64,
    episodes_per_phase: [usize; 3],
    selected_features: usize,
    synthetic_points: usize,
    transferred_templates: usize,
    pool_records: usize,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    tool: &'static str,
    version: &'static str,
    config_digest: &'a str,
    seed: u64,
    mean_f1: f64,
    std_f1: f64,
    baseline_mean_f1: f64,
    baseline_std_f1: f64,
    failed_folds: usize,
    warnings: &'a [String],
    config: &'a RunConfig,
    folds: BTreeMap<&'a str, FoldMeta<'a>>,
}

/// Run metadata as TOML: config echo, digest, seeds, version, warnings.
pub fn render_metadata(outcome: &LosoOutcome, cfg: &RunConfig) -> String {
    let r = &outcome.report;
    let folds = r
        .rows
        .iter()
        .zip(&outcome.audits)
        .map(|(row, a)| {
            (
                row.source_id.as_str(),
                FoldMeta {
                    status: &row.status,
                    fold_seed: fold_seed(cfg.seed, &row.source_id, "meta"),
                    episodes_per_phase: a.as_ref().map(|a| a.episode_counts).unwrap_or_default(),
                    selected_features: a.as_ref().map(|a| a.selection.k()).unwrap_or(0),
                    synthetic_points: a.as_ref().map(|a| a.synthetic_points).unwrap_or(0),
                    transferred_templates: a.as_ref().map(|a| a.transferred_templates).unwrap_or(0),
                    pool_records: a.as_ref().map(|a| a.pool_record_ids.len()).unwrap_or(0),
                },
            )
        })
        .collect();
    let meta = RunMeta {
        tool: "logmeta",
        version: env!("CARGO_PKG_VERSION"),
        config_digest: &r.config_digest,
        seed: r.seed,
        mean_f1: r.mean_f1,
        std_f1: r.std_f1,
        baseline_mean_f1: r.baseline_mean_f1,
        baseline_std_f1: r.baseline_std_f1,
        failed_folds: r.failed_folds(),
        warnings: &r.warnings,
        config: cfg,
        folds,
    };
    toml::to_string(&meta).expect("metadata serializes")
}

/// Per-query CSV: `record_id,gold,predicted,p_anomaly,baseline`.
pub fn render_predictions(
    record_ids: &[u64],
    golds: &[Label],
    predictions: &[Label],
    p_anomaly: &[f64],
    baseline: &[Label],
) -> String {
    let mut p = String::from("record_id,gold,predicted,p_anomaly,baseline\n");
    for i in 0..golds.len() {
        writeln!(
            p,
            "{},{},{},{},{}",
            record_ids[i],
            golds[i].bit(),
            predictions[i].bit(),
            p_anomaly[i],
            baseline[i].bit()
        )
        .unwrap();
    }
    p
}

/// Write `report.txt`, `report.csv`, `metadata.toml`, and per fold
/// `curves/<source>.csv` and `predictions/<source>.csv` into `dir`.
pub fn write_report_files(outcome: &LosoOutcome, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let write = |rel: &str, text: &str| -> Result<()> {
        let p = dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("report.txt", &render_table(&outcome.report))?;
    write("report.csv", &render_csv(&outcome.report))?;
    write("metadata.toml", &render_metadata(outcome, cfg))?;
    for a in outcome.audits.iter().flatten() {
        let mut curve = Vec::new();
        write_curve(&mut curve, &a.curve).map_err(|e| Error::io(dir, e))?;
        write(&format!("curves/{}.csv", a.source_id), &String::from_utf8(curve).unwrap())?;
        let p = render_predictions(
            &a.query_record_ids,
            &a.golds,
            &a.predictions,
            &a.p_anomaly,
            &a.baseline_predictions,
        );
        write(&format!("predictions/{}.csv", a.source_id), &p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| Label::from_bit(b).unwrap()).collect()
    }

    #[test]
    fn confusion_examples() {
        let all = labels(&[1, 1, 1]);
        assert_eq!(confusion(&all, &all).unwrap(), Confusion { tp: 3, fp: 0, tn: 0, fn_: 0 });
        let c = confusion(&labels(&[0, 1, 0]), &labels(&[1, 0, 1])).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let c = confusion(&labels(&[1, 0, 1, 0]), &labels(&[1, 1, 0, 0])).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert!(confusion(&labels(&[1]), &labels(&[1, 0])).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(prf(&Confusion { tp: 4, fp: 0, tn: 3, fn_: 0 }).f1, 1.0);
        assert_eq!(prf(&Confusion { tp: 0, fp: 2, tn: 3, fn_: 5 }).f1, 0.0);
        assert_eq!(prf(&Confusion::default()), Prf::default());
        // P = 0.8, R = 0.6
        let m = prf(&Confusion { tp: 12, fp: 3, tn: 0, fn_: 8 });
        assert!((m.precision - 0.8).abs() < 1e-15 && (m.recall - 0.6).abs() < 1e-15);
        assert!((m.f1 - 0.96 / 1.4).abs() < 1e-12);
        assert!((m.f1 - 0.6857).abs() < 1e-4);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn failed_rows_are_excluded_from_mean() {
        let ok = SourceRow {
            source_id: "a".into(),
            status: FoldStatus::Ok,
            n_support: 10,
            n_queries: 5,
            confusion: Confusion::default(),
            metrics: Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            },
            baseline: Prf::default(),
            support_warning: false,
        };
        let failed = SourceRow {
            source_id: "b".into(),
            status: FoldStatus::Failed("x".into()),
            metrics: Prf::default(),
            ..ok.clone()
        };
        let r = LosoReport::from_rows(vec![ok, failed], "d".into(), 1, vec![]);
        assert_eq!(r.mean_f1, 1.0);
        assert_eq!(r.failed_folds(), 1);
        let csv = render_csv(&r);
        assert_eq!(csv.lines().count(), 4);
        assert!(render_table(&r).contains("FAILED"));
    }
}
