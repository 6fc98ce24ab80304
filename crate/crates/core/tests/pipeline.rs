use std::collections::HashSet;

use logmeta::eval_harness::{run_fold, run_loso, write_report_files};
use logmeta::ingest::{load_corpus, CorpusManifest};
use logmeta::pipeline::{prepare, FoldPlan};
use logmeta::synth::{write_corpus, SynthConfig};
use logmeta::RunConfig;

fn small(dir: &std::path::Path) -> RunConfig {
    let manifest = write_corpus(
        &SynthConfig {
            sources: 3,
            per_source: 240,
            imbalance: 10.0,
            seed: 7,
        },
        dir,
    )
    .unwrap();
    let mut cfg = RunConfig::from_toml_with_overrides(
        "",
        &[
            "meta.episodes_per_phase=[6,6,6]".to_string(),
            "meta.hidden=[16]".to_string(),
            "select.k=40".to_string(),
        ],
    )
    .unwrap();
    cfg.manifest = manifest;
    cfg
}

#[test]
fn manifest_loads_every_line_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let manifest = CorpusManifest::load(&cfg.manifest).unwrap();
    let (records, report) = load_corpus(&manifest).unwrap();
    assert_eq!(records.len(), 720);
    assert_eq!(report.header_misses(), 0);
    assert!(records.records.iter().all(|r| r.gold_label.is_some()));
    let ids: Vec<u64> = records.records.iter().map(|r| r.record_id).collect();
    assert_eq!(ids, (0..720).collect::<Vec<_>>());
}

#[test]
fn fold_never_trains_on_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let prepared = prepare(&cfg).unwrap();
    let audit = run_fold(&prepared, &cfg, "src02").unwrap();
    let target: HashSet<u64> = prepared
        .records
        .records
        .iter()
        .filter(|r| r.source_id == "src02")
        .map(|r| r.record_id)
        .collect();
    assert!(audit.pool_record_ids.iter().all(|id| !target.contains(id)));
    let support: HashSet<u64> = audit.support_record_ids.iter().copied().collect();
    assert!(audit.query_record_ids.iter().all(|id| target.contains(id) && !support.contains(id)));
    assert!(audit.support_record_ids.iter().all(|id| target.contains(id)));
    assert_eq!(audit.predictions.len(), audit.golds.len());
    assert!(audit.p_anomaly.iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(audit.selection.k(), 40);
}

#[test]
fn fold_plan_rejects_bad_targets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let sources = vec!["a".to_string(), "b".to_string()];
    assert!(FoldPlan::from_sources(sources.clone(), &cfg, Some("zz")).is_err());
    assert!(FoldPlan::from_sources(vec!["a".into()], &cfg, Some("a")).is_err());
    let all = FoldPlan::from_sources(vec!["a".into()], &cfg, None).unwrap();
    assert_eq!(all.pool_sources, vec!["a".to_string()]);
    let plan = FoldPlan::from_sources(sources, &cfg, Some("a")).unwrap();
    assert_ne!(plan.seed("meta"), plan.seed("support"));
}

#[test]
fn loso_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&dir.path().join("corpus"));
    let prepared = prepare(&cfg).unwrap();
    let a = run_loso(&prepared, &cfg).unwrap();
    let b = run_loso(&prepared, &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.failed_folds(), 0);
    write_report_files(&a, &cfg, &dir.path().join("r")).unwrap();
    for f in ["report.txt", "report.csv", "metadata.toml", "predictions/src01.csv", "curves/src03.csv"] {
        assert!(dir.path().join("r").join(f).exists(), "{f}");
    }

    let mut other = cfg.clone();
    other.seed += 1;
    let c = run_loso(&prepare(&other).unwrap(), &other).unwrap();
    let params = |o: &logmeta::eval_harness::LosoOutcome| o.audits[0].as_ref().unwrap().params.to_flat();
    assert_ne!(params(&a), params(&c));
}
