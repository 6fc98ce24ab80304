//! Subcommand implementations. Every stage reads and writes plain files, and
//! derives its seeds exactly as `loso` does for the same held-out source, so
//! running the stages by hand reproduces a LOSO fold.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use logmeta::embedding::{read_feature_matrix, write_feature_matrix, FeatureVector};
use logmeta::eval_harness::{
    render_csv, render_predictions, render_table, run_loso, write_report_files, LosoReport, SourceRow,
};
use logmeta::feature_select::SelectionMask;
use logmeta::ingest::{CorpusManifest, Label};
use logmeta::label_transfer::write_transfer_report;
use logmeta::meta_learner::{read_pools, write_curve, write_pools};
use logmeta::neural_core::Checkpoint;
use logmeta::pipeline::{
    balance_pool, featurize, label_pool, prepare, score_target, select_features, train_encoder, FoldPlan,
};
use logmeta::synth::{write_corpus, SynthConfig};
use logmeta::template_miner::{write_template_store, StoredTemplate};
use logmeta::RunConfig;

use crate::{Cli, Command};

pub fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::SynthCorpus {
        out,
        sources,
        per_source,
        imbalance,
        corpus_seed,
    } = &cli.command
    {
        let cfg = SynthConfig {
            sources: *sources,
            per_source: *per_source,
            imbalance: *imbalance,
            seed: *corpus_seed,
        };
        let manifest = write_corpus(&cfg, out)?;
        println!("{}", manifest.display());
        return Ok(());
    }
    let cfg = cli.global.run_config()?;
    match &cli.command {
        Command::Parse { out } => parse(&cfg, out),
        Command::Label { holdout, out } => label(&cfg, holdout.holdout.as_deref(), out),
        Command::Featurize { holdout, labels, out } => featurize_stage(&cfg, holdout.holdout.as_deref(), labels, out),
        Command::Select { holdout, features, out } => select(&cfg, holdout.holdout.as_deref(), features, out),
        Command::Balance {
            holdout,
            features,
            mask,
            out,
        } => balance(&cfg, holdout.holdout.as_deref(), features, mask, out),
        Command::Train { holdout, pools, out } => train(&cfg, holdout.holdout.as_deref(), pools, out),
        Command::Evaluate {
            holdout,
            checkpoint,
            mask,
            train,
            test,
            out,
        } => evaluate(&cfg, holdout, checkpoint, mask, train, test, out),
        Command::Loso { out } => loso(&cfg, out),
        Command::Predict {
            holdout,
            checkpoint,
            mask,
            support,
            input,
            out,
        } => predict(&cfg, holdout.holdout.as_deref(), checkpoint, mask, support, input, out),
        Command::SynthCorpus { .. } => unreachable!("handled above"),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path, produced_by: &str) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("missing input {} (produced by `{produced_by}`)", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn plan_from_manifest(cfg: &RunConfig, holdout: Option<&str>) -> Result<FoldPlan> {
    let manifest = CorpusManifest::load(&cfg.manifest)?;
    Ok(FoldPlan::from_sources(manifest.source_ids(), cfg, holdout)?)
}

fn parse(cfg: &RunConfig, out: &Path) -> Result<()> {
    let prepared = prepare(cfg)?;
    for tree in prepared.miner.trees() {
        let stored: Vec<StoredTemplate> = tree
            .templates()
            .iter()
            .map(|t| StoredTemplate::from_template(t, &tree.source_id))
            .collect();
        let mut w = create(&out.join("templates").join(format!("{}.tsv", tree.source_id)))?;
        write_template_store(&mut w, &stored)?;
        w.flush()?;
    }
    let test: std::collections::HashSet<u64> = prepared.split.test.records.iter().map(|r| r.record_id).collect();
    let mut s = String::from("record_id,source_id,partition,template_id,gold\n");
    for r in &prepared.records.records {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.record_id,
            r.source_id,
            if test.contains(&r.record_id) { "test" } else { "train" },
            prepared.template_of[&r.record_id],
            r.gold_label.map(|l| l.bit().to_string()).unwrap_or_default()
        )?;
    }
    write_text(&out.join("assignments.csv"), &s)?;
    eprintln!(
        "{} records, {} templates, {} header miss(es)",
        prepared.records.len(),
        prepared.miner.all_templates().count(),
        prepared.load_report.header_misses()
    );
    Ok(())
}

fn label(cfg: &RunConfig, holdout: Option<&str>, out: &Path) -> Result<()> {
    let prepared = prepare(cfg)?;
    let plan = FoldPlan::new(&prepared, cfg, holdout)?;
    let pool = label_pool(&prepared, cfg, &plan)?;
    let mut s = String::from("record_id,label,drift_flag\n");
    for r in &pool.records {
        let (l, drift) = pool.resolved.labels[&r.record_id];
        writeln!(s, "{},{},{}", r.record_id, l.bit(), u8::from(drift))?;
    }
    write_text(&out.join("labels.csv"), &s)?;
    let mut w = create(&out.join("transfer.csv"))?;
    write_transfer_report(&mut w, &pool.resolved.transfer)?;
    w.flush()?;
    eprintln!(
        "{} pool records, {} inherited template labels, {} transferred template(s)",
        pool.records.len(),
        pool.resolved.inherited,
        pool.resolved.transfer.len()
    );
    Ok(())
}

fn read_labels(path: &Path) -> Result<HashMap<u64, (Label, bool)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("missing input {} (produced by `label`)", path.display()))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let bad = || anyhow!("{}:{}: malformed label row", path.display(), n + 1);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let id: u64 = f[0].parse().map_err(|_| bad())?;
        let label = f[1].parse::<u8>().ok().and_then(Label::from_bit).ok_or_else(bad)?;
        let drift = match f[2] {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        out.insert(id, (label, drift));
    }
    Ok(out)
}

fn write_features(path: &Path, rows: &[FeatureVector]) -> Result<()> {
    let mut w = create(path)?;
    write_feature_matrix(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

fn read_features(path: &Path) -> Result<Vec<FeatureVector>> {
    Ok(read_feature_matrix(open(path, "featurize")?, path)?)
}

fn featurize_stage(cfg: &RunConfig, holdout: Option<&str>, labels: &Path, out: &Path) -> Result<()> {
    let labels = read_labels(labels)?;
    let prepared = prepare(cfg)?;
    let plan = FoldPlan::new(&prepared, cfg, holdout)?;
    let pool_records = plan.pool_records(&prepared);
    if let Some(r) = pool_records.iter().find(|r| !labels.contains_key(&r.record_id)) {
        bail!(
            "labels file has no row for pool record {} (rerun `label` with the same config and --holdout)",
            r.record_id
        );
    }
    let embedder = logmeta::pipeline::fit_fold_embedder(&pool_records, cfg, plan.seed("embed"))?;
    write_features(&out.join("pool.csv"), &featurize(&pool_records, &prepared, &embedder, &labels)?)?;
    if plan.target.is_some() {
        let none = HashMap::new();
        for (test, name) in [(false, "target_train.csv"), (true, "target_test.csv")] {
            let rows = featurize(&plan.target_records(&prepared, test), &prepared, &embedder, &none)?;
            write_features(&out.join(name), &rows)?;
        }
    }
    Ok(())
}

fn select(cfg: &RunConfig, holdout: Option<&str>, features: &Path, out: &Path) -> Result<()> {
    let rows = read_features(features)?;
    if rows.is_empty() {
        bail!("{}: no feature rows", features.display());
    }
    let plan = plan_from_manifest(cfg, holdout)?;
    let (scores, mask) = select_features(&rows, cfg, &plan)?;
    let mut w = create(&out.join("mask.txt"))?;
    mask.write(&mut w)?;
    w.flush()?;
    let mut s = String::from("feature,mi,forest,fused_rank\n");
    for j in 0..scores.mi.len() {
        writeln!(s, "{j},{},{},{}", scores.mi[j], scores.forest[j], scores.fused_rank[j])?;
    }
    write_text(&out.join("scores.csv"), &s)
}

fn read_mask(path: &Path) -> Result<SelectionMask> {
    Ok(SelectionMask::read(open(path, "select")?, path)?)
}

fn balance(cfg: &RunConfig, holdout: Option<&str>, features: &Path, mask: &Path, out: &Path) -> Result<()> {
    let rows = read_features(features)?;
    let mask = read_mask(mask)?;
    let plan = plan_from_manifest(cfg, holdout)?;
    let mut warnings = Vec::new();
    let pools = balance_pool(&rows, &mask, cfg, &plan, &mut warnings)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut w = create(&out.join("pools.csv"))?;
    write_pools(&mut w, &pools)?;
    w.flush()?;
    Ok(())
}

fn train(cfg: &RunConfig, holdout: Option<&str>, pools: &Path, out: &Path) -> Result<()> {
    let pools = read_pools(open(pools, "balance")?, pools)?;
    let plan = plan_from_manifest(cfg, holdout)?;
    let trained = train_encoder(&pools, cfg, &plan)?;
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("holdout".to_string(), holdout.unwrap_or("").to_string());
    let episodes = trained.episode_counts.map(|c| c.to_string()).join(",");
    meta.insert("episodes_per_phase".to_string(), episodes);
    let ckpt = Checkpoint {
        params: trained.params,
        seed: plan.seed("meta"),
        config_digest: cfg.digest(),
        meta,
    };
    let mut w = create(&out.join("encoder.ckpt"))?;
    ckpt.write(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("curve.csv"))?;
    write_curve(&mut w, &trained.curve)?;
    w.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::read(open(path, "train")?, path)?;
    if ckpt.config_digest != cfg.digest() {
        log::warn!(
            "{}: trained under config {}, running under {}",
            path.display(),
            ckpt.config_digest,
            cfg.digest()
        );
    }
    Ok(ckpt)
}

fn evaluate(
    cfg: &RunConfig,
    holdout: &str,
    checkpoint: &Path,
    mask: &Path,
    train: &Path,
    test: &Path,
    out: &Path,
) -> Result<()> {
    let ckpt = read_checkpoint(checkpoint, cfg)?;
    let mask = read_mask(mask)?;
    let plan = plan_from_manifest(cfg, Some(holdout))?;
    let train_rows = read_features(train)?;
    let test_rows = read_features(test)?;
    let scores = score_target(&ckpt.params, &mask, &train_rows, &test_rows, cfg, &plan)?;
    for w in &scores.warnings {
        log::warn!("{w}");
    }
    let row = SourceRow::scored(
        holdout,
        scores.support_record_ids.len(),
        &scores.predictions.labels,
        &scores.baseline.labels,
        &scores.golds,
        !scores.warnings.is_empty(),
    )?;
    let report = LosoReport::from_rows(vec![row], cfg.digest(), cfg.seed, scores.warnings.clone());
    write_text(&out.join("report.txt"), &render_table(&report))?;
    write_text(&out.join("report.csv"), &render_csv(&report))?;
    write_text(
        &out.join("predictions.csv"),
        &render_predictions(
            &scores.query_record_ids,
            &scores.golds,
            &scores.predictions.labels,
            &scores.predictions.p_anomaly,
            &scores.baseline.labels,
        ),
    )?;
    print!("{}", render_table(&report));
    Ok(())
}

fn loso(cfg: &RunConfig, out: &Path) -> Result<()> {
    let prepared = prepare(cfg)?;
    let outcome = run_loso(&prepared, cfg)?;
    write_report_files(&outcome, cfg, out)?;
    print!("{}", render_table(&outcome.report));
    let failed = outcome.report.failed_folds();
    if failed > 0 {
        bail!("{failed} fold(s) failed; see {}", out.join("report.txt").display());
    }
    Ok(())
}

fn predict(
    cfg: &RunConfig,
    holdout: Option<&str>,
    checkpoint: &Path,
    mask: &Path,
    support: &Path,
    input: &Path,
    out: &Path,
) -> Result<()> {
    let ckpt = read_checkpoint(checkpoint, cfg)?;
    let mask = read_mask(mask)?;
    let plan = plan_from_manifest(cfg, holdout)?;
    let support_rows = read_features(support)?;
    let input_rows = read_features(input)?;
    let scores = score_target(&ckpt.params, &mask, &support_rows, &input_rows, cfg, &plan)?;
    for w in &scores.warnings {
        log::warn!("{w}");
    }
    let mut s = String::from("record_id,predicted,p_anomaly\n");
    for i in 0..input_rows.len() {
        writeln!(
            s,
            "{},{},{}",
            scores.query_record_ids[i],
            scores.predictions.labels[i].bit(),
            scores.predictions.p_anomaly[i]
        )?;
    }
    write_text(out, &s)
}
