//! Property tests over the public API.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use proptest::prelude::*;

use logmeta::balance::{balance_training_set, nearest_neighbors, smote};
use logmeta::embedding::{cosine, EmbedderState, SemanticEmbedder};
use logmeta::feature_select::{descending_ranks, mi_scores, select_top_k};
use logmeta::ingest::{split_train_test, Label, LogRecord, RecordSet};
use logmeta::label_transfer::{build_knowledge_base, transfer_labels, TransferLabel};
use logmeta::meta_learner::{compute_prototypes, proto_probabilities, read_pools, write_pools, PoolPoint, SourcePool};
use logmeta::neural_core::{focal_loss, softmax, Checkpoint, EncoderParams};
use logmeta::template_miner::{TemplateMiner, TreeParams};

fn label(b: bool) -> Label {
    if b {
        Label::Anomaly
    } else {
        Label::Normal
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn records(per_source: Vec<(usize, u8)>) -> RecordSet {
    let mut recs = Vec::new();
    let mut order = Vec::new();
    for (s, (n, every)) in per_source.into_iter().enumerate() {
        let sid = format!("s{s}");
        order.push(sid.clone());
        for i in 0..n {
            recs.push(LogRecord {
                record_id: recs.len() as u64,
                source_id: sid.clone(),
                raw_line: format!("line {i}"),
                message: format!("line {i}"),
                gold_label: Some(label(i % every.max(1) as usize == 0)),
            });
        }
    }
    RecordSet::from_records(recs, &order)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn focal_loss_is_nonnegative_and_below_ce(p in 1e-9f64..=1.0, gamma in 0.0f64..5.0, alpha in 0.01f64..=1.0) {
        let fl = focal_loss(&[1.0 - p, p], 1, gamma, alpha);
        let ce = -p.ln();
        prop_assert!(fl >= 0.0);
        prop_assert!(fl <= alpha * ce + 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-500.0f64..500.0, 1..8)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn prototypes_ignore_support_order(e in matrix(8, 3), bits in prop::collection::vec(any::<bool>(), 8), rot in 0usize..8) {
        let mut y: Vec<Label> = bits.into_iter().map(label).collect();
        y[0] = Label::Normal;
        y[1] = Label::Anomaly;
        let a = compute_prototypes(e.view(), &y).unwrap();
        let order: Vec<usize> = (0..8).map(|i| (i + rot) % 8).collect();
        let e2 = e.select(ndarray::Axis(0), &order);
        let y2: Vec<Label> = order.iter().map(|&i| y[i]).collect();
        let b = compute_prototypes(e2.view(), &y2).unwrap();
        for c in 0..2 {
            for (x, z) in a.means[c].iter().zip(&b.means[c]) {
                prop_assert!((x - z).abs() <= 1e-12);
            }
        }
        let p = proto_probabilities(&[0.1, -0.2, 0.3], &a);
        prop_assert!((p[0] + p[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn smote_points_lie_on_neighbor_segments(x in matrix(7, 2), n_new in 1usize..40, k in 1usize..6, seed in any::<u64>()) {
        let s = smote(x.view(), n_new, k, seed).unwrap();
        prop_assert_eq!(s.nrows(), n_new);
        let knn: Vec<Vec<usize>> = (0..7).map(|i| nearest_neighbors(x.view(), i, k.min(6))).collect();
        for row in s.rows() {
            let found = (0..7).any(|i| knn[i].iter().any(|&j| {
                let a = x.row(i);
                let b = x.row(j);
                let ab = &b - &a;
                let as_ = &row - &a;
                let len2 = ab.dot(&ab);
                if len2 == 0.0 {
                    return as_.dot(&as_) < 1e-18;
                }
                let t = as_.dot(&ab) / len2;
                let r = &as_ - &(&ab * t);
                (-1e-12..=1.0 + 1e-12).contains(&t) && r.dot(&r).sqrt() < 1e-9
            }));
            prop_assert!(found);
        }
    }

    #[test]
    fn balancing_equalizes_and_keeps_originals(x in matrix(30, 2), n_anom in 2usize..15, seed in any::<u64>()) {
        let y: Vec<Label> = (0..30).map(|i| label(i < n_anom)).collect();
        let b = balance_training_set(x.view(), &y, 5, seed).unwrap();
        let a = b.y.iter().filter(|l| l.is_anomaly()).count();
        prop_assert_eq!(a, b.y.len() - a);
        prop_assert_eq!(b.x.slice(ndarray::s![..30, ..]), x.view());
        prop_assert_eq!(&b.y[..30], &y[..]);
    }

    #[test]
    fn mi_is_bounded_by_label_entropy(x in matrix(60, 3), bits in prop::collection::vec(any::<bool>(), 60)) {
        let y: Vec<Label> = bits.iter().copied().map(label).collect();
        let p = bits.iter().filter(|&&b| b).count() as f64 / 60.0;
        let h = if p == 0.0 || p == 1.0 { 0.0 } else { -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()) };
        for v in mi_scores(x.view(), &y, 10).unwrap() {
            prop_assert!(v >= 0.0 && v <= h + 1e-12);
        }
    }

    #[test]
    fn fused_selection_is_a_k_subset(mi in prop::collection::vec(0.0f64..1.0, 12), rf in prop::collection::vec(0.0f64..1.0, 12), k in 1usize..=12) {
        let m = select_top_k(&mi, &rf, k).unwrap();
        prop_assert_eq!(m.k(), k);
        prop_assert!(m.indices.windows(2).all(|w| w[0] < w[1]));
        let ranks = descending_ranks(&mi);
        let set: BTreeSet<usize> = ranks.iter().copied().collect();
        prop_assert_eq!(set.len(), 12);
    }

    #[test]
    fn split_is_a_deterministic_partition(sizes in prop::collection::vec((0usize..40, 1u8..6), 1..4), ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let rs = records(sizes);
        let a = split_train_test(&rs, ratio, seed).unwrap();
        let b = split_train_test(&rs, ratio, seed).unwrap();
        prop_assert_eq!(&a.train.records, &b.train.records);
        let mut ids: Vec<u64> = a.train.records.iter().chain(&a.test.records).map(|r| r.record_id).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..rs.len() as u64).collect::<Vec<_>>());
        for sid in rs.source_ids() {
            let n = rs.count_of(sid);
            let t = a.train.count_of(sid);
            if n >= 2 {
                prop_assert!((t as f64 - ratio * n as f64).abs() <= 1.0 + 1e-9, "{} of {}", t, n);
            }
        }
    }

    #[test]
    fn miner_reparse_is_stable(lines in prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["open", "close", "fail", "ok", "42", "0x1f", "disk", "net"]), 1..7), 1..60)) {
        let msgs: Vec<String> = lines.iter().map(|l| l.join(" ")).collect();
        let recs: Vec<LogRecord> = msgs.iter().enumerate().map(|(i, m)| LogRecord {
            record_id: i as u64,
            source_id: "s".into(),
            raw_line: m.clone(),
            message: m.clone(),
            gold_label: None,
        }).collect();
        let mut m1 = TemplateMiner::new(TreeParams::default(), &["s"]).unwrap();
        let ids = m1.mine(recs.iter()).unwrap();
        let mut m2 = TemplateMiner::new(TreeParams::default(), &["s"]).unwrap();
        prop_assert_eq!(&ids, &m2.mine(recs.iter()).unwrap());
        let total: u64 = m1.trees()[0].templates().iter().map(|t| t.occurrences).sum();
        prop_assert_eq!(total, recs.len() as u64);
        for t in m1.trees()[0].templates() {
            let again = m1.trees()[0].match_message(&t.render().replace("<*>", "zz"));
            prop_assert!(again.is_some() || t.tokens.iter().any(|k| k.is_wildcard));
        }
    }

    #[test]
    fn transfer_count_is_monotone(t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let msgs = ["disk failure on sda", "disk ok", "network link down", "link up again", "user login ok", "fatal disk error"];
        let emb = EmbedderState::fit(msgs.iter().copied(), 64, 3, 1).unwrap();
        let mut miner = TemplateMiner::new(TreeParams::default(), &["a", "b"]).unwrap();
        let mut kb = Vec::new();
        let mut cand = Vec::new();
        for (i, m) in msgs.iter().enumerate() {
            let r = LogRecord { record_id: i as u64, source_id: if i < 3 { "a" } else { "b" }.into(), raw_line: m.to_string(), message: m.to_string(), gold_label: None };
            let id = miner.parse(&r).unwrap().template_id;
            let t = miner.template(id).unwrap().clone();
            if i < 3 { kb.push((t, label(i != 1))) } else { cand.push(t) }
        }
        let kb = build_knowledge_base(&kb, &emb).unwrap();
        let count = |tau| transfer_labels(&cand, &kb, tau, &emb).unwrap().iter().filter(|r| r.assigned_label != TransferLabel::Drifted).count();
        prop_assert!(count(hi) <= count(lo));
    }

    #[test]
    fn embeddings_are_unit_or_zero(text in "[a-z ]{0,40}") {
        let emb = EmbedderState::fit(["alpha beta", "gamma"].into_iter(), 32, 3, 5).unwrap();
        let v = emb.embed(&text);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        if n > 0.0 {
            prop_assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6) {
        let params = EncoderParams::he_uniform(&[3, hidden, 2], seed).unwrap();
        let ckpt = Checkpoint { params, seed, config_digest: "abc".into(), meta: Default::default() };
        let mut buf = Vec::new();
        ckpt.write(&mut buf).unwrap();
        let back = Checkpoint::read(&buf[..], Path::new("mem")).unwrap();
        prop_assert_eq!(back.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        ckpt.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn pool_round_trip_is_exact(vals in prop::collection::vec(-1e6f64..1e6, 12), ids in prop::collection::vec(prop::option::of(0u64..1000), 4)) {
        let pools: Vec<SourcePool> = (0..2).map(|s| SourcePool {
            source_id: format!("src{s}"),
            points: (0..2).map(|i| PoolPoint {
                x: vals[(s * 2 + i) * 3..(s * 2 + i) * 3 + 3].to_vec(),
                label: label(i == 1),
                record_id: ids[s * 2 + i],
                drift: i == 0 && s == 1,
            }).collect(),
        }).collect();
        let mut buf = Vec::new();
        write_pools(&mut buf, &pools).unwrap();
        prop_assert_eq!(read_pools(&buf[..], Path::new("mem")).unwrap(), pools);
    }
}
