mod common;

use common::*;
use llmgpr::corpus::OwnerKind;
use llmgpr::evalkit::AblationFlags;
use llmgpr::grouprep::Encoder;
use llmgpr::pipeline::{train_aggregation_stage, train_sequence_stages};
use llmgpr::seqmodel::PoiStyle;
use llmgpr::ssl::score_purposes;
use llmgpr::training::{pretrain_ssl, train_aggregation, train_sequencing, MetricsLog, TrainConfig};

#[test]
fn each_stage_changes_only_its_trainable_set() {
    let cfg = tiny_run_config(5);
    let found = tiny_foundation(&cfg);
    let (corpus, tc, flags) = (&found.corpus, cfg.train_config(), AblationFlags::default());
    let mut log = MetricsLog::in_memory();
    let mut b = found.bundle.clone();

    let c0 = b.checksums();
    pretrain_ssl(&mut b, &corpus.ssl, &corpus.pois, &tc, &flags, &mut log).unwrap();
    let c1 = b.checksums();
    assert_eq!((&c0.base, &c0.agg), (&c1.base, &c1.agg));
    assert_ne!(c0.seq, c1.seq);
    assert_ne!(c0.pur, c1.pur);

    train_sequencing(&mut b, corpus, &tc, &flags, cfg.eval.h, &mut log).unwrap();
    let c2 = b.checksums();
    assert_eq!((&c1.base, &c1.agg, &c1.pur), (&c2.base, &c2.agg, &c2.pur));

    train_aggregation(&mut b, corpus, &tc, &flags, cfg.eval.h, &mut log).unwrap();
    let c3 = b.checksums();
    assert_eq!((&c2.base, &c2.seq, &c2.poi_emb, &c2.pur), (&c3.base, &c3.seq, &c3.poi_emb, &c3.pur));
}

#[test]
fn same_seed_gives_identical_trajectories_and_checkpoints() {
    let cfg = tiny_run_config(8);
    let found = tiny_foundation(&cfg);
    let run = || {
        let mut b = found.bundle.clone();
        let mut log = MetricsLog::in_memory();
        let flags = AblationFlags::default();
        let mut reports = train_sequence_stages(&mut b, &found.corpus, &cfg, &flags, &mut log).unwrap();
        reports.push(train_aggregation_stage(&mut b, &found.corpus, &cfg, &flags, &mut log).unwrap());
        (reports, b.checksums())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.0.iter().flat_map(|r| &r.epoch_losses).all(|l| l.is_finite()));
}

#[test]
fn ablated_stages_are_skipped() {
    let cfg = tiny_run_config(2);
    let found = tiny_foundation(&cfg);
    let mut b = found.bundle.clone();
    let before = b.checksums();
    let flags = AblationFlags::parse("fusion=off").unwrap();
    let report = train_aggregation_stage(&mut b, &found.corpus, &cfg, &flags, &mut MetricsLog::in_memory()).unwrap();
    assert!(report.skipped);
    assert_eq!(before, b.checksums());
}

#[test]
fn separable_purposes_are_learned() {
    // category alternates with the POI index, so the label is a function of the visited POIs
    let pois = grid_pois(20);
    let mut data = Vec::new();
    for i in 0..24 {
        let parity = i % 2;
        let picks: Vec<usize> = (0..3).map(|j| (2 * (i + 3 * j) + parity) % 20).collect();
        data.push((sequence(&format!("s{i}"), OwnerKind::User, &picks, &pois), parity));
    }
    let seqs: Vec<_> = data.iter().map(|(s, _)| s.clone()).collect();
    let mut bundle = tiny_bundle(&pois, &seqs, 4, 21);
    let cfg = TrainConfig {
        lr: 1e-3,
        emb_lr: 0.02,
        dropout: 0.0,
        batch: 4,
        max_epochs: 40,
        ..TrainConfig::default()
    };
    pretrain_ssl(&mut bundle, &data, &pois, &cfg, &AblationFlags::default(), &mut MetricsLog::in_memory()).unwrap();
    let enc: Encoder = bundle.encoder(&pois, true, PoiStyle::Token);
    let correct = data
        .iter()
        .filter(|(s, label)| {
            let logits = score_purposes(&bundle.pur, &enc.encode_sequence(s).unwrap().vector).unwrap();
            // restricted to the two planted labels
            (logits[1] > logits[0]) == (*label == 1)
        })
        .count();
    assert!(correct as f64 / data.len() as f64 > 0.9, "{correct}/{}", data.len());
}
