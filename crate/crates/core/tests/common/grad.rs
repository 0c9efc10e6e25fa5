//! Analytic-versus-finite-difference gradient comparisons on a d=8, two-layer model.

use super::*;
use llmgpr::corpus::{OwnerKind, PoiTable, Sequence};
use llmgpr::grouprep::{aggregate_pass, fuse};
use llmgpr::qlora::AdapterSet;
use llmgpr::seqmodel::PoiStyle;
use llmgpr::ssl::score_purposes;
use llmgpr::tensor::{gaussian, softmax_cross_entropy};
use llmgpr::training::{poi_loss, poi_loss_grad, ModelBundle};
use ndarray::{Array1, Array2, Axis};

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

fn nth(set: &mut AdapterSet, mut i: usize) -> &mut f64 {
    for p in set.params_mut() {
        if i < p.len() {
            return &mut p[i];
        }
        i -= p.len();
    }
    panic!("parameter index out of range");
}

fn flat(set: &AdapterSet) -> Vec<f64> {
    set.params().concat()
}

fn row_major(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Three-item sequence and a bundle whose adapters and tables are all random.
pub fn fixture() -> (PoiTable, Sequence, ModelBundle) {
    let pois = grid_pois(6);
    let seq = sequence("u1", OwnerKind::User, &[0, 3, 5], &pois);
    let mut bundle = tiny_bundle(&pois, std::slice::from_ref(&seq), 2, 11);
    let mut r = rng(4);
    randomize(&mut bundle.seq, 0.2, &mut r);
    randomize(&mut bundle.agg, 0.2, &mut r);
    bundle.poi_emb = gaussian(6, 8, 0.5, &mut r);
    bundle.pur = gaussian(bundle.pur.nrows(), 8, 0.5, &mut r);
    (pois, seq, bundle)
}

fn purpose_loss(b: &ModelBundle, pois: &PoiTable, seq: &Sequence, label: usize) -> (f64, Array2<f64>, Array2<f64>) {
    let enc = b.encoder(pois, true, PoiStyle::Token);
    let pass = enc.prefix_pass(seq, 0.0, None).unwrap();
    let last = pass.embeddings.nrows() - 1;
    let e = pass.embeddings.row(last).to_owned();
    let (loss, dlogits) = softmax_cross_entropy(score_purposes(&b.pur, &e).unwrap().view(), label);
    let d_pur = dlogits.view().insert_axis(Axis(1)).dot(&e.view().insert_axis(Axis(0)));
    let mut d_emb = Array2::zeros(pass.embeddings.dim());
    d_emb.row_mut(last).assign(&b.pur.t().dot(&dlogits));
    let mut d_poi = Array2::zeros(b.poi_emb.dim());
    pass.backward(&enc, &d_emb, None, Some(&mut d_poi));
    (loss, d_pur, d_poi)
}

/// Worst relative error per parameter group.
pub fn gradient_errors() -> Vec<(&'static str, f64)> {
    let (pois, seq, bundle) = fixture();
    let mut out = Vec::new();

    let (_, d_seq, d_poi) = sequencing_loss(&bundle, &pois, &seq);
    let loss = |b: &ModelBundle| sequencing_loss(b, &pois, &seq).0;
    out.push(("sequencing adapter A,B", worst_relative_error(&bundle, &flat(&d_seq), loss, |b, i| nth(&mut b.seq, i), STEP)));
    let cols = d_poi.ncols();
    out.push(("E_poi rows (next-POI loss)", worst_relative_error(&bundle, &row_major(&d_poi), loss, |b, i| &mut b.poi_emb[[i / cols, i % cols]], STEP)));

    let (_, d_pur, d_poi) = purpose_loss(&bundle, &pois, &seq, 4);
    let loss = |b: &ModelBundle| purpose_loss(b, &pois, &seq, 4).0;
    let cols = d_pur.ncols();
    out.push(("E_pur", worst_relative_error(&bundle, &row_major(&d_pur), loss, |b, i| &mut b.pur[[i / cols, i % cols]], STEP)));
    let cols = d_poi.ncols();
    out.push(("E_poi rows (purpose loss)", worst_relative_error(&bundle, &row_major(&d_poi), loss, |b, i| &mut b.poi_emb[[i / cols, i % cols]], STEP)));

    let mut r = rng(8);
    let members = gaussian(3, 8, 1.0, &mut r);
    let group: Array1<f64> = gaussian(1, 8, 1.0, &mut r).row(0).to_owned();
    let alpha = 0.7;
    let loss = |b: &ModelBundle| {
        let pass = aggregate_pass(&b.base, Some(&b.agg), &members, 0.0, None).unwrap();
        poi_loss(&fuse(&group, &pass.output, alpha), 2, &b.poi_emb)
    };
    let pass = aggregate_pass(&bundle.base, Some(&bundle.agg), &members, 0.0, None).unwrap();
    let (_, d_fused, _) = poi_loss_grad(&fuse(&group, &pass.output, alpha), 2, &bundle.poi_emb);
    let mut grad = bundle.agg.zeros_like();
    pass.backward(&bundle.base, Some(&bundle.agg), &(d_fused * alpha), Some(&mut grad));
    out.push(("aggregation adapter A,B", worst_relative_error(&bundle, &flat(&grad), loss, |b, i| nth(&mut b.agg, i), STEP)));
    out
}
