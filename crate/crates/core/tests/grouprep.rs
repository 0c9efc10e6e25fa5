mod common;

use common::*;
use llmgpr::corpus::OwnerKind;
use llmgpr::grouprep::{aggregate_members, fuse, score_candidates};
use llmgpr::seqmodel::{forward, init_poi_embeddings, render_poi_prompt, render_sequence_prompt, PoiStyle};
use llmgpr::tensor::gaussian;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn column_means(m: &Array2<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| m[[i, j]]).sum::<f64>() / m.nrows() as f64).collect()
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn sequence_embedding_is_mean_of_forward_states() {
    let pois = grid_pois(8);
    let seq = sequence("g", OwnerKind::Group, &[1, 4, 2, 7], &pois);
    let mut bundle = tiny_bundle(&pois, std::slice::from_ref(&seq), 2, 3);
    randomize(&mut bundle.seq, 0.1, &mut rng(1));
    let enc = bundle.encoder(&pois, true, PoiStyle::Token);
    let got = enc.encode_sequence(&seq).unwrap();
    assert_eq!(got.owner_kind, OwnerKind::Group);
    let prompt = render_sequence_prompt(&bundle.vocab, &seq, &pois, PoiStyle::Token).unwrap();
    let states = forward(&bundle.base, &bundle.vocab, &prompt.tokens, Some(&bundle.seq), Some(&bundle.poi_emb)).unwrap();
    assert!(linf(got.vector.as_slice().unwrap(), &column_means(&states)) < 1e-6);

    // every prefix row agrees with encoding that prefix on its own
    let prefixes = enc.encode_prefixes(&seq).unwrap();
    for n in 1..=seq.len() {
        let alone = enc.encode_sequence(&seq.prefix(n)).unwrap().vector;
        assert!(linf(prefixes.row(n - 1).as_slice().unwrap(), alone.as_slice().unwrap()) < 1e-9);
    }
}

#[test]
fn poi_rows_are_mean_of_description_states() {
    let pois = grid_pois(5);
    let bundle = tiny_bundle(&pois, &[], 2, 5);
    let rows = init_poi_embeddings(&bundle.base, &bundle.vocab, &pois).unwrap();
    for (i, poi) in pois.iter().enumerate() {
        let tokens = render_poi_prompt(&bundle.vocab, poi).unwrap();
        let states = forward(&bundle.base, &bundle.vocab, &tokens, None, None).unwrap();
        assert!(linf(rows.row(i).as_slice().unwrap(), &column_means(&states)) < 1e-6);
    }
}

#[test]
fn replacing_a_poi_row_only_affects_prompts_with_that_poi() {
    let pois = grid_pois(6);
    let with = sequence("a", OwnerKind::User, &[0, 2], &pois);
    let without = sequence("b", OwnerKind::User, &[1, 3], &pois);
    let bundle = tiny_bundle(&pois, &[with.clone(), without.clone()], 2, 7);
    let mut changed = bundle.clone();
    changed.poi_emb.row_mut(2).mapv_inplace(|v| v + 1.0);
    let (e0, e1) = (bundle.encoder(&pois, true, PoiStyle::Token), changed.encoder(&pois, true, PoiStyle::Token));
    assert_ne!(e0.encode_sequence(&with).unwrap(), e1.encode_sequence(&with).unwrap());
    assert_eq!(e0.encode_sequence(&without).unwrap(), e1.encode_sequence(&without).unwrap());
}

#[test]
fn zero_adapters_reproduce_the_frozen_base() {
    let pois = grid_pois(6);
    let seq = sequence("u", OwnerKind::User, &[0, 1, 5], &pois);
    let bundle = tiny_bundle(&pois, std::slice::from_ref(&seq), 4, 2);
    let plain = bundle.encoder(&pois, false, PoiStyle::Token).encode_sequence(&seq).unwrap();
    let adapted = bundle.encoder(&pois, true, PoiStyle::Token).encode_sequence(&seq).unwrap();
    assert!(linf(plain.vector.as_slice().unwrap(), adapted.vector.as_slice().unwrap()) < 1e-6);
}

#[test]
fn singleton_and_duplicated_member_sets() {
    let pois = grid_pois(4);
    let mut bundle = tiny_bundle(&pois, &[], 2, 9);
    randomize(&mut bundle.agg, 0.1, &mut rng(2));
    let x = gaussian(2, 8, 1.0, &mut rng(3));
    let one = aggregate_members(&bundle.base, Some(&bundle.agg), &x.slice(ndarray::s![..1, ..]).to_owned()).unwrap();
    assert_eq!(one.vector.len(), 8);
    let doubled = ndarray::concatenate![ndarray::Axis(0), x, x];
    let out = aggregate_members(&bundle.base, Some(&bundle.agg), &doubled).unwrap();
    assert!(out.vector.iter().all(|v| v.is_finite()));
    assert!(aggregate_members(&bundle.base, None, &Array2::zeros((2, 5))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn aggregation_ignores_member_order(k in 2usize..=8, seed in any::<u64>()) {
        let pois = grid_pois(4);
        let mut bundle = tiny_bundle(&pois, &[], 2, 13);
        let mut r = rng(seed);
        randomize(&mut bundle.agg, 0.1, &mut r);
        let members = gaussian(k, 8, 1.0, &mut r);
        let reference = aggregate_members(&bundle.base, Some(&bundle.agg), &members).unwrap().vector;
        let mut order: Vec<usize> = (0..k).collect();
        for _ in 0..5 {
            order.shuffle(&mut r);
            let shuffled = members.select(ndarray::Axis(0), &order);
            let out = aggregate_members(&bundle.base, Some(&bundle.agg), &shuffled).unwrap().vector;
            prop_assert!(linf(reference.as_slice().unwrap(), out.as_slice().unwrap()) < 1e-5);
        }
    }

    #[test]
    fn scores_are_normalized_and_scale_monotone(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..12),
        e in prop::collection::vec(-3.0f64..3.0, 3),
        s in 1.0f64..20.0,
    ) {
        let table = Array2::from_shape_vec((rows.len(), 3), rows.concat()).unwrap();
        let e = Array1::from(e);
        let cands: Vec<usize> = (0..rows.len()).collect();
        let a = score_candidates(&e, &table, &cands).unwrap();
        prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(a.probs.iter().all(|&p| p >= 0.0));
        let b = score_candidates(&(&e * s), &table, &cands).unwrap();
        prop_assert_eq!(a.ranking()[0], b.ranking()[0]);
        let shifted = &table + &Array1::from(vec![0.5, -1.0, 2.0]);
        let c = score_candidates(&e, &shifted, &cands).unwrap();
        prop_assert_eq!(a.ranking()[0], c.ranking()[0]);
    }

    #[test]
    fn fusion_is_linear_in_alpha(
        e in prop::collection::vec(-5.0f64..5.0, 4),
        agg in prop::collection::vec(-5.0f64..5.0, 4),
        a1 in 0.0f64..1.0,
        a2 in 0.0f64..1.0,
    ) {
        let (e, agg) = (Array1::from(e), Array1::from(agg));
        let lhs = fuse(&e, &agg, a1) + fuse(&Array1::zeros(4), &agg, a2 - a1);
        let rhs = fuse(&e, &agg, a2);
        prop_assert!(linf(lhs.as_slice().unwrap(), rhs.as_slice().unwrap()) < 1e-6);
    }
}
