use llmgpr::qlora::{adapted_weight, dequantize, init_adapter, quantize, Adapter, AdapterKind};
use llmgpr::seqmodel::{BaseModel, ModelConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Numerical rank by Gram-Schmidt with re-orthogonalization.
fn numerical_rank(m: &Array2<f64>, tol: f64) -> usize {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in m.columns() {
        let mut v: Vec<f64> = col.to_vec();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > tol {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis.len()
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

#[test]
fn adapter_update_rank_is_at_most_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_matrix(24, 20, 1.0, &mut rng);
    let q = quantize(&w, 4).unwrap();
    for r in [1, 3, 8] {
        let ad = Adapter {
            a: random_matrix(24, r, 1.0, &mut rng),
            b: random_matrix(r, 20, 1.0, &mut rng),
        };
        let diff = adapted_weight(&q, &ad).unwrap() - dequantize(&q);
        assert_eq!(numerical_rank(&diff, 1e-8), r);
    }
}

#[test]
fn freshly_initialized_adapter_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random_matrix(16, 16, 0.5, &mut rng);
    let q = quantize(&w, 4).unwrap();
    let ad = init_adapter(16, 16, 4, &mut rng).unwrap();
    let diff = adapted_weight(&q, &ad).unwrap() - dequantize(&q);
    assert!(diff.iter().all(|v| v.abs() < 1e-7));
    assert!(init_adapter(16, 8, 9, &mut rng).is_err());
}

#[test]
fn adapter_parameter_count_matches_layer_shapes() {
    let cfg = ModelConfig {
        d: 16,
        n_layers: 2,
        n_heads: 2,
        ff_width: 32,
        max_positions: 32,
        dropout: 0.0,
    };
    let mut base = BaseModel::init(&cfg, 50, 1).unwrap();
    base.freeze(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for r in [1, 2, 4, 8] {
        let set = base.init_adapters(AdapterKind::Sequencing, r, &mut rng).unwrap();
        let expected: usize = base.linear_layers().iter().map(|(_, o, i)| r * (o + i)).sum();
        assert_eq!(set.param_count(), expected);
        // a square d×d layer gets exactly a 2r/d fraction of its weight count
        for (_, o, i) in base.linear_layers().iter().filter(|(_, o, i)| o == i) {
            assert_eq!((r * (o + i)) as f64 / (o * i) as f64, 2.0 * r as f64 / *o as f64);
        }
        assert!(set.param_count() < base.linear_param_count());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn codes_in_range_and_round_trip_within_half_step(
        rows in 1usize..12,
        cols in 1usize..12,
        bits in prop::sample::select(vec![2u8, 4, 8]),
        seed in any::<u64>(),
        scale in 1e-3f64..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(rows, cols, scale, &mut rng);
        let q = quantize(&w, bits).unwrap();
        let max_code = (1u16 << bits) - 1;
        prop_assert!(q.wq.iter().all(|&c| u16::from(c) <= max_code));
        let err = (&w - &dequantize(&q)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(err <= q.delta / 2.0 + 1e-9, "err {} delta {}", err, q.delta);
    }
}
