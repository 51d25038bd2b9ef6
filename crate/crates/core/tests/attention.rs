use klonet_core::attention::{dynamic_k, k_map, AttentionConfig, DynamicKnnAttention};
use klonet_core::nn::{ParamStore, Session};
use klonet_core::{Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn module(c: usize, cfg: AttentionConfig, seed: u64) -> (ParamStore, DynamicKnnAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = DynamicKnnAttention::new(&mut store, "a", c, cfg, true, &mut rng).unwrap();
    (store, m)
}

#[test]
fn dynamic_k_follows_clamp_rule() {
    assert_eq!(dynamic_k(0.0, 3, 10), 3);
    assert_eq!(dynamic_k(0.55, 3, 10), 5);
    assert_eq!(dynamic_k(0.999, 3, 10), 9);
    assert_eq!(dynamic_k(1.0, 3, 10), 10);
    let tau = Tensor::from_vec(Shape::new(1, 1, 2, 5), vec![0.0, 0.5, 1.0, 0.25, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(k_map(&tau, 2, 8), vec![2, 4, 8, 2, 7, 2, 2, 2, 2, 2]);
    assert_eq!(k_map(&tau, 2, 20)[2], 10);
}

#[test]
fn selection_keeps_the_highest_scores() {
    let cfg = AttentionConfig { heads: 2, k_min: 2, k_max: 5, ..AttentionConfig::default() };
    let (store, m) = module(8, cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::uniform(Shape::new(1, 8, 3, 4), -1.0, 1.0, &mut rng);
    let mut s = Session::new(&store, false);
    let xi = s.input(x, false).unwrap();
    let (_, st) = m.forward_with_state(&mut s, xi, true).unwrap();
    let st = st.unwrap();
    let n = 12;
    for (row, (scores, mask)) in st.scores.data().chunks(n).zip(st.mask.data().chunks(n)).enumerate() {
        let kept: Vec<f64> = (0..n).filter(|&j| mask[j] == 1.0).map(|j| scores[j]).collect();
        let dropped: Vec<f64> = (0..n).filter(|&j| mask[j] == 0.0).map(|j| scores[j]).collect();
        assert_eq!(kept.len(), st.k[row % n]);
        let lo = kept.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(dropped.iter().all(|&d| d <= lo), "row {row}");
    }
}

#[test]
fn output_keeps_input_shape() {
    let (store, m) = module(16, AttentionConfig::default(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(Shape::new(2, 16, 4, 4), -1.0, 1.0, &mut rng);
    let mut s = Session::new(&store, false);
    let xi = s.input(x, false).unwrap();
    let y = m.forward(&mut s, xi).unwrap();
    assert_eq!(s.tape.value(y).shape(), Shape::new(2, 16, 4, 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_budget_matches_dense(seed in 0u64..1000, h in 1usize..5, w in 1usize..5, extra in 0usize..3) {
        let n = h * w;
        let cfg = AttentionConfig { heads: 2, k_min: n + extra, k_max: n + extra, ..AttentionConfig::default() };
        let (store, m) = module(8, cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = Tensor::uniform(Shape::new(1, 8, h, w), -2.0, 2.0, &mut rng);
        let mut s = Session::new(&store, false);
        let xi = s.input(x, false).unwrap();
        let a = m.forward(&mut s, xi).unwrap();
        let b = m.dense_forward(&mut s, xi).unwrap();
        for (p, q) in s.tape.value(a).data().iter().zip(s.tape.value(b).data()) {
            prop_assert!((p - q).abs() <= 1e-10);
        }
    }

    #[test]
    fn rows_are_distributions(seed in 0u64..1000, k_min in 1usize..4, span in 0usize..20) {
        let cfg = AttentionConfig { heads: 1, k_min, k_max: k_min + span, ..AttentionConfig::default() };
        let (store, m) = module(4, cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let x = Tensor::uniform(Shape::new(1, 4, 3, 3), -2.0, 2.0, &mut rng);
        let mut s = Session::new(&store, false);
        let xi = s.input(x, false).unwrap();
        let (_, st) = m.forward_with_state(&mut s, xi, true).unwrap();
        let st = st.unwrap();
        for (i, row) in st.weights.data().chunks(9).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), st.k[i]);
        }
    }
}
