use klonet_core::losses::{self, LossWeights, TverskyParams};
use klonet_core::metrics::BinaryMask;

fn permute<T: Copy>(v: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| v[i]).collect()
}

#[test]
fn losses_ignore_pixel_order() {
    let s: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
    let g: Vec<f64> = (0..25).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    let phi: Vec<f64> = (0..25).map(|i| i as f64 - 12.0).collect();
    let perm: Vec<usize> = (0..25).map(|i| (i * 8) % 25).collect();
    let (ps, pg, pp) = (permute(&s, &perm), permute(&g, &perm), permute(&phi, &perm));
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(losses::dice_loss(&s, &g).unwrap().value, losses::dice_loss(&ps, &pg).unwrap().value));
    assert!(close(losses::boundary_loss(&s, &phi).unwrap().value, losses::boundary_loss(&ps, &pp).unwrap().value));
    let t = TverskyParams::default();
    assert!(close(losses::focal_tversky_loss(&s, &g, t).unwrap().value, losses::focal_tversky_loss(&ps, &pg, t).unwrap().value));
}

#[test]
fn tversky_weights_false_positives_by_beta() {
    // 8 foreground pixels; one prediction adds 4 FP, the other drops 4 (FN)
    let g: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 8))).collect();
    let fp: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 12))).collect();
    let fn_: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 4))).collect();
    let t = TverskyParams::default();
    let l_fp = losses::focal_tversky_loss(&fp, &g, t).unwrap().value;
    let l_fn = losses::focal_tversky_loss(&fn_, &g, t).unwrap().value;
    assert!(l_fp > l_fn, "{l_fp} vs {l_fn}");
}

#[test]
fn boundary_loss_prefers_aligned_predictions() {
    let size = 16;
    let gt = BinaryMask::from_fn(size, size, |y, x| (4..12).contains(&y) && (4..12).contains(&x));
    let phi = losses::signed_distance(&gt).unwrap();
    let at = |dy: usize| -> Vec<f64> {
        BinaryMask::from_fn(size, size, |y, x| (4 + dy..12 + dy).contains(&y) && (4..12).contains(&x)).to_f64()
    };
    let l: Vec<f64> = [0, 2, 4].iter().map(|&d| losses::boundary_loss(&at(d), &phi).unwrap().value).collect();
    assert!(l[0] < l[1] && l[1] < l[2], "{l:?}");
}

#[test]
fn signed_distance_sign_convention() {
    let gt = BinaryMask::from_fn(9, 9, |y, x| (3..6).contains(&y) && (3..6).contains(&x));
    let phi = losses::signed_distance(&gt).unwrap();
    assert!(phi[4 * 9 + 4] < 0.0);
    assert!(phi[0] > 0.0);
    assert!(losses::signed_distance(&BinaryMask::empty(9, 9)).is_none());
}

#[test]
fn ablation_is_the_weighted_sum() {
    let s = vec![0.2, 0.9, 0.6, 0.1];
    let g = vec![0.0, 1.0, 1.0, 0.0];
    let phi = vec![1.0, -1.0, -0.5, 2.0];
    let w = LossWeights::default();
    let a = losses::ablation_loss(&s, &g, &phi, w).unwrap().value;
    let d = losses::dice_loss(&s, &g).unwrap().value;
    let b = losses::boundary_loss(&s, &phi).unwrap().value;
    assert!((a - (0.9 * d + 0.1 * b)).abs() < 1e-15);
}

#[test]
fn analytic_gradients_match_differences() {
    let s = vec![0.2, 0.9, 0.6, 0.1, 0.45];
    let g = vec![0.0, 1.0, 1.0, 0.0, 1.0];
    let t = TverskyParams::default();
    let lv = losses::focal_tversky_loss(&s, &g, t).unwrap();
    for i in 0..s.len() {
        let h = 1e-6;
        let mut up = s.clone();
        up[i] += h;
        let mut dn = s.clone();
        dn[i] -= h;
        let num = (losses::focal_tversky_loss(&up, &g, t).unwrap().value - losses::focal_tversky_loss(&dn, &g, t).unwrap().value) / (2.0 * h);
        assert!((num - lv.grad[i]).abs() < 1e-7, "{i}: {num} vs {}", lv.grad[i]);
    }
}

#[test]
fn invalid_tversky_constants_rejected() {
    assert!(TverskyParams { alpha: -0.1, ..TverskyParams::default() }.validate().is_err());
    assert!(TverskyParams { gamma: 0.0, ..TverskyParams::default() }.validate().is_err());
}
