//! Sensitivity and fitting against independent oracles: a direct evaluation
//! of the sensitivity formula, a Cramer-rule normal-equations solver for the
//! quadratic fit, and bisection for threshold crossings.

use proptest::prelude::*;
use stabilitylab::data::CorpusSpec;
use stabilitylab::model::ModelConfig;
use stabilitylab::optim::OptimizerConfig;
use stabilitylab::sweep::{
    fit_quadratic, lr_sensitivity, predict_divergence, run_sweep, ScalingFit, LR_GRID,
};
use stabilitylab::train::TrainSetup;

fn pseudo(seed: u64, i: usize) -> f64 {
    let mut state = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(i as u64 + 1)
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    state ^= state >> 29;
    (state >> 11) as f64 / (1u64 << 53) as f64
}

#[test]
fn sensitivity_matches_hand_formula_for_25_random_vectors() {
    for seed in 0..25u64 {
        let losses: Vec<(f64, f64)> = LR_GRID
            .iter()
            .enumerate()
            .map(|(i, &lr)| (lr, 2.0 + 6.0 * pseudo(seed, i)))
            .collect();
        let got = lr_sensitivity(&losses, &LR_GRID).unwrap();
        // direct evaluation of mean(loss - min)
        let min = losses.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min);
        let want = losses.iter().map(|&(_, l)| l - min).sum::<f64>() / losses.len() as f64;
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
        assert!(got >= 0.0);
    }
}

/// Normal-equations solve via Cramer's rule on the 3x3 system; the
/// independent oracle for the QR-based fit.
fn normal_equations_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
    let (mut sy, mut sxy, mut sx2y) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        s1 += x;
        s2 += x * x;
        s3 += x * x * x;
        s4 += x * x * x * x;
        sy += y;
        sxy += x * y;
        sx2y += x * x * y;
    }
    // rows for unknowns (c, b, a): [n, s1, s2 | sy], [s1, s2, s3 | sxy], [s2, s3, s4 | sx2y]
    let det3 = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let base = [[n, s1, s2], [s1, s2, s3], [s2, s3, s4]];
    let d = det3(base);
    let dc = det3([[sy, s1, s2], [sxy, s2, s3], [sx2y, s3, s4]]);
    let db = det3([[n, sy, s2], [s1, sxy, s3], [s2, sx2y, s4]]);
    let da = det3([[n, s1, sy], [s1, s2, sxy], [s2, s3, sx2y]]);
    (da / d, db / d, dc / d)
}

#[test]
fn quadratic_fit_matches_normal_equations_on_noisy_points() {
    for seed in 0..10u64 {
        let points: Vec<(f64, f64)> = (0..5)
            .map(|i| {
                let s = 4.0 + i as f64 * 0.5;
                let y = 0.3 * s * s - 1.1 * s + 2.0 + 0.05 * (pseudo(seed, i) - 0.5);
                (s, y)
            })
            .collect();
        let fit = fit_quadratic(&points).unwrap();
        let (a, b, c) = fit.coefficients;
        let (oa, ob, oc) = normal_equations_fit(&points);
        assert!((a - oa).abs() < 1e-8, "seed {seed}: a {a} vs {oa}");
        assert!((b - ob).abs() < 1e-8, "seed {seed}: b {b} vs {ob}");
        assert!((c - oc).abs() < 1e-8, "seed {seed}: c {c} vs {oc}");
    }
}

/// Bisection on the fitted polynomial; the oracle for the closed-form root.
fn bisect_crossing(fit: &ScalingFit, level: f64, lo: f64, hi: f64) -> f64 {
    let mut lo = lo;
    let mut hi = hi;
    assert!(fit.evaluate(lo) < level && fit.evaluate(hi) > level);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fit.evaluate(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn threshold_crossing_matches_bisection() {
    // planted upward quadratic crossing log10(1e4) = 4 between s=5 and s=6
    // (plant(5) = 3.5, plant(6) = 7); closed form root is 2 + sqrt(10)
    let plant = |s: f64| 0.5 * s * s - 2.0 * s + 1.0;
    let points: Vec<(f64, f64)> = [4.0, 5.0, 6.0, 7.0, 8.0].iter().map(|&s| (s, plant(s))).collect();
    let fit = fit_quadratic(&points).unwrap();
    let level = 4.0;
    let crossing = fit.upward_crossing(level).expect("crossing exists");
    assert!((5.0..6.0).contains(&crossing), "crossing {crossing}");
    let oracle = bisect_crossing(&fit, level, 5.0, 6.0);
    assert!((crossing - oracle).abs() < 1e-6, "{crossing} vs {oracle}");
    assert!((crossing - (2.0 + 10f64.sqrt())).abs() < 1e-6);
}

#[test]
fn predict_divergence_flags_planted_cases() {
    // fits planted above and below the threshold at the target scale
    let above: Vec<(f64, f64)> = (0..4).map(|i| (5.0 + i as f64, 4.5 + 0.2 * i as f64)).collect();
    let below: Vec<(f64, f64)> = (0..4).map(|i| (5.0 + i as f64, 2.0 + 0.1 * i as f64)).collect();
    let fa = fit_quadratic(&above).unwrap();
    let fb = fit_quadratic(&below).unwrap();
    let pa = predict_divergence(&fa, 1e9, 1e4);
    let pb = predict_divergence(&fb, 1e9, 1e4);
    assert!(pa.will_diverge);
    assert!(!pb.will_diverge);
    // predicted value is the fit evaluated in linear space
    assert!((pa.predicted_value.log10() - fa.evaluate(9.0)).abs() < 1e-9);
}

fn sweep_setup() -> TrainSetup {
    TrainSetup {
        model: ModelConfig {
            model_dim: 16,
            num_layers: 1,
            num_heads: 2,
            head_dim: 8,
            vocab_size: 32,
            context_length: 8,
            ..ModelConfig::default()
        },
        optimizer: OptimizerConfig {
            warmup_steps: 4,
            total_steps: 40,
            ..OptimizerConfig::default()
        },
        corpus: CorpusSpec { vocab_size: 32, ..CorpusSpec::default() },
        batch_size: 2,
        seed: 11,
        log_interval: 5,
        eval_interval: 20,
        eval_sequences: 4,
    }
}

#[test]
fn single_point_sweep_has_zero_sensitivity() {
    let result = run_sweep::<f64>(&sweep_setup(), &[1e-3], 1).unwrap();
    assert_eq!(result.lr_sensitivity, 0.0);
    assert_eq!(result.grid.len(), 1);
    assert_eq!(result.best_loss, result.grid[0].final_eval_loss);
}

#[test]
fn sweep_is_deterministic_and_order_independent() {
    let grid = [3e-3, 1e-3, 1e-2];
    let seq = run_sweep::<f64>(&sweep_setup(), &grid, 1).unwrap();
    let par = run_sweep::<f64>(&sweep_setup(), &grid, 2).unwrap();
    assert_eq!(seq.grid.len(), par.grid.len());
    for (a, b) in seq.grid.iter().zip(&par.grid) {
        assert_eq!(a.lr, b.lr);
        assert_eq!(a.final_eval_loss.to_bits(), b.final_eval_loss.to_bits());
    }
    assert_eq!(seq.lr_sensitivity.to_bits(), par.lr_sensitivity.to_bits());
    let again = run_sweep::<f64>(&sweep_setup(), &grid, 2).unwrap();
    assert_eq!(seq.lr_sensitivity.to_bits(), again.lr_sensitivity.to_bits());
}

proptest! {
    #[test]
    fn sensitivity_shift_invariance(seed in 0u64..100, shift in -3.0f64..3.0) {
        let losses: Vec<(f64, f64)> = LR_GRID
            .iter()
            .enumerate()
            .map(|(i, &lr)| (lr, 2.0 + 4.0 * pseudo(seed, i)))
            .collect();
        let shifted: Vec<(f64, f64)> = losses.iter().map(|&(lr, l)| (lr, l + shift)).collect();
        let a = lr_sensitivity(&losses, &LR_GRID).unwrap();
        let b = lr_sensitivity(&shifted, &LR_GRID).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn sensitivity_scales_with_gap_scaling(seed in 0u64..100, scale in 0.1f64..5.0) {
        let base: Vec<(f64, f64)> = LR_GRID
            .iter()
            .enumerate()
            .map(|(i, &lr)| (lr, 2.0 + 4.0 * pseudo(seed, i)))
            .collect();
        let min = base.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min);
        let scaled: Vec<(f64, f64)> = base.iter().map(|&(lr, l)| (lr, min + scale * (l - min))).collect();
        let a = lr_sensitivity(&base, &LR_GRID).unwrap();
        let b = lr_sensitivity(&scaled, &LR_GRID).unwrap();
        prop_assert!((b - scale * a).abs() < 1e-9);
    }

    #[test]
    fn fit_reproduces_arbitrary_quadratics(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0) {
        let points: Vec<(f64, f64)> = (0..6).map(|i| {
            let s = 3.0 + i as f64 * 0.7;
            (s, a * s * s + b * s + c)
        }).collect();
        let fit = fit_quadratic(&points).unwrap();
        prop_assert!(fit.residual < 1e-9);
        let (fa, fb, fc) = fit.coefficients;
        prop_assert!((fa - a).abs() < 1e-7);
        prop_assert!((fb - b).abs() < 1e-7);
        prop_assert!((fc - c).abs() < 1e-7);
    }
}
