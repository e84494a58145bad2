//! Gradient fidelity: every analytic loss gradient must match a central
//! finite-difference estimate computed in double precision, and the SCC
//! must satisfy its closed-form scaling and invariance identities.

use freqseg::fft::FftPlan;
use freqseg::grid::{Grid, LabelMask};
use freqseg::losses::{
    bce, final_loss, scc, soft_dice, spatial_loss, spectral_loss, LossConfig,
};
use freqseg::rng::SplitMix64;

const FD_STEP: f64 = 1e-3;

/// Central finite differences of a scalar loss over one prediction grid.
/// The effective step is read back from the perturbed f32 values so the
/// estimate is not polluted by rounding of x ± h.
fn fd_grad(grid: &Grid, mut f: impl FnMut(&Grid) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for i in 0..grid.len() {
        let x = grid.data()[i];
        let mut plus = grid.clone();
        plus.data_mut()[i] = (x as f64 + FD_STEP) as f32;
        let mut minus = grid.clone();
        minus.data_mut()[i] = (x as f64 - FD_STEP) as f32;
        let h_eff = (plus.data()[i] as f64 - minus.data()[i] as f64) / 2.0;
        out[i] = (f(&plus) - f(&minus)) / (2.0 * h_eff);
    }
    out
}

/// Max elementwise error scaled by the gradient magnitude (max norm).
fn scaled_max_error(analytic: &[f32], fd: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .map(|&v| v.abs() as f64)
        .chain(fd.iter().map(|&v| v.abs()))
        .fold(0.0, f64::max)
        .max(1e-12);
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| (a as f64 - b).abs() / scale)
        .fold(0.0, f64::max)
}

fn random_probs(h: usize, w: usize, rng: &mut SplitMix64) -> Grid {
    let data = (0..h * w)
        .map(|_| rng.range_f64(0.05, 0.95) as f32)
        .collect();
    Grid::from_vec(h, w, data).unwrap()
}

fn random_binary(h: usize, w: usize, rng: &mut SplitMix64) -> Grid {
    let data = (0..h * w)
        .map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 })
        .collect();
    Grid::from_vec(h, w, data).unwrap()
}

fn random_mask(h: usize, w: usize, num_classes: usize, rng: &mut SplitMix64) -> LabelMask {
    let data = (0..h * w)
        .map(|_| rng.below(num_classes as u64) as u8)
        .collect();
    LabelMask::from_vec(h, w, num_classes, data).unwrap()
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let cfg = LossConfig::default();
    let mut rng = SplitMix64::new(21);
    let pred = random_probs(8, 8, &mut rng);
    let target = random_binary(8, 8, &mut rng);
    let analytic = bce(&pred, &target, &cfg).unwrap();
    let fd = fd_grad(&pred, |p| bce(p, &target, &cfg).unwrap().value);
    let err = scaled_max_error(analytic.grad[0].data(), &fd);
    assert!(err < 1e-4, "max scaled error {err}");
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let cfg = LossConfig::default();
    let mut rng = SplitMix64::new(22);
    let pred = random_probs(8, 8, &mut rng);
    let target = random_binary(8, 8, &mut rng);
    let analytic = soft_dice(&pred, &target, &cfg).unwrap();
    let fd = fd_grad(&pred, |p| soft_dice(p, &target, &cfg).unwrap().value);
    let err = scaled_max_error(analytic.grad[0].data(), &fd);
    assert!(err < 1e-4, "max scaled error {err}");
}

#[test]
fn spatial_gradient_matches_finite_differences() {
    let cfg = LossConfig::default();
    let mut rng = SplitMix64::new(23);
    let mask = random_mask(8, 8, 3, &mut rng);
    let chans: Vec<Grid> = (0..3).map(|_| random_probs(8, 8, &mut rng)).collect();
    let analytic = spatial_loss(&chans, &mask, &cfg).unwrap();
    for k in 0..3 {
        let fd = fd_grad(&chans[k], |p| {
            let mut c = chans.clone();
            c[k] = p.clone();
            spatial_loss(&c, &mask, &cfg).unwrap().value
        });
        let err = scaled_max_error(analytic.grad[k].data(), &fd);
        assert!(err < 1e-4, "channel {k}: max scaled error {err}");
    }
}

#[test]
fn spectral_gradient_matches_finite_differences_on_20_instances() {
    let plan = FftPlan::new(16, 16);
    let mut rng = SplitMix64::new(24);
    for case in 0..20 {
        let pred = random_probs(16, 16, &mut rng);
        let target = random_binary(16, 16, &mut rng);
        let analytic = spectral_loss(&pred, &target, &plan).unwrap();
        let fd = fd_grad(&pred, |p| spectral_loss(p, &target, &plan).unwrap().value);
        let err = scaled_max_error(analytic.grad[0].data(), &fd);
        assert!(err < 1e-4, "case {case}: max scaled error {err}");
    }
}

#[test]
fn final_gradient_matches_finite_differences_on_20_instances() {
    let plan = FftPlan::new(16, 16);
    let cfg = LossConfig::default();
    let mut rng = SplitMix64::new(25);
    for case in 0..20 {
        let mask = random_mask(16, 16, 3, &mut rng);
        let chans: Vec<Grid> = (0..3).map(|_| random_probs(16, 16, &mut rng)).collect();
        let analytic = final_loss(&chans, &mask, &cfg, &plan).unwrap();
        let k = case % 3;
        let fd = fd_grad(&chans[k], |p| {
            let mut c = chans.clone();
            c[k] = p.clone();
            final_loss(&c, &mask, &cfg, &plan).unwrap().value
        });
        let err = scaled_max_error(analytic.grad[k].data(), &fd);
        assert!(err < 1e-4, "case {case} channel {k}: max scaled error {err}");
    }
}

#[test]
fn scc_closed_form_scaling() {
    let plan = FftPlan::new(8, 8);
    let mut rng = SplitMix64::new(26);
    let target = random_binary(8, 8, &mut rng);
    for &(c, want) in &[(0.5f32, 0.8f64), (2.0, 0.8), (1.0, 1.0)] {
        let got = scc(&target.scale(c), &target, &plan).unwrap();
        let closed = 2.0 * c as f64 / (1.0 + (c as f64) * (c as f64));
        assert!((got - want).abs() < 1e-9, "c={c}: {got}");
        assert!((got - closed).abs() < 1e-9);
    }
}

#[test]
fn scc_invariant_under_common_rescaling() {
    let plan = FftPlan::new(8, 8);
    let mut rng = SplitMix64::new(27);
    for _ in 0..50 {
        let a = random_probs(8, 8, &mut rng);
        let b = random_binary(8, 8, &mut rng);
        let base = scc(&a, &b, &plan).unwrap();
        for &c in &[0.25f32, 3.0, -2.0] {
            let scaled = scc(&a.scale(c), &b.scale(c), &plan).unwrap();
            assert!(
                (scaled - base).abs() / base.abs().max(1e-6) < 1e-6,
                "c={c}: {scaled} vs {base}"
            );
        }
    }
}

/// By Parseval the SCC equals the spatial-domain ratio 2⟨y,ŷ⟩/(‖y‖²+‖ŷ‖²)
/// over full spectra. Cross-checks the FFT path; the value carries no
/// frequency information, only the gradient field's distribution does.
#[test]
fn scc_equals_spatial_ratio_by_parseval() {
    let plan = FftPlan::new(12, 9);
    let mut rng = SplitMix64::new(28);
    for _ in 0..20 {
        let a = random_probs(12, 9, &mut rng);
        let b = random_binary(12, 9, &mut rng);
        let freq = scc(&a, &b, &plan).unwrap();
        let dot: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        let spatial = 2.0 * dot / (a.reduce_sum_squares() + b.reduce_sum_squares());
        assert!((freq - spatial).abs() < 1e-5, "{freq} vs {spatial}");
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        /// SCC stays within [−1, 1] for arbitrary nonzero pairs.
        #[test]
        fn scc_is_bounded(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let plan = FftPlan::new(6, 6);
            let a_data: Vec<f32> = (0..36).map(|_| rng.signed_unit() as f32).collect();
            let b_data: Vec<f32> = (0..36).map(|_| rng.signed_unit() as f32).collect();
            let a = Grid::from_vec(6, 6, a_data).unwrap();
            let b = Grid::from_vec(6, 6, b_data).unwrap();
            let s = scc(&a, &b, &plan).unwrap();
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s), "scc {}", s);
        }
    }
}
