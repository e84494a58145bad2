//! Differentiable segmentation losses with analytic gradients.
//!
//! The spatial composite is mean-over-classes of BCE + (1 − soft Dice).
//! The spectral correlation coefficient (SCC) compares predicted and
//! target masks in the frequency domain:
//!
//! ```text
//! SCC = 2·Σ_bins [Re(Y)Re(Ŷ) + Im(Y)Im(Ŷ)] / Σ_bins [|Y|² + |Ŷ|²]
//! ```
//!
//! with Y, Ŷ the 2D DFTs of target and prediction. SCC is 1 at a perfect
//! match and −1 at sign inversion, so the minimized spectral term is
//! 1 − SCC, mirroring the (1 − Dice) pattern. The full objective is
//! `spatial + λ · spectral`; the prediction entering the spectral term is
//! the soft probability channel, never a thresholded mask, which keeps
//! the term differentiable.
//!
//! Values and accumulators are `f64` throughout; only the returned
//! gradient grids quantize back to `f32`.

use num_complex::Complex;
use thiserror::Error;

use crate::fft::{FftError, FftPlan};
use crate::grid::{one_hot, Grid, GridError, LabelMask};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("expected {expected} prediction channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("both inputs are identically zero; the spectral ratio is 0/0")]
    DegenerateInput,
    #[error(transparent)]
    Fft(#[from] FftError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Loss scalar plus its exact gradient with respect to each prediction
/// channel.
#[derive(Clone, Debug)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<Grid>,
}

/// Weights and smoothing constants shared by all loss evaluations.
#[derive(Clone, Debug)]
pub struct LossConfig {
    /// Spectral weight λ ≥ 0.
    pub lambda: f64,
    /// Soft-Dice smoothing ε > 0.
    pub dice_epsilon: f64,
    /// Probability clipping bound in (0, 0.5) applied before logs.
    pub bce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            dice_epsilon: 1.0,
            bce_clamp: 1e-7,
        }
    }
}

fn check_shapes(pred: &Grid, target: &Grid) -> Result<(), LossError> {
    if !pred.same_shape(target) {
        return Err(LossError::ShapeMismatch(
            pred.height(),
            pred.width(),
            target.height(),
            target.width(),
        ));
    }
    Ok(())
}

/// Mean binary cross entropy over pixels.
///
/// Probabilities are clamped to `[c, 1−c]` before the logs; pixels where
/// the clamp fires get zero gradient (the clamped value is constant there).
pub fn bce(pred: &Grid, target: &Grid, cfg: &LossConfig) -> Result<LossResult, LossError> {
    check_shapes(pred, target)?;
    let c = cfg.bce_clamp;
    let inv_n = 1.0 / pred.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0f32; pred.len()];
    for (i, (&p_raw, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let p_raw = p_raw as f64;
        let t = t as f64;
        let clamped = p_raw < c || p_raw > 1.0 - c;
        let p = p_raw.clamp(c, 1.0 - c);
        value -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        if !clamped {
            grad[i] = ((p - t) / (p * (1.0 - p)) * inv_n) as f32;
        }
    }
    Ok(LossResult {
        value: value * inv_n,
        grad: vec![Grid::from_vec(pred.height(), pred.width(), grad)?],
    })
}

/// Soft Dice coefficient `(2Σpt + ε) / (Σp + Σt + ε)`.
///
/// Returns the coefficient itself (1 at perfect overlap); callers form
/// `1 − Dice` for the minimized term. The gradient is of the coefficient.
pub fn soft_dice(pred: &Grid, target: &Grid, cfg: &LossConfig) -> Result<LossResult, LossError> {
    check_shapes(pred, target)?;
    let eps = cfg.dice_epsilon;
    let mut inter = 0.0f64;
    let mut p_sum = 0.0f64;
    let mut t_sum = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        inter += p as f64 * t as f64;
        p_sum += p as f64;
        t_sum += t as f64;
    }
    let num = 2.0 * inter + eps;
    let den = p_sum + t_sum + eps;
    let value = num / den;
    let den_sq = den * den;
    let grad: Vec<f32> = target
        .data()
        .iter()
        .map(|&t| ((2.0 * t as f64 * den - num) / den_sq) as f32)
        .collect();
    Ok(LossResult {
        value,
        grad: vec![Grid::from_vec(pred.height(), pred.width(), grad)?],
    })
}

/// Validates the channel count against the mask: one channel per class,
/// or a single foreground channel for a binary mask.
fn check_channels(pred_channels: &[Grid], target: &LabelMask) -> Result<(), LossError> {
    let c = target.num_classes();
    let ok = pred_channels.len() == c || (pred_channels.len() == 1 && c == 2);
    if !ok {
        return Err(LossError::ChannelCount {
            expected: c,
            got: pred_channels.len(),
        });
    }
    Ok(())
}

/// Class index each prediction channel is scored against. For the binary
/// single-channel form the lone channel is the foreground (class 1).
fn channel_classes(pred_channels: &[Grid], target: &LabelMask) -> Vec<usize> {
    if pred_channels.len() == 1 && target.num_classes() == 2 {
        vec![1]
    } else {
        (0..pred_channels.len()).collect()
    }
}

/// Spatial composite: mean over classes of BCE + (1 − Dice) against each
/// class's one-hot target.
pub fn spatial_loss(
    pred_channels: &[Grid],
    target: &LabelMask,
    cfg: &LossConfig,
) -> Result<LossResult, LossError> {
    check_channels(pred_channels, target)?;
    let classes = channel_classes(pred_channels, target);
    let inv_c = 1.0 / classes.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(pred_channels.len());
    for (chan, &class) in pred_channels.iter().zip(&classes) {
        let t = one_hot(target, class)?;
        let b = bce(chan, &t, cfg)?;
        let d = soft_dice(chan, &t, cfg)?;
        value += (b.value + (1.0 - d.value)) * inv_c;
        let g = b.grad[0]
            .sub(&d.grad[0])
            .expect("bce and dice grads share the channel shape")
            .scale(inv_c as f32);
        grads.push(g);
    }
    Ok(LossResult { value, grad: grads })
}

/// Frequency-domain sums behind the SCC: numerator 2·Σ Re(Y·conj(Ŷ)) and
/// denominator Σ(|Y|²+|Ŷ|²).
struct SpectralTerms {
    num: f64,
    den: f64,
    pred_spec: Vec<Complex<f64>>,
    target_spec: Vec<Complex<f64>>,
}

fn spectral_terms(
    pred: &Grid,
    target: &Grid,
    plan: &FftPlan,
) -> Result<SpectralTerms, LossError> {
    check_shapes(pred, target)?;
    let pred_spec = plan.fft2(pred)?;
    let target_spec = plan.fft2(target)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (y, p) in target_spec.data().iter().zip(pred_spec.data()) {
        num += y.re * p.re + y.im * p.im;
        den += y.norm_sqr() + p.norm_sqr();
    }
    if den == 0.0 {
        return Err(LossError::DegenerateInput);
    }
    Ok(SpectralTerms {
        num: 2.0 * num,
        den,
        pred_spec: pred_spec.data().to_vec(),
        target_spec: target_spec.data().to_vec(),
    })
}

/// Spectral correlation coefficient between two grids. Always in [−1, 1].
pub fn scc(pred: &Grid, target: &Grid, plan: &FftPlan) -> Result<f64, LossError> {
    let t = spectral_terms(pred, target, plan)?;
    Ok(t.num / t.den)
}

/// Minimized spectral term `1 − SCC` with its analytic gradient.
///
/// The gradient is assembled per frequency bin and pulled back to pixel
/// space through the transform adjoint, `Re(H·W · ifft2(·))`.
pub fn spectral_loss(
    pred: &Grid,
    target: &Grid,
    plan: &FftPlan,
) -> Result<LossResult, LossError> {
    let t = spectral_terms(pred, target, plan)?;
    let (u, v) = (t.num, t.den);
    let value = 1.0 - u / v;

    // d(1−u/v)/dP_k combined over real and imaginary parts:
    //   G_k = −(2/v²)·(v·Y_k − u·P_k)
    let scale = -2.0 / (v * v);
    let freq_grad: Vec<Complex<f64>> = t
        .target_spec
        .iter()
        .zip(&t.pred_spec)
        .map(|(y, p)| (y * v - p * u) * scale)
        .collect();
    let g_spec = crate::grid::SpectrumGrid::from_vec(pred.height(), pred.width(), freq_grad)?;
    let back = plan.ifft2(&g_spec)?;
    let hw = (pred.height() * pred.width()) as f64;
    let grad: Vec<f32> = back.data().iter().map(|c| (hw * c.re) as f32).collect();
    Ok(LossResult {
        value,
        grad: vec![Grid::from_vec(pred.height(), pred.width(), grad)?],
    })
}

/// Spatial and spectral parts of a full-objective evaluation, before the
/// λ weighting: `total = spatial + λ · spectral`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub spatial: f64,
    /// Mean spectral term over active classes (0 when λ = 0 or no class
    /// carries energy).
    pub spectral: f64,
}

/// Full objective: `spatial + λ · mean over active classes of spectral`.
///
/// A class is active when its one-hot target or its prediction channel
/// carries any energy; channels that are identically zero on both sides
/// are skipped rather than treated as 0/0. With λ = 0 the frequency
/// domain is never touched (no FFT runs at all).
pub fn final_loss(
    pred_channels: &[Grid],
    target: &LabelMask,
    cfg: &LossConfig,
    plan: &FftPlan,
) -> Result<LossResult, LossError> {
    final_loss_components(pred_channels, target, cfg, plan).map(|(r, _)| r)
}

/// [`final_loss`] plus the decomposed spatial/spectral values, so
/// training logs can track each term separately.
pub fn final_loss_components(
    pred_channels: &[Grid],
    target: &LabelMask,
    cfg: &LossConfig,
    plan: &FftPlan,
) -> Result<(LossResult, LossComponents), LossError> {
    let mut result = spatial_loss(pred_channels, target, cfg)?;
    let mut parts = LossComponents {
        spatial: result.value,
        spectral: 0.0,
    };
    if cfg.lambda == 0.0 {
        return Ok((result, parts));
    }
    let classes = channel_classes(pred_channels, target);
    let mut active: Vec<(usize, Grid)> = Vec::new();
    for (i, (chan, &class)) in pred_channels.iter().zip(&classes).enumerate() {
        let t = one_hot(target, class)?;
        let has_energy =
            t.data().iter().any(|&v| v != 0.0) || chan.data().iter().any(|&v| v != 0.0);
        if has_energy {
            active.push((i, t));
        }
    }
    if active.is_empty() {
        return Ok((result, parts));
    }
    let inv_active = 1.0 / active.len() as f64;
    let weight = cfg.lambda * inv_active;
    for (i, t) in active {
        let s = spectral_loss(&pred_channels[i], &t, plan)?;
        parts.spectral += s.value * inv_active;
        result.value += weight * s.value;
        result.grad[i] = result.grad[i]
            .add(&s.grad[0].scale(weight as f32))
            .expect("spectral grad shares the channel shape");
    }
    Ok((result, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, v: &[f32]) -> Grid {
        Grid::from_vec(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn bce_at_clamp_floor() {
        let cfg = LossConfig::default();
        let pred = grid(1, 2, &[1.0, 1.0]);
        let target = grid(1, 2, &[1.0, 1.0]);
        let r = bce(&pred, &target, &cfg).unwrap();
        let floor = -(1.0 - cfg.bce_clamp).ln();
        assert!((r.value - floor).abs() < 1e-12);
        assert!(r.grad[0].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bce_uniform_half_is_log_two() {
        let cfg = LossConfig::default();
        let pred = grid(1, 2, &[0.5, 0.5]);
        let target = grid(1, 2, &[1.0, 0.0]);
        let r = bce(&pred, &target, &cfg).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn dice_perfect_overlap_is_one() {
        let cfg = LossConfig::default(); // epsilon = 1
        let pred = grid(2, 2, &[1.0; 4]);
        let target = grid(2, 2, &[1.0; 4]);
        let r = soft_dice(&pred, &target, &cfg).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn dice_two_thirds_case() {
        let cfg = LossConfig {
            dice_epsilon: 0.0,
            ..LossConfig::default()
        };
        let pred = grid(1, 4, &[1.0, 1.0, 0.0, 0.0]);
        let target = grid(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        let r = soft_dice(&pred, &target, &cfg).unwrap();
        assert!((r.value - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_loss_channel_count_mismatch() {
        let cfg = LossConfig::default();
        let mask = LabelMask::zeros(2, 2, 3);
        let chans = vec![Grid::filled(2, 2, 0.5); 2];
        assert!(matches!(
            spatial_loss(&chans, &mask, &cfg),
            Err(LossError::ChannelCount {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn spatial_loss_uniform_prediction_matches_hand_formula() {
        let cfg = LossConfig::default();
        // 4x4 balanced binary target: 8 pixels of each class.
        let mut mask = LabelMask::zeros(4, 4, 2);
        for i in 0..8 {
            mask.set(i / 4, i % 4, 1);
        }
        let chans = vec![Grid::filled(4, 4, 0.5), Grid::filled(4, 4, 0.5)];
        let r = spatial_loss(&chans, &mask, &cfg).unwrap();
        // Per class: BCE = ln 2; Dice = (2·0.5·8 + 1)/(0.5·16 + 8 + 1).
        let dice = (2.0 * 0.5 * 8.0 + 1.0) / (8.0 + 8.0 + 1.0);
        let expected = std::f64::consts::LN_2 + (1.0 - dice);
        assert!((r.value - expected).abs() < 1e-9, "{} vs {expected}", r.value);
    }

    #[test]
    fn scc_self_correlation_is_one() {
        let plan = FftPlan::new(4, 4);
        let g = grid(4, 4, &{
            let mut v = [0.0f32; 16];
            v[5] = 1.0;
            v[6] = 1.0;
            v
        });
        let s = scc(&g, &g, &plan).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scc_half_scale_is_point_eight() {
        let plan = FftPlan::new(4, 4);
        let mut v = [0.0f32; 16];
        v[1] = 1.0;
        v[10] = 1.0;
        let target = grid(4, 4, &v);
        let pred = target.scale(0.5);
        let s = scc(&pred, &target, &plan).unwrap();
        assert!((s - 0.8).abs() < 1e-12);
    }

    #[test]
    fn scc_sign_flip_is_minus_one() {
        let plan = FftPlan::new(4, 4);
        let mut v = [0.0f32; 16];
        v[3] = 1.0;
        let target = grid(4, 4, &v);
        let pred = target.scale(-1.0);
        let s = scc(&pred, &target, &plan).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
    }

    #[test]
    fn scc_both_zero_is_degenerate() {
        let plan = FftPlan::new(4, 4);
        let z = Grid::zeros(4, 4);
        assert_eq!(scc(&z, &z, &plan), Err(LossError::DegenerateInput));
    }

    #[test]
    fn spectral_loss_zero_at_match_with_zero_grad() {
        let plan = FftPlan::new(8, 8);
        let mut v = [0.0f32; 64];
        for i in 18..22 {
            v[i] = 1.0;
        }
        let target = grid(8, 8, &v);
        let r = spectral_loss(&target, &target, &plan).unwrap();
        assert!(r.value.abs() < 1e-12);
        let max_g = r.grad[0].data().iter().fold(0.0f32, |m, g| m.max(g.abs()));
        assert!(max_g < 1e-5, "max grad {max_g}");
    }

    #[test]
    fn spectral_loss_half_scale_is_point_two() {
        let plan = FftPlan::new(4, 4);
        let mut v = [0.0f32; 16];
        v[9] = 1.0;
        let target = grid(4, 4, &v);
        let pred = target.scale(0.5);
        let r = spectral_loss(&pred, &target, &plan).unwrap();
        assert!((r.value - 0.2).abs() < 1e-12);
    }

    #[test]
    fn final_loss_with_zero_lambda_is_spatial_and_runs_no_fft() {
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let plan = FftPlan::new(4, 4);
        let mut mask = LabelMask::zeros(4, 4, 2);
        mask.set(1, 1, 1);
        let chans = vec![Grid::filled(4, 4, 0.6), Grid::filled(4, 4, 0.4)];
        let before = crate::fft::invocation_count();
        let f = final_loss(&chans, &mask, &cfg, &plan).unwrap();
        let s = spatial_loss(&chans, &mask, &cfg).unwrap();
        assert_eq!(f.value, s.value);
        assert_eq!(crate::fft::invocation_count(), before);
    }

    #[test]
    fn final_loss_is_linear_in_lambda() {
        let plan = FftPlan::new(4, 4);
        let mut mask = LabelMask::zeros(4, 4, 2);
        mask.set(2, 3, 1);
        mask.set(2, 2, 1);
        let chans = vec![Grid::filled(4, 4, 0.7), Grid::filled(4, 4, 0.3)];
        let at = |lambda: f64| {
            let cfg = LossConfig {
                lambda,
                ..LossConfig::default()
            };
            final_loss(&chans, &mask, &cfg, &plan).unwrap().value
        };
        let (v0, v1) = (at(0.0), at(1.0));
        for &l in &[0.2, 0.5, 0.9] {
            let lhs = at(l) - v0;
            let rhs = l * (v1 - v0);
            assert!((lhs - rhs).abs() < 1e-6, "lambda {l}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn final_loss_perfect_prediction_has_no_spectral_term() {
        let plan = FftPlan::new(4, 4);
        let mut mask = LabelMask::zeros(4, 4, 2);
        mask.set(0, 0, 1);
        mask.set(0, 1, 1);
        let fg = one_hot(&mask, 1).unwrap();
        let bg = one_hot(&mask, 0).unwrap();
        let chans = vec![bg, fg];
        let with = final_loss(
            &chans,
            &mask,
            &LossConfig {
                lambda: 0.2,
                ..LossConfig::default()
            },
            &plan,
        )
        .unwrap();
        let without = spatial_loss(&chans, &mask, &LossConfig::default()).unwrap();
        assert!((with.value - without.value).abs() < 1e-12);
    }
}
