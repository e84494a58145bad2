//! Transform correctness against a naive O(N²) DFT oracle, plus the
//! algebraic identities (Parseval, linearity, adjoint) that the loss
//! gradients depend on.

use freqseg::fft::FftPlan;
use freqseg::grid::{Grid, SpectrumGrid};
use freqseg::rng::SplitMix64;
use num_complex::Complex;

/// Direct evaluation of the unnormalized 2D DFT definition.
fn naive_dft2(g: &Grid) -> Vec<Complex<f64>> {
    let (h, w) = (g.height(), g.width());
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for m in 0..h {
                for n in 0..w {
                    let angle = -std::f64::consts::TAU
                        * (k as f64 * m as f64 / h as f64 + l as f64 * n as f64 / w as f64);
                    acc += Complex::new(angle.cos(), angle.sin()) * g.at(m, n) as f64;
                }
            }
            out[k * w + l] = acc;
        }
    }
    out
}

fn random_grid(h: usize, w: usize, rng: &mut SplitMix64) -> Grid {
    let data = (0..h * w).map(|_| rng.signed_unit() as f32).collect();
    Grid::from_vec(h, w, data).unwrap()
}

fn spectrum_max_norm(s: &[Complex<f64>]) -> f64 {
    s.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

#[test]
fn matches_naive_dft_for_1d_rows_up_to_32() {
    let mut rng = SplitMix64::new(101);
    for n in 1..=32 {
        let g = random_grid(1, n, &mut rng);
        let plan = FftPlan::new(1, n);
        let got = plan.fft2(&g).unwrap();
        let want = naive_dft2(&g);
        let scale = spectrum_max_norm(&want).max(1.0);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).norm() / scale < 1e-5, "n={n}: {a} vs {b}");
        }
    }
}

#[test]
fn matches_naive_dft_for_1d_columns_up_to_32() {
    let mut rng = SplitMix64::new(202);
    for n in 1..=32 {
        let g = random_grid(n, 1, &mut rng);
        let plan = FftPlan::new(n, 1);
        let got = plan.fft2(&g).unwrap();
        let want = naive_dft2(&g);
        let scale = spectrum_max_norm(&want).max(1.0);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).norm() / scale < 1e-5, "n={n}: {a} vs {b}");
        }
    }
}

#[test]
fn matches_naive_dft_on_mixed_2d_sizes() {
    // Hits smooth, prime (Bluestein), and mixed combinations.
    let sizes = [
        (2, 3),
        (4, 4),
        (5, 7),
        (8, 6),
        (9, 16),
        (13, 13),
        (17, 4),
        (19, 23),
        (29, 2),
        (31, 31),
        (12, 10),
        (21, 22),
    ];
    let mut rng = SplitMix64::new(303);
    for &(h, w) in &sizes {
        let g = random_grid(h, w, &mut rng);
        let plan = FftPlan::new(h, w);
        let got = plan.fft2(&g).unwrap();
        let want = naive_dft2(&g);
        let scale = spectrum_max_norm(&want).max(1.0);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).norm() / scale < 1e-5, "{h}x{w}: {a} vs {b}");
        }
    }
}

#[test]
fn parseval_identity_holds_to_1e6() {
    let mut rng = SplitMix64::new(404);
    for &(h, w) in &[(8, 8), (16, 16), (7, 11), (24, 18), (64, 64)] {
        let g = random_grid(h, w, &mut rng);
        let plan = FftPlan::new(h, w);
        let s = plan.fft2(&g).unwrap();
        let freq_energy = s.energy();
        let spatial_energy = (h * w) as f64 * g.reduce_sum_squares();
        let rel = (freq_energy - spatial_energy).abs() / spatial_energy;
        assert!(rel < 1e-6, "{h}x{w}: rel err {rel}");
    }
}

#[test]
fn transform_is_linear() {
    let mut rng = SplitMix64::new(505);
    let plan = FftPlan::new(12, 15);
    for _ in 0..10 {
        let g = random_grid(12, 15, &mut rng);
        let h = random_grid(12, 15, &mut rng);
        let (a, b) = (rng.signed_unit() as f32 * 3.0, rng.signed_unit() as f32 * 3.0);
        let combo = g.scale(a).add(&h.scale(b)).unwrap();
        let lhs = plan.fft2(&combo).unwrap();
        let fg = plan.fft2(&g).unwrap();
        let fh = plan.fft2(&h).unwrap();
        let scale = spectrum_max_norm(lhs.data()).max(1.0);
        for i in 0..lhs.data().len() {
            let rhs = fg.data()[i] * a as f64 + fh.data()[i] * b as f64;
            assert!((lhs.data()[i] - rhs).norm() / scale < 1e-5);
        }
    }
}

/// Re⟨fft2(g), s⟩ = ⟨g, Re(H·W·ifft2(s))⟩ — the exact statement the
/// spectral-loss gradient pullback relies on.
#[test]
fn adjoint_identity_holds_on_100_random_cases() {
    let mut rng = SplitMix64::new(606);
    for case in 0..100 {
        let (h, w) = (2 + (case % 13), 2 + (case % 7) * 3);
        let plan = FftPlan::new(h, w);
        let g = random_grid(h, w, &mut rng);
        let s = SpectrumGrid::from_vec(
            h,
            w,
            (0..h * w)
                .map(|_| Complex::new(rng.signed_unit(), rng.signed_unit()))
                .collect(),
        )
        .unwrap();

        let fg = plan.fft2(&g).unwrap();
        let lhs: f64 = fg
            .data()
            .iter()
            .zip(s.data())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();

        let back = plan.ifft2(&s).unwrap();
        let rhs: f64 = g
            .data()
            .iter()
            .zip(back.data())
            .map(|(&gv, c)| gv as f64 * (h * w) as f64 * c.re)
            .sum();

        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        assert!(rel < 1e-5, "case {case} ({h}x{w}): {lhs} vs {rhs}");
    }
}
