//! Exact 2D discrete Fourier transform for arbitrary grid sizes.
//!
//! Convention: unnormalized forward transform
//! `F[k,l] = Σ_{m,n} g[m,n]·exp(−2πi(km/H + ln/W))`, inverse scaled by
//! `1/(H·W)`. Rows and columns are transformed with a mixed-radix
//! Cooley-Tukey kernel when every prime factor of the length is ≤ 13,
//! and with Bluestein's chirp-z algorithm otherwise, so any size works
//! (the losses run at 64×64 by default but nothing depends on that).
//!
//! The adjoint of the forward transform — needed to pull frequency-domain
//! loss gradients back to pixel space — is `H·W · ifft2`: for real `g`,
//! `Re⟨fft2(g), s⟩ = ⟨g, Re(H·W·ifft2(s))⟩`.

use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex;
use thiserror::Error;

use crate::grid::{Grid, SpectrumGrid};

#[derive(Debug, Error, PartialEq)]
pub enum FftError {
    #[error("plan is {plan_h}x{plan_w} but input is {got_h}x{got_w}")]
    DimensionMismatch {
        plan_h: usize,
        plan_w: usize,
        got_h: usize,
        got_w: usize,
    },
}

/// Transforms executed since process start (forward and inverse).
///
/// Exists so the trainer can assert that a purely spatial configuration
/// never touches the frequency domain.
static INVOCATIONS: AtomicU64 = AtomicU64::new(0);

pub fn invocation_count() -> u64 {
    INVOCATIONS.load(Ordering::Relaxed)
}

/// Largest prime radix the mixed-radix kernel handles directly.
const MAX_RADIX: usize = 13;

type C64 = Complex<f64>;

/// Precomputed tables for one transform size.
pub struct FftPlan {
    height: usize,
    width: usize,
    rows: DimPlan,
    cols: DimPlan,
}

struct DimPlan {
    n: usize,
    /// root[t] = exp(−2πi·t/n)
    root: Vec<C64>,
    kind: DimKind,
}

enum DimKind {
    /// All prime factors ≤ MAX_RADIX; recursive Cooley-Tukey.
    Smooth,
    /// Chirp-z through a power-of-two convolution.
    Bluestein {
        m: usize,
        chirp: Vec<C64>,
        /// Forward FFT (length m) of the padded conjugate chirp.
        b_hat: Vec<C64>,
        inner: Box<DimPlan>,
    },
}

fn root_table(n: usize) -> Vec<C64> {
    (0..n)
        .map(|t| {
            let angle = -std::f64::consts::TAU * t as f64 / n as f64;
            Complex::new(angle.cos(), angle.sin())
        })
        .collect()
}

fn smallest_factor(n: usize) -> usize {
    for p in [2, 3, 5, 7, 11, 13] {
        if n % p == 0 {
            return p;
        }
    }
    n
}

fn is_smooth(mut n: usize) -> bool {
    for p in [2, 3, 5, 7, 11, 13] {
        while n % p == 0 {
            n /= p;
        }
    }
    n == 1
}

impl DimPlan {
    fn new(n: usize) -> Self {
        assert!(n > 0, "transform length must be positive");
        if is_smooth(n) {
            return Self {
                n,
                root: root_table(n),
                kind: DimKind::Smooth,
            };
        }
        // Bluestein: x_k w^{k²/2} convolved with the conjugate chirp.
        let m = (2 * n - 1).next_power_of_two();
        let two_n = 2 * n as u128;
        let chirp: Vec<C64> = (0..n)
            .map(|k| {
                let ksq = (k as u128 * k as u128 % two_n) as f64;
                let angle = -std::f64::consts::PI * ksq / n as f64;
                Complex::new(angle.cos(), angle.sin())
            })
            .collect();
        let inner = Box::new(DimPlan::new(m));
        let mut b = vec![Complex::new(0.0, 0.0); m];
        b[0] = chirp[0].conj();
        for k in 1..n {
            b[k] = chirp[k].conj();
            b[m - k] = chirp[k].conj();
        }
        let mut b_hat = vec![Complex::new(0.0, 0.0); m];
        inner.forward(&b, &mut b_hat);
        Self {
            n,
            root: root_table(n),
            kind: DimKind::Bluestein {
                m,
                chirp,
                b_hat,
                inner,
            },
        }
    }

    /// Forward DFT of `src` into `dst`, both of length `n`.
    fn forward(&self, src: &[C64], dst: &mut [C64]) {
        debug_assert_eq!(src.len(), self.n);
        debug_assert_eq!(dst.len(), self.n);
        match &self.kind {
            DimKind::Smooth => fft_recursive(src, 0, 1, dst, self.n, 1, &self.root),
            DimKind::Bluestein {
                m,
                chirp,
                b_hat,
                inner,
            } => {
                let mut a = vec![Complex::new(0.0, 0.0); *m];
                for k in 0..self.n {
                    a[k] = src[k] * chirp[k];
                }
                let mut a_hat = vec![Complex::new(0.0, 0.0); *m];
                inner.forward(&a, &mut a_hat);
                for (v, b) in a_hat.iter_mut().zip(b_hat) {
                    *v *= b;
                }
                // Inverse inner transform via conjugation.
                for v in a_hat.iter_mut() {
                    *v = v.conj();
                }
                inner.forward(&a_hat, &mut a);
                let scale = 1.0 / *m as f64;
                for k in 0..self.n {
                    dst[k] = a[k].conj() * scale * chirp[k];
                }
            }
        }
    }
}

/// Recursive decimation-in-time with in-place butterfly combine.
///
/// `tw_stride` maps exponents of the current sublength onto the full-size
/// root table: ω_sub^t = root[(t·tw_stride) mod root.len()].
fn fft_recursive(
    src: &[C64],
    offset: usize,
    stride: usize,
    dst: &mut [C64],
    n: usize,
    tw_stride: usize,
    root: &[C64],
) {
    if n == 1 {
        dst[0] = src[offset];
        return;
    }
    let r = smallest_factor(n);
    debug_assert!(r <= MAX_RADIX);
    let m = n / r;
    for j in 0..r {
        fft_recursive(
            src,
            offset + j * stride,
            stride * r,
            &mut dst[j * m..(j + 1) * m],
            m,
            tw_stride * r,
            root,
        );
    }
    let full = root.len();
    let mut t = [Complex::new(0.0, 0.0); MAX_RADIX];
    for k in 0..m {
        for (j, slot) in t.iter_mut().enumerate().take(r) {
            *slot = dst[j * m + k] * root[(tw_stride * j * k) % full];
        }
        for q in 0..r {
            let mut acc = t[0];
            for (j, &tj) in t.iter().enumerate().take(r).skip(1) {
                acc += tj * root[(tw_stride * j * q * m) % full];
            }
            dst[q * m + k] = acc;
        }
    }
}

impl FftPlan {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            rows: DimPlan::new(width),
            cols: DimPlan::new(height),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn check(&self, h: usize, w: usize) -> Result<(), FftError> {
        if h != self.height || w != self.width {
            return Err(FftError::DimensionMismatch {
                plan_h: self.height,
                plan_w: self.width,
                got_h: h,
                got_w: w,
            });
        }
        Ok(())
    }

    /// Forward 2D transform of all rows then all columns of `buf`.
    fn transform_in_place(&self, buf: &mut [C64]) {
        let (h, w) = (self.height, self.width);
        let mut line_in = vec![Complex::new(0.0, 0.0); w.max(h)];
        let mut line_out = vec![Complex::new(0.0, 0.0); w.max(h)];
        for r in 0..h {
            let row = &mut buf[r * w..(r + 1) * w];
            line_in[..w].copy_from_slice(row);
            self.rows.forward(&line_in[..w], &mut line_out[..w]);
            row.copy_from_slice(&line_out[..w]);
        }
        for c in 0..w {
            for r in 0..h {
                line_in[r] = buf[r * w + c];
            }
            self.cols.forward(&line_in[..h], &mut line_out[..h]);
            for r in 0..h {
                buf[r * w + c] = line_out[r];
            }
        }
    }

    /// Unnormalized forward DFT of a real grid.
    pub fn fft2(&self, g: &Grid) -> Result<SpectrumGrid, FftError> {
        self.check(g.height(), g.width())?;
        INVOCATIONS.fetch_add(1, Ordering::Relaxed);
        let mut buf: Vec<C64> = g
            .data()
            .iter()
            .map(|&v| Complex::new(v as f64, 0.0))
            .collect();
        self.transform_in_place(&mut buf);
        Ok(SpectrumGrid::from_vec(self.height, self.width, buf)
            .expect("transform of finite input is finite"))
    }

    /// Inverse DFT with 1/(H·W) normalization; `ifft2(fft2(g))` recovers `g`.
    pub fn ifft2(&self, s: &SpectrumGrid) -> Result<SpectrumGrid, FftError> {
        self.check(s.height(), s.width())?;
        INVOCATIONS.fetch_add(1, Ordering::Relaxed);
        let mut buf: Vec<C64> = s.data().iter().map(|c| c.conj()).collect();
        self.transform_in_place(&mut buf);
        let scale = 1.0 / (self.height * self.width) as f64;
        for v in buf.iter_mut() {
            *v = v.conj() * scale;
        }
        Ok(SpectrumGrid::from_vec(self.height, self.width, buf)
            .expect("transform of finite input is finite"))
    }
}

/// Swaps quadrants so the DC bin lands at (⌊H/2⌋, ⌊W/2⌋).
///
/// An involution for even dimensions.
pub fn fftshift(s: &SpectrumGrid) -> SpectrumGrid {
    let (h, w) = (s.height(), s.width());
    let mut out = SpectrumGrid::zeros(h, w);
    for r in 0..h {
        let nr = (r + h / 2) % h;
        for c in 0..w {
            let nc = (c + w / 2) % w;
            out.data_mut()[nr * w + nc] = s.at(r, c);
        }
    }
    out
}

/// Rendered spectrum: log(1+|·|) of the shifted bins, min-max normalized
/// to [0,1]. A constant spectrum (degenerate range) maps to all-zeros.
pub fn log_magnitude_spectrum(s: &SpectrumGrid) -> Grid {
    let shifted = fftshift(s);
    let vals: Vec<f64> = shifted.data().iter().map(|c| (1.0 + c.norm()).ln()).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data: Vec<f32> = if range <= 0.0 {
        vec![0.0; vals.len()]
    } else {
        vals.iter().map(|v| ((v - lo) / range) as f32).collect()
    };
    Grid::from_vec(s.height(), s.width(), data).expect("normalized values are finite")
}
