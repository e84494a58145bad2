//! Convolution, upsampling, and softmax kernels with hand-written
//! backward passes, plus the encoder-decoder wiring.
//!
//! Tensors are channel-major (`c·h·w` planes of `f32`). All loops are
//! plain and sequential; determinism comes for free and the per-tap inner
//! loops over contiguous rows vectorize well enough for the toy scale.

use crate::grid::Grid;

use super::{NetSpec, TrainError};

#[derive(Clone, Debug)]
pub(super) struct Tensor3 {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Self {
            ch,
            h,
            w,
            data: vec![0.0; ch * h * w],
        }
    }

    pub fn from_grid(g: &Grid) -> Self {
        Self {
            ch: 1,
            h: g.height(),
            w: g.width(),
            data: g.data().to_vec(),
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        &mut self.data[c * hw..(c + 1) * hw]
    }
}

/// Valid output range [lo, hi) for kernel offset `k − 1` so the input
/// index `o·stride + k − 1` stays inside `[0, in_size)`.
#[inline]
fn tap_range(k: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    if in_size < k {
        return (lo, lo);
    }
    let hi = ((in_size - k) / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

/// 3×3 convolution, zero padding 1, given stride. Kernel layout is
/// `[out_ch][in_ch][3][3]`.
pub(super) fn conv3x3_forward(
    input: &Tensor3,
    kernel: &[f32],
    bias: &[f32],
    out_ch: usize,
    stride: usize,
) -> Tensor3 {
    let (ih, iw) = (input.h, input.w);
    let (oh, ow) = (ih.div_ceil(stride), iw.div_ceil(stride));
    let mut out = Tensor3::zeros(out_ch, oh, ow);
    for oc in 0..out_ch {
        out.plane_mut(oc).fill(bias[oc]);
        for ic in 0..input.ch {
            let in_plane = input.plane(ic);
            for ky in 0..3 {
                let (oy_lo, oy_hi) = tap_range(ky, stride, ih, oh);
                for kx in 0..3 {
                    let wgt = kernel[((oc * input.ch + ic) * 3 + ky) * 3 + kx];
                    let (ox_lo, ox_hi) = tap_range(kx, stride, iw, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - 1;
                        let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                        let out_row =
                            &mut out.data[(oc * oh + oy) * ow + ox_lo..(oc * oh + oy) * ow + ox_hi];
                        let in_base = ox_lo * stride + kx - 1;
                        if stride == 1 {
                            let in_seg = &in_row[in_base..in_base + (ox_hi - ox_lo)];
                            for (o, &v) in out_row.iter_mut().zip(in_seg) {
                                *o += wgt * v;
                            }
                        } else {
                            for (i, o) in out_row.iter_mut().enumerate() {
                                *o += wgt * in_row[in_base + i * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv3x3_forward`]: accumulates kernel/bias grads
/// and writes the input gradient.
pub(super) fn conv3x3_backward(
    input: &Tensor3,
    dout: &Tensor3,
    kernel: &[f32],
    stride: usize,
    dkernel: &mut [f32],
    dbias: &mut [f32],
    dinput: &mut Tensor3,
) {
    let (ih, iw) = (input.h, input.w);
    let (oh, ow) = (dout.h, dout.w);
    for oc in 0..dout.ch {
        dbias[oc] += dout.plane(oc).iter().sum::<f32>();
        for ic in 0..input.ch {
            let in_plane = input.plane(ic);
            for ky in 0..3 {
                let (oy_lo, oy_hi) = tap_range(ky, stride, ih, oh);
                for kx in 0..3 {
                    let (ox_lo, ox_hi) = tap_range(kx, stride, iw, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let kidx = ((oc * input.ch + ic) * 3 + ky) * 3 + kx;
                    let wgt = kernel[kidx];
                    let mut wgrad = 0.0f32;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - 1;
                        let in_base = ox_lo * stride + kx - 1;
                        let dout_row =
                            &dout.data[(oc * oh + oy) * ow + ox_lo..(oc * oh + oy) * ow + ox_hi];
                        let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                        let din_row = &mut dinput.data[(ic * ih + iy) * iw..(ic * ih + iy + 1) * iw];
                        if stride == 1 {
                            let in_seg = &in_row[in_base..in_base + (ox_hi - ox_lo)];
                            let din_seg = &mut din_row[in_base..in_base + (ox_hi - ox_lo)];
                            for ((&d, &v), g) in dout_row.iter().zip(in_seg).zip(din_seg.iter_mut())
                            {
                                wgrad += d * v;
                                *g += wgt * d;
                            }
                        } else {
                            for (i, &d) in dout_row.iter().enumerate() {
                                let ix = in_base + i * stride;
                                wgrad += d * in_row[ix];
                                din_row[ix] += wgt * d;
                            }
                        }
                    }
                    dkernel[kidx] += wgrad;
                }
            }
        }
    }
}

/// 1×1 convolution (the class head). Kernel layout `[out_ch][in_ch]`.
pub(super) fn conv1x1_forward(
    input: &Tensor3,
    kernel: &[f32],
    bias: &[f32],
    out_ch: usize,
) -> Tensor3 {
    let hw = input.h * input.w;
    let mut out = Tensor3::zeros(out_ch, input.h, input.w);
    for oc in 0..out_ch {
        let plane = out.plane_mut(oc);
        plane.fill(bias[oc]);
        for ic in 0..input.ch {
            let wgt = kernel[oc * input.ch + ic];
            let in_plane = &input.data[ic * hw..(ic + 1) * hw];
            for (o, &v) in plane.iter_mut().zip(in_plane) {
                *o += wgt * v;
            }
        }
    }
    out
}

pub(super) fn conv1x1_backward(
    input: &Tensor3,
    dout: &Tensor3,
    kernel: &[f32],
    dkernel: &mut [f32],
    dbias: &mut [f32],
    dinput: &mut Tensor3,
) {
    let hw = input.h * input.w;
    for oc in 0..dout.ch {
        let dplane = dout.plane(oc);
        dbias[oc] += dplane.iter().sum::<f32>();
        for ic in 0..input.ch {
            let in_plane = &input.data[ic * hw..(ic + 1) * hw];
            let mut wgrad = 0.0f32;
            let wgt = kernel[oc * input.ch + ic];
            let din_plane = &mut dinput.data[ic * hw..(ic + 1) * hw];
            for ((&d, &v), g) in dplane.iter().zip(in_plane).zip(din_plane.iter_mut()) {
                wgrad += d * v;
                *g += wgt * d;
            }
            dkernel[oc * input.ch + ic] += wgrad;
        }
    }
}

pub(super) fn relu_inplace(t: &mut Tensor3) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks the gradient where the forward activation was clamped to zero.
pub(super) fn relu_backward_inplace(grad: &mut Tensor3, activated: &Tensor3) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbor ×2 upsampling.
pub(super) fn upsample2x(input: &Tensor3) -> Tensor3 {
    let mut out = Tensor3::zeros(input.ch, input.h * 2, input.w * 2);
    for c in 0..input.ch {
        let src = input.plane(c);
        let (oh, ow) = (out.h, out.w);
        let dst = out.plane_mut(c);
        for y in 0..oh {
            let sy = y / 2;
            for x in 0..ow {
                dst[y * ow + x] = src[sy * input.w + x / 2];
            }
        }
    }
    out
}

/// Adjoint of nearest-neighbor upsampling: 2×2 block sums.
pub(super) fn upsample2x_backward(dout: &Tensor3) -> Tensor3 {
    let mut din = Tensor3::zeros(dout.ch, dout.h / 2, dout.w / 2);
    for c in 0..dout.ch {
        let src = dout.plane(c);
        let (ih, iw) = (din.h, din.w);
        let dst = din.plane_mut(c);
        for y in 0..dout.h {
            for x in 0..dout.w {
                dst[(y / 2) * iw + x / 2] += src[y * dout.w + x];
            }
        }
        let _ = ih;
    }
    din
}

/// Channel concatenation [a; b].
pub(super) fn concat(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut out = Tensor3::zeros(a.ch + b.ch, a.h, a.w);
    out.data[..a.data.len()].copy_from_slice(&a.data);
    out.data[a.data.len()..].copy_from_slice(&b.data);
    out
}

/// Pixelwise softmax over channels, numerically stabilized.
pub(super) fn softmax_channels(logits: &Tensor3) -> Tensor3 {
    let hw = logits.h * logits.w;
    let mut out = Tensor3::zeros(logits.ch, logits.h, logits.w);
    for i in 0..hw {
        let mut max = f32::NEG_INFINITY;
        for c in 0..logits.ch {
            max = max.max(logits.data[c * hw + i]);
        }
        let mut sum = 0.0f32;
        for c in 0..logits.ch {
            let e = (logits.data[c * hw + i] - max).exp();
            out.data[c * hw + i] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for c in 0..logits.ch {
            out.data[c * hw + i] *= inv;
        }
    }
    out
}

/// dL/dz from dL/dp: `dz_c = p_c·(dp_c − Σ_k dp_k·p_k)`.
pub(super) fn softmax_backward(probs: &Tensor3, dprobs: &Tensor3) -> Tensor3 {
    let hw = probs.h * probs.w;
    let mut dz = Tensor3::zeros(probs.ch, probs.h, probs.w);
    for i in 0..hw {
        let mut dot = 0.0f32;
        for c in 0..probs.ch {
            dot += dprobs.data[c * hw + i] * probs.data[c * hw + i];
        }
        for c in 0..probs.ch {
            dz.data[c * hw + i] = probs.data[c * hw + i] * (dprobs.data[c * hw + i] - dot);
        }
    }
    dz
}

/// Every intermediate the backward pass reads.
pub struct ForwardCache {
    pub(super) x: Tensor3,
    pub(super) a1: Tensor3,
    pub(super) a2: Tensor3,
    pub(super) a3: Tensor3,
    pub(super) cat1: Tensor3,
    pub(super) cat2: Tensor3,
    pub(super) cat3: Tensor3,
    pub(super) b1: Tensor3,
    pub(super) b2: Tensor3,
    pub(super) b3: Tensor3,
    pub(super) probs: Tensor3,
}

/// Slice views of one layer's kernel and bias inside the flat buffer.
pub(super) struct LayerSlices<'a> {
    pub kernel: &'a [f32],
    pub bias: &'a [f32],
}

pub(super) fn layer_slices<'a>(spec: &NetSpec, values: &'a [f32], layer: usize) -> LayerSlices<'a> {
    let (k_off, k_len, b_off, b_len) = spec.layer_offsets(layer);
    LayerSlices {
        kernel: &values[k_off..k_off + k_len],
        bias: &values[b_off..b_off + b_len],
    }
}

/// Forward pass: three stride-2 encoder convs, three decoder stages with
/// skip concatenation (a2, a1, then the raw input), 1×1 head, softmax.
pub(super) fn forward_impl(
    spec: &NetSpec,
    values: &[f32],
    image: &Grid,
) -> Result<(Vec<Grid>, ForwardCache), TrainError> {
    let (h, w) = (image.height(), image.width());
    let div = 1usize << 3;
    if h % div != 0 || w % div != 0 {
        return Err(TrainError::IndivisibleDimensions {
            height: h,
            width: w,
            factor: div,
        });
    }
    let [w1, w2, w3] = spec.widths;
    let x = Tensor3::from_grid(image);

    let l = |i| layer_slices(spec, values, i);
    let mut a1 = conv3x3_forward(&x, l(0).kernel, l(0).bias, w1, 2);
    relu_inplace(&mut a1);
    let mut a2 = conv3x3_forward(&a1, l(1).kernel, l(1).bias, w2, 2);
    relu_inplace(&mut a2);
    let mut a3 = conv3x3_forward(&a2, l(2).kernel, l(2).bias, w3, 2);
    relu_inplace(&mut a3);

    let cat1 = concat(&upsample2x(&a3), &a2);
    let mut b1 = conv3x3_forward(&cat1, l(3).kernel, l(3).bias, w2, 1);
    relu_inplace(&mut b1);
    let cat2 = concat(&upsample2x(&b1), &a1);
    let mut b2 = conv3x3_forward(&cat2, l(4).kernel, l(4).bias, w1, 1);
    relu_inplace(&mut b2);
    let cat3 = concat(&upsample2x(&b2), &x);
    let mut b3 = conv3x3_forward(&cat3, l(5).kernel, l(5).bias, w1, 1);
    relu_inplace(&mut b3);

    let logits = conv1x1_forward(&b3, l(6).kernel, l(6).bias, spec.num_classes);
    let probs = softmax_channels(&logits);

    let channels = (0..spec.num_classes)
        .map(|c| {
            Grid::from_vec(h, w, probs.plane(c).to_vec()).expect("softmax output is finite")
        })
        .collect();
    Ok((
        channels,
        ForwardCache {
            x,
            a1,
            a2,
            a3,
            cat1,
            cat2,
            cat3,
            b1,
            b2,
            b3,
            probs,
        },
    ))
}

/// Backward pass; returns the flat parameter gradient in registry order.
pub(super) fn backward_impl(
    spec: &NetSpec,
    values: &[f32],
    cache: &ForwardCache,
    loss_grads: &[Grid],
) -> Result<Vec<f32>, TrainError> {
    if loss_grads.len() != spec.num_classes {
        return Err(TrainError::GradientChannels {
            expected: spec.num_classes,
            got: loss_grads.len(),
        });
    }
    let (h, w) = (cache.x.h, cache.x.w);
    let mut dprobs = Tensor3::zeros(spec.num_classes, h, w);
    for (c, g) in loss_grads.iter().enumerate() {
        if g.height() != h || g.width() != w {
            return Err(TrainError::GradientShape {
                height: g.height(),
                width: g.width(),
            });
        }
        dprobs.plane_mut(c).copy_from_slice(g.data());
    }

    let mut grads = vec![0.0f32; values.len()];
    let l = |i| layer_slices(spec, values, i);
    // Gradient slices can't alias the shared buffer, so carve per layer.
    macro_rules! gslices {
        ($i:expr, $grads:expr) => {{
            let (k_off, k_len, b_off, b_len) = spec.layer_offsets($i);
            let (head, tail) = $grads.split_at_mut(b_off);
            (&mut head[k_off..k_off + k_len], &mut tail[..b_len])
        }};
    }

    let dz = softmax_backward(&cache.probs, &dprobs);
    let mut d_b3 = Tensor3::zeros(cache.b3.ch, h, w);
    {
        let (dk, db) = gslices!(6, grads);
        conv1x1_backward(&cache.b3, &dz, l(6).kernel, dk, db, &mut d_b3);
    }
    relu_backward_inplace(&mut d_b3, &cache.b3);

    let mut d_cat3 = Tensor3::zeros(cache.cat3.ch, h, w);
    {
        let (dk, db) = gslices!(5, grads);
        conv3x3_backward(&cache.cat3, &d_b3, l(5).kernel, 1, dk, db, &mut d_cat3);
    }
    let [w1, w2, _w3] = spec.widths;
    let mut d_up3 = Tensor3::zeros(w1, h, w);
    d_up3.data.copy_from_slice(&d_cat3.data[..w1 * h * w]);
    let mut d_b2 = upsample2x_backward(&d_up3);
    relu_backward_inplace(&mut d_b2, &cache.b2);

    let (h2, w2d) = (h / 2, w / 2);
    let mut d_cat2 = Tensor3::zeros(cache.cat2.ch, h2, w2d);
    {
        let (dk, db) = gslices!(4, grads);
        conv3x3_backward(&cache.cat2, &d_b2, l(4).kernel, 1, dk, db, &mut d_cat2);
    }
    let mut d_up2 = Tensor3::zeros(w2, h2, w2d);
    d_up2
        .data
        .copy_from_slice(&d_cat2.data[..w2 * h2 * w2d]);
    let mut d_a1 = Tensor3::zeros(w1, h2, w2d);
    d_a1.data
        .copy_from_slice(&d_cat2.data[w2 * h2 * w2d..(w2 + w1) * h2 * w2d]);
    let mut d_b1 = upsample2x_backward(&d_up2);
    relu_backward_inplace(&mut d_b1, &cache.b1);

    let (h4, w4) = (h / 4, w / 4);
    let mut d_cat1 = Tensor3::zeros(cache.cat1.ch, h4, w4);
    {
        let (dk, db) = gslices!(3, grads);
        conv3x3_backward(&cache.cat1, &d_b1, l(3).kernel, 1, dk, db, &mut d_cat1);
    }
    let [_, _, w3] = spec.widths;
    let mut d_up1 = Tensor3::zeros(w3, h4, w4);
    d_up1.data.copy_from_slice(&d_cat1.data[..w3 * h4 * w4]);
    let mut d_a2 = Tensor3::zeros(w2, h4, w4);
    d_a2.data
        .copy_from_slice(&d_cat1.data[w3 * h4 * w4..(w3 + w2) * h4 * w4]);
    let mut d_a3 = upsample2x_backward(&d_up1);
    relu_backward_inplace(&mut d_a3, &cache.a3);

    {
        let (dk, db) = gslices!(2, grads);
        conv3x3_backward(&cache.a2, &d_a3, l(2).kernel, 2, dk, db, &mut d_a2);
    }
    relu_backward_inplace(&mut d_a2, &cache.a2);
    {
        let (dk, db) = gslices!(1, grads);
        conv3x3_backward(&cache.a1, &d_a2, l(1).kernel, 2, dk, db, &mut d_a1);
    }
    relu_backward_inplace(&mut d_a1, &cache.a1);
    let mut d_x = Tensor3::zeros(cache.x.ch, h, w);
    {
        let (dk, db) = gslices!(0, grads);
        conv3x3_backward(&cache.x, &d_a1, l(0).kernel, 2, dk, db, &mut d_x);
    }
    Ok(grads)
}
