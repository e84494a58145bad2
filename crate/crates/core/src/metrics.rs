//! Evaluation metrics over hard predictions and probability maps.
//!
//! Confusion-based scores (DSC, IoU, sensitivity, specificity, accuracy),
//! the 95th-percentile Hausdorff distance, expected/maximum calibration
//! error, and the spectral correlation between hard masks.
//!
//! HD95 runs on an exact Euclidean distance transform (two-pass
//! Felzenszwalb parabolic envelope over squared distances). All squared
//! distances are integers below 2^53, so the production path agrees with
//! an all-pairs brute force bit for bit.

use thiserror::Error;

use crate::fft::FftPlan;
use crate::grid::{one_hot, Grid, LabelMask};
use crate::losses::{self, LossError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: usize, num_classes: usize },
    #[error("probability {value} at index {index} outside [0, 1]")]
    ProbabilityOutOfRange { value: f32, index: usize },
    #[error("num_bins must be positive")]
    ZeroBins,
}

/// Pixel-level confusion counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_shapes(pred: &LabelMask, truth: &LabelMask) -> Result<(), MetricsError> {
    if !pred.same_shape(truth) {
        return Err(MetricsError::ShapeMismatch(
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width(),
        ));
    }
    Ok(())
}

fn check_class(mask: &LabelMask, class_index: usize) -> Result<(), MetricsError> {
    if class_index >= mask.num_classes() {
        return Err(MetricsError::ClassOutOfRange {
            index: class_index,
            num_classes: mask.num_classes(),
        });
    }
    Ok(())
}

pub fn confusion(
    pred: &LabelMask,
    truth: &LabelMask,
    class_index: usize,
) -> Result<ConfusionCounts, MetricsError> {
    check_shapes(pred, truth)?;
    check_class(pred, class_index)?;
    check_class(truth, class_index)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let p = p as usize == class_index;
        let t = t as usize == class_index;
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Ratio with the empty-denominator rule: 1.0 when the denominator is 0
/// (the class is absent from both masks), keeping result tables ordered.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dsc(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp)
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

/// Exact squared Euclidean distance to the nearest `true` pixel.
/// `f64::INFINITY` where the set is empty. Two passes: per-column 1D
/// distances, then a parabolic lower envelope along each row.
fn edt_squared(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = f64::INFINITY;
    let mut col_sq = vec![INF; h * w];
    for x in 0..w {
        // Downward then upward scan of |Δrow| within the column.
        let mut d = usize::MAX;
        for y in 0..h {
            if set[y * w + x] {
                d = 0;
            } else if d != usize::MAX {
                d += 1;
            }
            if d != usize::MAX {
                col_sq[y * w + x] = (d * d) as f64;
            }
        }
        d = usize::MAX;
        for y in (0..h).rev() {
            if set[y * w + x] {
                d = 0;
            } else if d != usize::MAX {
                d += 1;
            }
            if d != usize::MAX {
                let v = (d * d) as f64;
                if v < col_sq[y * w + x] {
                    col_sq[y * w + x] = v;
                }
            }
        }
    }

    let mut out = vec![INF; h * w];
    let mut sites: Vec<usize> = Vec::with_capacity(w);
    let mut hull_v: Vec<usize> = Vec::with_capacity(w); // parabola centers
    let mut hull_z: Vec<f64> = Vec::with_capacity(w + 1); // hull boundaries
    for y in 0..h {
        let row = &col_sq[y * w..(y + 1) * w];
        sites.clear();
        sites.extend((0..w).filter(|&x| row[x].is_finite()));
        if sites.is_empty() {
            continue;
        }
        hull_v.clear();
        hull_z.clear();
        hull_v.push(sites[0]);
        hull_z.push(-INF);
        hull_z.push(INF);
        for &q in &sites[1..] {
            let fq = row[q] + (q * q) as f64;
            loop {
                let v = *hull_v.last().unwrap();
                let fv = row[v] + (v * v) as f64;
                let s = (fq - fv) / (2.0 * (q as f64 - v as f64));
                if s <= *hull_z.get(hull_z.len() - 2).unwrap() && hull_v.len() > 1 {
                    hull_v.pop();
                    hull_z.pop();
                    hull_z.pop();
                    hull_z.push(INF);
                } else {
                    hull_z.pop();
                    hull_z.push(s);
                    hull_z.push(INF);
                    hull_v.push(q);
                    break;
                }
            }
        }
        let mut k = 0;
        for x in 0..w {
            while hull_z[k + 1] < x as f64 {
                k += 1;
            }
            let v = hull_v[k];
            let dx = x as f64 - v as f64;
            out[y * w + x] = dx * dx + row[v];
        }
    }
    out
}

/// Index of the 95th percentile under the ceiling-order-statistic rule:
/// `⌈0.95·n⌉ − 1`, computed in integer arithmetic.
fn p95_index(n: usize) -> usize {
    (19 * n).div_ceil(20) - 1
}

/// Squared distances from every pixel of `from` to the set `to`, sorted.
fn directed_sq_distances(from: &[bool], to_dt: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = from
        .iter()
        .zip(to_dt)
        .filter(|(&f, _)| f)
        .map(|(_, &v)| v)
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d
}

/// 95th-percentile symmetric Hausdorff distance between the class's pixel
/// sets, in pixels. Both sets empty → 0; exactly one empty → the image
/// diagonal √(H²+W²).
pub fn hd95(
    pred: &LabelMask,
    truth: &LabelMask,
    class_index: usize,
) -> Result<f64, MetricsError> {
    check_shapes(pred, truth)?;
    check_class(pred, class_index)?;
    check_class(truth, class_index)?;
    let (h, w) = (pred.height(), pred.width());
    let a: Vec<bool> = pred.data().iter().map(|&l| l as usize == class_index).collect();
    let b: Vec<bool> = truth.data().iter().map(|&l| l as usize == class_index).collect();
    let a_empty = !a.iter().any(|&v| v);
    let b_empty = !b.iter().any(|&v| v);
    match (a_empty, b_empty) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Ok(((h * h + w * w) as f64).sqrt());
        }
        _ => {}
    }
    let dt_a = edt_squared(&a, h, w);
    let dt_b = edt_squared(&b, h, w);
    let d_ab = directed_sq_distances(&a, &dt_b);
    let d_ba = directed_sq_distances(&b, &dt_a);
    let qa = d_ab[p95_index(d_ab.len())];
    let qb = d_ba[p95_index(d_ba.len())];
    Ok(qa.max(qb).sqrt())
}

/// Per-bin reliability plus the scalar calibration errors.
#[derive(Clone, Debug)]
pub struct CalibrationReport {
    pub ece: f64,
    pub mce: f64,
    pub num_bins: usize,
    /// (mean confidence, accuracy, pixel count) per bin; empty bins keep
    /// zero counts.
    pub per_bin: Vec<(f64, f64, u64)>,
}

/// Bins pixel confidences (max-class probability) into `num_bins`
/// equal-width bins and compares them with argmax correctness. Argmax
/// ties break toward the lowest class index. A single channel is read as
/// the binary foreground probability.
pub fn calibration(
    prob_channels: &[Grid],
    truth: &LabelMask,
    num_bins: usize,
) -> Result<CalibrationReport, MetricsError> {
    if num_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    assert!(!prob_channels.is_empty(), "at least one probability channel");
    let (h, w) = (truth.height(), truth.width());
    for chan in prob_channels {
        if chan.height() != h || chan.width() != w {
            return Err(MetricsError::ShapeMismatch(
                chan.height(),
                chan.width(),
                h,
                w,
            ));
        }
        if let Some((i, &v)) = chan
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(0.0..=1.0).contains(&v))
        {
            return Err(MetricsError::ProbabilityOutOfRange { value: v, index: i });
        }
    }

    let mut conf_sum = vec![0.0f64; num_bins];
    let mut correct = vec![0u64; num_bins];
    let mut count = vec![0u64; num_bins];
    let binary = prob_channels.len() == 1;
    for i in 0..h * w {
        let (conf, arg) = if binary {
            let p = prob_channels[0].data()[i] as f64;
            // Class 0 wins ties at p = 0.5.
            if 1.0 - p >= p {
                (1.0 - p, 0usize)
            } else {
                (p, 1usize)
            }
        } else {
            let mut best = 0usize;
            let mut best_p = prob_channels[0].data()[i];
            for (c, chan) in prob_channels.iter().enumerate().skip(1) {
                let p = chan.data()[i];
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            (best_p as f64, best)
        };
        let bin = ((conf * num_bins as f64) as usize).min(num_bins - 1);
        conf_sum[bin] += conf;
        count[bin] += 1;
        if arg == truth.data()[i] as usize {
            correct[bin] += 1;
        }
    }

    let total: u64 = count.iter().sum();
    let mut ece = 0.0f64;
    let mut mce = 0.0f64;
    let mut per_bin = Vec::with_capacity(num_bins);
    for b in 0..num_bins {
        if count[b] == 0 {
            per_bin.push((0.0, 0.0, 0));
            continue;
        }
        let conf = conf_sum[b] / count[b] as f64;
        let acc = correct[b] as f64 / count[b] as f64;
        let gap = (acc - conf).abs();
        ece += count[b] as f64 / total as f64 * gap;
        mce = mce.max(gap);
        per_bin.push((conf, acc, count[b]));
    }
    Ok(CalibrationReport {
        ece,
        mce,
        num_bins,
        per_bin,
    })
}

/// SCC between the one-hot grids of one class of two hard masks — the
/// evaluation-time counterpart of the spectral training term. Both masks
/// empty of the class reports 1.0 (trivial perfect agreement).
pub fn spectral_correlation_metric(
    pred: &LabelMask,
    truth: &LabelMask,
    class_index: usize,
    plan: &FftPlan,
) -> Result<f64, MetricsError> {
    check_shapes(pred, truth)?;
    check_class(pred, class_index)?;
    check_class(truth, class_index)?;
    let a = one_hot(pred, class_index).expect("class validated");
    let b = one_hot(truth, class_index).expect("class validated");
    match losses::scc(&a, &b, plan) {
        Ok(v) => Ok(v),
        Err(LossError::DegenerateInput) => Ok(1.0),
        Err(e) => panic!("unexpected scc failure: {e}"),
    }
}
