//! A small encoder-decoder segmenter with hand-written forward/backward
//! passes, trained by SGD with momentum and decoupled weight decay.
//!
//! Three stride-2 encoder stages, three nearest-upsample decoder stages
//! with skip concatenation, and a per-class 1×1 softmax head. The network
//! is the vehicle for loss-weighting, domain-shift, noise, and
//! calibration experiments; nothing about it is tuned beyond what the
//! experiments need.

mod net;

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::fft::FftPlan;
use crate::grid::{Grid, LabelMask};
use crate::losses::{self, LossConfig, LossError};
use crate::metrics::{self, MetricsError};
use crate::rng::{shuffle, stream_seed, SplitMix64};
use crate::synth::SceneSample;

pub use net::ForwardCache;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image {height}x{width} not divisible by {factor}")]
    IndivisibleDimensions {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("network expects {spec} classes but dataset has {dataset}")]
    ClassMismatch { spec: usize, dataset: usize },
    #[error("parameter buffer holds {got} values, spec needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("expected {expected} gradient channels, got {got}")]
    GradientChannels { expected: usize, got: usize },
    #[error("gradient grid is {height}x{width}, image shape differs")]
    GradientShape { height: usize, width: usize },
    #[error("loss became non-finite at epoch {epoch}, batch {batch_index}")]
    NanLoss { epoch: usize, batch_index: usize },
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint malformed: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint digest {found:#018x} does not match network spec {expected:#018x}")]
    CheckpointDigest { expected: u64, found: u64 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Architecture description; the parameter registry derives from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub in_channels: usize,
    /// Encoder stage widths; the decoder mirrors them.
    pub widths: [usize; 3],
    pub num_classes: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [8, 16, 32],
            num_classes: 3,
        }
    }
}

/// (out_ch, in_ch, kernel_size, stride) per layer, in registry order.
fn layer_defs(spec: &NetSpec) -> [(usize, usize, usize, usize); 7] {
    let [w1, w2, w3] = spec.widths;
    let ic = spec.in_channels;
    [
        (w1, ic, 3, 2),
        (w2, w1, 3, 2),
        (w3, w2, 3, 2),
        (w2, w3 + w2, 3, 1),
        (w1, w2 + w1, 3, 1),
        (w1, w1 + ic, 3, 1),
        (spec.num_classes, w1, 1, 1),
    ]
}

impl NetSpec {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    /// Total number of parameters (kernels plus biases).
    pub fn param_count(&self) -> usize {
        layer_defs(self)
            .iter()
            .map(|&(o, i, k, _)| o * i * k * k + o)
            .sum()
    }

    /// (kernel offset, kernel len, bias offset, bias len) of one layer in
    /// the flat buffer. Bias directly follows its kernel.
    fn layer_offsets(&self, layer: usize) -> (usize, usize, usize, usize) {
        let defs = layer_defs(self);
        let mut off = 0;
        for (i, &(o, ic, k, _)) in defs.iter().enumerate() {
            let k_len = o * ic * k * k;
            if i == layer {
                return (off, k_len, off + k_len, o);
            }
            off += k_len + o;
        }
        panic!("layer index {layer} out of range");
    }

    /// Order-sensitive hash of the architecture, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        let mut rng = SplitMix64::new(0x5353_434b); // "SSCK"
        let mut acc = rng.next_u64();
        for v in [
            self.in_channels as u64,
            self.widths[0] as u64,
            self.widths[1] as u64,
            self.widths[2] as u64,
            self.num_classes as u64,
        ] {
            acc = stream_seed(acc, v);
        }
        acc
    }
}

/// Flat parameters plus same-shaped SGD momentum buffers.
#[derive(Clone, Debug)]
pub struct NetParams {
    pub values: Vec<f32>,
    pub momentum: Vec<f32>,
}

impl NetParams {
    /// He-uniform kernels (limit √(6/fan_in)), zero biases, drawn from
    /// per-layer streams of the given seed. Momentum starts at zero.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut values = vec![0.0f32; spec.param_count()];
        for (layer, &(out_ch, in_ch, k, _)) in layer_defs(spec).iter().enumerate() {
            let (k_off, k_len, _, _) = spec.layer_offsets(layer);
            let fan_in = (in_ch * k * k) as f64;
            let limit = (6.0 / fan_in).sqrt();
            let mut rng = SplitMix64::new(stream_seed(seed, 0x1217 + layer as u64));
            for v in &mut values[k_off..k_off + k_len] {
                *v = rng.range_f64(-limit, limit) as f32;
            }
            let _ = out_ch;
        }
        let momentum = vec![0.0f32; values.len()];
        Self { values, momentum }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Exact-mask augmentation: flips and 90° rotation multiples.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            epochs: 30,
            seed: 0,
            loss: LossConfig::default(),
            augment: true,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_spatial: f64,
    pub train_spectral: f64,
    pub train_total: f64,
    pub val_dsc: f64,
}

/// Per-class evaluation scores for one sample or an aggregate.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub hd95: f64,
    pub spectral_correlation: f64,
}

#[derive(Clone, Debug)]
pub struct SampleEval {
    pub per_class: Vec<ClassMetrics>,
    pub ece: f64,
    pub mce: f64,
}

/// Per-sample rows plus per-class means over the dataset.
#[derive(Clone, Debug)]
pub struct EvalTable {
    pub samples: Vec<SampleEval>,
    pub mean_per_class: Vec<ClassMetrics>,
    pub ece: f64,
    pub mce: f64,
    /// Mean over samples of the foreground-class DSC average.
    pub mean_foreground_dsc: f64,
    pub num_classes: usize,
}

pub const DEFAULT_CALIBRATION_BINS: usize = 10;

/// Per-class probability channels plus the cache consumed by
/// [`backward`].
pub fn forward(
    spec: &NetSpec,
    params: &NetParams,
    image: &Grid,
) -> Result<(Vec<Grid>, ForwardCache), TrainError> {
    if params.values.len() != spec.param_count() {
        return Err(TrainError::ParamCount {
            expected: spec.param_count(),
            got: params.values.len(),
        });
    }
    net::forward_impl(spec, &params.values, image)
}

/// Exact loss gradient for every parameter, in registry order.
pub fn backward(
    spec: &NetSpec,
    params: &NetParams,
    cache: &ForwardCache,
    loss_grads: &[Grid],
) -> Result<Vec<f32>, TrainError> {
    net::backward_impl(spec, &params.values, cache, loss_grads)
}

/// Dihedral transform k ∈ 0..8 (rotation count + optional flip) of a
/// grid; masks transform identically so labels stay exact. Non-square
/// inputs restrict to the shape-preserving subgroup.
fn dihedral_grid(g: &Grid, k: u8) -> Grid {
    let (h, w) = (g.height(), g.width());
    let k = if h == w { k % 8 } else { [0u8, 2, 4, 6][(k % 4) as usize] };
    let (rot, flip) = (k % 4, k >= 4);
    let (oh, ow) = if rot % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = vec![0.0f32; h * w];
    for y in 0..oh {
        for x in 0..ow {
            let (mut sy, mut sx) = match rot {
                0 => (y, x),
                1 => (h - 1 - x, y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (x, w - 1 - y),
            };
            if flip {
                sx = w - 1 - sx;
                let _ = &mut sy;
            }
            out[y * ow + x] = g.at(sy, sx);
        }
    }
    Grid::from_vec(oh, ow, out).expect("transform preserves finiteness")
}

fn dihedral_mask(m: &LabelMask, k: u8) -> LabelMask {
    let (h, w) = (m.height(), m.width());
    let k = if h == w { k % 8 } else { [0u8, 2, 4, 6][(k % 4) as usize] };
    let (rot, flip) = (k % 4, k >= 4);
    let (oh, ow) = if rot % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = LabelMask::zeros(oh, ow, m.num_classes());
    for y in 0..oh {
        for x in 0..ow {
            let (sy, mut sx) = match rot {
                0 => (y, x),
                1 => (h - 1 - x, y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (x, w - 1 - y),
            };
            if flip {
                sx = w - 1 - sx;
            }
            out.set(y, x, m.at(sy, sx));
        }
    }
    out
}

fn check_dataset(spec: &NetSpec, dataset: &[SceneSample]) -> Result<(), TrainError> {
    let first = dataset.first().ok_or(TrainError::EmptyDataset)?;
    if first.mask.num_classes() != spec.num_classes {
        return Err(TrainError::ClassMismatch {
            spec: spec.num_classes,
            dataset: first.mask.num_classes(),
        });
    }
    Ok(())
}

struct SampleGrad {
    grads: Vec<f32>,
    spatial: f64,
    spectral: f64,
    total: f64,
}

fn sample_pass(
    spec: &NetSpec,
    params: &NetParams,
    image: &Grid,
    mask: &LabelMask,
    loss_cfg: &LossConfig,
    plan: &FftPlan,
) -> Result<SampleGrad, TrainError> {
    let (channels, cache) = forward(spec, params, image)?;
    let (loss, parts) = losses::final_loss_components(&channels, mask, loss_cfg, plan)?;
    let grads = backward(spec, params, &cache, &loss.grad)?;
    Ok(SampleGrad {
        grads,
        spatial: parts.spatial,
        spectral: parts.spectral,
        total: loss.value,
    })
}

/// SGD with momentum, decoupled weight decay, deterministic shuffling per
/// (seed, epoch), and best-checkpoint selection by validation DSC.
///
/// Batch members run in parallel; their gradients reduce in sample order,
/// so a run is bit-reproducible on one platform regardless of threads.
pub fn train(
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    spec: &NetSpec,
    cfg: &TrainConfig,
) -> Result<(NetParams, Vec<EpochLog>), TrainError> {
    check_dataset(spec, train_set)?;
    check_dataset(spec, val_set)?;
    let (h, w) = (
        train_set[0].image.height(),
        train_set[0].image.width(),
    );
    let plan = FftPlan::new(h, w);
    let mut params = NetParams::init(spec, cfg.seed);
    let mut best: Option<(f64, NetParams)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut epoch_rng = SplitMix64::new(stream_seed(cfg.seed, epoch as u64));
        shuffle(&mut order, &mut epoch_rng);
        let augs: Vec<u8> = order
            .iter()
            .map(|_| {
                if cfg.augment {
                    epoch_rng.below(8) as u8
                } else {
                    0
                }
            })
            .collect();

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut seen = 0usize;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_offset = batch_index * cfg.batch_size;
            let results: Vec<Result<SampleGrad, TrainError>> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &sample_idx)| {
                    let s = &train_set[sample_idx];
                    let k = augs[batch_offset + i];
                    let (image, mask) = if k == 0 {
                        (s.image.clone(), s.mask.clone())
                    } else {
                        (dihedral_grid(&s.image, k), dihedral_mask(&s.mask, k))
                    };
                    sample_pass(spec, &params, &image, &mask, &cfg.loss, &plan)
                })
                .collect();

            let mut batch_grad = vec![0.0f32; params.values.len()];
            let inv_batch = 1.0 / chunk.len() as f32;
            for r in results {
                let sg = r?;
                if !sg.total.is_finite() {
                    return Err(TrainError::NanLoss { epoch, batch_index });
                }
                for (acc, g) in batch_grad.iter_mut().zip(&sg.grads) {
                    *acc += g * inv_batch;
                }
                sums.0 += sg.spatial;
                sums.1 += sg.spectral;
                sums.2 += sg.total;
                seen += 1;
            }

            let lr = cfg.learning_rate as f32;
            let mu = cfg.momentum as f32;
            let decay = 1.0 - (cfg.learning_rate * cfg.weight_decay) as f32;
            for ((p, v), g) in params
                .values
                .iter_mut()
                .zip(&mut params.momentum)
                .zip(&batch_grad)
            {
                *v = mu * *v + g;
                *p = *p * decay - lr * *v;
            }
        }

        let val_dsc = mean_foreground_dsc(spec, &params, val_set)?;
        let inv = 1.0 / seen as f64;
        log.push(EpochLog {
            epoch,
            train_spatial: sums.0 * inv,
            train_spectral: sums.1 * inv,
            train_total: sums.2 * inv,
            val_dsc,
        });
        if best.as_ref().map_or(true, |(b, _)| val_dsc > *b) {
            best = Some((val_dsc, params.clone()));
        }
    }
    let (_, best_params) = best.expect("epochs > 0 leaves a best checkpoint");
    Ok((best_params, log))
}

/// Hard mask from probability channels; argmax ties break toward the
/// lowest class index.
pub fn predict_mask(channels: &[Grid]) -> LabelMask {
    let (h, w) = (channels[0].height(), channels[0].width());
    let mut mask = LabelMask::zeros(h, w, channels.len().max(2));
    for i in 0..h * w {
        let mut best = 0usize;
        let mut best_p = channels[0].data()[i];
        for (c, chan) in channels.iter().enumerate().skip(1) {
            let p = chan.data()[i];
            if p > best_p {
                best_p = p;
                best = c;
            }
        }
        mask.set(i / w, i % w, best as u8);
    }
    mask
}

fn mean_foreground_dsc(
    spec: &NetSpec,
    params: &NetParams,
    dataset: &[SceneSample],
) -> Result<f64, TrainError> {
    let scores: Vec<Result<f64, TrainError>> = dataset
        .par_iter()
        .map(|s| {
            let (channels, _) = forward(spec, params, &s.image)?;
            let pred = predict_mask(&channels);
            let mut acc = 0.0;
            for c in 1..spec.num_classes {
                acc += metrics::dsc(&metrics::confusion(&pred, &s.mask, c)?);
            }
            Ok(acc / (spec.num_classes - 1) as f64)
        })
        .collect();
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / dataset.len() as f64)
}

/// Full metric table over a dataset: per-class confusion scores, HD95,
/// spectral correlation, and pixel calibration, then per-class means.
pub fn evaluate(
    spec: &NetSpec,
    params: &NetParams,
    dataset: &[SceneSample],
    plan: &FftPlan,
) -> Result<EvalTable, TrainError> {
    check_dataset(spec, dataset)?;
    let evals: Vec<Result<SampleEval, TrainError>> = dataset
        .par_iter()
        .map(|s| evaluate_sample(spec, params, s, plan))
        .collect();
    let mut samples = Vec::with_capacity(dataset.len());
    for e in evals {
        samples.push(e?);
    }
    Ok(aggregate(samples, spec.num_classes))
}

fn evaluate_sample(
    spec: &NetSpec,
    params: &NetParams,
    sample: &SceneSample,
    plan: &FftPlan,
) -> Result<SampleEval, TrainError> {
    let (channels, _) = forward(spec, params, &sample.image)?;
    evaluate_prediction(&channels, &sample.mask, plan)
}

/// Metrics of explicit probability channels against a truth mask.
pub fn evaluate_prediction(
    channels: &[Grid],
    truth: &LabelMask,
    plan: &FftPlan,
) -> Result<SampleEval, TrainError> {
    let pred = predict_mask(channels);
    let mut per_class = Vec::with_capacity(truth.num_classes());
    for c in 0..truth.num_classes() {
        let conf = metrics::confusion(&pred, truth, c)?;
        per_class.push(ClassMetrics {
            dsc: metrics::dsc(&conf),
            iou: metrics::iou(&conf),
            sensitivity: metrics::sensitivity(&conf),
            specificity: metrics::specificity(&conf),
            accuracy: metrics::accuracy(&conf),
            hd95: metrics::hd95(&pred, truth, c)?,
            spectral_correlation: metrics::spectral_correlation_metric(&pred, truth, c, plan)?,
        });
    }
    let calib = metrics::calibration(channels, truth, DEFAULT_CALIBRATION_BINS)?;
    Ok(SampleEval {
        per_class,
        ece: calib.ece,
        mce: calib.mce,
    })
}

fn aggregate(samples: Vec<SampleEval>, num_classes: usize) -> EvalTable {
    let n = samples.len().max(1) as f64;
    let mut mean_per_class = vec![ClassMetrics::default(); num_classes];
    let mut ece = 0.0;
    let mut mce = 0.0;
    let mut fg = 0.0;
    for s in &samples {
        for (acc, m) in mean_per_class.iter_mut().zip(&s.per_class) {
            acc.dsc += m.dsc / n;
            acc.iou += m.iou / n;
            acc.sensitivity += m.sensitivity / n;
            acc.specificity += m.specificity / n;
            acc.accuracy += m.accuracy / n;
            acc.hd95 += m.hd95 / n;
            acc.spectral_correlation += m.spectral_correlation / n;
        }
        ece += s.ece / n;
        mce += s.mce / n;
        if num_classes > 1 {
            let s_fg: f64 = s.per_class[1..].iter().map(|m| m.dsc).sum();
            fg += s_fg / (num_classes - 1) as f64 / n;
        }
    }
    EvalTable {
        samples,
        mean_per_class,
        ece,
        mce,
        mean_foreground_dsc: fg,
        num_classes,
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes magic, format version, spec digest, parameter count, then the
/// parameters as little-endian f32 in registry order.
pub fn save_checkpoint(
    path: &Path,
    spec: &NetSpec,
    params: &NetParams,
) -> Result<(), TrainError> {
    if params.values.len() != spec.param_count() {
        return Err(TrainError::ParamCount {
            expected: spec.param_count(),
            got: params.values.len(),
        });
    }
    let mut buf = Vec::with_capacity(4 + 4 + 8 + 8 + params.values.len() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&spec.digest().to_le_bytes());
    buf.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Loads a checkpoint for the given spec, validating magic, version,
/// digest, and count. Momentum buffers come back zeroed.
pub fn load_checkpoint(path: &Path, spec: &NetSpec) -> Result<NetParams, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TrainError::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let digest = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if digest != spec.digest() {
        return Err(TrainError::CheckpointDigest {
            expected: spec.digest(),
            found: digest,
        });
    }
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if count != spec.param_count() {
        return Err(TrainError::ParamCount {
            expected: spec.param_count(),
            got: count,
        });
    }
    if bytes.len() != 24 + count * 4 {
        return Err(TrainError::CheckpointFormat(format!(
            "expected {} bytes of parameters, found {}",
            count * 4,
            bytes.len() - 24
        )));
    }
    let values: Vec<f32> = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let momentum = vec![0.0; values.len()];
    Ok(NetParams { values, momentum })
}
