//! Equivalent-kernel class activation maps, the Grad-CAM baseline, and the
//! kernel-preparation cost benchmark.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::mhex::MhexBlock;
use crate::models::{ForwardOptions, ModelGraph};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Cam,
    GradCam,
    Confidence,
    Uncertainty,
    Entropy,
    Variance,
    MeanProb,
}

/// A single-channel real-valued map.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    kind: MapKind,
}

impl PixelMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, kind: MapKind) -> Result<Self> {
        if height == 0 || width == 0 || height * width != values.len() {
            return contract(
                "PixelMap::new",
                format!("{height}x{width} map with {} values", values.len()),
            );
        }
        if values.iter().any(|v| !v.is_finite()) {
            return contract("PixelMap::new", "non-finite value");
        }
        Ok(PixelMap {
            height,
            width,
            values,
            kind,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn with_kind(mut self, kind: MapKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Flat index of the first maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Min-max rescaling to `[0, 1]`. A constant positive map becomes all
    /// ones, any other constant map all zeros.
    pub fn normalized(&self) -> PixelMap {
        let (lo, hi) = self.min_max();
        let values = if hi > lo {
            self.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else if hi > 0.0 {
            vec![1.0; self.values.len()]
        } else {
            vec![0.0; self.values.len()]
        };
        PixelMap { values, ..self.clone() }
    }

    pub fn upsample_nearest(&self, factor: usize) -> PixelMap {
        let (h, w) = (self.height * factor, self.width * factor);
        let values = (0..h * w).map(|i| self.get(i / w / factor, (i % w) / factor)).collect();
        PixelMap {
            height: h,
            width: w,
            values,
            kind: self.kind,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// The merged channel-mixing kernel `W_equiv = Conv₂ · Conv₁` of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceKernel {
    /// `[K, Cin, 1, 1]`.
    pub weights: Tensor,
    /// 1-based decoder stage the block belongs to.
    pub stage: usize,
}

impl SalienceKernel {
    pub fn class_count(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }
}

/// `W_equiv[c, i] = Σ_j conv2[c, j] · conv1[j, i]`.
pub fn equivalent_kernel(block: &MhexBlock, stage: usize) -> Result<SalienceKernel> {
    let c1 = block.conv1_weight();
    let c2 = block.conv2_weight();
    let [hd, cin, kh, kw] = c1.dims4("equivalent_kernel")?;
    let [k, hd2, kh2, kw2] = c2.dims4("equivalent_kernel")?;
    if (kh, kw, kh2, kw2) != (1, 1, 1, 1) || hd != hd2 {
        return contract("equivalent_kernel", "blocks must hold matching 1x1 kernels");
    }
    let mut w = vec![0.0; k * cin];
    for c in 0..k {
        for j in 0..hd {
            let a = c2.data()[c * hd + j];
            let row = &c1.data()[j * cin..(j + 1) * cin];
            for (dst, &b) in w[c * cin..(c + 1) * cin].iter_mut().zip(row) {
                *dst += a * b;
            }
        }
    }
    Ok(SalienceKernel {
        weights: Tensor::new(vec![k, cin, 1, 1], w)?,
        stage,
    })
}

/// Raw `CAM_c = Σ_j W_equiv[c, j] · A[j]` for `A: [Cin, h, w]` (a leading
/// batch axis of 1 is accepted).
pub fn mhex_cam(kernel: &SalienceKernel, activations: &Tensor, class: usize) -> Result<PixelMap> {
    const OP: &str = "mhex_cam";
    let (cin, h, w) = match activations.dims() {
        &[c, h, w] | &[1, c, h, w] => (c, h, w),
        d => return contract(OP, format!("expected [Cin, h, w], got {d:?}")),
    };
    if cin != kernel.in_channels() {
        return contract(
            OP,
            format!("kernel takes {} channels, activations have {cin}", kernel.in_channels()),
        );
    }
    if class >= kernel.class_count() {
        return contract(OP, format!("class {class} outside [0, {})", kernel.class_count()));
    }
    let plane = h * w;
    let row = &kernel.weights.data()[class * cin..(class + 1) * cin];
    let mut values = vec![0.0; plane];
    for (j, &wj) in row.iter().enumerate() {
        for (v, &a) in values.iter_mut().zip(&activations.data()[j * plane..(j + 1) * plane]) {
            *v += wj * a;
        }
    }
    PixelMap::new(h, w, values, MapKind::Cam)
}

fn batch_item(t: &Tensor, n: usize) -> Result<Tensor> {
    let [_, c, h, w] = t.dims4("batch_item")?;
    let s = c * h * w;
    Tensor::new(vec![c, h, w], t.data()[n * s..(n + 1) * s].to_vec())
}

/// Raw per-stage MHEX+ CAMs for `image: [1, Cin, H, W]`, coarsest stage first.
pub fn stage_cams(model: &ModelGraph, image: &Tensor, class: usize) -> Result<Vec<PixelMap>> {
    if model.mhex_blocks().is_empty() {
        return contract("stage_cams", "model has no MHEX+ blocks");
    }
    let tape = Tape::new();
    let trace = model.forward(&tape, tape.constant(image.clone()), ForwardOptions::default())?;
    let blocks = model.mhex_blocks();
    trace
        .stages
        .iter()
        .zip(blocks)
        .map(|(st, block)| {
            let kernel = equivalent_kernel(block, st.stage)?;
            mhex_cam(&kernel, &batch_item(&st.features.value(), 0)?, class)
        })
        .collect()
}

/// Mean of raw stage maps upsampled to `height × width`.
pub fn composite(maps: &[PixelMap], height: usize, width: usize) -> Result<PixelMap> {
    if maps.is_empty() {
        return contract("composite", "no maps");
    }
    let mut acc = vec![0.0; height * width];
    for m in maps {
        if height % m.height() != 0 || height / m.height() * m.width() != width {
            return contract(
                "composite",
                format!("{}x{} does not tile {height}x{width}", m.height(), m.width()),
            );
        }
        let up = m.upsample_nearest(height / m.height());
        for (a, v) in acc.iter_mut().zip(up.values()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    PixelMap::new(height, width, acc.into_iter().map(|v| v / n).collect(), MapKind::Cam)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCam {
    /// Min-max normalised map.
    pub map: PixelMap,
    /// `relu(Σ_j w_j A[j])` before normalisation.
    pub raw: PixelMap,
    /// All channel weights were zero; the map is identically zero.
    pub zero_gradient: bool,
}

/// Grad-CAM from an activation `A: [C, h, w]` and `∂y/∂A` of the same shape.
pub fn grad_cam_from(activation: &Tensor, gradient: &Tensor) -> Result<GradCam> {
    const OP: &str = "grad_cam";
    let (c, h, w) = match activation.dims() {
        &[c, h, w] => (c, h, w),
        d => return contract(OP, format!("expected [C, h, w], got {d:?}")),
    };
    if gradient.dims() != activation.dims() {
        return contract(OP, "gradient and activation shapes differ");
    }
    let plane = h * w;
    let weights: Vec<f64> = (0..c)
        .map(|j| gradient.data()[j * plane..(j + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    let zero_gradient = weights.iter().all(|&v| v == 0.0);
    let mut values = vec![0.0; plane];
    for (j, &wj) in weights.iter().enumerate() {
        for (v, &a) in values.iter_mut().zip(&activation.data()[j * plane..(j + 1) * plane]) {
            *v += wj * a;
        }
    }
    let raw = PixelMap::new(h, w, values.into_iter().map(|v| v.max(0.0)).collect(), MapKind::GradCam)?;
    Ok(GradCam {
        map: raw.normalized(),
        raw,
        zero_gradient,
    })
}

/// Grad-CAM on the stage-`stage` decoder features (the MHEX+ input `X_l`)
/// for the summed class-`class` logits over pixels predicted as `class`.
pub fn grad_cam(model: &ModelGraph, image: &Tensor, class: usize, stage: usize) -> Result<GradCam> {
    const OP: &str = "grad_cam";
    let k = model.config().class_count;
    if class >= k {
        return contract(OP, format!("class {class} outside [0, {k})"));
    }
    if stage == 0 || stage > model.stage_count() {
        return contract(OP, format!("stage {stage} outside [1, {}]", model.stage_count()));
    }
    let tape = Tape::new();
    let input = tape.param(image.clone());
    let trace = model.forward(&tape, input, ForwardOptions::default())?;
    let logits = trace.final_logits.value();
    let [n, _, h, w] = logits.dims4(OP)?;
    if n != 1 {
        return contract(OP, "expects a single image");
    }
    let plane = h * w;
    let mut select = Tensor::zeros(logits.dims());
    for s in 0..plane {
        let mut best = 0;
        for c in 1..k {
            if logits.data()[c * plane + s] > logits.data()[best * plane + s] {
                best = c;
            }
        }
        if best == class {
            select.data_mut()[class * plane + s] = 1.0;
        }
    }
    let objective = trace.final_logits.mul(tape.constant(select))?.sum()?;
    let features = trace.stages[stage - 1].features;
    let grads = tape.backward(objective)?;
    let act = batch_item(&features.value(), 0)?;
    let grad = match grads.wrt(features) {
        Some(g) => batch_item(g, 0)?,
        None => Tensor::zeros(act.dims()),
    };
    grad_cam_from(&act, &grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    /// Median seconds to build every equivalent kernel of the model.
    pub mhex_prep_s: f64,
    /// Median seconds for one Grad-CAM (forward and backward) at this size.
    pub gradcam_s: f64,
    /// Repetitions folded into each timed sample.
    pub mhex_reps: usize,
    pub gradcam_reps: usize,
}

const BENCH_SAMPLES: usize = 7;
const MIN_SAMPLE: Duration = Duration::from_millis(5);

/// Median over seven samples of per-call time, each sample repeating
/// `f` until it spans at least a few milliseconds.
fn median_time(mut f: impl FnMut() -> Result<()>) -> Result<(f64, usize)> {
    let mut reps = 1;
    loop {
        let t = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        if t.elapsed() >= MIN_SAMPLE || reps >= 1 << 24 {
            break;
        }
        reps *= 2;
    }
    let mut samples = Vec::with_capacity(BENCH_SAMPLES);
    for _ in 0..BENCH_SAMPLES {
        let t = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        samples.push(t.elapsed().as_secs_f64() / reps as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok((samples[BENCH_SAMPLES / 2], reps))
}

/// Times equivalent-kernel preparation against Grad-CAM across input sizes.
pub fn cam_benchmark(model: &ModelGraph, sizes: &[usize]) -> Result<Vec<BenchRow>> {
    const OP: &str = "cam_benchmark";
    if sizes.len() < 3 {
        return contract(OP, "at least three sizes are required");
    }
    let blocks = model.mhex_blocks();
    if blocks.is_empty() {
        return contract(OP, "model has no MHEX+ blocks");
    }
    let unit = 1 << model.config().depth;
    if let Some(bad) = sizes.iter().find(|&&s| s == 0 || s % unit != 0) {
        return contract(OP, format!("size {bad} is not a multiple of {unit}"));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let (mhex_prep_s, mhex_reps) = median_time(|| {
            for (i, b) in blocks.iter().enumerate() {
                std::hint::black_box(equivalent_kernel(b, i + 1)?);
            }
            Ok(())
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
        let image = Tensor::uniform(&[1, model.config().in_channels, size, size], 0.0, 1.0, &mut rng);
        let stage = model.stage_count();
        let (gradcam_s, gradcam_reps) = median_time(|| {
            std::hint::black_box(grad_cam(model, &image, 1, stage)?);
            Ok(())
        })?;
        rows.push(BenchRow {
            size,
            mhex_prep_s,
            gradcam_s,
            mhex_reps,
            gradcam_reps,
        });
    }
    Ok(rows)
}
