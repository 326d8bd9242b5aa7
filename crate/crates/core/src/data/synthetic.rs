//! Bright shapes on a dark, noisy background with softened boundaries.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};
use crate::par::Exec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Ellipse,
    Blob,
}

impl std::str::FromStr for ShapeKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "ellipse" => Ok(ShapeKind::Ellipse),
            "blob" => Ok(ShapeKind::Blob),
            other => contract("ShapeKind::from_str", format!("unknown shape {other:?}")),
        }
    }
}

/// Geometry in pixel units; pixel `(y, x)` covers `[x, x+1) × [y, y+1)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        theta: f64,
    },
    /// Star-shaped region `ρ(φ) = r · (1 + Σ amp·cos(k·φ + phase))`, k = 2, 3, ...
    Blob {
        cx: f64,
        cy: f64,
        r: f64,
        harmonics: Vec<(f64, f64)>,
    },
}

impl Shape {
    /// Whether the point `(px, py)` lies inside; boundary counts as inside.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Ellipse { cx, cy, a, b, theta } => {
                let (s, c) = theta.sin_cos();
                let (dx, dy) = (px - cx, py - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Blob {
                cx,
                cy,
                r,
                ref harmonics,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let phi = dy.atan2(dx);
                let wobble: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(i, &(amp, phase))| amp * ((i + 2) as f64 * phi + phase).cos())
                    .sum();
                dx.hypot(dy) <= r * (1.0 + wobble)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub sample_count: usize,
    pub shape_kinds: Vec<ShapeKind>,
    pub noise_std: f64,
    pub boundary_blur_px: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: 64,
            sample_count: 200,
            shape_kinds: vec![ShapeKind::Disk, ShapeKind::Ellipse, ShapeKind::Blob],
            noise_std: 0.15,
            boundary_blur_px: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "SyntheticConfig";
        if self.image_size < 8 {
            return contract(OP, "image_size must be >= 8");
        }
        if self.shape_kinds.is_empty() {
            return contract(OP, "shape_kinds is empty");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return contract(OP, "noise_std must be finite and >= 0");
        }
        if !(self.boundary_blur_px >= 0.0 && self.boundary_blur_px.is_finite()) {
            return contract(OP, "boundary_blur_px must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Class id per pixel, row-major (`0` background, `1` shape).
    pub mask: Vec<usize>,
    pub shapes: Vec<Shape>,
    /// Pixels whose blurred shape indicator lies strictly between the two
    /// plateaus: the region where the label is visually ambiguous.
    pub ambiguous: Vec<bool>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[2]
    }

    /// Image as a single-item batch `[1, 1, H, W]`.
    pub fn batch_image(&self) -> Tensor {
        self.image
            .clone()
            .reshape(vec![1, 1, self.height(), self.width()])
            .expect("same numel")
    }
}

const BACKGROUND: (f64, f64) = (0.1, 0.3);
const FOREGROUND: (f64, f64) = (0.65, 0.9);
const BAND: (f64, f64) = (0.05, 0.95);

/// Centre keeping a shape of radius `extent` inside the image where possible.
fn center(extent: f64, size: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let lo = extent.min(size / 2.0);
    (rng.random_range(lo..=size - lo), rng.random_range(lo..=size - lo))
}

fn random_shape(kind: ShapeKind, size: f64, rng: &mut ChaCha8Rng) -> Shape {
    match kind {
        ShapeKind::Disk => {
            let r = size * 0.1 + rng.random::<f64>() * size * 0.1;
            let (cx, cy) = center(r, size, rng);
            Shape::Disk { cx, cy, r }
        }
        ShapeKind::Ellipse => {
            let a = size * 0.12 + rng.random::<f64>() * size * 0.1;
            let b = a * (0.45 + 0.4 * rng.random::<f64>());
            let theta = rng.random::<f64>() * PI;
            let (cx, cy) = center(a, size, rng);
            Shape::Ellipse { cx, cy, a, b, theta }
        }
        ShapeKind::Blob => {
            let r = size * 0.1 + rng.random::<f64>() * size * 0.08;
            let harmonics = (0..3)
                .map(|_| (rng.random::<f64>() * 0.18, rng.random::<f64>() * 2.0 * PI))
                .collect();
            let (cx, cy) = center(r * 1.5, size, rng);
            Shape::Blob { cx, cy, r, harmonics }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge replication.
fn blur(values: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return values.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let clamp = |i: i64| i.clamp(0, size as i64 - 1) as usize;
    let mut rows = vec![0.0; values.len()];
    for y in 0..size {
        for x in 0..size {
            rows[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * values[y * size + clamp(x as i64 + k as i64 - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * rows[clamp(y as i64 + k as i64 - radius) * size + x])
                .sum();
        }
    }
    out
}

/// Rasterises `shapes` into a sample. The mask tests pixel centres against
/// the crisp geometry; the image is the blurred two-level rendering plus noise.
pub fn render_sample(id: usize, shapes: Vec<Shape>, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mask: Vec<usize> = (0..size * size)
        .map(|i| {
            let (px, py) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            usize::from(shapes.iter().any(|s| s.contains(px, py)))
        })
        .collect();
    let bg = rng.random_range(BACKGROUND.0..=BACKGROUND.1);
    let fg = rng.random_range(FOREGROUND.0..=FOREGROUND.1);
    let indicator: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
    let soft = blur(&indicator, size, cfg.boundary_blur_px);
    let ambiguous = if cfg.boundary_blur_px > 0.0 {
        soft.iter().map(|&v| v > BAND.0 && v < BAND.1).collect()
    } else {
        (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                let differs = |yy: usize, xx: usize| mask[yy * size + xx] != mask[i];
                (x > 0 && differs(y, x - 1))
                    || (x + 1 < size && differs(y, x + 1))
                    || (y > 0 && differs(y - 1, x))
                    || (y + 1 < size && differs(y + 1, x))
            })
            .collect()
    };
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
    let values = soft
        .iter()
        .map(|&s| {
            let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (bg + (fg - bg) * s + n).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Sample {
        id,
        image: Tensor::new(vec![1, size, size], values)?,
        mask,
        shapes,
        ambiguous,
    })
}

/// Sample `i` draws from its own ChaCha8 stream, so the dataset is a pure
/// function of the config and generation order does not matter.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    generate_with(cfg, Exec::best_available())
}

pub(crate) fn generate_with(cfg: &SyntheticConfig, exec: Exec) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let size = cfg.image_size as f64;
    crate::par::try_map_indexed(exec, cfg.sample_count, |id| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64 + 1);
        let count = rng.random_range(1..=3);
        let shapes = (0..count)
            .map(|_| {
                let kind = cfg.shape_kinds[rng.random_range(0..cfg.shape_kinds.len())];
                random_shape(kind, size, &mut rng)
            })
            .collect();
        render_sample(id, shapes, cfg, &mut rng)
    })
}
