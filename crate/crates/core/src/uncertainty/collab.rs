//! Collaboration-gradient uncertainty.
//!
//! For a pixel `p` and adjacent decoder stages `l`, `l+1`, both per-pixel
//! cross-entropy losses of the (upsampled) deep predictions are
//! differentiated w.r.t. block `l`'s `C₁`. The loss of stage `l` reaches
//! `C₁` directly; the loss of stage `l+1` reaches it through the attended
//! residual, the upsampling and the next double conv. The latter gradient is
//! assembled here from the stored forward values over the receptive window
//! of `p` instead of a full reverse sweep per pixel.

use crate::error::{contract, Result};
use crate::explain::{MapKind, PixelMap};
use crate::models::{ForwardOptions, ModelGraph, Shortcut};
use crate::par::{try_map_indexed, Exec};
use crate::tensor::{sigmoid, Tape, Tensor};

/// Which labels the per-pixel losses are computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelSource {
    /// Argmax of the network's final output.
    #[default]
    FinalPrediction,
    /// Argmax of the deepest (full-resolution) MHEX+ prediction.
    DeepestHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyConfig {
    /// Guard added to the product of gradient norms.
    pub epsilon: f64,
    /// Report `U = (1 − S/(L−1))/2` instead of the raw cosine sum `S`.
    pub normalize: bool,
    /// Evaluate every `pixel_stride`-th pixel per axis and fill the block.
    pub pixel_stride: usize,
    pub labels: LabelSource,
    /// Seed for sample selection and permutation tests.
    pub seed: u64,
    pub exec: Exec,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            epsilon: 1e-8,
            normalize: true,
            pixel_stride: 1,
            labels: LabelSource::FinalPrediction,
            seed: 0,
            exec: Exec::best_available(),
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return contract("UncertaintyConfig", "epsilon must be positive");
        }
        if self.pixel_stride == 0 {
            return contract("UncertaintyConfig", "pixel_stride must be >= 1");
        }
        Ok(())
    }
}

/// Result of [`collaboration_map`].
#[derive(Debug, Clone, PartialEq)]
pub struct CollabMap {
    /// `U` when normalising, otherwise equal to `raw`.
    pub map: PixelMap,
    /// Cosine sum `S` over the `L − 1` adjacent pairs.
    pub raw: PixelMap,
    /// Per pair, the cosine at each pixel.
    pub pair_cosines: Vec<PixelMap>,
    /// Pixel-pair evaluations where a gradient had zero norm (cosine 0).
    pub zero_norm: usize,
}

/// `⟨a, b⟩ / (‖a‖‖b‖ + ε)` and whether the norm product vanished.
pub fn guarded_cosine(a: &[f64], b: &[f64], epsilon: f64) -> (f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na * nb;
    (dot / (denom + epsilon), denom == 0.0)
}

/// Sums per-pair cosine maps and applies the orientation rule.
pub fn combine_cosines(pair_cosines: &[PixelMap], normalize: bool) -> Result<(PixelMap, PixelMap)> {
    let Some(first) = pair_cosines.first() else {
        return contract("combine_cosines", "need at least one stage pair");
    };
    let (h, w) = (first.height(), first.width());
    if pair_cosines.iter().any(|m| m.height() != h || m.width() != w) {
        return contract("combine_cosines", "pair maps differ in size");
    }
    let pairs = pair_cosines.len() as f64;
    let raw: Vec<f64> = (0..h * w)
        .map(|i| pair_cosines.iter().map(|m| m.values()[i]).sum())
        .collect();
    let map = if normalize {
        raw.iter().map(|s| ((1.0 - s / pairs) / 2.0).clamp(0.0, 1.0)).collect()
    } else {
        raw.clone()
    };
    Ok((
        PixelMap::new(h, w, map, MapKind::Uncertainty)?,
        PixelMap::new(h, w, raw, MapKind::Uncertainty)?,
    ))
}

/// Field of per-pixel gradient pairs, for callers that already hold them:
/// `pairs[k][p] = (∇_l, ∇_{l+1})` for pair `k` at pixel `p`.
pub fn collaboration_from_gradients(
    pairs: &[Vec<(Vec<f64>, Vec<f64>)>],
    height: usize,
    width: usize,
    cfg: &UncertaintyConfig,
) -> Result<CollabMap> {
    cfg.validate()?;
    let mut zero_norm = 0;
    let mut maps = Vec::with_capacity(pairs.len());
    for field in pairs {
        if field.len() != height * width {
            return contract("collaboration_from_gradients", "field size does not match the map");
        }
        let values = field
            .iter()
            .map(|(a, b)| {
                let (c, zero) = guarded_cosine(a, b, cfg.epsilon);
                zero_norm += usize::from(zero);
                c
            })
            .collect();
        maps.push(PixelMap::new(height, width, values, MapKind::Uncertainty)?);
    }
    let (map, raw) = combine_cosines(&maps, cfg.normalize)?;
    Ok(CollabMap {
        map,
        raw,
        pair_cosines: maps,
        zero_norm,
    })
}

/// `softmax(z) − e_t`: gradient of `CE(z, t)` w.r.t. the logits `z`.
fn ce_logit_grad(logits: &[f64], t: usize) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / s).collect();
    // p_t - 1 as -Σ_{k≠t} p_k, which keeps its digits when p_t ≈ 1
    let rest: f64 = p.iter().enumerate().filter(|&(k, _)| k != t).map(|(_, v)| v).sum();
    p.iter()
        .enumerate()
        .map(|(k, &v)| if k == t { -rest } else { v })
        .collect()
}

/// `[1, C, H, W]` view with channel-column access.
struct Planes<'a> {
    t: &'a Tensor,
    c: usize,
    h: usize,
    w: usize,
}

impl<'a> Planes<'a> {
    fn new(t: &'a Tensor) -> Self {
        let d = t.dims();
        Planes {
            t,
            c: d[1],
            h: d[2],
            w: d[3],
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.t.data()[(c * self.h + y) * self.w + x]
    }

    fn column(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.c).map(|c| self.at(c, y, x)).collect()
    }
}

/// `Wᵀ v` for a pointwise weight `[O, I, 1, 1]`.
fn pointwise_t(w: &Tensor, v: &[f64]) -> Vec<f64> {
    let (o, i) = (w.dims()[0], w.dims()[1]);
    let d = w.data();
    let mut out = vec![0.0; i];
    for (oo, &g) in v.iter().enumerate().take(o) {
        if g != 0.0 {
            for (ii, acc) in out.iter_mut().enumerate() {
                *acc += d[oo * i + ii] * g;
            }
        }
    }
    out
}

/// Forward values and weights for one adjacent stage pair.
struct PairCtx<'a> {
    x_l: Planes<'a>,
    pre_l: Planes<'a>,
    pred_l: Planes<'a>,
    c2_l: &'a Tensor,
    input: Planes<'a>,
    z_a: Planes<'a>,
    z_b: Planes<'a>,
    pre_n: Planes<'a>,
    pred_n: Planes<'a>,
    c1_n: &'a Tensor,
    c2_n: &'a Tensor,
    wa: &'a Tensor,
    wb: &'a Tensor,
    shortcut: &'a Shortcut,
}

impl PairCtx<'_> {
    /// `∇_{C₁} CE(pred_l[:, y, x], t)` flattened as `[Hd, C]`.
    fn anchor_grad(&self, y: usize, x: usize, t: usize) -> Vec<f64> {
        let g = ce_logit_grad(&self.pred_l.column(y, x), t);
        let dy = pointwise_t(self.c2_l, &g);
        let xs = self.x_l.column(y, x);
        let mut out = Vec::with_capacity(dy.len() * xs.len());
        for (j, d) in dy.iter().enumerate() {
            let dpre = if self.pre_l.at(j, y, x) > 0.0 { *d } else { 0.0 };
            out.extend(xs.iter().map(|xv| dpre * xv));
        }
        out
    }

    /// `∇_{C₁ of l} CE(pred_{l+1}[:, qy, qx], t)` flattened as `[Hd, C]`.
    fn next_grad(&self, qy: usize, qx: usize, t: usize) -> Vec<f64> {
        let (h2, w2) = (self.z_b.h, self.z_b.w);
        let cn = self.z_b.c;
        let cl = self.x_l.c;
        let hd = self.pre_l.c;

        // head of stage l+1 back to its features D at q
        let g = ce_logit_grad(&self.pred_n.column(qy, qx), t);
        let mut dpre = pointwise_t(self.c2_n, &g);
        for (j, v) in dpre.iter_mut().enumerate() {
            if self.pre_n.at(j, qy, qx) <= 0.0 {
                *v = 0.0;
            }
        }
        let d_feat = pointwise_t(self.c1_n, &dpre);
        let dzb: Vec<f64> = (0..cn)
            .map(|c| if self.z_b.at(c, qy, qx) > 0.0 { d_feat[c] } else { 0.0 })
            .collect();

        let kb = self.wb.dims()[2];
        let ka = self.wa.dims()[2];
        let (pb, pa) = (kb / 2, ka / 2);
        let r = pa + pb;
        let span = 2 * r + 1;
        // input-gradient window centred on q, up-sampled channels only
        let mut din = vec![0.0; span * span * cl];
        let cin = self.wa.dims()[1];
        let (wa, wb) = (self.wa.data(), self.wb.data());

        for ky in 0..kb {
            let Some(y1) = (qy + ky).checked_sub(pb).filter(|&v| v < h2) else {
                continue;
            };
            for kx in 0..kb {
                let Some(x1) = (qx + kx).checked_sub(pb).filter(|&v| v < w2) else {
                    continue;
                };
                // d relu(z_a) at (y1, x1), then through its mask
                let dza: Vec<f64> = (0..cn)
                    .map(|ci| {
                        if self.z_a.at(ci, y1, x1) <= 0.0 {
                            return 0.0;
                        }
                        (0..cn)
                            .map(|co| wb[((co * cn + ci) * kb + ky) * kb + kx] * dzb[co])
                            .sum()
                    })
                    .collect();
                for ay in 0..ka {
                    let Some(y2) = (y1 + ay).checked_sub(pa).filter(|&v| v < h2) else {
                        continue;
                    };
                    for ax in 0..ka {
                        let Some(x2) = (x1 + ax).checked_sub(pa).filter(|&v| v < w2) else {
                            continue;
                        };
                        let slot = ((y2 + r - qy) * span + (x2 + r - qx)) * cl;
                        for (co, &dz) in dza.iter().enumerate() {
                            if dz == 0.0 {
                                continue;
                            }
                            let base = co * cin * ka * ka + ay * ka + ax;
                            for ci in 0..cl {
                                din[slot + ci] += wa[base + ci * ka * ka] * dz;
                            }
                        }
                    }
                }
            }
        }
        let centre = (r * span + r) * cl;
        match self.shortcut {
            Shortcut::Projection(p) => {
                let back = pointwise_t(&p.weight, &d_feat);
                for ci in 0..cl {
                    din[centre + ci] += back[ci];
                }
            }
            Shortcut::Identity => {
                for ci in 0..cl.min(cn) {
                    din[centre + ci] += d_feat[ci];
                }
            }
            Shortcut::None => {}
        }

        // nearest-upsample adjoint onto stage-l positions, then fold, gate, ReLU
        let (h1, w1) = (self.x_l.h, self.x_l.w);
        let mut grad = vec![0.0; hd * cl];
        let (sy0, sx0) = (qy.saturating_sub(r) / 2, qx.saturating_sub(r) / 2);
        let (sy1, sx1) = (((qy + r).min(h2 - 1)) / 2, ((qx + r).min(w2 - 1)) / 2);
        for sy in sy0..=sy1.min(h1 - 1) {
            for sx in sx0..=sx1.min(w1 - 1) {
                let mut d_out = vec![0.0; cl];
                for y in 2 * sy..2 * sy + 2 {
                    for x in 2 * sx..2 * sx + 2 {
                        if y + r < qy || y > qy + r || x + r < qx || x > qx + r {
                            continue;
                        }
                        let slot = ((y + r - qy) * span + (x + r - qx)) * cl;
                        for (c, d) in d_out.iter_mut().enumerate() {
                            *d += din[slot + c];
                        }
                    }
                }
                let xs = self.x_l.column(sy, sx);
                for j in 0..hd {
                    let pre = self.pre_l.at(j, sy, sx);
                    if pre <= 0.0 {
                        continue;
                    }
                    let s = sigmoid(pre);
                    let d_y = d_out[j % cl] * (s + pre * s * (1.0 - s));
                    for (c, xv) in xs.iter().enumerate() {
                        grad[j * cl + c] += d_y * xv;
                    }
                }
            }
        }
        grad
    }
}

/// Per-pixel collaboration uncertainty of `image: [1, Cin, H, W]` against
/// the labels chosen by `cfg.labels`.
pub fn collaboration_map(model: &ModelGraph, image: &Tensor, cfg: &UncertaintyConfig) -> Result<CollabMap> {
    collaboration_map_with_labels(model, image, None, cfg)
}

/// As [`collaboration_map`] with explicit per-pixel labels (`H·W` ids).
pub fn collaboration_map_with_labels(
    model: &ModelGraph,
    image: &Tensor,
    labels: Option<&[usize]>,
    cfg: &UncertaintyConfig,
) -> Result<CollabMap> {
    const OP: &str = "collaboration_map";
    cfg.validate()?;
    let mc = model.config();
    if !mc.with_mhex {
        return contract(OP, "model has no MHEX+ blocks");
    }
    if mc.depth < 2 {
        return contract(OP, "need at least two decoder stages");
    }
    let [n, _, h, w] = image.dims4(OP)?;
    if n != 1 {
        return contract(OP, "expects a single image");
    }
    let k = mc.class_count;
    let tape = Tape::with_exec(cfg.exec);
    let trace = model.forward(&tape, tape.constant(image.clone()), ForwardOptions::default())?;

    let labels: Vec<usize> = match labels {
        Some(l) if l.len() == h * w => {
            if let Some(bad) = l.iter().find(|&&c| c >= k) {
                return contract(OP, format!("label {bad} outside [0, {k})"));
            }
            l.to_vec()
        }
        Some(l) => return contract(OP, format!("{} labels for {} pixels", l.len(), h * w)),
        None => {
            let logits = match cfg.labels {
                LabelSource::FinalPrediction => trace.final_logits.value(),
                LabelSource::DeepestHead => trace.deep_preds.last().expect("mhex stages").value(),
            };
            crate::models::predict_from_logits(&logits)?.remove(0).mask
        }
    };

    let stride = cfg.pixel_stride;
    let sampled = |y: usize, x: usize| y % stride == 0 && x % stride == 0;
    let depth = mc.depth;
    let blocks = model.nodes();
    let mut pair_maps = Vec::with_capacity(depth - 1);
    let mut zero_norm = 0;
    for l in 1..depth {
        let (a, b) = (&trace.stages[l - 1], &trace.stages[l]);
        let (ma, mb) = (a.mhex.expect("mhex stage"), b.mhex.expect("mhex stage"));
        let node_l = blocks
            .iter()
            .find(|nd| nd.col == l && nd.row + nd.col == depth)
            .expect("stage node");
        let node_n = blocks
            .iter()
            .find(|nd| nd.col == l + 1 && nd.row + nd.col == depth)
            .expect("stage node");
        let (mhex_l, mhex_n) = (node_l.mhex.as_ref().expect("mhex"), node_n.mhex.as_ref().expect("mhex"));
        let vals = [
            a.features.value(),
            ma.pre.value(),
            ma.deep_pred.value(),
            b.input.value(),
            b.z_a.value(),
            b.z_b.value(),
            mb.pre.value(),
            mb.deep_pred.value(),
        ];
        let ctx = PairCtx {
            x_l: Planes::new(&vals[0]),
            pre_l: Planes::new(&vals[1]),
            pred_l: Planes::new(&vals[2]),
            c2_l: mhex_l.conv2_weight(),
            input: Planes::new(&vals[3]),
            z_a: Planes::new(&vals[4]),
            z_b: Planes::new(&vals[5]),
            pre_n: Planes::new(&vals[6]),
            pred_n: Planes::new(&vals[7]),
            c1_n: mhex_n.conv1_weight(),
            c2_n: mhex_n.conv2_weight(),
            wa: &node_n.block.conv_a.weight,
            wb: &node_n.block.conv_b.weight,
            shortcut: &node_n.block.shortcut,
        };
        debug_assert_eq!(ctx.input.c, ctx.wa.dims()[1]);
        let (h2, w2) = (ctx.z_b.h, ctx.z_b.w);
        let shift = (h / h2).trailing_zeros();
        // labels needed at each stage-(l+1) pixel
        let mut need = vec![false; h2 * w2 * k];
        for y in (0..h).filter(|y| y % stride == 0) {
            for x in (0..w).filter(|x| x % stride == 0) {
                need[((y >> shift) * w2 + (x >> shift)) * k + labels[y * w + x]] = true;
            }
        }
        let per_q: Vec<Vec<(f64, bool)>> = try_map_indexed(cfg.exec, h2 * w2, |q| {
            let (qy, qx) = (q / w2, q % w2);
            let mut out = vec![(0.0, false); k];
            for (t, slot) in out.iter_mut().enumerate() {
                if need[q * k + t] {
                    let anchor = ctx.anchor_grad(qy / 2, qx / 2, t);
                    let next = ctx.next_grad(qy, qx, t);
                    *slot = guarded_cosine(&anchor, &next, cfg.epsilon);
                }
            }
            Ok::<_, crate::Error>(out)
        })?;
        let mut values = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y - y % stride, x - x % stride);
                debug_assert!(sampled(sy, sx));
                let (c, zero) = per_q[(sy >> shift) * w2 + (sx >> shift)][labels[sy * w + sx]];
                values[y * w + x] = c;
                if y == sy && x == sx {
                    zero_norm += usize::from(zero);
                }
            }
        }
        pair_maps.push(PixelMap::new(h, w, values, MapKind::Uncertainty)?);
    }
    let (map, raw) = combine_cosines(&pair_maps, cfg.normalize)?;
    Ok(CollabMap {
        map,
        raw,
        pair_cosines: pair_maps,
        zero_norm,
    })
}
