//! Agreement between two uncertainty maps: Otsu masks, overlap and correlation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::explain::PixelMap;
use crate::par::{map_indexed, Exec};

pub const OTSU_BINS: usize = 256;
pub const PERMUTATIONS: usize = 1000;

/// Otsu binarisation of one map.
#[derive(Debug, Clone, PartialEq)]
pub struct OtsuMask {
    pub mask: Vec<bool>,
    /// Value at the upper edge of the last background bin.
    pub threshold: f64,
    /// The map was constant; the mask is empty.
    pub degenerate: bool,
}

/// Histogram of 256 equal bins over `[min, max]`; the split maximising the
/// between-class variance (first one on ties) separates background bins
/// `0..=t` from foreground.
pub fn otsu(map: &PixelMap) -> OtsuMask {
    let (lo, hi) = map.min_max();
    let n = map.values().len();
    if hi <= lo {
        return OtsuMask {
            mask: vec![false; n],
            threshold: lo,
            degenerate: true,
        };
    }
    let range = hi - lo;
    let bins: Vec<usize> = map
        .values()
        .iter()
        .map(|v| (((v - lo) / range * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1))
        .collect();
    let mut hist = [0usize; OTSU_BINS];
    for &b in &bins {
        hist[b] += 1;
    }
    let total = n as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_t, mut best_var) = (0, f64::NEG_INFINITY);
    for (t, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best_var {
            best_var = between;
            best_t = t;
        }
    }
    OtsuMask {
        mask: bins.iter().map(|&b| b > best_t).collect(),
        threshold: lo + (best_t + 1) as f64 * range / OTSU_BINS as f64,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub iou: f64,
    pub dice: f64,
    pub pearson_r: f64,
    pub p_value: f64,
    pub threshold_a: f64,
    pub threshold_b: f64,
    /// A map was constant: its mask is empty and `r` is reported as 0.
    pub degenerate: bool,
}

/// `(IoU, Dice)` of two masks; both are 1 when the masks are empty.
pub fn overlap(a: &[bool], b: &[bool]) -> (f64, f64) {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let na = a.iter().filter(|x| **x).count();
    let nb = b.iter().filter(|x| **x).count();
    let union = na + nb - inter;
    if union == 0 {
        return (1.0, 1.0);
    }
    (inter as f64 / union as f64, 2.0 * inter as f64 / (na + nb) as f64)
}

fn centred(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let d: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let ss = d.iter().map(|x| x * x).sum();
    (d, ss)
}

/// Pearson correlation, `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (da, sa) = centred(a);
    let (db, sb) = centred(b);
    let denom = (sa * sb).sqrt();
    if denom == 0.0 {
        return None;
    }
    let cov: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
    Some((cov / denom).clamp(-1.0, 1.0))
}

/// Two-sided permutation p-value of `r(a, b)`: `b` is shuffled
/// [`PERMUTATIONS`] times (shuffle `i` draws from stream `i` of a ChaCha8
/// generator seeded with `seed`) and `p = (1 + #{|r_π| ≥ |r|}) / (1 + PERMUTATIONS)`.
pub fn permutation_p_value(a: &[f64], b: &[f64], seed: u64, exec: Exec) -> Option<f64> {
    let r = pearson(a, b)?;
    let (da, sa) = centred(a);
    let (db, sb) = centred(b);
    let denom = (sa * sb).sqrt();
    let hits = map_indexed(exec, PERMUTATIONS, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut perm: Vec<usize> = (0..db.len()).collect();
        perm.shuffle(&mut rng);
        let cov: f64 = da.iter().zip(&perm).map(|(x, &j)| x * db[j]).sum();
        usize::from((cov / denom).abs() >= r.abs())
    });
    Some((1 + hits.iter().sum::<usize>()) as f64 / (1 + PERMUTATIONS) as f64)
}

pub fn agreement_metrics(a: &PixelMap, b: &PixelMap) -> Result<AgreementReport> {
    agreement_metrics_with(a, b, 0, Exec::best_available())
}

pub fn agreement_metrics_with(a: &PixelMap, b: &PixelMap, seed: u64, exec: Exec) -> Result<AgreementReport> {
    if a.height() != b.height() || a.width() != b.width() {
        return contract(
            "agreement_metrics",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        );
    }
    let (ma, mb) = (otsu(a), otsu(b));
    let (iou, dice) = overlap(&ma.mask, &mb.mask);
    let r = pearson(a.values(), b.values());
    let p = permutation_p_value(a.values(), b.values(), seed, exec);
    Ok(AgreementReport {
        iou,
        dice,
        pearson_r: r.unwrap_or(0.0),
        p_value: p.unwrap_or(1.0),
        threshold_a: ma.threshold,
        threshold_b: mb.threshold,
        degenerate: ma.degenerate || mb.degenerate || r.is_none(),
    })
}
