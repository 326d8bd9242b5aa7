//! Deep-ensemble statistics: mean distribution, predictive variance, entropy.

use crate::error::{contract, Result};
use crate::explain::{MapKind, PixelMap};
use crate::models::ModelGraph;
use crate::par::{try_map_indexed, Exec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMaps {
    /// One map per class.
    pub mean_prob: Vec<PixelMap>,
    /// Foreground-class variance for two classes, mean over classes otherwise.
    pub variance: PixelMap,
    /// Entropy of the mean distribution, natural log.
    pub entropy: PixelMap,
    pub member_count: usize,
}

/// Member outputs for `image: [1, Cin, H, W]`, evaluated through `exec`.
pub fn member_probabilities(models: &[ModelGraph], image: &Tensor, exec: Exec) -> Result<Vec<Tensor>> {
    try_map_indexed(exec, models.len(), |m| {
        let p = models[m].probabilities(image)?;
        let [_, k, h, w] = p.dims4("member_probabilities")?;
        Tensor::new(vec![k, h, w], p.data()[..k * h * w].to_vec())
    })
}

pub fn ensemble_stats(models: &[ModelGraph], image: &Tensor, exec: Exec) -> Result<EnsembleMaps> {
    if models.len() < 2 {
        return contract("ensemble_stats", "need at least two members");
    }
    let k = models[0].config().class_count;
    if models.iter().any(|m| m.config().class_count != k) {
        return contract("ensemble_stats", "members disagree on the class count");
    }
    ensemble_from_probs(&member_probabilities(models, image, exec)?)
}

/// Statistics from member probabilities `[K, H, W]`. Per pixel the member
/// values are summed in sorted order, so the result does not depend on the
/// order of the members.
pub fn ensemble_from_probs(probs: &[Tensor]) -> Result<EnsembleMaps> {
    const OP: &str = "ensemble_from_probs";
    let Some(first) = probs.first() else {
        return contract(OP, "no members");
    };
    if first.rank() != 3 {
        return contract(OP, "member probabilities must be [K, H, W]");
    }
    let (k, h, w) = (first.dims()[0], first.dims()[1], first.dims()[2]);
    if probs.iter().any(|p| p.dims() != first.dims()) {
        return contract(OP, "members disagree on shape or class count");
    }
    let n = probs.len() as f64;
    let plane = h * w;
    let mut mean = vec![vec![0.0; plane]; k];
    let mut var = vec![vec![0.0; plane]; k];
    let mut column = vec![0.0; probs.len()];
    for c in 0..k {
        for s in 0..plane {
            for (slot, p) in column.iter_mut().zip(probs) {
                *slot = p.data()[c * plane + s];
            }
            column.sort_by(f64::total_cmp);
            if column[0] == column[column.len() - 1] {
                mean[c][s] = column[0];
                continue;
            }
            let mu = column.iter().sum::<f64>() / n;
            let mut dev: Vec<f64> = column.iter().map(|v| (v - mu) * (v - mu)).collect();
            dev.sort_by(f64::total_cmp);
            mean[c][s] = mu;
            var[c][s] = dev.iter().sum::<f64>() / n;
        }
    }
    let variance: Vec<f64> = if k == 2 {
        var[1].clone()
    } else {
        (0..plane)
            .map(|s| var.iter().map(|v| v[s]).sum::<f64>() / k as f64)
            .collect()
    };
    let max_entropy = (k as f64).ln();
    let entropy = (0..plane)
        .map(|s| {
            let h: f64 = mean
                .iter()
                .map(|m| if m[s] > 0.0 { -m[s] * m[s].ln() } else { 0.0 })
                .sum();
            h.clamp(0.0, max_entropy)
        })
        .collect();
    Ok(EnsembleMaps {
        mean_prob: mean
            .into_iter()
            .map(|m| PixelMap::new(h, w, m, MapKind::MeanProb))
            .collect::<Result<_>>()?,
        variance: PixelMap::new(h, w, variance, MapKind::Variance)?,
        entropy: PixelMap::new(h, w, entropy, MapKind::Entropy)?,
        member_count: probs.len(),
    })
}
