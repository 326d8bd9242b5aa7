//! Segmentation losses shared by the MHEX+ heads and the training loop.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::tensor::{Tensor, Var};

/// Default Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    Dice { smooth: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::CrossEntropy
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::CrossEntropy => f.write_str("ce"),
            LossKind::Dice { .. } => f.write_str("dice"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::CrossEntropy),
            "dice" => Ok(LossKind::Dice { smooth: DICE_SMOOTH }),
            other => contract("LossKind::from_str", format!("unknown loss {other:?}")),
        }
    }
}

/// One-hot encoding of class ids laid out as `[N, H, W]` into `[N, K, H, W]`.
pub fn one_hot(target: &[usize], n: usize, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let plane = h * w;
    if target.len() != n * plane {
        return contract("one_hot", format!("{} ids for {} pixels", target.len(), n * plane));
    }
    let mut out = Tensor::zeros(&[n, k, h, w]);
    for b in 0..n {
        for s in 0..plane {
            let t = target[b * plane + s];
            if t >= k {
                return contract("one_hot", format!("class id {t} outside [0, {k})"));
            }
            out.data_mut()[(b * k + t) * plane + s] = 1.0;
        }
    }
    Ok(out)
}

/// Loss of `[N, K, H, W]` logits against per-pixel class ids.
pub fn segmentation_loss<'t>(logits: Var<'t>, target: &[usize], kind: LossKind) -> Result<Var<'t>> {
    match kind {
        LossKind::CrossEntropy => logits.softmax_ce(target),
        LossKind::Dice { smooth } => {
            let [n, k, h, w] = logits.value().dims4("segmentation_loss")?;
            let onehot = one_hot(target, n, k, h, w)?;
            logits.softmax()?.dice_loss(&onehot, smooth)
        }
    }
}
