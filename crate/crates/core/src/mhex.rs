//! The MHEX+ side block: a bias-free 1×1 conv with ReLU, a sigmoid
//! self-gate, and a bias-free 1×1 deep-prediction head.

use rand::Rng;

use crate::error::{contract, Result};
use crate::loss::{segmentation_loss, LossKind};
use crate::tensor::{Tensor, Var};

/// Weights of one MHEX+ block.
#[derive(Debug, Clone, PartialEq)]
pub struct MhexBlock {
    conv1: Tensor,
    conv2: Tensor,
}

impl MhexBlock {
    /// `conv1: [Hd, Cin, 1, 1]`, `conv2: [K, Hd, 1, 1]`.
    pub fn new(conv1: Tensor, conv2: Tensor) -> Result<Self> {
        const OP: &str = "MhexBlock::new";
        let [hd, _, kh1, kw1] = conv1.dims4(OP)?;
        let [_, hd2, kh2, kw2] = conv2.dims4(OP)?;
        if (kh1, kw1, kh2, kw2) != (1, 1, 1, 1) {
            return contract(OP, "MHEX+ kernels must be 1x1");
        }
        if hd != hd2 {
            return contract(OP, format!("hidden width {hd} vs head input {hd2}"));
        }
        Ok(MhexBlock { conv1, conv2 })
    }

    /// He fan-in initialisation.
    pub fn init(in_channels: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Tensor::randn(&[hidden, in_channels, 1, 1], (2.0 / in_channels as f64).sqrt(), rng);
        let conv2 = Tensor::randn(&[classes, hidden, 1, 1], (2.0 / hidden as f64).sqrt(), rng);
        MhexBlock { conv1, conv2 }
    }

    pub fn conv1_weight(&self) -> &Tensor {
        &self.conv1
    }

    pub fn conv2_weight(&self) -> &Tensor {
        &self.conv2
    }

    pub fn weights_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.conv1, &mut self.conv2)
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.dims()[1]
    }

    pub fn hidden_width(&self) -> usize {
        self.conv1.dims()[0]
    }

    pub fn class_count(&self) -> usize {
        self.conv2.dims()[0]
    }

    /// `Hd·Cin + K·Hd`.
    pub fn param_count(&self) -> usize {
        self.conv1.numel() + self.conv2.numel()
    }

    /// Forward pass with the weights recorded as constants on `x`'s tape.
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<MhexOutput<'t>> {
        let tape = x.tape();
        mhex_forward(tape.constant(self.conv1.clone()), tape.constant(self.conv2.clone()), x)
    }
}

/// Intermediate values of one MHEX+ forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MhexOutput<'t> {
    /// `Conv₁(X)` before the ReLU.
    pub pre: Var<'t>,
    pub y: Var<'t>,
    pub gate: Var<'t>,
    pub attended: Var<'t>,
    pub deep_pred: Var<'t>,
}

/// `Y = ReLU(Conv₁ X)`, `gate = σ(Y)`, `Y_att = gate ⊙ Y`, `pred = Conv₂ Y`.
///
/// The deep prediction reads `Y`, not the gated features.
pub fn mhex_forward<'t>(conv1: Var<'t>, conv2: Var<'t>, x: Var<'t>) -> Result<MhexOutput<'t>> {
    let cin = conv1.value().dims()[1];
    let xc = x.value().dims4("mhex_forward")?[1];
    if xc != cin {
        return contract("mhex_forward", format!("block expects {cin} channels, input has {xc}"));
    }
    let pre = x.conv2d(conv1, 1, 0)?;
    let y = pre.relu()?;
    let gate = y.sigmoid()?;
    let attended = gate.mul(y)?;
    let deep_pred = y.conv2d(conv2, 1, 0)?;
    Ok(MhexOutput {
        pre,
        y,
        gate,
        attended,
        deep_pred,
    })
}

/// `loss(final) + w · Σ_l loss(upsample(pred_l))`, with `w = 1/L` unless
/// `aux_weight` overrides it.
pub fn deep_supervision_loss<'t>(
    deep_preds: &[Var<'t>],
    target: &[usize],
    final_logits: Var<'t>,
    kind: LossKind,
    aux_weight: Option<f64>,
) -> Result<Var<'t>> {
    const OP: &str = "deep_supervision_loss";
    if deep_preds.is_empty() {
        return contract(OP, "at least one deep prediction is required");
    }
    let [_, _, h, w] = final_logits.value().dims4(OP)?;
    let weight = aux_weight.unwrap_or(1.0 / deep_preds.len() as f64);
    let mut aux: Option<Var<'t>> = None;
    for pred in deep_preds {
        let up = upsample_to(*pred, h, w)?;
        let l = segmentation_loss(up, target, kind)?;
        aux = Some(match aux {
            Some(acc) => acc.add(l)?,
            None => l,
        });
    }
    let main = segmentation_loss(final_logits, target, kind)?;
    main.add(aux.expect("non-empty").scale(weight)?)
}

/// Nearest upsampling of a stage map to `h × w`.
pub fn upsample_to<'t>(v: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let [_, _, vh, vw] = v.value().dims4("upsample_to")?;
    if h % vh != 0 || w % vw != 0 || h / vh != w / vw {
        return contract("upsample_to", format!("{vh}x{vw} does not tile {h}x{w}"));
    }
    v.upsample_nearest(h / vh)
}
