//! U-Net and U-Net++ backbones with optional MHEX+ blocks on every
//! decoder stage.
//!
//! Nodes follow the nested grid notation `X(row, col)`: column 0 is the
//! encoder (row `depth` is the bottleneck); decoder stage `l` is the node
//! `X(depth − l, l)`. U-Net keeps only those decoder nodes; U-Net++ also
//! instantiates every `X(i, j)` with `i + j < depth` and feeds each node
//! all earlier nodes of its row.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::explain::{MapKind, PixelMap};
use crate::mhex::{mhex_forward, MhexBlock, MhexOutput};
use crate::tensor::{softmax_channels, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backbone {
    #[default]
    UNet,
    UNetPlusPlus,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::UNet => "unet",
            Backbone::UNetPlusPlus => "unetpp",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Backbone::UNet),
            "unetpp" => Ok(Backbone::UNetPlusPlus),
            other => contract("Backbone::from_str", format!("unknown backbone {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub with_mhex: bool,
    pub in_channels: usize,
    pub class_count: usize,
    pub base_width: usize,
    /// Number of encoder stages; also the number of decoder stages `L`.
    pub depth: usize,
    pub mhex_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::UNet,
            with_mhex: true,
            in_channels: 1,
            class_count: 2,
            base_width: 8,
            depth: 3,
            mhex_hidden: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ModelConfig";
        if self.depth < 2 {
            return contract(OP, "depth must be >= 2");
        }
        if self.base_width < 4 {
            return contract(OP, "base_width must be >= 4");
        }
        if self.class_count < 2 {
            return contract(OP, "class_count must be >= 2");
        }
        if self.in_channels == 0 || self.mhex_hidden == 0 {
            return contract(OP, "in_channels and mhex_hidden must be positive");
        }
        Ok(())
    }

    /// Channel width of grid row `row`.
    pub fn width(&self, row: usize) -> usize {
        self.base_width << row
    }
}

/// A biased convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn init(cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        Conv {
            weight: Tensor::randn(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut {
    /// Plain double conv (encoder and bottleneck).
    None,
    Identity,
    /// 1×1 projection when the channel counts differ.
    Projection(Conv),
}

/// `conv → relu → conv → relu`, plus the shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv {
    pub conv_a: Conv,
    pub conv_b: Conv,
    pub shortcut: Shortcut,
}

impl DoubleConv {
    fn init(cin: usize, cout: usize, residual: bool, rng: &mut ChaCha8Rng) -> Self {
        let conv_a = Conv::init(cout, cin, 3, rng);
        let conv_b = Conv::init(cout, cout, 3, rng);
        let shortcut = match (residual, cin == cout) {
            (false, _) => Shortcut::None,
            (true, true) => Shortcut::Identity,
            (true, false) => Shortcut::Projection(Conv::init(cout, cin, 1, rng)),
        };
        DoubleConv {
            conv_a,
            conv_b,
            shortcut,
        }
    }
}

/// One node `X(row, col)` of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub row: usize,
    pub col: usize,
    pub block: DoubleConv,
    pub mhex: Option<MhexBlock>,
}

/// A built network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    config: ModelConfig,
    /// Topological order: the encoder column top-down, then columns left to right.
    nodes: Vec<Node>,
    head: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub mhex_only: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Drop the `Y_attended` residual so the backbone runs as if no MHEX+
    /// block were attached. Deep predictions are still produced.
    pub ablate_mhex_residual: bool,
    /// Record parameters as differentiable leaves.
    pub params_require_grad: bool,
}

/// Values recorded for one decoder stage.
#[derive(Debug, Clone)]
pub struct StageTrace<'t> {
    /// 1-based stage index `l`.
    pub stage: usize,
    pub row: usize,
    /// Concatenated stage input; the upsampled previous stage occupies the
    /// leading channels.
    pub input: Var<'t>,
    pub z_a: Var<'t>,
    pub z_b: Var<'t>,
    /// Residual double-conv output; this is the MHEX+ input `X_l`.
    pub features: Var<'t>,
    pub mhex: Option<MhexOutput<'t>>,
    pub mhex_conv1: Option<Var<'t>>,
    pub mhex_conv2: Option<Var<'t>>,
    /// Features handed to the next stage.
    pub output: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<'t> {
    pub final_logits: Var<'t>,
    /// One per decoder stage when MHEX+ is attached, coarsest first.
    pub deep_preds: Vec<Var<'t>>,
    pub stages: Vec<StageTrace<'t>>,
    /// Parameter leaves in [`ModelGraph::visit_params`] order.
    pub params: Vec<Var<'t>>,
}

/// Argmax mask and max-class probability for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<usize>,
    pub confidence: PixelMap,
    /// `[K, H, W]` softmax probabilities.
    pub probs: Tensor,
}

impl ModelGraph {
    /// Builds a network with He fan-in initialisation drawn from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.depth;
        let mut nodes = Vec::new();
        for row in 0..=d {
            let cin = if row == 0 { cfg.in_channels } else { cfg.width(row - 1) };
            nodes.push(Node {
                row,
                col: 0,
                block: DoubleConv::init(cin, cfg.width(row), false, &mut rng),
                mhex: None,
            });
        }
        for col in 1..=d {
            let rows: Vec<usize> = match cfg.backbone {
                Backbone::UNet => vec![d - col],
                Backbone::UNetPlusPlus => (0..=d - col).rev().collect(),
            };
            for row in rows {
                let skips = Self::skip_cols(cfg.backbone, col).len();
                let cin = cfg.width(row + 1) + skips * cfg.width(row);
                let block = DoubleConv::init(cin, cfg.width(row), true, &mut rng);
                let mhex = (cfg.with_mhex && row + col == d)
                    .then(|| MhexBlock::init(cfg.width(row), cfg.mhex_hidden, cfg.class_count, &mut rng));
                nodes.push(Node { row, col, block, mhex });
            }
        }
        let head = Conv::init(cfg.class_count, cfg.width(0), 1, &mut rng);
        Ok(ModelGraph {
            config: cfg.clone(),
            nodes,
            head,
        })
    }

    /// Columns of the same row feeding node `X(·, col)` as skips.
    fn skip_cols(backbone: Backbone, col: usize) -> Vec<usize> {
        match backbone {
            Backbone::UNet => vec![0],
            Backbone::UNetPlusPlus => (0..col).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    /// Number of decoder stages `L`.
    pub fn stage_count(&self) -> usize {
        self.config.depth
    }

    /// Index into [`Self::nodes`] of decoder stage `l` (1-based).
    fn stage_node(&self, l: usize) -> usize {
        let (row, col) = (self.config.depth - l, l);
        self.nodes
            .iter()
            .position(|n| n.row == row && n.col == col)
            .expect("decoder stage exists")
    }

    /// MHEX+ blocks by stage, coarsest first.
    pub fn mhex_blocks(&self) -> Vec<&MhexBlock> {
        (1..=self.stage_count())
            .filter_map(|l| self.nodes[self.stage_node(l)].mhex.as_ref())
            .collect()
    }

    pub fn mhex_block_mut(&mut self, stage: usize) -> Option<&mut MhexBlock> {
        let i = self.stage_node(stage);
        self.nodes[i].mhex.as_mut()
    }

    /// Visits every parameter tensor in a fixed order with a stable name.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        for node in &self.nodes {
            let p = format!("x{}_{}", node.row, node.col);
            let b = &node.block;
            f(&format!("{p}.conv_a.weight"), &b.conv_a.weight);
            f(&format!("{p}.conv_a.bias"), &b.conv_a.bias);
            f(&format!("{p}.conv_b.weight"), &b.conv_b.weight);
            f(&format!("{p}.conv_b.bias"), &b.conv_b.bias);
            if let Shortcut::Projection(c) = &b.shortcut {
                f(&format!("{p}.proj.weight"), &c.weight);
                f(&format!("{p}.proj.bias"), &c.bias);
            }
            if let Some(m) = &node.mhex {
                f(&format!("{p}.mhex.conv1"), m.conv1_weight());
                f(&format!("{p}.mhex.conv2"), m.conv2_weight());
            }
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    /// Mutable counterpart of [`Self::visit_params`], same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for node in &mut self.nodes {
            let p = format!("x{}_{}", node.row, node.col);
            let b = &mut node.block;
            f(&format!("{p}.conv_a.weight"), &mut b.conv_a.weight);
            f(&format!("{p}.conv_a.bias"), &mut b.conv_a.bias);
            f(&format!("{p}.conv_b.weight"), &mut b.conv_b.weight);
            f(&format!("{p}.conv_b.bias"), &mut b.conv_b.bias);
            if let Shortcut::Projection(c) = &mut b.shortcut {
                f(&format!("{p}.proj.weight"), &mut c.weight);
                f(&format!("{p}.proj.bias"), &mut c.bias);
            }
            if let Some(m) = &mut node.mhex {
                let (c1, c2) = m.weights_mut();
                f(&format!("{p}.mhex.conv1"), c1);
                f(&format!("{p}.mhex.conv2"), c2);
            }
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(|n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> ParamCount {
        let mut total = 0;
        self.visit_params(|_, t| total += t.numel());
        let mhex_only = self.mhex_blocks().iter().map(|b| b.param_count()).sum();
        ParamCount { total, mhex_only }
    }

    /// Runs the network on `image: [N, Cin, H, W]`, recording on `tape`.
    pub fn forward<'t>(&self, tape: &'t Tape, image: Var<'t>, opts: ForwardOptions) -> Result<ForwardTrace<'t>> {
        const OP: &str = "ModelGraph::forward";
        let cfg = &self.config;
        let [_, c, h, w] = image.value().dims4(OP)?;
        if c != cfg.in_channels {
            return contract(OP, format!("model expects {} channels, image has {c}", cfg.in_channels));
        }
        let unit = 1usize << cfg.depth;
        if h % unit != 0 || w % unit != 0 {
            return contract(OP, format!("{h}x{w} is not divisible by 2^{}", cfg.depth));
        }

        let mut params = Vec::new();
        let mut leaf = |t: &Tensor| {
            let v = tape.leaf(t.clone(), opts.params_require_grad);
            params.push(v);
            v
        };
        let conv_vars = |conv: &Conv, leaf: &mut dyn FnMut(&Tensor) -> Var<'t>| (leaf(&conv.weight), leaf(&conv.bias));

        let d = cfg.depth;
        // Outputs indexed by [row][col].
        let mut outs: Vec<Vec<Option<Var<'t>>>> = vec![vec![None; d + 1]; d + 1];
        let mut stages: Vec<StageTrace<'t>> = Vec::new();
        for node in &self.nodes {
            let b = &node.block;
            let (wa, ba) = conv_vars(&b.conv_a, &mut leaf);
            let (wb, bb) = conv_vars(&b.conv_b, &mut leaf);
            let proj = match &b.shortcut {
                Shortcut::Projection(p) => Some(conv_vars(p, &mut leaf)),
                _ => None,
            };
            let mhex_vars = node
                .mhex
                .as_ref()
                .map(|m| (leaf(m.conv1_weight()), leaf(m.conv2_weight())));

            let input = if node.col == 0 {
                if node.row == 0 {
                    image
                } else {
                    outs[node.row - 1][0].expect("encoder order").max_pool2()?
                }
            } else {
                let below = outs[node.row + 1][node.col - 1].expect("topological order");
                let mut parts = vec![below.upsample_nearest(2)?];
                for sc in Self::skip_cols(cfg.backbone, node.col) {
                    parts.push(outs[node.row][sc].expect("skip available"));
                }
                tape.concat(&parts)?
            };
            let pad_a = b.conv_a.kernel_size() / 2;
            let pad_b = b.conv_b.kernel_size() / 2;
            let z_a = input.conv2d(wa, 1, pad_a)?.add_bias(ba)?;
            let z_b = z_a.relu()?.conv2d(wb, 1, pad_b)?.add_bias(bb)?;
            let act = z_b.relu()?;
            let features = match (&b.shortcut, proj) {
                (Shortcut::None, _) => act,
                (Shortcut::Identity, _) => act.add(input)?,
                (Shortcut::Projection(_), Some((pw, pb))) => act.add(input.conv2d(pw, 1, 0)?.add_bias(pb)?)?,
                (Shortcut::Projection(_), None) => unreachable!("projection vars registered"),
            };
            let mut output = features;
            let mut mhex_out = None;
            if let Some((c1, c2)) = mhex_vars {
                let m = mhex_forward(c1, c2, features)?;
                if !opts.ablate_mhex_residual {
                    output = features.fold_add(m.attended)?;
                }
                mhex_out = Some(m);
            }
            outs[node.row][node.col] = Some(output);
            if node.col > 0 && node.row + node.col == d {
                stages.push(StageTrace {
                    stage: node.col,
                    row: node.row,
                    input,
                    z_a,
                    z_b,
                    features,
                    mhex: mhex_out,
                    mhex_conv1: mhex_vars.map(|v| v.0),
                    mhex_conv2: mhex_vars.map(|v| v.1),
                    output,
                });
            }
        }
        let (hw, hb) = conv_vars(&self.head, &mut leaf);
        let last = outs[0][d].expect("final decoder stage");
        let final_logits = last.conv2d(hw, 1, 0)?.add_bias(hb)?;
        stages.sort_by_key(|s| s.stage);
        let deep_preds = stages.iter().filter_map(|s| s.mhex.map(|m| m.deep_pred)).collect();
        Ok(ForwardTrace {
            final_logits,
            deep_preds,
            stages,
            params,
        })
    }

    /// Inference on `image: [N, Cin, H, W]`; one prediction per batch item.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<Prediction>> {
        let tape = Tape::new();
        let trace = self.forward(&tape, tape.constant(image.clone()), ForwardOptions::default())?;
        let logits = trace.final_logits.value();
        predict_from_logits(&logits)
    }

    /// Softmax probabilities `[N, K, H, W]` of the final head.
    pub fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let trace = self.forward(&tape, tape.constant(image.clone()), ForwardOptions::default())?;
        let logits = trace.final_logits.value();
        softmax_channels(&logits)
    }

    /// Replaces the parameters from `(name, tensor)` pairs; every parameter
    /// must be present with matching dims.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut err = None;
        let mut seen = 0;
        self.visit_params_mut(|name, t| match named.iter().find(|(n, _)| n == name) {
            Some((_, src)) if src.dims() == t.dims() => {
                *t = src.clone();
                seen += 1;
            }
            Some((_, src)) => {
                err.get_or_insert(format!("{name}: dims {:?} vs {:?}", src.dims(), t.dims()));
            }
            None => {
                err.get_or_insert(format!("missing tensor {name}"));
            }
        });
        if let Some(e) = err {
            return contract("load_params", e);
        }
        if seen != named.len() {
            return contract("load_params", "unexpected extra tensors");
        }
        Ok(())
    }
}

/// Softmax, max-class confidence and argmax mask (ties toward the lower id).
pub fn predict_from_logits(logits: &Tensor) -> Result<Vec<Prediction>> {
    let [n, k, h, w] = logits.dims4("predict")?;
    let probs = softmax_channels(logits)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut mask = Vec::with_capacity(plane);
        let mut conf = Vec::with_capacity(plane);
        for s in 0..plane {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..k {
                let v = logits.data()[(b * k + c) * plane + s];
                if v > best.1 {
                    best = (c, v);
                }
            }
            mask.push(best.0);
            conf.push(probs.data()[(b * k + best.0) * plane + s]);
        }
        let item = Tensor::new(vec![k, h, w], probs.data()[b * k * plane..(b + 1) * k * plane].to_vec())?;
        out.push(Prediction {
            height: h,
            width: w,
            mask,
            confidence: PixelMap::new(h, w, conf, MapKind::Confidence)?,
            probs: item,
        });
    }
    Ok(out)
}
