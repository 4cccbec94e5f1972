//! BNN blocks, a sequential executor and the model file.
//!
//! Two block flavours keep the inter-layer data at 8 bits:
//!
//! * [`VggBlock`]: binarize → XNOR/popcount saturated to 8 bits → threshold.
//!   Inner blocks emit packed bits, terminal blocks the 8-bit conv output.
//! * [`ResnetBlock`]: binarize → 8-bit conv → Q-format BN → saturating add
//!   with the block's 8-bit input (identity shortcut).
//!
//! A [`Model`] is an ordered list of layers; there are no branches other than
//! the implicit identity shortcut, so graphs cannot contain cycles.

mod format;
pub mod reference;

use log::warn;

use crate::binconv::{conv_fused, conv_i8, ConvSpec, TileHint};
use crate::bitcore::{pack_activations, BitPlaneTensor, PackedKernelSet};
use crate::bnquant::{
    apply_threshold, bn_q_forward, compute_threshold, quantize_bn, BnParams, QbnParams,
    ThresholdParams,
};
use crate::error::{BitflowError, Result};
use crate::tensor::{clamp_i8, I8FeatureMap, Tensor};

pub use format::{load_model, save_model, FORMAT_VERSION, MAGIC};

/// Data flowing between blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Activation {
    Bits(BitPlaneTensor),
    Int8(I8FeatureMap),
}

impl Activation {
    pub fn channels(&self) -> usize {
        match self {
            Activation::Bits(b) => b.dims().channels,
            Activation::Int8(x) => x.dims().channels,
        }
    }
}

/// What a VGG block does with its conv output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VggOutput {
    /// Binarize for the next block with BN folded into thresholds.
    Threshold(ThresholdParams),
    /// Emit the saturated conv output as 8-bit features.
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VggBlock {
    pub kernel: PackedKernelSet,
    pub spec: ConvSpec,
    pub output: VggOutput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResnetBlock {
    pub kernel: PackedKernelSet,
    pub spec: ConvSpec,
    pub qbn: QbnParams,
}

/// Conv followed by a float BN that still needs conversion for deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatBnBlock {
    pub kernel: PackedKernelSet,
    pub spec: ConvSpec,
    pub bn: BnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Vgg(VggBlock),
    Resnet(ResnetBlock),
    FloatBn(FloatBnBlock),
}

impl Layer {
    pub fn kernel(&self) -> &PackedKernelSet {
        match self {
            Layer::Vgg(b) => &b.kernel,
            Layer::Resnet(b) => &b.kernel,
            Layer::FloatBn(b) => &b.kernel,
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        match self {
            Layer::Vgg(b) => &b.spec,
            Layer::Resnet(b) => &b.spec,
            Layer::FloatBn(b) => &b.spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Model {
    pub layers: Vec<Layer>,
}

/// Loader/converter findings worth surfacing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    /// Threshold channels whose output ignores the input over `[-127, 127]`.
    ConstantChannels { layer: usize, channels: Vec<usize> },
    /// Float BN channels with `γ = 0`.
    ZeroGamma { layer: usize, channels: Vec<usize> },
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::ConstantChannels { layer, channels } => {
                write!(f, "layer {layer}: constant threshold channels {channels:?}")
            }
            Diagnostic::ZeroGamma { layer, channels } => {
                write!(f, "layer {layer}: gamma = 0 on channels {channels:?}")
            }
        }
    }
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Channels that warrant a warning, in layer order.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Vgg(VggBlock {
                    output: VggOutput::Threshold(t),
                    ..
                }) => {
                    let channels = t.constant_channels();
                    if !channels.is_empty() {
                        out.push(Diagnostic::ConstantChannels { layer: i, channels });
                    }
                }
                Layer::FloatBn(b) => {
                    let channels: Vec<usize> = (0..b.bn.channels())
                        .filter(|&c| b.bn.gamma[c] == 0.0)
                        .collect();
                    if !channels.is_empty() {
                        out.push(Diagnostic::ZeroGamma { layer: i, channels });
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Structural checks that do not depend on the input.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| BitflowError::MalformedGraph("model has no layers".into()))?;
        if matches!(first, Layer::Resnet(_)) {
            return Err(BitflowError::MalformedGraph(
                "first layer cannot be a residual block (no 8-bit shortcut input)".into(),
            ));
        }
        let mut bits = true;
        let mut channels: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let kd = l.kernel().dims();
            if let Some(c) = channels {
                if c != kd.in_channels {
                    return Err(BitflowError::MalformedGraph(format!(
                        "layer {i} expects {} channels, previous layer produces {c}",
                        kd.in_channels
                    )));
                }
            }
            l.spec().validate()?;
            match l {
                Layer::Vgg(b) => {
                    if let VggOutput::Threshold(t) = &b.output {
                        if t.channels() != kd.out_channels {
                            return Err(BitflowError::MalformedGraph(format!(
                                "layer {i}: threshold width"
                            )));
                        }
                    }
                    bits = matches!(b.output, VggOutput::Threshold(_));
                }
                Layer::Resnet(b) => {
                    if bits {
                        return Err(BitflowError::MalformedGraph(format!(
                            "layer {i}: residual block needs 8-bit input, got packed bits"
                        )));
                    }
                    if b.qbn.channels() != kd.out_channels || kd.out_channels != kd.in_channels {
                        return Err(BitflowError::MalformedGraph(format!(
                            "layer {i}: identity shortcut needs matching channel counts"
                        )));
                    }
                }
                Layer::FloatBn(_) => {
                    return Err(BitflowError::MalformedGraph(format!(
                        "layer {i} still has float BN; convert the model first"
                    )))
                }
            }
            channels = Some(kd.out_channels);
        }
        if bits {
            return Err(BitflowError::MalformedGraph(
                "last layer must emit 8-bit features (terminal or residual block)".into(),
            ));
        }
        Ok(())
    }
}

/// Run one VGG-style block.
pub fn run_vgg_block(x: &Activation, b: &VggBlock) -> Result<Activation> {
    let conv = match x {
        Activation::Bits(bits) => conv_i8(bits, &b.kernel, &b.spec)?,
        Activation::Int8(v) => conv_fused(v, None, &b.kernel, &b.spec, TileHint::Auto)?,
    };
    Ok(match &b.output {
        VggOutput::Threshold(t) => Activation::Bits(apply_threshold(&conv, t)?),
        VggOutput::Terminal => Activation::Int8(conv),
    })
}

/// Run one ResNet-style block with an identity shortcut.
pub fn run_resnet_block(x: &I8FeatureMap, b: &ResnetBlock) -> Result<I8FeatureMap> {
    let conv = conv_fused(x, None, &b.kernel, &b.spec, TileHint::Auto)?;
    if conv.dims() != x.dims() {
        return Err(BitflowError::ShapeMismatch(format!(
            "shortcut {:?} vs conv output {:?}",
            x.dims(),
            conv.dims()
        )));
    }
    let y = bn_q_forward(&conv, &b.qbn)?;
    let data = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &s)| saturating_add(a, s))
        .collect();
    Ok(I8FeatureMap::from_trusted(Tensor::from_vec(
        x.dims(),
        data,
    )?))
}

/// 8-bit addition saturating to `[-127, 127]`.
#[inline]
pub fn saturating_add(a: i8, b: i8) -> i8 {
    clamp_i8(a as i64 + b as i64)
}

/// Run a converted model on a real-valued NHWC input (packed by sign first).
pub fn run_model(m: &Model, input: &Tensor<f32>) -> Result<I8FeatureMap> {
    match run_model_trace(m, input)?.pop() {
        Some(Activation::Int8(x)) => Ok(x),
        _ => unreachable!("validated model ends in 8-bit features"),
    }
}

/// Like [`run_model`], keeping every block's output.
pub fn run_model_trace(m: &Model, input: &Tensor<f32>) -> Result<Vec<Activation>> {
    m.validate()?;
    let mut trace = Vec::with_capacity(m.layers.len());
    let mut act = Activation::Bits(pack_activations(input)?);
    for layer in &m.layers {
        act = match (layer, &act) {
            (Layer::Vgg(b), a) => run_vgg_block(a, b)?,
            (Layer::Resnet(b), Activation::Int8(x)) => Activation::Int8(run_resnet_block(x, b)?),
            _ => unreachable!("validated above"),
        };
        trace.push(act.clone());
    }
    Ok(trace)
}

/// How [`convert_model`] lowers float BN layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertMode {
    /// BN + sign becomes per-channel integer thresholds.
    VggThreshold,
    /// BN becomes 16-bit Q-format tables in a residual block.
    ResnetQbn,
}

impl std::str::FromStr for ConvertMode {
    type Err = BitflowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg-threshold" => Ok(Self::VggThreshold),
            "resnet-qbn" => Ok(Self::ResnetQbn),
            _ => Err(BitflowError::Config(format!(
                "unknown mode {s:?} (vgg-threshold | resnet-qbn)"
            ))),
        }
    }
}

/// Replace every float BN layer according to `mode`.
pub fn convert_model(m: &Model, mode: ConvertMode) -> Result<(Model, Vec<Diagnostic>)> {
    let mut diags = Vec::new();
    let mut layers = Vec::with_capacity(m.layers.len());
    for (i, l) in m.layers.iter().enumerate() {
        let Layer::FloatBn(b) = l else {
            layers.push(l.clone());
            continue;
        };
        if b.bn.channels() != b.kernel.dims().out_channels {
            return Err(BitflowError::MalformedGraph(format!("layer {i}: BN width")));
        }
        layers.push(match mode {
            ConvertMode::VggThreshold => {
                let r = compute_threshold(&b.bn)?;
                if !r.zero_gamma.is_empty() {
                    diags.push(Diagnostic::ZeroGamma {
                        layer: i,
                        channels: r.zero_gamma.clone(),
                    });
                }
                if !r.constant.is_empty() {
                    diags.push(Diagnostic::ConstantChannels {
                        layer: i,
                        channels: r.constant.clone(),
                    });
                }
                Layer::Vgg(VggBlock {
                    kernel: b.kernel.clone(),
                    spec: b.spec,
                    output: VggOutput::Threshold(r.params),
                })
            }
            ConvertMode::ResnetQbn => {
                let zero: Vec<usize> = (0..b.bn.channels())
                    .filter(|&c| b.bn.gamma[c] == 0.0)
                    .collect();
                if !zero.is_empty() {
                    diags.push(Diagnostic::ZeroGamma {
                        layer: i,
                        channels: zero,
                    });
                }
                Layer::Resnet(ResnetBlock {
                    kernel: b.kernel.clone(),
                    spec: b.spec,
                    qbn: quantize_bn(&b.bn)?.tables,
                })
            }
        });
    }
    for d in &diags {
        warn!("{d}");
    }
    Ok((Model::new(layers), diags))
}
