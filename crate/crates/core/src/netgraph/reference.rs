//! Float reference pipeline for the blocks, built on the dense convolution
//! oracle and the real-valued BN. Shares no code with the packed paths
//! except the model containers it can export to.

use rand::Rng;

use super::{FloatBnBlock, Layer, Model, VggBlock, VggOutput};
use crate::binconv::{conv_float_oracle, ConvSpec};
use crate::bitcore::{pack_weights, sign_bit, PackedKernelSet};
use crate::bnquant::{bn_float, BnParams};
use crate::error::Result;
use crate::tensor::{I8FeatureMap, KernelDims, Tensor};

/// Dense `±1` convolution weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RefConv {
    pub weights: Vec<i32>,
    pub dims: KernelDims,
    pub spec: ConvSpec,
}

impl RefConv {
    pub fn random(rng: &mut impl Rng, dims: KernelDims, spec: ConvSpec) -> Self {
        let weights = (0..dims.element_count().expect("valid dims"))
            .map(|_| if rng.gen() { 1 } else { -1 })
            .collect();
        Self {
            weights,
            dims,
            spec,
        }
    }

    pub fn packed(&self) -> Result<PackedKernelSet> {
        let w: Vec<f32> = self.weights.iter().map(|&v| v as f32).collect();
        pack_weights(&w, self.dims)
    }

    /// Dense conv followed by the 8-bit clip.
    pub fn apply_clipped(&self, a: &Tensor<i32>) -> Result<Tensor<i32>> {
        Ok(
            conv_float_oracle(a, &self.weights, self.dims, &self.spec)?
                .map(|&v| v.clamp(-127, 127)),
        )
    }
}

/// A VGG-style reference layer.
#[derive(Debug, Clone, PartialEq)]
pub enum RefVggLayer {
    /// conv → clip → BN → sign
    Bn(RefConv, BnParams),
    /// conv → clip
    Terminal(RefConv),
}

fn sign_of(x: &Tensor<f32>) -> Tensor<i32> {
    x.map(|&v| if sign_bit(v) { 1 } else { -1 })
}

/// Per-layer outputs: `±1` signs for BN layers, clipped sums for terminal ones.
pub fn vgg_trace(layers: &[RefVggLayer], input: &Tensor<f32>) -> Result<Vec<Tensor<i32>>> {
    let mut a = sign_of(input);
    let mut trace = Vec::with_capacity(layers.len());
    for l in layers {
        let out = match l {
            RefVggLayer::Bn(conv, bn) => {
                let z = conv.apply_clipped(&a)?;
                let c = z.dims().channels;
                let data = z
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if bn_float(v as f64, bn, i % c) >= 0.0 {
                            1
                        } else {
                            -1
                        }
                    })
                    .collect();
                Tensor::from_vec(z.dims(), data)?
            }
            RefVggLayer::Terminal(conv) => conv.apply_clipped(&a)?,
        };
        a = out.clone();
        trace.push(out);
    }
    Ok(trace)
}

/// The same network as an unconverted model (float BN layers).
pub fn vgg_model(layers: &[RefVggLayer]) -> Result<Model> {
    layers
        .iter()
        .map(|l| {
            Ok(match l {
                RefVggLayer::Bn(c, bn) => Layer::FloatBn(FloatBnBlock {
                    kernel: c.packed()?,
                    spec: c.spec,
                    bn: bn.clone(),
                }),
                RefVggLayer::Terminal(c) => Layer::Vgg(VggBlock {
                    kernel: c.packed()?,
                    spec: c.spec,
                    output: VggOutput::Terminal,
                }),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Model::new)
}

/// Float evaluation of one residual block on an 8-bit input.
#[derive(Debug, Clone)]
pub struct ResnetReference {
    /// Clipped conv output.
    pub conv: Tensor<i32>,
    /// `bn_float` of the clipped conv output.
    pub bn: Tensor<f64>,
    /// `bn + shortcut`, before any saturation.
    pub sum: Tensor<f64>,
}

pub fn resnet_block_reference(
    x: &I8FeatureMap,
    conv: &RefConv,
    bn: &BnParams,
) -> Result<ResnetReference> {
    let a = x.tensor().map(|&v| if v >= 0 { 1 } else { -1 });
    let z = conv.apply_clipped(&a)?;
    let c = z.dims().channels;
    let b: Vec<f64> = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| bn_float(v as f64, bn, i % c))
        .collect();
    let sum = b
        .iter()
        .zip(x.data())
        .map(|(&v, &s)| v + s as f64)
        .collect();
    Ok(ResnetReference {
        bn: Tensor::from_vec(z.dims(), b)?,
        sum: Tensor::from_vec(z.dims(), sum)?,
        conv: z,
    })
}
