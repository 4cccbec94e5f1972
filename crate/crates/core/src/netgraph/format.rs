//! Binary model file.
//!
//! ```text
//! magic      "BDF1"
//! version    u16
//! layers     u16
//! per layer:
//!   tag      u8    1 = VGG threshold, 2 = VGG terminal, 3 = ResNet Q-BN, 4 = float BN
//!   kernel   4 x u32 (out, fh, fw, in)
//!   conv     4 x u32 (stride_h, stride_w, pad_h, pad_w)
//!   words    u64 x out*fh*fw*ceil(in/64)
//!   payload  tag 1: per channel i16 tau + u8 direction
//!            tag 3: Q-BN table (see QbnParams::to_bytes)
//!            tag 4: per channel f64 (gamma, beta, mu, sigma)
//! crc32      u32 over every preceding byte
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use log::warn;

use super::{FloatBnBlock, Layer, Model, ResnetBlock, VggBlock, VggOutput};
use crate::binconv::ConvSpec;
use crate::bitcore::PackedKernelSet;
use crate::bnquant::{BnParams, QbnParams, ThresholdParams};
use crate::error::{BitflowError, Result};
use crate::tensor::KernelDims;
use crate::wire::{Reader, Writer};

pub const MAGIC: [u8; 4] = *b"BDF1";
pub const FORMAT_VERSION: u16 = 1;

const TAG_VGG_THRESHOLD: u8 = 1;
const TAG_VGG_TERMINAL: u8 = 2;
const TAG_RESNET_QBN: u8 = 3;
const TAG_FLOAT_BN: u8 = 4;

fn dim32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| BitflowError::DimensionOverflow)
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u16::try_from(self.layers.len())
            .map_err(|_| BitflowError::MalformedGraph("more than 65535 layers".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.put_u16(FORMAT_VERSION);
        out.put_u16(count);
        for l in &self.layers {
            let tag = match l {
                Layer::Vgg(VggBlock {
                    output: VggOutput::Threshold(_),
                    ..
                }) => TAG_VGG_THRESHOLD,
                Layer::Vgg(_) => TAG_VGG_TERMINAL,
                Layer::Resnet(_) => TAG_RESNET_QBN,
                Layer::FloatBn(_) => TAG_FLOAT_BN,
            };
            out.put_u8(tag);
            let k = l.kernel();
            let d = k.dims();
            for v in [d.out_channels, d.filter_h, d.filter_w, d.in_channels] {
                out.put_u32(dim32(v)?);
            }
            let s = l.spec();
            for v in [s.stride.0, s.stride.1, s.pad.0, s.pad.1] {
                out.put_u32(dim32(v)?);
            }
            for &w in k.words() {
                out.put_u64(w);
            }
            match l {
                Layer::Vgg(VggBlock {
                    output: VggOutput::Threshold(t),
                    ..
                }) => t.write_to(&mut out),
                Layer::Vgg(_) => {}
                Layer::Resnet(b) => b.qbn.write_to(&mut out),
                Layer::FloatBn(b) => {
                    for c in 0..b.bn.channels() {
                        for v in [b.bn.gamma[c], b.bn.beta[c], b.bn.mu[c], b.bn.sigma[c]] {
                            out.put_f64(v);
                        }
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.put_u32(crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(BitflowError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(BitflowError::Corrupt(
                "file shorter than header and checksum".into(),
            ));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(BitflowError::BadChecksum { stored, computed });
        }
        let mut r = Reader::new(&body[4..]);
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(BitflowError::UnsupportedVersion(version));
        }
        let count = r.u16()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            layers.push(read_layer(&mut r)?);
        }
        if !r.is_empty() {
            return Err(BitflowError::Corrupt(
                "trailing bytes after last layer".into(),
            ));
        }
        Ok(Model::new(layers))
    }
}

fn read_layer(r: &mut Reader<'_>) -> Result<Layer> {
    let tag = r.u8()?;
    let kd = KernelDims::new(r.dim()?, r.dim()?, r.dim()?, r.dim()?);
    kd.validate()?;
    let spec = ConvSpec::new((r.dim()?, r.dim()?), (r.u32()? as usize, r.u32()? as usize));
    let n_words = kd
        .out_channels
        .checked_mul(kd.sites())
        .and_then(|v| v.checked_mul(crate::bitcore::words_for(kd.in_channels)))
        .ok_or(BitflowError::DimensionOverflow)?;
    // Bound the allocation by what is actually left in the buffer.
    let raw = r.take(
        n_words
            .checked_mul(8)
            .ok_or(BitflowError::DimensionOverflow)?,
    )?;
    let words = raw
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let kernel = PackedKernelSet::from_words(kd, words)?;
    let oc = kd.out_channels;
    Ok(match tag {
        TAG_VGG_THRESHOLD => Layer::Vgg(VggBlock {
            kernel,
            spec,
            output: VggOutput::Threshold(ThresholdParams::read_from(r, oc)?),
        }),
        TAG_VGG_TERMINAL => Layer::Vgg(VggBlock {
            kernel,
            spec,
            output: VggOutput::Terminal,
        }),
        TAG_RESNET_QBN => Layer::Resnet(ResnetBlock {
            kernel,
            spec,
            qbn: QbnParams::read_from(r, oc)?,
        }),
        TAG_FLOAT_BN => {
            let mut cols: [Vec<f64>; 4] = Default::default();
            for _ in 0..oc {
                for col in cols.iter_mut() {
                    col.push(r.f64()?);
                }
            }
            let [gamma, beta, mu, sigma] = cols;
            Layer::FloatBn(FloatBnBlock {
                kernel,
                spec,
                bn: BnParams::new(gamma, beta, mu, sigma)?,
            })
        }
        t => return Err(BitflowError::Corrupt(format!("unknown layer tag {t}"))),
    })
}

pub fn save_model(path: impl AsRef<Path>, m: &Model) -> Result<()> {
    std::fs::write(path, m.to_bytes()?)?;
    Ok(())
}

/// Read a model, logging a warning for every [`super::Diagnostic`].
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let m = Model::from_bytes(&std::fs::read(path)?)?;
    for d in m.diagnostics() {
        warn!("{d}");
    }
    Ok(m)
}
