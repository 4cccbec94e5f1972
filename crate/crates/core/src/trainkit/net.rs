//! Network parameters, the training forward/backward pass and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::task::{Dataset, CLASSES, IMAGE_CHANNELS};
use super::train::EpochRecord;
use super::{clip_i8_surrogate, ste_sign};
use crate::binconv::{conv_i32, ConvSpec};
use crate::bitcore::{pack_activations, pack_weights};
use crate::bnquant::{bn_float, BnParams, QbnParams};
use crate::error::{BitflowError, Result};
use crate::tensor::{clamp_i8, I8FeatureMap, KernelDims, Nhwc, Tensor};

/// STE window half-width for 8-bit features: `[-FEATURE_SCALE, FEATURE_SCALE]`
/// plays the role of `[-1, 1]`.
pub const FEATURE_SCALE: f32 = 32.0;

/// Added to the running variance; a power of two so exact `σ` values survive.
pub(crate) const BN_EPS: f64 = 1.0 / 1024.0;

const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// conv → clip → BN → sign; exported as thresholds.
    Vgg,
    /// conv → clip; emits 8-bit features.
    Terminal,
    /// conv → clip → BN → add shortcut → clip; exported with Q-format BN.
    Resnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub out_channels: usize,
    /// Square filter size; padding keeps "same" geometry.
    pub filter: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub const fn new(kind: BlockKind, out_channels: usize, filter: usize, stride: usize) -> Self {
        Self {
            kind,
            out_channels,
            filter,
            stride,
        }
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec::new(
            (self.stride, self.stride),
            (self.filter / 2, self.filter / 2),
        )
    }

    fn has_bn(&self) -> bool {
        self.kind != BlockKind::Terminal
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

impl Architecture {
    /// Two thresholded blocks and a terminal block, all `width` channels wide.
    pub fn vgg_toy(width: usize) -> Self {
        Self {
            in_channels: IMAGE_CHANNELS,
            blocks: vec![
                BlockSpec::new(BlockKind::Vgg, width, 3, 1),
                BlockSpec::new(BlockKind::Vgg, width, 3, 2),
                BlockSpec::new(BlockKind::Terminal, width, 3, 1),
            ],
        }
    }

    /// [`Architecture::vgg_toy`] followed by `residual` residual blocks.
    pub fn residual_toy(width: usize, residual: usize) -> Self {
        let mut a = Self::vgg_toy(width);
        a.blocks
            .extend((0..residual).map(|_| BlockSpec::new(BlockKind::Resnet, width, 3, 1)));
        a
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |i: usize, why: &str| Err(BitflowError::MalformedGraph(format!("block {i}: {why}")));
        if self.blocks.is_empty() {
            return Err(BitflowError::MalformedGraph("no blocks".into()));
        }
        if self.in_channels == 0 {
            return Err(BitflowError::DimensionOverflow);
        }
        let mut c = self.in_channels;
        let mut bits = true;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.filter == 0 || b.stride == 0 {
                return Err(BitflowError::DimensionOverflow);
            }
            if b.filter % 2 == 0 {
                return bad(i, "filter size must be odd");
            }
            if b.kind == BlockKind::Resnet && (bits || b.stride != 1 || b.out_channels != c) {
                return bad(i, "residual block needs a same-shape 8-bit input");
            }
            bits = b.kind == BlockKind::Vgg;
            c = b.out_channels;
        }
        if bits {
            return bad(self.blocks.len() - 1, "last block must emit 8-bit features");
        }
        Ok(())
    }

    /// Indices of blocks with BN, in order.
    pub fn bn_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&i| self.blocks[i].has_bn())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Seeds initialization and shuffling.
    pub seed: u64,
    pub batch_size: usize,
    /// Peak learning rate for BN and readout parameters.
    pub lr: f32,
    /// Peak learning rate for latent binary weights.
    pub weight_lr: f32,
    pub momentum: f32,
    /// Weight of the newest batch in the running BN statistics.
    pub bn_momentum: f64,
    /// Initial `γ` of residual BN layers, on the 8-bit feature scale.
    pub residual_gamma: f32,
    /// Pooled features are divided by this before the dense readout.
    pub readout_scale: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0xB17F10,
            batch_size: 50,
            lr: 0.03,
            weight_lr: 5.0,
            momentum: 0.9,
            bn_momentum: 0.1,
            residual_gamma: 32.0,
            readout_scale: FEATURE_SCALE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Clipped,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Frozen {
    pub tables: QbnParams,
    pub noisy: BnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BnState {
    /// Output unit: `γ` and `β` are stored divided by it.
    scale: f32,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    vg: Vec<f32>,
    vb: Vec<f32>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub frozen: Option<Frozen>,
}

impl BnState {
    fn new(channels: usize, gamma: f32, scale: f32) -> Self {
        Self {
            scale,
            gamma: vec![gamma / scale; channels],
            beta: vec![0.0; channels],
            vg: vec![0.0; channels],
            vb: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            frozen: None,
        }
    }

    /// Inference parameters: running statistics, or the noisy copy once frozen.
    pub fn params(&self) -> BnParams {
        if let Some(f) = &self.frozen {
            return f.noisy.clone();
        }
        BnParams {
            gamma: self
                .gamma
                .iter()
                .map(|&v| (v * self.scale) as f64)
                .collect(),
            beta: self.beta.iter().map(|&v| (v * self.scale) as f64).collect(),
            mu: self.mean.clone(),
            sigma: self.var.iter().map(|&v| (v + BN_EPS).sqrt()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvLayer {
    pub block: BlockSpec,
    pub dims: KernelDims,
    pub w: Vec<f32>,
    vw: Vec<f32>,
    pub bn: Option<BnState>,
}

impl ConvLayer {
    fn frozen(&self) -> bool {
        self.bn.as_ref().is_some_and(|b| b.frozen.is_some())
    }
}

/// Global average pool followed by a dense layer. Only used by the toy models.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    channels: usize,
    scale: f32,
    w: Vec<f32>,
    b: Vec<f32>,
    vw: Vec<f32>,
    vb: Vec<f32>,
}

impl Readout {
    fn new(rng: &mut impl Rng, channels: usize, scale: f32) -> Self {
        let bound = 1.0 / (channels as f32).sqrt();
        Self {
            channels,
            scale,
            w: (0..CLASSES * channels)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            b: vec![0.0; CLASSES],
            vw: vec![0.0; CLASSES * channels],
            vb: vec![0.0; CLASSES],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Logits for every sample of an NHWC feature buffer.
    pub fn logits(&self, features: &[f64], dims: Nhwc) -> Vec<[f64; CLASSES]> {
        let hw = dims.height * dims.width;
        let scale = 1.0 / (hw as f64 * self.scale as f64);
        features
            .chunks_exact(hw * dims.channels)
            .map(|img| {
                let mut pooled = vec![0.0f64; dims.channels];
                for px in img.chunks_exact(dims.channels) {
                    for (p, &v) in pooled.iter_mut().zip(px) {
                        *p += v;
                    }
                }
                let mut out = [0.0f64; CLASSES];
                for (k, o) in out.iter_mut().enumerate() {
                    let row = &self.w[k * self.channels..(k + 1) * self.channels];
                    *o = self.b[k] as f64
                        + row
                            .iter()
                            .zip(&pooled)
                            .map(|(&w, &p)| w as f64 * p * scale)
                            .sum::<f64>();
                }
                out
            })
            .collect()
    }

    /// Class predictions for deployed 8-bit features.
    pub fn predict_i8(&self, x: &I8FeatureMap) -> Result<Vec<u8>> {
        if x.dims().channels != self.channels {
            return Err(BitflowError::ChannelMismatch {
                input: x.dims().channels,
                kernel: self.channels,
            });
        }
        let f: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        Ok(self.logits(&f, x.dims()).iter().map(argmax).collect())
    }
}

pub(crate) fn argmax(l: &[f64; CLASSES]) -> u8 {
    let mut best = 0;
    for k in 1..CLASSES {
        if l[k] > l[best] {
            best = k;
        }
    }
    best as u8
}

/// Cross-entropy of one logit row.
pub(crate) fn cross_entropy(l: &[f64; CLASSES], label: u8) -> f64 {
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = l.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - l[label as usize]
}

/// Evaluation semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EvalMode {
    /// No range limits, real-valued BN; what the warmup stage optimizes.
    Float,
    /// Bit-exact deployed 8-bit behaviour.
    Deploy,
}

/// Full-precision master weights, BN state and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub(crate) arch: Architecture,
    pub(crate) config: TrainConfig,
    pub(crate) layers: Vec<ConvLayer>,
    pub(crate) readout: Readout,
    pub(crate) stage: Stage,
    pub(crate) epoch: usize,
    pub(crate) history: Vec<EpochRecord>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) freeze_order: Vec<usize>,
}

struct LayerCache {
    input: Vec<f32>,
    in_dims: Nhwc,
    out_dims: Nhwc,
    z: Vec<f32>,
    bn: Option<BnCache>,
    sum_mask: Vec<bool>,
}

enum BnCache {
    Batch { xhat: Vec<f32>, inv_std: Vec<f32> },
    Frozen { m: Vec<f32> },
}

struct Grads {
    w: Vec<Vec<f32>>,
    gamma: Vec<Vec<f32>>,
    beta: Vec<Vec<f32>>,
    rw: Vec<f32>,
    rb: Vec<f32>,
}

/// One step of momentum SGD.
fn sgd(p: &mut [f32], v: &mut [f32], g: &[f32], lr: f32, momentum: f32) {
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

fn sign_f32(v: f32) -> f32 {
    ste_sign(v as f64).0 as f32
}

impl TrainState {
    pub fn new(arch: Architecture, config: TrainConfig) -> Result<Self> {
        arch.validate()?;
        if config.batch_size == 0 {
            return Err(BitflowError::InvalidParameter("batch size 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut c = arch.in_channels;
        let mut layers = Vec::with_capacity(arch.blocks.len());
        for b in &arch.blocks {
            let dims = KernelDims::new(b.out_channels, b.filter, b.filter, c);
            let n = dims.element_count()?;
            let (gamma, scale) = if b.kind == BlockKind::Resnet {
                (config.residual_gamma, FEATURE_SCALE)
            } else {
                (1.0, 1.0)
            };
            layers.push(ConvLayer {
                block: *b,
                dims,
                w: (0..n).map(|_| rng.gen_range(-0.1f32..0.1)).collect(),
                vw: vec![0.0; n],
                bn: b
                    .has_bn()
                    .then(|| BnState::new(b.out_channels, gamma, scale)),
            });
            c = b.out_channels;
        }
        if !(config.readout_scale.is_finite() && config.readout_scale > 0.0) {
            return Err(BitflowError::InvalidParameter(format!(
                "readout scale {}",
                config.readout_scale
            )));
        }
        let readout = Readout::new(&mut rng, c, config.readout_scale);
        Ok(Self {
            arch,
            config,
            layers,
            readout,
            stage: Stage::Warmup,
            epoch: 0,
            history: Vec::new(),
            rng,
            freeze_order: Vec::new(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Epochs trained so far across all stages.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn readout(&self) -> &Readout {
        &self.readout
    }

    /// BN blocks in the order they were frozen.
    pub fn freeze_order(&self) -> &[usize] {
        &self.freeze_order
    }

    /// Latent weights of block `i`.
    pub fn weights(&self, i: usize) -> &[f32] {
        &self.layers[i].w
    }

    /// Inference BN parameters of block `i`, if it has BN.
    pub fn bn_params(&self, i: usize) -> Option<BnParams> {
        self.layers[i].bn.as_ref().map(BnState::params)
    }

    /// Overwrite the inference statistics and affine parameters of block `i`.
    pub fn set_bn_params(&mut self, i: usize, p: &BnParams) -> Result<()> {
        p.validate()?;
        let bn = self.layers[i]
            .bn
            .as_mut()
            .ok_or_else(|| BitflowError::InvalidParameter(format!("block {i} has no BN")))?;
        if p.channels() != bn.gamma.len() {
            return Err(BitflowError::ChannelMismatch {
                input: p.channels(),
                kernel: bn.gamma.len(),
            });
        }
        if bn.frozen.is_some() {
            return Err(BitflowError::StageViolation(format!("block {i} is frozen")));
        }
        bn.gamma = p
            .gamma
            .iter()
            .map(|&v| (v / bn.scale as f64) as f32)
            .collect();
        bn.beta = p
            .beta
            .iter()
            .map(|&v| (v / bn.scale as f64) as f32)
            .collect();
        bn.mean = p.mu.clone();
        bn.var = p.sigma.iter().map(|&s| s * s - BN_EPS).collect();
        Ok(())
    }

    /// Frozen Q-format tables of block `i`.
    pub fn qbn_tables(&self, i: usize) -> Option<&QbnParams> {
        self.layers[i]
            .bn
            .as_ref()?
            .frozen
            .as_ref()
            .map(|f| &f.tables)
    }

    fn clip(&self) -> bool {
        self.stage == Stage::Clipped
    }

    /// STE window of block `i`'s input.
    fn input_scale(&self, i: usize) -> f32 {
        match i.checked_sub(1).map(|p| self.layers[p].block.kind) {
            None | Some(BlockKind::Vgg) => 1.0,
            Some(_) => FEATURE_SCALE,
        }
    }

    /// Exact ±1 conv sums of `sign(a)` with `sign(W)`.
    fn conv_sums(layer: &ConvLayer, a: Vec<f32>, dims: Nhwc) -> Result<(Vec<i32>, Nhwc, Vec<f32>)> {
        let t = Tensor::from_vec(dims, a)?;
        let packed = pack_activations(&t)?;
        let k = pack_weights(&layer.w, layer.dims)?;
        let z = conv_i32(&packed, &k, &layer.block.conv_spec())?;
        let od = z.dims();
        Ok((z.into_vec(), od, t.into_vec()))
    }

    /// Training forward pass. Returns per-layer caches and the final features.
    fn forward_train(
        &mut self,
        x: &Tensor<f32>,
        update_stats: bool,
    ) -> Result<(Vec<LayerCache>, Vec<f32>, Nhwc)> {
        let clip = self.clip();
        let momentum = self.config.bn_momentum;
        let mut a = x.data().to_vec();
        let mut dims = x.dims();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter_mut() {
            let (zi, od, input) = Self::conv_sums(layer, a, dims)?;
            let c = od.channels;
            let z: Vec<f32> = zi.iter().map(|&v| v as f32).collect();
            let zc: Vec<f32> = if clip {
                z.iter()
                    .map(|&v| clip_i8_surrogate(v as f64).0 as f32)
                    .collect()
            } else {
                z.clone()
            };
            let (y, bn_cache) = match layer.bn.as_mut() {
                None => (zc, None),
                Some(bn) => match &bn.frozen {
                    // Residual blocks run the integer tables; thresholded blocks
                    // only need the sign, which the noisy float BN decides exactly.
                    Some(f) if layer.block.kind == BlockKind::Resnet => {
                        let y = zc
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| f.tables.apply(i % c, v as i8) as f32)
                            .collect();
                        let m = (0..c).map(|ch| f.tables.folded(ch).0 as f32).collect();
                        (y, Some(BnCache::Frozen { m }))
                    }
                    Some(f) => {
                        let y = zc
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| bn_float(v as f64, &f.noisy, i % c) as f32)
                            .collect();
                        let m = (0..c)
                            .map(|ch| (f.noisy.gamma[ch] / f.noisy.sigma[ch]) as f32)
                            .collect();
                        (y, Some(BnCache::Frozen { m }))
                    }
                    None => {
                        let (y, xhat, inv_std, mean, var) =
                            bn_batch(&zc, c, &bn.gamma, &bn.beta, bn.scale);
                        if update_stats {
                            let n = (zc.len() / c) as f64;
                            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                            for ch in 0..c {
                                bn.mean[ch] = (1.0 - momentum) * bn.mean[ch] + momentum * mean[ch];
                                bn.var[ch] =
                                    (1.0 - momentum) * bn.var[ch] + momentum * var[ch] * unbias;
                            }
                        }
                        (y, Some(BnCache::Batch { xhat, inv_std }))
                    }
                },
            };
            let mut sum_mask = Vec::new();
            let out = if layer.block.kind == BlockKind::Resnet {
                let mut s: Vec<f32> = y.iter().zip(&input).map(|(&y, &a)| y + a).collect();
                if clip {
                    sum_mask = s.iter().map(|&v| clip_i8_surrogate(v as f64).1).collect();
                    for v in s.iter_mut() {
                        *v = clip_i8_surrogate(*v as f64).0 as f32;
                    }
                }
                s
            } else {
                y
            };
            caches.push(LayerCache {
                input,
                in_dims: dims,
                out_dims: od,
                z,
                bn: bn_cache,
                sum_mask,
            });
            a = out;
            dims = od;
        }
        Ok((caches, a, dims))
    }

    /// One optimizer step on a batch. Returns summed loss and correct count.
    pub(crate) fn train_step(
        &mut self,
        x: &Tensor<f32>,
        labels: &[u8],
        lr_scale: f32,
    ) -> Result<(f64, usize)> {
        let (caches, f, fd) = self.forward_train(x, true)?;
        let b = labels.len();
        let hw = fd.height * fd.width;
        let c = fd.channels;
        let pool_scale = 1.0 / (hw as f32 * self.readout.scale);

        // readout
        let mut pooled = vec![0.0f32; b * c];
        for (n, img) in f.chunks_exact(hw * c).enumerate() {
            for px in img.chunks_exact(c) {
                for (p, &v) in pooled[n * c..(n + 1) * c].iter_mut().zip(px) {
                    *p += v * pool_scale;
                }
            }
        }
        let mut loss = 0.0f64;
        let mut correct = 0;
        let mut dl = vec![0.0f32; b * CLASSES];
        for n in 0..b {
            let p = &pooled[n * c..(n + 1) * c];
            let mut l = [0.0f64; CLASSES];
            for (k, lk) in l.iter_mut().enumerate() {
                let row = &self.readout.w[k * c..(k + 1) * c];
                *lk =
                    (self.readout.b[k] + row.iter().zip(p).map(|(w, x)| w * x).sum::<f32>()) as f64;
            }
            loss += cross_entropy(&l, labels[n]);
            correct += (argmax(&l) == labels[n]) as usize;
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - max).exp()).sum();
            for k in 0..CLASSES {
                let sm = (l[k] - max).exp() / z;
                let t = if k == labels[n] as usize { 1.0 } else { 0.0 };
                dl[n * CLASSES + k] = ((sm - t) / b as f64) as f32;
            }
        }
        if !loss.is_finite() {
            return Err(BitflowError::Diverged(self.epoch));
        }
        let mut g = Grads {
            w: Vec::new(),
            gamma: Vec::new(),
            beta: Vec::new(),
            rw: vec![0.0; CLASSES * c],
            rb: vec![0.0; CLASSES],
        };
        let mut dpooled = vec![0.0f32; b * c];
        for n in 0..b {
            for k in 0..CLASSES {
                let d = dl[n * CLASSES + k];
                g.rb[k] += d;
                for ch in 0..c {
                    g.rw[k * c + ch] += d * pooled[n * c + ch];
                    dpooled[n * c + ch] += d * self.readout.w[k * c + ch];
                }
            }
        }
        let mut d: Vec<f32> = Vec::with_capacity(f.len());
        for n in 0..b {
            for _ in 0..hw {
                d.extend(dpooled[n * c..(n + 1) * c].iter().map(|&v| v * pool_scale));
            }
        }

        self.backward(&caches, d, &mut g)?;
        self.apply(&g, lr_scale);
        Ok((loss, correct))
    }

    fn backward(&self, caches: &[LayerCache], mut d: Vec<f32>, g: &mut Grads) -> Result<()> {
        let clip = self.clip();
        let n_layers = self.layers.len();
        g.w = vec![Vec::new(); n_layers];
        g.gamma = vec![Vec::new(); n_layers];
        g.beta = vec![Vec::new(); n_layers];
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let cache = &caches[i];
            let c = cache.out_dims.channels;
            let mut shortcut = None;
            if layer.block.kind == BlockKind::Resnet {
                if clip {
                    for (v, &m) in d.iter_mut().zip(&cache.sum_mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                }
                shortcut = Some(d.clone());
            }
            let mut dz = match (&cache.bn, &layer.bn) {
                (None, _) => d,
                (Some(BnCache::Frozen { m }), _) => {
                    d.iter().enumerate().map(|(j, &v)| v * m[j % c]).collect()
                }
                (Some(BnCache::Batch { xhat, inv_std }), Some(bn)) => {
                    let dy: Vec<f32> = d.iter().map(|&v| v * bn.scale).collect();
                    let (dz, dg, db) = bn_backward(&dy, xhat, inv_std, &bn.gamma, c);
                    g.gamma[i] = dg;
                    g.beta[i] = db;
                    dz
                }
                (Some(_), None) => unreachable!("BN cache without BN state"),
            };
            if clip {
                for (v, &z) in dz.iter_mut().zip(&cache.z) {
                    if !clip_i8_surrogate(z as f64).1 {
                        *v = 0.0;
                    }
                }
            }
            let need_input = i > 0;
            let (dw, da) = conv_backward(
                cache.in_dims,
                cache.out_dims,
                layer.dims,
                &layer.block.conv_spec(),
                &cache.input,
                &layer.w,
                &dz,
                !layer.frozen(),
                need_input,
            );
            g.w[i] = dw;
            if !need_input {
                break;
            }
            let scale = self.input_scale(i);
            let mut da = da;
            for (v, &a) in da.iter_mut().zip(&cache.input) {
                if !ste_sign((a / scale) as f64).1 {
                    *v = 0.0;
                }
            }
            if let Some(s) = shortcut {
                for (v, s) in da.iter_mut().zip(s) {
                    *v += s;
                }
            }
            d = da;
        }
        Ok(())
    }

    fn apply(&mut self, g: &Grads, lr_scale: f32) {
        let lr = self.config.lr * lr_scale;
        let wlr = self.config.weight_lr * lr_scale;
        let mom = self.config.momentum;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if layer.frozen() {
                continue;
            }
            // Latent weights: the STE passes gradients only where |W| <= 1,
            // and the clip below keeps every weight there.
            sgd(&mut layer.w, &mut layer.vw, &g.w[i], wlr, mom);
            for w in layer.w.iter_mut() {
                *w = w.clamp(-1.0, 1.0);
            }
            if let Some(bn) = layer.bn.as_mut() {
                if !g.gamma[i].is_empty() {
                    sgd(&mut bn.gamma, &mut bn.vg, &g.gamma[i], lr, mom);
                    sgd(&mut bn.beta, &mut bn.vb, &g.beta[i], lr, mom);
                }
            }
        }
        let r = &mut self.readout;
        sgd(&mut r.w, &mut r.vw, &g.rw, lr, mom);
        sgd(&mut r.b, &mut r.vb, &g.rb, lr, mom);
    }

    /// Final features under `mode`, values exactly representable in `f64`.
    pub(crate) fn eval_features(
        &self,
        x: &Tensor<f32>,
        mode: EvalMode,
    ) -> Result<(Vec<f64>, Nhwc)> {
        let deploy = mode == EvalMode::Deploy;
        let mut a: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let mut dims = x.dims();
        for layer in &self.layers {
            let signs: Vec<f32> = a.iter().map(|&v| ste_sign(v).0 as f32).collect();
            let (z, od, _) = Self::conv_sums(layer, signs, dims)?;
            let c = od.channels;
            let zc: Vec<i32> = if deploy {
                z.iter().map(|&v| v.clamp(-127, 127)).collect()
            } else {
                z
            };
            let params = layer.bn.as_ref().map(BnState::params);
            let out: Vec<f64> = match layer.block.kind {
                BlockKind::Terminal => zc.iter().map(|&v| v as f64).collect(),
                BlockKind::Vgg => {
                    let p = params.as_ref().expect("VGG block has BN");
                    zc.iter()
                        .enumerate()
                        .map(|(j, &v)| ste_sign(bn_float(v as f64, p, j % c)).0)
                        .collect()
                }
                BlockKind::Resnet => {
                    let p = params.as_ref().expect("residual block has BN");
                    let frozen = layer.bn.as_ref().and_then(|b| b.frozen.as_ref());
                    zc.iter()
                        .zip(&a)
                        .enumerate()
                        .map(|(j, (&v, &s))| {
                            let ch = j % c;
                            if !deploy {
                                return bn_float(v as f64, p, ch) + s;
                            }
                            let y = match frozen {
                                Some(f) => f.tables.apply(ch, v as i8),
                                None => clamp_i8(bn_float(v as f64, p, ch).round() as i64),
                            };
                            clamp_i8(y as i64 + s as i64) as f64
                        })
                        .collect()
                }
            };
            a = out;
            dims = od;
        }
        Ok((a, dims))
    }

    /// Mean loss and accuracy (percent) on a dataset.
    pub(crate) fn evaluate(&self, data: &Dataset, mode: EvalMode) -> Result<(f64, f64)> {
        let (mut loss, mut correct) = (0.0, 0usize);
        for (l, label) in self.logits(data, mode)?.iter().zip(data.labels()) {
            loss += cross_entropy(l, *label);
            correct += (argmax(l) == *label) as usize;
        }
        let n = data.len() as f64;
        Ok((loss / n, 100.0 * correct as f64 / n))
    }

    fn logits(&self, data: &Dataset, mode: EvalMode) -> Result<Vec<[f64; CLASSES]>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len());
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (x, _) = data.batch(chunk)?;
            let (f, fd) = self.eval_features(&x, mode)?;
            out.extend(self.readout.logits(&f, fd));
        }
        Ok(out)
    }

    /// Class predictions with the deployed 8-bit semantics.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<u8>> {
        Ok(self
            .logits(data, EvalMode::Deploy)?
            .iter()
            .map(argmax)
            .collect())
    }

    /// Accuracy (percent) with the deployed 8-bit semantics.
    pub fn deploy_accuracy(&self, data: &Dataset) -> Result<f64> {
        Ok(self.evaluate(data, EvalMode::Deploy)?.1)
    }

    /// Accuracy (percent) without range limits.
    pub fn float_accuracy(&self, data: &Dataset) -> Result<f64> {
        Ok(self.evaluate(data, EvalMode::Float)?.1)
    }

    /// Fraction of conv outputs on `data` whose magnitude exceeds 127.
    pub fn saturation_rate(&self, data: &Dataset) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let (mut over, mut total) = (0usize, 0usize);
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (x, _) = data.batch(chunk)?;
            let mut a: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
            let mut dims = x.dims();
            for layer in &self.layers {
                let signs: Vec<f32> = a.iter().map(|&v| ste_sign(v).0 as f32).collect();
                let (z, od, _) = Self::conv_sums(layer, signs, dims)?;
                over += z.iter().filter(|v| v.abs() > 127).count();
                total += z.len();
                // Follow the float path for the next layer's input.
                a = self.layer_float_out(layer, &z, &a, od);
                dims = od;
            }
        }
        Ok(over as f64 / total as f64)
    }

    fn layer_float_out(&self, layer: &ConvLayer, z: &[i32], a: &[f64], od: Nhwc) -> Vec<f64> {
        let c = od.channels;
        let p = layer.bn.as_ref().map(BnState::params);
        match layer.block.kind {
            BlockKind::Terminal => z.iter().map(|&v| v as f64).collect(),
            BlockKind::Vgg => {
                let p = p.expect("VGG block has BN");
                z.iter()
                    .enumerate()
                    .map(|(j, &v)| bn_float(v as f64, &p, j % c))
                    .collect()
            }
            BlockKind::Resnet => {
                let p = p.expect("residual block has BN");
                z.iter()
                    .zip(a)
                    .enumerate()
                    .map(|(j, (&v, &s))| bn_float(v as f64, &p, j % c) + s)
                    .collect()
            }
        }
    }

    /// Freeze block `i` to quantized BN.
    pub(crate) fn freeze(&mut self, i: usize, tables: QbnParams, noisy: BnParams) {
        let bn = self.layers[i].bn.as_mut().expect("frozen block has BN");
        bn.frozen = Some(Frozen { tables, noisy });
        self.freeze_order.push(i);
    }
}

/// Batch-statistics BN with output `scale·(γ x̂ + β)`: returns `(y, x̂, 1/std, mean, var)`.
#[allow(clippy::type_complexity)]
fn bn_batch(
    z: &[f32],
    c: usize,
    gamma: &[f32],
    beta: &[f32],
    scale: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f64>, Vec<f64>) {
    let n = (z.len() / c) as f64;
    let mut mean = vec![0.0f64; c];
    for px in z.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for px in z.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    let inv_std: Vec<f32> = var
        .iter()
        .map(|&v| (1.0 / (v + BN_EPS).sqrt()) as f32)
        .collect();
    let mut xhat = Vec::with_capacity(z.len());
    let mut y = Vec::with_capacity(z.len());
    for (j, &v) in z.iter().enumerate() {
        let ch = j % c;
        let h = (v - mean[ch] as f32) * inv_std[ch];
        xhat.push(h);
        y.push(scale * (gamma[ch] * h + beta[ch]));
    }
    (y, xhat, inv_std, mean, var)
}

/// Returns `(dz, dγ, dβ)`.
fn bn_backward(
    dy: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    c: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = (dy.len() / c) as f32;
    let mut dg = vec![0.0f32; c];
    let mut db = vec![0.0f32; c];
    for (j, (&d, &h)) in dy.iter().zip(xhat).enumerate() {
        dg[j % c] += d * h;
        db[j % c] += d;
    }
    // Σ dx̂ = γ Σ dy and Σ dx̂·x̂ = γ Σ dy·x̂.
    let dz = dy
        .iter()
        .zip(xhat)
        .enumerate()
        .map(|(j, (&d, &h))| {
            let ch = j % c;
            gamma[ch] * inv_std[ch] / n * (n * d - db[ch] - h * dg[ch])
        })
        .collect();
    (dz, dg, db)
}

/// Gradients of a ±1 convolution with −1 spatial padding.
///
/// `input` holds pre-sign activations; the conv saw their signs. Returns the
/// weight gradient (w.r.t. the binarized weights) and the gradient w.r.t. the
/// binarized input, each empty when not requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    id: Nhwc,
    od: Nhwc,
    k: KernelDims,
    spec: &ConvSpec,
    input: &[f32],
    w: &[f32],
    dz: &[f32],
    want_w: bool,
    want_input: bool,
) -> (Vec<f32>, Vec<f32>) {
    let ci = k.in_channels;
    let co = k.out_channels;
    let b: Vec<f32> = input.iter().map(|&v| sign_f32(v)).collect();
    let wb: Vec<f32> = w.iter().map(|&v| sign_f32(v)).collect();
    let pad_px = vec![-1.0f32; ci];
    let mut dw = if want_w {
        vec![0.0f32; w.len()]
    } else {
        Vec::new()
    };
    let mut da = if want_input {
        vec![0.0f32; input.len()]
    } else {
        Vec::new()
    };
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    for n in 0..od.batch {
        for oy in 0..od.height {
            for ox in 0..od.width {
                let p = (n * od.height + oy) * od.width + ox;
                let g = &dz[p * co..(p + 1) * co];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for fy in 0..k.filter_h {
                    let iy = (oy * sh + fy) as isize - ph as isize;
                    for fx in 0..k.filter_w {
                        let ix = (ox * sw + fx) as isize - pw as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < id.height
                            && (ix as usize) < id.width;
                        let off = if inside {
                            Some(id.index(n, iy as usize, ix as usize, 0))
                        } else {
                            None
                        };
                        let px = match off {
                            Some(o) => &b[o..o + ci],
                            None => &pad_px[..],
                        };
                        for (o, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let ko = k.index(o, fy, fx, 0);
                            if want_w {
                                for (d, &x) in dw[ko..ko + ci].iter_mut().zip(px) {
                                    *d += gv * x;
                                }
                            }
                            if let (true, Some(io)) = (want_input, off) {
                                for (d, &x) in da[io..io + ci].iter_mut().zip(&wb[ko..ko + ci]) {
                                    *d += gv * x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, da)
}

#[cfg(test)]
pub(crate) fn conv_backward_for_test(
    id: Nhwc,
    od: Nhwc,
    k: KernelDims,
    spec: &ConvSpec,
    input: &[f32],
    w: &[f32],
    dz: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    conv_backward(id, od, k, spec, input, w, dz, true, true)
}

#[cfg(test)]
pub(crate) fn bn_batch_for_test(
    z: &[f32],
    c: usize,
    gamma: &[f32],
    beta: &[f32],
    scale: f32,
) -> Vec<f32> {
    bn_batch(z, c, gamma, beta, scale).0
}

/// Gradients of `Σ g·y` through batch BN, including the output scale.
#[cfg(test)]
pub(crate) fn bn_backward_for_test(
    z: &[f32],
    c: usize,
    gamma: &[f32],
    beta: &[f32],
    scale: f32,
    g: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (_, xhat, inv_std, _, _) = bn_batch(z, c, gamma, beta, scale);
    let dy: Vec<f32> = g.iter().map(|&v| v * scale).collect();
    bn_backward(&dy, &xhat, &inv_std, gamma, c)
}
