//! Training loops, the BN quantize-freeze-retrain loop and model export.

use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;

use super::net::{Architecture, BlockKind, EvalMode, Readout, Stage, TrainConfig, TrainState};
use super::task::{Dataset, ToyTask};
use crate::bitcore::pack_weights;
use crate::bnquant::{compute_threshold, quantize_bn, QbnParams};
use crate::error::{BitflowError, Result};
use crate::netgraph::{run_model, FloatBnBlock, Layer, Model, ResnetBlock, VggBlock, VggOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Loss and accuracy (percent) of one split after one epoch.
///
/// Training numbers come from the training-mode passes of that epoch.
/// Validation uses unlimited ranges in the warmup stage and the deployed
/// 8-bit semantics afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl TrainState {
    /// Train `epochs` more epochs in the current stage with a fresh cosine schedule.
    pub fn train_epochs(&mut self, task: &ToyTask, epochs: usize) -> Result<()> {
        let n = task.train.len();
        let bs = self.config.batch_size;
        let steps = n.div_ceil(bs);
        let total = (epochs * steps).max(1) as f32;
        for e in 0..epochs {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut self.rng);
            let (mut loss, mut correct) = (0.0, 0);
            for (s, chunk) in idx.chunks(bs).enumerate() {
                let t = (e * steps + s) as f32;
                let lr_scale = 0.5 * (1.0 + (std::f32::consts::PI * t / total).cos());
                let (x, y) = task.train.batch(chunk)?;
                let (l, c) = self.train_step(&x, &y, lr_scale)?;
                loss += l;
                correct += c;
            }
            self.epoch += 1;
            let mode = match self.stage {
                Stage::Warmup => EvalMode::Float,
                Stage::Clipped => EvalMode::Deploy,
            };
            let (vl, va) = self.evaluate(&task.val, mode)?;
            if !vl.is_finite() {
                return Err(BitflowError::Diverged(self.epoch));
            }
            let train = EpochRecord {
                epoch: self.epoch,
                stage: self.stage,
                split: Split::Train,
                loss: loss / n as f64,
                accuracy: 100.0 * correct as f64 / n as f64,
            };
            debug!(
                "epoch {} {:?}: train loss {:.4} acc {:.2}, val loss {:.4} acc {:.2}",
                self.epoch, self.stage, train.loss, train.accuracy, vl, va
            );
            self.history.push(train);
            self.history.push(EpochRecord {
                split: Split::Val,
                loss: vl,
                accuracy: va,
                ..train
            });
        }
        Ok(())
    }

    /// Last recorded validation accuracy.
    pub fn last_val_accuracy(&self) -> Option<f64> {
        self.history
            .iter()
            .rev()
            .find(|r| r.split == Split::Val)
            .map(|r| r.accuracy)
    }

    /// Enter the clipped stage without training.
    pub fn enable_clipping(&mut self) -> Result<()> {
        if self.stage != Stage::Warmup {
            return Err(BitflowError::StageViolation(
                "clipping is already enabled".into(),
            ));
        }
        self.stage = Stage::Clipped;
        Ok(())
    }

    /// Deployable model: thresholds for VGG blocks, frozen tables for residual ones.
    pub fn export_model(&self) -> Result<Model> {
        self.export(false)
    }

    /// Model with every BN kept in floating point, for offline conversion.
    pub fn export_float_model(&self) -> Result<Model> {
        self.export(true)
    }

    fn export(&self, float_bn: bool) -> Result<Model> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let kernel = pack_weights(&l.w, l.dims)?;
            let spec = l.block.conv_spec();
            let bn = l.bn.as_ref().map(|b| b.params());
            layers.push(match (l.block.kind, bn) {
                (BlockKind::Terminal, _) => Layer::Vgg(VggBlock {
                    kernel,
                    spec,
                    output: VggOutput::Terminal,
                }),
                (_, Some(bn)) if float_bn => Layer::FloatBn(FloatBnBlock { kernel, spec, bn }),
                (BlockKind::Vgg, Some(bn)) => Layer::Vgg(VggBlock {
                    kernel,
                    spec,
                    output: VggOutput::Threshold(compute_threshold(&bn)?.params),
                }),
                (BlockKind::Resnet, _) => Layer::Resnet(ResnetBlock {
                    kernel,
                    spec,
                    qbn: self
                        .qbn_tables(i)
                        .ok_or_else(|| {
                            BitflowError::StageViolation(format!(
                                "residual block {i} has no quantized BN yet"
                            ))
                        })?
                        .clone(),
                }),
                (_, None) => unreachable!("BN block without BN state"),
            });
        }
        Ok(Model::new(layers))
    }
}

/// Warmup stage from a fresh initialization.
pub fn train_stage1(
    arch: Architecture,
    config: TrainConfig,
    task: &ToyTask,
    epochs: usize,
) -> Result<TrainState> {
    let mut s = TrainState::new(arch, config)?;
    s.train_epochs(task, epochs)?;
    info!(
        "stage 1: {epochs} epochs, val accuracy {:?}",
        s.last_val_accuracy()
    );
    Ok(s)
}

/// Clipped stage, continuing from a warmup state.
pub fn train_stage2(mut state: TrainState, task: &ToyTask, epochs: usize) -> Result<TrainState> {
    state.enable_clipping()?;
    state.train_epochs(task, epochs)?;
    info!(
        "stage 2: {epochs} epochs, val accuracy {:?}",
        state.last_val_accuracy()
    );
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeReport {
    /// Block index and exported tables, in freezing order.
    pub tables: Vec<(usize, QbnParams)>,
    /// Largest absolute change of any BN parameter from quantization.
    pub max_noise: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

/// For each BN layer in order: fit the Q-format, replace the parameters by
/// their quantized values, freeze the block and retrain the blocks that are
/// still free for `retrain_epochs`.
///
/// Residual blocks then run the folded integer tables. Thresholded blocks
/// keep only the sign of BN, so their thresholds are derived from the
/// quantized parameters.
pub fn bn_quantize_retrain(
    mut state: TrainState,
    task: &ToyTask,
    retrain_epochs: usize,
) -> Result<(TrainState, QuantizeReport)> {
    if state.stage != Stage::Clipped {
        return Err(BitflowError::StageViolation(
            "BN quantization needs a model trained with clipping".into(),
        ));
    }
    let accuracy_before = state.deploy_accuracy(&task.val)?;
    let mut tables = Vec::new();
    let mut max_noise = 0.0f64;
    for i in state.arch.bn_blocks() {
        if state.qbn_tables(i).is_some() {
            continue;
        }
        let p = state.bn_params(i).expect("BN block");
        let q = quantize_bn(&p)?;
        for (a, b) in p.vars().iter().zip(q.noisy.vars()) {
            for (x, y) in a.iter().zip(b) {
                max_noise = max_noise.max((x - y).abs());
            }
        }
        info!(
            "block {i}: Q{}.{} BN, folded Q{}.{}",
            q.tables.format.range_bits(),
            q.tables.format.frac_bits(),
            q.tables.fold_format.range_bits(),
            q.tables.fold_format.frac_bits()
        );
        tables.push((i, q.tables.clone()));
        state.freeze(i, q.tables, q.noisy);
        state.train_epochs(task, retrain_epochs)?;
    }
    let accuracy_after = state.deploy_accuracy(&task.val)?;
    Ok((
        state,
        QuantizeReport {
            tables,
            max_noise,
            accuracy_before,
            accuracy_after,
        },
    ))
}

/// Predictions of an exported model run through the inference engine.
pub fn netgraph_predictions(model: &Model, readout: &Readout, data: &Dataset) -> Result<Vec<u8>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(250) {
        let (x, _) = data.batch(chunk)?;
        out.extend(readout.predict_i8(&run_model(model, &x)?)?);
    }
    Ok(out)
}

/// Write `epoch,split,loss,accuracy` rows.
pub fn write_curves_csv(mut w: impl Write, history: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,split,loss,accuracy")?;
    for r in history {
        writeln!(
            w,
            "{},{},{:.6},{:.4}",
            r.epoch,
            r.split.as_str(),
            r.loss,
            r.accuracy
        )?;
    }
    Ok(())
}
