//! Staged optimization: which submodules train in which stage, the update
//! step, the epoch loop with its batch producer, and evaluation.

pub mod checkpoint;
pub mod diagnostics;
pub mod eval;

use std::fmt::{self, Write as _};
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Loaded};
pub use diagnostics::gradcheck_model;
pub use eval::{evaluate, EvalReport, EvalRow};

use crate::autograd::{AdamState, Tape, TapeOptions};
use crate::config::ModelConfig;
use crate::dataset::{MaskSpec, Sample};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, PreparedSample};
use crate::nn::{Ctx, ParamGroup};

/// Batches the producer thread may run ahead of the trainer.
pub const QUEUE_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// Point-only pretraining: encoder, decoder and head; no image branch.
    One,
    /// Point branch frozen; image tokenizer and cross-attention train.
    Two,
    /// Everything trains.
    Three,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            3 => Some(Stage::Three),
            _ => None,
        }
    }

    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            Stage::One => matches!(group, ParamGroup::PcEncoder | ParamGroup::Decoder),
            Stage::Two => matches!(group, ParamGroup::ImageTokenizer | ParamGroup::CrossAttention),
            Stage::Three => true,
        }
    }

    /// Whether the image branch and cross-attention take part.
    pub fn fuses(self) -> bool {
        self != Stage::One
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Everything a checkpoint captures.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Last stage trained, `None` for a fresh initialization.
    pub stage: Option<Stage>,
    pub epoch: u64,
    /// Optimizer steps taken so far; also the position of the training RNG.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let adam = AdamState::new(checkpoint::adam_config(cfg), model.store.tensors());
        Ok(TrainState {
            model,
            adam,
            stage: None,
            epoch: 0,
            step: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(self)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const DROPOUT_STREAMS: u64 = 1 << 63;

/// One forward/backward pass and Adam update on the parameters `stage`
/// trains. Returns the loss before the update.
pub fn train_step(state: &mut TrainState, batch: &[PreparedSample], stage: Stage) -> Result<f64> {
    let cfg = &state.model.cfg;
    if cfg.identity_bypass {
        return Err(Error::Config(
            "identity_bypass is an evaluation mode and cannot train".into(),
        ));
    }
    state.model.store.set_trainable(|g| stage.trains(g));
    let mut dropout =
        (stage.fuses() && cfg.patch_dropout > 0.0).then(|| stream_rng(cfg.seed, DROPOUT_STREAMS | state.step));
    let tape = Tape::new(TapeOptions {
        precision: cfg.precision,
        fault: None,
    });
    let ctx = Ctx::bind(&tape, &state.model.store);
    let out = state.model.forward(
        &ctx,
        batch,
        ForwardOptions {
            fuse: stage.fuses(),
            dropout_rng: dropout.as_mut(),
            record_attention: false,
        },
    )?;
    let loss = state.model.loss(out.points, batch)?;
    let value = loss.item();
    if !value.is_finite() {
        let (op, label) = tape.first_nonfinite().unwrap_or(("chamfer", "loss".to_string()));
        return Err(Error::NonFinite { op, label });
    }
    let grads = tape.backward(loss)?;
    ctx.write_grads(&grads, &mut state.model.store);
    let precision = state.model.cfg.precision;
    for (i, p) in state.model.store.params_mut().iter_mut().enumerate() {
        let t = &mut p.tensor;
        if !t.requires_grad {
            continue;
        }
        let Some(g) = t.grad.take() else { continue };
        state.adam.step(i, t.data_mut(), &g, precision)?;
    }
    state.step += 1;
    Ok(value)
}

/// Plain-text training log: `epoch,stage,loss` rows plus `# warning:` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainLog {
    text: String,
}

impl Default for TrainLog {
    fn default() -> Self {
        TrainLog {
            text: "epoch,stage,loss\n".into(),
        }
    }
}

impl TrainLog {
    pub fn record(&mut self, epoch: u64, stage: Stage, loss: f64) {
        let _ = writeln!(self.text, "{epoch},{stage},{loss}");
    }

    pub fn warn(&mut self, msg: &str) {
        let _ = writeln!(self.text, "# warning: {msg}");
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Wraps log text read back from disk.
    pub fn from_text(text: &str) -> Self {
        TrainLog { text: text.into() }
    }

    /// `(epoch, stage, loss)` rows in order.
    pub fn rows(&self) -> Vec<(u64, u8, f64)> {
        self.text
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with('#'))
            .filter_map(|l| {
                let mut it = l.split(',');
                Some((
                    it.next()?.parse().ok()?,
                    it.next()?.parse().ok()?,
                    it.next()?.parse().ok()?,
                ))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScheduleOptions {
    /// Permit running an earlier stage after a later one.
    pub allow_stage_regress: bool,
}

struct Job {
    epoch: u64,
    items: Vec<PreparedSample>,
}

/// Trains `stage` for `epochs` epochs over `data`.
///
/// A producer thread groups, masks and patches each batch and hands it over
/// through a bounded queue. Each epoch's mean loss is appended to `log`;
/// `on_checkpoint` runs every `checkpoint_every` epochs and once at the end.
pub fn run_schedule(
    state: &mut TrainState,
    data: &[Sample],
    stage: Stage,
    epochs: usize,
    log: &mut TrainLog,
    options: ScheduleOptions,
    on_checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if let Some(prev) = state.stage {
        if stage < prev && !options.allow_stage_regress {
            return Err(Error::Config(format!(
                "cannot run stage {stage} after stage {prev} without explicit override"
            )));
        }
    }
    match (stage, state.stage) {
        (Stage::Two, None) => log.warn("stage 2 started without a stage-1 checkpoint"),
        (Stage::Three, None) => log.warn("stage 3 started from a fresh initialization"),
        _ => {}
    }
    let cfg = state.model.cfg.clone();
    let base: Vec<PreparedSample> = data
        .iter()
        .map(|s| PreparedSample::new(s, &cfg, 0))
        .collect::<Result<_>>()?;
    let first_epoch = state.epoch;
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let every = cfg.checkpoint_every;

    thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Job>>(QUEUE_DEPTH);
        let producer_cfg = cfg.clone();
        let base = &base;
        scope.spawn(move || {
            for e in first_epoch..first_epoch + epochs as u64 {
                let mut rng = stream_rng(producer_cfg.seed, e);
                let mut order: Vec<usize> = (0..base.len()).collect();
                order.shuffle(&mut rng);
                let seeds: Vec<u64> = order.iter().map(|_| rng.random()).collect();
                for (chunk, seed_chunk) in order
                    .chunks(producer_cfg.batch_size)
                    .zip(seeds.chunks(producer_cfg.batch_size))
                {
                    let items = chunk
                        .iter()
                        .zip(seed_chunk)
                        .map(|(&i, &seed)| {
                            let mut s = base[i].clone();
                            s.partition = MaskSpec {
                                mask_ratio: producer_cfg.mask_ratio,
                                seed,
                            }
                            .partition(producer_cfg.groups)?;
                            Ok(s)
                        })
                        .collect::<Result<Vec<_>>>()
                        .map(|items| Job { epoch: e, items });
                    if tx.send(items).is_err() {
                        return;
                    }
                }
            }
        });

        let mut sum = 0.0;
        let mut seen = 0usize;
        let mut batches = 0usize;
        for job in rx {
            let job = job?;
            let loss = train_step(state, &job.items, stage)?;
            sum += loss * job.items.len() as f64;
            seen += job.items.len();
            batches += 1;
            if batches == batches_per_epoch {
                state.epoch = job.epoch + 1;
                state.stage = Some(stage);
                log.record(state.epoch, stage, sum / seen as f64);
                let done = (state.epoch - first_epoch) as usize;
                if every > 0 && done.is_multiple_of(every) && done < epochs {
                    on_checkpoint(state)?;
                }
                sum = 0.0;
                seen = 0;
                batches = 0;
            }
        }
        Ok(())
    })?;
    state.stage = Some(stage);
    on_checkpoint(state)
}
