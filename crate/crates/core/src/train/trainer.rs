use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, ModelSpecs};
use super::objective::{DecoderFinetune, DistillExample, EncoderDistill, Objective, SegExample, TeacherTargets};
use super::{early_stop_check, scheduler_step, EpochRecord, Phase, TrainConfig, TrainState};
use crate::autograd::Tape;
use crate::data::{ExampleSource, Split};
use crate::error::{Error, Result};
use crate::models::{Decoder, Encoder, PerceptualExtractor};
use crate::nn::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::train::optim::Adam;
use crate::weights;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Epoch means of the named loss components on the train split.
    pub components: Vec<(&'static str, f64)>,
    pub new_best: bool,
    pub stop: bool,
}

/// Drives one phase: shuffled mini-batches, Adam updates, validation,
/// plateau scheduling, early stopping and best-weights tracking.
pub struct Trainer<T: Scalar, O: Objective<T>> {
    config: TrainConfig,
    objective: O,
    optimizer: Adam<T>,
    state: TrainState,
    best: ParamStore<T>,
}

impl<T: Scalar, O: Objective<T>> Trainer<T, O> {
    pub fn new(config: TrainConfig, objective: O) -> Result<Self> {
        config.validate()?;
        if config.phase != objective.phase() {
            return Err(Error::config(format!(
                "config phase {} does not match objective {}",
                config.phase.name(),
                objective.phase().name()
            )));
        }
        if objective.len(Split::Train) == 0 {
            return Err(Error::config("train split is empty"));
        }
        let optimizer = Adam::new(config.optimizer.clone(), objective.trainable());
        let state = TrainState::new(&config);
        let best = objective.trainable().clone();
        Ok(Self {
            config,
            objective,
            optimizer,
            state,
            best,
        })
    }

    /// Restores weights, optimizer moments, state and best weights from a
    /// checkpoint. `max_epochs` may extend the run; every other setting comes
    /// from the checkpoint's config echo.
    pub fn resume(objective: O, checkpoint: &Checkpoint<T>, max_epochs: Option<usize>) -> Result<Self> {
        let mut config = checkpoint.config.clone();
        if let Some(m) = max_epochs {
            config.max_epochs = m;
        }
        let mut t = Self::new(config, objective)?;
        if checkpoint.phase != t.objective.phase() {
            return Err(Error::config("checkpoint phase does not match the objective"));
        }
        for (name, store) in t.objective.frozen() {
            if let Some(blob) = checkpoint.blobs.get(&format!("frozen.{name}")) {
                let mut expect = store.clone();
                weights::fill_store(&mut expect, blob.clone())?;
                if expect.content_hash() != store.content_hash() {
                    return Err(Error::config(format!(
                        "frozen {name} weights differ from the ones recorded in the checkpoint"
                    )));
                }
            }
        }
        weights::fill_store(t.objective.trainable_mut(), checkpoint.blob("weights")?.clone())?;
        weights::fill_store(&mut t.best, checkpoint.blob("best_weights")?.clone())?;
        t.optimizer.step = checkpoint.adam_step;
        t.optimizer.m = checkpoint.blob("adam_m")?.clone();
        t.optimizer.v = checkpoint.blob("adam_v")?.clone();
        if t.optimizer.m.keys().ne(t.optimizer.v.keys()) {
            return Err(Error::Format("optimizer moments have mismatched names".into()));
        }
        t.state = checkpoint.state.clone();
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn objective(&self) -> &O {
        &self.objective
    }

    pub fn best_weights(&self) -> &ParamStore<T> {
        &self.best
    }

    pub fn is_finished(&self) -> bool {
        self.state.is_finished(&self.config)
    }

    fn batches(&self, n: usize, shuffle_epoch: Option<u64>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        if let Some(epoch) = shuffle_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn train_pass(&mut self, epoch: usize) -> Result<(f64, Vec<(&'static str, f64)>)> {
        let n = self.objective.len(Split::Train);
        let lr = self.state.current_lr;
        let mut total = 0.0;
        let mut comps: Vec<(&'static str, f64)> = Vec::new();
        for (bi, idx) in self.batches(n, Some(epoch as u64)).into_iter().enumerate() {
            let mut tape = Tape::new();
            let parts = self.objective.loss(&mut tape, Split::Train, &idx, Ctx::TRAIN)?;
            let value = tape.value(parts.total).data()[0].to_f64_lossless();
            if !value.is_finite() {
                return Err(Error::Numerics(format!(
                    "loss is {value} at epoch {epoch}, batch {}",
                    bi + 1
                )));
            }
            let grads = tape.backward(parts.total)?;
            let grads = tape.param_grads(&grads);
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::Numerics(format!(
                    "gradient of {name} is non-finite at epoch {epoch}, batch {}",
                    bi + 1
                )));
            }
            let buffers = tape.take_buffer_updates();
            self.optimizer.update(self.objective.trainable_mut(), &grads, lr)?;
            self.objective.trainable_mut().apply_buffer_updates(buffers)?;

            let w = idx.len() as f64;
            total += value * w;
            for (k, (name, v)) in parts.parts.iter().enumerate() {
                let v = tape.value(*v).data()[0].to_f64_lossless() * w;
                match comps.get_mut(k) {
                    Some(c) => c.1 += v,
                    None => comps.push((name, v)),
                }
            }
        }
        let n = n as f64;
        Ok((total / n, comps.into_iter().map(|(k, v)| (k, v / n)).collect()))
    }

    /// Count-weighted mean loss over a split in evaluation mode.
    pub fn eval_loss(&self, split: Split) -> Result<f64> {
        let n = self.objective.len(split);
        if n == 0 {
            return Err(Error::config(format!("{} split is empty", split.as_str())));
        }
        let mut total = 0.0;
        for idx in self.batches(n, None) {
            let mut tape = Tape::new();
            let parts = self.objective.loss(&mut tape, split, &idx, Ctx::EVAL)?;
            let v = tape.value(parts.total).data()[0].to_f64_lossless();
            if !v.is_finite() {
                return Err(Error::Numerics(format!("{} loss is {v}", split.as_str())));
            }
            total += v * idx.len() as f64;
        }
        Ok(total / n as f64)
    }

    pub fn step_epoch(&mut self) -> Result<EpochReport> {
        if self.is_finished() {
            return Err(Error::config("training already finished"));
        }
        let epoch = self.state.epoch + 1;
        let lr = self.state.current_lr;
        let (train_loss, components) = self.train_pass(epoch)?;
        let val_loss = if self.objective.len(Split::Val) > 0 {
            self.eval_loss(Split::Val)?
        } else {
            log::warn!("validation split is empty; monitoring the train loss");
            train_loss
        };
        self.state.epoch = epoch;
        self.state.rng_state.epoch = epoch as u64;
        self.state = scheduler_step(&self.state, val_loss, &self.config);
        self.state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        let new_best = self.state.best_epoch == epoch;
        if new_best {
            self.best = self.objective.trainable().clone();
        }
        let stop = early_stop_check(&self.state, &self.config);
        self.state.stopped_early = stop;
        log::info!(
            "{} epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:e}{}",
            self.config.phase.name(),
            if stop { " (early stop)" } else { "" }
        );
        Ok(EpochReport {
            epoch,
            train_loss,
            val_loss,
            lr,
            components,
            new_best,
            stop,
        })
    }

    /// Trains until `max_epochs` or early stopping.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochReport)) -> Result<()> {
        while !self.is_finished() {
            let r = self.step_epoch()?;
            on_epoch(&r);
        }
        Ok(())
    }

    pub fn checkpoint(&self, specs: ModelSpecs) -> Checkpoint<T> {
        let mut blobs = std::collections::BTreeMap::new();
        blobs.insert("weights".into(), weights::store_tensors(self.objective.trainable()));
        blobs.insert("best_weights".into(), weights::store_tensors(&self.best));
        blobs.insert("adam_m".into(), self.optimizer.m.clone());
        blobs.insert("adam_v".into(), self.optimizer.v.clone());
        for (name, store) in self.objective.frozen() {
            blobs.insert(format!("frozen.{name}"), weights::store_tensors(store));
        }
        Checkpoint {
            phase: self.config.phase,
            config: self.config.clone(),
            state: self.state.clone(),
            specs,
            adam_step: self.optimizer.step,
            blobs,
        }
    }

    /// Loads the best-validation weights into the model and hands it back.
    pub fn finish(mut self) -> Result<(O, TrainState)> {
        self.objective.trainable_mut().load_from(&self.best)?;
        Ok((self.objective, self.state))
    }
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["epoch", "train_loss", "val_loss", "lr"]).map_err(io)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.lr.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Phase 1: trains `student` to reproduce the teacher's embeddings and
/// returns it at its best validation epoch.
pub fn distill_encoder<T: Scalar, S: ExampleSource<T> + ?Sized>(
    config: &TrainConfig,
    train: &S,
    val: &S,
    targets: TeacherTargets<'_, T>,
    student: Encoder<T>,
    extractor: PerceptualExtractor<T>,
) -> Result<(Encoder<T>, TrainState)> {
    if config.phase != Phase::EncoderDistill {
        return Err(Error::config("distill_encoder needs phase = encoder_distill"));
    }
    if train.is_empty() {
        return Err(Error::config("train split is empty"));
    }
    let tr = DistillExample::collect(train, &targets)?;
    let va = DistillExample::collect(val, &targets)?;
    let objective = EncoderDistill::new(config, student, extractor, tr, va)?;
    let mut trainer = Trainer::new(config.clone(), objective)?;
    trainer.run(|_| {})?;
    let (obj, state) = trainer.finish()?;
    Ok((obj.student, state))
}

/// Phase 2: trains `decoder` on embeddings of the frozen `encoder` with Dice loss.
pub fn finetune_decoder<T: Scalar, S: ExampleSource<T> + ?Sized>(
    config: &TrainConfig,
    train: &S,
    val: &S,
    encoder: Encoder<T>,
    decoder: Decoder<T>,
) -> Result<(Decoder<T>, TrainState)> {
    if config.phase != Phase::DecoderFinetune {
        return Err(Error::config("finetune_decoder needs phase = decoder_finetune"));
    }
    let tr = SegExample::collect(train, &encoder, config.prompt_policy)?;
    let va = SegExample::collect(val, &encoder, config.prompt_policy)?;
    let objective = DecoderFinetune::new(config, encoder, decoder, tr, va)?;
    let mut trainer = Trainer::new(config.clone(), objective)?;
    trainer.run(|_| {})?;
    let (obj, state) = trainer.finish()?;
    Ok((obj.decoder, state))
}
