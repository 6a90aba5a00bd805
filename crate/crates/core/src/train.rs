//! SGD training loops shared by the translation and regression phases.
//!
//! Training is organised in epochs over a seeded per-epoch permutation of
//! the training set, so a run resumed at an epoch boundary replays exactly
//! what an uninterrupted run would have done.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, DenseArray, Sgd};
use crate::error::ModelError;
use crate::scalar::Scalar;
use crate::seq2seq::{TargetSeq, TranslationModel};

/// Optimisation settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    /// Samples whose gradients are averaged into one step.
    pub accumulate: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.01,
            clip_norm: None,
            accumulate: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.accumulate == 0 {
            return Err(ModelError::InvalidConfig("accumulate must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(ModelError::InvalidConfig(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub(crate) fn sgd<S: Scalar>(&self) -> Sgd<S> {
        Sgd::new(S::from_f64_lossy(self.learning_rate)).with_clip(self.clip_norm.map(S::from_f64_lossy))
    }
}

/// Mean losses after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded generator for a named purpose, independent of every other stream.
pub fn stream_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for b in stream.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    ChaCha8Rng::seed_from_u64(splitmix(h ^ splitmix(index)))
}

/// Visiting order of `n` samples in `epoch`.
pub fn epoch_order(seed: u64, stream: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, stream, epoch as u64));
    order
}

pub(crate) fn non_finite(epoch: usize, sample: usize, id: &str, err: AutodiffError) -> ModelError {
    match err {
        AutodiffError::NonFinite { node, op } => ModelError::NonFiniteLoss {
            epoch,
            sample,
            detail: format!("segment {id}: {op} produced a non-finite value at node {node}"),
        },
        AutodiffError::NonFiniteGradient => ModelError::NonFiniteLoss {
            epoch,
            sample,
            detail: format!("segment {id}: non-finite gradient"),
        },
        other => other.into(),
    }
}

pub(crate) fn lift(epoch: usize, sample: usize, id: &str, err: ModelError) -> ModelError {
    match err {
        ModelError::Autodiff(e) => non_finite(epoch, sample, id, e),
        other => other,
    }
}

/// One translation training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationSample<S> {
    pub id: String,
    pub source: DenseArray<S>,
    pub target: TargetSeq<S>,
}

/// Resumable position of a training stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    pub curve: Vec<EpochLoss>,
}

/// Called after every completed epoch; an error stops training.
pub type TranslationHook<'a, S> = dyn FnMut(&TranslationModel<S>, &Progress) -> Result<(), ModelError> + 'a;

/// Mean loss of `model` over `samples`.
pub fn translation_eval<S: Scalar>(
    model: &TranslationModel<S>,
    samples: &[TranslationSample<S>],
) -> Result<Option<f64>, ModelError> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for s in samples {
        let e = model.encode(&s.source, "eval")?;
        let out = model.decode_teacher_forced(&e, &s.target)?;
        total += crate::seq2seq::translation_loss(&out.outputs, &s.target)?.to_f64_lossy();
    }
    Ok(Some(total / samples.len() as f64))
}

/// Teacher-forced SGD on the translation loss, continuing from `progress`.
pub fn train_translation<S: Scalar>(
    model: &mut TranslationModel<S>,
    train: &[TranslationSample<S>],
    validation: &[TranslationSample<S>],
    config: &TrainConfig,
    stream: &str,
    progress: &mut Progress,
    hook: &mut TranslationHook<'_, S>,
) -> Result<(), ModelError> {
    config.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let sgd = config.sgd::<S>();
    let scale = |n: usize| S::one() / S::from_f64_lossy(n as f64);
    while progress.epochs_done < config.epochs {
        let epoch = progress.epochs_done;
        let order = epoch_order(config.seed, stream, epoch, train.len());
        for chunk in order.chunks(config.accumulate) {
            let (mut ge, mut gd) = (model.encoder().store().zero_grads(), model.decoder().store().zero_grads());
            for &i in chunk {
                let s = &train[i];
                let mut lg = model
                    .loss_graph(&s.source, &s.target, false)
                    .map_err(|e| lift(epoch, i, &s.id, e))?;
                lg.graph.forward().map_err(|e| non_finite(epoch, i, &s.id, e))?;
                let grads = lg.graph.backward(lg.loss)?;
                ge.accumulate(&lg.encoder.collect(model.encoder().store(), &grads));
                gd.accumulate(&lg.decoder.collect(model.decoder().store(), &grads));
            }
            ge.scale(scale(chunk.len()));
            gd.scale(scale(chunk.len()));
            let (es, ds) = model.stores_mut();
            sgd.step(&mut [(es, &mut ge), (ds, &mut gd)])
                .map_err(|e| non_finite(epoch, chunk[0], &train[chunk[0]].id, e))?;
        }
        let train_loss = translation_eval(model, train)?.expect("non-empty");
        if !train_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                epoch,
                sample: 0,
                detail: format!("mean training loss {train_loss}"),
            });
        }
        progress.curve.push(EpochLoss {
            epoch,
            train: train_loss,
            validation: translation_eval(model, validation)?,
        });
        progress.epochs_done += 1;
        hook(model, progress)?;
    }
    Ok(())
}
