//! Sentiment regression over a representation sequence.
//!
//! A stacked recurrent network reads the sequence, its top layer is pooled
//! (attention or last state) into `A`, and `ỹ = W_Ay·A + b_y`. Training
//! minimises the mean absolute error.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, DenseArray, Graph, NodeId, ParamGrads, ParamId, ParamStore};
use crate::error::ModelError;
use crate::recurrent::{init_uniform, sequence_constants, AttentionPooler, CellKind, RecurrentConfig, RecurrentStack};
use crate::scalar::Scalar;
use crate::seq2seq::Encoder;
use crate::train::{epoch_order, lift, non_finite, EpochLoss, TrainConfig};

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub input_dim: usize,
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub attention: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionHead<S> {
    config: RegressionConfig,
    stack: RecurrentStack,
    pooler: Option<AttentionPooler>,
    w_ay: ParamId,
    b_y: ParamId,
    store: ParamStore<S>,
}

impl<S: Scalar> RegressionHead<S> {
    pub fn new<R: Rng>(config: RegressionConfig, rng: &mut R) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let stack = RecurrentStack::new(
            RecurrentConfig::new(config.cell, config.layers, config.hidden, config.input_dim),
            &mut store,
            "regressor",
            rng,
        )?;
        let pooler = config
            .attention
            .then(|| AttentionPooler::new(config.hidden, &mut store, "regressor", rng));
        let w_ay = store.add("regressor.w_ay", init_uniform(1, config.hidden, rng));
        let b_y = store.add("regressor.b_y", DenseArray::zeros(1, 1));
        Ok(Self {
            config,
            stack,
            pooler,
            w_ay,
            b_y,
            store,
        })
    }

    pub fn config(&self) -> &RegressionConfig {
        &self.config
    }

    pub fn stack(&self) -> &RecurrentStack {
        &self.stack
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn output_weight(&self) -> ParamId {
        self.w_ay
    }

    pub fn output_bias(&self) -> ParamId {
        self.b_y
    }

    pub fn pooler(&self) -> Option<&AttentionPooler> {
        self.pooler.as_ref()
    }

    /// Score node over `inputs` (one `[d, 1]` node per step).
    pub fn build(&self, g: &mut Graph<S>, bound: &BoundParams, inputs: &[NodeId]) -> Result<NodeId, ModelError> {
        let top = self.stack.forward(g, bound, inputs, None)?.top();
        let pooled = match &self.pooler {
            Some(p) => p.pool(g, bound, &top).1,
            None => *top.last().expect("non-empty"),
        };
        let wa = g.matmul(bound[self.w_ay], pooled);
        Ok(g.add(wa, bound[self.b_y]))
    }

    fn check_input(&self, x: &DenseArray<S>) -> Result<(), ModelError> {
        if x.rows() == 0 {
            return Err(ModelError::EmptySequence);
        }
        if x.cols() != self.config.input_dim {
            return Err(ModelError::DimMismatch {
                what: "regression input dimension",
                expected: self.config.input_dim,
                got: x.cols(),
            });
        }
        Ok(())
    }
}

/// Sentiment score of a `[T, d]` sequence (a representation or raw features).
pub fn predict_score<S: Scalar>(x: &DenseArray<S>, head: &RegressionHead<S>) -> Result<S, ModelError> {
    predict_with(x, head, None)
}

/// Score through an optional encoder in front of the head.
pub fn predict_with<S: Scalar>(
    x: &DenseArray<S>,
    head: &RegressionHead<S>,
    encoder: Option<&Encoder<S>>,
) -> Result<S, ModelError> {
    let mut g = Graph::new();
    let (score, _) = score_graph(&mut g, x, head, encoder, false)?;
    g.forward()?;
    Ok(g.v(score).item().expect("scalar score"))
}

fn score_graph<S: Scalar>(
    g: &mut Graph<S>,
    x: &DenseArray<S>,
    head: &RegressionHead<S>,
    encoder: Option<&Encoder<S>>,
    trainable: bool,
) -> Result<(NodeId, Bound), ModelError> {
    let bind = |store: &ParamStore<S>, g: &mut Graph<S>| {
        if trainable {
            store.bind(g)
        } else {
            store.bind_frozen(g)
        }
    };
    if let Some(enc) = encoder {
        if head.config.input_dim != enc.hidden() {
            return Err(ModelError::DimMismatch {
                what: "regression input dimension",
                expected: head.config.input_dim,
                got: enc.hidden(),
            });
        }
    }
    let head_bound = bind(&head.store, g);
    let (states, enc_bound) = match encoder {
        Some(enc) => {
            enc.check_input(x)?;
            let b = bind(enc.store(), g);
            let inputs = sequence_constants(g, x);
            (enc.build(g, &b, &inputs)?.states, Some(b))
        }
        None => {
            head.check_input(x)?;
            (sequence_constants(g, x), None)
        }
    };
    let score = head.build(g, &head_bound, &states)?;
    Ok((
        score,
        Bound {
            head: head_bound,
            encoder: enc_bound,
        },
    ))
}

struct Bound {
    head: BoundParams,
    encoder: Option<BoundParams>,
}

/// Mean absolute error.
pub fn mae_loss<S: Scalar>(predictions: &[S], labels: &[S]) -> Result<S, ModelError> {
    if predictions.len() != labels.len() {
        return Err(ModelError::DimMismatch {
            what: "prediction count",
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let total: S = predictions.iter().zip(labels).map(|(&p, &y)| (p - y).abs()).sum();
    Ok(total / S::from_f64_lossy(labels.len() as f64))
}

/// One regression example; `input` is a representation, or raw features
/// when an encoder is finetuned in front of the head.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionSample<S> {
    pub id: String,
    pub input: DenseArray<S>,
    pub label: S,
}

/// Parameters of the best epoch so far.
#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot<S> {
    pub epoch: usize,
    pub score: f64,
    pub head: ParamStore<S>,
    pub encoder: Option<ParamStore<S>>,
}

/// Resumable state of a regression stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProgress<S> {
    pub epochs_done: usize,
    pub curve: Vec<EpochLoss>,
    pub best: Option<BestSnapshot<S>>,
}

impl<S> Default for RegressionProgress<S> {
    fn default() -> Self {
        Self {
            epochs_done: 0,
            curve: Vec::new(),
            best: None,
        }
    }
}

pub type RegressionHook<'a, S> =
    dyn FnMut(&RegressionHead<S>, Option<&Encoder<S>>, &RegressionProgress<S>) -> Result<(), ModelError> + 'a;

/// Mean absolute error of the head (behind an optional encoder) over `samples`.
pub fn evaluate_mae<S: Scalar>(
    head: &RegressionHead<S>,
    encoder: Option<&Encoder<S>>,
    samples: &[RegressionSample<S>],
) -> Result<Option<f64>, ModelError> {
    if samples.is_empty() {
        return Ok(None);
    }
    let preds = samples
        .iter()
        .map(|s| predict_with(&s.input, head, encoder))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<S> = samples.iter().map(|s| s.label).collect();
    Ok(Some(mae_loss(&preds, &labels)?.to_f64_lossy()))
}

fn check_labels<S: Scalar>(samples: &[RegressionSample<S>]) -> Result<(), ModelError> {
    for s in samples {
        let y = s.label.to_f64_lossy();
        if !(LABEL_MIN..=LABEL_MAX).contains(&y) {
            return Err(ModelError::LabelOutOfRange {
                id: s.id.clone(),
                label: y,
            });
        }
    }
    Ok(())
}

/// SGD on the MAE loss, continuing from `progress`.
///
/// With `encoder` present the samples hold raw sequences and the encoder is
/// updated together with the head; otherwise the samples are fixed
/// representations. On return the head (and encoder) hold the parameters of
/// the epoch with the lowest validation MAE, or the lowest training MAE
/// when there is no validation set.
pub fn train_regressor<S: Scalar>(
    head: &mut RegressionHead<S>,
    mut encoder: Option<&mut Encoder<S>>,
    train: &[RegressionSample<S>],
    validation: &[RegressionSample<S>],
    config: &TrainConfig,
    stream: &str,
    progress: &mut RegressionProgress<S>,
    hook: &mut RegressionHook<'_, S>,
) -> Result<(), ModelError> {
    config.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    check_labels(train)?;
    check_labels(validation)?;
    let sgd = config.sgd::<S>();
    while progress.epochs_done < config.epochs {
        let epoch = progress.epochs_done;
        let order = epoch_order(config.seed, stream, epoch, train.len());
        for chunk in order.chunks(config.accumulate) {
            let mut gh = head.store.zero_grads();
            let mut genc: Option<ParamGrads<S>> = encoder.as_ref().map(|e| e.store().zero_grads());
            for &i in chunk {
                let s = &train[i];
                let mut g = Graph::new();
                let (score, bound) = score_graph(&mut g, &s.input, head, encoder.as_deref(), true)
                    .map_err(|e| lift(epoch, i, &s.id, e))?;
                let y = g.constant(DenseArray::scalar(-s.label));
                let diff = g.add(score, y);
                let loss = g.abs(diff);
                g.forward().map_err(|e| non_finite(epoch, i, &s.id, e))?;
                let grads = g.backward(loss)?;
                gh.accumulate(&bound.head.collect(&head.store, &grads));
                if let (Some(acc), Some(b), Some(enc)) = (genc.as_mut(), bound.encoder.as_ref(), encoder.as_ref()) {
                    acc.accumulate(&b.collect(enc.store(), &grads));
                }
            }
            let inv = S::one() / S::from_f64_lossy(chunk.len() as f64);
            gh.scale(inv);
            let first = &train[chunk[0]].id;
            match (encoder.as_mut(), genc.as_mut()) {
                (Some(enc), Some(ge)) => {
                    ge.scale(inv);
                    sgd.step(&mut [(&mut head.store, &mut gh), (enc.store_mut(), ge)])
                }
                _ => sgd.step(&mut [(&mut head.store, &mut gh)]),
            }
            .map_err(|e| non_finite(epoch, chunk[0], first, e))?;
        }
        let enc_ref = encoder.as_deref();
        let train_mae = evaluate_mae(head, enc_ref, train)?.expect("non-empty");
        if !train_mae.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                epoch,
                sample: 0,
                detail: format!("mean training MAE {train_mae}"),
            });
        }
        let val_mae = evaluate_mae(head, enc_ref, validation)?;
        progress.curve.push(EpochLoss {
            epoch,
            train: train_mae,
            validation: val_mae,
        });
        let score = val_mae.unwrap_or(train_mae);
        if progress.best.as_ref().map_or(true, |b| score < b.score) {
            progress.best = Some(BestSnapshot {
                epoch,
                score,
                head: head.store.clone(),
                encoder: enc_ref.map(|e| e.store().clone()),
            });
        }
        progress.epochs_done += 1;
        hook(head, enc_ref, progress)?;
    }
    if let Some(best) = &progress.best {
        head.store = best.head.clone();
        if let (Some(enc), Some(store)) = (encoder.as_mut(), &best.encoder) {
            *enc.store_mut() = store.clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::recurrent::{attention_pool, stacked_forward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(attention: bool, input: usize, seed: u64) -> RegressionHead<f64> {
        let cfg = RegressionConfig {
            input_dim: input,
            cell: CellKind::Lstm,
            layers: 1,
            hidden: 4,
            attention,
        };
        RegressionHead::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn seq(rows: usize, cols: usize, seed: u64) -> DenseArray<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        DenseArray::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    fn set(h: &mut RegressionHead<f64>, id: ParamId, v: DenseArray<f64>) {
        h.store_mut().set(id, v).unwrap();
    }

    #[test]
    fn constant_output_with_zero_weight() {
        let mut h = head(true, 3, 1);
        let (w, b) = (h.output_weight(), h.output_bias());
        set(&mut h, w, DenseArray::zeros(1, 4));
        set(&mut h, b, DenseArray::scalar(1.5));
        for s in 0..3 {
            assert_eq!(predict_score(&seq(s + 1, 3, s as u64), &h).unwrap(), 1.5);
        }
    }

    #[test]
    fn zero_rnn_gives_bias() {
        let mut h = head(false, 3, 1);
        let b = h.output_bias();
        let rnn: Vec<ParamId> = h.store().ids().filter(|&id| id != h.output_weight() && id != b).collect();
        for id in rnn {
            h.store_mut().get_mut(id).fill_zero();
        }
        set(&mut h, b, DenseArray::scalar(-0.7));
        assert_eq!(predict_score(&seq(4, 3, 2), &h).unwrap(), -0.7);
    }

    #[test]
    fn matches_pool_then_dot_oracle() {
        for attention in [false, true] {
            let h = head(attention, 3, 9);
            let x = seq(5, 3, 10);
            let top = stacked_forward(&x, h.stack(), h.store()).unwrap().top().clone();
            let pooled = match h.pooler() {
                Some(p) => attention_pool(&top, h.store().get(p.w)).unwrap().1,
                None => top.row(top.rows() - 1).to_vec(),
            };
            let w = h.store().get(h.output_weight()).values();
            let want: f64 = w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>()
                + h.store().get(h.output_bias()).values()[0];
            assert!((predict_score(&x, &h).unwrap() - want).abs() < 1e-14);
        }
    }

    #[test]
    fn pooling_choice_irrelevant_at_single_step() {
        let with = head(true, 3, 4);
        let mut without = head(false, 3, 4);
        for (name, v) in with.store().iter() {
            if let Some(id) = without.store().find(name) {
                without.store_mut().set(id, v.clone()).unwrap();
            }
        }
        let x = seq(1, 3, 5);
        assert_eq!(predict_score(&x, &with).unwrap(), predict_score(&x, &without).unwrap());
    }

    #[test]
    fn predict_rejects_empty_and_wrong_dim() {
        let h = head(false, 3, 1);
        assert!(matches!(predict_score(&seq(2, 4, 1), &h), Err(ModelError::DimMismatch { .. })));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae_loss(&[0.5, 1.0], &[0.5, 1.0]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mae_loss(&[2.5], &[-3.0]).unwrap(), 5.5);
        assert!(mae_loss::<f64>(&[], &[]).is_err());
        assert!(mae_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_gradient_is_unit() {
        let h = head(true, 2, 3);
        let x = seq(3, 2, 4);
        let mut g = Graph::new();
        let (score, _) = score_graph(&mut g, &x, &h, None, true).unwrap();
        let y = g.constant(DenseArray::scalar(2.0));
        let diff = g.sub(score, y, (1, 1));
        let loss = g.abs(diff);
        g.forward().unwrap();
        let grads = g.backward(loss).unwrap();
        let predicted = g.v(score).item().unwrap();
        assert!((predicted - 2.0).abs() > 1e-3);
        let d = grads.get(score).unwrap().item().unwrap();
        assert_eq!(d, if predicted > 2.0 { 1.0 } else { -1.0 });
        let leaves = g.differentiable_leaves();
        assert!(grad_check(&mut g, loss, &leaves, 1e-5).unwrap().max_relative_error < 1e-6);
    }

    fn samples(n: usize, dim: usize, seed: u64) -> Vec<RegressionSample<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| RegressionSample {
                id: format!("seg{i}"),
                input: seq(r.gen_range(1..5), dim, seed * 100 + i as u64),
                label: r.gen_range(-3.0..3.0),
            })
            .collect()
    }

    fn cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: lr,
            ..TrainConfig::default()
        }
    }

    fn no_hook() -> impl FnMut(&RegressionHead<f64>, Option<&Encoder<f64>>, &RegressionProgress<f64>) -> Result<(), ModelError> {
        |_, _, _| Ok(())
    }

    #[test]
    fn memorizes_single_segment() {
        let mut h = head(false, 3, 2);
        let data = vec![RegressionSample {
            id: "only".into(),
            input: seq(4, 3, 8),
            label: 2.2,
        }];
        let mut p = RegressionProgress::default();
        train_regressor(&mut h, None, &data, &[], &cfg(300, 0.05), "r", &mut p, &mut no_hook()).unwrap();
        let mae = evaluate_mae(&h, None, &data).unwrap().unwrap();
        assert!(mae < 0.05, "{mae}");
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut h = head(true, 3, 2);
        let before = h.clone();
        let data = samples(4, 3, 1);
        train_regressor(&mut h, None, &data, &data, &cfg(3, 0.0), "r", &mut RegressionProgress::default(), &mut no_hook()).unwrap();
        assert_eq!(h, before);
    }

    #[test]
    fn frozen_and_finetuned_encoder() {
        let mut enc = Encoder::<f64>::new(RecurrentConfig::new(CellKind::Gru, 1, 4, 3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let raw = samples(4, 3, 2);
        let reps: Vec<RegressionSample<f64>> = raw
            .iter()
            .map(|s| RegressionSample {
                input: enc.encode(&s.input, "x").unwrap().states,
                ..s.clone()
            })
            .collect();
        let before = enc.clone();
        let mut h = head(false, 4, 5);
        train_regressor(&mut h, None, &reps, &[], &cfg(3, 0.05), "r", &mut RegressionProgress::default(), &mut no_hook()).unwrap();
        assert_eq!(enc, before);

        let mut h = head(false, 4, 5);
        train_regressor(&mut h, Some(&mut enc), &raw, &[], &cfg(3, 0.05), "r", &mut RegressionProgress::default(), &mut no_hook()).unwrap();
        assert_ne!(enc, before);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let mut h = head(false, 3, 2);
        let mut data = samples(3, 3, 1);
        data[1].label = 3.5;
        let r = train_regressor(&mut h, None, &data, &[], &cfg(1, 0.1), "r", &mut RegressionProgress::default(), &mut no_hook());
        assert_eq!(
            r,
            Err(ModelError::LabelOutOfRange {
                id: "seg1".into(),
                label: 3.5
            })
        );
    }

    #[test]
    fn aborts_on_non_finite() {
        let mut h = head(false, 3, 2);
        let mut data = samples(3, 3, 1);
        data[2].input.values_mut()[0] = f64::NAN;
        let r = train_regressor(&mut h, None, &data, &[], &cfg(1, 0.1), "r", &mut RegressionProgress::default(), &mut no_hook());
        match r {
            Err(ModelError::NonFiniteLoss { detail, .. }) => assert!(detail.contains("seg2"), "{detail}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn keeps_best_validation_epoch() {
        let mut h = head(true, 3, 6);
        let train = samples(6, 3, 7);
        let val = samples(3, 3, 8);
        let mut p = RegressionProgress::default();
        train_regressor(&mut h, None, &train, &val, &cfg(15, 0.3), "r", &mut p, &mut no_hook()).unwrap();
        let retained = evaluate_mae(&h, None, &val).unwrap().unwrap();
        for e in &p.curve {
            assert!(retained <= e.validation.unwrap());
        }
        assert_eq!(retained, p.best.as_ref().unwrap().score);
    }
}
