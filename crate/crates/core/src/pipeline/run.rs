//! Phase-by-phase execution of a pipeline spec.

use serde::{Deserialize, Serialize};

use super::{plan, source_features, target_sequence, ModalityExpr, PipelineConfig, PipelineError, PipelineKind, PipelineSpec};
use crate::autodiff::DenseArray;
use crate::data::{split_dataset, AlignedSegment, Dataset};
use crate::error::ModelError;
use crate::metrics::{evaluate, EvaluationReport};
use crate::regression::{
    evaluate_mae, predict_with, train_regressor, RegressionConfig, RegressionHead, RegressionProgress, RegressionSample,
};
use crate::seq2seq::{beam_search, default_max_len, BeamConfig, Encoder, TargetSeq, TranslationConfig, TranslationModel};
use crate::train::{stream_rng, train_translation, translation_eval, EpochLoss, Progress, TranslationSample};

/// A translation stage's model and how far its training got.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationStage {
    pub model: TranslationModel<f64>,
    pub progress: Progress,
}

/// The regression head, the finetuned encoder if any, and training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionStage {
    pub head: RegressionHead<f64>,
    pub encoder: Option<Encoder<f64>>,
    pub progress: RegressionProgress<f64>,
}

/// Models of a run so far. Stages that are present are resumed rather than
/// re-initialised.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineState {
    pub translations: Vec<TranslationStage>,
    pub regression: Option<RegressionStage>,
}

/// Observers of training progress; returning an error stops the run.
pub trait PipelineHooks {
    fn translation_epoch(&mut self, _stage: usize, _model: &TranslationModel<f64>, _progress: &Progress) -> Result<(), ModelError> {
        Ok(())
    }

    fn regression_epoch(
        &mut self,
        _head: &RegressionHead<f64>,
        _encoder: Option<&Encoder<f64>>,
        _progress: &RegressionProgress<f64>,
    ) -> Result<(), ModelError> {
        Ok(())
    }
}

pub struct NoHooks;

impl PipelineHooks for NoHooks {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub source: String,
    pub target: String,
    pub model: TranslationConfig,
    pub curve: Vec<EpochLoss>,
    pub test_loss: Option<f64>,
    /// Fraction of target tokens matched by beam decoding (text targets only).
    pub test_token_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub model: RegressionConfig,
    pub finetuned_encoder: bool,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: Option<usize>,
    /// MAE of the retained head on each split.
    pub train_mae: f64,
    pub validation_mae: Option<f64>,
    pub test_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub score: f64,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub spec: PipelineSpec,
    /// Segments in (train, validation, test).
    pub split_sizes: [usize; 3],
    pub translation_stages: Vec<StageSummary>,
    pub regression: RegressionSummary,
    pub evaluation: EvaluationReport,
    pub predictions: Vec<Prediction>,
}

fn require(spec: &PipelineSpec, kinds: &[PipelineKind], op: &str) -> Result<(), PipelineError> {
    if kinds.contains(&spec.kind) {
        Ok(())
    } else {
        Err(PipelineError::InvalidSpec {
            id: spec.id.clone(),
            reason: format!("{op} cannot run kind {}", spec.kind.name()),
        })
    }
}

/// Translation then regression on the encoder states.
pub fn run_bimodal(
    spec: &PipelineSpec,
    dataset: &Dataset,
    config: &PipelineConfig,
    state: &mut PipelineState,
    hooks: &mut dyn PipelineHooks,
) -> Result<PipelineResult, PipelineError> {
    use PipelineKind::*;
    require(spec, &[BimodalTranslate, ConcatToOne, OneToConcat, ConcatToConcat], "run_bimodal")?;
    execute(spec, dataset, config, state, hooks)
}

/// X to Y, then embed(X,Y) to Z, then regression on the second encoder's states.
pub fn run_hierarchical(
    spec: &PipelineSpec,
    dataset: &Dataset,
    config: &PipelineConfig,
    state: &mut PipelineState,
    hooks: &mut dyn PipelineHooks,
) -> Result<PipelineResult, PipelineError> {
    require(spec, &[PipelineKind::Hierarchical], "run_hierarchical")?;
    execute(spec, dataset, config, state, hooks)
}

/// Regression directly on raw (possibly concatenated) features.
pub fn run_baseline(
    spec: &PipelineSpec,
    dataset: &Dataset,
    config: &PipelineConfig,
    state: &mut PipelineState,
    hooks: &mut dyn PipelineHooks,
) -> Result<PipelineResult, PipelineError> {
    require(spec, &[PipelineKind::UnimodalBaseline, PipelineKind::ConcatBaseline], "run_baseline")?;
    execute(spec, dataset, config, state, hooks)
}

/// Dispatches on the pipeline kind.
pub fn run_pipeline(
    spec: &PipelineSpec,
    dataset: &Dataset,
    config: &PipelineConfig,
    state: &mut PipelineState,
    hooks: &mut dyn PipelineHooks,
) -> Result<PipelineResult, PipelineError> {
    match spec.kind.translation_stages() {
        0 => run_baseline(spec, dataset, config, state, hooks),
        2 => run_hierarchical(spec, dataset, config, state, hooks),
        _ => run_bimodal(spec, dataset, config, state, hooks),
    }
}

type Splits<T> = [Vec<T>; 3];

fn encode_all(model: &TranslationModel<f64>, inputs: &Splits<DenseArray<f64>>, tag: &str) -> Result<Splits<DenseArray<f64>>, ModelError> {
    let enc = |xs: &Vec<DenseArray<f64>>| -> Result<Vec<DenseArray<f64>>, ModelError> {
        xs.iter().map(|x| Ok(model.encode(x, tag)?.states)).collect()
    };
    Ok([enc(&inputs[0])?, enc(&inputs[1])?, enc(&inputs[2])?])
}

fn token_accuracy(model: &TranslationModel<f64>, samples: &[TranslationSample<f64>], width: usize) -> Result<Option<f64>, ModelError> {
    if samples.is_empty() || width == 0 {
        return Ok(None);
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let TargetSeq::Tokens(target) = &s.target else {
            return Ok(None);
        };
        let e = model.encode(&s.source, "eval")?;
        let best = beam_search(&e, model, BeamConfig::new(width, default_max_len(s.source.rows())))?;
        hit += target.iter().zip(&best.tokens).filter(|(a, b)| a == b).count();
        total += target.len();
    }
    Ok(Some(hit as f64 / total as f64))
}

fn execute(
    spec: &PipelineSpec,
    dataset: &Dataset,
    config: &PipelineConfig,
    state: &mut PipelineState,
    hooks: &mut dyn PipelineHooks,
) -> Result<PipelineResult, PipelineError> {
    let header = dataset.header.as_ref().ok_or(PipelineError::NoHeader)?;
    let plan = plan(spec, &header.dims, header.vocab_size, config)?;
    if state.translations.len() > plan.stages.len() {
        return Err(PipelineError::State(format!(
            "{} translation stages saved, spec has {}",
            state.translations.len(),
            plan.stages.len()
        )));
    }
    let split = split_dataset(dataset, config.split.train_fraction, config.split.validation_fraction, config.seed)?;
    let parts: Splits<&AlignedSegment> = split.select(dataset);

    let first_source = match &spec.source {
        ModalityExpr::Embed(x, _) => ModalityExpr::Single(*x),
        e => e.clone(),
    };
    let raw = |segs: &Vec<&AlignedSegment>| -> Result<Vec<DenseArray<f64>>, PipelineError> {
        segs.iter().map(|s| source_features(s, &first_source)).collect()
    };
    let mut inputs: Splits<DenseArray<f64>> = [raw(&parts[0])?, raw(&parts[1])?, raw(&parts[2])?];
    let mut finetune_from: Option<(Encoder<f64>, Splits<DenseArray<f64>>)> = None;
    let mut summaries = Vec::new();

    for (k, (stage_cfg, (src, tgt))) in plan.stages.iter().zip(spec.stages()).enumerate() {
        let samples = |i: usize| -> Result<Vec<TranslationSample<f64>>, PipelineError> {
            parts[i]
                .iter()
                .zip(&inputs[i])
                .map(|(seg, x)| {
                    Ok(TranslationSample {
                        id: seg.id.clone(),
                        source: x.clone(),
                        target: target_sequence(seg, &tgt)?,
                    })
                })
                .collect()
        };
        let (train, validation, test) = (samples(0)?, samples(1)?, samples(2)?);
        if state.translations.len() == k {
            let model = TranslationModel::new(*stage_cfg, &mut stream_rng(config.seed, "init-translation", k as u64))?;
            state.translations.push(TranslationStage {
                model,
                progress: Progress::default(),
            });
        }
        let stage = &mut state.translations[k];
        if stage.model.config() != stage_cfg {
            return Err(PipelineError::State(format!("translation stage {k} topology differs from the plan")));
        }
        let train_cfg = config.translation.train(config.seed);
        let stream = format!("translation-{k}");
        train_translation(
            &mut stage.model,
            &train,
            &validation,
            &train_cfg,
            &stream,
            &mut stage.progress,
            &mut |m, p| hooks.translation_epoch(k, m, p),
        )?;
        let model = &stage.model;
        summaries.push(StageSummary {
            source: src.to_string(),
            target: tgt.to_string(),
            model: *stage_cfg,
            curve: stage.progress.curve.clone(),
            test_loss: translation_eval(model, &test)?,
            test_token_accuracy: token_accuracy(model, &test, config.beam_width)?,
        });
        let encoded = encode_all(model, &inputs, &src.to_string())?;
        let previous = std::mem::replace(&mut inputs, encoded);
        if k + 1 == plan.stages.len() && config.finetune_encoder {
            finetune_from = Some((model.encoder().clone(), previous));
        }
    }

    let finetuned = finetune_from.is_some();
    let reg_inputs = match &finetune_from {
        Some((_, raw)) => raw,
        None => &inputs,
    };
    let reg_samples = |i: usize| -> Vec<RegressionSample<f64>> {
        parts[i]
            .iter()
            .zip(&reg_inputs[i])
            .map(|(seg, x)| RegressionSample {
                id: seg.id.clone(),
                input: x.clone(),
                label: seg.label,
            })
            .collect()
    };
    let (train, validation, test) = (reg_samples(0), reg_samples(1), reg_samples(2));
    if state.regression.is_none() {
        state.regression = Some(RegressionStage {
            head: RegressionHead::new(plan.regression, &mut stream_rng(config.seed, "init-regression", 0))?,
            encoder: finetune_from.map(|(e, _)| e),
            progress: RegressionProgress::default(),
        });
    }
    let reg = state.regression.as_mut().expect("initialised above");
    if reg.head.config() != &plan.regression || reg.encoder.is_some() != finetuned {
        return Err(PipelineError::State("regression stage differs from the plan".into()));
    }
    train_regressor(
        &mut reg.head,
        reg.encoder.as_mut(),
        &train,
        &validation,
        &config.regression.train(config.seed),
        "regression",
        &mut reg.progress,
        &mut |h, e, p| hooks.regression_epoch(h, e, p),
    )?;

    let enc = reg.encoder.as_ref();
    let predictions = test
        .iter()
        .map(|s| {
            Ok(Prediction {
                id: s.id.clone(),
                score: predict_with(&s.input, &reg.head, enc)?,
                label: s.label,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let labels: Vec<f64> = predictions.iter().map(|p| p.label).collect();
    let evaluation = evaluate(&scores, &labels)?;
    Ok(PipelineResult {
        spec: spec.clone(),
        split_sizes: [train.len(), validation.len(), test.len()],
        translation_stages: summaries,
        regression: RegressionSummary {
            model: plan.regression,
            finetuned_encoder: finetuned,
            curve: reg.progress.curve.clone(),
            best_epoch: reg.progress.best.as_ref().map(|b| b.epoch),
            train_mae: evaluate_mae(&reg.head, enc, &train)?.expect("non-empty"),
            validation_mae: evaluate_mae(&reg.head, enc, &validation)?,
            test_mae: evaluation.mae,
        },
        evaluation,
        predictions,
    })
}
