use std::cmp::Ordering;

use crate::autodiff::{DenseArray, Graph, NodeId};
use crate::error::ModelError;
use crate::recurrent::LayerState;
use crate::scalar::Scalar;

use super::{one_hot, EncodedRepresentation, TargetKind, TranslationModel, END_TOKEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Token that completes a hypothesis; `None` decodes exactly `max_len` tokens.
    pub end_token: Option<usize>,
}

impl BeamConfig {
    pub fn new(width: usize, max_len: usize) -> Self {
        Self {
            width,
            max_len,
            end_token: Some(END_TOKEN),
        }
    }
}

/// Default decode length: 1.5 × the source length, rounded up.
pub fn default_max_len(source_len: usize) -> usize {
    (3 * source_len).div_ceil(2)
}

/// A (partial or completed) decoded token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis<S> {
    pub tokens: Vec<usize>,
    /// Sum of the per-step log-probabilities.
    pub log_prob: S,
    /// Whether the sequence ended with the end token.
    pub finished: bool,
    /// Hidden state of every decoder layer after the last token, `[D, 1]` each.
    pub state: Vec<DenseArray<S>>,
}

struct Live<S> {
    tokens: Vec<usize>,
    log_prob: S,
    state: Vec<LayerState>,
}

/// Descending log-probability, ties broken towards the lexicographically
/// smaller token sequence.
fn rank<S: Scalar>(a: (&[usize], S), b: (&[usize], S)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// Beam search over a discrete decoder.
///
/// Every live hypothesis is expanded over the full vocabulary and the best
/// `width` candidates survive; candidates ending in the end token are set
/// aside as completed. The best completed or length-capped hypothesis wins,
/// with the greedy decode as one more candidate.
pub fn beam_search<S: Scalar>(
    e: &EncodedRepresentation<S>,
    model: &TranslationModel<S>,
    config: BeamConfig,
) -> Result<BeamHypothesis<S>, ModelError> {
    let TargetKind::Discrete { vocab } = model.target_kind() else {
        return Err(ModelError::WrongTargetKind { expected: "discrete" });
    };
    if config.width == 0 || config.max_len == 0 {
        return Err(ModelError::InvalidConfig("beam width and max_len must be >= 1".into()));
    }
    model.check_representation(e)?;
    let decoder = model.decoder();
    let mut g = Graph::new();
    let bound = decoder.store().bind_frozen(&mut g);
    let (states, final_state) = model.representation_nodes(&mut g, e);
    let ctx = decoder.context(&mut g, &bound, &states, final_state);

    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: S::zero(),
        state: ctx.init.clone(),
    }];
    let mut finished: Vec<(Vec<usize>, S, Vec<LayerState>)> = Vec::new();
    let mut start: Option<NodeId> = None;

    for _ in 0..config.max_len {
        // Expand every live hypothesis by one step.
        let mut expansions = Vec::with_capacity(live.len());
        for hyp in &live {
            let input = match hyp.tokens.last() {
                Some(&t) => g.constant(one_hot(t, vocab)),
                None => *start.get_or_insert_with(|| decoder.start_input(&mut g)),
            };
            let (next, out) = decoder.step(&mut g, &bound, &ctx, &hyp.state, input);
            let lp = g.log_softmax(out.output);
            expansions.push((next, lp));
        }
        g.forward()?;

        let mut candidates: Vec<(usize, usize, S)> = Vec::with_capacity(live.len() * vocab);
        for (i, (hyp, (_, lp))) in live.iter().zip(&expansions).enumerate() {
            for (tok, &l) in g.v(*lp).values().iter().enumerate() {
                candidates.push((i, tok, hyp.log_prob + l));
            }
        }
        let seq = |c: &(usize, usize, S)| -> Vec<usize> {
            let mut t = live[c.0].tokens.clone();
            t.push(c.1);
            t
        };
        candidates.sort_by(|a, b| rank((&seq(a), a.2), (&seq(b), b.2)));
        candidates.truncate(config.width);

        let mut next_live = Vec::with_capacity(candidates.len());
        for c in &candidates {
            let tokens = seq(c);
            let state = expansions[c.0].0.clone();
            if Some(c.1) == config.end_token {
                finished.push((tokens, c.2, state));
            } else {
                next_live.push(Live {
                    tokens,
                    log_prob: c.2,
                    state,
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    let best = finished
        .into_iter()
        .map(|(t, lp, s)| (t, lp, s, true))
        .chain(live.into_iter().map(|h| (h.tokens, h.log_prob, h.state, false)))
        .min_by(|a, b| rank((&a.0, a.1), (&b.0, b.1)))
        .expect("at least one hypothesis survives");
    let beam = BeamHypothesis {
        tokens: best.0,
        log_prob: best.1,
        finished: best.3,
        state: best.2.iter().map(|s| g.v(s.h).clone()).collect(),
    };
    // The greedy path can fall out of the beam; it stays a candidate.
    let greedy = greedy_decode(e, model, config.max_len, config.end_token)?;
    Ok(match rank((&greedy.tokens, greedy.log_prob), (&beam.tokens, beam.log_prob)) {
        Ordering::Less => greedy,
        _ => beam,
    })
}

/// Step-wise argmax decoding (first maximal token on ties).
pub fn greedy_decode<S: Scalar>(
    e: &EncodedRepresentation<S>,
    model: &TranslationModel<S>,
    max_len: usize,
    end_token: Option<usize>,
) -> Result<BeamHypothesis<S>, ModelError> {
    let TargetKind::Discrete { vocab } = model.target_kind() else {
        return Err(ModelError::WrongTargetKind { expected: "discrete" });
    };
    if max_len == 0 {
        return Err(ModelError::InvalidConfig("max_len must be >= 1".into()));
    }
    model.check_representation(e)?;
    let decoder = model.decoder();
    let mut g = Graph::new();
    let bound = decoder.store().bind_frozen(&mut g);
    let (states, final_state) = model.representation_nodes(&mut g, e);
    let ctx = decoder.context(&mut g, &bound, &states, final_state);
    let mut state = ctx.init.clone();
    let mut input = decoder.start_input(&mut g);
    let mut tokens = Vec::new();
    let mut log_prob = S::zero();
    let mut finished = false;
    for _ in 0..max_len {
        let (next, out) = decoder.step(&mut g, &bound, &ctx, &state, input);
        let lp = g.log_softmax(out.output);
        g.forward()?;
        let (tok, l) = g
            .v(lp)
            .values()
            .iter()
            .copied()
            .enumerate()
            .fold((0, S::neg_infinity()), |best, (i, l)| if l > best.1 { (i, l) } else { best });
        tokens.push(tok);
        log_prob = log_prob + l;
        state = next;
        if Some(tok) == end_token {
            finished = true;
            break;
        }
        input = g.constant(one_hot(tok, vocab));
    }
    Ok(BeamHypothesis {
        tokens,
        log_prob,
        finished,
        state: state.iter().map(|s| g.v(s.h).clone()).collect(),
    })
}
