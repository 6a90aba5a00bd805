//! Encoder-decoder translation between modality sequences.
//!
//! The encoder's top-layer states form the representation handed to later
//! phases; its final state initializes every decoder layer. The decoder is
//! teacher-forced during training and may attend over the encoder states
//! with a bilinear score `s_i = h_decᵀ · W · h_enc,i`.

mod beam;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, DenseArray, Graph, NodeId, ParamId, ParamStore};
use crate::error::ModelError;
use crate::recurrent::{
    init_uniform, rows_of, sequence_constants, weighted_sum, CellKind, LayerState, Linear, RecurrentConfig,
    RecurrentStack,
};
use crate::scalar::Scalar;

pub use beam::{beam_search, default_max_len, greedy_decode, BeamConfig, BeamHypothesis};

/// Reserved start-of-sequence token of discrete decoders.
pub const START_TOKEN: usize = 0;
/// Reserved end-of-sequence token of discrete decoders.
pub const END_TOKEN: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetKind {
    /// Token ids in `0..vocab`, including the reserved start and end tokens.
    Discrete { vocab: usize },
    /// Real vectors of length `dim`.
    Continuous { dim: usize },
}

impl TargetKind {
    /// Size of the decoder input and output.
    pub fn width(&self) -> usize {
        match *self {
            TargetKind::Discrete { vocab } => vocab,
            TargetKind::Continuous { dim } => dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TargetKind::Discrete { .. } => "discrete",
            TargetKind::Continuous { .. } => "continuous",
        }
    }
}

/// A decoding target: token ids or a `[T, dim]` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetSeq<S> {
    Tokens(Vec<usize>),
    Vectors(DenseArray<S>),
}

impl<S: Scalar> TargetSeq<S> {
    pub fn len(&self) -> usize {
        match self {
            TargetSeq::Tokens(t) => t.len(),
            TargetSeq::Vectors(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, kind: TargetKind) -> Result<(), ModelError> {
        match (self, kind) {
            (TargetSeq::Tokens(tokens), TargetKind::Discrete { vocab }) => {
                if tokens.is_empty() {
                    return Err(ModelError::EmptySequence);
                }
                if let Some(&token) = tokens.iter().find(|&&t| t >= vocab) {
                    return Err(ModelError::TokenOutOfRange { token, vocab });
                }
                Ok(())
            }
            (TargetSeq::Vectors(v), TargetKind::Continuous { dim }) => {
                if v.cols() != dim {
                    return Err(ModelError::DimMismatch {
                        what: "target feature dimension",
                        expected: dim,
                        got: v.cols(),
                    });
                }
                Ok(())
            }
            (_, kind) => Err(ModelError::WrongTargetKind { expected: kind.name() }),
        }
    }
}

/// Topology of a translation model; enough to rebuild it from a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationConfig {
    pub source_dim: usize,
    pub target: TargetKind,
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub attention: bool,
}

/// Encoder states handed between phases.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRepresentation<S> {
    /// `[T, D]` top-layer hidden states.
    pub states: DenseArray<S>,
    /// `h_N`, the last row of `states`.
    pub final_state: Vec<S>,
    /// Modality expression that produced the representation.
    pub source_tag: String,
}

impl<S: Scalar> EncodedRepresentation<S> {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Recurrent encoder with its own parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<S> {
    stack: RecurrentStack,
    store: ParamStore<S>,
}

/// Encoder nodes inside a graph.
#[derive(Clone, Debug)]
pub struct EncodedNodes {
    pub states: Vec<NodeId>,
    pub final_state: NodeId,
}

impl<S: Scalar> Encoder<S> {
    pub fn new<R: Rng>(config: RecurrentConfig, rng: &mut R) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let stack = RecurrentStack::new(config, &mut store, "encoder", rng)?;
        Ok(Self { stack, store })
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

    pub fn input_dim(&self) -> usize {
        self.stack.config().input_dim
    }

    pub fn hidden(&self) -> usize {
        self.stack.hidden()
    }

    pub(crate) fn check_input(&self, x: &DenseArray<S>) -> Result<(), ModelError> {
        if x.rows() == 0 {
            return Err(ModelError::EmptySequence);
        }
        if x.cols() != self.input_dim() {
            return Err(ModelError::DimMismatch {
                what: "encoder input dimension",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Adds the encoder over `inputs` to `g`.
    pub fn build(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        inputs: &[NodeId],
    ) -> Result<EncodedNodes, ModelError> {
        let states = self.stack.forward(g, bound, inputs, None)?.top();
        let final_state = *states.last().expect("non-empty");
        Ok(EncodedNodes { states, final_state })
    }

    /// Encodes a `[T, d]` sequence.
    pub fn encode(&self, x: &DenseArray<S>, source_tag: &str) -> Result<EncodedRepresentation<S>, ModelError> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let inputs = sequence_constants(&mut g, x);
        let nodes = self.build(&mut g, &bound, &inputs)?;
        g.forward()?;
        let states = rows_of(&g, &nodes.states);
        let final_state = g.v(nodes.final_state).values().to_vec();
        Ok(EncodedRepresentation {
            states,
            final_state,
            source_tag: source_tag.to_string(),
        })
    }
}

/// Output of one decoder step inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    /// Logits `[V, 1]` or predicted features `[dim, 1]`.
    pub output: NodeId,
    /// Attention weights `[1, T_src]` when attention is enabled.
    pub attention: Option<NodeId>,
    pub top: NodeId,
}

/// Decoder stack, optional bilinear attention and output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<S> {
    stack: RecurrentStack,
    attention: Option<ParamId>,
    head: Linear,
    target: TargetKind,
    store: ParamStore<S>,
}

/// Per-sequence decoder context: encoder states plus precomputed attention keys.
pub struct DecoderContext {
    enc_states: Vec<NodeId>,
    keys: Vec<NodeId>,
    init: Vec<LayerState>,
}

impl<S: Scalar> Decoder<S> {
    fn new<R: Rng>(config: &TranslationConfig, rng: &mut R) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let width = config.target.width();
        if width == 0 {
            return Err(ModelError::InvalidConfig("target width must be >= 1".into()));
        }
        if let TargetKind::Discrete { vocab } = config.target {
            if vocab <= END_TOKEN {
                return Err(ModelError::InvalidConfig(format!(
                    "discrete vocabulary of {vocab} cannot hold the start and end tokens"
                )));
            }
        }
        let stack = RecurrentStack::new(
            RecurrentConfig::new(config.cell, config.layers, config.hidden, width),
            &mut store,
            "decoder",
            rng,
        )?;
        let attention = config
            .attention
            .then(|| store.add("decoder.w_attn", init_uniform(config.hidden, config.hidden, rng)));
        let head_in = if config.attention { 2 * config.hidden } else { config.hidden };
        let head = Linear::new(head_in, width, &mut store, "decoder.out", rng);
        Ok(Self {
            stack,
            attention,
            head,
            target: config.target,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn target(&self) -> TargetKind {
        self.target
    }

    /// Builds the per-sequence context; every decoder layer starts from `final_state`.
    pub fn context(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        enc_states: &[NodeId],
        final_state: NodeId,
    ) -> DecoderContext {
        let keys = match self.attention {
            Some(w) => enc_states.iter().map(|&h| g.matmul(bound[w], h)).collect(),
            None => Vec::new(),
        };
        let d = self.stack.hidden();
        let init = (0..self.stack.layers().len())
            .map(|_| LayerState {
                h: final_state,
                c: (self.stack.config().cell == CellKind::Lstm).then(|| g.constant(DenseArray::zeros(d, 1))),
            })
            .collect();
        DecoderContext {
            enc_states: enc_states.to_vec(),
            keys,
            init,
        }
    }

    /// One decoder step from `state` consuming `input`.
    pub fn step(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        ctx: &DecoderContext,
        state: &[LayerState],
        input: NodeId,
    ) -> (Vec<LayerState>, StepNodes) {
        let next = self.stack.step(g, bound, input, state);
        let top = next.last().expect("at least one layer").h;
        let (head_in, attention) = if self.attention.is_some() {
            let scores: Vec<NodeId> = ctx
                .keys
                .iter()
                .map(|&k| {
                    let prod = g.mul(top, k);
                    g.sum(prod)
                })
                .collect();
            let row = g.concat(&scores, 1);
            let weights = g.softmax(row);
            let context = weighted_sum(g, weights, &ctx.enc_states);
            (g.concat(&[top, context], 0), Some(weights))
        } else {
            (top, None)
        };
        let output = self.head.apply(g, bound, head_in);
        (next, StepNodes { output, attention, top })
    }

    /// Decoder input node for the start position.
    pub fn start_input(&self, g: &mut Graph<S>) -> NodeId {
        match self.target {
            TargetKind::Discrete { vocab } => g.constant(one_hot(START_TOKEN, vocab)),
            TargetKind::Continuous { dim } => g.constant(DenseArray::zeros(dim, 1)),
        }
    }

    /// Teacher-forced inputs: start, then the target shifted right by one.
    fn teacher_inputs(&self, g: &mut Graph<S>, target: &TargetSeq<S>) -> Vec<NodeId> {
        let mut inputs = vec![self.start_input(g)];
        let n = target.len();
        match target {
            TargetSeq::Tokens(tokens) => {
                let vocab = self.target.width();
                inputs.extend(tokens[..n - 1].iter().map(|&t| g.constant(one_hot(t, vocab))));
            }
            TargetSeq::Vectors(v) => {
                inputs.extend((0..n - 1).map(|t| g.constant(v.row_as_column(t))));
            }
        }
        inputs
    }

    fn teacher_forced(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        enc_states: &[NodeId],
        final_state: NodeId,
        target: &TargetSeq<S>,
    ) -> Vec<StepNodes> {
        let ctx = self.context(g, bound, enc_states, final_state);
        let inputs = self.teacher_inputs(g, target);
        let mut state = ctx.init.clone();
        inputs
            .into_iter()
            .map(|x| {
                let (next, out) = self.step(g, bound, &ctx, &state, x);
                state = next;
                out
            })
            .collect()
    }
}

pub(crate) fn one_hot<S: Scalar>(index: usize, size: usize) -> DenseArray<S> {
    let mut v = DenseArray::zeros(size, 1);
    v.values_mut()[index] = S::one();
    v
}

/// Builds the mean translation loss over per-step outputs.
///
/// Discrete targets use softmax cross-entropy, continuous targets the mean
/// over steps and dimensions of the squared error.
pub fn loss_node<S: Scalar>(g: &mut Graph<S>, outputs: &[NodeId], target: &TargetSeq<S>, vocab: usize) -> NodeId {
    match target {
        TargetSeq::Tokens(tokens) => {
            let per_step: Vec<NodeId> = outputs
                .iter()
                .zip(tokens)
                .map(|(&logits, &tok)| {
                    let lp = g.log_softmax(logits);
                    let mut pick = one_hot::<S>(tok, vocab);
                    pick.scale(-S::one());
                    let pick = g.constant(pick);
                    let nll = g.mul(lp, pick);
                    g.sum(nll)
                })
                .collect();
            let row = g.concat(&per_step, 1);
            g.mean(row)
        }
        TargetSeq::Vectors(v) => {
            let dim = v.cols();
            let sq: Vec<NodeId> = outputs
                .iter()
                .enumerate()
                .map(|(t, &pred)| {
                    let tgt = g.constant(v.row_as_column(t));
                    let diff = g.sub(pred, tgt, (dim, 1));
                    g.mul(diff, diff)
                })
                .collect();
            let all = g.concat(&sq, 1);
            g.mean(all)
        }
    }
}

/// Per-step decoder outputs of a teacher-forced pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutputs<S> {
    /// Logits `[V, 1]` (discrete) or predictions `[dim, 1]` (continuous).
    pub outputs: Vec<DenseArray<S>>,
    /// Attention weights over encoder positions, one row per step.
    pub attention: Option<Vec<Vec<S>>>,
}

/// Encoder and decoder for one translation direction.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationModel<S> {
    config: TranslationConfig,
    encoder: Encoder<S>,
    decoder: Decoder<S>,
}

/// A translation loss graph ready for `backward`.
pub struct LossGraph<S> {
    pub graph: Graph<S>,
    pub encoder: BoundParams,
    pub decoder: BoundParams,
    pub loss: NodeId,
}

impl<S: Scalar> TranslationModel<S> {
    pub fn new<R: Rng>(config: TranslationConfig, rng: &mut R) -> Result<Self, ModelError> {
        let encoder = Encoder::new(
            RecurrentConfig::new(config.cell, config.layers, config.hidden, config.source_dim),
            rng,
        )?;
        let decoder = Decoder::new(&config, rng)?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &TranslationConfig {
        &self.config
    }

    pub fn target_kind(&self) -> TargetKind {
        self.config.target
    }

    pub fn encoder(&self) -> &Encoder<S> {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Encoder<S> {
        &mut self.encoder
    }

    pub fn decoder(&self) -> &Decoder<S> {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Decoder<S> {
        &mut self.decoder
    }

    /// Mutable access to both parameter stores at once.
    pub fn stores_mut(&mut self) -> (&mut ParamStore<S>, &mut ParamStore<S>) {
        (&mut self.encoder.store, &mut self.decoder.store)
    }

    pub fn encode(&self, x: &DenseArray<S>, source_tag: &str) -> Result<EncodedRepresentation<S>, ModelError> {
        self.encoder.encode(x, source_tag)
    }

    fn check_representation(&self, e: &EncodedRepresentation<S>) -> Result<(), ModelError> {
        if e.states.rows() == 0 {
            return Err(ModelError::EmptySequence);
        }
        if e.states.cols() != self.config.hidden || e.final_state.len() != self.config.hidden {
            return Err(ModelError::DimMismatch {
                what: "representation width",
                expected: self.config.hidden,
                got: e.states.cols(),
            });
        }
        Ok(())
    }

    /// Adds a representation to `g` as constants.
    pub(crate) fn representation_nodes(&self, g: &mut Graph<S>, e: &EncodedRepresentation<S>) -> (Vec<NodeId>, NodeId) {
        let states = sequence_constants(g, &e.states);
        let final_state = g.constant(DenseArray::column(e.final_state.clone()));
        (states, final_state)
    }

    /// Teacher-forced decoding conditioned on `e`.
    pub fn decode_teacher_forced(
        &self,
        e: &EncodedRepresentation<S>,
        target: &TargetSeq<S>,
    ) -> Result<DecoderOutputs<S>, ModelError> {
        self.check_representation(e)?;
        target.check(self.config.target)?;
        if target.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut g = Graph::new();
        let bound = self.decoder.store.bind_frozen(&mut g);
        let (states, final_state) = self.representation_nodes(&mut g, e);
        let steps = self.decoder.teacher_forced(&mut g, &bound, &states, final_state, target);
        g.forward()?;
        Ok(DecoderOutputs {
            outputs: steps.iter().map(|s| g.v(s.output).clone()).collect(),
            attention: self.config.attention.then(|| {
                steps
                    .iter()
                    .map(|s| g.v(s.attention.expect("attention enabled")).values().to_vec())
                    .collect()
            }),
        })
    }

    /// End-to-end loss graph `encode → teacher-forced decode → loss`.
    ///
    /// With `inputs_as_leaves` the source rows become `Input` leaves so
    /// gradients with respect to the data can be checked.
    pub fn loss_graph(
        &self,
        source: &DenseArray<S>,
        target: &TargetSeq<S>,
        inputs_as_leaves: bool,
    ) -> Result<LossGraph<S>, ModelError> {
        self.encoder.check_input(source)?;
        target.check(self.config.target)?;
        if target.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut g = Graph::new();
        let enc_bound = self.encoder.store.bind(&mut g);
        let dec_bound = self.decoder.store.bind(&mut g);
        let inputs: Vec<NodeId> = if inputs_as_leaves {
            (0..source.rows()).map(|t| g.input(source.row_as_column(t))).collect()
        } else {
            sequence_constants(&mut g, source)
        };
        let enc = self.encoder.build(&mut g, &enc_bound, &inputs)?;
        let steps = self
            .decoder
            .teacher_forced(&mut g, &dec_bound, &enc.states, enc.final_state, target);
        let outputs: Vec<NodeId> = steps.iter().map(|s| s.output).collect();
        let loss = loss_node(&mut g, &outputs, target, self.config.target.width());
        Ok(LossGraph {
            graph: g,
            encoder: enc_bound,
            decoder: dec_bound,
            loss,
        })
    }

    /// Autoregressive rollout for continuous targets, feeding each
    /// prediction back as the next input.
    pub fn decode_continuous_greedy(
        &self,
        e: &EncodedRepresentation<S>,
        length: usize,
    ) -> Result<DenseArray<S>, ModelError> {
        let TargetKind::Continuous { dim } = self.config.target else {
            return Err(ModelError::WrongTargetKind { expected: "continuous" });
        };
        if length == 0 {
            return Err(ModelError::EmptySequence);
        }
        self.check_representation(e)?;
        let mut g = Graph::new();
        let bound = self.decoder.store.bind_frozen(&mut g);
        let (states, final_state) = self.representation_nodes(&mut g, e);
        let ctx = self.decoder.context(&mut g, &bound, &states, final_state);
        let mut state = ctx.init.clone();
        let mut input = self.decoder.start_input(&mut g);
        let mut rows = Vec::with_capacity(length * dim);
        for _ in 0..length {
            let (next, out) = self.decoder.step(&mut g, &bound, &ctx, &state, input);
            g.forward()?;
            rows.extend_from_slice(g.v(out.output).values());
            state = next;
            input = out.output;
        }
        Ok(DenseArray::matrix(length, dim, rows))
    }
}

/// Mean translation loss of precomputed per-step outputs.
pub fn translation_loss<S: Scalar>(predictions: &[DenseArray<S>], target: &TargetSeq<S>) -> Result<S, ModelError> {
    if predictions.len() != target.len() {
        return Err(ModelError::DimMismatch {
            what: "prediction length",
            expected: target.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let width = predictions[0].len();
    match target {
        TargetSeq::Tokens(tokens) => {
            if let Some(&token) = tokens.iter().find(|&&t| t >= width) {
                return Err(ModelError::TokenOutOfRange { token, vocab: width });
            }
        }
        TargetSeq::Vectors(v) => {
            if v.cols() != width {
                return Err(ModelError::DimMismatch {
                    what: "target feature dimension",
                    expected: width,
                    got: v.cols(),
                });
            }
        }
    }
    if let Some(p) = predictions.iter().find(|p| p.len() != width) {
        return Err(ModelError::DimMismatch {
            what: "prediction width",
            expected: width,
            got: p.len(),
        });
    }
    let mut g = Graph::new();
    let outputs: Vec<NodeId> = predictions
        .iter()
        .map(|p| g.constant(DenseArray::column(p.values().to_vec())))
        .collect();
    let loss = loss_node(&mut g, &outputs, target, width);
    g.forward()?;
    Ok(g.v(loss).item().expect("scalar loss"))
}
