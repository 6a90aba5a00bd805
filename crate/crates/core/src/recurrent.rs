//! LSTM and GRU cells, stacked recurrence, and pooling over the top layer.
//!
//! Vectors are `[n, 1]` columns. Layer 1 reads the input features, layer
//! `k > 1` reads layer `k - 1` at the same step; initial states are zero
//! unless the caller passes its own.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, DenseArray, Graph, NodeId, ParamId, ParamStore};
use crate::error::ModelError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
}

impl CellKind {
    /// Number of gate blocks stacked in the input and recurrent weights.
    fn blocks(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(format!("unknown cell kind `{other}` (expected lstm or gru)")),
        }
    }
}

/// Topology of a recurrent stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
}

impl RecurrentConfig {
    pub fn new(cell: CellKind, layers: usize, hidden: usize, input_dim: usize) -> Self {
        Self {
            cell,
            layers,
            hidden,
            input_dim,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.hidden == 0 || self.input_dim == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "recurrent stack needs layers, hidden and input_dim >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Scaled-uniform initialization: `U(-1/√fan_in, 1/√fan_in)`.
pub fn init_uniform<S: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseArray<S> {
    let bound = 1.0 / (cols as f64).sqrt();
    DenseArray::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| S::from_f64_lossy(rng.gen_range(-bound..=bound)))
            .collect(),
    )
}

/// Weights of one recurrent layer.
///
/// Gate blocks are stacked row-wise: `i, f, g, o` for LSTM and `z, r, n`
/// for GRU. `w_x` is `[blocks·D, in]`, `w_h` is `[blocks·D, D]`, `b` is
/// `[blocks·D, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
}

/// Hidden (and, for LSTM, cell) state of one layer at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerState {
    pub h: NodeId,
    pub c: Option<NodeId>,
}

/// One LSTM step on graph nodes.
pub fn lstm_cell<S: Scalar>(
    g: &mut Graph<S>,
    bound: &BoundParams,
    layer: &LayerParams,
    hidden: usize,
    x: NodeId,
    prev: LayerState,
) -> LayerState {
    let d = hidden;
    let c_prev = prev.c.expect("lstm state carries a cell");
    let z = preactivation(g, bound, layer, x, prev.h);
    let i_pre = g.slice(z, 0, 0, d);
    let f_pre = g.slice(z, 0, d, 2 * d);
    let g_pre = g.slice(z, 0, 2 * d, 3 * d);
    let o_pre = g.slice(z, 0, 3 * d, 4 * d);
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(g_pre);
    let o = g.sigmoid(o_pre);
    let keep = g.mul(f, c_prev);
    let write = g.mul(i, cand);
    let c = g.add(keep, write);
    let tc = g.tanh(c);
    let h = g.mul(o, tc);
    LayerState { h, c: Some(c) }
}

/// One GRU step on graph nodes:
/// `h = (1 − z)⊙h_prev + z⊙tanh(W_xn x + W_hn (r⊙h_prev) + b_n)`.
pub fn gru_cell<S: Scalar>(
    g: &mut Graph<S>,
    bound: &BoundParams,
    layer: &LayerParams,
    hidden: usize,
    x: NodeId,
    prev: LayerState,
) -> LayerState {
    let d = hidden;
    let (w_x, w_h, b) = (bound[layer.w_x], bound[layer.w_h], bound[layer.b]);
    let xw = g.matmul(w_x, x);
    let w_h_zr = g.slice(w_h, 0, 0, 2 * d);
    let w_h_n = g.slice(w_h, 0, 2 * d, 3 * d);
    let hw = g.matmul(w_h_zr, prev.h);
    let xw_zr = g.slice(xw, 0, 0, 2 * d);
    let b_zr = g.slice(b, 0, 0, 2 * d);
    let zr_sum = g.add(xw_zr, hw);
    let zr_pre = g.add(zr_sum, b_zr);
    let zr = g.sigmoid(zr_pre);
    let z = g.slice(zr, 0, 0, d);
    let r = g.slice(zr, 0, d, 2 * d);
    let rh = g.mul(r, prev.h);
    let hn = g.matmul(w_h_n, rh);
    let xw_n = g.slice(xw, 0, 2 * d, 3 * d);
    let b_n = g.slice(b, 0, 2 * d, 3 * d);
    let n_sum = g.add(xw_n, hn);
    let n_pre = g.add(n_sum, b_n);
    let cand = g.tanh(n_pre);
    let one_minus_z = g.one_minus(z, (d, 1));
    let keep = g.mul(one_minus_z, prev.h);
    let write = g.mul(z, cand);
    let h = g.add(keep, write);
    LayerState { h, c: None }
}

fn preactivation<S: Scalar>(
    g: &mut Graph<S>,
    bound: &BoundParams,
    layer: &LayerParams,
    x: NodeId,
    h_prev: NodeId,
) -> NodeId {
    let xw = g.matmul(bound[layer.w_x], x);
    let hw = g.matmul(bound[layer.w_h], h_prev);
    let s = g.add(xw, hw);
    g.add(s, bound[layer.b])
}

/// States of every layer at every step, as graph nodes (`[layer][step]`).
#[derive(Clone, Debug)]
pub struct StackStates {
    pub layers: Vec<Vec<LayerState>>,
}

impl StackStates {
    /// Top-layer hidden nodes `h^K_1..h^K_T`.
    pub fn top(&self) -> Vec<NodeId> {
        self.layers
            .last()
            .map(|l| l.iter().map(|s| s.h).collect())
            .unwrap_or_default()
    }

    /// Final state of every layer.
    pub fn last(&self) -> Vec<LayerState> {
        self.layers
            .iter()
            .map(|l| *l.last().expect("non-empty sequence"))
            .collect()
    }
}

/// Layer structure of a stacked recurrent network. The tensors live in a
/// [`ParamStore`] owned by the enclosing model.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentStack {
    config: RecurrentConfig,
    layers: Vec<LayerParams>,
}

impl RecurrentStack {
    /// Registers `prefix.l{k}.{w_x,w_h,b}` in `store`.
    pub fn new<S: Scalar, R: Rng>(
        config: RecurrentConfig,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let rows = config.cell.blocks() * config.hidden;
        let layers = (0..config.layers)
            .map(|k| {
                let input_dim = if k == 0 { config.input_dim } else { config.hidden };
                LayerParams {
                    w_x: store.add(format!("{prefix}.l{k}.w_x"), init_uniform(rows, input_dim, rng)),
                    w_h: store.add(
                        format!("{prefix}.l{k}.w_h"),
                        init_uniform(rows, config.hidden, rng),
                    ),
                    b: store.add(format!("{prefix}.l{k}.b"), DenseArray::zeros(rows, 1)),
                    input_dim,
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &RecurrentConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Zero initial state for every layer.
    pub fn zero_state<S: Scalar>(&self, g: &mut Graph<S>) -> Vec<LayerState> {
        let d = self.config.hidden;
        (0..self.config.layers)
            .map(|_| LayerState {
                h: g.constant(DenseArray::zeros(d, 1)),
                c: (self.config.cell == CellKind::Lstm).then(|| g.constant(DenseArray::zeros(d, 1))),
            })
            .collect()
    }

    /// Advances every layer by one step.
    pub fn step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        x: NodeId,
        prev: &[LayerState],
    ) -> Vec<LayerState> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &state) in self.layers.iter().zip(prev) {
            let s = match self.config.cell {
                CellKind::Lstm => lstm_cell(g, bound, layer, self.config.hidden, input, state),
                CellKind::Gru => gru_cell(g, bound, layer, self.config.hidden, input, state),
            };
            input = s.h;
            next.push(s);
        }
        next
    }

    /// Runs the stack over `inputs` from `init` (zero when `None`).
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        inputs: &[NodeId],
        init: Option<Vec<LayerState>>,
    ) -> Result<StackStates, ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut state = init.unwrap_or_else(|| self.zero_state(g));
        let mut layers: Vec<Vec<LayerState>> = vec![Vec::with_capacity(inputs.len()); self.layers.len()];
        for &x in inputs {
            state = self.step(g, bound, x, &state);
            for (k, s) in state.iter().enumerate() {
                layers[k].push(*s);
            }
        }
        Ok(StackStates { layers })
    }
}

/// Values of every hidden (and cell) state after a stacked forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<S> {
    /// `[T, D]` hidden states per layer.
    pub hidden: Vec<DenseArray<S>>,
    /// `[T, D]` cell states per layer (LSTM only).
    pub cells: Option<Vec<DenseArray<S>>>,
}

impl<S: Scalar> HiddenStates<S> {
    pub fn top(&self) -> &DenseArray<S> {
        self.hidden.last().expect("at least one layer")
    }
}

/// Adds each row of a `[T, d]` sequence to the graph as a constant column.
pub fn sequence_constants<S: Scalar>(g: &mut Graph<S>, seq: &DenseArray<S>) -> Vec<NodeId> {
    (0..seq.rows()).map(|t| g.constant(seq.row_as_column(t))).collect()
}

/// Stacks `[D, 1]` node values into a `[T, D]` array.
pub fn rows_of<S: Scalar>(g: &Graph<S>, nodes: &[NodeId]) -> DenseArray<S> {
    let d = g.v(nodes[0]).len();
    let values = nodes.iter().flat_map(|&n| g.v(n).values().iter().copied()).collect();
    DenseArray::matrix(nodes.len(), d, values)
}

/// Runs the stack over a `[T, d]` sequence and returns every state value.
pub fn stacked_forward<S: Scalar>(
    x: &DenseArray<S>,
    stack: &RecurrentStack,
    store: &ParamStore<S>,
) -> Result<HiddenStates<S>, ModelError> {
    if x.rows() == 0 {
        return Err(ModelError::EmptySequence);
    }
    if x.cols() != stack.config.input_dim {
        return Err(ModelError::DimMismatch {
            what: "input feature dimension",
            expected: stack.config.input_dim,
            got: x.cols(),
        });
    }
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let inputs = sequence_constants(&mut g, x);
    let states = stack.forward(&mut g, &bound, &inputs, None)?;
    g.forward()?;
    let hidden = states
        .layers
        .iter()
        .map(|l| rows_of(&g, &l.iter().map(|s| s.h).collect::<Vec<_>>()))
        .collect();
    let cells = (stack.config.cell == CellKind::Lstm).then(|| {
        states
            .layers
            .iter()
            .map(|l| rows_of(&g, &l.iter().map(|s| s.c.expect("lstm cell")).collect::<Vec<_>>()))
            .collect()
    });
    Ok(HiddenStates { hidden, cells })
}

fn check_len<S: Scalar>(what: &'static str, v: &DenseArray<S>, expected: usize) -> Result<(), ModelError> {
    if v.len() != expected {
        return Err(ModelError::DimMismatch {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Value-level LSTM step for one layer of `stack`.
pub fn lstm_step<S: Scalar>(
    x: &DenseArray<S>,
    h_prev: &DenseArray<S>,
    c_prev: &DenseArray<S>,
    layer: &LayerParams,
    hidden: usize,
    store: &ParamStore<S>,
) -> Result<(DenseArray<S>, DenseArray<S>), ModelError> {
    check_len("input", x, layer.input_dim)?;
    check_len("previous hidden state", h_prev, hidden)?;
    check_len("previous cell state", c_prev, hidden)?;
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let xn = g.constant(DenseArray::column(x.values().to_vec()));
    let h = g.constant(DenseArray::column(h_prev.values().to_vec()));
    let c = g.constant(DenseArray::column(c_prev.values().to_vec()));
    let out = lstm_cell(&mut g, &bound, layer, hidden, xn, LayerState { h, c: Some(c) });
    g.forward()?;
    Ok((g.v(out.h).clone(), g.v(out.c.expect("lstm")).clone()))
}

/// Value-level GRU step for one layer of `stack`.
pub fn gru_step<S: Scalar>(
    x: &DenseArray<S>,
    h_prev: &DenseArray<S>,
    layer: &LayerParams,
    hidden: usize,
    store: &ParamStore<S>,
) -> Result<DenseArray<S>, ModelError> {
    check_len("input", x, layer.input_dim)?;
    check_len("previous hidden state", h_prev, hidden)?;
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let xn = g.constant(DenseArray::column(x.values().to_vec()));
    let h = g.constant(DenseArray::column(h_prev.values().to_vec()));
    let out = gru_cell(&mut g, &bound, layer, hidden, xn, LayerState { h, c: None });
    g.forward()?;
    Ok(g.v(out.h).clone())
}

/// Soft attention over time with one weight vector shared by all steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionPooler {
    /// `[1, D]`
    pub w: ParamId,
}

impl AttentionPooler {
    pub fn new<S: Scalar, R: Rng>(hidden: usize, store: &mut ParamStore<S>, prefix: &str, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{prefix}.w_alpha"), init_uniform(1, hidden, rng)),
        }
    }

    /// Returns `(α [1, T], A [D, 1])` with `α = softmax_t(w·h_t)` and
    /// `A = Σ_t α_t h_t`.
    pub fn pool<S: Scalar>(&self, g: &mut Graph<S>, bound: &BoundParams, states: &[NodeId]) -> (NodeId, NodeId) {
        attend(g, bound[self.w], states)
    }
}

/// Shared-weight attention over `states` given a `[1, D]` weight node.
pub fn attend<S: Scalar>(g: &mut Graph<S>, w: NodeId, states: &[NodeId]) -> (NodeId, NodeId) {
    let h = g.concat(states, 1);
    let logits = g.matmul(w, h);
    let alpha = g.softmax(logits);
    let pooled = weighted_sum(g, alpha, states);
    (alpha, pooled)
}

/// `Σ_t weights[t] · states[t]` for a `[1, T]` weight row.
pub fn weighted_sum<S: Scalar>(g: &mut Graph<S>, weights: NodeId, states: &[NodeId]) -> NodeId {
    let terms: Vec<NodeId> = states
        .iter()
        .enumerate()
        .map(|(t, &h)| {
            let a = g.slice(weights, 1, t, t + 1);
            g.matmul(h, a)
        })
        .collect();
    g.add_all(&terms)
}

/// Value-level attention pooling of a `[T, D]` matrix with weight `[1, D]`.
pub fn attention_pool<S: Scalar>(
    top: &DenseArray<S>,
    w_alpha: &DenseArray<S>,
) -> Result<(Vec<S>, Vec<S>), ModelError> {
    if top.rows() == 0 {
        return Err(ModelError::EmptySequence);
    }
    check_len("attention weight", w_alpha, top.cols())?;
    let mut g = Graph::new();
    let w = g.constant(DenseArray::matrix(1, top.cols(), w_alpha.values().to_vec()));
    let states = sequence_constants(&mut g, top);
    let (alpha, pooled) = attend(&mut g, w, &states);
    g.forward()?;
    Ok((g.v(alpha).values().to_vec(), g.v(pooled).values().to_vec()))
}

/// Final row `h^K_T` of a `[T, D]` matrix.
pub fn last_state_pool<S: Scalar>(top: &DenseArray<S>) -> Result<Vec<S>, ModelError> {
    if top.rows() == 0 {
        return Err(ModelError::EmptySequence);
    }
    Ok(top.row(top.rows() - 1).to_vec())
}

/// Affine map `W x + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(format!("{prefix}.w"), init_uniform(out_dim, in_dim, rng)),
            b: store.add(format!("{prefix}.b"), DenseArray::zeros(out_dim, 1)),
            in_dim,
            out_dim,
        }
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, bound: &BoundParams, x: NodeId) -> NodeId {
        let wx = g.matmul(bound[self.w], x);
        g.add(wx, bound[self.b])
    }
}
