//! Adaptive-adjacency graph convolutional GRU blocks.
//!
//! Hidden states are matrices of `B·n` rows ordered `(sample, node)`, so a
//! batch of `B` graphs with `n` nodes each shares one adjacency. The
//! adjacency is applied block-wise by [`Tape::graph_mix`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::nn::{Ctx, Linear};
use crate::params::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

/// Learnable node embedding `E ∈ R^{n×h}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeEmbedding {
    pub name: String,
    pub nodes: usize,
    pub width: usize,
}

impl NodeEmbedding {
    pub fn new(name: impl Into<String>, nodes: usize, width: usize) -> Self {
        Self {
            name: name.into(),
            nodes,
            width,
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert_uniform(&self.name, &[self.nodes, self.width], self.width, rng)
    }

    pub fn adjacency(&self, ctx: &mut Ctx<'_>) -> Result<Var> {
        let e = ctx.param(&self.name)?;
        adaptive_adjacency(ctx.tape, e)
    }
}

/// `Ã = softmax_rows(relu(E·Eᵀ))`.
pub fn adaptive_adjacency(tape: &mut Tape, embedding: Var) -> Result<Var> {
    let et = tape.transpose(embedding)?;
    let gram = tape.matmul(embedding, et)?;
    let gram = tape.relu(gram);
    tape.softmax_rows(gram)
}

/// One graph convolution gate: `Ã · ([x ∥ h] · W) + b`.
pub fn gcn(ctx: &mut Ctx<'_>, gate: &Linear, x: Var, hidden: Var, adjacency: Var) -> Result<Var> {
    let joined = ctx.tape.concat_cols(x, hidden)?;
    gate_on_joined(ctx, gate, joined, adjacency)
}

fn gate_on_joined(ctx: &mut Ctx<'_>, gate: &Linear, joined: Var, adjacency: Var) -> Result<Var> {
    let width = ctx.tape.value(joined).dims2()?.1;
    if width != gate.inputs {
        return Err(TensorError::InvalidShape {
            op: "gcn",
            shape: ctx.tape.value(joined).shape().to_vec(),
            reason: format!("concatenated width {width} != d_in + h = {}", gate.inputs),
        });
    }
    let w = ctx.param(&gate.weight_name())?;
    let b = ctx.param(&gate.bias_name())?;
    let projected = ctx.tape.matmul(joined, w)?;
    let mixed = ctx.tape.graph_mix(adjacency, projected)?;
    ctx.tape.add_row_bias(mixed, b)
}

/// Graph-convolutional GRU cell with update, reset and candidate gates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgcrnCell {
    pub input_width: usize,
    pub hidden: usize,
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
}

impl AgcrnCell {
    pub fn new(prefix: &str, input_width: usize, hidden: usize) -> Self {
        let joined = input_width + hidden;
        Self {
            input_width,
            hidden,
            update: Linear::new(format!("{prefix}.update"), joined, hidden),
            reset: Linear::new(format!("{prefix}.reset"), joined, hidden),
            candidate: Linear::new(format!("{prefix}.candidate"), joined, hidden),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.update.register(store, rng)?;
        self.reset.register(store, rng)?;
        self.candidate.register(store, rng)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.update.param_names();
        names.extend(self.reset.param_names());
        names.extend(self.candidate.param_names());
        names
    }

    /// `H_t = u ⊙ H_{t−1} + (1 − u) ⊙ C` with
    /// `u = σ(GCN_u(x, H))`, `r = σ(GCN_r(x, H))`, `C = tanh(GCN_C(x, r ⊙ H))`.
    pub fn step(&self, ctx: &mut Ctx<'_>, x: Var, prev: Var, adjacency: Var) -> Result<Var> {
        let joined = ctx.tape.concat_cols(x, prev)?;
        let u = gate_on_joined(ctx, &self.update, joined, adjacency)?;
        let u = ctx.tape.sigmoid(u);
        let r = gate_on_joined(ctx, &self.reset, joined, adjacency)?;
        let r = ctx.tape.sigmoid(r);
        let reset_prev = ctx.tape.mul(r, prev)?;
        let c = gcn(ctx, &self.candidate, x, reset_prev, adjacency)?;
        let c = ctx.tape.tanh(c);
        let keep = ctx.tape.mul(u, prev)?;
        let one_minus_u = ctx.tape.affine(u, -1.0, 1.0);
        let fresh = ctx.tape.mul(one_minus_u, c)?;
        ctx.tape.add(keep, fresh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
}

/// A node embedding plus a stack of cells, used either to fold a sequence
/// into hidden states or to unroll auto-regressively from a prefix token.
/// All layers of one model share its adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSeqModel {
    pub embedding: NodeEmbedding,
    pub cells: Vec<AgcrnCell>,
    pub role: Role,
}

impl GraphSeqModel {
    pub fn new(prefix: &str, nodes: usize, input_width: usize, hidden: usize, role: Role) -> Self {
        Self::stacked(prefix, nodes, input_width, hidden, 1, role)
    }

    pub fn stacked(prefix: &str, nodes: usize, input_width: usize, hidden: usize, layers: usize, role: Role) -> Self {
        let cells = (0..layers.max(1))
            .map(|l| {
                let width = if l == 0 { input_width } else { hidden };
                let name = if l == 0 {
                    format!("{prefix}.cell")
                } else {
                    format!("{prefix}.cell{l}")
                };
                AgcrnCell::new(&name, width, hidden)
            })
            .collect();
        Self {
            embedding: NodeEmbedding::new(format!("{prefix}.embedding"), nodes, hidden),
            cells,
            role,
        }
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    pub fn depth(&self) -> usize {
        self.cells.len()
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.embedding.register(store, rng)?;
        self.cells.iter().try_for_each(|c| c.register(store, rng))
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![self.embedding.name.clone()];
        for c in &self.cells {
            names.extend(c.param_names());
        }
        names
    }

    /// Folds the stack over `frames` from zero states and returns the final
    /// hidden state of every layer, bottom first.
    pub fn encode_layers(&self, ctx: &mut Ctx<'_>, frames: &[Var]) -> Result<Vec<Var>> {
        if self.role != Role::Encoder {
            return Err(TensorError::Contract("encode called on a decoder".into()));
        }
        let first = frames.first().ok_or(TensorError::EmptySequence)?;
        let rows = ctx.tape.value(*first).dims2()?.0;
        let adjacency = self.embedding.adjacency(ctx)?;
        let zero = ctx.tape.constant(Tensor::zeros(&[rows, self.hidden()]));
        let mut states = vec![zero; self.depth()];
        for frame in frames {
            let mut input = *frame;
            for (cell, state) in self.cells.iter().zip(states.iter_mut()) {
                *state = cell.step(ctx, input, *state, adjacency)?;
                input = *state;
            }
        }
        Ok(states)
    }

    /// Final hidden state of the top layer.
    pub fn encode(&self, ctx: &mut Ctx<'_>, frames: &[Var]) -> Result<Var> {
        Ok(*self.encode_layers(ctx, frames)?.last().expect("at least one layer"))
    }

    /// Unrolls `steps` applications of the stack: the first consumes
    /// `token` from `initial` (one state per layer), each later step consumes
    /// the previous top-layer output. Returns the top-layer state per step.
    pub fn decode(&self, ctx: &mut Ctx<'_>, token: Var, initial: &[Var], steps: usize) -> Result<Vec<Var>> {
        if self.role != Role::Decoder {
            return Err(TensorError::Contract("decode called on an encoder".into()));
        }
        if steps == 0 {
            return Err(TensorError::Contract("decoder needs at least one step".into()));
        }
        if initial.len() != self.depth() {
            return Err(TensorError::Contract(format!(
                "decoder has {} layers but received {} initial states",
                self.depth(),
                initial.len()
            )));
        }
        let adjacency = self.embedding.adjacency(ctx)?;
        let mut outputs = Vec::with_capacity(steps);
        let mut states = initial.to_vec();
        let mut input = token;
        for _ in 0..steps {
            for (cell, state) in self.cells.iter().zip(states.iter_mut()) {
                *state = cell.step(ctx, input, *state, adjacency)?;
                input = *state;
            }
            outputs.push(input);
        }
        Ok(outputs)
    }
}

/// Splits a `[T, n, d]` tensor into `T` matrices of shape `[n, d]`.
pub fn frames_of(sequence: &Tensor) -> Result<Vec<Tensor>> {
    let [t, n, d] = sequence.shape() else {
        return Err(TensorError::InvalidShape {
            op: "frames_of",
            shape: sequence.shape().to_vec(),
            reason: "expected [T, n, d]".into(),
        });
    };
    let (t, n, d) = (*t, *n, *d);
    (0..t)
        .map(|i| Tensor::new(&[n, d], sequence.data()[i * n * d..(i + 1) * n * d].to_vec()))
        .collect()
}

/// Stacks `[n, d]` matrices into a `[T, n, d]` tensor.
pub fn stack_frames(frames: &[&Tensor]) -> Result<Tensor> {
    let first = frames.first().ok_or(TensorError::EmptySequence)?;
    let (n, d) = first.dims2()?;
    let mut data = Vec::with_capacity(frames.len() * n * d);
    for f in frames {
        if f.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "stack_frames",
                left: first.shape().to_vec(),
                right: f.shape().to_vec(),
            });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(&[frames.len(), n, d], data)
}

/// Evaluates [`GraphSeqModel::encode`] on a single `[T, n, d_in]` sequence.
pub fn encode_sequence(model: &GraphSeqModel, store: &ParamStore, sequence: &Tensor) -> Result<Tensor> {
    let mut store = store.clone();
    let mut tape = Tape::new();
    let frames: Vec<Var> = frames_of(sequence)?.into_iter().map(|f| tape.constant(f)).collect();
    let mut ctx = Ctx::new(&mut tape, &mut store, crate::nn::Mode::Eval);
    let out = model.encode(&mut ctx, &frames)?;
    Ok(tape.value(out).clone())
}

/// Evaluates [`GraphSeqModel::decode`] and stacks the result to `[steps, n, h]`.
pub fn decode_ar(
    model: &GraphSeqModel,
    store: &ParamStore,
    prompt: &Tensor,
    initial: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    let mut store = store.clone();
    let mut tape = Tape::new();
    let p = tape.constant(prompt.clone());
    let h = tape.constant(initial.clone());
    let mut ctx = Ctx::new(&mut tape, &mut store, crate::nn::Mode::Eval);
    let outs = model.decode(&mut ctx, p, &[h], steps)?;
    let values: Vec<&Tensor> = outs.iter().map(|v| tape.value(*v)).collect();
    stack_frames(&values)
}
