//! The federated representor: a shared pointwise auto-encoder denoiser, a
//! personal graph encoder, and the client-aligned adapter that turns the
//! local feature into the prompt consumed by the predictor's decoder.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::graph::{frames_of, GraphSeqModel, Role};
use crate::nn::{BatchNorm, BatchNormConfig, Ctx, Linear, Mode, TwoLayerPerceptron};
use crate::params::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

/// Pointwise auto-encoder applied to every `(frame, node)` row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AeDenoiser {
    pub features: usize,
    pub hidden: usize,
    pub encoder: TwoLayerPerceptron,
    pub decoder: TwoLayerPerceptron,
}

impl AeDenoiser {
    pub fn new(prefix: &str, features: usize, hidden: usize) -> Self {
        Self {
            features,
            hidden,
            encoder: TwoLayerPerceptron::new(&format!("{prefix}.encoder"), features, hidden, hidden),
            decoder: TwoLayerPerceptron::new(&format!("{prefix}.decoder"), hidden, hidden, features),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.encoder.register(store, rng)?;
        self.decoder.register(store, rng)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.encoder.param_names();
        names.extend(self.decoder.param_names());
        names
    }

    /// `[rows, H] → [rows, h]`.
    pub fn encode(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let width = ctx.tape.value(x).dims2()?.1;
        if width != self.features {
            return Err(TensorError::InvalidShape {
                op: "ae_encode",
                shape: ctx.tape.value(x).shape().to_vec(),
                reason: format!("expected {} input features", self.features),
            });
        }
        self.encoder.forward(ctx, x)
    }

    /// `[rows, h] → [rows, H]`.
    pub fn decode(&self, ctx: &mut Ctx<'_>, p: Var) -> Result<Var> {
        let width = ctx.tape.value(p).dims2()?.1;
        if width != self.hidden {
            return Err(TensorError::InvalidShape {
                op: "ae_decode",
                shape: ctx.tape.value(p).shape().to_vec(),
                reason: format!("expected {} latent features", self.hidden),
            });
        }
        self.decoder.forward(ctx, p)
    }
}

/// `bn₂(linear₂(relu(bn₁(linear₁(p_l)))))`: linears are shared across
/// clients, batch norms stay on the client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientAdapter {
    pub first: Linear,
    pub first_norm: BatchNorm,
    pub second: Linear,
    pub second_norm: BatchNorm,
}

impl ClientAdapter {
    pub fn new(prefix: &str, hidden: usize, bn: BatchNormConfig) -> Self {
        Self {
            first: Linear::new(format!("{prefix}.linear1"), hidden, hidden),
            first_norm: BatchNorm::new(format!("{prefix}.bn1"), hidden, bn),
            second: Linear::new(format!("{prefix}.linear2"), hidden, hidden),
            second_norm: BatchNorm::new(format!("{prefix}.bn2"), hidden, bn),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.first.register(store, rng)?;
        self.first_norm.register(store)?;
        self.second.register(store, rng)?;
        self.second_norm.register(store)
    }

    pub fn linear_names(&self) -> Vec<String> {
        let mut names = self.first.param_names();
        names.extend(self.second.param_names());
        names
    }

    pub fn norm_names(&self) -> Vec<String> {
        let mut names = self.first_norm.param_names();
        names.extend(self.second_norm.param_names());
        names
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, local: Var) -> Result<Var> {
        let h = self.first.forward(ctx, local)?;
        let h = self.first_norm.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let h = self.second.forward(ctx, h)?;
        self.second_norm.forward(ctx, h)
    }
}

/// Outputs of one prompt generation.
#[derive(Debug, Clone, Copy)]
pub struct Prompt {
    /// Global prompt `p_g`, `[B·n, h]`.
    pub global: Var,
    /// Local feature `p_l`, `[B·n, h]`.
    pub local: Var,
    /// Reconstruction `x̂`, `[T·B·n, H]`; absent without a denoiser.
    pub reconstruction: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedRepresentor {
    /// `None` runs the graph encoder directly on raw inputs.
    pub denoiser: Option<AeDenoiser>,
    pub encoder: GraphSeqModel,
    pub adapter: ClientAdapter,
}

impl FederatedRepresentor {
    pub fn new(
        nodes: usize,
        features: usize,
        hidden: usize,
        layers: usize,
        with_denoiser: bool,
        bn: BatchNormConfig,
    ) -> Self {
        let denoiser = with_denoiser.then(|| AeDenoiser::new("fr.ae", features, hidden));
        let encoder_input = if with_denoiser { hidden } else { features };
        Self {
            denoiser,
            encoder: GraphSeqModel::stacked("fr.encoder", nodes, encoder_input, hidden, layers, Role::Encoder),
            adapter: ClientAdapter::new("fr.adapter", hidden, bn),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if let Some(ae) = &self.denoiser {
            ae.register(store, rng)?;
        }
        self.encoder.register(store, rng)?;
        self.adapter.register(store, rng)
    }

    /// `x_all` stacks the `T` input frames (`[T·B·n, H]`, frame-major) and
    /// `frames` holds the same frames individually.
    pub fn prompt(&self, ctx: &mut Ctx<'_>, x_all: Var, frames: &[Var]) -> Result<Prompt> {
        let first = frames.first().ok_or(TensorError::EmptySequence)?;
        let rows = ctx.tape.value(*first).dims2()?.0;
        let (encoder_frames, reconstruction) = match &self.denoiser {
            Some(ae) => {
                let p = ae.encode(ctx, x_all)?;
                let reconstruction = ae.decode(ctx, p)?;
                let mut slices = Vec::with_capacity(frames.len());
                for t in 0..frames.len() {
                    slices.push(ctx.tape.slice_rows(p, t * rows, rows)?);
                }
                (slices, Some(reconstruction))
            }
            None => (frames.to_vec(), None),
        };
        let local = self.encoder.encode(ctx, &encoder_frames)?;
        let global = self.adapter.forward(ctx, local)?;
        Ok(Prompt {
            global,
            local,
            reconstruction,
        })
    }
}

/// Generates `(p_g, x̂)` for a single `[T, n, H]` input. Batch norms run in
/// `mode`; in training mode their running statistics in `store` advance.
pub fn make_prompt(
    representor: &FederatedRepresentor,
    store: &mut ParamStore,
    x: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Option<Tensor>)> {
    let frames = frames_of(x)?;
    let mut tape = Tape::new();
    let x_all = tape.constant(Tensor::new(
        &[x.shape()[0] * x.shape()[1], x.shape()[2]],
        x.data().to_vec(),
    )?);
    let vars: Vec<Var> = frames.into_iter().map(|f| tape.constant(f)).collect();
    let mut ctx = Ctx::new(&mut tape, store, mode);
    let prompt = representor.prompt(&mut ctx, x_all, &vars)?;
    let global = tape.value(prompt.global).clone();
    let recon = prompt
        .reconstruction
        .map(|r| tape.value(r).clone().reshape(x.shape()))
        .transpose()?;
    Ok((global, recon))
}
