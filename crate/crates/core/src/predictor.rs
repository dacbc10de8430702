//! The personalized predictor and the adaptive two-term loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::graph::{frames_of, GraphSeqModel, Role};
use crate::nn::{Ctx, Linear, Mode, TwoLayerPerceptron};
use crate::params::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

/// Maps each decoder state `R^h → R`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Head {
    Linear(Linear),
    Perceptron(TwoLayerPerceptron),
}

impl Head {
    pub fn new(prefix: &str, hidden: usize, head_hidden: Option<usize>) -> Self {
        match head_hidden {
            None => Head::Linear(Linear::new(prefix, hidden, 1)),
            Some(width) => Head::Perceptron(TwoLayerPerceptron::new(prefix, hidden, width, 1)),
        }
    }

    fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        match self {
            Head::Linear(l) => l.register(store, rng),
            Head::Perceptron(p) => p.register(store, rng),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, z: Var) -> Result<Var> {
        match self {
            Head::Linear(l) => l.forward(ctx, z),
            Head::Perceptron(p) => p.forward(ctx, z),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Head::Linear(l) => l.param_names(),
            Head::Perceptron(p) => p.param_names(),
        }
    }
}

/// Encoder over raw history, decoder conditioned on a prompt token, and a
/// per-node output head. Every parameter is personal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonalizedPredictor {
    pub encoder: GraphSeqModel,
    pub decoder: GraphSeqModel,
    pub head: Head,
    pub horizon: usize,
}

impl PersonalizedPredictor {
    pub fn new(
        nodes: usize,
        features: usize,
        hidden: usize,
        layers: usize,
        horizon: usize,
        head_hidden: Option<usize>,
    ) -> Self {
        Self {
            encoder: GraphSeqModel::stacked("pp.encoder", nodes, features, hidden, layers, Role::Encoder),
            decoder: GraphSeqModel::stacked("pp.decoder", nodes, hidden, hidden, layers, Role::Decoder),
            head: Head::new("pp.head", hidden, head_hidden),
            horizon,
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.encoder.register(store, rng)?;
        self.decoder.register(store, rng)?;
        self.head.register(store, rng)
    }

    /// Returns `[T'·B·n, 1]`, step-major.
    pub fn predict(&self, ctx: &mut Ctx<'_>, frames: &[Var], prompt: Var) -> Result<Var> {
        let states = self.encoder.encode_layers(ctx, frames)?;
        let z = self.decoder.decode(ctx, prompt, &states, self.horizon)?;
        let stacked = ctx.tape.concat_rows(&z)?;
        self.head.forward(ctx, stacked)
    }
}

/// Evaluates [`PersonalizedPredictor::predict`] on one `[T, n, H]` input and
/// an `[n, h]` prompt, returning `[T', n]`.
pub fn predict(predictor: &PersonalizedPredictor, store: &ParamStore, x: &Tensor, prompt: &Tensor) -> Result<Tensor> {
    let n = x.shape().get(1).copied().unwrap_or(0);
    let mut store = store.clone();
    let mut tape = Tape::new();
    let frames: Vec<Var> = frames_of(x)?.into_iter().map(|f| tape.constant(f)).collect();
    let p = tape.constant(prompt.clone());
    let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
    let out = predictor.predict(&mut ctx, &frames, p)?;
    tape.value(out).clone().reshape(&[predictor.horizon, n])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaGradient {
    /// The adaptive weight is a per-batch constant.
    #[default]
    Detached,
    /// Differentiate `L_pre + L_ae² / L_pre` directly.
    Through,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// `L_pre` at or below this value triggers the guarded weight.
    pub guard: f64,
    pub alpha_max: f64,
    pub alpha_gradient: AlphaGradient,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            guard: 1e-8,
            alpha_max: 1e4,
            alpha_gradient: AlphaGradient::Detached,
        }
    }
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ae: f64,
    pub prediction: f64,
    pub total: f64,
    pub alpha: f64,
    /// The weight was clamped or the prediction loss hit the guard.
    pub guarded: bool,
}

/// `(α, guarded)` for the given loss values.
pub fn adaptive_weight(ae: f64, prediction: f64, config: &LossConfig) -> (f64, bool) {
    if prediction <= config.guard {
        if ae == 0.0 {
            (0.0, true)
        } else {
            (config.alpha_max, true)
        }
    } else {
        let alpha = ae / prediction;
        if alpha > config.alpha_max {
            (config.alpha_max, true)
        } else {
            (alpha.max(0.0), false)
        }
    }
}

/// Builds `L = L_pre + α·L_ae` on the tape. Without an AE term, `α = 0`.
pub fn combine_losses(
    tape: &mut Tape,
    prediction: Var,
    ae: Option<Var>,
    config: &LossConfig,
) -> Result<(Var, LossTerms)> {
    let l_pre = tape.value(prediction).item();
    let Some(ae) = ae else {
        return Ok((
            prediction,
            LossTerms {
                ae: 0.0,
                prediction: l_pre,
                total: l_pre,
                alpha: 0.0,
                guarded: false,
            },
        ));
    };
    let l_ae = tape.value(ae).item();
    let (alpha, guarded) = adaptive_weight(l_ae, l_pre, config);
    let total = if config.alpha_gradient == AlphaGradient::Through && !guarded {
        let sq = tape.square(ae);
        let ratio = tape.div(sq, prediction)?;
        tape.add(prediction, ratio)?
    } else {
        let weighted = tape.scale(ae, alpha);
        tape.add(prediction, weighted)?
    };
    let value = tape.value(total).item();
    Ok((
        total,
        LossTerms {
            ae: l_ae,
            prediction: l_pre,
            total: value,
            alpha,
            guarded,
        },
    ))
}

/// Loss terms from plain tensors: `L_ae = mean|x − x̂|`, `L_pre = mean|y − ŷ|`.
pub fn losses(x: &Tensor, x_hat: &Tensor, y: &Tensor, y_hat: &Tensor, config: &LossConfig) -> Result<LossTerms> {
    if x.shape() != x_hat.shape() || y.shape() != y_hat.shape() {
        return Err(TensorError::Contract("loss operands must have matching shapes".into()));
    }
    let mut tape = Tape::new();
    let flat = |t: &Tensor| Tensor::new(&[t.numel()], t.data().to_vec());
    let (xv, xh) = (tape.constant(flat(x)?), tape.constant(flat(x_hat)?));
    let (yv, yh) = (tape.constant(flat(y)?), tape.constant(flat(y_hat)?));
    let ae = tape.mean_abs_diff(xv, xh)?;
    let pre = tape.mean_abs_diff(yv, yh)?;
    Ok(combine_losses(&mut tape, pre, Some(ae), config)?.1)
}
