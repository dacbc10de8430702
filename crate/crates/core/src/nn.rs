//! Layers over the tape: linear maps, batch normalization and small MLPs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormStats, Tape, Var};
use crate::params::{Kind, ParamStore};
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A forward pass in progress: the tape being recorded, the parameters
/// being read, and whether batch norms use batch or running statistics.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, mode: Mode) -> Self {
        Self { tape, store, mode }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(self.tape.bind(name, t))
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub prefix: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            prefix: prefix.into(),
            inputs,
            outputs,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert_uniform(&self.weight_name(), &[self.inputs, self.outputs], self.inputs, rng)?;
        store.insert_uniform(&self.bias_name(), &[self.outputs], self.inputs, rng)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = ctx.param(&self.bias_name())?;
        let xw = ctx.tape.matmul(x, w)?;
        ctx.tape.add_row_bias(xw, b)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.weight_name(), self.bias_name()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Per-feature batch normalization with running statistics kept as buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub prefix: String,
    pub features: usize,
    pub config: BatchNormConfig,
}

impl BatchNorm {
    pub fn new(prefix: impl Into<String>, features: usize, config: BatchNormConfig) -> Self {
        Self {
            prefix: prefix.into(),
            features,
            config,
        }
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.prefix)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.prefix)
    }

    pub fn running_mean_name(&self) -> String {
        format!("{}.running_mean", self.prefix)
    }

    pub fn running_var_name(&self) -> String {
        format!("{}.running_var", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![
            self.gamma_name(),
            self.beta_name(),
            self.running_mean_name(),
            self.running_var_name(),
        ]
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        let h = self.features;
        store.insert(&self.gamma_name(), Tensor::ones(&[h]), Kind::Weight)?;
        store.insert(&self.beta_name(), Tensor::zeros(&[h]), Kind::Weight)?;
        store.insert(&self.running_mean_name(), Tensor::zeros(&[h]), Kind::Buffer)?;
        store.insert(&self.running_var_name(), Tensor::ones(&[h]), Kind::Buffer)
    }

    /// Training mode normalizes by batch statistics and folds them into the
    /// running averages; evaluation mode uses the running averages.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&self.gamma_name())?;
        let beta = ctx.param(&self.beta_name())?;
        match ctx.mode {
            Mode::Train => {
                let (y, moments) = ctx
                    .tape
                    .batch_norm(x, gamma, beta, NormStats::Batch, self.config.epsilon)?;
                let moments = moments.expect("batch statistics are returned in training mode");
                let m = self.config.momentum;
                let n = moments.count as f64;
                let correction = if moments.count > 1 { n / (n - 1.0) } else { 1.0 };
                let rm = ctx.store.get_mut(&self.running_mean_name())?;
                for (r, v) in rm.data_mut().iter_mut().zip(&moments.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                let rv = ctx.store.get_mut(&self.running_var_name())?;
                for (r, v) in rv.data_mut().iter_mut().zip(&moments.var) {
                    *r = (1.0 - m) * *r + m * v * correction;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.get(&self.running_mean_name())?.data().to_vec();
                let var = ctx.store.get(&self.running_var_name())?.data().to_vec();
                let (y, _) = ctx.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    NormStats::Fixed { mean: &mean, var: &var },
                    self.config.epsilon,
                )?;
                Ok(y)
            }
        }
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoLayerPerceptron {
    pub first: Linear,
    pub second: Linear,
}

impl TwoLayerPerceptron {
    pub fn new(prefix: &str, inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            first: Linear::new(format!("{prefix}.l1"), inputs, hidden),
            second: Linear::new(format!("{prefix}.l2"), hidden, outputs),
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.first.register(store, rng)?;
        self.second.register(store, rng)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.second.forward(ctx, h)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.first.param_names();
        names.extend(self.second.param_names());
        names
    }
}
