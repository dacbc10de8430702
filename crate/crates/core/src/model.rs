//! One client's full model: the predictor, optionally fed by a representor
//! prompt, over mini-batches of windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{SplitDataset, WindowedSample};
use crate::metrics::{evaluate_slices, MetricsReport};
use crate::nn::{BatchNormConfig, Ctx, Mode};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::predictor::{combine_losses, LossConfig, LossTerms, PersonalizedPredictor};
use crate::representor::FederatedRepresentor;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Stacked cells per encoder and decoder.
    pub layers: usize,
    pub history: usize,
    pub horizon: usize,
    /// Hidden width of a two-layer output head; a single linear map if unset.
    pub head_hidden: Option<usize>,
    pub batch_norm: BatchNormConfig,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 1,
            history: 12,
            horizon: 12,
            head_hidden: None,
            batch_norm: BatchNormConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

/// How the decoder's first token is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// From the representor, with or without the denoiser in front of it.
    Prompted { denoiser: bool },
    /// A zero token: the plain encoder-decoder backbone.
    Unprompted,
}

/// A mini-batch laid out for the tape. Rows within a frame are ordered
/// `(sample, node)`; targets are step-major `(step, sample, node)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub frames: Vec<Tensor>,
    /// The frames stacked, `[T·B·n, H]`.
    pub stacked: Tensor,
    pub target: Tensor,
    /// Per-row de-normalization of the model output.
    pub scale: Tensor,
    pub offset: Tensor,
}

impl Batch {
    pub fn new(samples: &[&WindowedSample], data: &SplitDataset) -> Result<Self> {
        if samples.is_empty() {
            return Err(TensorError::EmptyBatch);
        }
        let (n, h) = (data.nodes, data.features);
        let (t, tp, b) = (data.history, data.horizon, samples.len());
        let rows = b * n;
        let mut stacked = Vec::with_capacity(t * rows * h);
        for step in 0..t {
            for s in samples {
                if s.x.shape() != [t, n, h] || s.y.shape() != [tp, n] {
                    return Err(TensorError::InvalidShape {
                        op: "batch",
                        shape: s.x.shape().to_vec(),
                        reason: format!("expected x [{t}, {n}, {h}] and y [{tp}, {n}]"),
                    });
                }
                stacked.extend_from_slice(&s.x.data()[step * n * h..(step + 1) * n * h]);
            }
        }
        let frames = stacked
            .chunks(rows * h)
            .map(|c| Tensor::new(&[rows, h], c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mut target = Vec::with_capacity(tp * rows);
        let mut scale = Vec::with_capacity(tp * rows);
        let mut offset = Vec::with_capacity(tp * rows);
        for step in 0..tp {
            for s in samples {
                target.extend_from_slice(&s.y.data()[step * n..(step + 1) * n]);
                for node in 0..n {
                    let (mean, std) = data.target_stats(node);
                    scale.push(std);
                    offset.push(mean);
                }
            }
        }
        Ok(Self {
            size: b,
            frames,
            stacked: Tensor::new(&[t * rows, h], stacked)?,
            target: Tensor::new(&[tp * rows, 1], target)?,
            scale: Tensor::new(&[tp * rows, 1], scale)?,
            offset: Tensor::new(&[tp * rows, 1], offset)?,
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// De-normalized predictions `[T'·B·n, 1]`.
    pub prediction: Var,
    pub target: Var,
    pub input: Var,
    pub reconstruction: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub nodes: usize,
    pub features: usize,
    pub hidden: usize,
    pub wiring: Wiring,
    pub predictor: PersonalizedPredictor,
    pub representor: Option<FederatedRepresentor>,
    pub loss: LossConfig,
}

impl ClientModel {
    pub fn new(nodes: usize, features: usize, config: &ModelConfig, wiring: Wiring) -> Self {
        let h = config.hidden;
        let predictor =
            PersonalizedPredictor::new(nodes, features, h, config.layers, config.horizon, config.head_hidden);
        let representor = match wiring {
            Wiring::Prompted { denoiser } => Some(FederatedRepresentor::new(
                nodes,
                features,
                h,
                config.layers,
                denoiser,
                config.batch_norm,
            )),
            Wiring::Unprompted => None,
        };
        Self {
            nodes,
            features,
            hidden: h,
            wiring,
            predictor,
            representor,
            loss: config.loss,
        }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.predictor.register(store, rng)?;
        if let Some(fr) = &self.representor {
            fr.register(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, batch: &Batch) -> Result<Forward> {
        let frames: Vec<Var> = batch.frames.iter().map(|f| ctx.tape.constant(f.clone())).collect();
        let input = ctx.tape.constant(batch.stacked.clone());
        let rows = batch.size * self.nodes;
        let (prompt, reconstruction) = match &self.representor {
            Some(fr) => {
                let p = fr.prompt(ctx, input, &frames)?;
                (p.global, p.reconstruction)
            }
            None => (ctx.tape.constant(Tensor::zeros(&[rows, self.hidden])), None),
        };
        let raw = self.predictor.predict(ctx, &frames, prompt)?;
        let scale = ctx.tape.constant(batch.scale.clone());
        let offset = ctx.tape.constant(batch.offset.clone());
        let scaled = ctx.tape.mul(raw, scale)?;
        let prediction = ctx.tape.add(scaled, offset)?;
        let target = ctx.tape.constant(batch.target.clone());
        Ok(Forward {
            prediction,
            target,
            input,
            reconstruction,
        })
    }

    /// Records the training loss of `batch` on `tape` without stepping.
    pub fn loss(&self, tape: &mut Tape, store: &mut ParamStore, batch: &Batch) -> Result<(Var, LossTerms)> {
        let mut ctx = Ctx::new(tape, store, Mode::Train);
        let f = self.forward(&mut ctx, batch)?;
        let pre = ctx.tape.mean_abs_diff(f.target, f.prediction)?;
        let ae = f
            .reconstruction
            .map(|r| ctx.tape.mean_abs_diff(f.input, r))
            .transpose()?;
        combine_losses(ctx.tape, pre, ae, &self.loss)
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&self, store: &mut ParamStore, optimizer: &mut Adam, batch: &Batch) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let (loss, terms) = self.loss(&mut tape, store, batch)?;
        if !terms.total.is_finite() {
            return Ok(terms);
        }
        tape.backward_into(loss, store)?;
        optimizer.step(store)?;
        Ok(terms)
    }

    /// Predictions for `batch` in evaluation mode, ordered like its targets.
    pub fn predict_batch(&self, store: &mut ParamStore, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
        let f = self.forward(&mut ctx, batch)?;
        Ok(tape.value(f.prediction).data().to_vec())
    }

    /// `[T', n]` forecast for a single window.
    pub fn predict_window(
        &self,
        store: &mut ParamStore,
        sample: &WindowedSample,
        data: &SplitDataset,
    ) -> Result<Tensor> {
        let batch = Batch::new(&[sample], data)?;
        let out = self.predict_batch(store, &batch)?;
        Tensor::new(sample.y.shape(), out)
    }

    /// Metrics in original units over all `samples`.
    pub fn evaluate(
        &self,
        store: &mut ParamStore,
        samples: &[WindowedSample],
        data: &SplitDataset,
        batch_size: usize,
        mape_threshold: f64,
    ) -> Result<MetricsReport> {
        let mut predictions = Vec::new();
        let mut targets = Vec::new();
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&WindowedSample> = chunk.iter().collect();
            let batch = Batch::new(&refs, data)?;
            predictions.extend(self.predict_batch(store, &batch)?);
            targets.extend_from_slice(batch.target.data());
        }
        evaluate_slices(&predictions, &targets, mape_threshold)
    }
}
