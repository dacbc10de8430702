//! Reverse-mode gradients against central finite differences.
//!
//! Every check registers its inputs as weights in a store, reduces the
//! output to a scalar with fixed random weights and compares the tape's
//! gradient to `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar.

use std::time::Instant;

use autofed::autodiff::{NormStats, Tape, Var};
use autofed::data::{generate_synthetic, window_and_split, SyntheticSpec};
use autofed::graph::{gcn, AgcrnCell, GraphSeqModel, NodeEmbedding, Role};
use autofed::model::{Batch, ClientModel, ModelConfig, Wiring};
use autofed::nn::{BatchNormConfig, Ctx, Linear, Mode};
use autofed::params::{Kind, ParamStore};
use autofed::predictor::{AlphaGradient, LossConfig, PersonalizedPredictor};
use autofed::representor::{AeDenoiser, ClientAdapter, FederatedRepresentor};
use autofed::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Unary = fn(&mut Tape, Var) -> Var;
type Binary = fn(&mut Tape, Var, Var) -> Var;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Gradients below `FLOOR·max(1, |f|)` or `GRAD_FLOOR·max|∇f|` are under
/// what a central difference resolves and compare absolutely against it.
const FLOOR: f64 = 1e-5;
const GRAD_FLOOR: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ out ⊙ R` for a fixed `R` derived from the output's shape.
fn reduce(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let weights = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let weighted = tape.mul(out, weights).unwrap();
    tape.sum(weighted)
}

fn evaluate<F>(store: &ParamStore, mode: Mode, build: &F) -> f64
where
    F: Fn(&mut Ctx<'_>) -> Var,
{
    let mut store = store.clone();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, mode);
    let loss = build(&mut ctx);
    tape.value(loss).item()
}

/// Compares every weight's analytic gradient with finite differences.
fn check<F>(label: &str, store: &ParamStore, mode: Mode, build: F)
where
    F: Fn(&mut Ctx<'_>) -> Var,
{
    check_against(label, store, mode, &build, |s| evaluate(s, mode, &build));
}

/// As [`check`], differencing `objective` instead of the built loss.
fn check_against<F, O>(label: &str, store: &ParamStore, mode: Mode, build: F, objective: O)
where
    F: Fn(&mut Ctx<'_>) -> Var,
    O: Fn(&ParamStore) -> f64,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut tape = Tape::new();
    let loss = {
        let mut ctx = Ctx::new(&mut tape, &mut analytic, mode);
        build(&mut ctx)
    };
    tape.backward_into(loss, &mut analytic).unwrap();

    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.kind == Kind::Weight)
        .map(|(n, _)| n.to_string())
        .collect();
    assert!(!names.is_empty(), "{label}: nothing to check");
    let grads: Vec<Vec<f64>> = names
        .iter()
        .map(|name| {
            let numel = store.get(name).unwrap().numel();
            let g = analytic.get(name).unwrap().grad().map(<[f64]>::to_vec);
            g.unwrap_or_else(|| vec![0.0; numel])
        })
        .collect();
    let largest = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (FLOOR * objective(store).abs().max(1.0)).max(GRAD_FLOOR * largest);
    for (name, grad) in names.iter().zip(&grads) {
        for (i, &exact) in grad.iter().enumerate() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
            let err = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(floor);
            assert!(
                err < REL_TOL,
                "{label}: d/d{name}[{i}] analytic {exact} vs numeric {numeric} (rel {err:e})"
            );
        }
    }
}

fn store_with(inputs: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in inputs {
        s.insert(name, t.clone(), Kind::Weight).unwrap();
    }
    s
}

fn p(ctx: &mut Ctx<'_>, name: &str) -> Var {
    ctx.param(name).unwrap()
}

pub fn elementwise_and_matrix_ops() {
    let started = Instant::now();
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c, k) = (
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=3),
        );
        let a = random(&mut rng, &[r, c], -2.0, 2.0);
        let b = random(&mut rng, &[r, c], -2.0, 2.0);
        let pos = random(&mut rng, &[r, c], 0.5, 2.0);
        let m = random(&mut rng, &[c, k], -1.0, 1.0);
        let bias = random(&mut rng, &[c], -1.0, 1.0);
        let s = store_with(&[("a", a), ("b", b), ("pos", pos), ("m", m), ("bias", bias)]);

        let unary: [(&str, Unary); 8] = [
            ("relu", |t, v| t.relu(v)),
            ("sigmoid", |t, v| t.sigmoid(v)),
            ("tanh", |t, v| t.tanh(v)),
            ("square", |t, v| t.square(v)),
            ("affine", |t, v| t.affine(v, -1.5, 0.25)),
            ("scale", |t, v| t.scale(v, 3.0)),
            ("transpose", |t, v| t.transpose(v).unwrap()),
            ("softmax_rows", |t, v| t.softmax_rows(v).unwrap()),
        ];
        for (label, op) in unary {
            check(label, &s, Mode::Train, |ctx| {
                let a = p(ctx, "a");
                let out = op(ctx.tape, a);
                reduce(ctx.tape, out)
            });
        }
        let binary: [(&str, Binary); 5] = [
            ("add", |t, x, y| t.add(x, y).unwrap()),
            ("sub", |t, x, y| t.sub(x, y).unwrap()),
            ("mul", |t, x, y| t.mul(x, y).unwrap()),
            ("concat_cols", |t, x, y| t.concat_cols(x, y).unwrap()),
            ("concat_rows", |t, x, y| t.concat_rows(&[x, y]).unwrap()),
        ];
        for (label, op) in binary {
            check(label, &s, Mode::Train, |ctx| {
                let (a, b) = (p(ctx, "a"), p(ctx, "b"));
                let out = op(ctx.tape, a, b);
                reduce(ctx.tape, out)
            });
        }
        check("div", &s, Mode::Train, |ctx| {
            let (a, d) = (p(ctx, "a"), p(ctx, "pos"));
            let out = ctx.tape.div(a, d).unwrap();
            reduce(ctx.tape, out)
        });
        check("matmul", &s, Mode::Train, |ctx| {
            let (a, m) = (p(ctx, "a"), p(ctx, "m"));
            let out = ctx.tape.matmul(a, m).unwrap();
            reduce(ctx.tape, out)
        });
        check("add_row_bias", &s, Mode::Train, |ctx| {
            let (a, b) = (p(ctx, "a"), p(ctx, "bias"));
            let out = ctx.tape.add_row_bias(a, b).unwrap();
            reduce(ctx.tape, out)
        });
        check("slice_rows", &s, Mode::Train, |ctx| {
            let a = p(ctx, "a");
            let joined = ctx.tape.concat_rows(&[a, a]).unwrap();
            let out = ctx.tape.slice_rows(joined, r / 2 + 1, r).unwrap();
            reduce(ctx.tape, out)
        });
        check("reshape", &s, Mode::Train, |ctx| {
            let a = p(ctx, "a");
            let out = ctx.tape.reshape(a, &[c, r]).unwrap();
            reduce(ctx.tape, out)
        });
        check("sum_mean", &s, Mode::Train, |ctx| {
            let a = p(ctx, "a");
            let sq = ctx.tape.square(a);
            let total = ctx.tape.sum(sq);
            let mean = ctx.tape.mean(a);
            let mean = ctx.tape.scale(mean, 2.0);
            ctx.tape.add(total, mean).unwrap()
        });
        check("mean_abs_diff", &s, Mode::Train, |ctx| {
            let (a, b) = (p(ctx, "a"), p(ctx, "b"));
            ctx.tape.mean_abs_diff(a, b).unwrap()
        });
    }
    eprintln!("elementwise_and_matrix_ops: {:?}", started.elapsed());
}

pub fn graph_mix_and_batch_norm() {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, c, blocks) = (
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=3),
        );
        let adj = random(&mut rng, &[n, n], -1.0, 1.0);
        let x = random(&mut rng, &[blocks * n, c], -2.0, 2.0);
        let gamma = random(&mut rng, &[c], 0.5, 1.5);
        let beta = random(&mut rng, &[c], -0.5, 0.5);
        let s = store_with(&[("adj", adj), ("x", x), ("gamma", gamma), ("beta", beta)]);
        check("graph_mix", &s, Mode::Train, |ctx| {
            let (a, x) = (p(ctx, "adj"), p(ctx, "x"));
            let out = ctx.tape.graph_mix(a, x).unwrap();
            reduce(ctx.tape, out)
        });
        if blocks * n > 1 {
            check("batch_norm (batch stats)", &s, Mode::Train, |ctx| {
                let (x, g, b) = (p(ctx, "x"), p(ctx, "gamma"), p(ctx, "beta"));
                let (out, _) = ctx.tape.batch_norm(x, g, b, NormStats::Batch, 1e-5).unwrap();
                reduce(ctx.tape, out)
            });
        }
        let mean = vec![0.3; c];
        let var = vec![1.7; c];
        check("batch_norm (fixed stats)", &s, Mode::Train, |ctx| {
            let (x, g, b) = (p(ctx, "x"), p(ctx, "gamma"), p(ctx, "beta"));
            let stats = NormStats::Fixed { mean: &mean, var: &var };
            let (out, _) = ctx.tape.batch_norm(x, g, b, stats, 1e-5).unwrap();
            reduce(ctx.tape, out)
        });
    }
}

pub fn graph_blocks() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (n, d, h) = (
            rng.random_range(1..=3),
            rng.random_range(1..=2),
            rng.random_range(1..=4),
        );
        let t = rng.random_range(1..=3);
        let steps = rng.random_range(1..=3);

        let mut s = store_with(&[
            ("x", random(&mut rng, &[n, d], -1.5, 1.5)),
            ("h", random(&mut rng, &[n, h], -1.0, 1.0)),
            ("seq", random(&mut rng, &[t * n, d], -1.5, 1.5)),
            ("token", random(&mut rng, &[n, h], -1.0, 1.0)),
        ]);
        let emb = NodeEmbedding::new("e", n, h);
        emb.register(&mut s, &mut rng).unwrap();
        let gate = Linear::new("g", d + h, h);
        gate.register(&mut s, &mut rng).unwrap();
        let cell = AgcrnCell::new("cell", d, h);
        cell.register(&mut s, &mut rng).unwrap();
        let enc = GraphSeqModel::new("enc", n, d, h, Role::Encoder);
        enc.register(&mut s, &mut rng).unwrap();
        let dec = GraphSeqModel::new("dec", n, h, h, Role::Decoder);
        dec.register(&mut s, &mut rng).unwrap();

        check("adaptive_adjacency", &s, Mode::Train, |ctx| {
            let a = emb.adjacency(ctx).unwrap();
            reduce(ctx.tape, a)
        });
        check("gcn", &s, Mode::Train, |ctx| {
            let a = emb.adjacency(ctx).unwrap();
            let (x, hv) = (p(ctx, "x"), p(ctx, "h"));
            let out = gcn(ctx, &gate, x, hv, a).unwrap();
            reduce(ctx.tape, out)
        });
        check("cell_step", &s, Mode::Train, |ctx| {
            let a = emb.adjacency(ctx).unwrap();
            let (x, hv) = (p(ctx, "x"), p(ctx, "h"));
            let out = cell.step(ctx, x, hv, a).unwrap();
            reduce(ctx.tape, out)
        });
        check("encode_sequence", &s, Mode::Train, |ctx| {
            let seq = p(ctx, "seq");
            let frames: Vec<Var> = (0..t).map(|i| ctx.tape.slice_rows(seq, i * n, n).unwrap()).collect();
            let out = enc.encode(ctx, &frames).unwrap();
            reduce(ctx.tape, out)
        });
        check("decode_ar", &s, Mode::Train, |ctx| {
            let (tok, hv) = (p(ctx, "token"), p(ctx, "h"));
            let z = dec.decode(ctx, tok, &[hv], steps).unwrap();
            let out = ctx.tape.concat_rows(&z).unwrap();
            reduce(ctx.tape, out)
        });
    }
}

pub fn representor_and_predictor() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (n, features, h) = (
            rng.random_range(2..=3),
            rng.random_range(1..=2),
            rng.random_range(2..=4),
        );
        let t = rng.random_range(1..=3);
        let horizon = rng.random_range(1..=3);
        let bn = BatchNormConfig::default();
        // Three samples per batch: batch norm over only n ≤ 3 rows is
        // degenerate and leaves gradients below finite-difference resolution.
        let rows = 3 * n;

        let mut s = store_with(&[
            ("seq", random(&mut rng, &[t * rows, features], -1.5, 1.5)),
            ("latent", random(&mut rng, &[rows, h], -1.0, 1.0)),
            ("prompt", random(&mut rng, &[rows, h], -1.0, 1.0)),
        ]);
        let ae = AeDenoiser::new("ae", features, h);
        ae.register(&mut s, &mut rng).unwrap();
        let adapter = ClientAdapter::new("ad", h, bn);
        adapter.register(&mut s, &mut rng).unwrap();
        let fr = FederatedRepresentor::new(n, features, h, 1, true, bn);
        fr.register(&mut s, &mut rng).unwrap();
        let pp = PersonalizedPredictor::new(n, features, h, 1, horizon, Some(3));
        pp.register(&mut s, &mut rng).unwrap();

        check("ae_encode", &s, Mode::Train, |ctx| {
            let x = p(ctx, "seq");
            let out = ae.encode(ctx, x).unwrap();
            reduce(ctx.tape, out)
        });
        check("ae_decode", &s, Mode::Train, |ctx| {
            let z = p(ctx, "latent");
            let out = ae.decode(ctx, z).unwrap();
            reduce(ctx.tape, out)
        });
        for mode in [Mode::Train, Mode::Eval] {
            check("adapter", &s, mode, |ctx| {
                let z = p(ctx, "latent");
                let out = adapter.forward(ctx, z).unwrap();
                reduce(ctx.tape, out)
            });
        }
        check("make_prompt", &s, Mode::Train, |ctx| {
            let seq = p(ctx, "seq");
            let frames: Vec<Var> = (0..t)
                .map(|i| ctx.tape.slice_rows(seq, i * rows, rows).unwrap())
                .collect();
            let prompt = fr.prompt(ctx, seq, &frames).unwrap();
            let g = reduce(ctx.tape, prompt.global);
            let r = reduce(ctx.tape, prompt.reconstruction.unwrap());
            ctx.tape.add(g, r).unwrap()
        });
        check("predict", &s, Mode::Train, |ctx| {
            let seq = p(ctx, "seq");
            let frames: Vec<Var> = (0..t)
                .map(|i| ctx.tape.slice_rows(seq, i * rows, rows).unwrap())
                .collect();
            let prompt = p(ctx, "prompt");
            let out = pp.predict(ctx, &frames, prompt).unwrap();
            reduce(ctx.tape, out)
        });
    }
}

fn tiny_model(wiring: Wiring, alpha_gradient: AlphaGradient, seed: u64) -> (ClientModel, ParamStore, Batch) {
    let spec = SyntheticSpec {
        clients: 1,
        nodes: 2,
        length: 60,
        history: 3,
        horizon: 2,
        seed,
        base_level: 2.0,
        daily_amplitude: 1.0,
        weekly_amplitude: 0.3,
        disturbance_scale: 0.2,
        noise: 0.2,
        ..SyntheticSpec::default()
    };
    let series = generate_synthetic(&spec).unwrap();
    let data = window_and_split(&series[0], 3, 2).unwrap();
    let config = ModelConfig {
        hidden: 3,
        history: 3,
        horizon: 2,
        loss: LossConfig {
            alpha_gradient,
            ..LossConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = ClientModel::new(data.nodes, data.features, &config, wiring);
    let mut store = ParamStore::new();
    model
        .register(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    let samples: Vec<_> = data.train.iter().take(3).collect();
    let batch = Batch::new(&samples, &data).unwrap();
    (model, store, batch)
}

pub fn total_loss() {
    for seed in 0..2 {
        let (model, store, batch) = tiny_model(Wiring::Prompted { denoiser: true }, AlphaGradient::Through, seed);
        check("total loss (α differentiated)", &store, Mode::Train, |ctx| {
            model.loss(ctx.tape, ctx.store, &batch).unwrap().0
        });
    }
}

/// With the weight held constant the tape differentiates `L_pre + α·L_ae`
/// at the evaluated α.
pub fn total_loss_with_detached_weight() {
    let (model, store, batch) = tiny_model(Wiring::Prompted { denoiser: true }, AlphaGradient::Detached, 5);
    let terms = |s: &ParamStore| model.loss(&mut Tape::new(), &mut s.clone(), &batch).unwrap().1;
    let alpha = terms(&store).alpha;
    assert!(alpha > 0.0);
    check_against(
        "total loss (α detached)",
        &store,
        Mode::Train,
        |ctx| model.loss(ctx.tape, ctx.store, &batch).unwrap().0,
        |s| {
            let t = terms(s);
            t.prediction + alpha * t.ae
        },
    );
}

pub fn baseline_wirings_have_exact_gradients() {
    for wiring in [Wiring::Unprompted, Wiring::Prompted { denoiser: false }] {
        let (model, store, batch) = tiny_model(wiring, AlphaGradient::Detached, 9);
        check("baseline loss", &store, Mode::Train, |ctx| {
            model.loss(ctx.tape, ctx.store, &batch).unwrap().0
        });
    }
}
