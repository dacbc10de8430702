//! Forward passes checked against straight-loop reimplementations.

use autofed::autodiff::Tape;
use autofed::graph::{adaptive_adjacency, decode_ar, encode_sequence, AgcrnCell, GraphSeqModel, Role};
use autofed::nn::{Ctx, Linear, Mode};
use autofed::params::ParamStore;
use autofed::predictor::{predict, Head, PersonalizedPredictor};
use autofed::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

const TOL: f64 = 1e-12;
const INSTANCES: u64 = 120;

fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn adjacency(e: &Mat) -> Mat {
    let n = e.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = e[i].iter().zip(&e[j]).map(|(x, y)| x * y).sum();
            a[i][j] = dot.max(0.0);
        }
        let m = a[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = a[i].iter().map(|v| (v - m).exp()).sum();
        for v in a[i].iter_mut() {
            *v = (*v - m).exp() / z;
        }
    }
    a
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `Ã · ([x ∥ h] · W) + b` elementwise.
fn gate(store: &ParamStore, lin: &Linear, adj: &Mat, x: &Mat, h: &Mat) -> Mat {
    let w = mat(store.get(&lin.weight_name()).unwrap());
    let b = store.get(&lin.bias_name()).unwrap().data().to_vec();
    let joined: Mat = x
        .iter()
        .zip(h)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    let mut out = matmul(adj, &matmul(&joined, &w));
    for row in out.iter_mut() {
        for (v, bj) in row.iter_mut().zip(&b) {
            *v += bj;
        }
    }
    out
}

fn cell_ref(store: &ParamStore, cell: &AgcrnCell, adj: &Mat, x: &Mat, h: &Mat) -> Mat {
    let u = gate(store, &cell.update, adj, x, h);
    let r = gate(store, &cell.reset, adj, x, h);
    let rh: Mat = (0..h.len())
        .map(|i| (0..h[i].len()).map(|j| sigmoid(r[i][j]) * h[i][j]).collect())
        .collect();
    let c = gate(store, &cell.candidate, adj, x, &rh);
    (0..h.len())
        .map(|i| {
            (0..h[i].len())
                .map(|j| {
                    let ui = sigmoid(u[i][j]);
                    ui * h[i][j] + (1.0 - ui) * c[i][j].tanh()
                })
                .collect()
        })
        .collect()
}

fn embedding(store: &ParamStore, model: &GraphSeqModel) -> Mat {
    mat(store.get(&model.embedding.name).unwrap())
}

fn encode_ref(store: &ParamStore, model: &GraphSeqModel, frames: &[Mat]) -> Vec<Mat> {
    let adj = adjacency(&embedding(store, model));
    let n = frames[0].len();
    let mut states = vec![vec![vec![0.0; model.hidden()]; n]; model.depth()];
    for f in frames {
        let mut input = f.clone();
        for (cell, s) in model.cells.iter().zip(states.iter_mut()) {
            *s = cell_ref(store, cell, &adj, &input, s);
            input = s.clone();
        }
    }
    states
}

fn decode_ref(store: &ParamStore, model: &GraphSeqModel, token: &Mat, init: &[Mat], steps: usize) -> Vec<Mat> {
    let adj = adjacency(&embedding(store, model));
    let mut states = init.to_vec();
    let mut input = token.clone();
    let mut out = Vec::new();
    for _ in 0..steps {
        for (cell, s) in model.cells.iter().zip(states.iter_mut()) {
            *s = cell_ref(store, cell, &adj, &input, s);
            input = s.clone();
        }
        out.push(input.clone());
    }
    out
}

fn head_ref(store: &ParamStore, head: &Head, z: &Mat) -> Vec<f64> {
    let linear = |lin: &Linear, x: &Mat| -> Mat {
        let w = mat(store.get(&lin.weight_name()).unwrap());
        let b = store.get(&lin.bias_name()).unwrap().data().to_vec();
        matmul(x, &w)
            .into_iter()
            .map(|row| row.iter().zip(&b).map(|(v, bj)| v + bj).collect())
            .collect()
    };
    let out = match head {
        Head::Linear(l) => linear(l, z),
        Head::Perceptron(p) => {
            let hidden: Mat = linear(&p.first, z)
                .into_iter()
                .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
                .collect();
            linear(&p.second, &hidden)
        }
    };
    out.into_iter().map(|row| row[0]).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn frames(t: &Tensor) -> Vec<Mat> {
    let (steps, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..steps)
        .map(|s| (0..n).map(|i| (0..d).map(|f| t.at(&[s, i, f])).collect()).collect())
        .collect()
}

fn assert_close(actual: &[f64], expected: &[f64], what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!((a - e).abs() <= TOL * e.abs().max(1.0), "{what}[{i}]: {a} vs {e}");
    }
}

fn flatten(ms: &[Mat]) -> Vec<f64> {
    ms.iter().flatten().flatten().copied().collect()
}

/// Random dimensions `(n, H, h, T, T')` for one tiny instance.
fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    (
        rng.random_range(1..=5),
        rng.random_range(1..=3),
        rng.random_range(1..=5),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    )
}

pub fn cell_step_matches_loops() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, h, _, _) = dims(&mut rng);
        let cell = AgcrnCell::new("c", d, h);
        let mut store = ParamStore::new();
        cell.register(&mut store, &mut rng).unwrap();
        let e = random_tensor(&mut rng, &[n, h], 1.5);
        let x = random_tensor(&mut rng, &[n, d], 2.0);
        let prev = random_tensor(&mut rng, &[n, h], 1.0);

        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let adj = adaptive_adjacency(&mut tape, ev).unwrap();
        let xv = tape.constant(x.clone());
        let hv = tape.constant(prev.clone());
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        let out = cell.step(&mut ctx, xv, hv, adj).unwrap();

        let expected = cell_ref(&store, &cell, &adjacency(&mat(&e)), &mat(&x), &mat(&prev));
        assert_close(tape.value(out).data(), &flatten(&[expected]), &format!("seed {seed}"));
    }
}

pub fn encode_sequence_matches_loops() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (n, d, h, t, _) = dims(&mut rng);
        let model = GraphSeqModel::new("enc", n, d, h, Role::Encoder);
        let mut store = ParamStore::new();
        model.register(&mut store, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[t, n, d], 2.0);
        let got = encode_sequence(&model, &store, &x).unwrap();
        let expected = encode_ref(&store, &model, &frames(&x));
        assert_close(got.data(), &flatten(&expected[..1]), &format!("seed {seed}"));
    }
}

pub fn stacked_encoder_matches_loops() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1500 + seed);
        let (n, d, h, t, _) = dims(&mut rng);
        let model = GraphSeqModel::stacked("enc", n, d, h, 2, Role::Encoder);
        let mut store = ParamStore::new();
        model.register(&mut store, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[t, n, d], 2.0);
        let got = encode_sequence(&model, &store, &x).unwrap();
        let expected = encode_ref(&store, &model, &frames(&x));
        assert_close(got.data(), &flatten(&expected[1..]), &format!("seed {seed}"));
    }
}

pub fn decode_ar_matches_loops() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (n, _, h, _, steps) = dims(&mut rng);
        let model = GraphSeqModel::new("dec", n, h, h, Role::Decoder);
        let mut store = ParamStore::new();
        model.register(&mut store, &mut rng).unwrap();
        let prompt = random_tensor(&mut rng, &[n, h], 1.0);
        let init = random_tensor(&mut rng, &[n, h], 1.0);
        let got = decode_ar(&model, &store, &prompt, &init, steps).unwrap();
        assert_eq!(got.shape(), &[steps, n, h]);
        let expected = decode_ref(&store, &model, &mat(&prompt), &[mat(&init)], steps);
        assert_close(got.data(), &flatten(&expected), &format!("seed {seed}"));
    }
}

pub fn predict_matches_loops() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (n, d, h, t, steps) = dims(&mut rng);
        let layers = 1 + (seed % 2) as usize;
        let head_hidden = (seed % 3 == 0).then_some(3);
        let pp = PersonalizedPredictor::new(n, d, h, layers, steps, head_hidden);
        let mut store = ParamStore::new();
        pp.register(&mut store, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[t, n, d], 2.0);
        let prompt = random_tensor(&mut rng, &[n, h], 1.0);
        let got = predict(&pp, &store, &x, &prompt).unwrap();
        assert_eq!(got.shape(), &[steps, n]);

        let states = encode_ref(&store, &pp.encoder, &frames(&x));
        let z = decode_ref(&store, &pp.decoder, &mat(&prompt), &states, steps);
        let expected: Vec<f64> = z.iter().flat_map(|zs| head_ref(&store, &pp.head, zs)).collect();
        assert_close(got.data(), &expected, &format!("seed {seed}"));
    }
}

fn zero_weights(store: &mut ParamStore) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        store.get_mut(&name).unwrap().data_mut().fill(0.0);
    }
}

pub fn zero_parameters_halve_the_state_each_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, h) = (4, 2, 3);
    let cell = AgcrnCell::new("c", d, h);
    let mut store = ParamStore::new();
    cell.register(&mut store, &mut rng).unwrap();
    zero_weights(&mut store);
    let mut state = random_tensor(&mut rng, &[n, h], 3.0);
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    for step in 0..10 {
        let mut tape = Tape::new();
        let e = tape.constant(random_tensor(&mut rng, &[n, h], 1.0));
        let adj = adaptive_adjacency(&mut tape, e).unwrap();
        let x = tape.constant(random_tensor(&mut rng, &[n, d], 5.0));
        let prev = tape.constant(state.clone());
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        let next = cell.step(&mut ctx, x, prev, adj).unwrap();
        let next = tape.value(next).clone();
        assert_eq!(norm(&next), 0.5 * norm(&state), "step {step}");
        state = next;
    }
}

pub fn adjacency_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let n = rng.random_range(1..=12);
        let h = rng.random_range(1..=8);
        let scale = [0.1, 1.0, 5.0][i % 3];
        let e = random_tensor(&mut rng, &[n, h], scale);
        let mut tape = Tape::new();
        let v = tape.constant(e);
        let a = adaptive_adjacency(&mut tape, v).unwrap();
        for row in tape.value(a).data().chunks(n) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "instance {i}: row sum {s}");
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}

pub fn zero_embedding_gives_uniform_adjacency() {
    for n in 1..=16 {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[n, 3]));
        let a = adaptive_adjacency(&mut tape, v).unwrap();
        assert!(tape.value(a).data().iter().all(|v| *v == 1.0 / n as f64), "n = {n}");
    }
}
