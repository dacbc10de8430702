use std::path::Path;

use autofed::config::RunConfig;
use autofed::experiment::{self, build_clients, load_series};
use autofed::federation::{aggregate, run_training, ClientState, Weighting};
use autofed::model::ClientModel;
use autofed::params::{ParamStore, Snapshot};
use autofed::report::{Report, ReportLine};
use autofed::strategy::{comm_cost, StrategyName, StrategySpec};
use autofed::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(strategy: &str, extra: &str, out: &Path) -> RunConfig {
    let text = format!(
        r#"
output_dir = "{}"

[strategy]
name = "{strategy}"
{extra}

[model]
hidden = 4
history = 4
horizon = 2

[federation]
rounds = 1
batch_size = 16
learning_rate = 0.01
seed = 3
validate = false

[data.synthetic]
clients = 4
nodes = 4
length = 400
"#,
        out.display()
    );
    RunConfig::parse(&text, Path::new("test.toml"), Path::new("."), None).unwrap()
}

fn clients_for(cfg: &RunConfig) -> Vec<ClientState> {
    let series = load_series(cfg).unwrap();
    build_clients(cfg, &series).unwrap().0
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn shared_tensors_agree_and_adapter_norms_diverge() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("autofed", "", dir.path());
    let mut clients = clients_for(&cfg);
    let shared = clients[0].params.shared_names();
    assert!(!shared.is_empty());
    for round in 0..10 {
        run_training(&mut clients, &cfg.federation, |_| Ok(())).unwrap();
        for name in &shared {
            let reference = bits(clients[0].params.get(name).unwrap());
            for c in &clients[1..] {
                assert_eq!(
                    bits(c.params.get(name).unwrap()),
                    reference,
                    "round {round}: {name} on client {}",
                    c.id
                );
            }
        }
        for stat in ["fr.adapter.bn1.running_mean", "fr.adapter.bn2.running_mean"] {
            for a in 0..clients.len() {
                for b in a + 1..clients.len() {
                    let x = clients[a].params.get(stat).unwrap().data();
                    let y = clients[b].params.get(stat).unwrap().data();
                    let gap = x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                    assert!(
                        gap > 1e-6,
                        "round {round}: {stat} of clients {a} and {b} differ by {gap}"
                    );
                }
            }
        }
    }
}

pub fn scalar_aggregate() {
    let scalar = |v: f64| {
        let mut s = Snapshot::default();
        s.entries.insert("theta".into(), Tensor::new(&[1], vec![v]).unwrap());
        s
    };
    let theta = scalar(1.0);
    let (a, b) = (scalar(0.2), scalar(0.4));
    let out = aggregate(&theta, &[(&a, 1), (&b, 1)], Weighting::Uniform).unwrap();
    assert_eq!(out.get("theta").unwrap().data(), &[1.3]);
    let weighted = aggregate(&theta, &[(&a, 1), (&b, 3)], Weighting::NodeWeighted).unwrap();
    assert!((weighted.get("theta").unwrap().data()[0] - 1.35).abs() < 1e-15);
    assert!(aggregate(&theta, &[], Weighting::Uniform).is_err());
}

fn store(strategy: StrategySpec, features: usize, hidden: usize) -> ParamStore {
    let model_cfg = autofed::model::ModelConfig {
        hidden,
        history: 2,
        horizon: 2,
        ..Default::default()
    };
    let model = ClientModel::new(3, features, &model_cfg, strategy.wiring());
    let mut store = ParamStore::new();
    model.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    strategy.partition(&mut [&mut store]).unwrap();
    store
}

pub fn comm_cost_matches_hand_count() {
    // One input feature, hidden width 2:
    //   AE encoder 1→2→2: (1·2 + 2) + (2·2 + 2) = 10
    //   AE decoder 2→2→1: (2·2 + 2) + (2·1 + 1) = 9
    //   adapter linears 2→2 twice: 2·(2·2 + 2) = 12
    let s = store(StrategySpec::plain(StrategyName::Autofed), 1, 2);
    assert_eq!(comm_cost(&s), 31);
}

pub fn comm_cost_ordering() {
    for (features, hidden) in [(1, 2), (1, 8), (2, 4), (3, 16)] {
        let cost = |name| comm_cost(&store(StrategySpec::plain(name), features, hidden));
        let autofed = cost(StrategyName::Autofed);
        let fedavg = cost(StrategyName::Fedavg);
        assert!(
            autofed > 0 && autofed < fedavg,
            "{features}/{hidden}: {autofed} vs {fedavg}"
        );
        assert!(cost(StrategyName::Fedper) < fedavg);
        assert_eq!(cost(StrategyName::Local), 0);
        let full = store(StrategySpec::plain(StrategyName::Fedavg), features, hidden);
        assert_eq!(fedavg, full.numel() - buffers(&full));
    }
}

fn buffers(store: &ParamStore) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.kind == autofed::params::Kind::Buffer)
        .map(|(_, p)| p.tensor.numel())
        .sum()
}

pub fn single_client_fedavg_equals_local() {
    let dir = tempfile::tempdir().unwrap();
    let patch = |cfg: &mut RunConfig| {
        cfg.data.synthetic.as_mut().unwrap().clients = 1;
        cfg.federation.rounds = 3;
    };
    let mut a = config("fedavg", "", dir.path());
    let mut b = config("local", "", dir.path());
    patch(&mut a);
    patch(&mut b);
    let mut ca = clients_for(&a);
    let mut cb = clients_for(&b);
    run_training(&mut ca, &a.federation, |_| Ok(())).unwrap();
    run_training(&mut cb, &b.federation, |_| Ok(())).unwrap();
    // Θ + (Θ₁ − Θ) can differ from Θ₁ in the last bit, nothing more.
    for name in ca[0].params.names() {
        let x = ca[0].params.get(name).unwrap().data();
        let y = cb[0].params.get(name).unwrap().data();
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0), "{name}: {p} vs {q}");
        }
    }
}

pub fn without_ae_has_no_reconstruction_term() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("autofed", "without_ae = true", dir.path());
    cfg.federation.rounds = 2;
    cfg.federation.log_batches = true;
    let mut clients = clients_for(&cfg);
    assert!(clients[0].params.names().all(|n| !n.starts_with("fr.ae.")));
    let reports = run_training(&mut clients, &cfg.federation, |_| Ok(())).unwrap();
    let mut seen = 0;
    for r in &reports {
        for c in &r.clients {
            for t in &c.batches {
                assert_eq!((t.alpha, t.ae), (0.0, 0.0));
                assert_eq!(t.total, t.prediction);
                seen += 1;
            }
        }
    }
    assert!(seen > 0);
}

pub fn logged_total_loss_identity() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("autofed", "", dir.path());
    cfg.federation.rounds = 5;
    cfg.federation.log_batches = true;
    let outcome = experiment::run(&cfg).unwrap();
    let report = Report::read(&outcome.report).unwrap();
    assert_eq!(report.rounds.len(), 5);
    let mut checked = 0;
    for round in &report.rounds {
        for c in &round.clients {
            for t in &c.batches {
                if t.prediction > 1e-8 {
                    let expected = t.prediction + t.ae * t.ae / t.prediction;
                    assert!(
                        (t.total - expected).abs() <= 1e-10,
                        "round {}: {} vs {expected}",
                        round.round,
                        t.total
                    );
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 0);
    match &report.header {
        ReportLine::Header { config, .. } => assert_eq!(**config, cfg),
        _ => unreachable!(),
    }
}

pub fn partial_participation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("fedper", "", dir.path());
    cfg.federation.rounds = 4;
    cfg.federation.fraction = 0.5;
    let first = run_training(&mut clients_for(&cfg), &cfg.federation, |_| Ok(())).unwrap();
    let second = run_training(&mut clients_for(&cfg), &cfg.federation, |_| Ok(())).unwrap();
    assert_eq!(first, second);
    for r in &first {
        assert_eq!(r.participants.len(), 2);
        assert_eq!(r.clients.iter().filter(|c| c.participated).count(), 2);
    }
    let per_client = comm_cost(&clients_for(&cfg)[0].params);
    assert_eq!(first[0].shared_params_transmitted, 2 * per_client * 2);
}
