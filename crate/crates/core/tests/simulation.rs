use std::path::Path;

use fedlp::config::{RunConfig, RunManifest};
use fedlp::data::{generate_synthetic, write_idx};
use fedlp::metrics::write_csv;
use fedlp::orchestrator::{select_participants, ClientScheme};
use fedlp::rng::{Purpose, SeedTree};
use fedlp::{
    DataSource, Dataset, ExperimentConfig, LayeredModel, LcDistribution, LprConfig, Matrix,
    PartitionScheme, Scheme, Simulation,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(scheme: Scheme) -> ExperimentConfig {
    ExperimentConfig {
        num_clients: 8,
        participation_rate: 0.5,
        local_epochs: 1,
        batch_size: 8,
        max_global_epochs: 6,
        eval_every: 2,
        scheme,
        data: DataSource::Synthetic {
            num_classes: 4,
            samples_per_class: 40,
            feature_dim: 6,
            class_separation: 5.0,
            test_per_class: 10,
        },
        hidden: vec![8, 8, 6, 5],
        master_seed: 19,
        ..ExperimentConfig::default()
    }
}

fn csv_of(sim: &Simulation) -> String {
    let mut buf = Vec::new();
    write_csv(sim.history(), &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn bits(m: &LayeredModel) -> Vec<u64> {
    m.blocks()
        .iter()
        .flat_map(|b| b.weights.as_slice().iter().chain(&b.bias))
        .map(|v| v.to_bits())
        .collect()
}

fn run(cfg: ExperimentConfig) -> Simulation {
    let mut sim = Simulation::new(cfg).unwrap();
    sim.run().unwrap();
    sim
}

#[test]
fn selection_is_uniform() {
    let seeds = SeedTree::new(5);
    let rounds = 10_000u64;
    let mut hits = [0u64; 20];
    for r in 0..rounds {
        let p = select_participants(20, 5, &mut seeds.stream(Purpose::Selection, 0, r)).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        for id in p {
            hits[id] += 1;
        }
    }
    // each client selected w.p. 0.25; 4 sd bound
    let sd = (0.25f64 * 0.75 / rounds as f64).sqrt();
    for h in hits {
        let f = h as f64 / rounds as f64;
        assert!((f - 0.25).abs() < 4.0 * sd, "{f}");
    }
}

#[test]
fn default_synthetic_task_is_nearly_separable() {
    let cfg = ExperimentConfig {
        master_seed: 1,
        ..ExperimentConfig::default()
    };
    let (train, test) = cfg.load_data().unwrap();
    let dim = train.feature_dim();
    let mut centroids = vec![vec![0.0; dim]; train.num_classes];
    let mut counts = vec![0usize; train.num_classes];
    for i in 0..train.len() {
        let y = train.labels[i];
        counts[y] += 1;
        for (c, x) in centroids[y].iter_mut().zip(train.features.row(i)) {
            *c += x;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.features.row(i);
            let best = (0..centroids.len())
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == test.labels[i]
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
}

#[test]
fn reruns_are_byte_identical() {
    let a = run(small(Scheme::FedLpHomo(LprConfig::uniform(0.5, 5).unwrap())));
    let b = run(small(Scheme::FedLpHomo(LprConfig::uniform(0.5, 5).unwrap())));
    assert_eq!(csv_of(&a), csv_of(&b));
    assert_eq!(bits(&a.global().model), bits(&b.global().model));
}

#[test]
fn golden_csv() {
    let sim = run(small(Scheme::FedLpHomo(LprConfig::uniform(0.5, 5).unwrap())));
    let text = csv_of(&sim);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_homo.csv");
    if std::env::var_os("FEDLP_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, golden);
    // rounds 2, 4, 6
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn worker_count_does_not_change_results() {
    for scheme in [
        Scheme::FedAvg,
        Scheme::FedLpHomo(LprConfig::uniform(0.4, 5).unwrap()),
        Scheme::FedLpHetero(LcDistribution::uniform(5)),
    ] {
        let serial = run(small(scheme.clone()));
        let parallel = run(ExperimentConfig {
            workers: 3,
            ..small(scheme)
        });
        assert_eq!(csv_of(&serial), csv_of(&parallel));
        assert_eq!(bits(&serial.global().model), bits(&parallel.global().model));
        for (a, b) in serial.clients().iter().zip(parallel.clients()) {
            assert_eq!(bits(&a.model), bits(&b.model));
        }
    }
}

#[test]
fn manifest_reproduces_the_run() {
    let text = "
[experiment]
num_clients = 8
participation_rate = 0.5
local_epochs = 1
max_global_epochs = 4
eval_every = 1
seed = 23
[scheme]
scheme = fedlp_hetero
lc_distribution = 3
[partition]
partition = dirichlet
alpha = 0.5
[data]
num_classes = 4
samples_per_class = 30
feature_dim = 5
test_per_class = 5
[model]
hidden = 6,6,6,6
";
    let rc = RunConfig::from_text(text, &[]).unwrap();
    let first = run(rc.experiment.clone());
    let manifest = RunManifest { config: rc, config_source: None }.render();
    let again = RunConfig::from_text(&manifest, &[]).unwrap();
    let second = run(again.experiment);
    assert_eq!(csv_of(&first), csv_of(&second));
}

#[test]
fn hetero_heads_stay_local() {
    let mut sim = Simulation::new(small(Scheme::FedLpHetero(LcDistribution::uniform(5)))).unwrap();
    for _ in 0..4 {
        let heads_before: Vec<Option<Vec<u64>>> = sim
            .clients()
            .iter()
            .map(|c| c.model.head().map(|h| h.weights.as_slice().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let out = sim.run_round().unwrap();
        for c in sim.clients() {
            let ClientScheme::Hetero(a) = c.scheme_state else { panic!("not hetero") };
            assert_eq!(c.model.num_prunable(), a.layer_count);
            for l in 1..=a.layer_count {
                assert_eq!(c.model.layer(l).unwrap(), sim.global().model.layer(l).unwrap());
            }
            let head: Option<Vec<u64>> =
                c.model.head().map(|h| h.weights.as_slice().iter().map(|v| v.to_bits()).collect());
            if !out.participants.contains(&c.id) {
                assert_eq!(head, heads_before[c.id], "idle client {} head changed", c.id);
            }
        }
        if out.metrics.is_evaluated() {
            assert!(out.metrics.personalized_accuracy.is_some());
        }
    }
}

#[test]
fn hetero_download_is_shared_prefix_only() {
    let mut sim = Simulation::new(small(Scheme::FedLpHetero(LcDistribution::uniform(5)))).unwrap();
    let out = sim.run_round().unwrap();
    let expected: u64 = out
        .uploads
        .iter()
        .map(|u| {
            let m = &sim.clients()[u.client].model;
            m.param_count(Some(&(1..=m.num_prunable()).collect::<Vec<_>>())).unwrap()
        })
        .sum();
    assert_eq!(out.metrics.download_params, expected);
    assert_eq!(out.metrics.upload_params, expected);
}

#[test]
fn homo_zero_rate_never_moves_the_global_model() {
    let mut sim = Simulation::new(small(Scheme::FedLpHomo(LprConfig::uniform(0.0, 5).unwrap()))).unwrap();
    let start = bits(&sim.global().model);
    sim.run().unwrap();
    assert_eq!(bits(&sim.global().model), start);
    assert!(sim.history().iter().all(|m| m.upload_params == 0));
}

fn to_unit_range(d: &Dataset) -> Dataset {
    let lo = d.features.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.features.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data = d.features.as_slice().iter().map(|v| (v - lo) / (hi - lo)).collect();
    Dataset::new(
        Matrix::from_vec(d.len(), d.feature_dim(), data).unwrap(),
        d.labels.clone(),
        d.num_classes,
    )
    .unwrap()
}

#[test]
fn runs_from_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let raw = generate_synthetic(3, 40, 4, 6.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let data = to_unit_range(&raw);
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    write_idx(&data, 2, 2, &img, &lab).unwrap();
    let cfg = ExperimentConfig {
        data: DataSource::Idx {
            train_images: img,
            train_labels: lab,
            test_images: None,
            test_labels: None,
            test_fraction: 0.25,
        },
        partition: PartitionScheme::Iid,
        hidden: vec![5],
        ..small(Scheme::FedAvg)
    };
    let sim = run(cfg);
    assert_eq!(sim.train_set().len() + sim.test_set().len(), 120);
    assert_eq!(sim.test_set().len(), 30);
    assert!(sim.history().last().unwrap().test_accuracy.is_some());
}

#[test]
fn reference_model_size() {
    let sim = Simulation::new(ExperimentConfig { master_seed: 0, ..ExperimentConfig::default() }).unwrap();
    let m = &sim.global().model;
    // 64-128-128-128-64-10, weights plus biases
    let hand = (64 * 128 + 128) + 2 * (128 * 128 + 128) + (128 * 64 + 64) + (64 * 10 + 10);
    assert_eq!(hand, 50_250);
    assert_eq!(m.param_count(None).unwrap(), hand);
    let per_layer: u64 = (1..=5).map(|l| m.param_count(Some(&[l])).unwrap()).sum();
    assert_eq!(per_layer, 50_250);
}
