//! Acceptance criteria A1-A8. Runs as a plain binary (no libtest harness)
//! so every criterion prints exactly one PASS/FAIL line.

use std::process::ExitCode;
use std::time::Instant;

use fedlp::data::generate_synthetic;
use fedlp::metrics::write_csv;
use fedlp::model::{Activation, LayerBlock};
use fedlp::orchestrator::ClientScheme;
use fedlp::partition::partition;
use fedlp::prop1::closed_form;
use fedlp::{
    verify_prop1, DataSource, ExperimentConfig, LayeredModel, LcDistribution, LprConfig,
    Matrix, PartitionScheme, PartitionSpec, Scheme, Simulation,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const A1_SEEDS: [u64; 3] = [101, 202, 303];
const A1_ROUNDS: u32 = 20;
const A2_TRIALS: u64 = 1_000_000;
const A2_TOL: f64 = 0.005;
const A3_ROUNDS: u32 = 200;
const A3_REL_TOL: f64 = 0.05;
const A4_ROUNDS: u32 = 50;
const A4_FEDAVG_MIN: f64 = 0.90;
const A4_HOMO07_MAX_GAP: f64 = 0.05;
const A4_HOMO01_MIN: f64 = 0.50;
const A5_ROUNDS: u32 = 50;
const A7_ALPHA_TOL: f64 = 0.02;
const A8_MODELS: usize = 100;
const A8_REL_TOL: f64 = 1e-4;
const A8_STEP: f64 = 1e-5;
/// Relative error uses `max(|analytic|, |numeric|, A8_FLOOR)` as denominator
/// so entries that are zero up to rounding are compared absolutely.
const A8_FLOOR: f64 = 1e-6;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

/// N=20, K=5 on the default synthetic task.
fn desk(seed: u64, scheme: Scheme, rounds: u32, local_epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        num_clients: 20,
        participation_rate: 0.25,
        local_epochs,
        max_global_epochs: rounds,
        eval_every: 1,
        scheme,
        master_seed: seed,
        ..ExperimentConfig::default()
    }
}

fn homo(p: f64) -> Scheme {
    Scheme::FedLpHomo(LprConfig::uniform(p, ExperimentConfig::default().num_layers()).unwrap())
}

fn params_bits(m: &LayeredModel) -> Vec<u64> {
    m.blocks()
        .iter()
        .flat_map(|b| b.weights.as_slice().iter().chain(&b.bias))
        .map(|v| v.to_bits())
        .collect()
}

fn csv_bytes(sim: &Simulation) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(sim.history(), &mut buf).unwrap();
    buf
}

fn a1() -> Outcome {
    for seed in A1_SEEDS {
        let mut avg = Simulation::new(desk(seed, Scheme::FedAvg, A1_ROUNDS, 2)).map_err(|e| e.to_string())?;
        let mut lp = Simulation::new(desk(seed, homo(1.0), A1_ROUNDS, 2)).map_err(|e| e.to_string())?;
        for r in 1..=A1_ROUNDS {
            avg.run_round().map_err(|e| e.to_string())?;
            lp.run_round().map_err(|e| e.to_string())?;
            if params_bits(&avg.global().model) != params_bits(&lp.global().model) {
                return Err(format!("seed {seed}: global models diverge at round {r}"));
            }
        }
        if csv_bytes(&avg) != csv_bytes(&lp) {
            return Err(format!("seed {seed}: metrics CSVs differ"));
        }
    }
    Ok(format!("{} seeds x {A1_ROUNDS} rounds bit-identical", A1_SEEDS.len()))
}

fn a2() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in [2, 5, 10] {
        for p in [0.1, 0.3, 0.5, 0.9] {
            let r = verify_prop1(k, p, A2_TRIALS, 7).map_err(|e| e.to_string())?;
            if r.closed_form != closed_form(k, p) {
                return Err(format!("K={k} p={p}: closed form mismatch"));
            }
            if r.abs_error > A2_TOL {
                return Err(format!(
                    "K={k} p={p}: empirical {:.6} vs {:.6}, error {:.2e} > {A2_TOL}",
                    r.empirical_ratio, r.closed_form, r.abs_error
                ));
            }
            worst = worst.max(r.abs_error);
        }
    }
    Ok(format!("12 cells, max |error| {worst:.2e} <= {A2_TOL}"))
}

fn a3() -> Outcome {
    let mut notes = Vec::new();
    for p in [0.1, 0.5] {
        let cfg = ExperimentConfig {
            num_clients: 20,
            participation_rate: 0.25,
            local_epochs: 1,
            max_global_epochs: A3_ROUNDS,
            eval_every: A3_ROUNDS,
            scheme: homo(p),
            master_seed: 3,
            data: DataSource::Synthetic {
                num_classes: 10,
                samples_per_class: 20,
                feature_dim: 64,
                class_separation: 7.0,
                test_per_class: 2,
            },
            ..ExperimentConfig::default()
        };
        let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
        let theta = sim.global().model.param_count(None).unwrap() as f64;
        sim.run().map_err(|e| e.to_string())?;
        let comm: u64 = sim.history().iter().map(|m| m.upload_params + m.download_params).sum();
        let participants: usize = sim.history().iter().map(|m| m.participants).sum();
        let ratio = comm as f64 / participants as f64 / theta;
        let target = 1.0 + p;
        if ((ratio - target) / target).abs() > A3_REL_TOL {
            return Err(format!("p={p}: ratio {ratio:.4} vs {target} outside +-5%"));
        }
        notes.push(format!("p={p}: {ratio:.4} (target {target})"));
    }
    Ok(notes.join(", "))
}

fn a4() -> Outcome {
    let run = |scheme: Scheme| -> Result<f64, String> {
        let mut sim = Simulation::new(desk(4, scheme, A4_ROUNDS, 5)).map_err(|e| e.to_string())?;
        sim.run().map_err(|e| e.to_string())?;
        sim.history()
            .last()
            .and_then(|m| m.test_accuracy)
            .ok_or_else(|| "no final accuracy".to_string())
    };
    let avg = run(Scheme::FedAvg)?;
    let h07 = run(homo(0.7))?;
    let h01 = run(homo(0.1))?;
    let summary = format!("FedAvg {avg:.4}, Homo(0.7) {h07:.4}, Homo(0.1) {h01:.4}");
    if avg < A4_FEDAVG_MIN {
        return Err(format!("{summary}: FedAvg below {A4_FEDAVG_MIN}"));
    }
    if avg - h07 > A4_HOMO07_MAX_GAP {
        return Err(format!("{summary}: Homo(0.7) gap above {A4_HOMO07_MAX_GAP}"));
    }
    if h01 <= A4_HOMO01_MIN {
        return Err(format!("{summary}: Homo(0.1) not above {A4_HOMO01_MIN}"));
    }
    Ok(summary)
}

fn a5() -> Outcome {
    let layers = ExperimentConfig::default().num_layers();
    if layers != 5 {
        return Err(format!("default model has {layers} layers, expected 5"));
    }
    let cfg = desk(5, Scheme::FedLpHetero(LcDistribution::uniform(layers)), A5_ROUNDS, 1);
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let lk: Vec<usize> = sim
        .clients()
        .iter()
        .map(|c| match c.scheme_state {
            ClientScheme::Hetero(a) => a.layer_count,
            _ => 0,
        })
        .collect();
    if lk.contains(&0) {
        return Err("client without a heterogeneous assignment".into());
    }
    if sim.global().model.has_head() {
        return Err("global model carries a personal head".into());
    }
    let mut uploads = 0;
    for _ in 0..A5_ROUNDS {
        let out = sim.run_round().map_err(|e| e.to_string())?;
        let round = out.metrics.round;
        for u in &out.uploads {
            let k = lk[u.client];
            if u.layers != (1..=k).collect::<Vec<_>>() {
                return Err(format!("round {round}: client {} (L_k={k}) sent {:?}", u.client, u.layers));
            }
            let client = &sim.clients()[u.client];
            if client.model.has_head() != (k < layers) || u.client_has_head != (k < layers) {
                return Err(format!("round {round}: client {} head flag wrong", u.client));
            }
            let body = client.model.param_count(Some(&(1..=k).collect::<Vec<_>>())).unwrap();
            if u.params != body {
                return Err(format!(
                    "round {round}: client {} uploaded {} params, layers 1..{k} hold {body}",
                    u.client, u.params
                ));
            }
            uploads += 1;
        }
        for l in 1..=layers {
            let expect = out.uploads.iter().filter(|u| lk[u.client] >= l).count();
            if out.contributors[l - 1] != expect {
                return Err(format!(
                    "round {round}: layer {l} has {} contributors, expected {expect}",
                    out.contributors[l - 1]
                ));
            }
        }
    }
    Ok(format!("{A5_ROUNDS} rounds, {uploads} payloads checked"))
}

fn a6() -> Outcome {
    let mut sim = Simulation::new(desk(6, Scheme::FedAvg, 5, 1)).map_err(|e| e.to_string())?;
    sim.run_round().map_err(|e| e.to_string())?;
    sim.run_round().map_err(|e| e.to_string())?;
    let layer_bits = |m: &LayeredModel, l: usize| -> Vec<u64> {
        let b = m.layer(l).unwrap();
        b.weights.as_slice().iter().chain(&b.bias).map(|v| v.to_bits()).collect()
    };
    let before = sim.global().model.clone();
    let out = sim
        .run_round_with(&|_, _, mask| mask.set(3, false))
        .map_err(|e| e.to_string())?;
    let after = &sim.global().model;
    if out.contributors[2] != 0 {
        return Err(format!("layer 3 still had {} contributors", out.contributors[2]));
    }
    if layer_bits(&before, 3) != layer_bits(after, 3) {
        return Err("layer 3 changed".into());
    }
    for l in [1, 2, 4, 5] {
        if layer_bits(&before, l) == layer_bits(after, l) {
            return Err(format!("layer {l} did not update"));
        }
    }
    Ok("layer 3 bit-unchanged, layers 1,2,4,5 updated".into())
}

fn a7() -> Outcome {
    let data = generate_synthetic(10, 5000, 2, 3.0, &mut ChaCha8Rng::seed_from_u64(70))
        .map_err(|e| e.to_string())?;
    let n = data.len();
    let split = |scheme: PartitionScheme, clients: usize, seed: u64| {
        partition(
            &data,
            &PartitionSpec { scheme, num_clients: clients },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .map_err(|e| e.to_string())
    };
    let schemes = [
        (PartitionScheme::Iid, n),
        (
            PartitionScheme::MixedShard { shard_size: 250, shards_per_client: 2, uniform_fraction: 0.05 },
            100 * 2 * 250,
        ),
        (PartitionScheme::Dirichlet { alpha: 1.0 }, n),
    ];
    for (scheme, coverage) in schemes {
        let a = split(scheme.clone(), 100, 1)?;
        if !a.is_disjoint(n) {
            return Err(format!("{}: overlapping clients", scheme.name()));
        }
        if a.total_assigned() != coverage {
            return Err(format!(
                "{}: assigned {} of expected {coverage}",
                scheme.name(),
                a.total_assigned()
            ));
        }
        if a != split(scheme.clone(), 100, 1)? {
            return Err(format!("{}: not deterministic in the seed", scheme.name()));
        }
        if a == split(scheme.clone(), 100, 2)? {
            return Err(format!("{}: seed has no effect", scheme.name()));
        }
    }
    let iid = split(PartitionScheme::Iid, 100, 3)?;
    if let Some(bad) = iid.assignments.iter().find(|c| c.len() != 500) {
        return Err(format!("iid client holds {} samples, expected 500", bad.len()));
    }
    let dir = split(PartitionScheme::Dirichlet { alpha: 1e6 }, 100, 4)?;
    let mut worst: f64 = 0.0;
    for c in &dir.assignments {
        let hist = data.class_histogram(c);
        for &h in &hist {
            worst = worst.max((h as f64 / c.len() as f64 - 0.1).abs());
        }
    }
    if worst > A7_ALPHA_TOL {
        return Err(format!("alpha=1e6 proportion off uniform by {worst:.4}"));
    }
    Ok(format!("disjoint, covered, seeded; iid 100x500; alpha=1e6 max dev {worst:.4}"))
}

fn random_model(rng: &mut ChaCha8Rng) -> (LayeredModel, usize) {
    let classes = rng.random_range(2..=4);
    let input = rng.random_range(1..=5);
    let hidden = rng.random_range(0..=2);
    let mut blocks = Vec::new();
    let mut fan_in = input;
    for _ in 0..hidden {
        let width = rng.random_range(1..=5);
        let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Identity };
        blocks.push(LayerBlock::dense_init(fan_in, width, act, rng));
        if rng.random_bool(0.4) {
            blocks.push(LayerBlock::activation_only(width, Activation::Relu));
        }
        fan_in = width;
    }
    blocks.push(LayerBlock::dense_init(fan_in, classes, Activation::SoftmaxOutput, rng));
    for b in &mut blocks {
        for v in b.bias.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    (LayeredModel::new(blocks).expect("valid random model"), classes)
}

fn a8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for trial in 0..A8_MODELS {
        let (model, classes) = random_model(&mut rng);
        let batch = rng.random_range(1..=4);
        let x: Vec<f64> = (0..batch * model.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::from_vec(batch, model.input_dim(), x).unwrap();
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let (_, cache) = model.forward(&x).unwrap();
        let grads = model.backward(&cache, &y).unwrap();

        let blocks = model.blocks().to_vec();
        let loss_with = |bi: usize, wi: Option<usize>, bias_i: Option<usize>, delta: f64| -> f64 {
            let mut b = blocks.clone();
            if let Some(i) = wi {
                b[bi].weights.as_mut_slice()[i] += delta;
            }
            if let Some(i) = bias_i {
                b[bi].bias[i] += delta;
            }
            LayeredModel::new(b).unwrap().loss(&x, &y).unwrap()
        };
        for (bi, block) in blocks.iter().enumerate() {
            let g = &grads.blocks[bi];
            for i in 0..block.weights.len() {
                let num = (loss_with(bi, Some(i), None, A8_STEP) - loss_with(bi, Some(i), None, -A8_STEP))
                    / (2.0 * A8_STEP);
                let ana = g.weights.as_slice()[i];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(A8_FLOOR);
                if rel > A8_REL_TOL {
                    return Err(format!("model {trial} block {bi} weight {i}: analytic {ana:e} numeric {num:e}"));
                }
                worst = worst.max(rel);
                checked += 1;
            }
            for i in 0..block.bias.len() {
                let num = (loss_with(bi, None, Some(i), A8_STEP) - loss_with(bi, None, Some(i), -A8_STEP))
                    / (2.0 * A8_STEP);
                let ana = g.bias[i];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(A8_FLOOR);
                if rel > A8_REL_TOL {
                    return Err(format!("model {trial} block {bi} bias {i}: analytic {ana:e} numeric {num:e}"));
                }
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    Ok(format!("{A8_MODELS} models, {checked} parameters, max rel error {worst:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("A1", "degenerate equivalence: Homo(p=1) == FedAvg", a1),
        ("A2", "expected aggregate scaling 1-(1-p)^K", a2),
        ("A3", "per-participant communication (up+down)/|theta| ~ 1+p", a3),
        ("A4", "desk-scale accuracy ordering", a4),
        ("A5", "heterogeneous structural invariants", a5),
        ("A6", "empty-contributor carry-over", a6),
        ("A7", "partitioner correctness", a7),
        ("A8", "analytic vs finite-difference gradients", a8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
