//! The federated round loop.
//!
//! Each global epoch selects `K` participants, trains them locally, builds
//! their pruned uploads (scheme-dependent), aggregates layer-wise, pushes
//! the global model back to every client and optionally evaluates the
//! global model on the held-out test set.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::aggregation::{
    aggregate_layerwise, contributor_counts, distribute, AggregationWeights, GlobalModelState,
};
use crate::data::{generate_synthetic, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{comm_accounting, RoundMetrics};
use crate::model::LayeredModel;
use crate::partition::{partition, Partition, PartitionScheme, PartitionSpec};
use crate::pruning::{
    assign_hetero, build_hetero_model, draw_mask, prune_model, HeteroAssignment, LayerMask,
    LcDistribution, LprConfig, PrunedPayload,
};
use crate::rng::{Purpose, SeedTree};

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    FedAvg,
    FedLpHomo(LprConfig),
    FedLpHetero(LcDistribution),
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::FedAvg => "fedavg",
            Scheme::FedLpHomo(_) => "fedlp_homo",
            Scheme::FedLpHetero(_) => "fedlp_hetero",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Proportional to local dataset size.
    DatasetSize,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        samples_per_class: usize,
        feature_dim: usize,
        class_separation: f64,
        /// Per-class samples held out as the test set.
        test_per_class: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        /// When absent, `test_fraction` of the training file is held out.
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        test_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    pub participation_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_global_epochs: u32,
    pub scheme: Scheme,
    pub weighting: Weighting,
    pub partition: PartitionScheme,
    pub data: DataSource,
    /// Hidden widths of the MLP; the model has `hidden.len() + 1` prunable layers.
    pub hidden: Vec<usize>,
    pub eval_every: u32,
    pub master_seed: u64,
    /// Worker threads for local training; 1 is the serial reference mode.
    pub workers: usize,
    /// Record measured wall-clock seconds; when off the column is zero so
    /// reruns produce identical files.
    pub record_wallclock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_clients: 100,
            participation_rate: 0.1,
            local_epochs: 5,
            batch_size: 32,
            lr: 0.05,
            max_global_epochs: 50,
            scheme: Scheme::FedAvg,
            weighting: Weighting::DatasetSize,
            partition: PartitionScheme::Iid,
            data: DataSource::Synthetic {
                num_classes: 10,
                samples_per_class: 600,
                feature_dim: 64,
                class_separation: 7.0,
                test_per_class: 100,
            },
            hidden: vec![128, 128, 128, 64],
            eval_every: 1,
            master_seed: 0,
            workers: 1,
            record_wallclock: false,
        }
    }
}

impl ExperimentConfig {
    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `K = round(participation_rate * N)`, halves rounded up.
    pub fn participants_per_round(&self) -> usize {
        (self.participation_rate * self.num_clients as f64 + 0.5).floor() as usize
    }

    /// Every violated constraint, in one pass.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_clients == 0 {
            errs.push("num_clients must be at least 1".into());
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            errs.push(format!(
                "participation_rate {} must be in (0, 1]",
                self.participation_rate
            ));
        } else if self.num_clients > 0 && self.participants_per_round() == 0 {
            errs.push("participation_rate selects zero clients per round".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr {} must be positive", self.lr));
        }
        if self.max_global_epochs == 0 {
            errs.push("max_global_epochs must be at least 1".into());
        }
        if self.eval_every == 0 {
            errs.push("eval_every must be at least 1".into());
        }
        if self.workers == 0 {
            errs.push("workers must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            errs.push("hidden layer widths must be positive".into());
        }
        let layers = self.num_layers();
        match &self.scheme {
            Scheme::FedAvg => {}
            Scheme::FedLpHomo(lpr) => {
                if lpr.rates().len() != layers {
                    errs.push(format!(
                        "lpr has {} rates, model has {layers} layers",
                        lpr.rates().len()
                    ));
                }
            }
            Scheme::FedLpHetero(dist) => {
                if dist.max_layers() != layers {
                    errs.push(format!(
                        "lc_distribution covers {} layer counts, model has {layers} layers",
                        dist.max_layers()
                    ));
                }
            }
        }
        errs.extend(
            PartitionSpec {
                scheme: self.partition.clone(),
                num_clients: self.num_clients.max(1),
            }
            .validate(),
        );
        match &self.data {
            DataSource::Synthetic {
                num_classes,
                samples_per_class,
                feature_dim,
                class_separation,
                test_per_class,
            } => {
                if *num_classes < 2 {
                    errs.push("num_classes must be at least 2".into());
                }
                if *feature_dim == 0 {
                    errs.push("feature_dim must be positive".into());
                }
                if *samples_per_class == 0 {
                    errs.push("samples_per_class must be positive".into());
                }
                if !(*class_separation > 0.0) {
                    errs.push("class_separation must be positive".into());
                }
                if *test_per_class == 0 {
                    errs.push("test_per_class must be positive".into());
                }
            }
            DataSource::Idx {
                test_images,
                test_labels,
                test_fraction,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    errs.push("test_images and test_labels must be given together".into());
                }
                if test_images.is_none() && !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    errs.push(format!("test_fraction {test_fraction} must be in (0, 1)"));
                }
            }
        }
        errs
    }

    /// Loads or generates the train/test split described by `data`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let seeds = SeedTree::new(self.master_seed);
        match &self.data {
            DataSource::Synthetic {
                num_classes,
                samples_per_class,
                feature_dim,
                class_separation,
                test_per_class,
            } => {
                let all = generate_synthetic(
                    *num_classes,
                    samples_per_class + test_per_class,
                    *feature_dim,
                    *class_separation,
                    &mut seeds.stream(Purpose::Dataset, 0, 0),
                )?;
                all.split_holdout(*test_per_class, &mut seeds.stream(Purpose::Holdout, 0, 0))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                test_fraction,
            } => {
                let train = load_idx(train_images, train_labels)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let mut test = load_idx(ti, tl)?;
                        let classes = train.num_classes.max(test.num_classes);
                        test.num_classes = classes;
                        let mut train = train;
                        train.num_classes = classes;
                        Ok((train, test))
                    }
                    _ => train.split_fraction(*test_fraction, &mut seeds.stream(Purpose::Holdout, 0, 0)),
                }
            }
        }
    }
}

/// Pure function of the seed: uniform sample of `k` of `n` clients without
/// replacement, returned in ascending id order.
pub fn select_participants<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} participants from {n} clients"
        )));
    }
    let mut chosen = sample(rng, n, k).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientScheme {
    Full,
    Homo(LprConfig),
    Hetero(HeteroAssignment),
}

/// A client: its data shard, its local model and its pruning state. Random
/// streams are derived on demand from `(master seed, purpose, id, round)`.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data_indices: Vec<usize>,
    pub model: LayeredModel,
    pub scheme_state: ClientScheme,
}

impl ClientState {
    /// Layers this client shares with the server: `L` or `L_k`.
    pub fn shared_layers(&self) -> usize {
        self.model.num_prunable()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainReport {
    pub samples_processed: u64,
    /// Forward FLOPs per sample x samples processed x 3.
    pub flops: u64,
    pub skipped: bool,
}

/// Mini-batch SGD over the client's shard for `local_epochs` passes. The
/// shard is reshuffled every epoch from `rng`.
pub fn local_train<R: Rng + ?Sized>(
    client: &mut ClientState,
    train: &Dataset,
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<TrainReport> {
    if client.data_indices.is_empty() {
        log::warn!("client {} has an empty shard; skipping local training", client.id);
        return Ok(TrainReport {
            samples_processed: 0,
            flops: 0,
            skipped: true,
        });
    }
    if settings.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut order = client.data_indices.clone();
    let mut processed = 0u64;
    for _ in 0..settings.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(settings.batch_size) {
            let x = train.features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (_, cache) = client.model.forward(&x)?;
            let grads = client.model.backward(&cache, &y)?;
            client.model.sgd_step(&grads, settings.lr)?;
            processed += batch.len() as u64;
        }
    }
    let flops = client.model.flops_count(None)? * processed * 3;
    Ok(TrainReport {
        samples_processed: processed,
        flops,
        skipped: false,
    })
}

/// What one participant uploaded in a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UploadRecord {
    pub client: usize,
    pub layers: Vec<usize>,
    pub params: u64,
    /// `L_k` for heterogeneous clients, `L` otherwise.
    pub shared_layers: usize,
    pub client_has_head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub participants: Vec<usize>,
    pub uploads: Vec<UploadRecord>,
    /// Contributors per layer; index 0 is layer 1.
    pub contributors: Vec<usize>,
    pub skipped: Vec<usize>,
}

/// Hook applied to each participant's mask before pruning:
/// `(client id, round, mask)`.
pub type MaskHook<'a> = &'a (dyn Fn(usize, u32, &mut LayerMask) + Sync);

struct ClientRound {
    payload: Option<PrunedPayload>,
    flops: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub global: GlobalModelState,
}

/// Full simulator state.
pub struct Simulation {
    config: ExperimentConfig,
    seeds: SeedTree,
    train: Dataset,
    test: Dataset,
    partition: Partition,
    clients: Vec<ClientState>,
    global: GlobalModelState,
    weights: AggregationWeights,
    pool: Option<rayon::ThreadPool>,
    history: Vec<RoundMetrics>,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("scheme", &self.config.scheme.name())
            .field("round", &self.global.round)
            .field("clients", &self.clients.len())
            .finish()
    }
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let (train, test) = config.load_data()?;
        Self::with_data(config, train, test)
    }

    /// Builds the simulation around an explicit train/test split.
    pub fn with_data(config: ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        if train.feature_dim() != test.feature_dim() {
            return Err(Error::InvalidArgument("train and test feature dims differ".into()));
        }
        let seeds = SeedTree::new(config.master_seed);
        let spec = PartitionSpec {
            scheme: config.partition.clone(),
            num_clients: config.num_clients,
        };
        let partition = partition(&train, &spec, &mut seeds.stream(Purpose::Partition, 0, 0))?;
        let template = LayeredModel::mlp(
            train.feature_dim(),
            &config.hidden,
            train.num_classes,
            &mut seeds.stream(Purpose::ModelInit, 0, 0),
        )?;
        let layers = template.num_prunable();

        let clients = match &config.scheme {
            Scheme::FedAvg | Scheme::FedLpHomo(_) => {
                let state = match &config.scheme {
                    Scheme::FedLpHomo(lpr) => ClientScheme::Homo(lpr.clone()),
                    _ => ClientScheme::Full,
                };
                partition
                    .assignments
                    .iter()
                    .enumerate()
                    .map(|(id, idx)| ClientState {
                        id,
                        data_indices: idx.clone(),
                        model: template.clone(),
                        scheme_state: state.clone(),
                    })
                    .collect()
            }
            Scheme::FedLpHetero(dist) => {
                let assignments = assign_hetero(
                    dist,
                    config.num_clients,
                    layers,
                    &mut seeds.stream(Purpose::HeteroAssign, 0, 0),
                )?;
                partition
                    .assignments
                    .iter()
                    .zip(assignments)
                    .enumerate()
                    .map(|(id, (idx, a))| {
                        let model = build_hetero_model(
                            &template,
                            &a,
                            &mut seeds.stream(Purpose::HeadInit, id as u64, 0),
                        )?;
                        Ok(ClientState {
                            id,
                            data_indices: idx.clone(),
                            model,
                            scheme_state: ClientScheme::Hetero(a),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };

        let weights = match config.weighting {
            Weighting::DatasetSize => AggregationWeights::from_sizes(
                &partition.assignments.iter().map(Vec::len).collect::<Vec<_>>(),
            ),
            Weighting::Uniform => AggregationWeights::uniform(config.num_clients),
        };
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Simulation {
            config,
            seeds,
            train,
            test,
            partition,
            clients,
            global: GlobalModelState::new(template),
            weights,
            pool,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn global(&self) -> &GlobalModelState {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn history(&self) -> &[RoundMetrics] {
        &self.history
    }

    pub fn round(&self) -> u32 {
        self.global.round
    }

    pub fn is_finished(&self) -> bool {
        self.global.round >= self.config.max_global_epochs
    }

    /// Mean forward FLOPs per sample over all local models.
    pub fn mean_local_model_flops(&self) -> f64 {
        let total: u64 = self
            .clients
            .iter()
            .map(|c| c.model.flops_count(None).unwrap_or(0))
            .sum();
        total as f64 / self.clients.len().max(1) as f64
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        self.run_round_with(&|_, _, _| {})
    }

    /// One global epoch with `hook` applied to every participant's mask.
    pub fn run_round_with(&mut self, hook: MaskHook<'_>) -> Result<RoundOutcome> {
        let started = Instant::now();
        let round = self.global.round + 1;
        let k = self.config.participants_per_round();
        let participants = select_participants(
            self.config.num_clients,
            k,
            &mut self.seeds.stream(Purpose::Selection, 0, u64::from(round)),
        )?;
        let mut selected = vec![false; self.clients.len()];
        for &p in &participants {
            selected[p] = true;
        }

        let settings = TrainSettings {
            local_epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            lr: self.config.lr,
        };
        let seeds = self.seeds;
        let train = &self.train;
        let work = |client: &mut ClientState| client_round(client, train, &settings, seeds, round, hook);
        let results: Vec<Result<ClientRound>> = match &self.pool {
            Some(pool) => pool.install(|| {
                self.clients
                    .par_iter_mut()
                    .filter(|c| selected[c.id])
                    .map(work)
                    .collect()
            }),
            None => self
                .clients
                .iter_mut()
                .filter(|c| selected[c.id])
                .map(work)
                .collect(),
        };

        let mut payloads = Vec::with_capacity(k);
        let mut per_client_flops = Vec::with_capacity(k);
        let mut skipped = Vec::new();
        for (&id, r) in participants.iter().zip(results) {
            let r = r?;
            match r.payload {
                Some(p) => {
                    per_client_flops.push(r.flops);
                    payloads.push(p);
                }
                None => skipped.push(id),
            }
        }

        let uploads: Vec<UploadRecord> = payloads
            .iter()
            .map(|p| {
                let c = &self.clients[p.source_client];
                UploadRecord {
                    client: p.source_client,
                    layers: p.layer_indices(),
                    params: p.param_count(),
                    shared_layers: c.shared_layers(),
                    client_has_head: c.model.has_head(),
                }
            })
            .collect();
        let contributors = contributor_counts(&payloads, self.global.model.num_prunable());

        self.global = aggregate_layerwise(&payloads, &self.weights, &self.global)?;
        for client in &mut self.clients {
            distribute(&self.global, client)?;
        }

        let clients = &self.clients;
        let (upload_params, download_params) = comm_accounting(&payloads, |id| {
            let m = &clients[id].model;
            m.param_count(Some(&(1..=m.num_prunable()).collect::<Vec<_>>()))
                .unwrap_or(0)
        });

        let due = round % self.config.eval_every == 0 || round == self.config.max_global_epochs;
        let (test_accuracy, personalized_accuracy) = if due {
            let acc = self
                .global
                .model
                .accuracy(&self.test.features, &self.test.labels)?;
            let personal = match self.config.scheme {
                Scheme::FedLpHetero(_) if !payloads.is_empty() => {
                    let mut sum = 0.0;
                    for p in &payloads {
                        sum += self.clients[p.source_client]
                            .model
                            .accuracy(&self.test.features, &self.test.labels)?;
                    }
                    Some(sum / payloads.len() as f64)
                }
                _ => None,
            };
            (Some(acc), personal)
        } else {
            (None, None)
        };

        let wallclock_s = if self.config.record_wallclock {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let metrics = RoundMetrics {
            round,
            participants: payloads.len(),
            test_accuracy,
            personalized_accuracy,
            upload_params,
            download_params,
            per_client_flops,
            wallclock_s,
        };
        self.history.push(metrics.clone());
        Ok(RoundOutcome {
            metrics,
            participants,
            uploads,
            contributors,
            skipped,
        })
    }

    /// Runs the remaining rounds up to `max_global_epochs`.
    pub fn run(&mut self) -> Result<&[RoundMetrics]> {
        while !self.is_finished() {
            self.run_round()?;
        }
        Ok(&self.history)
    }

    pub fn into_result(self) -> ExperimentResult {
        ExperimentResult {
            metrics: self.history,
            global: self.global,
        }
    }
}

fn client_round(
    client: &mut ClientState,
    train: &Dataset,
    settings: &TrainSettings,
    seeds: SeedTree,
    round: u32,
    hook: MaskHook<'_>,
) -> Result<ClientRound> {
    let id = client.id as u64;
    let report = local_train(
        client,
        train,
        settings,
        &mut seeds.stream(Purpose::LocalTrain, id, u64::from(round)),
    )?;
    if report.skipped {
        return Ok(ClientRound {
            payload: None,
            flops: 0,
        });
    }
    let shared = client.shared_layers();
    let mut mask = match &client.scheme_state {
        ClientScheme::Full | ClientScheme::Hetero(_) => LayerMask::ones(shared),
        ClientScheme::Homo(lpr) => {
            draw_mask(lpr, &mut seeds.stream(Purpose::Mask, id, u64::from(round)))
        }
    };
    hook(client.id, round, &mut mask);
    let payload = prune_model(&client.model, &mask, client.id, round)?;
    if payload.layers.keys().any(|&l| l > shared) {
        return Err(Error::Contract(format!(
            "client {} uploaded a layer beyond its shared prefix",
            client.id
        )));
    }
    Ok(ClientRound {
        payload: Some(payload),
        flops: report.flops,
    })
}

/// Validates `config`, runs every round and returns the metrics stream and
/// final global model.
pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentResult> {
    let mut sim = Simulation::new(config)?;
    sim.run()?;
    Ok(sim.into_result())
}
