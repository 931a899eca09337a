//! Federated learning simulator with layer-wise pruning.
//!
//! Clients train a shared layered model on local shards. Each round a
//! subset uploads only some layers, either chosen independently per layer
//! with a fixed keep probability (homogeneous) or as a fixed prefix of the
//! network sized to the client (heterogeneous). The server averages each
//! layer over whoever sent it.
//!
//! ```no_run
//! use fedlp::{ExperimentConfig, Scheme, LprConfig, run_experiment};
//!
//! let mut cfg = ExperimentConfig::default();
//! cfg.scheme = Scheme::FedLpHomo(LprConfig::uniform(0.5, cfg.num_layers()).unwrap());
//! let result = run_experiment(cfg).unwrap();
//! println!("{:?}", result.metrics.last());
//! ```

pub mod aggregation;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod partition;
pub mod prop1;
pub mod pruning;
pub mod rng;

pub use aggregation::{
    aggregate_layerwise, distribute, fedavg_aggregate, AggregationWeights, GlobalModelState,
};
pub use config::{RunConfig, RunManifest};
pub use data::Dataset;
pub use error::{Error, Result};
pub use metrics::{RoundMetrics, RunSummary};
pub use model::{LayerBlock, LayeredModel, Matrix};
pub use orchestrator::{
    run_experiment, DataSource, ExperimentConfig, ExperimentResult, Scheme, Simulation, Weighting,
};
pub use partition::{Partition, PartitionScheme, PartitionSpec};
pub use prop1::{verify_prop1, Prop1Report};
pub use pruning::{LayerMask, LcDistribution, LprConfig, PrunedPayload};
pub use rng::SeedTree;
