//! Per-round records, communication accounting and CSV output.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pruning::PrunedPayload;

pub const CSV_HEADER: [&str; 6] = [
    "round",
    "test_accuracy",
    "upload_params",
    "download_params",
    "mean_flops",
    "wallclock_s",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u32,
    /// Participants that trained and uploaded this round.
    pub participants: usize,
    /// Global-model test accuracy; `None` on rounds without evaluation.
    pub test_accuracy: Option<f64>,
    /// Mean test accuracy of the participants' own (personalized) models,
    /// heterogeneous runs only.
    pub personalized_accuracy: Option<f64>,
    pub upload_params: u64,
    pub download_params: u64,
    /// Training FLOPs of each uploading participant, in client id order.
    pub per_client_flops: Vec<u64>,
    pub wallclock_s: f64,
}

impl RoundMetrics {
    pub fn mean_flops(&self) -> f64 {
        if self.per_client_flops.is_empty() {
            return 0.0;
        }
        self.per_client_flops.iter().sum::<u64>() as f64 / self.per_client_flops.len() as f64
    }

    pub fn is_evaluated(&self) -> bool {
        self.test_accuracy.is_some()
    }
}

/// `(upload, download)` parameter totals for one round: uploads are the
/// exact payload sizes, downloads are `download_size(client)` for each
/// uploading participant (the full model for homogeneous clients, layers
/// `1..=L_k` for heterogeneous ones).
pub fn comm_accounting(
    payloads: &[PrunedPayload],
    download_size: impl Fn(usize) -> u64,
) -> (u64, u64) {
    let upload = payloads.iter().map(PrunedPayload::param_count).sum();
    let download = payloads.iter().map(|p| download_size(p.source_client)).sum();
    (upload, download)
}

/// Run-level averages in the units of a comparison table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    /// Mean (upload + download) parameters per global epoch.
    pub mean_comm_per_round: f64,
    /// Mean (upload + download) parameters per participant.
    pub mean_comm_per_participant: f64,
}

impl RunSummary {
    pub fn from_metrics(metrics: &[RoundMetrics]) -> Self {
        let rounds = metrics.len();
        let comm: u64 = metrics
            .iter()
            .map(|m| m.upload_params + m.download_params)
            .sum();
        let participants: usize = metrics.iter().map(|m| m.participants).sum();
        RunSummary {
            rounds,
            final_accuracy: metrics.iter().rev().find_map(|m| m.test_accuracy),
            mean_comm_per_round: comm as f64 / rounds.max(1) as f64,
            mean_comm_per_participant: comm as f64 / participants.max(1) as f64,
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes the header and one row per evaluated round.
pub fn write_csv<W: Write>(metrics: &[RoundMetrics], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for m in metrics {
        let Some(acc) = m.test_accuracy else { continue };
        w.write_record([
            m.round.to_string(),
            format!("{acc:.6}"),
            m.upload_params.to_string(),
            m.download_params.to_string(),
            format!("{:.1}", m.mean_flops()),
            format!("{:.3}", m.wallclock_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(metrics: &[RoundMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(metrics, file).map_err(|e| csv_error(path, e))
}
