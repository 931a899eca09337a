//! Run configuration files.
//!
//! The format is flat `key = value` lines grouped under `[section]`
//! headers, UTF-8, with `#` starting a comment. Every key name is unique
//! across sections, so command-line overrides can use the bare key
//! (`--lpr=0.5`) or the qualified form (`--scheme.lpr=0.5`).
//!
//! ```text
//! [experiment]
//! num_clients = 100
//! participation_rate = 0.1
//! seed = 42
//!
//! [scheme]
//! scheme = fedlp_homo
//! lpr = 0.5
//! ```
//!
//! A `[manifest]` section is accepted and ignored, so the manifest written
//! next to a metrics file can be fed back in as a config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::orchestrator::{DataSource, ExperimentConfig, Scheme, Weighting};
use crate::partition::PartitionScheme;
use crate::pruning::{LcDistribution, LprConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const KEYS: &[(&str, &str)] = &[
    ("experiment", "num_clients"),
    ("experiment", "participation_rate"),
    ("experiment", "local_epochs"),
    ("experiment", "batch_size"),
    ("experiment", "lr"),
    ("experiment", "max_global_epochs"),
    ("experiment", "eval_every"),
    ("experiment", "seed"),
    ("experiment", "workers"),
    ("scheme", "scheme"),
    ("scheme", "lpr"),
    ("scheme", "lc_distribution"),
    ("scheme", "weights"),
    ("partition", "partition"),
    ("partition", "shard_size"),
    ("partition", "shards_per_client"),
    ("partition", "uniform_fraction"),
    ("partition", "alpha"),
    ("data", "source"),
    ("data", "num_classes"),
    ("data", "samples_per_class"),
    ("data", "feature_dim"),
    ("data", "class_separation"),
    ("data", "test_per_class"),
    ("data", "train_images"),
    ("data", "train_labels"),
    ("data", "test_images"),
    ("data", "test_labels"),
    ("data", "test_fraction"),
    ("model", "hidden"),
    ("output", "metrics_csv"),
    ("output", "manifest"),
    ("output", "record_wallclock"),
];

const IGNORED_SECTIONS: &[&str] = &["manifest"];

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    origin: String,
}

/// Raw key/value pairs before typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigDoc {
    entries: BTreeMap<&'static str, Entry>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> std::result::Result<Self, Vec<String>> {
        Self::parse_named(text, "<config>")
    }

    pub fn parse_named(text: &str, name: &str) -> std::result::Result<Self, Vec<String>> {
        let mut doc = ConfigDoc::default();
        let mut errs = Vec::new();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let lineno = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                match rest.strip_suffix(']') {
                    Some(s) => {
                        let s = s.trim();
                        let known = KEYS.iter().any(|(sec, _)| *sec == s) || IGNORED_SECTIONS.contains(&s);
                        if !known {
                            errs.push(format!("{name}:{lineno}: unknown section [{s}]"));
                        }
                        section = Some(s.to_string());
                    }
                    None => errs.push(format!("{name}:{lineno}: malformed section header")),
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("{name}:{lineno}: expected `key = value`"));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            let current = section.as_deref().unwrap_or("");
            if IGNORED_SECTIONS.contains(&current) {
                continue;
            }
            let origin = format!("{name}:{lineno}");
            match KEYS.iter().find(|(_, key)| *key == k) {
                None => errs.push(format!("{origin}: unknown key `{k}`")),
                Some((sec, key)) if *sec != current => errs.push(format!(
                    "{origin}: key `{key}` belongs in section [{sec}], found in [{current}]"
                )),
                Some((_, key)) => {
                    if doc.entries.contains_key(key) {
                        errs.push(format!("{origin}: duplicate key `{key}`"));
                    } else {
                        doc.entries.insert(
                            key,
                            Entry {
                                value: v.to_string(),
                                origin,
                            },
                        );
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok(doc)
        } else {
            Err(errs)
        }
    }

    /// Applies `key=value` (or `section.key=value`), replacing any file value.
    pub fn set_override(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let bare = match key.split_once('.') {
            Some((sec, k)) => {
                if section_of(k) != Some(sec) {
                    return Err(format!("--{key}: unknown key"));
                }
                k
            }
            None => key,
        };
        let Some((_, key)) = KEYS.iter().find(|(_, k)| *k == bare) else {
            return Err(format!("--{key}: unknown key"));
        };
        self.entries.insert(
            key,
            Entry {
                value: value.trim().to_string(),
                origin: format!("--{key}"),
            },
        );
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    /// Types every value and checks every constraint, reporting all
    /// problems at once.
    pub fn resolve(&self) -> std::result::Result<RunConfig, Vec<String>> {
        let mut r = Resolver { doc: self, errs: Vec::new() };
        let d = ExperimentConfig::default();

        let num_clients = r.num("num_clients", d.num_clients);
        let participation_rate = r.num("participation_rate", d.participation_rate);
        let local_epochs = r.num("local_epochs", d.local_epochs);
        let batch_size = r.num("batch_size", d.batch_size);
        let lr = r.num("lr", d.lr);
        let max_global_epochs = r.num("max_global_epochs", d.max_global_epochs);
        let eval_every = r.num("eval_every", d.eval_every);
        let workers = r.num("workers", d.workers);
        let master_seed = match self.entries.get("seed") {
            Some(_) => r.num("seed", 0u64),
            None => {
                r.errs.push("seed is required (set `seed` or pass --seed)".into());
                0
            }
        };
        let hidden = match self.entries.get("hidden") {
            Some(e) => match parse_list::<usize>(&e.value) {
                Ok(v) if !v.is_empty() => v,
                _ => {
                    r.errs.push(format!("{}: hidden must be a comma list of widths", e.origin));
                    d.hidden.clone()
                }
            },
            None => d.hidden.clone(),
        };
        let layers = hidden.len() + 1;

        let scheme = match r.word("scheme", "fedavg").as_str() {
            "fedavg" => Scheme::FedAvg,
            "fedlp_homo" => match self.entries.get("lpr") {
                Some(e) => match parse_list::<f64>(&e.value) {
                    Ok(v) if v.len() == 1 || v.len() == layers => {
                        let rates = if v.len() == 1 { vec![v[0]; layers] } else { v };
                        match LprConfig::new(rates) {
                            Ok(c) => Scheme::FedLpHomo(c),
                            Err(err) => {
                                r.errs.push(format!("{}: {err}", e.origin));
                                Scheme::FedAvg
                            }
                        }
                    }
                    _ => {
                        r.errs.push(format!(
                            "{}: lpr must be one rate or {layers} comma-separated rates",
                            e.origin
                        ));
                        Scheme::FedAvg
                    }
                },
                None => {
                    r.errs.push("scheme fedlp_homo requires `lpr`".into());
                    Scheme::FedAvg
                }
            },
            "fedlp_hetero" => match self.entries.get("lc_distribution") {
                Some(e) => match parse_lc(&e.value, layers) {
                    Ok(dist) => Scheme::FedLpHetero(dist),
                    Err(err) => {
                        r.errs.push(format!("{}: {err}", e.origin));
                        Scheme::FedAvg
                    }
                },
                None => {
                    r.errs.push("scheme fedlp_hetero requires `lc_distribution`".into());
                    Scheme::FedAvg
                }
            },
            other => {
                r.errs.push(format!(
                    "scheme `{other}` is not one of fedavg, fedlp_homo, fedlp_hetero"
                ));
                Scheme::FedAvg
            }
        };
        let weighting = match r.word("weights", "fedavg").as_str() {
            "fedavg" | "size" => Weighting::DatasetSize,
            "uniform" => Weighting::Uniform,
            other => {
                r.errs.push(format!("weights `{other}` is not one of fedavg, uniform"));
                Weighting::DatasetSize
            }
        };

        let partition = match r.word("partition", "iid").as_str() {
            "iid" => PartitionScheme::Iid,
            "mixed_shard" => PartitionScheme::MixedShard {
                shard_size: r.required("shard_size", "mixed_shard", 0),
                shards_per_client: r.required("shards_per_client", "mixed_shard", 0),
                uniform_fraction: r.required("uniform_fraction", "mixed_shard", 0.0),
            },
            "dirichlet" => PartitionScheme::Dirichlet {
                alpha: r.required("alpha", "dirichlet", 1.0),
            },
            other => {
                r.errs.push(format!(
                    "partition `{other}` is not one of iid, mixed_shard, dirichlet"
                ));
                PartitionScheme::Iid
            }
        };

        let data = match r.word("source", "synthetic").as_str() {
            "synthetic" => {
                let DataSource::Synthetic {
                    num_classes,
                    samples_per_class,
                    feature_dim,
                    class_separation,
                    test_per_class,
                } = d.data.clone()
                else {
                    unreachable!("default data source is synthetic")
                };
                DataSource::Synthetic {
                    num_classes: r.num("num_classes", num_classes),
                    samples_per_class: r.num("samples_per_class", samples_per_class),
                    feature_dim: r.num("feature_dim", feature_dim),
                    class_separation: r.num("class_separation", class_separation),
                    test_per_class: r.num("test_per_class", test_per_class),
                }
            }
            "idx" => DataSource::Idx {
                train_images: r.required::<String>("train_images", "idx", String::new()).into(),
                train_labels: r.required::<String>("train_labels", "idx", String::new()).into(),
                test_images: self.get("test_images").map(PathBuf::from),
                test_labels: self.get("test_labels").map(PathBuf::from),
                test_fraction: r.num("test_fraction", 0.1),
            },
            other => {
                r.errs.push(format!("source `{other}` is not one of synthetic, idx"));
                d.data.clone()
            }
        };

        let record_wallclock = r.num("record_wallclock", false);
        let metrics_csv = PathBuf::from(self.get("metrics_csv").unwrap_or("metrics.csv"));
        let manifest = self.get("manifest").map(PathBuf::from);

        let experiment = ExperimentConfig {
            num_clients,
            participation_rate,
            local_epochs,
            batch_size,
            lr,
            max_global_epochs,
            scheme,
            weighting,
            partition,
            data,
            hidden,
            eval_every,
            master_seed,
            workers,
            record_wallclock,
        };
        let mut errs = r.errs;
        errs.extend(experiment.validate());
        if errs.is_empty() {
            Ok(RunConfig {
                experiment,
                metrics_csv,
                manifest,
            })
        } else {
            Err(errs)
        }
    }
}

struct Resolver<'a> {
    doc: &'a ConfigDoc,
    errs: Vec<String>,
}

impl Resolver<'_> {
    fn num<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        match self.doc.entries.get(key) {
            None => default,
            Some(e) => match e.value.parse::<T>() {
                Ok(v) => v,
                Err(_) => {
                    self.errs
                        .push(format!("{}: invalid value `{}` for {key}", e.origin, e.value));
                    default
                }
            },
        }
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str, owner: &str, fallback: T) -> T {
        if self.doc.entries.contains_key(key) {
            self.num(key, fallback)
        } else {
            self.errs.push(format!("{owner} requires `{key}`"));
            fallback
        }
    }

    fn word(&mut self, key: &str, default: &str) -> String {
        self.doc
            .get(key)
            .unwrap_or(default)
            .to_ascii_lowercase()
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, ()> {
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| ()))
        .collect()
}

/// `u` / `uniform`, a favoured layer count `l` (or `hetero(l)`), or an
/// explicit comma list of `L` probabilities.
pub fn parse_lc(s: &str, layers: usize) -> Result<LcDistribution> {
    let s = s.trim().to_ascii_lowercase();
    let inner = s
        .strip_prefix("hetero(")
        .and_then(|x| x.strip_suffix(')'))
        .unwrap_or(&s)
        .trim();
    if inner == "u" || inner == "uniform" {
        return Ok(LcDistribution::uniform(layers));
    }
    if !inner.contains(',') {
        if let Ok(l) = inner.parse::<usize>() {
            return LcDistribution::favouring(l, layers);
        }
    }
    let probs = parse_list::<f64>(inner)
        .map_err(|_| Error::InvalidArgument(format!("cannot parse lc_distribution `{s}`")))?;
    if probs.len() != layers {
        return Err(Error::InvalidArgument(format!(
            "lc_distribution has {} entries, model has {layers} layers",
            probs.len()
        )));
    }
    LcDistribution::new(probs)
}

/// A fully resolved run: the experiment plus its output locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub metrics_csv: PathBuf,
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = ConfigDoc::parse(text).map_err(Error::Config)?;
        let mut errs = Vec::new();
        for (k, v) in overrides {
            if let Err(e) = doc.set_override(k, v) {
                errs.push(e);
            }
        }
        match doc.resolve() {
            Ok(c) if errs.is_empty() => Ok(c),
            Ok(_) => Err(Error::Config(errs)),
            Err(more) => {
                errs.extend(more);
                Err(Error::Config(errs))
            }
        }
    }

    pub fn from_file(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc = ConfigDoc::parse_named(&text, &path.display().to_string())
            .map_err(Error::Config)?;
        let mut errs = Vec::new();
        for (k, v) in overrides {
            if let Err(e) = doc.set_override(k, v) {
                errs.push(e);
            }
        }
        match doc.resolve() {
            Ok(c) if errs.is_empty() => Ok(c),
            Ok(_) => Err(Error::Config(errs)),
            Err(more) => {
                errs.extend(more);
                Err(Error::Config(errs))
            }
        }
    }

    /// Where the manifest goes: the configured path, or the metrics path
    /// with `.manifest` appended.
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| {
            let mut s = self.metrics_csv.clone().into_os_string();
            s.push(".manifest");
            PathBuf::from(s)
        })
    }

    /// The resolved configuration in config-file syntax. Parsing the
    /// result yields an identical `RunConfig`.
    pub fn to_config_text(&self) -> String {
        let e = &self.experiment;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "[experiment]");
        let _ = writeln!(s, "num_clients = {}", e.num_clients);
        let _ = writeln!(s, "participation_rate = {}", e.participation_rate);
        let _ = writeln!(s, "local_epochs = {}", e.local_epochs);
        let _ = writeln!(s, "batch_size = {}", e.batch_size);
        let _ = writeln!(s, "lr = {}", e.lr);
        let _ = writeln!(s, "max_global_epochs = {}", e.max_global_epochs);
        let _ = writeln!(s, "eval_every = {}", e.eval_every);
        let _ = writeln!(s, "seed = {}", e.master_seed);
        let _ = writeln!(s, "workers = {}", e.workers);
        let _ = writeln!(s, "\n[scheme]");
        let _ = writeln!(s, "scheme = {}", e.scheme.name());
        match &e.scheme {
            Scheme::FedAvg => {}
            Scheme::FedLpHomo(lpr) => {
                let _ = writeln!(s, "lpr = {}", join(lpr.rates()));
            }
            Scheme::FedLpHetero(dist) => {
                let _ = writeln!(s, "lc_distribution = {}", join(dist.probs()));
            }
        }
        let _ = writeln!(
            s,
            "weights = {}",
            match e.weighting {
                Weighting::DatasetSize => "fedavg",
                Weighting::Uniform => "uniform",
            }
        );
        let _ = writeln!(s, "\n[partition]");
        let _ = writeln!(s, "partition = {}", e.partition.name());
        match e.partition {
            PartitionScheme::Iid => {}
            PartitionScheme::MixedShard {
                shard_size,
                shards_per_client,
                uniform_fraction,
            } => {
                let _ = writeln!(s, "shard_size = {shard_size}");
                let _ = writeln!(s, "shards_per_client = {shards_per_client}");
                let _ = writeln!(s, "uniform_fraction = {uniform_fraction}");
            }
            PartitionScheme::Dirichlet { alpha } => {
                let _ = writeln!(s, "alpha = {alpha}");
            }
        }
        let _ = writeln!(s, "\n[data]");
        match &e.data {
            DataSource::Synthetic {
                num_classes,
                samples_per_class,
                feature_dim,
                class_separation,
                test_per_class,
            } => {
                let _ = writeln!(s, "source = synthetic");
                let _ = writeln!(s, "num_classes = {num_classes}");
                let _ = writeln!(s, "samples_per_class = {samples_per_class}");
                let _ = writeln!(s, "feature_dim = {feature_dim}");
                let _ = writeln!(s, "class_separation = {class_separation}");
                let _ = writeln!(s, "test_per_class = {test_per_class}");
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                test_fraction,
            } => {
                let _ = writeln!(s, "source = idx");
                let _ = writeln!(s, "train_images = {}", train_images.display());
                let _ = writeln!(s, "train_labels = {}", train_labels.display());
                if let (Some(ti), Some(tl)) = (test_images, test_labels) {
                    let _ = writeln!(s, "test_images = {}", ti.display());
                    let _ = writeln!(s, "test_labels = {}", tl.display());
                }
                let _ = writeln!(s, "test_fraction = {test_fraction}");
            }
        }
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(
            s,
            "hidden = {}",
            e.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "metrics_csv = {}", self.metrics_csv.display());
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "manifest = {}", m.display());
        }
        let _ = writeln!(s, "record_wallclock = {}", e.record_wallclock);
        s
    }
}

/// Everything needed to reproduce a run, in config syntax plus a
/// `[manifest]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_source: Option<PathBuf>,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = String::from("# fedlp run manifest; usable as a config file\n");
        s.push_str(&self.config.to_config_text());
        let _ = writeln!(s, "\n[manifest]");
        let _ = writeln!(s, "tool_version = {TOOL_VERSION}");
        let _ = writeln!(s, "master_seed = {}", self.config.experiment.master_seed);
        if let Some(src) = &self.config_source {
            let _ = writeln!(s, "config_source = {}", src.display());
        }
        let _ = writeln!(s, "metrics_csv = {}", self.config.metrics_csv.display());
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}
