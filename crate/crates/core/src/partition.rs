//! Client data partitioners: iid, mixed shards and Dirichlet.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionScheme {
    Iid,
    MixedShard {
        shard_size: usize,
        shards_per_client: usize,
        uniform_fraction: f64,
    },
    Dirichlet {
        alpha: f64,
    },
}

impl PartitionScheme {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionScheme::Iid => "iid",
            PartitionScheme::MixedShard { .. } => "mixed_shard",
            PartitionScheme::Dirichlet { .. } => "dirichlet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
}

impl PartitionSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_clients == 0 {
            errs.push("num_clients must be at least 1".to_string());
        }
        match self.scheme {
            PartitionScheme::Iid => {}
            PartitionScheme::MixedShard {
                shard_size,
                shards_per_client,
                uniform_fraction,
            } => {
                if shard_size == 0 {
                    errs.push("shard_size must be positive".into());
                }
                if shards_per_client == 0 {
                    errs.push("shards_per_client must be positive".into());
                }
                if !(0.0..=1.0).contains(&uniform_fraction) {
                    errs.push(format!("uniform_fraction {uniform_fraction} outside [0, 1]"));
                }
            }
            PartitionScheme::Dirichlet { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    errs.push(format!("alpha {alpha} must be positive"));
                }
            }
        }
        errs
    }
}

/// Per-client index lists into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn total_assigned(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// True when no index appears twice, within or across clients.
    pub fn is_disjoint(&self, dataset_len: usize) -> bool {
        let mut seen = vec![false; dataset_len];
        for &i in self.assignments.iter().flatten() {
            if i >= dataset_len || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

/// Dispatches on `spec.scheme`.
pub fn partition<R: Rng + ?Sized>(
    dataset: &Dataset,
    spec: &PartitionSpec,
    rng: &mut R,
) -> Result<Partition> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidArgument(errs.join("; ")));
    }
    match spec.scheme {
        PartitionScheme::Iid => partition_iid(dataset, spec.num_clients, rng),
        PartitionScheme::MixedShard {
            shard_size,
            shards_per_client,
            uniform_fraction,
        } => partition_shards(
            dataset,
            spec.num_clients,
            shard_size,
            shards_per_client,
            uniform_fraction,
            rng,
        ),
        PartitionScheme::Dirichlet { alpha } => {
            partition_dirichlet(dataset, spec.num_clients, alpha, rng)
        }
    }
}

/// Random permutation cut into `n` parts whose sizes differ by at most one.
pub fn partition_iid<R: Rng + ?Sized>(dataset: &Dataset, n: usize, rng: &mut R) -> Result<Partition> {
    if n == 0 {
        return Err(Error::InvalidArgument("number of clients must be positive".into()));
    }
    if n > dataset.len() {
        return Err(Error::InsufficientSamples {
            needed: n,
            available: dataset.len(),
        });
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(rng);
    let base = idx.len() / n;
    let extra = idx.len() % n;
    let mut assignments = Vec::with_capacity(n);
    let mut start = 0;
    for k in 0..n {
        let len = base + usize::from(k < extra);
        assignments.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(Partition { assignments })
}

/// Label-sorted shards with a uniformly sampled admixture.
///
/// Every shard has `shard_size` samples: `round((1 - uniform_fraction) *
/// shard_size)` come from a contiguous run of the label-sorted pool, the rest
/// from a pool sampled uniformly across the dataset. Shards are dealt to
/// clients at random, `shards_per_client` each. Samples beyond
/// `n * shards_per_client * shard_size` are left unassigned.
pub fn partition_shards<R: Rng + ?Sized>(
    dataset: &Dataset,
    n: usize,
    shard_size: usize,
    shards_per_client: usize,
    uniform_fraction: f64,
    rng: &mut R,
) -> Result<Partition> {
    if n == 0 || shard_size == 0 || shards_per_client == 0 {
        return Err(Error::InvalidArgument(
            "clients, shard size and shards per client must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&uniform_fraction) {
        return Err(Error::InvalidArgument(format!(
            "uniform_fraction {uniform_fraction} outside [0, 1]"
        )));
    }
    let num_shards = n * shards_per_client;
    let needed = num_shards * shard_size;
    if needed > dataset.len() {
        return Err(Error::InsufficientSamples {
            needed,
            available: dataset.len(),
        });
    }
    let sorted_per_shard = ((1.0 - uniform_fraction) * shard_size as f64).round() as usize;
    let uniform_per_shard = shard_size - sorted_per_shard;

    // Draw the samples that will be used, then split them into the two pools.
    let mut used: Vec<usize> = sample(rng, dataset.len(), needed).into_vec();
    used.shuffle(rng);
    let (uniform_pool, sorted_pool) = used.split_at(num_shards * uniform_per_shard);
    let mut sorted_pool = sorted_pool.to_vec();
    // The pool is already in random order, so a stable sort leaves each
    // class run shuffled.
    sorted_pool.sort_by_key(|&i| dataset.labels[i]);

    let shards: Vec<Vec<usize>> = (0..num_shards)
        .map(|s| {
            let mut shard = sorted_pool[s * sorted_per_shard..(s + 1) * sorted_per_shard].to_vec();
            shard.extend_from_slice(&uniform_pool[s * uniform_per_shard..(s + 1) * uniform_per_shard]);
            shard
        })
        .collect();

    let mut order: Vec<usize> = (0..num_shards).collect();
    order.shuffle(rng);
    let assignments = order
        .chunks(shards_per_client)
        .map(|ids| ids.iter().flat_map(|&s| shards[s].iter().copied()).collect())
        .collect();
    Ok(Partition { assignments })
}

/// Proportions over `n` clients drawn from a symmetric Dirichlet by
/// normalizing independent Gamma(alpha, 1) draws.
fn dirichlet_proportions<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("alpha {alpha}: {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        Ok(draws.into_iter().map(|g| g / sum).collect())
    } else {
        // Every draw underflowed (tiny alpha): the limit is a point mass.
        let mut p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
        Ok(p)
    }
}

/// Largest-remainder apportionment of `total` by `proportions`. Ties go to
/// the lower index.
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rest = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    counts
}

/// For each class, split its samples over the clients with proportions drawn
/// from `Dirichlet(alpha * 1_n)`. Client volumes generally differ.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    dataset: &Dataset,
    n: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Partition> {
    if n == 0 {
        return Err(Error::InvalidArgument("number of clients must be positive".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be positive")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut assignments = vec![Vec::new(); n];
    for mut members in by_class {
        members.shuffle(rng);
        let props = dirichlet_proportions(n, alpha, rng)?;
        let counts = largest_remainder(members.len(), &props);
        let mut start = 0;
        for (k, c) in counts.into_iter().enumerate() {
            assignments[k].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    Ok(Partition { assignments })
}
