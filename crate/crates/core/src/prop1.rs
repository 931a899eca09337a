//! Monte-Carlo check of the expected-gradient scaling under random layer
//! dropping.
//!
//! With `K` participants each keeping a layer independently with
//! probability `p` and uniform weights, the renormalized aggregate
//! `g_hat = sum(zeta_k g_k) / sum(zeta_m)` (zero when nobody kept the layer)
//! has expectation `[1 - (1 - p)^K] * E[g_bar]`, where `g_bar` is the plain
//! mean of the `g_k`. The verifier estimates `E[g_hat] / E[g_bar]` and
//! compares it with that factor.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedTree};

/// Trials per independent stream.
const CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientDistribution {
    Exponential { mean: f64 },
    Uniform { low: f64, high: f64 },
    Constant(f64),
}

impl Default for GradientDistribution {
    fn default() -> Self {
        GradientDistribution::Exponential { mean: 1.0 }
    }
}

impl GradientDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            GradientDistribution::Exponential { mean } => mean,
            GradientDistribution::Uniform { low, high } => 0.5 * (low + high),
            GradientDistribution::Constant(v) => v,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            GradientDistribution::Exponential { mean } => mean > 0.0 && mean.is_finite(),
            GradientDistribution::Uniform { low, high } => low < high && low.is_finite() && high.is_finite(),
            GradientDistribution::Constant(v) => v.is_finite(),
        };
        if ok && self.mean() != 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "gradient distribution {self:?} must be valid with nonzero mean"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop1Report {
    pub k: usize,
    pub p: f64,
    pub trials: u64,
    pub empirical_ratio: f64,
    pub closed_form: f64,
    pub abs_error: f64,
    /// Delta-method standard error of `empirical_ratio`.
    pub std_error: f64,
}

impl Prop1Report {
    /// `|empirical - closed_form| < 3 sigma`, or an exact match.
    pub fn within_three_sigma(&self) -> bool {
        self.abs_error == 0.0 || self.abs_error < 3.0 * self.std_error
    }
}

/// `1 - (1 - p)^K`.
pub fn closed_form(k: usize, p: f64) -> f64 {
    1.0 - (1.0 - p).powi(k as i32)
}

#[derive(Debug, Clone, Copy, Default)]
struct Partial {
    n: u64,
    sum_hat: f64,
    sum_bar: f64,
    sum_hat2: f64,
    sum_bar2: f64,
    sum_cross: f64,
}

fn run_chunk(
    k: usize,
    p: f64,
    trials: u64,
    dist: GradientDistribution,
    rng: &mut impl Rng,
) -> Partial {
    let exp = match dist {
        GradientDistribution::Exponential { mean } => Exp::new(1.0 / mean).ok(),
        _ => None,
    };
    let draw = |rng: &mut dyn rand::RngCore| -> f64 {
        match dist {
            GradientDistribution::Exponential { .. } => exp.as_ref().map_or(0.0, |e| e.sample(rng)),
            GradientDistribution::Uniform { low, high } => rng.random_range(low..high),
            GradientDistribution::Constant(v) => v,
        }
    };
    let mut acc = Partial::default();
    for _ in 0..trials {
        let mut sum_all = 0.0;
        let mut sum_kept = 0.0;
        let mut kept = 0usize;
        for _ in 0..k {
            let g = draw(rng);
            let keep = rng.random::<f64>() < p;
            sum_all += g;
            if keep {
                sum_kept += g;
                kept += 1;
            }
        }
        let g_hat = if kept > 0 { sum_kept / kept as f64 } else { 0.0 };
        let g_bar = sum_all / k as f64;
        acc.n += 1;
        acc.sum_hat += g_hat;
        acc.sum_bar += g_bar;
        acc.sum_hat2 += g_hat * g_hat;
        acc.sum_bar2 += g_bar * g_bar;
        acc.sum_cross += g_hat * g_bar;
    }
    acc
}

/// Verifier with the default unit-mean exponential gradients.
pub fn verify_prop1(k: usize, p: f64, trials: u64, seed: u64) -> Result<Prop1Report> {
    verify_prop1_with(k, p, trials, seed, GradientDistribution::default())
}

/// Trials are split into fixed-size chunks, each with its own stream, and
/// the partial sums are reduced in chunk order, so the report does not
/// depend on the number of worker threads.
pub fn verify_prop1_with(
    k: usize,
    p: f64,
    trials: u64,
    seed: u64,
    dist: GradientDistribution,
) -> Result<Prop1Report> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p {p} outside [0, 1]")));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    dist.validate()?;

    let seeds = SeedTree::new(seed);
    let chunks = trials.div_ceil(CHUNK);
    let partials: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = CHUNK.min(trials - c * CHUNK);
            run_chunk(k, p, n, dist, &mut seeds.stream(Purpose::Prop1, c, 0))
        })
        .collect();
    let total = partials.into_iter().fold(Partial::default(), |a, b| Partial {
        n: a.n + b.n,
        sum_hat: a.sum_hat + b.sum_hat,
        sum_bar: a.sum_bar + b.sum_bar,
        sum_hat2: a.sum_hat2 + b.sum_hat2,
        sum_bar2: a.sum_bar2 + b.sum_bar2,
        sum_cross: a.sum_cross + b.sum_cross,
    });

    let n = total.n as f64;
    let ratio = total.sum_hat / total.sum_bar;
    let mean_bar = total.sum_bar / n;
    let var_d = ((total.sum_hat2 - 2.0 * ratio * total.sum_cross + ratio * ratio * total.sum_bar2) / n)
        .max(0.0);
    let std_error = (var_d / n).sqrt() / mean_bar.abs();
    let cf = closed_form(k, p);
    Ok(Prop1Report {
        k,
        p,
        trials,
        empirical_ratio: ratio,
        closed_form: cf,
        abs_error: (ratio - cf).abs(),
        std_error,
    })
}
