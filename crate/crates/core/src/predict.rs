//! Change-of-support prediction from posterior draws: composition sampling
//! of the partition-scale values, optionally aggregated onto a target
//! support by a user partition matrix.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::model::{log_likelihood_pointwise, Dataset, ModelSpec};
use crate::sampler::PosteriorDraws;
use crate::supports::PartitionMatrix;

/// Floor on predictive noise variances.
pub const MIN_PREDICTIVE_VAR: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub enum Target {
    /// The partition support itself.
    #[default]
    Partition,
    /// Aggregation from the partition support onto another support.
    Matrix(PartitionMatrix),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PredictQuantity {
    /// One predictive realization per posterior draw.
    #[default]
    Predictive,
    /// The noiseless mean surface.
    LatentMean,
}

#[derive(Clone, Debug, Default)]
pub struct PredictOptions {
    pub seed: u64,
    pub quantity: PredictQuantity,
    pub keep_draws: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitSummary {
    pub mean: f64,
    pub sd: f64,
    pub lo95: f64,
    pub hi95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    pub unit_ids: Vec<String>,
    /// Active variables (0 or 1).
    pub variables: Vec<usize>,
    /// Per variable, per target unit; empty for inactive variables.
    pub summaries: [Vec<UnitSummary>; 2],
    /// Per variable, per draw, per unit, when requested.
    pub draws: Option<[Vec<Vec<f64>>; 2]>,
}

impl PredictionResult {
    pub fn means(&self, var: usize) -> Vec<f64> {
        self.summaries[var].iter().map(|s| s.mean).collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, sample sd and central 95% interval. The interval is widened to
/// contain the mean when skewed samples would place it outside.
pub fn summarize(values: &[f64]) -> UnitSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    UnitSummary {
        mean,
        sd,
        lo95: quantile_sorted(&sorted, 0.025).min(mean),
        hi95: quantile_sorted(&sorted, 0.975).max(mean),
    }
}

/// Flattened `(chain, draw)` index over pooled chains.
fn pooled_index(draws: &[PosteriorDraws]) -> Vec<(usize, usize)> {
    draws.iter().enumerate().flat_map(|(c, d)| (0..d.len()).map(move |s| (c, s))).collect()
}

fn map_draws<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Posterior predictive summaries on the target support from the pooled
/// draws of one or more chains. Draw `k` of the pool uses RNG stream `k`
/// of `opts.seed`, so results do not depend on thread scheduling.
pub fn cos_predict(
    spec: &ModelSpec,
    draws: &[PosteriorDraws],
    target: &Target,
    opts: &PredictOptions,
) -> Result<PredictionResult> {
    let index = pooled_index(draws);
    if index.is_empty() {
        return Err(invalid("no posterior draws to predict from"));
    }
    for d in draws {
        if d.kind != spec.kind() || d.params != spec.scalar_params() {
            return Err(invalid(format!("draws from a {} fit do not match the {} model", d.kind, spec.kind())));
        }
        if d.process.first().is_some_and(|p| p.len() != spec.process_dim()) {
            return Err(invalid("draw process length does not match the model"));
        }
    }
    let n = spec.n_fine();
    let unit_ids = match target {
        Target::Partition => {
            let block = spec.block(spec.active_vars()[0]).expect("active block");
            block.partition.fine_ids().to_vec()
        }
        Target::Matrix(p) => {
            if p.ncols() != n {
                return Err(invalid(format!(
                    "target partition matrix has {} columns but the partition support has {n} units",
                    p.ncols()
                )));
            }
            p.coarse_ids().to_vec()
        }
    };
    let vars = spec.active_vars();
    let per_draw: Vec<[Vec<f64>; 2]> = map_draws(index.len(), |k| {
        let (c, s) = index[k];
        let state = draws[c].state(spec, s);
        let mut means = spec.partition_means(&state);
        if opts.quantity == PredictQuantity::Predictive {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(k as u64);
            for &v in &vars {
                let sd = state.sigma2(v).max(MIN_PREDICTIVE_VAR).sqrt();
                for m in means[v].iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *m += sd * z;
                }
            }
        }
        if let Target::Matrix(p) = target {
            for &v in &vars {
                means[v] = p.apply(&means[v]);
            }
        }
        means
    });
    let n_units = unit_ids.len();
    let mut summaries = [Vec::new(), Vec::new()];
    for &v in &vars {
        summaries[v] = (0..n_units)
            .map(|u| {
                let vals: Vec<f64> = per_draw.iter().map(|d| d[v][u]).collect();
                summarize(&vals)
            })
            .collect();
    }
    let draws_out = opts.keep_draws.then(|| {
        let mut out = [Vec::new(), Vec::new()];
        for &v in &vars {
            out[v] = per_draw.iter().map(|d| d[v].clone()).collect();
        }
        out
    });
    Ok(PredictionResult { unit_ids, variables: vars, summaries, draws: draws_out })
}

/// Pointwise log-likelihood of the observed data at every pooled draw
/// (rows: draws, columns: observations in [`ModelSpec::observations`] order).
pub fn predictive_ll_matrix(spec: &ModelSpec, draws: &[PosteriorDraws], data: &Dataset) -> Result<DMatrix<f64>> {
    spec.check_dataset(data)?;
    let index = pooled_index(draws);
    let n_obs = spec.observations(data).len();
    let rows: Vec<Vec<f64>> = map_draws(index.len(), |k| {
        let (c, s) = index[k];
        log_likelihood_pointwise(spec, &draws[c].state(spec, s), data)
    });
    Ok(DMatrix::from_fn(rows.len(), n_obs, |i, j| rows[i][j]))
}
