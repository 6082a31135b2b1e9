//! Simulation study: the misaligned unit-square supports, data generation
//! from each model's truth, and the truth x fit scenario grid.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::evaluate::rmse;
use crate::model::{sample_process, Arity, ChainState, Dataset, Hyperparams, ModelKind, ModelSpec};
use crate::predict::{cos_predict, PredictOptions, PredictQuantity, Target};
use crate::sampler::{run_chain, McmcConfig};
use crate::supports::{build_partition_matrix, ArealSupport, OverlapRow, OverlapTable, PartitionMatrix, Rect};

/// Areal support made of axis-aligned rectangles. Units sharing a boundary
/// segment of positive length are neighbours.
pub fn rect_support(rects: &[Rect], ids: Vec<String>) -> Result<ArealSupport> {
    const TOL: f64 = 1e-12;
    let mut edges = Vec::new();
    for i in 0..rects.len() {
        for j in (i + 1)..rects.len() {
            let (a, b) = (&rects[i], &rects[j]);
            let x_overlap = a.x1.min(b.x1) - a.x0.max(b.x0);
            let y_overlap = a.y1.min(b.y1) - a.y0.max(b.y0);
            let touch_x = (a.x1 - b.x0).abs() < TOL || (b.x1 - a.x0).abs() < TOL;
            let touch_y = (a.y1 - b.y0).abs() < TOL || (b.y1 - a.y0).abs() < TOL;
            if (touch_x && y_overlap > TOL) || (touch_y && x_overlap > TOL) {
                edges.push((i, j));
            }
        }
    }
    ArealSupport::new(ids, rects.iter().map(Rect::area).collect(), rects.iter().map(Rect::center).collect(), &edges)
}

/// Overlap table from exact rectangle intersections.
pub fn rect_overlaps(coarse: &[Rect], coarse_ids: &[String], fine: &[Rect], fine_ids: &[String]) -> Result<OverlapTable> {
    let mut rows = Vec::new();
    for (l, f) in fine.iter().enumerate() {
        for (i, c) in coarse.iter().enumerate() {
            let a = f.intersection_area(c);
            if a > 1e-12 * f.area() {
                rows.push(OverlapRow { fine_id: fine_ids[l].clone(), coarse_id: coarse_ids[i].clone(), overlap_area: a });
            }
        }
    }
    OverlapTable::new(rows)
}

/// Rectangles of the tensor grid with the given cut points, row-major from
/// the lower-left corner.
pub fn grid_rects(xcuts: &[f64], ycuts: &[f64]) -> Vec<Rect> {
    let mut out = Vec::new();
    for r in 0..ycuts.len() - 1 {
        for c in 0..xcuts.len() - 1 {
            out.push(Rect::new(xcuts[c], ycuts[r], xcuts[c + 1], ycuts[r + 1]));
        }
    }
    out
}

fn uniform_cuts(n: usize) -> Vec<f64> {
    (0..=n).map(|k| k as f64 / n as f64).collect()
}

/// D2 cut points: each 0.2 block is cut at 0.05 and 0.15, so every block
/// holds a 3 x 3 motif of pieces (corners one fine cell, edges two, centre
/// four) and the centre pieces straddle the block's internal D1 boundary.
fn motif_cuts() -> Vec<f64> {
    let mut cuts = vec![0.0];
    for b in 0..5 {
        let x0 = b as f64 * 0.2;
        cuts.extend([x0 + 0.05, x0 + 0.15, x0 + 0.2]);
    }
    cuts
}

fn grid_ids(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| format!("{prefix}r{r}c{c}"))).collect()
}

/// The simulation geometry on the unit square.
#[derive(Clone, Debug)]
pub struct SimSupports {
    pub d1: ArealSupport,
    pub d2: ArealSupport,
    pub da: ArealSupport,
    pub p1: PartitionMatrix,
    pub p2: PartitionMatrix,
    pub d1_rects: Vec<Rect>,
    pub d2_rects: Vec<Rect>,
    pub da_rects: Vec<Rect>,
}

/// D1 = 10 x 10 grid, D2 = 225-unit motif tiling, DA = 20 x 20 overlay.
pub fn build_sim_supports() -> Result<SimSupports> {
    let d1_rects = grid_rects(&uniform_cuts(10), &uniform_cuts(10));
    let cuts = motif_cuts();
    let d2_rects = grid_rects(&cuts, &cuts);
    let da_rects = grid_rects(&uniform_cuts(20), &uniform_cuts(20));
    let d1 = rect_support(&d1_rects, grid_ids("d1_", 10, 10))?;
    let d2 = rect_support(&d2_rects, grid_ids("d2_", 15, 15))?;
    let da = rect_support(&da_rects, grid_ids("a_", 20, 20))?;
    let p1 = build_partition_matrix(&d1, &da, &rect_overlaps(&d1_rects, d1.ids(), &da_rects, da.ids())?)?;
    let p2 = build_partition_matrix(&d2, &da, &rect_overlaps(&d2_rects, d2.ids(), &da_rects, da.ids())?)?;
    Ok(SimSupports { d1, d2, da, p1, p2, d1_rects, d2_rects, da_rects })
}

impl SimSupports {
    /// Model on these supports with partition support DA.
    pub fn model_spec(&self, kind: ModelKind, arity: Arity, hyper: Hyperparams, r: usize, knot_seed: u64) -> Result<ModelSpec> {
        ModelSpec::build(kind, arity, hyper, Some(self.p1.clone()), Some(self.p2.clone()), &self.da, r, knot_seed)
    }
}

/// True parameter values of a generating model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthParams {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sigma2_eta: f64,
    pub phi: f64,
    pub rho: f64,
    pub nu2: f64,
    pub tau: f64,
    /// Variance of the noiseless DA mean surface over the noise variance.
    pub snr: f64,
}

impl TruthParams {
    pub fn for_kind(kind: ModelKind) -> Self {
        let (beta0, beta1, beta2) = match kind {
            ModelKind::Oh => (0.0, 2.0, 2.0),
            _ => (0.0, 2.0, 5.0),
        };
        Self { beta0, beta1, beta2, sigma2_eta: 1.0, phi: 0.1, rho: 0.9, nu2: 1.5, tau: 0.2, snr: 5.0 }
    }

    pub fn validate(&self, hyper: &Hyperparams) -> Result<()> {
        if !(self.sigma2_eta > 0.0 && self.nu2 > 0.0 && self.snr > 0.0) {
            return Err(invalid("truth variances and SNR must be positive"));
        }
        for (name, v, a, b) in [
            ("phi", self.phi, hyper.a_phi, hyper.b_phi),
            ("rho", self.rho, hyper.a_rho, hyper.b_rho),
            ("tau", self.tau, hyper.a_tau, hyper.b_tau),
        ] {
            if !(v >= a && v <= b) {
                return Err(invalid(format!("true {name} = {v} lies outside its prior support [{a}, {b}]")));
            }
        }
        Ok(())
    }
}

/// A generated dataset with the partition-scale truth retained.
#[derive(Clone, Debug, PartialEq)]
pub struct SimDataset {
    pub data: Dataset,
    /// Noisy partition-scale values per variable.
    pub y_a: [Vec<f64>; 2],
    /// Noiseless partition-scale means per variable.
    pub mean_a: [Vec<f64>; 2],
    /// Noise variances used.
    pub sigma2: [f64; 2],
    pub truth: ChainState,
}

fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Draws one dataset from `spec` (a bivariate model on the simulation
/// supports) at the true parameters. Noise is added on the partition scale
/// and then aggregated, so `Y_k = P_k Y_A,k` holds exactly.
pub fn generate_dataset(spec: &ModelSpec, truth: &TruthParams, seed: u64) -> Result<SimDataset> {
    if spec.arity() != Arity::Bivariate {
        return Err(invalid("data generation needs a bivariate model"));
    }
    truth.validate(spec.hyper())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = spec.initial_state(&Dataset::default());
    state.beta0 = truth.beta0;
    state.beta1 = truth.beta1;
    state.beta2 = truth.beta2;
    state.sigma2_eta = truth.sigma2_eta;
    state.phi = truth.phi;
    state.rho = truth.rho;
    state.nu2 = truth.nu2;
    state.tau = truth.tau;
    state.process = sample_process(spec, &state, &mut rng)?;
    let mean_a = spec.partition_means(&state);
    let mut y_a = [Vec::new(), Vec::new()];
    let mut sigma2 = [0.0; 2];
    let mut obs = [Vec::new(), Vec::new()];
    for v in 0..2 {
        sigma2[v] = sample_variance(&mean_a[v]) / truth.snr;
        let sd = sigma2[v].sqrt();
        y_a[v] = mean_a[v]
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + sd * z
            })
            .collect();
        obs[v] = spec.block(v).expect("bivariate").partition.apply(&y_a[v]);
    }
    state.sigma2_1 = sigma2[0];
    state.sigma2_2 = sigma2[1];
    let [o1, o2] = obs;
    Ok(SimDataset {
        data: Dataset::new(o1.into_iter().map(Some).collect(), o2.into_iter().map(Some).collect()),
        y_a,
        mean_a,
        sigma2,
        truth: state,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_datasets: usize,
    pub truths: Vec<ModelKind>,
    pub fits: Vec<ModelKind>,
    pub mcmc: McmcConfig,
    /// Base seed for datasets and chains.
    pub seed: u64,
    pub r: usize,
    pub knot_seed: u64,
    pub hyper: Hyperparams,
    /// Score the noiseless mean surface instead of predictive draws.
    pub latent_mean: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_datasets: 20,
            truths: ModelKind::ALL.to_vec(),
            fits: ModelKind::ALL.to_vec(),
            mcmc: McmcConfig::default(),
            seed: 1,
            r: 50,
            knot_seed: 0,
            hyper: Hyperparams::default(),
            latent_mean: false,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_datasets == 0 {
            return Err(invalid("n_datasets must be at least 1"));
        }
        if self.truths.is_empty() || self.fits.is_empty() {
            return Err(invalid("truth and fit lists must be non-empty"));
        }
        if self.r == 0 || self.r > 400 {
            return Err(invalid(format!("basis rank r = {} must lie in 1..=400", self.r)));
        }
        self.mcmc.validate()?;
        self.hyper.validate()
    }

    pub fn dataset_seed(&self, truth_index: usize, dataset: usize) -> u64 {
        self.seed.wrapping_add((truth_index * self.n_datasets + dataset) as u64 * 1_000)
    }
}

/// Outcome of one (truth, dataset, fit) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub truth: ModelKind,
    pub dataset: usize,
    pub fit: ModelKind,
    /// `Err` holds the failure message of an aborted chain.
    pub outcome: std::result::Result<RunMetrics, String>,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    /// RMSE against the partition-scale truth, per variable.
    pub rmse_partition: [f64; 2],
    /// RMSE of the aggregated predictions against the observed data.
    pub rmse_original: [f64; 2],
}

/// Mean and sd of one RMSE over completed runs.
#[derive(Clone, Debug, PartialEq)]
pub struct TableCell {
    pub truth: ModelKind,
    pub fit: ModelKind,
    pub variable: usize,
    /// `partition` or `original`.
    pub scale: &'static str,
    pub mean: f64,
    pub sd: f64,
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub runs: Vec<RunRecord>,
    pub table: Vec<TableCell>,
}

impl ScenarioResult {
    pub fn cell(&self, truth: ModelKind, fit: ModelKind, variable: usize, scale: &str) -> Option<&TableCell> {
        self.table.iter().find(|c| c.truth == truth && c.fit == fit && c.variable == variable && c.scale == scale)
    }
}

/// Fits one model to one dataset and scores its predictions.
pub fn score_fit(spec: &ModelSpec, sim: &SimDataset, mcmc: &McmcConfig, latent_mean: bool) -> Result<RunMetrics> {
    let draws = run_chain(spec, &sim.data, mcmc)?;
    let quantity = if latent_mean { PredictQuantity::LatentMean } else { PredictQuantity::Predictive };
    let opts = PredictOptions { seed: mcmc.seed, quantity, keep_draws: false };
    let pred = cos_predict(spec, std::slice::from_ref(&draws), &Target::Partition, &opts)?;
    let mut rmse_partition = [0.0; 2];
    let mut rmse_original = [0.0; 2];
    for v in 0..2 {
        let means = pred.means(v);
        rmse_partition[v] = rmse(&sim.y_a[v], &means)?;
        let p = &spec.block(v).expect("bivariate").partition;
        let observed: Vec<f64> = sim.data.var(v).iter().map(|y| y.unwrap_or(f64::NAN)).collect();
        rmse_original[v] = rmse(&observed, &p.apply(&means))?;
    }
    Ok(RunMetrics { rmse_partition, rmse_original })
}

/// Runs every (truth, dataset, fit) triple. Failed chains are logged,
/// recorded and left out of the table.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioResult> {
    config.validate()?;
    let sims = build_sim_supports()?;
    let mut kinds: Vec<ModelKind> = config.truths.iter().chain(&config.fits).copied().collect();
    kinds.sort();
    kinds.dedup();
    let specs: Vec<(ModelKind, ModelSpec)> = kinds
        .iter()
        .map(|&k| Ok((k, sims.model_spec(k, Arity::Bivariate, config.hyper, config.r, config.knot_seed)?)))
        .collect::<Result<_>>()?;
    let spec_of = |k: ModelKind| &specs.iter().find(|(kk, _)| *kk == k).expect("built above").1;

    let mut datasets = Vec::new();
    for (ti, &truth) in config.truths.iter().enumerate() {
        for d in 0..config.n_datasets {
            let sim = generate_dataset(spec_of(truth), &TruthParams::for_kind(truth), config.dataset_seed(ti, d))?;
            datasets.push((ti, truth, d, sim));
        }
    }
    let triples: Vec<(usize, usize)> =
        (0..datasets.len()).flat_map(|di| (0..config.fits.len()).map(move |fi| (di, fi))).collect();
    let run = |&(di, fi): &(usize, usize)| {
        let (ti, truth, d, sim) = &datasets[di];
        let fit = config.fits[fi];
        let mcmc = McmcConfig { seed: config.dataset_seed(*ti, *d).wrapping_add(fi as u64 + 1), ..config.mcmc.clone() };
        let start = Instant::now();
        let outcome = score_fit(spec_of(fit), sim, &mcmc, config.latent_mean).map_err(|e| {
            log::warn!("truth {truth} dataset {d} fit {fit} failed: {e}");
            e.to_string()
        });
        RunRecord { truth: *truth, dataset: *d, fit, outcome, seconds: start.elapsed().as_secs_f64() }
    };
    #[cfg(feature = "parallel")]
    let runs: Vec<RunRecord> = {
        use rayon::prelude::*;
        triples.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<RunRecord> = triples.iter().map(run).collect();

    let mut table = Vec::new();
    for &truth in &config.truths {
        for &fit in &config.fits {
            for variable in 0..2 {
                for scale in ["partition", "original"] {
                    let vals: Vec<f64> = runs
                        .iter()
                        .filter(|r| r.truth == truth && r.fit == fit)
                        .filter_map(|r| r.outcome.as_ref().ok())
                        .map(|m| if scale == "partition" { m.rmse_partition[variable] } else { m.rmse_original[variable] })
                        .collect();
                    let n = vals.len();
                    let mean = if n > 0 { vals.iter().sum::<f64>() / n as f64 } else { f64::NAN };
                    let sd = if n > 1 { sample_variance(&vals).sqrt() } else { f64::NAN };
                    table.push(TableCell { truth, fit, variable, scale, mean, sd, completed: n });
                }
            }
        }
    }
    Ok(ScenarioResult { runs, table })
}
