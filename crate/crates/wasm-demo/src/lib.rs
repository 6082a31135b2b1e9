//! WebAssembly bindings for the demo page in `www/`.
//!
//! All surfaces are returned as flat row-major arrays over the 20 x 20
//! partition grid of the simulation geometry.

use mscos::basis::moran_basis;
use mscos::evaluate::rmse;
use mscos::model::{Arity, Hyperparams, ModelKind};
use mscos::predict::{cos_predict, PredictOptions, PredictQuantity, Target};
use mscos::sampler::{run_chain, McmcConfig};
use mscos::simulate::{build_sim_supports, generate_dataset, SimDataset, SimSupports, TruthParams};
use mscos::supports::build_grid_support;
use mscos::supports::Rect;
use wasm_bindgen::prelude::*;

pub const GRID: usize = 20;
const RANK: usize = 30;

fn kind(name: &str) -> Result<ModelKind, String> {
    name.parse::<ModelKind>().map_err(|e| e.to_string())
}

/// A simulated dataset held in the page.
#[wasm_bindgen]
pub struct Demo {
    sims: SimSupports,
    sim: SimDataset,
}

/// Posterior predictive means of one fit, with their RMSE against the
/// partition-scale truth.
#[wasm_bindgen]
pub struct FitSummary {
    means: [Vec<f64>; 2],
    rmse: [f64; 2],
    acceptance: f64,
}

impl Demo {
    pub fn create(truth: &str, seed: u64) -> Result<Demo, String> {
        let sims = build_sim_supports().map_err(|e| e.to_string())?;
        let k = kind(truth)?;
        let spec = sims.model_spec(k, Arity::Bivariate, Hyperparams::default(), RANK, 0).map_err(|e| e.to_string())?;
        let sim = generate_dataset(&spec, &TruthParams::for_kind(k), seed).map_err(|e| e.to_string())?;
        Ok(Demo { sims, sim })
    }

    /// Coarse observations painted onto the partition cells they cover.
    pub fn observed_surface(&self, var: usize) -> Vec<f64> {
        let p = if var == 0 { &self.sims.p1 } else { &self.sims.p2 };
        let y = self.sim.data.var(var);
        p.owners().iter().map(|o| o.and_then(|i| y[i]).unwrap_or(f64::NAN)).collect()
    }

    pub fn run_fit(&self, fit: &str, n_iter: usize, seed: u64) -> Result<FitSummary, String> {
        let k = kind(fit)?;
        let spec = self.sims.model_spec(k, Arity::Bivariate, Hyperparams::default(), RANK, 0).map_err(|e| e.to_string())?;
        let mcmc = McmcConfig { n_iter, burn_in: n_iter / 4, seed, ..McmcConfig::default() };
        let draws = run_chain(&spec, &self.sim.data, &mcmc).map_err(|e| e.to_string())?;
        let opts = PredictOptions { seed, quantity: PredictQuantity::Predictive, keep_draws: false };
        let pred = cos_predict(&spec, std::slice::from_ref(&draws), &Target::Partition, &opts).map_err(|e| e.to_string())?;
        let means = [pred.means(0), pred.means(1)];
        let rmse = [
            rmse(&self.sim.y_a[0], &means[0]).map_err(|e| e.to_string())?,
            rmse(&self.sim.y_a[1], &means[1]).map_err(|e| e.to_string())?,
        ];
        let rates: Vec<f64> = draws.acceptance.iter().map(|a| a.1).collect();
        let acceptance = if rates.is_empty() { f64::NAN } else { rates.iter().sum::<f64>() / rates.len() as f64 };
        Ok(FitSummary { means, rmse, acceptance })
    }
}

#[wasm_bindgen]
impl Demo {
    /// Simulates one bivariate dataset from `truth` (`ms-sre`, `ms-mcar`
    /// or `ms-oh`).
    #[wasm_bindgen(constructor)]
    pub fn new(truth: &str, seed: u32) -> Result<Demo, JsError> {
        Self::create(truth, seed as u64).map_err(|e| JsError::new(&e))
    }

    /// Noisy partition-scale truth of variable 0 or 1.
    pub fn truth(&self, var: usize) -> Vec<f64> {
        self.sim.y_a[var.min(1)].clone()
    }

    pub fn observed(&self, var: usize) -> Vec<f64> {
        self.observed_surface(var.min(1))
    }

    /// Fits one chain and predicts both variables on the partition grid.
    pub fn fit(&self, fit: &str, n_iter: usize, seed: u32) -> Result<FitSummary, JsError> {
        self.run_fit(fit, n_iter, seed as u64).map_err(|e| JsError::new(&e))
    }
}

#[wasm_bindgen]
impl FitSummary {
    pub fn means(&self, var: usize) -> Vec<f64> {
        self.means[var.min(1)].clone()
    }

    pub fn rmse(&self, var: usize) -> f64 {
        self.rmse[var.min(1)]
    }

    /// Mean Metropolis acceptance rate after burn-in.
    pub fn acceptance(&self) -> f64 {
        self.acceptance
    }
}

pub fn basis_column(r: usize, k: usize) -> Result<Vec<f64>, String> {
    let grid = build_grid_support(GRID, GRID, Rect::UNIT).map_err(|e| e.to_string())?;
    let g = moran_basis(&grid.adjacency(), r).map_err(|e| e.to_string())?;
    if k >= g.ncols() {
        return Err(format!("basis function {k} requested but the rank is {}", g.ncols()));
    }
    Ok(g.column(k).iter().copied().collect())
}

/// Basis function `k` of the rank-`r` Moran basis on the 20 x 20 grid.
#[wasm_bindgen(js_name = moranBasis)]
pub fn moran_basis_js(r: usize, k: usize) -> Result<Vec<f64>, JsError> {
    basis_column(r, k).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observed_surface_paints_coarse_values() {
        let demo = Demo::create("ms-sre", 3).unwrap();
        let surf = demo.observed_surface(0);
        assert_eq!(surf.len(), GRID * GRID);
        // each D1 unit covers a 2 x 2 block of cells
        assert_eq!(surf[0], surf[1]);
        assert_eq!(surf[0], surf[GRID]);
        assert_eq!(demo.sim.data.y1[0], Some(surf[0]));
        assert!(demo.observed_surface(1).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn short_fit_reports_finite_rmse() {
        let demo = Demo::create("ms-oh", 1).unwrap();
        let s = demo.run_fit("ms-oh", 200, 2).unwrap();
        assert_eq!(s.means(0).len(), GRID * GRID);
        assert!(s.rmse(0).is_finite() && s.rmse(1).is_finite());
        assert!(s.acceptance() > 0.0 && s.acceptance() < 1.0);
    }

    #[test]
    fn basis_columns_are_unit_length() {
        let col = basis_column(5, 4).unwrap();
        let norm: f64 = col.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-8);
        assert!(basis_column(5, 5).is_err());
        assert!(kind("ms-xyz").is_err());
    }
}
