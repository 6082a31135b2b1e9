//! The three bivariate multiscale hierarchies (spatial random effects,
//! multivariate CAR, ordered hierarchical) and their univariate
//! reductions: parameter containers, data containers, and the
//! likelihood/prior log-densities shared by the sampler and WAIC.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{
    mcar_precision_vars, moran_basis, select_knots, sigma_inverse, BasisSet, CarStructure,
    CorrelationFactor, KnotGeometry,
};
use crate::error::{invalid, Result};
use crate::linalg::BandedSpd;
use crate::supports::{diag_ppt, ArealSupport, PartitionMatrix};

/// Which hierarchy is fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "ms-sre")]
    Sre,
    #[serde(rename = "ms-mcar")]
    Mcar,
    #[serde(rename = "ms-oh")]
    Oh,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Sre, ModelKind::Mcar, ModelKind::Oh];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sre => "ms-sre",
            ModelKind::Mcar => "ms-mcar",
            ModelKind::Oh => "ms-oh",
        }
    }

    pub fn uses_basis(self) -> bool {
        !matches!(self, ModelKind::Mcar)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ms-sre" | "sre" => Ok(ModelKind::Sre),
            "ms-mcar" | "mcar" => Ok(ModelKind::Mcar),
            "ms-oh" | "oh" => Ok(ModelKind::Oh),
            other => Err(invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

/// The two response variables. `First` lives on D1, `Second` on D2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    First,
    Second,
}

impl Variable {
    pub fn index(self) -> usize {
        match self {
            Variable::First => 0,
            Variable::Second => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arity {
    Bivariate,
    Univariate(Variable),
}

impl Arity {
    pub fn is_active(self, var: usize) -> bool {
        match self {
            Arity::Bivariate => true,
            Arity::Univariate(v) => v.index() == var,
        }
    }

    pub fn active(self) -> Vec<usize> {
        (0..2).filter(|&v| self.is_active(v)).collect()
    }
}

/// Prior hyperparameters. Defaults are the flat choices of the simulation
/// study.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub sigma2_beta: f64,
    pub a_eta: f64,
    pub b_eta: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_nu: f64,
    pub b_nu: f64,
    pub a_phi: f64,
    pub b_phi: f64,
    pub a_rho: f64,
    pub b_rho: f64,
    pub a_tau: f64,
    pub b_tau: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            sigma2_beta: 1e6,
            a_eta: 1.0,
            b_eta: 1.0,
            a_sigma: 1.0,
            b_sigma: 1.0,
            a_nu: 1.0,
            b_nu: 1.0,
            a_phi: 0.0,
            b_phi: 10.0,
            a_rho: 0.0,
            b_rho: 1.0,
            a_tau: -1.0,
            b_tau: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma2_beta", self.sigma2_beta),
            ("a_eta", self.a_eta),
            ("b_eta", self.b_eta),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("a_nu", self.a_nu),
            ("b_nu", self.b_nu),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        for (name, a, b) in [
            ("phi", self.a_phi, self.b_phi),
            ("rho", self.a_rho, self.b_rho),
            ("tau", self.a_tau, self.b_tau),
        ] {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(invalid(format!("uniform prior for {name} needs a < b, got ({a}, {b})")));
            }
        }
        if self.a_phi < 0.0 {
            return Err(invalid("a_phi must be non-negative"));
        }
        if self.a_tau < -1.0 || self.b_tau > 1.0 {
            return Err(invalid("tau bounds must lie in [-1, 1]"));
        }
        if self.a_rho < 0.0 || self.b_rho > 1.0 {
            return Err(invalid("rho bounds must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn bounds(&self, p: Param) -> Option<(f64, f64)> {
        match p {
            Param::Phi => Some((self.a_phi, self.b_phi)),
            Param::Rho => Some((self.a_rho, self.b_rho)),
            Param::Tau => Some((self.a_tau, self.b_tau)),
            _ => None,
        }
    }
}

/// Scalar unknowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Beta0,
    Beta1,
    Beta2,
    Sigma2First,
    Sigma2Second,
    Sigma2Eta,
    Nu2,
    Phi,
    Rho,
    Tau,
}

impl Param {
    pub fn name(self) -> &'static str {
        match self {
            Param::Beta0 => "beta0",
            Param::Beta1 => "beta1",
            Param::Beta2 => "beta2",
            Param::Sigma2First => "sigma2_1",
            Param::Sigma2Second => "sigma2_2",
            Param::Sigma2Eta => "sigma2_eta",
            Param::Nu2 => "nu2",
            Param::Phi => "phi",
            Param::Rho => "rho",
            Param::Tau => "tau",
        }
    }

    pub fn from_name(s: &str) -> Option<Param> {
        [
            Param::Beta0,
            Param::Beta1,
            Param::Beta2,
            Param::Sigma2First,
            Param::Sigma2Second,
            Param::Sigma2Eta,
            Param::Nu2,
            Param::Phi,
            Param::Rho,
            Param::Tau,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }

    pub fn is_beta(self) -> bool {
        matches!(self, Param::Beta0 | Param::Beta1 | Param::Beta2)
    }

    pub fn is_variance(self) -> bool {
        matches!(self, Param::Sigma2First | Param::Sigma2Second | Param::Sigma2Eta | Param::Nu2)
    }

    pub fn is_bounded(self) -> bool {
        matches!(self, Param::Phi | Param::Rho | Param::Tau)
    }
}

/// Current value of every unknown. Fields that the model does not use
/// keep their initial values and are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    /// `eta` (length r) for basis models, `psi` (variable-major, length
    /// vars * n3) for MCAR.
    pub process: DVector<f64>,
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sigma2_1: f64,
    pub sigma2_2: f64,
    pub sigma2_eta: f64,
    pub phi: f64,
    pub rho: f64,
    pub tau: f64,
    pub nu2: f64,
}

impl ChainState {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Beta0 => self.beta0,
            Param::Beta1 => self.beta1,
            Param::Beta2 => self.beta2,
            Param::Sigma2First => self.sigma2_1,
            Param::Sigma2Second => self.sigma2_2,
            Param::Sigma2Eta => self.sigma2_eta,
            Param::Nu2 => self.nu2,
            Param::Phi => self.phi,
            Param::Rho => self.rho,
            Param::Tau => self.tau,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        let slot = match p {
            Param::Beta0 => &mut self.beta0,
            Param::Beta1 => &mut self.beta1,
            Param::Beta2 => &mut self.beta2,
            Param::Sigma2First => &mut self.sigma2_1,
            Param::Sigma2Second => &mut self.sigma2_2,
            Param::Sigma2Eta => &mut self.sigma2_eta,
            Param::Nu2 => &mut self.nu2,
            Param::Phi => &mut self.phi,
            Param::Rho => &mut self.rho,
            Param::Tau => &mut self.tau,
        };
        *slot = v;
    }

    pub fn sigma2(&self, var: usize) -> f64 {
        if var == 0 {
            self.sigma2_1
        } else {
            self.sigma2_2
        }
    }
}

/// Observations of both variables; `None` marks a missing value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub y1: Vec<Option<f64>>,
    pub y2: Vec<Option<f64>>,
}

impl Dataset {
    pub fn new(y1: Vec<Option<f64>>, y2: Vec<Option<f64>>) -> Self {
        Self { y1, y2 }
    }

    pub fn fully_observed(y1: &[f64], y2: &[f64]) -> Self {
        Self { y1: y1.iter().map(|&v| Some(v)).collect(), y2: y2.iter().map(|&v| Some(v)).collect() }
    }

    pub fn var(&self, var: usize) -> &[Option<f64>] {
        if var == 0 {
            &self.y1
        } else {
            &self.y2
        }
    }

    /// `(unit, value)` pairs of the observed entries of one variable.
    pub fn observed(&self, var: usize) -> Vec<(usize, f64)> {
        self.var(var).iter().enumerate().filter_map(|(i, v)| v.map(|y| (i, y))).collect()
    }

    pub fn n_observed(&self, var: usize) -> usize {
        self.var(var).iter().filter(|v| v.is_some()).count()
    }
}

/// One observed support: its partition matrix onto the partition scale,
/// `diag(P P')`, and (for basis models) the aggregated basis `P G`.
#[derive(Clone, Debug)]
pub struct ObservationBlock {
    pub partition: PartitionMatrix,
    pub ppt: Vec<f64>,
    pub agg_basis: Option<DMatrix<f64>>,
}

impl ObservationBlock {
    pub fn len(&self) -> usize {
        self.partition.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.partition.nrows() == 0
    }
}

/// Spatial structure of the latent process.
#[derive(Clone, Debug)]
pub enum ProcessStructure {
    Basis {
        basis: BasisSet,
        /// Distinct basis for the second variable (MS-SRE only); `None`
        /// shares `basis.g`.
        g2: Option<DMatrix<f64>>,
        geometry: KnotGeometry,
    },
    Car(CarStructure),
}

/// Full model specification: kind, arity, priors and the fixed spatial
/// structure.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    kind: ModelKind,
    arity: Arity,
    hyper: Hyperparams,
    blocks: [Option<ObservationBlock>; 2],
    n_fine: usize,
    process: ProcessStructure,
    mcar_bandwidth: usize,
}

impl ModelSpec {
    /// Spatial random effects or ordered hierarchical model with a Moran basis.
    /// A univariate ordered model is the univariate random-effects model.
    pub fn with_basis(
        kind: ModelKind,
        arity: Arity,
        hyper: Hyperparams,
        p1: Option<PartitionMatrix>,
        p2: Option<PartitionMatrix>,
        basis: BasisSet,
        g2: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if !kind.uses_basis() {
            return Err(invalid("MS-MCAR takes a CAR structure, not a basis"));
        }
        let kind = match (kind, arity) {
            (ModelKind::Oh, Arity::Univariate(_)) => ModelKind::Sre,
            (k, _) => k,
        };
        if kind == ModelKind::Oh && g2.is_some() {
            return Err(invalid("MS-OH uses the first variable's basis for both means"));
        }
        hyper.validate()?;
        let n_fine = basis.g.nrows();
        if let Some(g2) = &g2 {
            if g2.shape() != basis.g.shape() {
                return Err(invalid("second basis must have the same shape as the first"));
            }
        }
        let geometry = KnotGeometry::new(&basis.knots)?;
        if geometry.len() != basis.rank() {
            return Err(invalid(format!(
                "basis rank {} does not match {} knots",
                basis.rank(),
                geometry.len()
            )));
        }
        let g_second = match kind {
            ModelKind::Sre => g2.as_ref().unwrap_or(&basis.g),
            _ => &basis.g,
        };
        let blocks = [
            Self::make_block(p1, arity.is_active(0), n_fine, Some(&basis.g))?,
            Self::make_block(p2, arity.is_active(1), n_fine, Some(g_second))?,
        ];
        Ok(Self {
            kind,
            arity,
            hyper,
            blocks,
            n_fine,
            process: ProcessStructure::Basis { basis, g2, geometry },
            mcar_bandwidth: 0,
        })
    }

    /// Multivariate CAR model on the partition support.
    pub fn with_car(
        arity: Arity,
        hyper: Hyperparams,
        p1: Option<PartitionMatrix>,
        p2: Option<PartitionMatrix>,
        car: CarStructure,
    ) -> Result<Self> {
        hyper.validate()?;
        car.check_rho_support(hyper.b_rho)?;
        let n_fine = car.len();
        let blocks = [
            Self::make_block(p1, arity.is_active(0), n_fine, None)?,
            Self::make_block(p2, arity.is_active(1), n_fine, None)?,
        ];
        let vars = arity.active().len();
        // widest coupling between fine units, from W and from shared coarse units
        let mut span = 0usize;
        for i in 0..n_fine {
            for &j in car.neighbors(i) {
                span = span.max(i.abs_diff(j));
            }
        }
        for b in blocks.iter().flatten() {
            for i in 0..b.len() {
                let row = b.partition.row(i);
                if let (Some(lo), Some(hi)) = (row.iter().map(|e| e.0).min(), row.iter().map(|e| e.0).max()) {
                    span = span.max(hi - lo);
                }
            }
        }
        let mcar_bandwidth = vars * span + vars - 1;
        Ok(Self {
            kind: ModelKind::Mcar,
            arity,
            hyper,
            blocks,
            n_fine,
            process: ProcessStructure::Car(car),
            mcar_bandwidth,
        })
    }

    /// Builds the spatial structure from the partition support: a rank-`r`
    /// Moran basis with `r` farthest-point knots for basis models, or the
    /// support's CAR structure for MS-MCAR.
    pub fn build(
        kind: ModelKind,
        arity: Arity,
        hyper: Hyperparams,
        p1: Option<PartitionMatrix>,
        p2: Option<PartitionMatrix>,
        partition_support: &ArealSupport,
        r: usize,
        knot_seed: u64,
    ) -> Result<Self> {
        if kind.uses_basis() {
            let basis = build_basis(partition_support, r, knot_seed)?;
            Self::with_basis(kind, arity, hyper, p1, p2, basis, None)
        } else {
            Self::with_car(arity, hyper, p1, p2, CarStructure::new(partition_support)?)
        }
    }

    fn make_block(
        p: Option<PartitionMatrix>,
        active: bool,
        n_fine: usize,
        g: Option<&DMatrix<f64>>,
    ) -> Result<Option<ObservationBlock>> {
        match (p, active) {
            (None, true) => Err(invalid("an active variable needs a partition matrix")),
            (_, false) => Ok(None),
            (Some(p), true) => {
                if p.ncols() != n_fine {
                    return Err(invalid(format!(
                        "partition matrix has {} columns but the partition support has {n_fine} units",
                        p.ncols()
                    )));
                }
                let ppt = diag_ppt(&p)?;
                let agg_basis = g.map(|g| p.apply_matrix(g));
                Ok(Some(ObservationBlock { partition: p, ppt, agg_basis }))
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    pub fn block(&self, var: usize) -> Option<&ObservationBlock> {
        self.blocks[var].as_ref()
    }

    pub fn process(&self) -> &ProcessStructure {
        &self.process
    }

    pub fn active_vars(&self) -> Vec<usize> {
        self.arity.active()
    }

    /// Number of latent process variables (MCAR only: 1 or 2).
    pub fn car_vars(&self) -> usize {
        self.active_vars().len()
    }

    pub fn mcar_bandwidth(&self) -> usize {
        self.mcar_bandwidth
    }

    pub fn process_dim(&self) -> usize {
        match &self.process {
            ProcessStructure::Basis { basis, .. } => basis.rank(),
            ProcessStructure::Car(car) => car.len() * self.car_vars(),
        }
    }

    pub fn basis_rank(&self) -> Option<usize> {
        match &self.process {
            ProcessStructure::Basis { basis, .. } => Some(basis.rank()),
            ProcessStructure::Car(_) => None,
        }
    }

    pub fn knot_geometry(&self) -> Option<&KnotGeometry> {
        match &self.process {
            ProcessStructure::Basis { geometry, .. } => Some(geometry),
            ProcessStructure::Car(_) => None,
        }
    }

    pub fn car(&self) -> Option<&CarStructure> {
        match &self.process {
            ProcessStructure::Car(car) => Some(car),
            ProcessStructure::Basis { .. } => None,
        }
    }

    /// Basis matrix on the partition scale used by variable `var`.
    pub fn fine_basis(&self, var: usize) -> Option<&DMatrix<f64>> {
        match &self.process {
            ProcessStructure::Basis { basis, g2, .. } => {
                if var == 1 && self.kind == ModelKind::Sre {
                    Some(g2.as_ref().unwrap_or(&basis.g))
                } else {
                    Some(&basis.g)
                }
            }
            ProcessStructure::Car(_) => None,
        }
    }

    /// Slot of variable `var` inside `psi` (MCAR).
    pub fn car_slot(&self, var: usize) -> usize {
        match self.arity {
            Arity::Bivariate => var,
            Arity::Univariate(_) => 0,
        }
    }

    /// Scalar parameters in sweep order: intercepts, variances, then
    /// bounded parameters.
    pub fn scalar_params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        let active = self.active_vars();
        if self.kind == ModelKind::Oh {
            out.extend([Param::Beta0, Param::Beta1, Param::Beta2]);
        } else {
            for &v in &active {
                out.push(if v == 0 { Param::Beta1 } else { Param::Beta2 });
            }
        }
        for &v in &active {
            out.push(if v == 0 { Param::Sigma2First } else { Param::Sigma2Second });
        }
        match self.kind {
            ModelKind::Sre | ModelKind::Oh => out.extend([Param::Sigma2Eta, Param::Phi]),
            ModelKind::Mcar => {
                out.extend([Param::Nu2, Param::Rho]);
                if active.len() == 2 {
                    out.push(Param::Tau);
                }
            }
        }
        out
    }

    /// Latent contribution to each observation's mean: `(P G eta)_i` or
    /// `(P psi_k)_i`. Inactive variables give empty vectors.
    pub fn latent_at_obs(&self, state: &ChainState) -> [Vec<f64>; 2] {
        let mut out = [Vec::new(), Vec::new()];
        for v in self.active_vars() {
            let block = self.blocks[v].as_ref().expect("active block");
            out[v] = match &self.process {
                ProcessStructure::Basis { .. } => {
                    let h = block.agg_basis.as_ref().expect("basis block");
                    (h * &state.process).iter().copied().collect()
                }
                ProcessStructure::Car(car) => {
                    let n = car.len();
                    let s = self.car_slot(v);
                    block.partition.apply(&state.process.as_slice()[s * n..(s + 1) * n])
                }
            };
        }
        out
    }

    /// Mean of an observation of variable `var` given its latent term.
    #[inline]
    pub fn obs_mean(&self, state: &ChainState, var: usize, latent: f64) -> f64 {
        match (self.kind, var) {
            (ModelKind::Oh, 1) => state.beta0 + state.beta2 * (state.beta1 + latent),
            (_, 0) => state.beta1 + latent,
            _ => state.beta2 + latent,
        }
    }

    /// Mean surface of each active variable on the partition scale.
    pub fn partition_means(&self, state: &ChainState) -> [Vec<f64>; 2] {
        let mut out = [Vec::new(), Vec::new()];
        for v in self.active_vars() {
            let latent: Vec<f64> = match &self.process {
                ProcessStructure::Basis { .. } => {
                    let g = self.fine_basis(v).expect("basis");
                    (g * &state.process).iter().copied().collect()
                }
                ProcessStructure::Car(car) => {
                    let n = car.len();
                    let s = self.car_slot(v);
                    state.process.as_slice()[s * n..(s + 1) * n].to_vec()
                }
            };
            out[v] = latent.iter().map(|&l| self.obs_mean(state, v, l)).collect();
        }
        out
    }

    /// Correlation factor `R(phi)` for basis models.
    pub fn correlation_factor(&self, phi: f64) -> Result<CorrelationFactor> {
        self.knot_geometry()
            .ok_or_else(|| invalid("model has no knot covariance"))?
            .factor(phi)
    }

    /// Checks a dataset's lengths against the observed supports.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        for v in self.active_vars() {
            let expected = self.blocks[v].as_ref().expect("active block").len();
            let got = data.var(v).len();
            if got != expected {
                return Err(invalid(format!(
                    "variable {} has {got} values but its support has {expected} units",
                    v + 1
                )));
            }
        }
        Ok(())
    }

    /// Observations in likelihood order: variable 1 units ascending, then
    /// variable 2. Entries are `(var, unit, value)`.
    pub fn observations(&self, data: &Dataset) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for v in self.active_vars() {
            out.extend(data.observed(v).into_iter().map(|(i, y)| (v, i, y)));
        }
        out
    }

    /// Initial state: intercepts at data means (MS-OH: beta0 = 0, beta2 = 1),
    /// noise variances at half the data variances, zero process, bounded
    /// parameters at neutral interior values.
    pub fn initial_state(&self, data: &Dataset) -> ChainState {
        let stats = |v: usize| {
            let ys: Vec<f64> = data.observed(v).into_iter().map(|(_, y)| y).collect();
            if ys.is_empty() {
                return (0.0, 1.0);
            }
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            if ys.len() < 2 {
                return (m, 1.0);
            }
            let var = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
            (m, (0.5 * var).max(1e-8))
        };
        let (m1, v1) = stats(0);
        let (m2, v2) = stats(1);
        let h = &self.hyper;
        let (beta0, beta2) = if self.kind == ModelKind::Oh { (0.0, 1.0) } else { (0.0, m2) };
        ChainState {
            process: DVector::zeros(self.process_dim()),
            beta0,
            beta1: m1,
            beta2,
            sigma2_1: v1,
            sigma2_2: v2,
            sigma2_eta: 1.0,
            phi: 0.5 * (h.a_phi + h.b_phi),
            rho: 0.5f64.clamp(h.a_rho, h.b_rho),
            tau: 0.0f64.clamp(h.a_tau, h.b_tau),
            nu2: 1.0,
        }
    }
}

/// Moran basis on `support` with `r` knots chosen among its centroids.
pub fn build_basis(support: &ArealSupport, r: usize, knot_seed: u64) -> Result<BasisSet> {
    let g = moran_basis(&support.adjacency(), r)?;
    let knots = select_knots(support.centroids(), r, knot_seed)?;
    Ok(BasisSet { g, knots })
}

fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean).powi(2) / var
}

fn inv_gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

fn uniform_log_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x >= a && x <= b {
        -(b - a).ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Lanczos approximation of `ln Gamma(x)` for `x > 0`.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Gaussian log-density of every observed datum, in
/// [`ModelSpec::observations`] order. Variances are `sigma_k^2 (P_k P_k')_ii`.
pub fn log_likelihood_pointwise(spec: &ModelSpec, state: &ChainState, data: &Dataset) -> Vec<f64> {
    let latent = spec.latent_at_obs(state);
    let mut out = Vec::new();
    for v in spec.active_vars() {
        let block = spec.block(v).expect("active block");
        let s2 = state.sigma2(v);
        for (i, y) in data.observed(v) {
            let mean = spec.obs_mean(state, v, latent[v][i]);
            out.push(normal_log_pdf(y, mean, s2 * block.ppt[i]));
        }
    }
    out
}

/// Log-density of the process prior given the covariance parameters.
pub fn log_process_prior(spec: &ModelSpec, state: &ChainState) -> f64 {
    let d = state.process.len() as f64;
    match spec.process() {
        ProcessStructure::Basis { .. } => {
            let Ok(f) = spec.correlation_factor(state.phi) else {
                return f64::NEG_INFINITY;
            };
            let r = d;
            -0.5 * r * (2.0 * PI).ln()
                - 0.5 * (r * state.sigma2_eta.ln() + f.log_det)
                - 0.5 * f.quad(&state.process) / state.sigma2_eta
        }
        ProcessStructure::Car(car) => {
            let Ok(prec) = mcar_precision_vars(car, state.rho, state.tau, state.nu2, spec.car_vars()) else {
                return f64::NEG_INFINITY;
            };
            -0.5 * d * (2.0 * PI).ln() + 0.5 * prec.log_det() - 0.5 * prec.quadratic_form(state.process.as_slice())
        }
    }
}

/// Joint log-density of the process prior and every parameter prior;
/// `-inf` outside the uniform supports.
pub fn log_prior(spec: &ModelSpec, state: &ChainState) -> f64 {
    let h = spec.hyper();
    let mut lp = 0.0;
    for p in spec.scalar_params() {
        let x = state.get(p);
        lp += match p {
            Param::Beta0 | Param::Beta1 | Param::Beta2 => normal_log_pdf(x, 0.0, h.sigma2_beta),
            Param::Sigma2First | Param::Sigma2Second => inv_gamma_log_pdf(x, h.a_sigma, h.b_sigma),
            Param::Sigma2Eta => inv_gamma_log_pdf(x, h.a_eta, h.b_eta),
            Param::Nu2 => inv_gamma_log_pdf(x, h.a_nu, h.b_nu),
            Param::Phi | Param::Rho | Param::Tau => {
                let (a, b) = h.bounds(p).expect("bounded");
                uniform_log_pdf(x, a, b)
            }
        };
        if lp == f64::NEG_INFINITY {
            return lp;
        }
    }
    lp + log_process_prior(spec, state)
}

/// Prior precision of `psi` in unit-interleaved order (index `unit * vars +
/// slot`), with room for the likelihood terms within the model's bandwidth.
pub fn mcar_prior_banded(spec: &ModelSpec, rho: f64, tau: f64, nu2: f64) -> Result<BandedSpd> {
    let car = spec.car().ok_or_else(|| invalid("not an MCAR model"))?;
    let vars = spec.car_vars();
    let s = sigma_inverse(tau, nu2, vars)?;
    let n = car.len();
    let mut q = BandedSpd::zeros(n * vars, spec.mcar_bandwidth());
    for l in 0..n {
        let d = car.degrees()[l];
        for a in 0..vars {
            for b in 0..=a {
                q.add(l * vars + a, l * vars + b, s[a * vars + b] * d);
            }
        }
        for &m in car.neighbors(l) {
            if m < l {
                for a in 0..vars {
                    for b in 0..vars {
                        q.add(l * vars + a, m * vars + b, -rho * s[a * vars + b]);
                    }
                }
            }
        }
    }
    Ok(q)
}

/// Draws the latent process from its prior at the state's covariance
/// parameters.
pub fn sample_process<R: Rng + ?Sized>(spec: &ModelSpec, state: &ChainState, rng: &mut R) -> Result<DVector<f64>> {
    let d = spec.process_dim();
    let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    match spec.process() {
        ProcessStructure::Basis { .. } => {
            let f = spec.correlation_factor(state.phi)?;
            Ok(f.chol.l() * z * state.sigma2_eta.sqrt())
        }
        ProcessStructure::Car(car) => {
            let vars = spec.car_vars();
            let chol = mcar_prior_banded(spec, state.rho, state.tau, state.nu2)?.cholesky()?;
            let x = chol.solve_upper(z.as_slice());
            let n = car.len();
            Ok(DVector::from_fn(d, |k, _| {
                let (slot, unit) = (k / n, k % n);
                x[unit * vars + slot]
            }))
        }
    }
}

/// Draws every scalar parameter and the process from the prior.
pub fn sample_prior<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ChainState> {
    let h = spec.hyper();
    let mut state = spec.initial_state(&Dataset::default());
    let inv_gamma = |rng: &mut R, a: f64, b: f64| -> f64 {
        let g: f64 = Gamma::new(a, 1.0 / b).expect("valid gamma").sample(rng);
        1.0 / g
    };
    for p in spec.scalar_params() {
        let v = match p {
            Param::Beta0 | Param::Beta1 | Param::Beta2 => {
                Normal::new(0.0, h.sigma2_beta.sqrt()).expect("valid normal").sample(rng)
            }
            Param::Sigma2First | Param::Sigma2Second => inv_gamma(rng, h.a_sigma, h.b_sigma),
            Param::Sigma2Eta => inv_gamma(rng, h.a_eta, h.b_eta),
            Param::Nu2 => inv_gamma(rng, h.a_nu, h.b_nu),
            Param::Phi | Param::Rho | Param::Tau => {
                let (a, b) = h.bounds(p).expect("bounded");
                rng.random_range(a..b)
            }
        };
        state.set(p, v);
    }
    state.process = sample_process(spec, &state, rng)?;
    Ok(state)
}

/// Draws observations from the data model at `state`, keeping the
/// missingness pattern of `template`.
pub fn simulate_observations<R: Rng + ?Sized>(
    spec: &ModelSpec,
    state: &ChainState,
    template: &Dataset,
    rng: &mut R,
) -> Dataset {
    let latent = spec.latent_at_obs(state);
    let mut out = Dataset::default();
    for v in spec.active_vars() {
        let block = spec.block(v).expect("active block");
        let s2 = state.sigma2(v);
        let ys: Vec<Option<f64>> = template
            .var(v)
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    spec.obs_mean(state, v, latent[v][i]) + (s2 * block.ppt[i]).sqrt() * z
                })
            })
            .collect();
        if v == 0 {
            out.y1 = ys;
        } else {
            out.y2 = ys;
        }
    }
    out
}
