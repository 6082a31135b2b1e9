//! Metropolis-within-Gibbs sampler. The process vector, intercepts and
//! variances have conjugate full conditionals and are drawn exactly; the
//! bounded covariance parameters (phi, rho, tau) use Gaussian random-walk
//! Metropolis steps with burn-in adaptation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{mcar_precision_vars, CorrelationFactor};
use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_with_jitter, chol_solve_upper, BandedCholesky, BandedSpd};
use crate::model::{mcar_prior_banded, ChainState, Dataset, ModelKind, ModelSpec, Param};

/// Acceptance rate targeted by the burn-in step-size adaptation.
pub const TARGET_ACCEPTANCE: f64 = 0.44;

/// Initial random-walk scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepSizes {
    pub phi: f64,
    pub rho: f64,
    pub tau: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self { phi: 0.5, rho: 0.05, tau: 0.1 }
    }
}

impl StepSizes {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Phi => self.phi,
            Param::Rho => self.rho,
            Param::Tau => self.tau,
            _ => f64::NAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub mh_step_sizes: StepSizes,
    /// Adapt the random-walk scales during burn-in.
    pub adapt: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { n_iter: 5000, burn_in: 1000, thin: 1, seed: 0, mh_step_sizes: StepSizes::default(), adapt: true }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(invalid("n_iter must be positive"));
        }
        if self.burn_in >= self.n_iter {
            return Err(invalid(format!("burn_in ({}) must be below n_iter ({})", self.burn_in, self.n_iter)));
        }
        if self.thin == 0 {
            return Err(invalid("thin must be positive"));
        }
        let s = self.mh_step_sizes;
        for (name, v) in [("phi", s.phi), ("rho", s.rho), ("tau", s.tau)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("step size for {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Number of draws kept after burn-in and thinning.
    pub fn n_stored(&self) -> usize {
        (self.n_iter - self.burn_in).div_ceil(self.thin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalConditional {
    pub mean: f64,
    pub var: f64,
}

impl NormalConditional {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.var.sqrt() * z
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        -0.5 * (2.0 * std::f64::consts::PI * self.var).ln() - 0.5 * (x - self.mean).powi(2) / self.var
    }
}

/// Inverse-gamma with density proportional to `x^{-shape-1} exp(-rate/x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvGammaConditional {
    pub shape: f64,
    pub rate: f64,
}

impl InvGammaConditional {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g: f64 = Gamma::new(self.shape, 1.0 / self.rate).expect("positive shape and rate").sample(rng);
        1.0 / g
    }
}

enum Factor {
    Dense { precision: DMatrix<f64>, chol: Cholesky<f64, Dyn> },
    /// Unit-interleaved order: index `unit * vars + slot`.
    Banded { precision: BandedSpd, chol: BandedCholesky, vars: usize, n: usize },
}

/// Gaussian full conditional of the process vector in canonical form
/// `N(Q^{-1} b, Q^{-1})`, with `Q` factored.
pub struct ProcessConditional {
    pub mean: DVector<f64>,
    factor: Factor,
}

impl ProcessConditional {
    /// Conditional precision `Q` in process order.
    pub fn precision(&self) -> DMatrix<f64> {
        match &self.factor {
            Factor::Dense { precision, .. } => precision.clone(),
            Factor::Banded { precision, vars, n, .. } => {
                let d = vars * n;
                let pos = |k: usize| (k % n) * vars + k / n;
                DMatrix::from_fn(d, d, |i, j| precision.get(pos(i), pos(j)))
            }
        }
    }

    /// Draw for a given standard-normal vector: `mean + L^{-T} z` with `L`
    /// the lower Cholesky factor of `Q` (in the factor's own ordering).
    pub fn draw_with(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Dense { chol, .. } => &self.mean + chol_solve_upper(chol, z),
            Factor::Banded { chol, vars, n, .. } => {
                let x = chol.solve_upper(z.as_slice());
                let (vars, n) = (*vars, *n);
                DVector::from_fn(vars * n, |k, _| self.mean[k] + x[(k % n) * vars + k / n])
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        self.draw_with(&z)
    }
}

fn dense_spd_factor(q: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(q.clone()) {
        return Ok(c);
    }
    let scale = q.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    cholesky_with_jitter(q, scale).map(|(c, _)| c)
}

struct CorrCache {
    factor: CorrelationFactor,
    inverse: Option<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
struct MhState {
    param: Param,
    log_step: f64,
    accepted: usize,
    proposed: usize,
}

/// Gibbs sweep machinery for one chain: owns the data and caches the
/// correlation factor at the current `phi`.
pub struct Sampler<'a> {
    spec: &'a ModelSpec,
    obs: [Vec<(usize, f64)>; 2],
    /// `sum_i h_i h_i' / (P P')_ii` over observed units, basis models only.
    gram: [Option<DMatrix<f64>>; 2],
    corr: Option<CorrCache>,
    mh: Vec<MhState>,
}

impl<'a> Sampler<'a> {
    pub fn new(spec: &'a ModelSpec, data: &Dataset, steps: StepSizes) -> Result<Self> {
        let mh = spec
            .scalar_params()
            .into_iter()
            .filter(|p| p.is_bounded())
            .map(|param| MhState { param, log_step: steps.get(param).ln(), accepted: 0, proposed: 0 })
            .collect();
        let mut s = Self { spec, obs: [Vec::new(), Vec::new()], gram: [None, None], corr: None, mh };
        s.set_data(data)?;
        Ok(s)
    }

    /// Replaces the data (same supports, any missingness pattern).
    pub fn set_data(&mut self, data: &Dataset) -> Result<()> {
        self.spec.check_dataset(data)?;
        for v in self.spec.active_vars() {
            self.obs[v] = data.observed(v);
            let block = self.spec.block(v).expect("active block");
            if let Some(h) = &block.agg_basis {
                let r = h.ncols();
                let mut g = DMatrix::zeros(r, r);
                for &(i, _) in &self.obs[v] {
                    let row = h.row(i);
                    g += row.transpose() * row / block.ppt[i];
                }
                self.gram[v] = Some(g);
            }
        }
        Ok(())
    }

    fn corr_factor(&mut self, phi: f64) -> Result<&CorrelationFactor> {
        if self.corr.as_ref().is_none_or(|c| c.factor.phi != phi) {
            let factor = self.spec.correlation_factor(phi)?;
            self.corr = Some(CorrCache { factor, inverse: None });
        }
        Ok(&self.corr.as_ref().expect("just set").factor)
    }

    fn corr_inverse(&mut self, phi: f64) -> Result<&DMatrix<f64>> {
        self.corr_factor(phi)?;
        let cache = self.corr.as_mut().expect("just set");
        if cache.inverse.is_none() {
            cache.inverse = Some(cache.factor.inverse());
        }
        Ok(cache.inverse.as_ref().expect("just set"))
    }

    /// `(scale, offset)` of variable `v`'s mean as an affine function of its
    /// latent term.
    fn affine(&self, state: &ChainState, v: usize) -> (f64, f64) {
        match (self.spec.kind(), v) {
            (ModelKind::Oh, 1) => (state.beta2, state.beta0 + state.beta2 * state.beta1),
            (_, 0) => (1.0, state.beta1),
            _ => (1.0, state.beta2),
        }
    }

    pub fn process_conditional(&mut self, state: &ChainState) -> Result<ProcessConditional> {
        if self.spec.kind().uses_basis() {
            self.basis_conditional(state)
        } else {
            self.car_conditional(state)
        }
    }

    fn basis_conditional(&mut self, state: &ChainState) -> Result<ProcessConditional> {
        let spec = self.spec;
        let mut q = self.corr_inverse(state.phi)? / state.sigma2_eta;
        let r = q.nrows();
        let mut b = DVector::zeros(r);
        for v in spec.active_vars() {
            let block = spec.block(v).expect("active block");
            let h = block.agg_basis.as_ref().expect("basis block");
            let (s, c) = self.affine(state, v);
            let s2 = state.sigma2(v);
            q += self.gram[v].as_ref().expect("gram") * (s * s / s2);
            for &(i, y) in &self.obs[v] {
                let w = s * (y - c) / (s2 * block.ppt[i]);
                for k in 0..r {
                    b[k] += w * h[(i, k)];
                }
            }
        }
        let chol = dense_spd_factor(&q)?;
        let mean = chol.solve(&b);
        Ok(ProcessConditional { mean, factor: Factor::Dense { precision: q, chol } })
    }

    fn car_conditional(&mut self, state: &ChainState) -> Result<ProcessConditional> {
        let spec = self.spec;
        let car = spec.car().expect("car model");
        let n = car.len();
        let vars = spec.car_vars();
        let mut q = mcar_prior_banded(spec, state.rho, state.tau, state.nu2)?;
        let mut b = vec![0.0; n * vars];
        for v in spec.active_vars() {
            let block = spec.block(v).expect("active block");
            let slot = spec.car_slot(v);
            let (_, c) = self.affine(state, v);
            let s2 = state.sigma2(v);
            for &(i, y) in &self.obs[v] {
                let inv = 1.0 / (s2 * block.ppt[i]);
                let row = block.partition.row(i);
                for (a, &(la, wa)) in row.iter().enumerate() {
                    b[la * vars + slot] += wa * (y - c) * inv;
                    for &(lb, wb) in &row[..=a] {
                        q.add(la * vars + slot, lb * vars + slot, wa * wb * inv);
                    }
                }
            }
        }
        let chol = q.clone().cholesky()?;
        let m = chol.solve(&b);
        let mean = DVector::from_fn(n * vars, |k, _| m[(k % n) * vars + k / n]);
        Ok(ProcessConditional { mean, factor: Factor::Banded { precision: q, chol, vars, n } })
    }

    pub fn beta_conditional(&self, state: &ChainState, p: Param) -> Result<NormalConditional> {
        let spec = self.spec;
        if !p.is_beta() || !spec.scalar_params().contains(&p) {
            return Err(invalid(format!("{} is not an intercept of this model", p.name())));
        }
        let latent = spec.latent_at_obs(state);
        let mut prec = 1.0 / spec.hyper().sigma2_beta;
        let mut lin = 0.0;
        let mut add = |v: usize, term: &dyn Fn(f64) -> (f64, f64)| {
            let block = spec.block(v).expect("active block");
            let s2 = state.sigma2(v);
            for &(i, y) in &self.obs[v] {
                let (s, c) = term(latent[v][i]);
                let var = s2 * block.ppt[i];
                prec += s * s / var;
                lin += s * (y - c) / var;
            }
        };
        match (spec.kind(), p) {
            (ModelKind::Oh, Param::Beta0) => add(1, &|l| (1.0, state.beta2 * (state.beta1 + l))),
            (ModelKind::Oh, Param::Beta1) => {
                add(0, &|l| (1.0, l));
                add(1, &|l| (state.beta2, state.beta0 + state.beta2 * l));
            }
            (ModelKind::Oh, Param::Beta2) => add(1, &|l| (state.beta1 + l, state.beta0)),
            (_, Param::Beta1) => add(0, &|l| (1.0, l)),
            (_, Param::Beta2) => add(1, &|l| (1.0, l)),
            _ => unreachable!("checked above"),
        }
        Ok(NormalConditional { mean: lin / prec, var: 1.0 / prec })
    }

    pub fn sigma2_conditional(&mut self, state: &ChainState, p: Param) -> Result<InvGammaConditional> {
        let spec = self.spec;
        if !p.is_variance() || !spec.scalar_params().contains(&p) {
            return Err(invalid(format!("{} is not a variance of this model", p.name())));
        }
        let h = *spec.hyper();
        Ok(match p {
            Param::Sigma2First | Param::Sigma2Second => {
                let v = if p == Param::Sigma2First { 0 } else { 1 };
                let block = spec.block(v).expect("active block");
                let latent = spec.latent_at_obs(state);
                let ss: f64 = self.obs[v]
                    .iter()
                    .map(|&(i, y)| (y - spec.obs_mean(state, v, latent[v][i])).powi(2) / block.ppt[i])
                    .sum();
                InvGammaConditional {
                    shape: h.a_sigma + self.obs[v].len() as f64 / 2.0,
                    rate: h.b_sigma + 0.5 * ss,
                }
            }
            Param::Sigma2Eta => {
                let quad = self.corr_factor(state.phi)?.quad(&state.process);
                InvGammaConditional {
                    shape: h.a_eta + state.process.len() as f64 / 2.0,
                    rate: h.b_eta + 0.5 * quad,
                }
            }
            Param::Nu2 => {
                let car = spec.car().expect("car model");
                let prec = mcar_precision_vars(car, state.rho, state.tau, 1.0, spec.car_vars())?;
                InvGammaConditional {
                    shape: h.a_nu + state.process.len() as f64 / 2.0,
                    rate: h.b_nu + 0.5 * prec.quadratic_form(state.process.as_slice()),
                }
            }
            _ => unreachable!("checked above"),
        })
    }

    /// Log of the bounded parameter's full conditional (up to a constant) at
    /// `value`; `None` outside the prior support or when the covariance
    /// cannot be factored.
    pub fn bounded_log_target(&mut self, state: &ChainState, p: Param, value: f64) -> Option<f64> {
        let (a, b) = self.spec.hyper().bounds(p)?;
        if !(value >= a && value <= b) {
            return None;
        }
        let res = match p {
            Param::Phi => self.corr_factor_uncached(value).map(|f| {
                -0.5 * f.log_det - 0.5 * f.quad(&state.process) / state.sigma2_eta
            }),
            Param::Rho | Param::Tau => {
                let car = self.spec.car().expect("car model");
                let (rho, tau) = if p == Param::Rho { (value, state.tau) } else { (state.rho, value) };
                mcar_precision_vars(car, rho, tau, state.nu2, self.spec.car_vars())
                    .map(|q| 0.5 * q.log_det() - 0.5 * q.quadratic_form(state.process.as_slice()))
            }
            _ => return None,
        };
        match res {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("{} = {value}: {e}; proposal rejected", p.name());
                None
            }
        }
    }

    fn corr_factor_uncached(&self, phi: f64) -> Result<CorrelationFactor> {
        match &self.corr {
            Some(c) if c.factor.phi == phi => Ok(c.factor.clone()),
            _ => self.spec.correlation_factor(phi),
        }
    }

    /// One random-walk Metropolis update of a bounded parameter with scale
    /// `step`. Returns the new value and whether the proposal was accepted.
    pub fn mh_update<R: Rng + ?Sized>(&mut self, state: &mut ChainState, p: Param, step: f64, rng: &mut R) -> (f64, bool) {
        let current = state.get(p);
        let z: f64 = rng.sample(StandardNormal);
        let proposal = current + step * z;
        let u: f64 = rng.random();
        let Some(lt_prop) = self.bounded_log_target(state, p, proposal) else {
            return (current, false);
        };
        let lt_cur = self.bounded_log_target(state, p, current).unwrap_or(f64::NEG_INFINITY);
        if u.ln() < lt_prop - lt_cur || lt_cur == f64::NEG_INFINITY {
            state.set(p, proposal);
            (proposal, true)
        } else {
            (current, false)
        }
    }

    /// One full sweep: process, intercepts, variances, bounded parameters.
    /// `adapt_iter` is the iteration index when the random-walk scales may
    /// adapt.
    pub fn sweep<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R, adapt_iter: Option<usize>) -> Result<()> {
        let cond = self.process_conditional(state)?;
        state.process = cond.sample(rng);
        for p in self.spec.scalar_params() {
            if p.is_beta() {
                let c = self.beta_conditional(state, p)?;
                state.set(p, c.sample(rng));
            } else if p.is_variance() {
                let c = self.sigma2_conditional(state, p)?;
                state.set(p, c.sample(rng));
            } else {
                let k = self.mh.iter().position(|m| m.param == p).expect("bounded parameter");
                let step = self.mh[k].log_step.exp();
                let (_, accepted) = self.mh_update(state, p, step, rng);
                let m = &mut self.mh[k];
                m.proposed += 1;
                m.accepted += accepted as usize;
                if let Some(t) = adapt_iter {
                    let gamma = ((t + 1) as f64).powf(-0.6);
                    let acc = if accepted { 1.0 } else { 0.0 };
                    m.log_step = (m.log_step + gamma * (acc - TARGET_ACCEPTANCE)).clamp(-20.0, 5.0);
                }
            }
        }
        Ok(())
    }

    fn reset_counts(&mut self) {
        for m in &mut self.mh {
            m.accepted = 0;
            m.proposed = 0;
        }
    }

    pub fn acceptance_rates(&self) -> Vec<(Param, f64)> {
        self.mh
            .iter()
            .map(|m| (m.param, if m.proposed == 0 { 0.0 } else { m.accepted as f64 / m.proposed as f64 }))
            .collect()
    }

    pub fn step_sizes(&self) -> Vec<(Param, f64)> {
        self.mh.iter().map(|m| (m.param, m.log_step.exp())).collect()
    }
}

/// Full conditional of the process vector for any model kind.
pub fn process_conditional(spec: &ModelSpec, state: &ChainState, data: &Dataset) -> Result<ProcessConditional> {
    Sampler::new(spec, data, StepSizes::default())?.process_conditional(state)
}

fn update_process_checked<R: Rng + ?Sized>(
    kind: ModelKind,
    spec: &ModelSpec,
    state: &ChainState,
    data: &Dataset,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if spec.kind() != kind {
        return Err(invalid(format!("expected a {kind} model, got {}", spec.kind())));
    }
    Ok(process_conditional(spec, state, data)?.sample(rng))
}

pub fn update_eta_sre<R: Rng + ?Sized>(spec: &ModelSpec, state: &ChainState, data: &Dataset, rng: &mut R) -> Result<DVector<f64>> {
    update_process_checked(ModelKind::Sre, spec, state, data, rng)
}

pub fn update_eta_oh<R: Rng + ?Sized>(spec: &ModelSpec, state: &ChainState, data: &Dataset, rng: &mut R) -> Result<DVector<f64>> {
    update_process_checked(ModelKind::Oh, spec, state, data, rng)
}

pub fn update_psi_mcar<R: Rng + ?Sized>(spec: &ModelSpec, state: &ChainState, data: &Dataset, rng: &mut R) -> Result<DVector<f64>> {
    update_process_checked(ModelKind::Mcar, spec, state, data, rng)
}

pub fn beta_conditional(spec: &ModelSpec, state: &ChainState, data: &Dataset, p: Param) -> Result<NormalConditional> {
    Sampler::new(spec, data, StepSizes::default())?.beta_conditional(state, p)
}

pub fn update_beta<R: Rng + ?Sized>(spec: &ModelSpec, state: &ChainState, data: &Dataset, p: Param, rng: &mut R) -> Result<f64> {
    Ok(beta_conditional(spec, state, data, p)?.sample(rng))
}

pub fn sigma2_conditional(spec: &ModelSpec, state: &ChainState, data: &Dataset, p: Param) -> Result<InvGammaConditional> {
    Sampler::new(spec, data, StepSizes::default())?.sigma2_conditional(state, p)
}

pub fn update_sigma2<R: Rng + ?Sized>(spec: &ModelSpec, state: &ChainState, data: &Dataset, p: Param, rng: &mut R) -> Result<f64> {
    Ok(sigma2_conditional(spec, state, data, p)?.sample(rng))
}

/// Random-walk Metropolis update of `phi`, `rho` or `tau`. Data do not enter
/// these conditionals.
pub fn mh_update_bounded<R: Rng + ?Sized>(
    spec: &ModelSpec,
    state: &ChainState,
    p: Param,
    step: f64,
    rng: &mut R,
) -> Result<(f64, bool)> {
    if !p.is_bounded() || !spec.scalar_params().contains(&p) {
        return Err(invalid(format!("{} is not a bounded parameter of this model", p.name())));
    }
    let empty = Dataset {
        y1: spec.block(0).map(|b| vec![None; b.len()]).unwrap_or_default(),
        y2: spec.block(1).map(|b| vec![None; b.len()]).unwrap_or_default(),
    };
    let mut sampler = Sampler::new(spec, &empty, StepSizes::default())?;
    let mut s = state.clone();
    Ok(sampler.mh_update(&mut s, p, step, rng))
}

/// Metropolis acceptance probability for a symmetric proposal.
pub fn mh_acceptance_probability(log_current: f64, log_proposal: f64) -> f64 {
    if log_proposal >= log_current {
        1.0
    } else {
        (log_proposal - log_current).exp()
    }
}

/// Stored output of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub kind: ModelKind,
    pub params: Vec<Param>,
    /// One column per entry of `params`.
    pub scalars: Vec<Vec<f64>>,
    pub process: Vec<Vec<f64>>,
    pub acceptance: Vec<(Param, f64)>,
    pub final_steps: Vec<(Param, f64)>,
    pub seed: u64,
    pub chain: usize,
    pub config: McmcConfig,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.process.len()
    }

    pub fn is_empty(&self) -> bool {
        self.process.is_empty()
    }

    pub fn column(&self, p: Param) -> Option<&[f64]> {
        self.params.iter().position(|&q| q == p).map(|k| self.scalars[k].as_slice())
    }

    /// Draw `s` as a full state (unused fields at their neutral values).
    pub fn state(&self, spec: &ModelSpec, s: usize) -> ChainState {
        let mut st = spec.initial_state(&Dataset::default());
        st.process = DVector::from_column_slice(&self.process[s]);
        for (k, &p) in self.params.iter().enumerate() {
            st.set(p, self.scalars[k][s]);
        }
        st
    }

    pub fn acceptance_rate(&self, p: Param) -> Option<f64> {
        self.acceptance.iter().find(|(q, _)| *q == p).map(|(_, r)| *r)
    }
}

fn state_summary(state: &ChainState, params: &[Param]) -> String {
    let mut parts: Vec<String> = params.iter().map(|p| format!("{}={:.6e}", p.name(), state.get(*p))).collect();
    parts.push(format!("|process|={:.6e}", state.process.norm()));
    parts.join(", ")
}

/// Runs chain 0 (RNG seeded with `config.seed`).
pub fn run_chain(spec: &ModelSpec, data: &Dataset, config: &McmcConfig) -> Result<PosteriorDraws> {
    run_chain_indexed(spec, data, config, 0)
}

/// Runs one chain whose RNG is seeded with `config.seed + chain`.
pub fn run_chain_indexed(spec: &ModelSpec, data: &Dataset, config: &McmcConfig, chain: usize) -> Result<PosteriorDraws> {
    config.validate()?;
    let seed = config.seed.wrapping_add(chain as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = Sampler::new(spec, data, config.mh_step_sizes)?;
    let mut state = spec.initial_state(data);
    let params = spec.scalar_params();
    let n_keep = config.n_stored();
    let mut scalars = vec![Vec::with_capacity(n_keep); params.len()];
    let mut process = Vec::with_capacity(n_keep);
    for t in 0..config.n_iter {
        if t == config.burn_in {
            sampler.reset_counts();
        }
        let adapt = (config.adapt && t < config.burn_in).then_some(t);
        if let Err(e) = sampler.sweep(&mut state, &mut rng, adapt) {
            return Err(Error::ChainFailure {
                iteration: t,
                state: state_summary(&state, &params),
                source: Box::new(e),
            });
        }
        if t >= config.burn_in && (t - config.burn_in).is_multiple_of(config.thin) {
            for (k, &p) in params.iter().enumerate() {
                scalars[k].push(state.get(p));
            }
            process.push(state.process.as_slice().to_vec());
        }
    }
    Ok(PosteriorDraws {
        kind: spec.kind(),
        params,
        scalars,
        process,
        acceptance: sampler.acceptance_rates(),
        final_steps: sampler.step_sizes(),
        seed,
        chain,
        config: config.clone(),
    })
}

/// Runs `n_chains` independent chains, in parallel when the `parallel`
/// feature is on. Results are ordered by chain index.
pub fn run_chains(spec: &ModelSpec, data: &Dataset, config: &McmcConfig, n_chains: usize) -> Result<Vec<PosteriorDraws>> {
    if n_chains == 0 {
        return Err(invalid("need at least one chain"));
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n_chains).into_par_iter().map(|c| run_chain_indexed(spec, data, config, c)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_chains).map(|c| run_chain_indexed(spec, data, config, c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arity, Hyperparams, Variable};
    use crate::supports::{build_grid_support, PartitionMatrix, Rect};

    fn toy(kind: ModelKind, arity: Arity) -> ModelSpec {
        let fine = build_grid_support(2, 2, Rect::UNIT).unwrap();
        let cols = PartitionMatrix::from_rows(
            vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 0.5), (3, 0.5)]],
            vec!["c0".into(), "c1".into()],
            fine.ids().to_vec(),
        )
        .unwrap();
        let rows = PartitionMatrix::from_rows(
            vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 0.5), (3, 0.5)]],
            vec!["r0".into(), "r1".into()],
            fine.ids().to_vec(),
        )
        .unwrap();
        ModelSpec::build(kind, arity, Hyperparams::default(), Some(cols), Some(rows), &fine, 2, 0).unwrap()
    }

    fn state(spec: &ModelSpec) -> ChainState {
        let mut s = spec.initial_state(&Dataset::default());
        s.beta0 = 0.2;
        s.beta1 = 1.5;
        s.beta2 = 0.8;
        s.sigma2_1 = 0.3;
        s.sigma2_2 = 0.6;
        s.sigma2_eta = 1.2;
        s.phi = 0.7;
        s.rho = 0.5;
        s.tau = 0.3;
        s.nu2 = 0.9;
        s.process = DVector::from_fn(spec.process_dim(), |k, _| 0.3 * (k as f64) - 0.4);
        s
    }

    fn empty(spec: &ModelSpec) -> Dataset {
        Dataset { y1: vec![None; spec.block(0).map_or(0, |b| b.len())], y2: vec![None; spec.block(1).map_or(0, |b| b.len())] }
    }

    #[test]
    fn stored_draw_count() {
        let c = McmcConfig { n_iter: 5000, burn_in: 1000, ..Default::default() };
        assert_eq!(c.n_stored(), 4000);
        let c = McmcConfig { n_iter: 10, burn_in: 3, thin: 3, ..Default::default() };
        assert_eq!(c.n_stored(), 3);
        assert!(McmcConfig { burn_in: 5000, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn no_data_gives_prior_conditionals() {
        let spec = toy(ModelKind::Sre, Arity::Bivariate);
        let st = state(&spec);
        let d = empty(&spec);
        let c = beta_conditional(&spec, &st, &d, Param::Beta1).unwrap();
        assert_eq!(c.mean, 0.0);
        assert!((c.var - 1e6).abs() < 1e-6);
        let pc = process_conditional(&spec, &st, &d).unwrap();
        assert!(pc.mean.iter().all(|m| m.abs() < 1e-12));
        // K carries the factorization jitter
        let kinv = spec.correlation_factor(st.phi).unwrap().inverse() / st.sigma2_eta;
        assert!((pc.precision() - kinv).abs().max() < 1e-8);
    }

    #[test]
    fn sigma_shape_counts_observations() {
        let spec = toy(ModelKind::Sre, Arity::Bivariate);
        let st = state(&spec);
        let d = Dataset::new(vec![Some(1.0), Some(2.0)], vec![None, Some(0.1)]);
        let c = sigma2_conditional(&spec, &st, &d, Param::Sigma2First).unwrap();
        assert_eq!(c.shape, 2.0);
        let c = sigma2_conditional(&spec, &st, &d, Param::Sigma2Second).unwrap();
        assert_eq!(c.shape, 1.5);
        let c = sigma2_conditional(&spec, &st, &d, Param::Sigma2Eta).unwrap();
        assert_eq!(c.shape, 2.0);
    }

    #[test]
    fn zero_residuals_leave_prior_rate() {
        let spec = toy(ModelKind::Sre, Arity::Bivariate);
        let st = state(&spec);
        let means = spec.partition_means(&st);
        let y1 = spec.block(0).unwrap().partition.apply(&means[0]);
        let d = Dataset::new(y1.into_iter().map(Some).collect(), vec![None, None]);
        let c = sigma2_conditional(&spec, &st, &d, Param::Sigma2First).unwrap();
        assert!((c.rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nu2_shape_uses_both_variables() {
        let spec = toy(ModelKind::Mcar, Arity::Bivariate);
        let st = state(&spec);
        let c = sigma2_conditional(&spec, &st, &empty(&spec), Param::Nu2).unwrap();
        assert_eq!(c.shape, 1.0 + 4.0);
    }

    #[test]
    fn wrong_targets_rejected() {
        let spec = toy(ModelKind::Sre, Arity::Bivariate);
        let st = state(&spec);
        let d = empty(&spec);
        assert!(beta_conditional(&spec, &st, &d, Param::Beta0).is_err());
        assert!(sigma2_conditional(&spec, &st, &d, Param::Nu2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mh_update_bounded(&spec, &st, Param::Rho, 0.1, &mut rng).is_err());
        assert!(update_psi_mcar(&spec, &st, &d, &mut rng).is_err());
    }

    #[test]
    fn out_of_bounds_proposal_rejected() {
        let spec = toy(ModelKind::Sre, Arity::Bivariate);
        let mut st = state(&spec);
        st.phi = 9.9999;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // huge step: proposals almost surely leave [0, 10]
        let mut rejected = 0;
        for _ in 0..50 {
            let (v, acc) = mh_update_bounded(&spec, &st, Param::Phi, 1e6, &mut rng).unwrap();
            if !acc {
                assert_eq!(v, st.phi);
                rejected += 1;
            }
        }
        assert!(rejected >= 49);
    }

    #[test]
    fn zero_step_proposal_always_accepted() {
        let spec = toy(ModelKind::Mcar, Arity::Bivariate);
        let st = state(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in [Param::Rho, Param::Tau] {
            for _ in 0..100 {
                let (v, acc) = mh_update_bounded(&spec, &st, p, 1e-300, &mut rng).unwrap();
                assert!(acc);
                assert!((v - st.get(p)).abs() < 1e-250);
            }
        }
    }

    #[test]
    fn detailed_balance_on_three_point_target() {
        let pi: [f64; 3] = [0.2, 0.5, 0.3];
        let q = 0.5; // propose each of the other two points with probability 1/2
        let mut t = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    t[i][j] = q * mh_acceptance_probability(pi[i].ln(), pi[j].ln());
                }
            }
            t[i][i] = 1.0 - (0..3).filter(|&j| j != i).map(|j| t[i][j]).sum::<f64>();
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((pi[i] * t[i][j] - pi[j] * t[j][i]).abs() < 1e-15);
            }
            let stat: f64 = (0..3).map(|k| pi[k] * t[k][i]).sum();
            assert!((stat - pi[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn draw_follows_sampling_contract() {
        let spec = toy(ModelKind::Sre, Arity::Bivariate);
        let st = state(&spec);
        let d = Dataset::new(vec![Some(1.0), Some(2.0)], vec![Some(0.3), Some(0.9)]);
        let pc = process_conditional(&spec, &st, &d).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = a.clone();
        let draw = pc.sample(&mut a);
        let z = DVector::from_iterator(2, (0..2).map(|_| b.sample::<f64, _>(StandardNormal)));
        let l = pc.precision().cholesky().unwrap().l();
        let expected = &pc.mean + l.transpose().solve_upper_triangular(&z).unwrap();
        assert!((draw - expected).abs().max() < 1e-12);
    }

    #[test]
    fn oh_with_zero_slope_ignores_second_variable() {
        let oh = toy(ModelKind::Oh, Arity::Bivariate);
        let uni = toy(ModelKind::Sre, Arity::Univariate(Variable::First));
        let mut st = state(&oh);
        st.beta2 = 0.0;
        let d = Dataset::new(vec![Some(1.0), Some(2.0)], vec![Some(0.3), Some(0.9)]);
        let a = process_conditional(&oh, &st, &d).unwrap();
        let b = process_conditional(&uni, &st, &d).unwrap();
        assert!((&a.mean - &b.mean).abs().max() < 1e-12);
        assert!((a.precision() - b.precision()).abs().max() < 1e-12);
    }

    #[test]
    fn oh_reduces_to_sre_with_unit_slope() {
        let oh = toy(ModelKind::Oh, Arity::Bivariate);
        let sre = toy(ModelKind::Sre, Arity::Bivariate);
        let mut st = state(&oh);
        st.beta0 = 0.0;
        st.beta2 = 1.0;
        let mut st_sre = st.clone();
        st_sre.beta2 = st.beta1;
        let d = Dataset::new(vec![Some(1.0), Some(2.0)], vec![Some(0.3), Some(0.9)]);
        let a = process_conditional(&oh, &st, &d).unwrap();
        let b = process_conditional(&sre, &st_sre, &d).unwrap();
        assert!((&a.mean - &b.mean).abs().max() < 1e-12);
    }

    #[test]
    fn same_seed_same_draws() {
        for kind in ModelKind::ALL {
            let spec = toy(kind, Arity::Bivariate);
            let d = Dataset::new(vec![Some(1.0), Some(2.0)], vec![Some(0.3), None]);
            let cfg = McmcConfig { n_iter: 60, burn_in: 20, seed: 9, ..Default::default() };
            let a = run_chain(&spec, &d, &cfg).unwrap();
            let b = run_chain(&spec, &d, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 40);
            let c = run_chain_indexed(&spec, &d, &cfg, 1).unwrap();
            assert_ne!(a.process, c.process);
        }
    }

    #[test]
    fn stored_draws_respect_supports() {
        let spec = toy(ModelKind::Mcar, Arity::Bivariate);
        let d = Dataset::new(vec![Some(1.0), Some(2.0)], vec![Some(0.3), Some(-0.2)]);
        let cfg = McmcConfig { n_iter: 300, burn_in: 100, seed: 2, ..Default::default() };
        let draws = run_chain(&spec, &d, &cfg).unwrap();
        for (k, p) in draws.params.iter().enumerate() {
            for &v in &draws.scalars[k] {
                if p.is_variance() {
                    assert!(v > 0.0);
                }
                if let Some((a, b)) = spec.hyper().bounds(*p) {
                    assert!(v >= a && v <= b);
                }
            }
        }
        assert_eq!(draws.acceptance.len(), 2);
    }
}
