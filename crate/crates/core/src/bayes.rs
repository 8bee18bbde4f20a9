//! Fixed-K Gibbs sampling with Metropolis-Hastings moves for θ and η = 1/φ.
//!
//! One sweep draws the allocations from the current parameters, then the
//! weights from their Dirichlet conditional, then each η_j by a Gamma(s, s/η)
//! proposal centred at its current value, then each θ_j by a Gaussian random walk.
//!
//! For kernels with a dispersion, the shape must use a per-component constant
//! dispersion (`identity_constant` link on θ₂, so θ₂ = (φ_j)) or a fixed φ,
//! in which case η is not sampled.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::links::{Link, LinkEvaluator};
use crate::measures::{self, Atom, MixingMeasure};
use crate::model::{Dataset, Dispersion, ModelShape};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Dirichlet concentrations; all ones when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Covariance Σ of the zero-mean Gaussian prior on θ; identity when absent.
    #[serde(default)]
    pub theta_cov: Option<Vec<Vec<f64>>>,
    /// Gamma(shape, rate) prior on η.
    #[serde(default = "hundredth")]
    pub eta_shape: f64,
    #[serde(default = "hundredth")]
    pub eta_rate: f64,
}

fn hundredth() -> f64 {
    0.01
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            weights: None,
            theta_cov: None,
            eta_shape: 0.01,
            eta_rate: 0.01,
        }
    }
}

impl PriorSpec {
    pub fn concentrations(&self, k: usize) -> Result<Vec<f64>> {
        let alpha = self.weights.clone().unwrap_or_else(|| vec![1.0; k]);
        if alpha.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{} Dirichlet concentrations for K = {k}",
                alpha.len()
            )));
        }
        if alpha.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::InvalidParameter("Dirichlet concentrations must be > 0".into()));
        }
        Ok(alpha)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta_shape > 0.0 && self.eta_rate > 0.0) {
            return Err(Error::InvalidParameter("eta prior shape and rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCMCConfig {
    pub iterations: usize,
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thin: usize,
    /// Random-walk covariance Σ' for θ; 0.01·I when absent.
    #[serde(default)]
    pub proposal_cov: Option<Vec<Vec<f64>>>,
    #[serde(default = "two")]
    pub eta_proposal_shape: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn two() -> f64 {
    2.0
}

impl MCMCConfig {
    pub fn new(iterations: usize, burn_in: usize, seed: u64) -> Self {
        MCMCConfig {
            iterations,
            burn_in,
            thin: 1,
            proposal_cov: None,
            eta_proposal_shape: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidParameter(format!(
                "burn_in = {} must be below iterations = {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be >= 1".into()));
        }
        if !(self.eta_proposal_shape > 0.0) {
            return Err(Error::InvalidParameter("eta proposal shape must be > 0".into()));
        }
        Ok(())
    }
}

/// Current values of every sampled quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub weights: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    /// η_j = 1/φ_j; empty when the dispersion is not sampled.
    pub eta: Vec<f64>,
    pub z: Vec<usize>,
}

impl State {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.k()];
        for &j in &self.z {
            n[j] += 1;
        }
        n
    }
}

/// One retained state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSample {
    pub iteration: usize,
    pub weights: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
    pub phi: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Coordinate in which a sampled dispersion enters posterior summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispersionScale {
    /// φ itself, as in the model's mixing measure.
    Phi,
    /// η = 1/φ, the sampler's parameter; bounded as a component nears the φ → ∞ limit.
    #[default]
    Eta,
}

impl DispersionScale {
    fn apply(self, phi: f64) -> f64 {
        match self {
            DispersionScale::Phi => phi,
            DispersionScale::Eta => 1.0 / phi,
        }
    }

    /// `g` with θ₂ = (φ) mapped to this scale.
    pub fn map_measure(self, g: &MixingMeasure) -> Result<MixingMeasure> {
        let atoms = g
            .atoms()
            .iter()
            .map(|a| Atom::new(a.theta1.clone(), a.theta2.iter().map(|&p| self.apply(p)).collect(), a.weight))
            .collect();
        MixingMeasure::normalized(atoms, None)
    }
}

impl ChainSample {
    /// Σ p_j δ_(θ_j, φ_j), with φ omitted when it was not sampled.
    pub fn measure(&self) -> Result<MixingMeasure> {
        self.measure_in(DispersionScale::Phi)
    }

    /// As [`Self::measure`] with the dispersion coordinate on the given scale.
    pub fn measure_in(&self, scale: DispersionScale) -> Result<MixingMeasure> {
        let atoms = (0..self.weights.len())
            .map(|j| {
                let t2 = self.phi.get(j).map(|p| vec![scale.apply(*p)]).unwrap_or_default();
                Atom::new(self.theta[j].clone(), t2, self.weights[j])
            })
            .collect();
        MixingMeasure::normalized(atoms, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Acceptance {
    pub proposed: u64,
    pub accepted: u64,
}

impl Acceptance {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn record(&mut self, ok: bool) {
        self.proposed += 1;
        self.accepted += u64::from(ok);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub k: usize,
    pub samples: Vec<ChainSample>,
    pub theta_acceptance: Acceptance,
    pub eta_acceptance: Acceptance,
    /// Raw θ summaries are subject to label switching; W1-based ones are not.
    pub label_switching_warning: bool,
}

impl Chain {
    /// JSON Lines: a header record, then one record per kept sample.
    pub fn write_jsonl<W: Write>(&self, mut w: W, meta: &serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "record": "meta",
            "meta": meta,
            "k": self.k,
            "kept": self.samples.len(),
            "theta_acceptance": self.theta_acceptance,
            "eta_acceptance": self.eta_acceptance,
            "theta_acceptance_rate": finite_or_null(self.theta_acceptance.rate()),
            "eta_acceptance_rate": finite_or_null(self.eta_acceptance.rate()),
            "label_switching_warning": self.label_switching_warning,
        });
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Data, links and priors fixed for the duration of a chain.
pub struct Sampler<'a> {
    shape: &'a ModelShape,
    data: &'a Dataset,
    h1: LinkEvaluator<'a>,
    samples_eta: bool,
    fixed_phi: f64,
    alpha: Vec<f64>,
    prior_prec: DMatrix<f64>,
    prior: PriorSpec,
    proposal: Cholesky<f64, Dyn>,
    eta_shape: f64,
}

impl<'a> Sampler<'a> {
    pub fn new(shape: &'a ModelShape, data: &'a Dataset, k: usize, prior: &PriorSpec, config: &MCMCConfig) -> Result<Self> {
        shape.validate()?;
        prior.validate()?;
        config.validate()?;
        if k == 0 {
            return Err(Error::InvalidParameter("K must be >= 1".into()));
        }
        data.check_support(&shape.kernel)?;
        if !data.is_empty() && data.covariate_dim() < shape.covariate_dim() {
            return Err(Error::DimensionMismatch(format!(
                "data has {} covariates, model needs {}",
                data.covariate_dim(),
                shape.covariate_dim()
            )));
        }
        let (samples_eta, fixed_phi) = match &shape.dispersion {
            Dispersion::None => (false, 0.0),
            Dispersion::Fixed { phi } => (false, *phi),
            Dispersion::Link { link: Link::IdentityConstant } => (true, f64::NAN),
            Dispersion::Link { .. } => {
                return Err(Error::Unsupported(
                    "Gibbs sampling needs a per-component constant dispersion (identity_constant) or a fixed one".into(),
                ))
            }
        };
        let d = shape.link1.param_dim();
        let sigma = square(prior.theta_cov.as_ref(), d, 1.0)?;
        let prior_prec = sigma
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("prior covariance must be positive definite".into()))?
            .inverse();
        let proposal = square(config.proposal_cov.as_ref(), d, 0.01)?
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("proposal covariance must be positive definite".into()))?;
        Ok(Sampler {
            shape,
            data,
            h1: LinkEvaluator::new(&shape.link1, &data.x)?,
            samples_eta,
            fixed_phi,
            alpha: prior.concentrations(k)?,
            prior_prec,
            prior: prior.clone(),
            proposal,
            eta_shape: config.eta_proposal_shape,
        })
    }

    fn phi_of(&self, state: &State, j: usize) -> f64 {
        if self.samples_eta {
            1.0 / state.eta[j]
        } else {
            self.fixed_phi
        }
    }

    fn ln_f(&self, i: usize, theta: &[f64], phi: f64) -> f64 {
        let mu = self.h1.eval(i, theta);
        if !mu.is_finite() || self.shape.kernel.check_params(mu, phi).is_err() {
            return f64::NEG_INFINITY;
        }
        self.shape.kernel.ln_density_unchecked(self.data.y[i], mu, phi)
    }

    /// Σ over points allocated to j of log f(y_i | h(x_i, θ), φ).
    fn component_loglik(&self, z: &[usize], j: usize, theta: &[f64], phi: f64) -> f64 {
        let mut total = 0.0;
        for (i, &zi) in z.iter().enumerate() {
            if zi == j {
                total += self.ln_f(i, theta, phi);
                if total == f64::NEG_INFINITY || total.is_nan() {
                    return f64::NEG_INFINITY;
                }
            }
        }
        total
    }

    fn ln_prior_theta(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        -0.5 * t.dot(&(&self.prior_prec * &t))
    }

    fn ln_prior_eta(&self, eta: f64) -> f64 {
        (self.prior.eta_shape - 1.0) * eta.ln() - self.prior.eta_rate * eta
    }

    /// Initial state drawn from the priors (η from Gamma(2, 2)).
    pub fn initial_state(&self, rng: &mut seed::Rng) -> Result<State> {
        let k = self.alpha.len();
        let d = self.shape.link1.param_dim();
        let prior_chol = self
            .prior_prec
            .clone()
            .try_inverse()
            .and_then(|s| s.cholesky())
            .ok_or_else(|| Error::InvalidParameter("prior covariance".into()))?;
        let theta = (0..k)
            .map(|_| {
                let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                (prior_chol.l() * e).iter().copied().collect()
            })
            .collect();
        let weights = sample_weights(&vec![0; k], &self.alpha, rng)?;
        let eta = if self.samples_eta {
            let g = Gamma::new(2.0, 0.5).expect("valid");
            (0..k).map(|_| g.sample(rng)).collect()
        } else {
            Vec::new()
        };
        Ok(State {
            weights,
            theta,
            eta,
            z: vec![0; self.data.len()],
        })
    }

    pub fn sample_allocations(&self, state: &State, rng: &mut seed::Rng) -> Result<Vec<usize>> {
        let k = state.k();
        let ln_p: Vec<f64> = state.weights.iter().map(|p| p.ln()).collect();
        let phis: Vec<f64> = (0..k).map(|j| self.phi_of(state, j)).collect();
        let mut logs = vec![0.0; k];
        let mut z = Vec::with_capacity(self.data.len());
        for i in 0..self.data.len() {
            let mut top = f64::NEG_INFINITY;
            for j in 0..k {
                logs[j] = if state.weights[j] > 0.0 {
                    ln_p[j] + self.ln_f(i, &state.theta[j], phis[j])
                } else {
                    f64::NEG_INFINITY
                };
                top = top.max(logs[j]);
            }
            if top == f64::NEG_INFINITY || top.is_nan() {
                return Err(Error::ZeroDensity { index: i });
            }
            let mut total = 0.0;
            for v in logs.iter_mut() {
                *v = (*v - top).exp();
                total += *v;
            }
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = k - 1;
            for (j, v) in logs.iter().enumerate() {
                acc += v;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            while logs[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            z.push(pick);
        }
        Ok(z)
    }

    /// Random-walk update of every θ_j; returns the accept flags.
    pub fn mh_update_theta(&self, state: &mut State, rng: &mut seed::Rng) -> Vec<bool> {
        let d = self.shape.link1.param_dim();
        (0..state.k())
            .map(|j| {
                let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let step = self.proposal.l() * e;
                let cand: Vec<f64> = state.theta[j].iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                let phi = self.phi_of(state, j);
                let cur = self.component_loglik(&state.z, j, &state.theta[j], phi) + self.ln_prior_theta(&state.theta[j]);
                let new = self.component_loglik(&state.z, j, &cand, phi) + self.ln_prior_theta(&cand);
                let ok = accept(new - cur, rng);
                if ok {
                    state.theta[j] = cand;
                }
                ok
            })
            .collect()
    }

    /// Gamma(s, s/η) proposal for every η_j with the Hastings correction.
    pub fn mh_update_eta(&self, state: &mut State, rng: &mut seed::Rng) -> Vec<bool> {
        if !self.samples_eta {
            return Vec::new();
        }
        let s = self.eta_shape;
        (0..state.k())
            .map(|j| {
                let eta = state.eta[j];
                let cand = Gamma::new(s, eta / s).map(|g| g.sample(rng)).unwrap_or(0.0);
                if !(cand > f64::MIN_POSITIVE) || !cand.is_finite() {
                    return false;
                }
                let cur = self.component_loglik(&state.z, j, &state.theta[j], 1.0 / eta) + self.ln_prior_eta(eta);
                let new = self.component_loglik(&state.z, j, &state.theta[j], 1.0 / cand) + self.ln_prior_eta(cand);
                let log_ratio = new - cur + ln_gamma_proposal(eta, cand, s) - ln_gamma_proposal(cand, eta, s);
                let ok = accept(log_ratio, rng);
                if ok {
                    state.eta[j] = cand;
                }
                ok
            })
            .collect()
    }

    fn snapshot(&self, state: &State, iteration: usize) -> ChainSample {
        ChainSample {
            iteration,
            weights: state.weights.clone(),
            theta: state.theta.clone(),
            eta: state.eta.clone(),
            phi: state.eta.iter().map(|e| 1.0 / e).collect(),
            counts: state.counts(),
        }
    }
}

fn square(given: Option<&Vec<Vec<f64>>>, d: usize, diag: f64) -> Result<DMatrix<f64>> {
    match given {
        None => Ok(DMatrix::identity(d, d) * diag),
        Some(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::DimensionMismatch(format!("covariance must be {d}x{d}")));
            }
            let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
            if (0..d).any(|i| (0..d).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
                return Err(Error::InvalidParameter("covariance must be symmetric".into()));
            }
            Ok(m)
        }
    }
}

/// log density of Gamma(shape s, rate s/b) at a, up to the constant −ln Γ(s).
fn ln_gamma_proposal(a: f64, b: f64, s: f64) -> f64 {
    let rate = s / b;
    s * rate.ln() + (s - 1.0) * a.ln() - rate * a
}

fn accept(log_ratio: f64, rng: &mut seed::Rng) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    if log_ratio >= 0.0 {
        // ratio 1 accepts without consuming a draw
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// Dirichlet(α_j + n_j) draw by normalized Gamma variates.
pub fn sample_weights(counts: &[usize], alpha: &[f64], rng: &mut seed::Rng) -> Result<Vec<f64>> {
    if counts.len() != alpha.len() {
        return Err(Error::DimensionMismatch("counts and concentrations differ in length".into()));
    }
    let mut g: Vec<f64> = counts
        .iter()
        .zip(alpha)
        .map(|(&n, &a)| {
            Gamma::new(a + n as f64, 1.0)
                .map(|d| d.sample(rng))
                .map_err(|e| Error::InvalidParameter(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let total: f64 = g.iter().sum();
    if !(total > 0.0) {
        // every Gamma draw underflowed; fall back to the Dirichlet mean
        let s: f64 = counts.iter().zip(alpha).map(|(&n, &a)| a + n as f64).sum();
        return Ok(counts.iter().zip(alpha).map(|(&n, &a)| (a + n as f64) / s).collect());
    }
    for v in g.iter_mut() {
        *v /= total;
    }
    Ok(g)
}

/// Runs the sampler from a prior draw and keeps every `thin`-th post-burn-in state.
pub fn run_gibbs(config: &MCMCConfig, prior: &PriorSpec, data: &Dataset, shape: &ModelShape, k: usize) -> Result<Chain> {
    let sampler = Sampler::new(shape, data, k, prior, config)?;
    let mut rng = seed::rng(config.seed);
    let state = sampler.initial_state(&mut rng)?;
    run_from_state(&sampler, config, state, &mut rng)
}

/// Runs the sampler from a given state.
pub fn run_from_state(sampler: &Sampler, config: &MCMCConfig, mut state: State, rng: &mut seed::Rng) -> Result<Chain> {
    let k = state.k();
    let mut samples = Vec::with_capacity((config.iterations - config.burn_in) / config.thin + 1);
    let mut theta_acc = Acceptance::default();
    let mut eta_acc = Acceptance::default();
    for t in 1..=config.iterations {
        state.z = sampler.sample_allocations(&state, rng)?;
        state.weights = sample_weights(&state.counts(), &sampler.alpha, rng)?;
        for ok in sampler.mh_update_eta(&mut state, rng) {
            eta_acc.record(ok);
        }
        for ok in sampler.mh_update_theta(&mut state, rng) {
            theta_acc.record(ok);
        }
        if t > config.burn_in && (t - config.burn_in) % config.thin == 0 {
            samples.push(sampler.snapshot(&state, t));
        }
    }
    Ok(Chain {
        k,
        samples,
        theta_acceptance: theta_acc,
        eta_acceptance: eta_acc,
        label_switching_warning: k > 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorW1 {
    pub mean: f64,
    pub q25: f64,
    pub q75: f64,
    pub samples: usize,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// W1 from every kept sample to `g0`, summarized by mean and quartiles.
/// A sampled dispersion is compared on `scale` (θ₂ of `g0` holds φ).
pub fn posterior_w1(chain: &Chain, g0: &MixingMeasure, scale: DispersionScale) -> Result<PosteriorW1> {
    if chain.samples.is_empty() {
        return Err(Error::InvalidParameter("chain has no kept samples".into()));
    }
    let g0 = scale.map_measure(g0)?;
    let mut d = chain
        .samples
        .iter()
        .map(|s| measures::wasserstein_distance(&s.measure_in(scale)?, &g0, 1))
        .collect::<Result<Vec<f64>>>()?;
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    Ok(PosteriorW1 {
        mean,
        q25: quantile(&d, 0.25),
        q75: quantile(&d, 0.75),
        samples: d.len(),
    })
}
