//! Maximum likelihood fitting of mixtures of regressions by EM and generalized EM.
//!
//! The E-step is shared. M-steps update the weights in closed form and each
//! component's θ₁ by weighted least squares (normal kernels with links linear in
//! θ), one Newton iteration (EM1), or one gradient-ascent step. θ₂ and fixed
//! dispersions are held at their starting values.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::links::{InverseLink, LinkEvaluator};
use crate::measures::{Atom, MixingMeasure};
use crate::model::{Dataset, Dispersion, MixtureRegressionModel, ModelShape};
use crate::seed;
use crate::special::sigmoid;

/// Halvings tried before a backtracking step gives up and keeps θ.
const MAX_HALVINGS: usize = 50;

/// How each component's θ₁ is updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum MStep {
    /// Weighted least squares; normal kernels with links linear in θ.
    ClosedForm,
    /// One Newton iteration on the component's expected log-likelihood.
    Em1Newton {
        #[serde(default = "yes")]
        backtracking: bool,
    },
    /// θ ← θ + ν ∂Q/∂θ.
    Gradient {
        nu: f64,
        #[serde(default = "yes")]
        backtracking: bool,
    },
}

fn yes() -> bool {
    true
}

impl MStep {
    /// The update prescribed for each family: closed form for normal kernels,
    /// EM1 for Poisson and binomial, gradient ascent for the negative binomial.
    pub fn default_for(kernel: &Kernel) -> MStep {
        match kernel {
            Kernel::NormalFixed { .. } | Kernel::Normal => MStep::ClosedForm,
            Kernel::Poisson | Kernel::Binomial { .. } => MStep::Em1Newton { backtracking: true },
            Kernel::NegBin => MStep::Gradient {
                nu: 1e-3,
                backtracking: true,
            },
        }
    }
}

/// Starting point of each restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Init {
    /// Atoms uniform in the parameter box, weights 1/K.
    #[default]
    RandomFromBox,
    /// First restart from a 1-d k-means clustering of y; the rest random.
    KmeansOnY,
    /// First restart from the given measure; the rest random.
    Supplied { measure: MixingMeasure },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EMConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Stop once the log-likelihood increases by at most ε; 1e-8·n when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub m_step: MStep,
    #[serde(default)]
    pub init: Init,
    #[serde(default = "one")]
    pub restarts: usize,
    pub seed: u64,
    /// Re-seed a component whose weight falls below 1e-6/K; a second collapse
    /// fails the restart. Meant for exact-fitted runs.
    #[serde(default = "yes")]
    pub collapse_guard: bool,
    /// Experimental: grid of fixed dispersions to profile over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_profile: Option<Vec<f64>>,
}

fn default_max_iter() -> usize {
    2000
}

fn one() -> usize {
    1
}

impl EMConfig {
    pub fn new(k: usize, m_step: MStep, seed: u64) -> Self {
        EMConfig {
            k,
            max_iter: default_max_iter(),
            epsilon: None,
            m_step,
            init: Init::RandomFromBox,
            restarts: 1,
            seed,
            collapse_guard: true,
            phi_profile: None,
        }
    }

    pub fn epsilon_for(&self, n: usize) -> f64 {
        self.epsilon.unwrap_or(1e-8 * n as f64)
    }

    pub fn validate(&self, shape: &ModelShape) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("K must be >= 1".into()));
        }
        if self.max_iter == 0 || self.restarts == 0 {
            return Err(Error::InvalidParameter("max_iter and restarts must be >= 1".into()));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(Error::InvalidParameter(format!("epsilon = {e} must be > 0")));
            }
        }
        match &self.m_step {
            MStep::ClosedForm => {
                let normal = matches!(shape.kernel, Kernel::NormalFixed { .. } | Kernel::Normal);
                if !normal || !shape.link1.is_linear_in_theta() {
                    return Err(Error::Unsupported(
                        "closed_form M-step needs a normal kernel and a link linear in theta".into(),
                    ));
                }
            }
            MStep::Gradient { nu, .. } if !(*nu > 0.0) => {
                return Err(Error::InvalidParameter(format!("step size nu = {nu} must be > 0")))
            }
            _ => {}
        }
        if let Some(grid) = &self.phi_profile {
            if !matches!(shape.dispersion, Dispersion::Fixed { .. }) {
                return Err(Error::Unsupported("phi_profile needs a fixed dispersion".into()));
            }
            if grid.is_empty() || grid.iter().any(|p| !(*p > 0.0)) {
                return Err(Error::InvalidParameter("phi_profile values must be > 0".into()));
            }
        }
        if self.needs_box() && shape.bounds.is_none() {
            return Err(Error::InvalidParameter("random initialization needs a parameter box".into()));
        }
        if let Init::Supplied { measure } = &self.init {
            shape.check_measure(measure)?;
            if measure.len() != self.k {
                return Err(Error::DimensionMismatch(format!(
                    "supplied measure has {} atoms, K = {}",
                    measure.len(),
                    self.k
                )));
            }
        }
        Ok(())
    }

    fn needs_box(&self) -> bool {
        match self.init {
            Init::RandomFromBox => true,
            _ => self.restarts > 1,
        }
    }
}

/// Posterior membership probabilities w_ij and the log-likelihood they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    /// n × K.
    pub w: DMatrix<f64>,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub index: usize,
    pub loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EMResult {
    pub g_hat: MixingMeasure,
    pub loglik: f64,
    /// Log-likelihood at the start and after every sweep.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
    pub restarts: Vec<RestartSummary>,
    /// Fallbacks, re-seeds and skipped updates, prefixed by restart index.
    pub events: Vec<String>,
    /// Dispersion used by the returned fit (differs from the input under a φ profile).
    pub dispersion: Dispersion,
}

/// Read-only view of the data prepared for one model shape.
struct Workspace<'a> {
    shape: &'a ModelShape,
    data: &'a Dataset,
    h1: LinkEvaluator<'a>,
}

impl<'a> Workspace<'a> {
    fn new(shape: &'a ModelShape, data: &'a Dataset) -> Result<Self> {
        shape.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidParameter("empty dataset".into()));
        }
        if data.covariate_dim() < shape.covariate_dim() {
            return Err(Error::DimensionMismatch(format!(
                "data has {} covariates, model needs {}",
                data.covariate_dim(),
                shape.covariate_dim()
            )));
        }
        data.check_support(&shape.kernel)?;
        let h1 = LinkEvaluator::new(&shape.link1, &data.x)?;
        Ok(Workspace { shape, data, h1 })
    }

    fn n(&self) -> usize {
        self.data.len()
    }

    fn mu(&self, i: usize, theta: &[f64]) -> f64 {
        self.h1.eval(i, theta)
    }

    /// φ_i of one component at every observation.
    fn phis(&self, atom: &Atom) -> Result<Vec<f64>> {
        match &self.shape.dispersion {
            Dispersion::None => Ok(vec![0.0; self.n()]),
            Dispersion::Fixed { phi } => Ok(vec![*phi; self.n()]),
            Dispersion::Link { link } => self.data.x.iter().map(|x| link.eval(x, &atom.theta2)).collect(),
        }
    }

    fn ln_f(&self, i: usize, mu: f64, phi: f64) -> f64 {
        if !mu.is_finite() || self.shape.kernel.check_params(mu, phi).is_err() {
            return f64::NEG_INFINITY;
        }
        self.shape.kernel.ln_density_unchecked(self.data.y[i], mu, phi)
    }

    /// Σ_i w_i log f(y_i | h₁(x_i, θ), φ_i).
    fn q_component(&self, theta: &[f64], w: &[f64], phis: &[f64]) -> f64 {
        let mut q = 0.0;
        for i in 0..self.n() {
            if w[i] > 0.0 {
                q += w[i] * self.ln_f(i, self.mu(i, theta), phis[i]);
                if q.is_nan() || q == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
            }
        }
        q
    }

    fn e_step(&self, g: &MixingMeasure, phis: &[Vec<f64>]) -> Result<Responsibilities> {
        let n = self.n();
        let k = g.len();
        let mut w = DMatrix::zeros(n, k);
        let ln_p: Vec<f64> = g.atoms().iter().map(|a| a.weight.ln()).collect();
        let mut loglik = 0.0;
        let mut row = vec![0.0; k];
        for i in 0..n {
            let mut top = f64::NEG_INFINITY;
            for (j, a) in g.atoms().iter().enumerate() {
                row[j] = if a.weight > 0.0 {
                    ln_p[j] + self.ln_f(i, self.mu(i, &a.theta1), phis[j][i])
                } else {
                    f64::NEG_INFINITY
                };
                top = top.max(row[j]);
            }
            if top == f64::NEG_INFINITY || top.is_nan() {
                return Err(Error::ZeroDensity { index: i });
            }
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - top).exp();
                s += *v;
            }
            loglik += top + s.ln();
            for j in 0..k {
                w[(i, j)] = row[j] / s;
            }
        }
        Ok(Responsibilities { w, loglik })
    }

    /// Gradient and Hessian of the component's expected log-likelihood in θ₁.
    fn grad_hess(&self, theta: &[f64], w: &[f64], phis: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = theta.len();
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let kernel = &self.shape.kernel;
        for i in 0..self.n() {
            if w[i] == 0.0 {
                continue;
            }
            let y = self.data.y[i];
            let phi = phis[i];
            match self.h1.design() {
                Some((link, z)) => {
                    let eta = self.h1.eta(i, theta);
                    let (a, b) = canonical_terms(kernel, link, y, eta, phi)
                        .unwrap_or_else(|| chain_terms(kernel, link, y, eta, phi));
                    let zi = z.row(i).transpose();
                    g.axpy(w[i] * a, &zi, 1.0);
                    h.ger(w[i] * b, &zi, &zi, 1.0);
                }
                None => {
                    let x = &self.data.x[i];
                    let link = &self.shape.link1;
                    let (Ok(mu), Ok(dh), Ok(d2h)) = (link.eval(x, theta), link.grad_theta(x, theta), link.hess_theta(x, theta))
                    else {
                        continue;
                    };
                    let (l1, l2) = kernel.log_score_mu(y, mu, phi);
                    let dh = DVector::from_vec(dh);
                    g.axpy(w[i] * l1, &dh, 1.0);
                    h.ger(w[i] * l2, &dh, &dh, 1.0);
                    h += d2h * (w[i] * l1);
                }
            }
        }
        (g, h)
    }
}

/// Table-3 forms (∂ℓ/∂η, ∂²ℓ/∂η²) for canonical kernel/link pairs.
fn canonical_terms(kernel: &Kernel, link: InverseLink, y: f64, eta: f64, phi: f64) -> Option<(f64, f64)> {
    match (kernel, link) {
        (Kernel::NormalFixed { sigma2 }, InverseLink::Identity) => Some(((y - eta) / sigma2, -1.0 / sigma2)),
        (Kernel::Normal, InverseLink::Identity) => Some(((y - eta) / phi, -1.0 / phi)),
        (Kernel::Poisson, InverseLink::Exp) => {
            let mu = eta.exp();
            Some((y - mu, -mu))
        }
        (Kernel::Binomial { n }, InverseLink::Logistic) => {
            let s = sigmoid(eta);
            let n = *n as f64;
            Some((y - n * s, -n * s * (1.0 - s)))
        }
        (Kernel::NegBin, InverseLink::Exp) => {
            let mu = eta.exp();
            let a = (y - mu) / (1.0 + mu / phi);
            let b = -phi * mu * (phi + y) / ((phi + mu) * (phi + mu));
            Some((a, b))
        }
        _ => None,
    }
}

/// Chain rule through g for non-canonical pairs.
fn chain_terms(kernel: &Kernel, link: InverseLink, y: f64, eta: f64, phi: f64) -> (f64, f64) {
    let (mu, m1, m2) = match link {
        InverseLink::Identity => (eta, 1.0, 0.0),
        InverseLink::Exp => {
            let e = eta.exp();
            (e, e, e)
        }
        InverseLink::Logistic => {
            let s = sigmoid(eta);
            (s, s * (1.0 - s), s * (1.0 - s) * (1.0 - 2.0 * s))
        }
    };
    let (l1, l2) = kernel.log_score_mu(y, mu, phi);
    (l1 * m1, l2 * m1 * m1 + l1 * m2)
}

fn column(w: &DMatrix<f64>, j: usize) -> Vec<f64> {
    w.column(j).iter().copied().collect()
}

fn new_weights(w: &DMatrix<f64>) -> Vec<f64> {
    let n = w.nrows() as f64;
    (0..w.ncols()).map(|j| w.column(j).sum() / n).collect()
}

fn rebuild(g: &MixingMeasure, weights: &[f64], thetas: Vec<Vec<f64>>) -> Result<MixingMeasure> {
    let atoms = g
        .atoms()
        .iter()
        .zip(thetas)
        .zip(weights)
        .map(|((a, t), &p)| Atom::new(t, a.theta2.clone(), p))
        .collect();
    MixingMeasure::normalized(atoms, g.bounds().cloned())
}

fn all_phis(ws: &Workspace, g: &MixingMeasure) -> Result<Vec<Vec<f64>>> {
    g.atoms().iter().map(|a| ws.phis(a)).collect()
}

/// Weighted least squares for one component; weights w_i / Var_i.
fn wls_component(ws: &Workspace, w: &[f64], phis: &[f64]) -> Result<Vec<f64>> {
    let Some((InverseLink::Identity, z)) = ws.h1.design() else {
        return Err(Error::Unsupported("closed-form M-step needs a link linear in theta".into()));
    };
    let d = z.ncols();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for i in 0..ws.n() {
        if w[i] == 0.0 {
            continue;
        }
        let v = ws.shape.kernel.variance(0.0, phis[i]);
        let c = w[i] / v;
        let zi = z.row(i).transpose();
        a.ger(c, &zi, &zi, 1.0);
        b.axpy(c * ws.data.y[i], &zi, 1.0);
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular("weighted normal equations".into()))?;
    let theta = chol.solve(&b);
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Singular("weighted normal equations".into()));
    }
    Ok(theta.iter().copied().collect())
}

/// One backtracking line search along `dir`; returns the accepted θ or None.
fn backtrack(ws: &Workspace, theta: &[f64], dir: &DVector<f64>, w: &[f64], phis: &[f64], q0: f64) -> Option<Vec<f64>> {
    let mut t = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
        let q = ws.q_component(&cand, w, phis);
        if q.is_finite() && q >= q0 {
            return Some(cand);
        }
        t *= 0.5;
    }
    None
}

fn newton_component(
    ws: &Workspace,
    theta: &[f64],
    w: &[f64],
    phis: &[f64],
    backtracking: bool,
    events: &mut Vec<String>,
    j: usize,
) -> Vec<f64> {
    let (g, h) = ws.grad_hess(theta, w, phis);
    if g.iter().any(|v| !v.is_finite()) || h.iter().any(|v| !v.is_finite()) {
        events.push(format!("component {j}: non-finite gradient, theta kept"));
        return theta.to_vec();
    }
    let q0 = ws.q_component(theta, w, phis);
    let neg_h = -h.clone();
    match neg_h.cholesky() {
        Some(chol) => {
            let step = chol.solve(&g);
            if backtracking {
                backtrack(ws, theta, &step, w, phis, q0).unwrap_or_else(|| theta.to_vec())
            } else {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                if ws.q_component(&cand, w, phis).is_finite() {
                    cand
                } else {
                    events.push(format!("component {j}: Newton step left the valid region, theta kept"));
                    theta.to_vec()
                }
            }
        }
        None => {
            events.push(format!("component {j}: Hessian not negative definite, gradient step used"));
            let scale = h.diagonal().iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
            let dir = g / scale;
            backtrack(ws, theta, &dir, w, phis, q0).unwrap_or_else(|| theta.to_vec())
        }
    }
}

fn gradient_component(ws: &Workspace, theta: &[f64], w: &[f64], phis: &[f64], nu: f64, backtracking: bool) -> Vec<f64> {
    let (g, _) = ws.grad_hess(theta, w, phis);
    if g.iter().any(|v| !v.is_finite()) {
        return theta.to_vec();
    }
    let q0 = ws.q_component(theta, w, phis);
    let dir = g * nu;
    if backtracking {
        return backtrack(ws, theta, &dir, w, phis, q0).unwrap_or_else(|| theta.to_vec());
    }
    // without backtracking only overflow shrinks the step
    let mut t = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
        if ws.q_component(&cand, w, phis).is_finite() {
            return cand;
        }
        t *= 0.5;
    }
    theta.to_vec()
}

/// Clamps an update that left the box; keeps the old θ if clamping lowers Q.
#[allow(clippy::too_many_arguments)]
fn project_to_box(
    ws: &Workspace,
    g: &MixingMeasure,
    atom: &Atom,
    theta: Vec<f64>,
    w: &[f64],
    phis: &[f64],
    events: &mut Vec<String>,
    j: usize,
) -> Vec<f64> {
    let Some(b) = g.bounds() else {
        return theta;
    };
    let mut cand = Atom::new(theta, atom.theta2.clone(), atom.weight);
    if b.contains(&cand) {
        return cand.theta1;
    }
    b.clamp(&mut cand);
    if ws.q_component(&cand.theta1, w, phis) >= ws.q_component(&atom.theta1, w, phis) {
        events.push(format!("component {j}: update clamped to the box"));
        cand.theta1
    } else {
        events.push(format!("component {j}: update left the box, theta kept"));
        atom.theta1.clone()
    }
}

fn m_step(
    ws: &Workspace,
    strategy: &MStep,
    resp: &Responsibilities,
    g: &MixingMeasure,
    phis: &[Vec<f64>],
    events: &mut Vec<String>,
) -> Result<MixingMeasure> {
    let weights = new_weights(&resp.w);
    let mut thetas = Vec::with_capacity(g.len());
    for (j, atom) in g.atoms().iter().enumerate() {
        let w = column(&resp.w, j);
        if weights[j] == 0.0 {
            thetas.push(atom.theta1.clone());
            continue;
        }
        let theta = match strategy {
            MStep::ClosedForm => match wls_component(ws, &w, &phis[j]) {
                Ok(t) => t,
                Err(e) => {
                    events.push(format!("component {j}: {e}, theta kept"));
                    atom.theta1.clone()
                }
            },
            MStep::Em1Newton { backtracking } => newton_component(ws, &atom.theta1, &w, &phis[j], *backtracking, events, j),
            MStep::Gradient { nu, backtracking } => gradient_component(ws, &atom.theta1, &w, &phis[j], *nu, *backtracking),
        };
        thetas.push(project_to_box(ws, g, atom, theta, &w, &phis[j], events, j));
    }
    rebuild(g, &weights, thetas)
}

/// Posterior membership probabilities at the model's current measure.
pub fn e_step(m: &MixtureRegressionModel, data: &Dataset) -> Result<Responsibilities> {
    let ws = Workspace::new(&m.shape, data)?;
    ws.e_step(&m.measure, &all_phis(&ws, &m.measure)?)
}

fn check_resp(resp: &Responsibilities, data: &Dataset, g: &MixingMeasure) -> Result<()> {
    if resp.w.nrows() != data.len() || resp.w.ncols() != g.len() {
        return Err(Error::DimensionMismatch(format!(
            "responsibilities are {}x{}, expected {}x{}",
            resp.w.nrows(),
            resp.w.ncols(),
            data.len(),
            g.len()
        )));
    }
    Ok(())
}

/// Closed-form M-step: weights are column means of w, θ₁ by weighted least squares.
pub fn m_step_normal(shape: &ModelShape, data: &Dataset, resp: &Responsibilities, g: &MixingMeasure) -> Result<MixingMeasure> {
    let ws = Workspace::new(shape, data)?;
    check_resp(resp, data, g)?;
    let phis = all_phis(&ws, g)?;
    let thetas = (0..g.len())
        .map(|j| wls_component(&ws, &column(&resp.w, j), &phis[j]))
        .collect::<Result<Vec<_>>>()?;
    rebuild(g, &new_weights(&resp.w), thetas)
}

/// EM1 M-step: one Newton iteration per component, with events for fallbacks.
pub fn m_step_em1(
    shape: &ModelShape,
    data: &Dataset,
    resp: &Responsibilities,
    g: &MixingMeasure,
    backtracking: bool,
) -> Result<(MixingMeasure, Vec<String>)> {
    let ws = Workspace::new(shape, data)?;
    check_resp(resp, data, g)?;
    let mut events = Vec::new();
    let next = m_step(&ws, &MStep::Em1Newton { backtracking }, resp, g, &all_phis(&ws, g)?, &mut events)?;
    Ok((next, events))
}

/// Gradient-ascent M-step with step size ν.
pub fn m_step_gradient(
    shape: &ModelShape,
    data: &Dataset,
    resp: &Responsibilities,
    g: &MixingMeasure,
    nu: f64,
    backtracking: bool,
) -> Result<MixingMeasure> {
    if !(nu > 0.0) {
        return Err(Error::InvalidParameter(format!("step size nu = {nu} must be > 0")));
    }
    let ws = Workspace::new(shape, data)?;
    check_resp(resp, data, g)?;
    let mut events = Vec::new();
    m_step(&ws, &MStep::Gradient { nu, backtracking }, resp, g, &all_phis(&ws, g)?, &mut events)
}

/// Q(ψ | ψ') = Σ_ij w_ij [log p_j + log f_j(y_i | x_i)] with w from ψ'.
pub fn q_function(shape: &ModelShape, data: &Dataset, resp: &Responsibilities, g: &MixingMeasure) -> Result<f64> {
    let ws = Workspace::new(shape, data)?;
    check_resp(resp, data, g)?;
    let phis = all_phis(&ws, g)?;
    let mut q = 0.0;
    for (j, a) in g.atoms().iter().enumerate() {
        let w = column(&resp.w, j);
        let mass: f64 = w.iter().sum();
        if mass > 0.0 {
            q += mass * a.weight.ln() + ws.q_component(&a.theta1, &w, &phis[j]);
        }
    }
    Ok(q)
}

/// Gradient and Hessian of component `j`'s expected log-likelihood in θ₁.
pub fn component_gradient_hessian(
    shape: &ModelShape,
    data: &Dataset,
    resp: &Responsibilities,
    g: &MixingMeasure,
    j: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let ws = Workspace::new(shape, data)?;
    check_resp(resp, data, g)?;
    let atom = g
        .atoms()
        .get(j)
        .ok_or_else(|| Error::InvalidParameter(format!("no component {j}")))?;
    Ok(ws.grad_hess(&atom.theta1, &column(&resp.w, j), &ws.phis(atom)?))
}

struct RunOutcome {
    g: MixingMeasure,
    trace: Vec<f64>,
    converged: bool,
    events: Vec<String>,
}

fn random_measure(shape: &ModelShape, k: usize, rng: &mut seed::Rng) -> Result<MixingMeasure> {
    let b = shape
        .bounds
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("random initialization needs a parameter box".into()))?;
    let atoms = (0..k)
        .map(|_| {
            let (t1, t2) = b.sample_point(rng);
            Atom::new(t1, t2, 1.0 / k as f64)
        })
        .collect();
    MixingMeasure::normalized(atoms, Some(b.clone()))
}

fn kmeans_1d(y: &[f64], k: usize) -> Vec<usize> {
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut centers: Vec<f64> = (0..k)
        .map(|j| sorted[(((j as f64 + 0.5) / k as f64) * sorted.len() as f64) as usize])
        .collect();
    let mut labels = vec![0; y.len()];
    for _ in 0..100 {
        for (i, v) in y.iter().enumerate() {
            labels[i] = (0..k)
                .min_by(|&a, &b| (v - centers[a]).abs().total_cmp(&(v - centers[b]).abs()))
                .expect("k >= 1");
        }
        let mut changed = false;
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<f64> = y.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(v, _)| *v).collect();
            if !members.is_empty() {
                let m = members.iter().sum::<f64>() / members.len() as f64;
                changed |= m != *c;
                *c = m;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn kmeans_measure(ws: &Workspace, strategy: &MStep, k: usize) -> Result<MixingMeasure> {
    let shape = ws.shape;
    let (d1, d2) = shape.theta_dims();
    let center = |lo: &[f64], hi: &[f64]| -> Vec<f64> { lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect() };
    let (c1, c2) = match &shape.bounds {
        Some(b) => (center(&b.theta1_lo, &b.theta1_hi), center(&b.theta2_lo, &b.theta2_hi)),
        None => (vec![0.0; d1], vec![0.0; d2]),
    };
    let labels = kmeans_1d(&ws.data.y, k);
    let n = ws.n();
    let mut w = DMatrix::zeros(n, k);
    for (i, &l) in labels.iter().enumerate() {
        w[(i, l)] = 1.0;
    }
    let mut atoms = Vec::with_capacity(k);
    let mut events = Vec::new();
    for j in 0..k {
        let col = column(&w, j);
        let count: f64 = col.iter().sum();
        let probe = Atom::new(c1.clone(), c2.clone(), 1.0);
        let phis = ws.phis(&probe)?;
        let theta = match strategy {
            MStep::ClosedForm => wls_component(ws, &col, &phis).unwrap_or_else(|_| c1.clone()),
            _ => {
                let mut t = c1.clone();
                for _ in 0..25 {
                    t = newton_component(ws, &t, &col, &phis, true, &mut events, j);
                }
                t
            }
        };
        atoms.push(Atom::new(theta, c2.clone(), (count + 1.0) / (n + k) as f64));
    }
    MixingMeasure::normalized(atoms, shape.bounds.clone())
}

fn run_from(
    ws: &Workspace,
    config: &EMConfig,
    start: MixingMeasure,
    rng: &mut seed::Rng,
) -> Result<RunOutcome> {
    let eps = config.epsilon_for(ws.n());
    let k = start.len();
    let mut g = start;
    let mut phis = all_phis(ws, &g)?;
    let mut resp = ws.e_step(&g, &phis)?;
    let mut trace = vec![resp.loglik];
    let mut events = Vec::new();
    let mut reseeds_left = 1;
    let mut converged = false;
    for _ in 0..config.max_iter {
        let mut next = m_step(ws, &config.m_step, &resp, &g, &phis, &mut events)?;
        let mut reseeded = false;
        if config.collapse_guard && k > 1 {
            let floor = 1e-6 / k as f64;
            if let Some(j) = next.atoms().iter().position(|a| a.weight < floor) {
                if reseeds_left == 0 {
                    return Err(Error::FitFailed(format!("component {j} collapsed twice")));
                }
                reseeds_left -= 1;
                let (t1, t2) = ws
                    .shape
                    .bounds
                    .as_ref()
                    .ok_or_else(|| Error::FitFailed(format!("component {j} collapsed and there is no box to re-seed from")))?
                    .sample_point(rng);
                let mut atoms = next.atoms().to_vec();
                atoms[j] = Atom::new(t1, t2, 1.0 / k as f64);
                next = MixingMeasure::normalized(atoms, next.bounds().cloned())?;
                events.push(format!("component {j} collapsed at iteration {}, re-seeded", trace.len()));
                phis = all_phis(ws, &next)?;
                reseeded = true;
            }
        }
        let next_resp = ws.e_step(&next, &phis)?;
        let gain = next_resp.loglik - resp.loglik;
        trace.push(next_resp.loglik);
        g = next;
        resp = next_resp;
        if !reseeded && gain <= eps {
            converged = true;
            break;
        }
    }
    Ok(RunOutcome {
        g,
        trace,
        converged,
        events,
    })
}

fn fit_shape(config: &EMConfig, data: &Dataset, shape: &ModelShape, extra: &[MixingMeasure]) -> Result<EMResult> {
    config.validate(shape)?;
    let ws = Workspace::new(shape, data)?;
    for m in extra {
        shape.check_measure(m)?;
    }
    let total = config.restarts + extra.len();
    let outcomes: Vec<Result<RunOutcome>> = (0..total)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(config.seed, &[r as u64]));
            let start = if r >= config.restarts {
                extra[r - config.restarts].clone()
            } else {
                match (&config.init, r) {
                    (Init::Supplied { measure }, 0) => measure.clone(),
                    (Init::KmeansOnY, 0) => kmeans_measure(&ws, &config.m_step, config.k)?,
                    _ => random_measure(shape, config.k, &mut rng)?,
                }
            };
            run_from(&ws, config, start, &mut rng)
        })
        .collect();

    let mut summaries = Vec::with_capacity(total);
    let mut events = Vec::new();
    let mut best: Option<(usize, RunOutcome)> = None;
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(run) => {
                let ll = *run.trace.last().expect("trace starts with the initial value");
                summaries.push(RestartSummary {
                    index: r,
                    loglik: Some(ll),
                    iterations: run.trace.len() - 1,
                    converged: run.converged,
                    error: None,
                });
                events.extend(run.events.iter().map(|e| format!("restart {r}: {e}")));
                let better = match &best {
                    None => true,
                    Some((_, b)) => ll > *b.trace.last().expect("nonempty"),
                };
                if ll.is_finite() && better {
                    best = Some((r, run));
                }
            }
            Err(e) => {
                events.push(format!("restart {r}: failed: {e}"));
                summaries.push(RestartSummary {
                    index: r,
                    loglik: None,
                    iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (index, run) = best.ok_or_else(|| Error::FitFailed(format!("all {total} restarts failed")))?;
    Ok(EMResult {
        loglik: *run.trace.last().expect("nonempty"),
        iterations: run.trace.len() - 1,
        g_hat: run.g,
        loglik_trace: run.trace,
        converged: run.converged,
        restart_index: index,
        restarts: summaries,
        events,
        dispersion: shape.dispersion.clone(),
    })
}

/// Runs EM from every restart and returns the fit with the highest log-likelihood.
pub fn fit(config: &EMConfig, data: &Dataset, shape: &ModelShape) -> Result<EMResult> {
    fit_with_starts(config, data, shape, &[])
}

/// As [`fit`], with additional starting measures run after the configured restarts.
pub fn fit_with_starts(config: &EMConfig, data: &Dataset, shape: &ModelShape, extra: &[MixingMeasure]) -> Result<EMResult> {
    let Some(grid) = &config.phi_profile else {
        return fit_shape(config, data, shape, extra);
    };
    config.validate(shape)?;
    let mut best: Option<EMResult> = None;
    let mut notes = Vec::new();
    for &phi in grid {
        let mut s = shape.clone();
        s.dispersion = Dispersion::Fixed { phi };
        match fit_shape(config, data, &s, extra) {
            Ok(r) => {
                notes.push(format!("phi profile: phi = {phi} gives loglik {}", r.loglik));
                if best.as_ref().is_none_or(|b| r.loglik > b.loglik) {
                    best = Some(r);
                }
            }
            Err(e) => notes.push(format!("phi profile: phi = {phi} failed: {e}")),
        }
    }
    let mut best = best.ok_or_else(|| Error::FitFailed("every phi in the profile grid failed".into()))?;
    best.events.extend(notes);
    Ok(best)
}

/// Random measure with K atoms in the shape's box; used for restarts and tests.
pub fn random_start(shape: &ModelShape, k: usize, rng_seed: u64) -> Result<MixingMeasure> {
    random_measure(shape, k, &mut seed::rng(rng_seed))
}

/// Uniform draw of the indices of a size-`m` subsample, returned sorted.
pub fn subsample_indices(n: usize, m: usize, rng_seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(rng_seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let m = m.min(n);
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut out = idx[..m].to_vec();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::links::Link;
    use crate::measures::ParamBox;
    use crate::model::CovariateDistribution;

    fn quad_shape() -> ModelShape {
        ModelShape::new(
            Kernel::NormalFixed { sigma2: 1.0 },
            Link::Polynomial { degree: 2, p: 1 },
            Dispersion::None,
        )
        .with_bounds(ParamBox::new(&[(-10.0, 10.0); 3], &[]))
    }

    fn truth() -> MixtureRegressionModel {
        let g = MixingMeasure::from_parts(&[0.5, 0.5], &[vec![1.0, -5.0, 1.0], vec![2.0, 5.0, 2.0]], &[]).unwrap();
        MixtureRegressionModel::new(quad_shape(), g).unwrap()
    }

    fn sim(n: usize, s: u64) -> Dataset {
        truth().simulate(&CovariateDistribution::uniform(-3.0, 3.0), n, s).unwrap().data
    }

    #[test]
    fn single_component_responsibilities() {
        let g = MixingMeasure::from_parts(&[1.0], &[vec![0.0, 1.0, 0.0]], &[]).unwrap();
        let m = MixtureRegressionModel::new(quad_shape(), g).unwrap();
        let r = e_step(&m, &sim(30, 1)).unwrap();
        assert!(r.w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn equal_components_split_evenly() {
        let g = MixingMeasure::from_parts(&[0.5, 0.5], &[vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]], &[]).unwrap();
        let m = MixtureRegressionModel::new(quad_shape(), g).unwrap();
        let r = e_step(&m, &sim(30, 2)).unwrap();
        assert!(r.w.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rows_sum_to_one_and_truth_separates() {
        let data = sim(500, 3);
        let r = e_step(&truth(), &data).unwrap();
        for i in 0..data.len() {
            assert!((r.w.row(i).sum() - 1.0).abs() < 1e-12);
        }
        let mean_max: f64 = (0..data.len()).map(|i| r.w.row(i).max()).sum::<f64>() / data.len() as f64;
        assert!(mean_max > 0.5);
    }

    #[test]
    fn closed_form_is_ols_for_one_component() {
        let data = sim(200, 4);
        let g = MixingMeasure::from_parts(&[1.0], &[vec![0.0, 0.0, 0.0]], &[]).unwrap();
        let resp = Responsibilities {
            w: DMatrix::from_element(200, 1, 1.0),
            loglik: 0.0,
        };
        let fitted = m_step_normal(&quad_shape(), &data, &resp, &g).unwrap();
        let x = DMatrix::from_fn(200, 3, |i, c| data.x[i][0].powi(c as i32));
        let y = DVector::from_vec(data.y.clone());
        let ols = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));
        for c in 0..3 {
            assert!((fitted.atoms()[0].theta1[c] - ols[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_halves_recovered_exactly() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![-3.0 + 0.15 * i as f64]).collect();
        let a = [1.0, -5.0, 1.0];
        let b = [2.0, 5.0, 2.0];
        let poly = |t: &[f64; 3], x: f64| t[0] + t[1] * x + t[2] * x * x;
        let y: Vec<f64> = xs.iter().enumerate().map(|(i, x)| if i % 2 == 0 { poly(&a, x[0]) } else { poly(&b, x[0]) }).collect();
        let data = Dataset::new(xs, y).unwrap();
        let w = DMatrix::from_fn(40, 2, |i, j| if i % 2 == j { 1.0 } else { 0.0 });
        let resp = Responsibilities { w, loglik: 0.0 };
        let g = MixingMeasure::from_parts(&[0.5, 0.5], &[vec![0.0; 3], vec![0.0; 3]], &[]).unwrap();
        let fitted = m_step_normal(&quad_shape(), &data, &resp, &g).unwrap();
        for c in 0..3 {
            assert!((fitted.atoms()[0].theta1[c] - a[c]).abs() < 1e-10);
            assert!((fitted.atoms()[1].theta1[c] - b[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn poisson_newton_moves_toward_log_mean() {
        let shape = ModelShape::new(Kernel::Poisson, Link::IdentityConstant, Dispersion::None);
        let shape = ModelShape {
            link1: Link::LogLinear { p: 0 },
            ..shape
        };
        let data = Dataset::new(vec![vec![]; 4], vec![2.0, 3.0, 5.0, 6.0]).unwrap();
        let g = MixingMeasure::from_parts(&[1.0], &[vec![0.0]], &[]).unwrap();
        let resp = Responsibilities {
            w: DMatrix::from_element(4, 1, 1.0),
            loglik: 0.0,
        };
        let (next, _) = m_step_em1(&shape, &data, &resp, &g, false).unwrap();
        // scalar Newton on n·e^θ − Σy from θ = 0: θ₁ = (Σy − n)/n
        assert!((next.atoms()[0].theta1[0] - 3.0).abs() < 1e-12);
        let target = 4f64.ln();
        let (next, _) = m_step_em1(&shape, &data, &resp, &g, true).unwrap();
        assert!((next.atoms()[0].theta1[0] - target).abs() < target);
    }

    #[test]
    fn monotone_closed_form_fit() {
        let data = sim(400, 5);
        let mut cfg = EMConfig::new(2, MStep::ClosedForm, 11);
        cfg.restarts = 3;
        cfg.collapse_guard = false;
        let res = fit(&cfg, &data, &quad_shape()).unwrap();
        for w in res.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        let again = fit(&cfg, &data, &quad_shape()).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn fixed_point_moves_little() {
        let data = sim(300, 6);
        let mut cfg = EMConfig::new(2, MStep::ClosedForm, 1);
        cfg.epsilon = Some(1e-12);
        cfg.collapse_guard = false;
        let res = fit(&cfg, &data, &quad_shape()).unwrap();
        let mut again = cfg.clone();
        again.init = Init::Supplied { measure: res.g_hat.clone() };
        again.max_iter = 1;
        let one = fit(&again, &data, &quad_shape()).unwrap();
        assert!((one.loglik - res.loglik).abs() < 1e-8 * data.len() as f64);
    }

    #[test]
    fn subsample_indices_sorted_and_full() {
        let idx = subsample_indices(10, 10, 3);
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        let idx = subsample_indices(100, 20, 3);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_json() {
        let text = r#"{"K": 2, "m_step": {"strategy": "gradient", "nu": 0.001}, "seed": 3}"#;
        let c: EMConfig = serde_json::from_str(text).unwrap();
        assert_eq!(c.max_iter, 2000);
        assert_eq!(c.m_step, MStep::Gradient { nu: 1e-3, backtracking: true });
        assert!(c.validate(&quad_shape()).is_ok());
        let bad = EMConfig {
            m_step: MStep::Gradient { nu: 0.0, backtracking: true },
            ..c
        };
        assert!(bad.validate(&quad_shape()).is_err());
    }
}
