//! Link functions h(x, θ) carrying a covariate and a component parameter to a
//! kernel parameter, with gradients and Hessians in θ.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::special::sigmoid;

/// Scale in which the leading coefficient of a power-product link is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theta0Scale {
    /// θ = (log θ₀, θ₁, …)
    #[default]
    Log,
    /// θ = (θ₀, θ₁, …) with θ₀ > 0
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "link", rename_all = "snake_case")]
pub enum Link {
    /// Σ θ_m x^m over monomials of total degree ≤ `degree` in `p` covariates.
    Polynomial { degree: usize, p: usize },
    /// θ₀ + Σ_k (a_k cos kx + b_k sin kx), k = 1..=degree, scalar x.
    TrigPolynomial { degree: usize },
    /// exp(θ₀ + θ̄ᵀx).
    LogLinear { p: usize },
    /// σ(θ₀ + θ̄ᵀx), or σ(θᵀx) without intercept.
    SigmoidLinear {
        p: usize,
        #[serde(default = "yes")]
        intercept: bool,
    },
    /// h = θ (scalar), independent of x.
    IdentityConstant,
    /// θ₀ · Π F_i^{θ_i} over positive covariates.
    PowerProduct {
        p: usize,
        #[serde(default)]
        theta0: Theta0Scale,
    },
    /// Sum of component links with concatenated parameters.
    Sum { terms: Vec<Link> },
}

fn yes() -> bool {
    true
}

/// Output transform g in h = g(zᵀθ) for links linear in θ before g.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InverseLink {
    Identity,
    Exp,
    Logistic,
}

fn monomials(p: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(p: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == p - 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=total).rev() {
            prefix.push(first);
            rec(p, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if p == 0 {
        out.push(vec![]);
        return out;
    }
    for total in 0..=degree {
        rec(p, total, &mut Vec::new(), &mut out);
    }
    out
}

impl Link {
    /// Length of θ.
    pub fn param_dim(&self) -> usize {
        match self {
            Link::Polynomial { degree, p } => monomials(*p, *degree).len(),
            Link::TrigPolynomial { degree } => 2 * degree + 1,
            Link::LogLinear { p } => p + 1,
            Link::SigmoidLinear { p, intercept } => p + usize::from(*intercept),
            Link::IdentityConstant => 1,
            Link::PowerProduct { p, .. } => p + 1,
            Link::Sum { terms } => terms.iter().map(Link::param_dim).sum(),
        }
    }

    /// Required covariate dimension, or `None` when x is ignored.
    pub fn covariate_dim(&self) -> Option<usize> {
        match self {
            Link::Polynomial { p, .. }
            | Link::LogLinear { p }
            | Link::SigmoidLinear { p, .. }
            | Link::PowerProduct { p, .. } => Some(*p),
            Link::TrigPolynomial { .. } => Some(1),
            Link::IdentityConstant => None,
            Link::Sum { terms } => terms.iter().filter_map(Link::covariate_dim).max(),
        }
    }

    fn check(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta has length {}, link expects {}",
                theta.len(),
                self.param_dim()
            )));
        }
        if let Some(p) = self.covariate_dim() {
            if x.len() < p {
                return Err(Error::DimensionMismatch(format!(
                    "x has length {}, link expects {p}",
                    x.len()
                )));
            }
        }
        if let Link::PowerProduct { p, theta0 } = self {
            if x[..*p].iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidParameter(
                    "power-product link needs positive covariates".into(),
                ));
            }
            if *theta0 == Theta0Scale::Linear && !(theta[0] > 0.0) {
                return Err(Error::InvalidParameter("theta0 must be > 0 on the linear scale".into()));
            }
        }
        if let Link::Sum { terms } = self {
            if terms.is_empty() {
                return Err(Error::InvalidParameter("sum link needs at least one term".into()));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Link::Polynomial { p, .. } if *p == 0 => {
                Err(Error::InvalidParameter("polynomial link needs p >= 1".into()))
            }
            Link::Sum { terms } if terms.is_empty() => {
                Err(Error::InvalidParameter("sum link needs at least one term".into()))
            }
            Link::Sum { terms } => terms.iter().try_for_each(Link::validate),
            _ => Ok(()),
        }
    }

    /// When h = g(zᵀθ) for a design vector z(x), returns g.
    pub fn inverse_link(&self) -> Option<InverseLink> {
        match self {
            Link::Polynomial { .. } | Link::TrigPolynomial { .. } | Link::IdentityConstant => {
                Some(InverseLink::Identity)
            }
            Link::LogLinear { .. } | Link::PowerProduct { theta0: Theta0Scale::Log, .. } => {
                Some(InverseLink::Exp)
            }
            Link::PowerProduct { theta0: Theta0Scale::Linear, .. } => None,
            Link::SigmoidLinear { .. } => Some(InverseLink::Logistic),
            Link::Sum { terms } => terms
                .iter()
                .all(|t| t.inverse_link() == Some(InverseLink::Identity))
                .then_some(InverseLink::Identity),
        }
    }

    pub fn is_linear_in_theta(&self) -> bool {
        self.inverse_link() == Some(InverseLink::Identity)
    }

    /// Design vector z(x) for links of the form g(zᵀθ).
    pub fn design(&self, x: &[f64]) -> Result<Vec<f64>> {
        if let Some(p) = self.covariate_dim() {
            if x.len() < p {
                return Err(Error::DimensionMismatch(format!("x has length {}, link expects {p}", x.len())));
            }
        }
        match self {
            Link::Polynomial { degree, p } => Ok(monomials(*p, *degree)
                .iter()
                .map(|e| e.iter().zip(x).map(|(&k, &v)| v.powi(k as i32)).product())
                .collect()),
            Link::TrigPolynomial { degree } => {
                let mut z = vec![1.0];
                for k in 1..=*degree {
                    let a = k as f64 * x[0];
                    z.push(a.cos());
                    z.push(a.sin());
                }
                Ok(z)
            }
            Link::LogLinear { p } => Ok(std::iter::once(1.0).chain(x[..*p].iter().copied()).collect()),
            Link::SigmoidLinear { p, intercept } => {
                let mut z = Vec::with_capacity(p + 1);
                if *intercept {
                    z.push(1.0);
                }
                z.extend_from_slice(&x[..*p]);
                Ok(z)
            }
            Link::IdentityConstant => Ok(vec![1.0]),
            Link::PowerProduct { p, theta0: Theta0Scale::Log } => {
                if x[..*p].iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::InvalidParameter(
                        "power-product link needs positive covariates".into(),
                    ));
                }
                Ok(std::iter::once(1.0).chain(x[..*p].iter().map(|v| v.ln())).collect())
            }
            Link::Sum { terms } if self.is_linear_in_theta() => {
                let mut z = Vec::new();
                for t in terms {
                    z.extend(t.design(x)?);
                }
                Ok(z)
            }
            _ => Err(Error::Unsupported("link has no linear design".into())),
        }
    }

    /// h(x, θ).
    pub fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        self.check(x, theta)?;
        if let Link::Sum { terms } = self {
            let mut off = 0;
            let mut total = 0.0;
            for t in terms {
                let d = t.param_dim();
                total += t.eval(x, &theta[off..off + d])?;
                off += d;
            }
            return Ok(total);
        }
        if let Link::PowerProduct { p, theta0: Theta0Scale::Linear } = self {
            let eta = theta[0].ln()
                + theta[1..].iter().zip(&x[..*p]).map(|(t, f)| t * f.ln()).sum::<f64>();
            return Ok(eta.exp());
        }
        let z = self.design(x)?;
        let eta: f64 = z.iter().zip(theta).map(|(a, b)| a * b).sum();
        Ok(match self.inverse_link().expect("handled above") {
            InverseLink::Identity => eta,
            InverseLink::Exp => eta.exp(),
            InverseLink::Logistic => sigmoid(eta),
        })
    }

    /// ∂h/∂θ.
    pub fn grad_theta(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check(x, theta)?;
        match self {
            Link::Sum { terms } => {
                let mut g = Vec::with_capacity(theta.len());
                let mut off = 0;
                for t in terms {
                    let d = t.param_dim();
                    g.extend(t.grad_theta(x, &theta[off..off + d])?);
                    off += d;
                }
                Ok(g)
            }
            Link::PowerProduct { p, theta0: Theta0Scale::Linear } => {
                let h = self.eval(x, theta)?;
                let mut g = vec![h / theta[0]];
                g.extend(x[..*p].iter().map(|f| h * f.ln()));
                Ok(g)
            }
            _ => {
                let z = self.design(x)?;
                let eta: f64 = z.iter().zip(theta).map(|(a, b)| a * b).sum();
                let scale = match self.inverse_link().expect("handled above") {
                    InverseLink::Identity => 1.0,
                    InverseLink::Exp => eta.exp(),
                    InverseLink::Logistic => {
                        let s = sigmoid(eta);
                        s * (1.0 - s)
                    }
                };
                Ok(z.into_iter().map(|v| v * scale).collect())
            }
        }
    }

    /// ∂²h/∂θ∂θᵀ.
    pub fn hess_theta(&self, x: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, theta)?;
        let d = theta.len();
        match self {
            Link::Sum { terms } => {
                let mut h = DMatrix::zeros(d, d);
                let mut off = 0;
                for t in terms {
                    let k = t.param_dim();
                    let block = t.hess_theta(x, &theta[off..off + k])?;
                    h.view_mut((off, off), (k, k)).copy_from(&block);
                    off += k;
                }
                Ok(h)
            }
            Link::PowerProduct { p, theta0: Theta0Scale::Linear } => {
                let h = self.eval(x, theta)?;
                let t0 = theta[0];
                let logs: Vec<f64> = x[..*p].iter().map(|f| f.ln()).collect();
                Ok(DMatrix::from_fn(d, d, |i, j| match (i, j) {
                    (0, 0) => 0.0,
                    (0, j) => h * logs[j - 1] / t0,
                    (i, 0) => h * logs[i - 1] / t0,
                    (i, j) => h * logs[i - 1] * logs[j - 1],
                }))
            }
            _ => {
                let z = self.design(x)?;
                let eta: f64 = z.iter().zip(theta).map(|(a, b)| a * b).sum();
                let scale = match self.inverse_link().expect("handled above") {
                    InverseLink::Identity => 0.0,
                    InverseLink::Exp => eta.exp(),
                    InverseLink::Logistic => {
                        let s = sigmoid(eta);
                        s * (1.0 - s) * (1.0 - 2.0 * s)
                    }
                };
                Ok(DMatrix::from_fn(d, d, |i, j| scale * z[i] * z[j]))
            }
        }
    }

    /// Whether `value` is an admissible output of this link.
    pub fn in_range(&self, value: f64) -> bool {
        match self {
            Link::SigmoidLinear { .. } => value > 0.0 && value < 1.0,
            Link::LogLinear { .. } | Link::PowerProduct { .. } => value > 0.0,
            _ => value.is_finite(),
        }
    }
}

/// h(x_i, θ) over a fixed list of covariates, with the design rows cached
/// when h = g(zᵀθ).
pub struct LinkEvaluator<'a> {
    link: &'a Link,
    xs: &'a [Vec<f64>],
    design: Option<(InverseLink, DMatrix<f64>)>,
}

impl<'a> LinkEvaluator<'a> {
    pub fn new(link: &'a Link, xs: &'a [Vec<f64>]) -> Result<Self> {
        let design = match link.inverse_link() {
            Some(g) => {
                let mut z = DMatrix::zeros(xs.len(), link.param_dim());
                for (i, x) in xs.iter().enumerate() {
                    z.row_mut(i).copy_from_slice(&link.design(x)?);
                }
                Some((g, z))
            }
            None => None,
        };
        Ok(LinkEvaluator { link, xs, design })
    }

    pub fn link(&self) -> &Link {
        self.link
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i]
    }

    /// Cached inverse link and design matrix (rows z_i), when available.
    pub fn design(&self) -> Option<(InverseLink, &DMatrix<f64>)> {
        self.design.as_ref().map(|(g, z)| (*g, z))
    }

    /// z_iᵀθ; only meaningful when [`Self::design`] is `Some`.
    pub fn eta(&self, i: usize, theta: &[f64]) -> f64 {
        let (_, z) = self.design.as_ref().expect("design-form link");
        theta.iter().enumerate().map(|(c, t)| z[(i, c)] * t).sum()
    }

    /// h(x_i, θ), or NaN when the link cannot be evaluated there.
    pub fn eval(&self, i: usize, theta: &[f64]) -> f64 {
        match &self.design {
            Some((g, _)) => {
                let eta = self.eta(i, theta);
                match g {
                    InverseLink::Identity => eta,
                    InverseLink::Exp => eta.exp(),
                    InverseLink::Logistic => sigmoid(eta),
                }
            }
            None => self.link.eval(&self.xs[i], theta).unwrap_or(f64::NAN),
        }
    }
}

/// Axis-aligned sampling box for covariates or parameters.
pub type Bounds = [(f64, f64)];

fn draw(bounds: &Bounds, rng: &mut seed::Rng) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect()
}

/// Empirical uniform-Lipschitz witness: max of |h(x,θ) − h(x,θ')| / ‖θ − θ'‖ over
/// `points` random (x, θ, θ') triples from the given boxes.
pub fn lipschitz_witness(
    link: &Link,
    x_box: &Bounds,
    theta_box: &Bounds,
    points: usize,
    rng_seed: u64,
) -> Result<f64> {
    if theta_box.len() != link.param_dim() {
        return Err(Error::DimensionMismatch("theta box vs param_dim".into()));
    }
    let mut rng = seed::rng(rng_seed);
    let mut best: f64 = 0.0;
    for _ in 0..points {
        let x = draw(x_box, &mut rng);
        let a = draw(theta_box, &mut rng);
        let b = draw(theta_box, &mut rng);
        let dist = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        let diff = (link.eval(&x, &a)? - link.eval(&x, &b)?).abs();
        best = best.max(diff / dist);
    }
    Ok(best)
}

/// Fraction of `x_grid` points where h(x,θ) and h(x,θ') agree within `tol`.
///
/// A grid proxy for complete identifiability: it can falsify but never certify.
pub fn coincidence_fraction(
    link: &Link,
    theta: &[f64],
    theta_other: &[f64],
    x_grid: &[Vec<f64>],
    tol: f64,
) -> Result<f64> {
    if x_grid.is_empty() {
        return Err(Error::InvalidParameter("empty x grid".into()));
    }
    let mut hits = 0usize;
    for x in x_grid {
        if (link.eval(x, theta)? - link.eval(x, theta_other)?).abs() < tol {
            hits += 1;
        }
    }
    Ok(hits as f64 / x_grid.len() as f64)
}
