//! Conditional density families f(y | μ, φ).
//!
//! `μ` is the mean parameter (success probability for the binomial) and `φ` the
//! dispersion: the variance for the mean-variance normal, the size parameter for
//! the negative binomial (Var = μ + μ²/φ). Families without a dispersion ignore
//! the `φ` argument.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_choose, ln_factorial, ln_rising};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Kernel {
    /// Normal with known variance `sigma2`; μ is the mean.
    NormalFixed { sigma2: f64 },
    /// Normal with φ = variance.
    Normal,
    Poisson,
    /// Binomial with `n` trials; μ is the success probability.
    Binomial {
        #[serde(rename = "N")]
        n: u32,
    },
    #[serde(rename = "negbin")]
    NegBin,
}

/// Response support of a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Real,
    /// Nonnegative integers, bounded above when `Some`.
    Count(Option<u64>),
}

/// Which partial derivative of the density to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partial {
    Mu,
    Phi,
    MuMu,
    PhiPhi,
    MuPhi,
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::NormalFixed { .. } => "normal_fixed",
            Kernel::Normal => "normal",
            Kernel::Poisson => "poisson",
            Kernel::Binomial { .. } => "binomial",
            Kernel::NegBin => "negbin",
        }
    }

    pub fn has_dispersion(&self) -> bool {
        matches!(self, Kernel::Normal | Kernel::NegBin)
    }

    pub fn support(&self) -> Support {
        match self {
            Kernel::NormalFixed { .. } | Kernel::Normal => Support::Real,
            Kernel::Poisson | Kernel::NegBin => Support::Count(None),
            Kernel::Binomial { n } => Support::Count(Some(*n as u64)),
        }
    }

    /// Checks the descriptor itself (e.g. σ² > 0, N ≥ 1).
    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::NormalFixed { sigma2 } if !(*sigma2 > 0.0) || !sigma2.is_finite() => Err(
                Error::InvalidParameter(format!("normal_fixed sigma2 = {sigma2} must be > 0")),
            ),
            Kernel::Binomial { n } if *n == 0 => {
                Err(Error::InvalidParameter("binomial N must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Checks that (μ, φ) lies in the valid region.
    pub fn check_params(&self, mu: f64, phi: f64) -> Result<()> {
        let ok = match self {
            Kernel::NormalFixed { .. } => mu.is_finite(),
            Kernel::Normal => mu.is_finite() && phi > 0.0 && phi.is_finite(),
            Kernel::Poisson => mu > 0.0 && mu.is_finite(),
            Kernel::Binomial { .. } => (0.0..=1.0).contains(&mu),
            Kernel::NegBin => mu > 0.0 && mu.is_finite() && phi > 0.0 && phi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "{}: (mu, phi) = ({mu}, {phi}) outside the valid region",
                self.name()
            )))
        }
    }

    pub fn check_response(&self, y: f64) -> Result<()> {
        let ok = match self.support() {
            Support::Real => y.is_finite(),
            Support::Count(max) => {
                y >= 0.0 && y.fract() == 0.0 && y.is_finite() && max.is_none_or(|m| y <= m as f64)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::OutsideSupport(format!("{}: y = {y}", self.name())))
        }
    }

    fn variance_param(&self, phi: f64) -> f64 {
        match self {
            Kernel::NormalFixed { sigma2 } => *sigma2,
            _ => phi,
        }
    }

    /// log f(y | μ, φ) without validation; callers guarantee the valid region.
    pub fn ln_density_unchecked(&self, y: f64, mu: f64, phi: f64) -> f64 {
        match self {
            Kernel::NormalFixed { .. } | Kernel::Normal => {
                let v = self.variance_param(phi);
                let r = y - mu;
                -0.5 * (LN_2PI + v.ln()) - r * r / (2.0 * v)
            }
            Kernel::Poisson => {
                if y == 0.0 {
                    -mu
                } else {
                    y * mu.ln() - mu - ln_factorial(y)
                }
            }
            Kernel::Binomial { n } => {
                let n = *n as f64;
                let a = if y == 0.0 { 0.0 } else { y * mu.ln() };
                let b = if y == n { 0.0 } else { (n - y) * (-mu).ln_1p() };
                ln_choose(n, y) + a + b
            }
            Kernel::NegBin => {
                let log_ratio = if y == 0.0 { 0.0 } else { y * (mu.ln() - (phi + mu).ln()) };
                ln_rising(phi, y) - ln_factorial(y) + log_ratio - phi * (mu / phi).ln_1p()
            }
        }
    }

    pub fn log_density(&self, y: f64, mu: f64, phi: f64) -> Result<f64> {
        self.check_params(mu, phi)?;
        self.check_response(y)?;
        Ok(self.ln_density_unchecked(y, mu, phi))
    }

    pub fn density(&self, y: f64, mu: f64, phi: f64) -> Result<f64> {
        self.log_density(y, mu, phi).map(f64::exp)
    }

    /// Partial derivative of the density (not the log-density).
    pub fn derivative(&self, which: Partial, y: f64, mu: f64, phi: f64) -> Result<f64> {
        self.check_params(mu, phi)?;
        self.check_response(y)?;
        let needs_phi = matches!(which, Partial::Phi | Partial::PhiPhi | Partial::MuPhi);
        if needs_phi && !self.has_dispersion() {
            return Err(Error::Unsupported(format!(
                "{} has no dispersion parameter",
                self.name()
            )));
        }
        if let Kernel::Binomial { n } = self {
            return Ok(binomial_derivative(*n, which, y, mu));
        }
        let f = self.ln_density_unchecked(y, mu, phi).exp();
        let (l_mu, l_phi, l_mumu, l_phiphi, l_muphi) = self.log_partials(y, mu, phi);
        Ok(f * match which {
            Partial::Mu => l_mu,
            Partial::Phi => l_phi,
            Partial::MuMu => l_mumu + l_mu * l_mu,
            Partial::PhiPhi => l_phiphi + l_phi * l_phi,
            Partial::MuPhi => l_muphi + l_mu * l_phi,
        })
    }

    pub fn d_mu(&self, y: f64, mu: f64, phi: f64) -> Result<f64> {
        self.derivative(Partial::Mu, y, mu, phi)
    }
    pub fn d_phi(&self, y: f64, mu: f64, phi: f64) -> Result<f64> {
        self.derivative(Partial::Phi, y, mu, phi)
    }
    pub fn d_mu2(&self, y: f64, mu: f64, phi: f64) -> Result<f64> {
        self.derivative(Partial::MuMu, y, mu, phi)
    }
    pub fn d_phi2(&self, y: f64, mu: f64, phi: f64) -> Result<f64> {
        self.derivative(Partial::PhiPhi, y, mu, phi)
    }
    pub fn d_mu_phi(&self, y: f64, mu: f64, phi: f64) -> Result<f64> {
        self.derivative(Partial::MuPhi, y, mu, phi)
    }

    /// (∂/∂μ, ∂²/∂μ²) of the log-density, without validation.
    pub fn log_score_mu(&self, y: f64, mu: f64, phi: f64) -> (f64, f64) {
        match self {
            Kernel::NormalFixed { .. } | Kernel::Normal => {
                let v = self.variance_param(phi);
                ((y - mu) / v, -1.0 / v)
            }
            Kernel::Poisson => (y / mu - 1.0, -y / (mu * mu)),
            Kernel::Binomial { n } => {
                let m = *n as f64 - y;
                let q = 1.0 - mu;
                let (a, b) = if y == 0.0 { (0.0, 0.0) } else { (y / mu, y / (mu * mu)) };
                let (c, d) = if m == 0.0 { (0.0, 0.0) } else { (m / q, m / (q * q)) };
                (a - c, -b - d)
            }
            Kernel::NegBin => {
                let s = phi + mu;
                (y / mu - (y + phi) / s, -y / (mu * mu) + (y + phi) / (s * s))
            }
        }
    }

    /// (ℓ_μ, ℓ_φ, ℓ_μμ, ℓ_φφ, ℓ_μφ) of the log-density; φ terms are zero when absent.
    fn log_partials(&self, y: f64, mu: f64, phi: f64) -> (f64, f64, f64, f64, f64) {
        match self {
            Kernel::NormalFixed { sigma2 } => ((y - mu) / sigma2, 0.0, -1.0 / sigma2, 0.0, 0.0),
            Kernel::Normal => {
                let r = y - mu;
                let v = phi;
                (
                    r / v,
                    -0.5 / v + r * r / (2.0 * v * v),
                    -1.0 / v,
                    0.5 / (v * v) - r * r / (v * v * v),
                    -r / (v * v),
                )
            }
            Kernel::Poisson => (y / mu - 1.0, 0.0, -y / (mu * mu), 0.0, 0.0),
            Kernel::NegBin => {
                let s = phi + mu;
                // ψ(y+φ) − ψ(φ) and ψ'(y+φ) − ψ'(φ) as finite sums over integer y
                let (mut dg, mut tg) = (0.0, 0.0);
                let mut k = 0.0;
                while k < y {
                    let t = 1.0 / (phi + k);
                    dg += t;
                    tg -= t * t;
                    k += 1.0;
                }
                (
                    y / mu - (y + phi) / s,
                    dg + (phi / s).ln() + 1.0 - (y + phi) / s,
                    -y / (mu * mu) + (y + phi) / (s * s),
                    tg + 1.0 / phi - 1.0 / s - (mu - y) / (s * s),
                    (y - mu) / (s * s),
                )
            }
            Kernel::Binomial { .. } => unreachable!("binomial derivatives are polynomial"),
        }
    }

    pub fn mean(&self, mu: f64) -> f64 {
        match self {
            Kernel::Binomial { n } => *n as f64 * mu,
            _ => mu,
        }
    }

    pub fn variance(&self, mu: f64, phi: f64) -> f64 {
        match self {
            Kernel::NormalFixed { sigma2 } => *sigma2,
            Kernel::Normal => phi,
            Kernel::Poisson => mu,
            Kernel::Binomial { n } => *n as f64 * mu * (1.0 - mu),
            Kernel::NegBin => mu + mu * mu / phi,
        }
    }

    /// Draws y ~ f(· | μ, φ).
    pub fn sample<R: Rng + ?Sized>(&self, mu: f64, phi: f64, rng: &mut R) -> Result<f64> {
        self.check_params(mu, phi)?;
        let bad = |e: &dyn std::fmt::Display| Error::InvalidParameter(e.to_string());
        Ok(match self {
            Kernel::NormalFixed { .. } | Kernel::Normal => {
                let sd = self.variance_param(phi).sqrt();
                Normal::new(mu, sd).map_err(|e| bad(&e))?.sample(rng)
            }
            Kernel::Poisson => poisson(mu, rng)?,
            Kernel::Binomial { n } => {
                Binomial::new(*n as u64, mu).map_err(|e| bad(&e))?.sample(rng) as f64
            }
            Kernel::NegBin => {
                let lambda = Gamma::new(phi, mu / phi).map_err(|e| bad(&e))?.sample(rng);
                poisson(lambda, rng)?
            }
        })
    }

    /// Smallest Y with P(y > Y) < `tail` for count families, from a Chernoff bound.
    /// Returns `None` for continuous families.
    pub fn count_upper(&self, mu: f64, phi: f64, tail: f64) -> Option<u64> {
        match self {
            Kernel::NormalFixed { .. } | Kernel::Normal => None,
            Kernel::Binomial { n } => Some(*n as u64),
            Kernel::Poisson | Kernel::NegBin => {
                let log_tail = tail.ln();
                let bound = |t: f64| -> f64 {
                    match self {
                        Kernel::Poisson => poisson_chernoff(mu, t),
                        _ => negbin_chernoff(mu, phi, t),
                    }
                };
                let mut hi = (mu.ceil() + 1.0).max(2.0);
                while bound(hi) >= log_tail {
                    hi *= 2.0;
                    if hi > 1e12 {
                        return Some(hi as u64);
                    }
                }
                let mut lo = mu.ceil().max(0.0);
                while hi - lo > 1.0 {
                    let mid = ((lo + hi) / 2.0).floor();
                    if bound(mid) < log_tail {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                // bound is on P(y >= t); Y = t - 1 gives P(y > Y) < tail
                Some((hi as u64).saturating_sub(1))
            }
        }
    }
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<f64> {
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    Poisson::new(lambda)
        .map(|d| d.sample(rng))
        .map_err(|e| Error::InvalidParameter(e.to_string()))
}

/// ln P(Y ≥ t) upper bound for Poisson(μ), t > μ.
fn poisson_chernoff(mu: f64, t: f64) -> f64 {
    if t <= mu {
        return 0.0;
    }
    -mu + t * (1.0 + (mu / t).ln())
}

/// ln P(Y ≥ t) upper bound for NB(μ, φ): min over s of ln M(s) − s t.
fn negbin_chernoff(mu: f64, phi: f64, t: f64) -> f64 {
    if t <= mu {
        return 0.0;
    }
    // M(s) = (φ / (φ + μ − μ e^s))^φ for e^s < (φ + μ)/μ
    let s_max = ((phi + mu) / mu).ln();
    let f = |s: f64| {
        let inner = phi + mu - mu * s.exp();
        if inner <= 0.0 {
            f64::INFINITY
        } else {
            phi * (phi / inner).ln() - s * t
        }
    };
    // golden-section search on the convex exponent
    let (mut a, mut b) = (0.0, s_max * (1.0 - 1e-12));
    let g = 0.618_033_988_749_894_9;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..200 {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    f((a + b) / 2.0).min(0.0)
}

fn binomial_derivative(n: u32, which: Partial, y: f64, q: f64) -> f64 {
    // f(q) = C q^y (1-q)^(n-y); derivatives of the polynomial directly
    let n = n as f64;
    let c = ln_choose(n, y).exp();
    let m = n - y;
    let pw = |base: f64, e: f64| if e < 0.0 { 0.0 } else { base.powf(e) };
    let term = |a: f64, b: f64| pw(q, a) * pw(1.0 - q, b);
    match which {
        Partial::Mu => c * (y * term(y - 1.0, m) - m * term(y, m - 1.0)),
        Partial::MuMu => {
            c * (y * (y - 1.0) * term(y - 2.0, m) - 2.0 * y * m * term(y - 1.0, m - 1.0)
                + m * (m - 1.0) * term(y, m - 2.0))
        }
        _ => unreachable!("phi derivatives rejected earlier"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    const NB: Kernel = Kernel::NegBin;

    #[test]
    fn closed_form_values() {
        let p = Kernel::Poisson.density(0.0, 2.0, 0.0).unwrap();
        assert!((p - (-2f64).exp()).abs() < 1e-15);
        assert!((p - 0.135_335).abs() < 1e-6);
        let b = Kernel::Binomial { n: 1 }.density(1.0, 0.3, 0.0).unwrap();
        assert!((b - 0.3).abs() < 1e-15);
        let nb = NB.density(0.0, 2.0, 1.0).unwrap();
        assert!((nb - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exp_log_density_consistent() {
        for &(k, y, mu, phi) in &[
            (NB, 7.0, 3.2, 0.7),
            (Kernel::Poisson, 4.0, 1.5, 0.0),
            (Kernel::Normal, 0.3, -1.0, 2.0),
            (Kernel::Binomial { n: 5 }, 2.0, 0.4, 0.0),
        ] {
            let d = k.density(y, mu, phi).unwrap();
            let l = k.log_density(y, mu, phi).unwrap();
            assert!(((l.exp() - d) / d).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(Kernel::Poisson.density(1.0, -1.0, 0.0).is_err());
        assert!(Kernel::Poisson.density(1.5, 1.0, 0.0).is_err());
        assert!(Kernel::Binomial { n: 2 }.density(3.0, 0.5, 0.0).is_err());
        assert!(NB.density(1.0, 1.0, 0.0).is_err());
        assert!(matches!(
            Kernel::Binomial { n: 3 }.d_phi(1.0, 0.5, 0.0),
            Err(Error::Unsupported(_))
        ));
        assert!(Kernel::NormalFixed { sigma2: 0.0 }.validate().is_err());
    }

    #[test]
    fn normal_score_vanishes_at_mean() {
        let k = Kernel::NormalFixed { sigma2: 2.0 };
        assert_eq!(k.d_mu(1.3, 1.3, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn log_score_matches_density_derivatives() {
        let cases = [
            (Kernel::Normal, 0.3, -0.2, 1.7),
            (Kernel::Poisson, 4.0, 2.5, 0.0),
            (Kernel::Binomial { n: 5 }, 2.0, 0.35, 0.0),
            (Kernel::Binomial { n: 5 }, 0.0, 0.35, 0.0),
            (NB, 6.0, 3.0, 1.2),
        ];
        for (k, y, mu, phi) in cases {
            let f = k.density(y, mu, phi).unwrap();
            let (l1, l2) = k.log_score_mu(y, mu, phi);
            let d1 = k.d_mu(y, mu, phi).unwrap();
            let d2 = k.d_mu2(y, mu, phi).unwrap();
            assert!((f * l1 - d1).abs() < 1e-12, "{k:?}");
            assert!((f * (l2 + l1 * l1) - d2).abs() < 1e-12, "{k:?}");
        }
    }

    #[test]
    fn heat_equation() {
        let k = Kernel::Normal;
        for &(y, mu, v) in &[(0.0, 0.0, 1.0), (1.7, -0.4, 0.3), (-2.0, 1.0, 4.5)] {
            let lhs = k.d_mu2(y, mu, v).unwrap();
            let rhs = k.d_phi(y, mu, v).unwrap();
            assert!((lhs - 2.0 * rhs).abs() < 1e-10, "{lhs} vs 2 * {rhs}");
        }
    }

    #[test]
    fn negbin_recurrence_at_reference_point() {
        let (y, mu, phi) = (3.0, 2.0, 1.5);
        let lhs = NB.d_mu(y, mu, phi).unwrap();
        let rhs = phi / mu
            * (NB.density(y, mu * (phi + 1.0) / phi, phi + 1.0).unwrap()
                - NB.density(y, mu, phi).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
        // finite-difference oracle
        let h = 1e-6;
        let fd = (NB.density(y, mu + h, phi).unwrap() - NB.density(y, mu - h, phi).unwrap()) / (2.0 * h);
        assert!((fd - lhs).abs() < 1e-8);
    }

    #[test]
    fn binomial_boundary_derivatives() {
        let k = Kernel::Binomial { n: 1 };
        // f(1|q) = q, f(0|q) = 1 - q
        assert_eq!(k.d_mu(1.0, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(k.d_mu(0.0, 1.0, 0.0).unwrap(), -1.0);
        assert_eq!(k.d_mu2(1.0, 0.5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn count_upper_bounds_the_tail() {
        for &(k, mu, phi) in &[(Kernel::Poisson, 4.0, 0.0), (NB, 2.0, 0.5), (NB, 30.0, 9.0)] {
            let ymax = k.count_upper(mu, phi, 1e-12).unwrap();
            let mass: f64 = (0..=ymax).map(|y| k.density(y as f64, mu, phi).unwrap()).sum();
            assert!(1.0 - mass < 1e-11, "{} tail {}", k.name(), 1.0 - mass);
        }
        assert_eq!(Kernel::Binomial { n: 4 }.count_upper(0.3, 0.0, 1e-12), Some(4));
        assert_eq!(Kernel::Normal.count_upper(0.0, 1.0, 1e-12), None);
    }

    #[test]
    fn degenerate_binomial_sample() {
        let mut rng = seed::rng(1);
        let k = Kernel::Binomial { n: 1 };
        for _ in 0..100 {
            assert_eq!(k.sample(0.0, 0.0, &mut rng).unwrap(), 0.0);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let draw = |s| {
            let mut rng = seed::rng(s);
            (0..10).map(|_| NB.sample(2.0, 0.5, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn json_schema() {
        let k: Kernel = serde_json::from_str(r#"{"family":"binomial","N":3}"#).unwrap();
        assert_eq!(k, Kernel::Binomial { n: 3 });
        let k: Kernel = serde_json::from_str(r#"{"family":"normal_fixed","sigma2":1.0}"#).unwrap();
        assert_eq!(k, Kernel::NormalFixed { sigma2: 1.0 });
        let k: Kernel = serde_json::from_str(r#"{"family":"negbin"}"#).unwrap();
        assert_eq!(k, NB);
        assert_eq!(serde_json::to_string(&Kernel::Poisson).unwrap(), r#"{"family":"poisson"}"#);
    }
}
