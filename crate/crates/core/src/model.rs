//! Mixture of regression models f_G(y|x) = Σ_j p_j f(y | h1(x, θ1j), h2(x, θ2j)).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, Support};
use crate::links::Link;
use crate::measures::{self, Atom, MixingMeasure, ParamBox};
use crate::quad;
use crate::seed;
use crate::special::log_sum_exp;

/// Tail mass allowed when truncating count supports.
pub const COUNT_TAIL: f64 = 1e-12;
/// Continuous inner integrals span μ ± this many standard deviations.
pub const NORMAL_SPAN_SD: f64 = 12.0;
const QUAD_TOL: f64 = 1e-10;

/// How the dispersion parameter φ of each component is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Dispersion {
    /// The kernel has no dispersion parameter.
    #[default]
    None,
    /// One known φ shared by every component.
    Fixed { phi: f64 },
    /// φ_j = h2(x, θ2j).
    Link { link: Link },
}

/// Everything about a model except its mixing measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub kernel: Kernel,
    pub link1: Link,
    #[serde(default)]
    pub dispersion: Dispersion,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<ParamBox>,
}

impl ModelShape {
    pub fn new(kernel: Kernel, link1: Link, dispersion: Dispersion) -> Self {
        ModelShape {
            kernel,
            link1,
            dispersion,
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: ParamBox) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.link1.validate()?;
        match (&self.dispersion, self.kernel.has_dispersion()) {
            (Dispersion::None, true) => {
                return Err(Error::InvalidParameter(format!(
                    "{} needs a dispersion specification",
                    self.kernel.name()
                )))
            }
            (Dispersion::Fixed { .. } | Dispersion::Link { .. }, false) => {
                return Err(Error::InvalidParameter(format!(
                    "{} has no dispersion parameter",
                    self.kernel.name()
                )))
            }
            (Dispersion::Fixed { phi }, true) if !(*phi > 0.0) => {
                return Err(Error::InvalidParameter(format!("fixed phi = {phi} must be > 0")))
            }
            (Dispersion::Link { link }, _) => link.validate()?,
            _ => {}
        }
        if let Some(b) = &self.bounds {
            b.validate()?;
            if b.dims() != self.theta_dims() {
                return Err(Error::DimensionMismatch(format!(
                    "box dims {:?} vs model theta dims {:?}",
                    b.dims(),
                    self.theta_dims()
                )));
            }
        }
        Ok(())
    }

    /// (dim θ1, dim θ2).
    pub fn theta_dims(&self) -> (usize, usize) {
        let d2 = match &self.dispersion {
            Dispersion::Link { link } => link.param_dim(),
            _ => 0,
        };
        (self.link1.param_dim(), d2)
    }

    /// Covariate dimension required by the links (0 when no link reads x).
    pub fn covariate_dim(&self) -> usize {
        let d2 = match &self.dispersion {
            Dispersion::Link { link } => link.covariate_dim().unwrap_or(0),
            _ => 0,
        };
        self.link1.covariate_dim().unwrap_or(0).max(d2)
    }

    /// Kernel parameters (μ, φ) of an atom at covariate `x`, validated.
    pub fn component_params(&self, x: &[f64], atom: &Atom) -> Result<(f64, f64)> {
        let mu = self.link1.eval(x, &atom.theta1)?;
        let phi = match &self.dispersion {
            Dispersion::None => 0.0,
            Dispersion::Fixed { phi } => *phi,
            Dispersion::Link { link } => link.eval(x, &atom.theta2)?,
        };
        self.kernel.check_params(mu, phi)?;
        Ok((mu, phi))
    }

    pub fn check_measure(&self, g: &MixingMeasure) -> Result<()> {
        if g.dims() != self.theta_dims() {
            return Err(Error::DimensionMismatch(format!(
                "measure atom dims {:?} vs model theta dims {:?}",
                g.dims(),
                self.theta_dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRegressionModel {
    #[serde(flatten)]
    pub shape: ModelShape,
    pub measure: MixingMeasure,
}

impl MixtureRegressionModel {
    pub fn new(shape: ModelShape, measure: MixingMeasure) -> Result<Self> {
        shape.validate()?;
        shape.check_measure(&measure)?;
        Ok(MixtureRegressionModel { shape, measure })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.shape.kernel
    }

    /// (μ_j, φ_j) for every atom at `x`.
    pub fn component_params(&self, x: &[f64]) -> Result<Vec<(f64, f64)>> {
        self.measure
            .atoms()
            .iter()
            .map(|a| self.shape.component_params(x, a))
            .collect()
    }

    /// ln p_j + ln f_j(y|x) for every component.
    pub fn component_log_terms(&self, y: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.shape.kernel.check_response(y)?;
        self.measure
            .atoms()
            .iter()
            .map(|a| {
                let (mu, phi) = self.shape.component_params(x, a)?;
                Ok(a.weight.ln() + self.shape.kernel.ln_density_unchecked(y, mu, phi))
            })
            .collect()
    }

    pub fn log_conditional_density(&self, y: f64, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.component_log_terms(y, x)?))
    }

    pub fn conditional_density(&self, y: f64, x: &[f64]) -> Result<f64> {
        self.log_conditional_density(y, x).map(f64::exp)
    }

    /// Σ_i log f_G(y_i | x_i).
    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidParameter("empty dataset".into()));
        }
        let mut total = 0.0;
        for i in 0..data.len() {
            let l = self.log_conditional_density(data.y[i], &data.x[i])?;
            if !l.is_finite() {
                return Err(Error::ZeroDensity { index: i });
            }
            total += l;
        }
        Ok(total)
    }

    /// Draws n observations: x from `px`, the component from the weights, y from the kernel.
    pub fn simulate(&self, px: &CovariateDistribution, n: usize, rng_seed: u64) -> Result<Simulated> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        px.validate()?;
        let mut rng = seed::rng(rng_seed);
        let weights = self.measure.weights();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let xi = px.sample(&mut rng);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut j = weights.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    j = k;
                    break;
                }
            }
            // a zero-weight last component is never drawn
            while weights[j] == 0.0 && j > 0 {
                j -= 1;
            }
            let (mu, phi) = self.shape.component_params(&xi, &self.measure.atoms()[j])?;
            y.push(self.shape.kernel.sample(mu, phi, &mut rng)?);
            x.push(xi);
            labels.push(j);
        }
        Ok(Simulated {
            data: Dataset::new(x, y)?,
            labels,
        })
    }
}

/// Simulated data with the generating component of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: Dataset,
    pub labels: Vec<usize>,
}

/// Observations (x_i, y_i).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} x rows vs {} y values", x.len(), y.len())));
        }
        if let Some(first) = x.first() {
            let p = first.len();
            if x.iter().any(|r| r.len() != p) {
                return Err(Error::DimensionMismatch("ragged covariate rows".into()));
            }
        }
        if x.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dataset contains missing or non-finite values".into()));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Rows at `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Concatenation of `self` with itself `times` times.
    pub fn repeated(&self, times: usize) -> Dataset {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.subset(&idx)
    }

    /// Checks every response against the kernel support.
    pub fn check_support(&self, kernel: &Kernel) -> Result<()> {
        self.y.iter().try_for_each(|&y| kernel.check_response(y))
    }

    /// CSV with header `x1,…,xp,y`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let p = self.covariate_dim();
        let mut header: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        wr.write_record(&header)?;
        for (x, y) in self.x.iter().zip(&self.y) {
            let row: Vec<String> = x.iter().chain(std::iter::once(y)).map(|v| format!("{v:?}")).collect();
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let cols: Vec<&str> = header.iter().map(str::trim).collect();
        let Some((last, xs)) = cols.split_last() else {
            return Err(Error::InvalidParameter("CSV has no columns".into()));
        };
        if *last != "y" || xs.iter().enumerate().any(|(k, c)| *c != format!("x{}", k + 1)) {
            return Err(Error::InvalidParameter(format!(
                "CSV header must be x1..xp,y; got {}",
                cols.join(",")
            )));
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidParameter(format!("row {}: {e}", line + 1)))?;
            if vals.len() != cols.len() {
                return Err(Error::DimensionMismatch(format!("row {} has {} fields", line + 1, vals.len())));
            }
            y.push(vals[vals.len() - 1]);
            x.push(vals[..vals.len() - 1].to_vec());
        }
        if y.is_empty() {
            return Err(Error::InvalidParameter("dataset has no rows".into()));
        }
        Dataset::new(x, y)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Distribution P_X of the covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateDistribution {
    /// Independent uniforms on [lo_k, hi_k].
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    /// Independent log-uniforms on [lo_k, hi_k], lo_k > 0.
    LogUniform { lo: Vec<f64>, hi: Vec<f64> },
    /// Uniform draws from the given rows.
    Empirical { rows: Vec<Vec<f64>> },
}

impl CovariateDistribution {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        CovariateDistribution::Uniform {
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    /// Degenerate distribution for models whose links ignore x.
    pub fn none() -> Self {
        CovariateDistribution::Uniform { lo: vec![], hi: vec![] }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovariateDistribution::Uniform { lo, .. } | CovariateDistribution::LogUniform { lo, .. } => lo.len(),
            CovariateDistribution::Empirical { rows } => rows.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CovariateDistribution::Uniform { lo, hi } | CovariateDistribution::LogUniform { lo, hi } => {
                if lo.len() != hi.len() {
                    return Err(Error::DimensionMismatch("covariate lo/hi lengths".into()));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                    return Err(Error::InvalidParameter("covariate bounds need lo < hi".into()));
                }
                if matches!(self, CovariateDistribution::LogUniform { .. }) && lo.iter().any(|l| !(*l > 0.0)) {
                    return Err(Error::InvalidParameter("log-uniform bounds must be positive".into()));
                }
                Ok(())
            }
            CovariateDistribution::Empirical { rows } => {
                if rows.is_empty() {
                    return Err(Error::InvalidParameter("empirical covariate distribution has no rows".into()));
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, rng: &mut seed::Rng) -> Vec<f64> {
        match self {
            CovariateDistribution::Uniform { lo, hi } => {
                lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..*h)).collect()
            }
            CovariateDistribution::LogUniform { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| rng.random_range(l.ln()..h.ln()).exp())
                .collect(),
            CovariateDistribution::Empirical { rows } => rows[rng.random_range(0..rows.len())].clone(),
        }
    }

    /// `count` draws from a fresh stream seeded by `rng_seed`.
    pub fn sample_many(&self, count: usize, rng_seed: u64) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = seed::rng(rng_seed);
        Ok((0..count).map(|_| self.sample(&mut rng)).collect())
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub mc_points: usize,
}

impl McEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        McEstimate {
            value: mean,
            std_error: (var / m).sqrt(),
            mc_points: values.len(),
        }
    }
}

#[derive(Clone, Copy)]
enum Divergence {
    TotalVariation,
    HellingerSq,
}

impl Divergence {
    fn integrand(self, a: f64, b: f64) -> f64 {
        match self {
            Divergence::TotalVariation => 0.5 * (a - b).abs(),
            Divergence::HellingerSq => 0.5 * (a.sqrt() - b.sqrt()).powi(2),
        }
    }
}

fn check_same_support(a: &MixtureRegressionModel, b: &MixtureRegressionModel) -> Result<()> {
    let same = match (a.kernel(), b.kernel()) {
        (Kernel::Binomial { n: x }, Kernel::Binomial { n: y }) => x == y,
        (ka, kb) => ka.support() == kb.support(),
    };
    if same {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "mismatched supports: {} vs {}",
            a.kernel().name(),
            b.kernel().name()
        )))
    }
}

fn pointwise_divergence(
    a: &MixtureRegressionModel,
    b: &MixtureRegressionModel,
    x: &[f64],
    div: Divergence,
) -> Result<f64> {
    let pa = a.component_params(x)?;
    let pb = b.component_params(x)?;
    let wa = a.measure.weights();
    let wb = b.measure.weights();
    let mix = |m: &MixtureRegressionModel, params: &[(f64, f64)], w: &[f64], y: f64| -> f64 {
        params
            .iter()
            .zip(w)
            .map(|(&(mu, phi), &p)| {
                if p == 0.0 {
                    0.0
                } else {
                    p * m.kernel().ln_density_unchecked(y, mu, phi).exp()
                }
            })
            .sum()
    };
    match a.kernel().support() {
        Support::Count(_) => {
            let ymax = pa
                .iter()
                .map(|&(mu, phi)| a.kernel().count_upper(mu, phi, COUNT_TAIL))
                .chain(pb.iter().map(|&(mu, phi)| b.kernel().count_upper(mu, phi, COUNT_TAIL)))
                .map(|v| v.expect("count family"))
                .max()
                .expect("nonempty");
            let mut total = 0.0;
            for y in 0..=ymax {
                let y = y as f64;
                total += div.integrand(mix(a, &pa, &wa, y), mix(b, &pb, &wb, y));
            }
            Ok(total)
        }
        Support::Real => {
            let span = |m: &MixtureRegressionModel, params: &[(f64, f64)]| {
                params.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(mu, phi)| {
                    let sd = m.kernel().variance(mu, phi).sqrt();
                    (lo.min(mu - NORMAL_SPAN_SD * sd), hi.max(mu + NORMAL_SPAN_SD * sd))
                })
            };
            let (la, ha) = span(a, &pa);
            let (lb, hb) = span(b, &pb);
            let f = |y: f64| div.integrand(mix(a, &pa, &wa, y), mix(b, &pb, &wb, y));
            Ok(quad::integrate(f, la.min(lb), ha.max(hb), QUAD_TOL))
        }
    }
}

fn expected_divergence(
    a: &MixtureRegressionModel,
    b: &MixtureRegressionModel,
    px: &CovariateDistribution,
    mc_points: usize,
    rng_seed: u64,
    div: Divergence,
) -> Result<McEstimate> {
    check_same_support(a, b)?;
    if mc_points == 0 {
        return Err(Error::InvalidParameter("mc_points must be >= 1".into()));
    }
    let xs = px.sample_many(mc_points, rng_seed)?;
    let values = xs
        .iter()
        .map(|x| pointwise_divergence(a, b, x, div))
        .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_values(&values))
}

/// E_X V(f_A(·|X), f_B(·|X)) by Monte Carlo over X ~ `px`.
pub fn expected_total_variation(
    a: &MixtureRegressionModel,
    b: &MixtureRegressionModel,
    px: &CovariateDistribution,
    mc_points: usize,
    rng_seed: u64,
) -> Result<McEstimate> {
    expected_divergence(a, b, px, mc_points, rng_seed, Divergence::TotalVariation)
}

/// E_X d_H²(f_A(·|X), f_B(·|X)) with d_H² = ½ Σ (√f_A − √f_B)².
pub fn expected_hellinger_sq(
    a: &MixtureRegressionModel,
    b: &MixtureRegressionModel,
    px: &CovariateDistribution,
    mc_points: usize,
    rng_seed: u64,
) -> Result<McEstimate> {
    expected_divergence(a, b, px, mc_points, rng_seed, Divergence::HellingerSq)
}

/// Total variation at a single covariate value.
pub fn total_variation_at(a: &MixtureRegressionModel, b: &MixtureRegressionModel, x: &[f64]) -> Result<f64> {
    check_same_support(a, b)?;
    pointwise_divergence(a, b, x, Divergence::TotalVariation)
}

/// Measure of kernel parameters Σ p_j δ_(h1(x,θ1j), h2(x,θ2j)) at `x`.
pub fn pushforward(shape: &ModelShape, g: &MixingMeasure, x: &[f64]) -> Result<MixingMeasure> {
    let atoms = g
        .atoms()
        .iter()
        .map(|a| {
            let mut coords = vec![shape.link1.eval(x, &a.theta1)?];
            if let Dispersion::Link { link } = &shape.dispersion {
                coords.push(link.eval(x, &a.theta2)?);
            }
            Ok(Atom::new(coords, vec![], a.weight))
        })
        .collect::<Result<Vec<_>>>()?;
    MixingMeasure::new(atoms)
}

/// E_X W_r between the pushforwards of `g` and `g0` through the links.
pub fn prediction_error(
    g: &MixingMeasure,
    g0: &MixingMeasure,
    shape: &ModelShape,
    px: &CovariateDistribution,
    r: u32,
    mc_points: usize,
    rng_seed: u64,
) -> Result<McEstimate> {
    shape.check_measure(g)?;
    shape.check_measure(g0)?;
    if mc_points == 0 {
        return Err(Error::InvalidParameter("mc_points must be >= 1".into()));
    }
    let xs = px.sample_many(mc_points, rng_seed)?;
    let values = xs
        .iter()
        .map(|x| measures::wasserstein_distance(&pushforward(shape, g, x)?, &pushforward(shape, g0, x)?, r))
        .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_values(&values))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn normal_example() -> MixtureRegressionModel {
        let shape = ModelShape::new(
            Kernel::NormalFixed { sigma2: 1.0 },
            Link::Polynomial { degree: 2, p: 1 },
            Dispersion::None,
        );
        let g = MixingMeasure::from_parts(&[0.5, 0.5], &[vec![1.0, -5.0, 1.0], vec![2.0, 5.0, 2.0]], &[]).unwrap();
        MixtureRegressionModel::new(shape, g).unwrap()
    }

    fn bernoulli(points: &[(f64, f64)]) -> MixtureRegressionModel {
        let shape = ModelShape::new(Kernel::Binomial { n: 1 }, Link::IdentityConstant, Dispersion::None);
        let g = MixingMeasure::new(points.iter().map(|&(w, q)| Atom::new(vec![q], vec![], w)).collect()).unwrap();
        MixtureRegressionModel::new(shape, g).unwrap()
    }

    #[test]
    fn single_atom_reduces_to_kernel() {
        let shape = ModelShape::new(Kernel::NegBin, Link::LogLinear { p: 1 }, Dispersion::Fixed { phi: 2.0 });
        let g = MixingMeasure::from_parts(&[1.0], &[vec![0.1, 0.4]], &[]).unwrap();
        let m = MixtureRegressionModel::new(shape, g).unwrap();
        let mu = (0.1f64 + 0.4 * 1.5).exp();
        let direct = Kernel::NegBin.density(3.0, mu, 2.0).unwrap();
        assert!((m.conditional_density(3.0, &[1.5]).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn normal_mixture_at_origin() {
        let m = normal_example();
        let d = m.conditional_density(1.5, &[0.0]).unwrap();
        let expect = (-0.125f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((d - expect).abs() < 1e-15);
        assert!((d - 0.352_065).abs() < 1e-6);
    }

    #[test]
    fn bernoulli_mixture_density() {
        let m = bernoulli(&[(0.5, 0.3), (0.5, 0.7)]);
        assert!((m.conditional_density(1.0, &[]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_is_additive() {
        let m = normal_example();
        let sim = m.simulate(&CovariateDistribution::uniform(-3.0, 3.0), 50, 4).unwrap();
        let one = m.log_likelihood(&sim.data).unwrap();
        let two = m.log_likelihood(&sim.data.repeated(2)).unwrap();
        assert!((two - 2.0 * one).abs() <= 1e-12 * one.abs());
        let single = sim.data.subset(&[0]);
        let l = m.log_likelihood(&single).unwrap();
        assert_eq!(l, m.log_conditional_density(single.y[0], &single.x[0]).unwrap());
    }

    #[test]
    fn zero_density_is_an_error() {
        let m = bernoulli(&[(1.0, 0.0)]);
        let data = Dataset::new(vec![vec![]], vec![1.0]).unwrap();
        assert!(matches!(m.log_likelihood(&data), Err(Error::ZeroDensity { index: 0 })));
    }

    #[test]
    fn degenerate_weights_draw_one_component() {
        let shape = ModelShape::new(Kernel::Poisson, Link::LogLinear { p: 1 }, Dispersion::None);
        let g = MixingMeasure::from_parts(&[1.0, 0.0], &[vec![0.0, 0.1], vec![1.0, 0.0]], &[]).unwrap();
        let m = MixtureRegressionModel::new(shape, g).unwrap();
        let sim = m.simulate(&CovariateDistribution::uniform(0.0, 1.0), 500, 9).unwrap();
        assert!(sim.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let m = normal_example();
        let sim = m.simulate(&CovariateDistribution::uniform(-3.0, 3.0), 20, 1).unwrap();
        let mut buf = Vec::new();
        sim.data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,y\n"));
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), sim.data);
        assert!(Dataset::read_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("x1,y\n1,\n".as_bytes()).is_err());
    }

    #[test]
    fn distances_vanish_for_identical_models() {
        let m = normal_example();
        let px = CovariateDistribution::uniform(-3.0, 3.0);
        assert!(expected_total_variation(&m, &m, &px, 20, 1).unwrap().value.abs() < 1e-9);
        assert!(expected_hellinger_sq(&m, &m, &px, 20, 1).unwrap().value.abs() < 1e-9);
        let g = m.measure.clone();
        assert_eq!(prediction_error(&g, &g, &m.shape, &px, 1, 20, 1).unwrap().value, 0.0);
    }

    #[test]
    fn binomial_counterexample_has_zero_variation() {
        let a = bernoulli(&[(0.5, 0.3), (0.5, 0.7)]);
        let b = bernoulli(&[(0.5, 0.2), (0.5, 0.8)]);
        let tv = expected_total_variation(&a, &b, &CovariateDistribution::none(), 10, 3).unwrap();
        assert_eq!(tv.value, 0.0);
        assert!((measures::wasserstein_distance(&a.measure, &b.measure, 1).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mismatched_supports_rejected() {
        let a = bernoulli(&[(1.0, 0.3)]);
        let b = normal_example();
        assert!(expected_total_variation(&a, &b, &CovariateDistribution::none(), 5, 1).is_err());
    }

    #[test]
    fn shape_validation() {
        let bad = ModelShape::new(Kernel::NegBin, Link::LogLinear { p: 1 }, Dispersion::None);
        assert!(bad.validate().is_err());
        let bad = ModelShape::new(Kernel::Poisson, Link::LogLinear { p: 1 }, Dispersion::Fixed { phi: 1.0 });
        assert!(bad.validate().is_err());
        let shape = ModelShape::new(Kernel::Poisson, Link::LogLinear { p: 1 }, Dispersion::None);
        let g = MixingMeasure::from_parts(&[1.0], &[vec![0.0]], &[]).unwrap();
        assert!(MixtureRegressionModel::new(shape, g).is_err());
    }

    #[test]
    fn model_json_schema() {
        let text = r#"{
            "kernel": {"family": "negbin"},
            "link1": {"link": "log_linear", "p": 1},
            "dispersion": {"type": "link", "link": {"link": "identity_constant"}},
            "measure": {"atoms": [
                {"theta1": [0.0, 1.0], "theta2": [0.5], "weight": 0.4},
                {"theta1": [1.0986122886681098, 1.0], "theta2": [1.5], "weight": 0.6}
            ]}
        }"#;
        let m: MixtureRegressionModel = serde_json::from_str(text).unwrap();
        let m = MixtureRegressionModel::new(m.shape, m.measure).unwrap();
        let p = m.component_params(&[0.0]).unwrap();
        assert!((p[1].0 - 3.0).abs() < 1e-12 && p[1].1 == 1.5);
    }
}
