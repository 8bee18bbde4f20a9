//! Diagnostics for strong identifiability: closed-form rules for binomial and
//! negative binomial mixtures, the D1 determinant identity, and a numeric rank
//! test on densities and their parameter derivatives over a grid.

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, Partial, Support};
use crate::links::Link;
use crate::measures::MixingMeasure;
use crate::model::{Dispersion, ModelShape};

/// Default absolute tolerance on ratio and dispersion gaps.
pub const PATHOLOGY_TOL: f64 = 1e-6;
/// Default relative singular-value threshold.
pub const RANK_THRESHOLD: f64 = 1e-6;

fn check_order(order: u8) -> Result<()> {
    if order == 1 || order == 2 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("order must be 1 or 2, got {order}")))
    }
}

/// 2k ≤ N+1 for first order, 3k ≤ N+1 for second order.
pub fn binomial_complexity_ok(k: usize, n_trials: u32, order: u8) -> Result<bool> {
    check_order(order)?;
    if k == 0 || n_trials == 0 {
        return Err(Error::InvalidParameter("k and N must be >= 1".into()));
    }
    let factor = if order == 1 { 2 } else { 3 };
    Ok(factor * k <= n_trials as usize + 1)
}

/// A pair of negative binomial components in the pathological configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologicalPair {
    pub i: usize,
    pub j: usize,
    /// |μ_i/φ_i − μ_j/φ_j| (largest over the x grid when covariates are involved).
    pub ratio_gap: f64,
    /// |φ_i − φ_j|.
    pub dispersion_gap: f64,
    /// The gap m ∈ {1, 2} that |φ_i − φ_j| matched.
    pub m: u8,
}

fn matched_gap(phi_i: f64, phi_j: f64, order: u8, tol: f64) -> Option<u8> {
    let d = (phi_i - phi_j).abs();
    let candidates: &[u8] = if order == 1 { &[1] } else { &[1, 2] };
    candidates.iter().copied().find(|&m| (d - m as f64).abs() <= tol)
}

/// Pairs with equal μ/φ ratios and dispersions one (or two, at second order) apart.
pub fn nb_pathological_pairs(atoms: &[(f64, f64)], order: u8, tol: f64) -> Result<Vec<PathologicalPair>> {
    check_order(order)?;
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter("tol must be >= 0".into()));
    }
    if atoms.iter().any(|&(mu, phi)| !(mu > 0.0 && phi > 0.0)) {
        return Err(Error::InvalidParameter("negative binomial atoms need mu > 0 and phi > 0".into()));
    }
    let mut out = Vec::new();
    for i in 0..atoms.len() {
        for j in i + 1..atoms.len() {
            let (mi, pi) = atoms[i];
            let (mj, pj) = atoms[j];
            let ratio_gap = (mi / pi - mj / pj).abs();
            if ratio_gap > tol {
                continue;
            }
            if let Some(m) = matched_gap(pi, pj, order, tol) {
                out.push(PathologicalPair {
                    i,
                    j,
                    ratio_gap,
                    dispersion_gap: (pi - pj).abs(),
                    m,
                });
            }
        }
    }
    Ok(out)
}

/// Atoms as (μ, φ) at covariate `x`.
fn nb_params_at(shape: &ModelShape, g: &MixingMeasure, x: &[f64]) -> Result<Vec<(f64, f64)>> {
    g.atoms().iter().map(|a| shape.component_params(x, a)).collect()
}

/// Pairs that are pathological at every point of the x grid, and notes about
/// pairs that are pathological only on part of it.
pub fn nb_pathological_pairs_over(
    shape: &ModelShape,
    g: &MixingMeasure,
    x_grid: &[Vec<f64>],
    order: u8,
    tol: f64,
) -> Result<(Vec<PathologicalPair>, Vec<String>)> {
    if shape.kernel != Kernel::NegBin {
        return Err(Error::Unsupported("pathology rule applies to negative binomial kernels".into()));
    }
    if x_grid.is_empty() {
        return Err(Error::InvalidParameter("x grid is empty".into()));
    }
    let k = g.len();
    let mut hits = vec![vec![0usize; k]; k];
    let mut worst: Vec<Vec<Option<PathologicalPair>>> = vec![vec![None; k]; k];
    for x in x_grid {
        for p in nb_pathological_pairs(&nb_params_at(shape, g, x)?, order, tol)? {
            hits[p.i][p.j] += 1;
            let slot = &mut worst[p.i][p.j];
            if slot.as_ref().is_none_or(|w| p.ratio_gap > w.ratio_gap) {
                *slot = Some(p);
            }
        }
    }
    let mut pairs = Vec::new();
    let mut notes = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            if hits[i][j] == x_grid.len() {
                pairs.push(worst[i][j].clone().expect("hit recorded"));
            } else if hits[i][j] > 0 {
                notes.push(format!(
                    "components ({i}, {j}) are pathological at {} of {} grid points",
                    hits[i][j],
                    x_grid.len()
                ));
            }
        }
    }
    Ok((pairs, notes))
}

/// Distribution of μ₁(x)/φ₁ − μ₂(x)/φ₂ over covariate rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub band: f64,
    /// Fraction of rows with |gap| ≤ band.
    pub fraction_within: f64,
    /// Rows with |gap| ≤ band.
    pub within: Vec<usize>,
}

/// Per-row ratio gaps of a two-component negative binomial regression mixture.
pub fn nb_pathology_gap(shape: &ModelShape, g: &MixingMeasure, rows: &[Vec<f64>], band: f64) -> Result<GapSummary> {
    if shape.kernel != Kernel::NegBin {
        return Err(Error::Unsupported("ratio gap applies to negative binomial kernels".into()));
    }
    if g.len() != 2 {
        return Err(Error::InvalidParameter(format!("gap needs exactly 2 components, got {}", g.len())));
    }
    if rows.is_empty() {
        return Err(Error::InvalidParameter("no covariate rows".into()));
    }
    let values = rows
        .iter()
        .map(|x| {
            let p = nb_params_at(shape, g, x)?;
            Ok(p[0].0 / p[0].1 - p[1].0 / p[1].1)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let within: Vec<usize> = values.iter().enumerate().filter(|(_, v)| v.abs() <= band).map(|(i, _)| i).collect();
    Ok(GapSummary {
        fraction_within: within.len() as f64 / n,
        values,
        mean,
        sd,
        band,
        within,
    })
}

/// The 2K × 2K matrix with rows m = 0..2K−1 and columns q_i^m then m·q_i^(m−1).
pub fn d1_matrix(q: &[f64]) -> DMatrix<f64> {
    let k = q.len();
    DMatrix::from_fn(2 * k, 2 * k, |m, c| {
        let mi = m as i32;
        if c < k {
            q[c].powi(mi)
        } else if m == 0 {
            0.0
        } else {
            m as f64 * q[c - k].powi(mi - 1)
        }
    })
}

/// Π_{i<j} (q_i − q_j)^4.
pub fn d1_product(q: &[f64]) -> f64 {
    let mut p = 1.0;
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            p *= (q[i] - q[j]).powi(4);
        }
    }
    p
}

/// Sign of det(D1) for K distinct points: grouping value and derivative columns
/// is a permutation of the interleaved confluent Vandermonde order.
pub fn d1_sign(k: usize) -> f64 {
    if (k * (k.saturating_sub(1)) / 2) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// (det D1, Π_{i<j} (q_i − q_j)^4). The determinant is evaluated exactly on
/// the binary values of `q`; floating-point elimination loses all accuracy once
/// points cluster.
pub fn vandermonde_d1_det(q: &[f64]) -> Result<(f64, f64)> {
    if !(2..=5).contains(&q.len()) {
        return Err(Error::InvalidParameter(format!("need 2 <= K <= 5 points, got {}", q.len())));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("points must be finite".into()));
    }
    let product = d1_product(q);
    if product == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((exact_d1_det(q), product))
}

/// Splits a finite f64 into (integer mantissa, binary exponent).
fn dyadic(v: f64) -> (BigInt, i64) {
    if v == 0.0 {
        return (BigInt::zero(), 0);
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { -1i64 } else { 1 };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
    (BigInt::from(sign) * BigInt::from(mant), e)
}

/// m · 2^e without intermediate overflow.
fn ldexp(mut m: f64, mut e: i64) -> f64 {
    while e > 1000 {
        m *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        m *= 2f64.powi(-1000);
        e += 1000;
    }
    m * 2f64.powi(e as i32)
}

fn bigint_to_f64_scaled(v: &BigInt, e: i64) -> f64 {
    let bits = v.bits() as i64;
    let shift = (bits - 64).max(0);
    let top = v >> shift as usize;
    ldexp(top.to_f64().expect("64-bit value fits"), shift + e)
}

/// det D1 in exact integer arithmetic on the dyadic expansion of `q`, rounded once.
fn exact_d1_det(q: &[f64]) -> f64 {
    let k = q.len();
    let parts: Vec<(BigInt, i64)> = q.iter().map(|&v| dyadic(v)).collect();
    // q_i = a_i · 2^(-big_e) with integer a_i
    let big_e = parts.iter().map(|p| -p.1).max().unwrap_or(0).max(0);
    let a: Vec<BigInt> = parts.iter().map(|(m, e)| m << (e + big_e) as usize).collect();
    let n = 2 * k;
    // row m scaled by 2^(big_e·m); derivative columns divided by 2^big_e
    let mut mat: Vec<Vec<BigInt>> = (0..n)
        .map(|m| {
            (0..n)
                .map(|c| {
                    if c < k {
                        num_traits::pow(a[c].clone(), m)
                    } else if m == 0 {
                        BigInt::zero()
                    } else {
                        BigInt::from(m) * num_traits::pow(a[c - k].clone(), m - 1)
                    }
                })
                .collect()
        })
        .collect();
    let mut sign = 1i32;
    let mut prev = BigInt::one();
    for p in 0..n - 1 {
        if mat[p][p].is_zero() {
            match (p + 1..n).find(|&r| !mat[r][p].is_zero()) {
                Some(r) => {
                    mat.swap(p, r);
                    sign = -sign;
                }
                None => return 0.0,
            }
        }
        for i in p + 1..n {
            for j in p + 1..n {
                let v = &mat[i][j] * &mat[p][p] - &mat[i][p] * &mat[p][j];
                mat[i][j] = v / &prev;
            }
            mat[i][p] = BigInt::zero();
        }
        prev = mat[p][p].clone();
    }
    let det = &mat[n - 1][n - 1] * BigInt::from(sign);
    if det.is_zero() {
        return 0.0;
    }
    let row_scale = big_e * (n * (n - 1) / 2) as i64;
    let col_scale = big_e * k as i64;
    bigint_to_f64_scaled(&det, col_scale - row_scale)
}

/// Verdict of the identifiability checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    /// Highest order (0, 1 or 2) at which every check passed; `None` when even
    /// the densities are linearly dependent.
    pub order_claimed: Option<u8>,
    pub order_requested: u8,
    pub rule_fired: String,
    pub offending_pairs: Vec<PathologicalPair>,
    /// σ_min/σ_max of the column-normalized matrix, per order 0..=requested.
    pub singular_ratios: Vec<f64>,
    pub smallest_singular_value: Option<f64>,
    pub threshold: f64,
    pub notes: Vec<String>,
}

/// Grid and thresholds for [`check`] and [`numeric_strong_identifiability`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_grid: Vec<Vec<f64>>,
    /// Response values; derived from the kernel and atoms when absent.
    #[serde(default)]
    pub y_grid: Option<Vec<f64>>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_threshold() -> f64 {
    RANK_THRESHOLD
}

fn default_tol() -> f64 {
    PATHOLOGY_TOL
}

impl GridSpec {
    pub fn new(x_grid: Vec<Vec<f64>>) -> Self {
        GridSpec {
            x_grid,
            y_grid: None,
            threshold: RANK_THRESHOLD,
            tol: PATHOLOGY_TOL,
        }
    }
}

/// Evenly spaced scalar covariates on [lo, hi].
pub fn linear_grid(lo: f64, hi: f64, points: usize) -> Vec<Vec<f64>> {
    if points <= 1 {
        return vec![vec![0.5 * (lo + hi)]];
    }
    (0..points).map(|i| vec![lo + (hi - lo) * i as f64 / (points - 1) as f64]).collect()
}

fn default_y_grid(shape: &ModelShape, g: &MixingMeasure, x_grid: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut params = Vec::new();
    for x in x_grid {
        params.extend(nb_params_at(shape, g, x)?);
    }
    match shape.kernel.support() {
        Support::Count(_) => {
            let top = params
                .iter()
                .filter_map(|&(mu, phi)| shape.kernel.count_upper(mu, phi, 1e-10))
                .max()
                .unwrap_or(0)
                .min(2000);
            Ok((0..=top).map(|y| y as f64).collect())
        }
        Support::Real => {
            let (lo, hi) = params.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(mu, phi)| {
                let sd = shape.kernel.variance(mu, phi).sqrt();
                (lo.min(mu - 4.0 * sd), hi.max(mu + 4.0 * sd))
            });
            Ok((0..81).map(|i| lo + (hi - lo) * i as f64 / 80.0).collect())
        }
    }
}

fn dispersion_link(shape: &ModelShape) -> Option<&Link> {
    match &shape.dispersion {
        Dispersion::Link { link } => Some(link),
        _ => None,
    }
}

/// Columns {f_j, ∂f_j/∂θ₁, ∂f_j/∂θ₂, second-order terms} over every (x, y) pair.
fn assemble(shape: &ModelShape, g: &MixingMeasure, order: u8, x_grid: &[Vec<f64>], y_grid: &[f64]) -> Result<DMatrix<f64>> {
    let kern = &shape.kernel;
    let h2 = dispersion_link(shape);
    let (d1, d2) = shape.theta_dims();
    let per_atom = {
        let first = 1 + d1 + d2;
        let second = if order >= 2 { d1 * (d1 + 1) / 2 + d1 * d2 + d2 * (d2 + 1) / 2 } else { 0 };
        if order == 0 {
            1
        } else {
            first + second
        }
    };
    let rows = x_grid.len() * y_grid.len();
    let mut m = DMatrix::zeros(rows, per_atom * g.len());
    let mut r = 0;
    for x in x_grid {
        let mut grads = Vec::with_capacity(g.len());
        for a in g.atoms() {
            let (mu, phi) = shape.component_params(x, a)?;
            let g1 = shape.link1.grad_theta(x, &a.theta1)?;
            let hs1 = shape.link1.hess_theta(x, &a.theta1)?;
            let (g2, hs2) = match h2 {
                Some(l) => (l.grad_theta(x, &a.theta2)?, l.hess_theta(x, &a.theta2)?),
                None => (vec![], DMatrix::zeros(0, 0)),
            };
            grads.push((mu, phi, g1, hs1, g2, hs2));
        }
        for &y in y_grid {
            if kern.check_response(y).is_err() {
                r += 1;
                continue;
            }
            let mut c = 0;
            for (mu, phi, g1, hs1, g2, hs2) in &grads {
                let (mu, phi) = (*mu, *phi);
                m[(r, c)] = kern.density(y, mu, phi)?;
                c += 1;
                if order == 0 {
                    continue;
                }
                let f_mu = kern.derivative(Partial::Mu, y, mu, phi)?;
                for v in g1 {
                    m[(r, c)] = f_mu * v;
                    c += 1;
                }
                let f_phi = if d2 > 0 { kern.derivative(Partial::Phi, y, mu, phi)? } else { 0.0 };
                for v in g2 {
                    m[(r, c)] = f_phi * v;
                    c += 1;
                }
                if order >= 2 {
                    let f_mumu = kern.derivative(Partial::MuMu, y, mu, phi)?;
                    for a in 0..d1 {
                        for b in a..d1 {
                            m[(r, c)] = f_mumu * g1[a] * g1[b] + f_mu * hs1[(a, b)];
                            c += 1;
                        }
                    }
                    if d2 > 0 {
                        let f_muphi = kern.derivative(Partial::MuPhi, y, mu, phi)?;
                        let f_phiphi = kern.derivative(Partial::PhiPhi, y, mu, phi)?;
                        for a in 0..d1 {
                            for b in 0..d2 {
                                m[(r, c)] = f_muphi * g1[a] * g2[b];
                                c += 1;
                            }
                        }
                        for a in 0..d2 {
                            for b in a..d2 {
                                m[(r, c)] = f_phiphi * g2[a] * g2[b] + f_phi * hs2[(a, b)];
                                c += 1;
                            }
                        }
                    }
                }
            }
            r += 1;
        }
    }
    Ok(m)
}

/// σ_min/σ_max of the matrix with unit-norm columns; 0 when rank-deficient by shape.
pub fn singular_ratio(m: &DMatrix<f64>) -> (f64, f64) {
    let mut m = m.clone();
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = if m.nrows() < m.ncols() { 0.0 } else { sv.min() };
    if max == 0.0 {
        return (0.0, 0.0);
    }
    (min / max, min)
}

/// Numeric rank test at one order; returns (σ_min/σ_max, σ_min).
pub fn numeric_singular_ratio(shape: &ModelShape, g: &MixingMeasure, order: u8, grid: &GridSpec) -> Result<(f64, f64)> {
    shape.validate()?;
    shape.check_measure(g)?;
    if order > 2 {
        return Err(Error::InvalidParameter(format!("order must be 0, 1 or 2, got {order}")));
    }
    if grid.x_grid.is_empty() {
        return Err(Error::InvalidParameter("x grid is empty".into()));
    }
    let y_grid = match &grid.y_grid {
        Some(y) if !y.is_empty() => y.clone(),
        Some(_) => return Err(Error::InvalidParameter("y grid is empty".into())),
        None => default_y_grid(shape, g, &grid.x_grid)?,
    };
    let m = assemble(shape, g, order, &grid.x_grid, &y_grid)?;
    Ok(singular_ratio(&m))
}

/// Report from the numeric test alone, for orders 0..=`order`.
pub fn numeric_strong_identifiability(shape: &ModelShape, g: &MixingMeasure, order: u8, grid: &GridSpec) -> Result<IdentifiabilityReport> {
    let mut ratios = Vec::new();
    let mut smallest = None;
    let mut claimed = None;
    for r in 0..=order {
        let (ratio, min) = numeric_singular_ratio(shape, g, r, grid)?;
        ratios.push(ratio);
        smallest = Some(min);
        if ratio > grid.threshold && claimed == r.checked_sub(1) {
            claimed = Some(r);
        }
    }
    Ok(IdentifiabilityReport {
        order_claimed: claimed,
        order_requested: order,
        rule_fired: "numeric".into(),
        offending_pairs: vec![],
        singular_ratios: ratios,
        smallest_singular_value: smallest,
        threshold: grid.threshold,
        notes: vec![],
    })
}

/// Closed-form rules for the kernel family, then the numeric rank test.
pub fn check(shape: &ModelShape, g: &MixingMeasure, order: u8, grid: &GridSpec) -> Result<IdentifiabilityReport> {
    check_order(order)?;
    let mut report = numeric_strong_identifiability(shape, g, order, grid)?;
    let numeric_claim = report.order_claimed;
    let mut rule_cap: Option<(u8, &str)> = None;
    match shape.kernel {
        Kernel::Binomial { n } if shape.link1 == Link::IdentityConstant => {
            let k = g.len();
            if !binomial_complexity_ok(k, n, 1)? {
                rule_cap = Some((0, "binomial_complexity"));
            } else if order == 2 && !binomial_complexity_ok(k, n, 2)? {
                rule_cap = Some((1, "binomial_complexity"));
            }
            let n1 = n as usize + 1;
            if order == 2 && 3 * k <= n1 && n1 < 6 * k {
                report.notes.push(format!(
                    "3k <= N+1 holds (k = {k}, N = {n}) but the second-order determinant argument is stated for 6K != N+1"
                ));
            }
        }
        Kernel::Binomial { .. } => report.notes.push(
            "binomial complexity rule concerns the kernel family; with a covariate-dependent link the numeric test decides".into(),
        ),
        Kernel::NegBin => {
            let (pairs1, notes) = nb_pathological_pairs_over(shape, g, &grid.x_grid, 1, grid.tol)?;
            report.notes.extend(notes);
            if !pairs1.is_empty() {
                rule_cap = Some((0, "nb_pathology"));
                report.offending_pairs = pairs1;
            } else if order == 2 {
                let (pairs2, notes) = nb_pathological_pairs_over(shape, g, &grid.x_grid, 2, grid.tol)?;
                report.notes.extend(notes);
                if !pairs2.is_empty() {
                    rule_cap = Some((1, "nb_pathology"));
                    report.offending_pairs = pairs2;
                }
            }
        }
        _ => {}
    }
    if let Some((cap, name)) = rule_cap {
        report.rule_fired = name.into();
        report.order_claimed = numeric_claim.map(|c| c.min(cap));
    }
    Ok(report)
}
