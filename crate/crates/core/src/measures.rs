//! Discrete mixing measures and exact Wasserstein distances between them.
//!
//! A mixing measure is a finite weighted collection of atoms `(theta1, theta2)`.
//! Distances use the Euclidean norm on the concatenated atom coordinates and are
//! computed exactly by solving the transportation linear program with a
//! primal simplex on the spanning-tree basis (Bland's rule for both the entering
//! and leaving cell, so degenerate ties always resolve to the lowest index).

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Weights below this are treated as absent.
pub const ZERO_WEIGHT: f64 = 1e-12;
/// Tolerance on Σ weights when loading or constructing a measure.
pub const LOAD_TOLERANCE: f64 = 1e-9;
const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub theta1: Vec<f64>,
    #[serde(default)]
    pub theta2: Vec<f64>,
    pub weight: f64,
}

impl Atom {
    pub fn new(theta1: Vec<f64>, theta2: Vec<f64>, weight: f64) -> Self {
        Atom {
            theta1,
            theta2,
            weight,
        }
    }

    /// Concatenated `(theta1, theta2)` coordinates.
    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        self.theta1.iter().chain(self.theta2.iter()).copied()
    }
}

/// Compact parameter box Θ = Θ1 × Θ2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub theta1_lo: Vec<f64>,
    pub theta1_hi: Vec<f64>,
    #[serde(default)]
    pub theta2_lo: Vec<f64>,
    #[serde(default)]
    pub theta2_hi: Vec<f64>,
}

impl ParamBox {
    pub fn new(theta1: &[(f64, f64)], theta2: &[(f64, f64)]) -> Self {
        ParamBox {
            theta1_lo: theta1.iter().map(|b| b.0).collect(),
            theta1_hi: theta1.iter().map(|b| b.1).collect(),
            theta2_lo: theta2.iter().map(|b| b.0).collect(),
            theta2_hi: theta2.iter().map(|b| b.1).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.theta1_lo.len(), self.theta2_lo.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta1_lo.len() != self.theta1_hi.len() || self.theta2_lo.len() != self.theta2_hi.len()
        {
            return Err(Error::DimensionMismatch("box lower/upper lengths differ".into()));
        }
        let ok = self
            .theta1_lo
            .iter()
            .zip(&self.theta1_hi)
            .chain(self.theta2_lo.iter().zip(&self.theta2_hi))
            .all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo <= hi);
        if !ok {
            return Err(Error::InvalidParameter("box bounds must be finite with lo <= hi".into()));
        }
        Ok(())
    }

    pub fn contains(&self, atom: &Atom) -> bool {
        let inside = |v: &[f64], lo: &[f64], hi: &[f64]| {
            v.iter().zip(lo.iter().zip(hi)).all(|(x, (l, h))| *x >= *l && *x <= *h)
        };
        inside(&atom.theta1, &self.theta1_lo, &self.theta1_hi)
            && inside(&atom.theta2, &self.theta2_lo, &self.theta2_hi)
    }

    /// Euclidean diameter of the box.
    pub fn diameter(&self) -> f64 {
        self.theta1_lo
            .iter()
            .zip(&self.theta1_hi)
            .chain(self.theta2_lo.iter().zip(&self.theta2_hi))
            .map(|(l, h)| (h - l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Draws a point uniformly from the box.
    pub fn sample_point<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let draw = |lo: &[f64], hi: &[f64], rng: &mut R| -> Vec<f64> {
            lo.iter()
                .zip(hi)
                .map(|(l, h)| if h > l { rng.random_range(*l..=*h) } else { *l })
                .collect()
        };
        let t1 = draw(&self.theta1_lo, &self.theta1_hi, rng);
        let t2 = draw(&self.theta2_lo, &self.theta2_hi, rng);
        (t1, t2)
    }

    pub fn clamp(&self, atom: &mut Atom) {
        for (v, (l, h)) in atom
            .theta1
            .iter_mut()
            .zip(self.theta1_lo.iter().zip(&self.theta1_hi))
        {
            *v = v.clamp(*l, *h);
        }
        for (v, (l, h)) in atom
            .theta2
            .iter_mut()
            .zip(self.theta2_lo.iter().zip(&self.theta2_hi))
        {
            *v = v.clamp(*l, *h);
        }
    }
}

/// G = Σ p_j δ_(θ1j, θ2j).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingMeasure {
    atoms: Vec<Atom>,
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    bounds: Option<ParamBox>,
}

#[derive(Deserialize)]
struct RawMeasure {
    atoms: Vec<Atom>,
    #[serde(rename = "box", default)]
    bounds: Option<ParamBox>,
}

impl<'de> Deserialize<'de> for MixingMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMeasure::deserialize(d)?;
        MixingMeasure::with_box(raw.atoms, raw.bounds).map_err(serde::de::Error::custom)
    }
}

impl MixingMeasure {
    /// Builds a measure, checking dimensions and that weights sum to one
    /// within [`LOAD_TOLERANCE`]; weights are then renormalized exactly.
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        Self::with_box(atoms, None)
    }

    pub fn with_box(mut atoms: Vec<Atom>, bounds: Option<ParamBox>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        let (d1, d2) = (atoms[0].theta1.len(), atoms[0].theta2.len());
        for a in &atoms {
            if a.theta1.len() != d1 || a.theta2.len() != d2 {
                return Err(Error::DimensionMismatch(format!(
                    "atom dims ({}, {}) differ from ({d1}, {d2})",
                    a.theta1.len(),
                    a.theta2.len()
                )));
            }
            if !(a.weight >= 0.0) || !a.weight.is_finite() {
                return Err(Error::InvalidParameter(format!("weight {} is not >= 0", a.weight)));
            }
            if a.coords().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite atom coordinate".into()));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > LOAD_TOLERANCE {
            return Err(Error::Unnormalized(total));
        }
        for a in &mut atoms {
            a.weight /= total;
        }
        if let Some(b) = &bounds {
            b.validate()?;
            if b.dims() != (d1, d2) {
                return Err(Error::DimensionMismatch(format!(
                    "box dims {:?} differ from atom dims ({d1}, {d2})",
                    b.dims()
                )));
            }
            if let Some(i) = atoms.iter().position(|a| !b.contains(a)) {
                return Err(Error::InvalidParameter(format!("atom {i} lies outside the box")));
            }
        }
        Ok(MixingMeasure { atoms, bounds })
    }

    /// Convenience constructor from parallel lists.
    pub fn from_parts(weights: &[f64], theta1: &[Vec<f64>], theta2: &[Vec<f64>]) -> Result<Self> {
        if weights.len() != theta1.len() || (!theta2.is_empty() && theta2.len() != weights.len()) {
            return Err(Error::DimensionMismatch("weights/theta lengths differ".into()));
        }
        let atoms = weights
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                Atom::new(
                    theta1[j].clone(),
                    theta2.get(j).cloned().unwrap_or_default(),
                    w,
                )
            })
            .collect();
        Self::new(atoms)
    }

    /// Builds from weights that may not be normalized (e.g. fitted proportions).
    pub fn normalized(mut atoms: Vec<Atom>, bounds: Option<ParamBox>) -> Result<Self> {
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Unnormalized(total));
        }
        for a in &mut atoms {
            a.weight /= total;
        }
        Self::with_box(atoms, bounds)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bounds(&self) -> Option<&ParamBox> {
        self.bounds.as_ref()
    }

    pub fn with_bounds(mut self, bounds: Option<ParamBox>) -> Result<Self> {
        if let Some(b) = &bounds {
            b.validate()?;
            if b.dims() != self.dims() {
                return Err(Error::DimensionMismatch("box dims differ from atom dims".into()));
            }
        }
        self.bounds = bounds;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.atoms[0].theta1.len(), self.atoms[0].theta2.len())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.weight).collect()
    }

    /// Atoms with weight above [`ZERO_WEIGHT`], paired with their original index.
    pub fn support(&self) -> Vec<(usize, &Atom)> {
        self.atoms
            .iter()
            .enumerate()
            .filter(|(_, a)| a.weight > ZERO_WEIGHT)
            .collect()
    }

    /// Returns the same measure with atoms reordered by `perm` (new[i] = old[perm[i]]).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::DimensionMismatch("permutation length".into()));
        }
        let atoms = perm.iter().map(|&i| self.atoms[i].clone()).collect();
        Ok(MixingMeasure {
            atoms,
            bounds: self.bounds.clone(),
        })
    }
}

fn euclid(a: &Atom, b: &Atom) -> f64 {
    a.coords()
        .zip(b.coords())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_order(r: u32) -> Result<()> {
    if r == 1 || r == 2 {
        Ok(())
    } else {
        Err(Error::Unsupported(format!("Wasserstein order {r}; only 1 and 2")))
    }
}

fn check_dims(g: &MixingMeasure, h: &MixingMeasure) -> Result<()> {
    if g.dims() != h.dims() {
        return Err(Error::DimensionMismatch(format!(
            "measures have atom dims {:?} and {:?}",
            g.dims(),
            h.dims()
        )));
    }
    Ok(())
}

/// Matrix of ρ^r between every atom of `g` (rows) and of `h` (columns).
pub fn cost_matrix(g: &MixingMeasure, h: &MixingMeasure, r: u32) -> Result<DMatrix<f64>> {
    check_order(r)?;
    check_dims(g, h)?;
    Ok(DMatrix::from_fn(g.len(), h.len(), |i, j| {
        euclid(&g.atoms[i], &h.atoms[j]).powi(r as i32)
    }))
}

/// Optimal coupling between two measures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportPlan {
    /// Coupling indexed by the original atoms of the two measures.
    #[serde(serialize_with = "rows")]
    pub q: DMatrix<f64>,
    /// Σ q_ij ρ_ij^r.
    pub cost: f64,
}

fn rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let nested: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    nested.serialize(s)
}

/// Exact order-`r` Wasserstein distance and an optimal plan.
pub fn wasserstein(g: &MixingMeasure, h: &MixingMeasure, r: u32) -> Result<(f64, TransportPlan)> {
    check_order(r)?;
    if g.is_empty() || h.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    check_dims(g, h)?;
    for m in [g, h] {
        let s: f64 = m.atoms.iter().map(|a| a.weight).sum();
        if (s - 1.0).abs() > LOAD_TOLERANCE {
            return Err(Error::Unnormalized(s));
        }
    }
    let rows = g.support();
    let cols = h.support();
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let supply: Vec<f64> = rows.iter().map(|(_, a)| a.weight).collect();
    let demand: Vec<f64> = cols.iter().map(|(_, a)| a.weight).collect();
    let cost = DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        euclid(rows[i].1, cols[j].1).powi(r as i32)
    });
    let plan = solve_transport(&supply, &demand, &cost)?;
    let mut q = DMatrix::zeros(g.len(), h.len());
    let mut total = 0.0;
    for i in 0..rows.len() {
        for j in 0..cols.len() {
            let v = plan[(i, j)];
            if v != 0.0 {
                q[(rows[i].0, cols[j].0)] = v;
                total += v * cost[(i, j)];
            }
        }
    }
    let total = total.max(0.0);
    let dist = if r == 1 { total } else { total.sqrt() };
    Ok((dist, TransportPlan { q, cost: total }))
}

/// W_r distance only.
pub fn wasserstein_distance(g: &MixingMeasure, h: &MixingMeasure, r: u32) -> Result<f64> {
    wasserstein(g, h, r).map(|(d, _)| d)
}

/// Solves min Σ c_ij q_ij subject to row sums `supply` and column sums `demand`.
///
/// Both marginals must have (nearly) equal totals; the demand is rescaled to the
/// supply total before solving.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = (supply.len(), demand.len());
    if m == 0 || n == 0 || cost.nrows() != m || cost.ncols() != n {
        return Err(Error::DimensionMismatch("transport problem shape".into()));
    }
    let s_tot: f64 = supply.iter().sum();
    let d_tot: f64 = demand.iter().sum();
    if (s_tot - d_tot).abs() > FEASIBILITY_TOL * s_tot.max(1.0) {
        return Err(Error::Unnormalized(d_tot));
    }
    let scale = s_tot / d_tot;
    let mut s: Vec<f64> = supply.to_vec();
    let mut d: Vec<f64> = demand.iter().map(|v| v * scale).collect();

    // northwest-corner start: exactly m + n - 1 basic cells forming a tree
    let mut plan = DMatrix::<f64>::zeros(m, n);
    let mut basic = vec![vec![false; n]; m];
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let x = s[i].min(d[j]).max(0.0);
        plan[(i, j)] = x;
        basic[i][j] = true;
        s[i] -= x;
        d[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || s[i] <= d[j] {
            i += 1;
        } else {
            j += 1;
        }
    }

    let cmax = cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let tol = 1e-12 * (1.0 + cmax);
    let max_iter = 50 * (m + n) * (m + n) + 100;
    for _ in 0..max_iter {
        let (u, v) = potentials(&basic, cost);
        // Bland: first cell (row-major) with negative reduced cost enters
        let mut entering = None;
        'search: for r in 0..m {
            for c in 0..n {
                if !basic[r][c] && cost[(r, c)] - u[r] - v[c] < -tol {
                    entering = Some((r, c));
                    break 'search;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            for x in plan.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
            return Ok(plan);
        };
        let path = tree_path(&basic, ei, ej);
        // path edges alternate starting at row ei; odd positions (0-based even) lose mass
        let minus: Vec<(usize, usize)> = path.iter().step_by(2).copied().collect();
        let theta = minus
            .iter()
            .map(|&(r, c)| plan[(r, c)])
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        let leaving = minus
            .iter()
            .copied()
            .filter(|&(r, c)| plan[(r, c)] <= theta)
            .min()
            .expect("cycle has a decreasing edge");
        for (k, &(r, c)) in path.iter().enumerate() {
            if k % 2 == 0 {
                plan[(r, c)] -= theta;
            } else {
                plan[(r, c)] += theta;
            }
        }
        plan[(ei, ej)] += theta;
        plan[leaving] = 0.0;
        basic[leaving.0][leaving.1] = false;
        basic[ei][ej] = true;
    }
    Err(Error::FitFailed("transport simplex did not terminate".into()))
}

/// Dual potentials u_i + v_j = c_ij on basic cells, with u_0 = 0.
fn potentials(basic: &[Vec<bool>], cost: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (basic.len(), basic[0].len());
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    // node ids: rows 0..m, columns m..m+n
    let mut stack = vec![0usize];
    while let Some(node) = stack.pop() {
        if node < m {
            let r = node;
            for c in 0..n {
                if basic[r][c] && v[c].is_nan() {
                    v[c] = cost[(r, c)] - u[r];
                    stack.push(m + c);
                }
            }
        } else {
            let c = node - m;
            for r in 0..m {
                if basic[r][c] && u[r].is_nan() {
                    u[r] = cost[(r, c)] - v[c];
                    stack.push(r);
                }
            }
        }
    }
    // a degenerate forest can leave isolated nodes; pin them to zero
    for x in u.iter_mut().chain(v.iter_mut()) {
        if x.is_nan() {
            *x = 0.0;
        }
    }
    (u, v)
}

/// Basic cells on the tree path from row `r0` to column `c0`, in order.
fn tree_path(basic: &[Vec<bool>], r0: usize, c0: usize) -> Vec<(usize, usize)> {
    let (m, n) = (basic.len(), basic[0].len());
    let mut parent: Vec<Option<usize>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    let mut queue = std::collections::VecDeque::new();
    seen[r0] = true;
    queue.push_back(r0);
    let target = m + c0;
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        if node < m {
            for c in 0..n {
                if basic[node][c] && !seen[m + c] {
                    seen[m + c] = true;
                    parent[m + c] = Some(node);
                    queue.push_back(m + c);
                }
            }
        } else {
            let c = node - m;
            for r in 0..m {
                if basic[r][c] && !seen[r] {
                    seen[r] = true;
                    parent[r] = Some(node);
                    queue.push_back(r);
                }
            }
        }
    }
    let mut nodes = vec![target];
    let mut cur = target;
    while let Some(p) = parent[cur] {
        nodes.push(p);
        cur = p;
    }
    nodes.reverse();
    debug_assert_eq!(nodes[0], r0, "basis is a spanning tree");
    nodes
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            if a < m {
                (a, b - m)
            } else {
                (b, a - m)
            }
        })
        .collect()
}

/// How [`perturb`] moves weights; recorded with experiment output.
pub const PERTURBATION_SCHEME: &str = "coordinates: theta + U[-radius, radius] per coordinate, clamped to the box; \
weights: w + U[-radius, radius] per atom, floored at 1e-6, renormalized";

/// Random measure near `g0` with the same atom count.
pub fn perturb(g0: &MixingMeasure, radius: f64, rng_seed: u64) -> Result<MixingMeasure> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!("radius {radius} must be > 0")));
    }
    let mut rng = seed::rng(rng_seed);
    let mut atoms = g0.atoms.clone();
    for a in &mut atoms {
        for v in a.theta1.iter_mut().chain(a.theta2.iter_mut()) {
            *v += rng.random_range(-radius..=radius);
        }
        if let Some(b) = &g0.bounds {
            b.clamp(a);
        }
    }
    for a in &mut atoms {
        a.weight = (a.weight + rng.random_range(-radius..=radius)).max(1e-6);
    }
    MixingMeasure::normalized(atoms, g0.bounds.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(points: &[(f64, f64)]) -> MixingMeasure {
        MixingMeasure::new(points.iter().map(|&(w, t)| Atom::new(vec![t], vec![], w)).collect()).unwrap()
    }

    #[test]
    fn cost_matrix_identity_and_single_pair() {
        let g = MixingMeasure::new(vec![Atom::new(vec![0.0], vec![0.0], 1.0)]).unwrap();
        assert_eq!(cost_matrix(&g, &g, 1).unwrap()[(0, 0)], 0.0);
        let a = scalar(&[(1.0, 0.0)]);
        let b = scalar(&[(1.0, 3.0)]);
        assert_eq!(cost_matrix(&a, &b, 2).unwrap()[(0, 0)], 9.0);
    }

    #[test]
    fn cost_matrix_three_dimensional_atoms() {
        let g = MixingMeasure::from_parts(
            &[0.5, 0.5],
            &[vec![1.0, -5.0, 1.0], vec![2.0, 5.0, 2.0]],
            &[],
        )
        .unwrap();
        let c = cost_matrix(&g, &g, 1).unwrap();
        let off = 102f64.sqrt();
        assert_eq!(c[(0, 0)], 0.0);
        assert_eq!(c[(1, 1)], 0.0);
        assert!((c[(0, 1)] - off).abs() < 1e-15);
        assert!((c[(1, 0)] - off).abs() < 1e-15);
    }

    #[test]
    fn cost_matrix_rejects_mismatched_dims() {
        let a = scalar(&[(1.0, 0.0)]);
        let b = MixingMeasure::new(vec![Atom::new(vec![0.0, 1.0], vec![], 1.0)]).unwrap();
        assert!(matches!(cost_matrix(&a, &b, 1), Err(Error::DimensionMismatch(_))));
        assert!(matches!(cost_matrix(&a, &a, 3), Err(Error::Unsupported(_))));
    }

    #[test]
    fn split_mass_to_midpoint() {
        let g = scalar(&[(0.5, 0.0), (0.5, 1.0)]);
        let h = scalar(&[(1.0, 0.5)]);
        let (d, plan) = wasserstein(&g, &h, 1).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        assert!((plan.q[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn binomial_pair_distance() {
        let g1 = scalar(&[(0.5, 0.3), (0.5, 0.7)]);
        let g2 = scalar(&[(0.5, 0.2), (0.5, 0.8)]);
        let (d, plan) = wasserstein(&g1, &g2, 1).unwrap();
        assert!((d - 0.1).abs() < 1e-12);
        assert!((plan.q[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((plan.q[(1, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_atoms_are_ignored() {
        let g = scalar(&[(0.0, 100.0), (1.0, 0.0)]);
        let h = scalar(&[(1.0, 1.0)]);
        let (d, plan) = wasserstein(&g, &h, 2).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        assert_eq!(plan.q.nrows(), 2);
        assert_eq!(plan.q[(0, 0)], 0.0);
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let atoms = vec![Atom::new(vec![0.0], vec![], 0.6), Atom::new(vec![1.0], vec![], 0.6)];
        assert!(matches!(MixingMeasure::new(atoms), Err(Error::Unnormalized(_))));
        assert!(matches!(MixingMeasure::new(vec![]), Err(Error::EmptyMeasure)));
    }

    #[test]
    fn degenerate_marginals_reach_optimum() {
        // equal weights create many degenerate bases
        let g = scalar(&[(0.25, 0.0), (0.25, 1.0), (0.25, 2.0), (0.25, 3.0)]);
        let h = scalar(&[(0.25, 3.0), (0.25, 2.0), (0.25, 1.0), (0.25, 0.0)]);
        assert!(wasserstein(&g, &h, 1).unwrap().0.abs() < 1e-15);
        let h2 = scalar(&[(0.5, 1.5), (0.5, 1.5)]);
        let d = wasserstein(&g, &h2, 1).unwrap().0;
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let text = r#"{"atoms":[{"theta1":[0.3],"theta2":[],"weight":0.5},{"theta1":[0.7],"weight":0.5}],
                       "box":{"theta1_lo":[0.0],"theta1_hi":[1.0]}}"#;
        let g: MixingMeasure = serde_json::from_str(text).unwrap();
        assert_eq!(g.len(), 2);
        let back: MixingMeasure = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(g, back);
        let bad = r#"{"atoms":[{"theta1":[0.3],"weight":0.5}]}"#;
        assert!(serde_json::from_str::<MixingMeasure>(bad).is_err());
        let outside = r#"{"atoms":[{"theta1":[3.0],"weight":1.0}],"box":{"theta1_lo":[0.0],"theta1_hi":[1.0]}}"#;
        assert!(serde_json::from_str::<MixingMeasure>(outside).is_err());
    }

    #[test]
    fn perturb_is_deterministic_and_bounded() {
        let b = ParamBox::new(&[(-10.0, 10.0)], &[]);
        let g0 = scalar(&[(0.5, 0.5), (0.5, 5.0)]).with_bounds(Some(b)).unwrap();
        let a = perturb(&g0, 0.3, 11).unwrap();
        assert_eq!(a, perturb(&g0, 0.3, 11).unwrap());
        assert_ne!(a, perturb(&g0, 0.3, 12).unwrap());
        let radius = 1e-4;
        let p = perturb(&g0, radius, 5).unwrap();
        let w1 = wasserstein_distance(&p, &g0, 1).unwrap();
        // k·(radius·√(d1+d2) + diameter·weight shift); each normalized weight moves ≤ 2·radius
        let diameter = g0.bounds().unwrap().diameter();
        let bound = 2.0 * (radius * 1f64.sqrt() + diameter * 2.0 * radius);
        assert!(w1 <= bound, "{w1} > {bound}");
        assert!(perturb(&g0, 0.0, 1).is_err());
    }

    #[test]
    fn perturbation_sample_is_never_identical() {
        let b = ParamBox::new(&[(-10.0, 10.0)], &[]);
        let g0 = scalar(&[(0.5, 0.5), (0.5, 5.0)]).with_bounds(Some(b)).unwrap();
        for s in 0..2000 {
            let g = perturb(&g0, 0.3, s).unwrap();
            assert!(wasserstein_distance(&g, &g0, 1).unwrap() > 0.0);
        }
    }

    #[test]
    fn perturb_clamps_to_box() {
        let b = ParamBox::new(&[(0.0, 1.0)], &[]);
        let g0 = scalar(&[(0.5, 0.0), (0.5, 1.0)]).with_bounds(Some(b.clone())).unwrap();
        for s in 0..50 {
            let g = perturb(&g0, 0.5, s).unwrap();
            assert!(g.atoms().iter().all(|a| b.contains(a)));
        }
    }
}
