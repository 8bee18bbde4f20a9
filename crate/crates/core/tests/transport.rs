use proptest::prelude::*;
use regmix::measures::{wasserstein, wasserstein_distance, Atom, MixingMeasure};

/// Every coupling with entries in quarter units matching the marginals.
/// Transportation polytopes with integral margins have integral vertices, so
/// the minimum over these couplings is the optimum.
fn brute_force(a: &[u32], b: &[u32], cost: &[Vec<f64>]) -> f64 {
    fn rec(i: usize, a: &[u32], col_left: &mut Vec<u32>, cost: &[Vec<f64>], acc: f64, best: &mut f64) {
        if i == a.len() {
            if col_left.iter().all(|&c| c == 0) {
                *best = best.min(acc);
            }
            return;
        }
        fill_row(i, 0, a[i], a, col_left, cost, acc, best);
    }
    #[allow(clippy::too_many_arguments)]
    fn fill_row(i: usize, j: usize, left: u32, a: &[u32], col_left: &mut Vec<u32>, cost: &[Vec<f64>], acc: f64, best: &mut f64) {
        if j == col_left.len() {
            if left == 0 {
                rec(i + 1, a, col_left, cost, acc, best);
            }
            return;
        }
        for q in 0..=left.min(col_left[j]) {
            col_left[j] -= q;
            fill_row(i, j + 1, left - q, a, col_left, cost, acc + q as f64 * 0.25 * cost[i][j], best);
            col_left[j] += q;
        }
    }
    let mut best = f64::INFINITY;
    rec(0, a, &mut b.to_vec(), cost, 0.0, &mut best);
    best
}

fn measure(units: &[u32], points: &[Vec<f64>]) -> MixingMeasure {
    MixingMeasure::new(
        units
            .iter()
            .zip(points)
            .map(|(&u, p)| Atom::new(p.clone(), vec![], u as f64 / 4.0))
            .collect(),
    )
    .unwrap()
}

/// Splits 4 quarter units among `k` atoms, each possibly zero.
fn quarters(k: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..=4, k).prop_filter_map("four units", |mut v| {
        let total: u32 = v.iter().sum();
        if total == 0 {
            return None;
        }
        // rescale greedily to a total of four
        let mut out = vec![0u32; v.len()];
        let mut left = 4u32;
        for (o, x) in out.iter_mut().zip(v.iter_mut()) {
            let share = (*x * 4) / total;
            *o = share.min(left);
            left -= *o;
        }
        let last = out.len() - 1;
        out[last] += left;
        Some(out)
    })
}

fn atoms(k: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), k)
}

fn pair() -> impl Strategy<Value = (Vec<u32>, Vec<Vec<f64>>, Vec<u32>, Vec<Vec<f64>>, u32)> {
    (1usize..=4, 1usize..=4, 1usize..=2, 1u32..=2).prop_flat_map(|(ka, kb, dim, r)| {
        (quarters(ka), atoms(ka, dim), quarters(kb), atoms(kb, dim), Just(r))
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn matches_brute_force_coupling((ua, pa, ub, pb, r) in pair()) {
        let g = measure(&ua, &pa);
        let h = measure(&ub, &pb);
        let cost: Vec<Vec<f64>> = pa.iter().map(|x| pb.iter().map(|y| dist(x, y).powi(r as i32)).collect()).collect();
        let oracle = brute_force(&ua, &ub, &cost).powf(1.0 / r as f64);
        let (w, plan) = wasserstein(&g, &h, r).unwrap();
        prop_assert!((w - oracle).abs() <= 1e-9, "w = {w}, oracle = {oracle}");
        // the plan is a coupling
        for (i, &u) in ua.iter().enumerate() {
            let row: f64 = (0..ub.len()).map(|j| plan.q[(i, j)]).sum();
            prop_assert!((row - u as f64 / 4.0).abs() < 1e-9);
        }
        for (j, &u) in ub.iter().enumerate() {
            let col: f64 = (0..ua.len()).map(|i| plan.q[(i, j)]).sum();
            prop_assert!((col - u as f64 / 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric((ua, pa, ub, pb, r) in pair()) {
        let g = measure(&ua, &pa);
        let h = measure(&ub, &pb);
        let ab = wasserstein_distance(&g, &h, r).unwrap();
        let ba = wasserstein_distance(&h, &g, r).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!(wasserstein_distance(&g, &g, r).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn triangle_inequality(
        (ua, pa, ub, pb, r) in pair(),
        uc in quarters(3),
        pc in atoms(3, 2),
    ) {
        let dim = pa[0].len();
        let pc: Vec<Vec<f64>> = pc.into_iter().map(|p| p[..dim].to_vec()).collect();
        let (g, h, k) = (measure(&ua, &pa), measure(&ub, &pb), measure(&uc, &pc));
        let gh = wasserstein_distance(&g, &h, r).unwrap();
        let gk = wasserstein_distance(&g, &k, r).unwrap();
        let kh = wasserstein_distance(&k, &h, r).unwrap();
        prop_assert!(gh <= gk + kh + 1e-9);
    }

    #[test]
    fn permutation_invariant((ua, pa, ub, pb, r) in pair(), rot in 0usize..4) {
        let g = measure(&ua, &pa);
        let h = measure(&ub, &pb);
        let perm: Vec<usize> = (0..ua.len()).map(|i| (i + rot) % ua.len()).collect();
        let gp = g.permuted(&perm).unwrap();
        let a = wasserstein_distance(&g, &h, r).unwrap();
        let b = wasserstein_distance(&gp, &h, r).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn w1_at_most_w2((ua, pa, ub, pb, _r) in pair()) {
        let g = measure(&ua, &pa);
        let h = measure(&ub, &pb);
        let w1 = wasserstein_distance(&g, &h, 1).unwrap();
        let w2 = wasserstein_distance(&g, &h, 2).unwrap();
        prop_assert!(w1 <= w2 + 1e-9);
    }
}

#[test]
fn brute_force_oracle_sanity() {
    // ½δ0 + ½δ1 against δ0.5: every unit moves 0.5
    let cost = vec![vec![0.5], vec![0.5]];
    assert!((brute_force(&[2, 2], &[4], &cost) - 0.5).abs() < 1e-15);
}
