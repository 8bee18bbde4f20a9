use proptest::prelude::*;
use regmix::bayes::{self, MCMCConfig, PriorSpec};
use regmix::em;
use regmix::experiments::{self, ExperimentSpec, Setting, Variant};
use regmix::identifiability::{self, GridSpec};
use regmix::kernels::Kernel;
use regmix::links::{self, Link, Theta0Scale};
use regmix::measures::{self, Atom, MixingMeasure};
use regmix::model::{self, CovariateDistribution, Dispersion, MixtureRegressionModel, ModelShape};
use regmix::quad;

fn total_mass(k: &Kernel, mu: f64, phi: f64) -> f64 {
    match k.count_upper(mu, phi, 1e-12) {
        Some(top) => (0..=top).map(|y| k.density(y as f64, mu, phi).unwrap()).sum(),
        None => {
            let sd = k.variance(mu, phi).sqrt();
            quad::integrate(|y| k.density(y, mu, phi).unwrap(), mu - 12.0 * sd, mu + 12.0 * sd, 1e-12)
        }
    }
}

fn kernel_and_params() -> impl Strategy<Value = (Kernel, f64, f64)> {
    prop_oneof![
        (-5.0f64..5.0, 0.1f64..4.0).prop_map(|(m, s)| (Kernel::NormalFixed { sigma2: s }, m, 1.0)),
        (-5.0f64..5.0, 0.1f64..4.0).prop_map(|(m, s)| (Kernel::Normal, m, s)),
        (0.05f64..40.0).prop_map(|m| (Kernel::Poisson, m, 1.0)),
        (1u32..30, 0.01f64..0.99).prop_map(|(n, q)| (Kernel::Binomial { n }, q, 1.0)),
        (0.05f64..40.0, 0.2f64..20.0).prop_map(|(m, p)| (Kernel::NegBin, m, p)),
    ]
}

fn measure(weights: &[f64], points: &[Vec<f64>]) -> MixingMeasure {
    let total: f64 = weights.iter().sum();
    MixingMeasure::new(
        weights
            .iter()
            .zip(points)
            .map(|(w, p)| Atom::new(p.clone(), vec![], w / total))
            .collect(),
    )
    .unwrap()
}

fn random_measure(k: usize, dim: usize) -> impl Strategy<Value = MixingMeasure> {
    (
        prop::collection::vec(0.05f64..1.0, k),
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), k),
    )
        .prop_map(|(w, p)| measure(&w, &p))
}

fn nb_shape() -> ModelShape {
    ModelShape::new(
        Kernel::NegBin,
        Link::LogLinear { p: 1 },
        Dispersion::Link { link: Link::IdentityConstant },
    )
}

fn nb_measure() -> impl Strategy<Value = MixingMeasure> {
    (1usize..=3).prop_flat_map(|k| {
        (
            prop::collection::vec(0.1f64..1.0, k),
            prop::collection::vec((-1.0f64..1.5, -0.5f64..0.5, 0.3f64..5.0), k),
        )
            .prop_map(|(w, atoms)| {
                let total: f64 = w.iter().sum();
                MixingMeasure::new(
                    atoms
                        .iter()
                        .zip(&w)
                        .map(|(&(a, b, phi), wi)| Atom::new(vec![a, b], vec![phi], wi / total))
                        .collect(),
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kernels_are_normalized((k, mu, phi) in kernel_and_params()) {
        let mass = total_mass(&k, mu, phi);
        prop_assert!((mass - 1.0).abs() < 1e-8, "{} mass {mass}", k.name());
    }

    #[test]
    fn log_density_is_finite_where_density_is_positive((k, mu, phi) in kernel_and_params(), t in 0.0f64..1.0) {
        let y = match k.count_upper(mu, phi, 1e-12) {
            Some(top) => (t * top as f64).floor(),
            None => mu + (t - 0.5) * 20.0,
        };
        let d = k.density(y, mu, phi).unwrap();
        if d > 0.0 {
            prop_assert!(k.log_density(y, mu, phi).unwrap().is_finite());
        }
    }

    #[test]
    fn five_atom_distances_are_symmetric(g in random_measure(5, 2), h in random_measure(4, 2), r in 1u32..=2) {
        let ab = measures::wasserstein_distance(&g, &h, r).unwrap();
        let ba = measures::wasserstein_distance(&h, &g, r).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-10);
    }

    #[test]
    fn w1_and_w2_obey_the_diameter_bounds(g in random_measure(3, 2), h in random_measure(3, 2)) {
        // atoms lie in [-3, 3]², diameter 6√2
        let diam = 6.0 * 2f64.sqrt();
        let w1 = measures::wasserstein_distance(&g, &h, 1).unwrap();
        let w2 = measures::wasserstein_distance(&g, &h, 2).unwrap();
        prop_assert!(w1 <= w2 + 1e-9);
        prop_assert!(w2 * w2 <= diam * w1 + 1e-9);
    }

    #[test]
    fn conditional_density_is_normalized(g in nb_measure(), x in 0.0f64..2.0) {
        let m = MixtureRegressionModel::new(nb_shape(), g).unwrap();
        let mass: f64 = (0..4000).map(|y| m.conditional_density(y as f64, &[x]).unwrap()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
    }

    #[test]
    fn pointwise_variation_is_a_pseudometric(a in nb_measure(), b in nb_measure(), c in nb_measure(), x in 0.0f64..2.0) {
        let m = |g: &MixingMeasure| MixtureRegressionModel::new(nb_shape(), g.clone()).unwrap();
        let (ma, mb, mc) = (m(&a), m(&b), m(&c));
        let ab = model::total_variation_at(&ma, &mb, &[x]).unwrap();
        let ba = model::total_variation_at(&mb, &ma, &[x]).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        let via = model::total_variation_at(&ma, &mc, &[x]).unwrap() + model::total_variation_at(&mc, &mb, &[x]).unwrap();
        prop_assert!(ab <= via + 1e-9);
    }

    #[test]
    fn responsibilities_sum_to_one(g in nb_measure(), seed in 0u64..1000) {
        let m = MixtureRegressionModel::new(nb_shape(), g).unwrap();
        let data = m.simulate(&CovariateDistribution::uniform(0.0, 2.0), 50, seed).unwrap().data;
        let r = em::e_step(&m, &data).unwrap();
        for i in 0..data.len() {
            let s: f64 = r.w.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(r.w.row(i).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn pathology_flags_are_symmetric_and_permutation_invariant(
        atoms in prop::collection::vec((0.1f64..5.0, 0.2f64..5.0), 2..5),
        make_pair in any::<bool>(),
        rot in 0usize..4,
    ) {
        let mut atoms = atoms;
        if make_pair {
            let (mu, phi) = atoms[0];
            atoms[1] = (mu * (phi + 1.0) / phi, phi + 1.0);
        }
        let flagged = |a: &[(f64, f64)]| {
            let mut pairs: Vec<(f64, f64, f64, f64)> = identifiability::nb_pathological_pairs(a, 1, 1e-9)
                .unwrap()
                .iter()
                .map(|p| {
                    let (x, y) = (a[p.i], a[p.j]);
                    if x <= y { (x.0, x.1, y.0, y.1) } else { (y.0, y.1, x.0, x.1) }
                })
                .collect();
            pairs.sort_by(|p, q| p.partial_cmp(q).unwrap());
            pairs
        };
        let base = flagged(&atoms);
        if make_pair {
            prop_assert!(!base.is_empty());
        }
        let k = atoms.len();
        let rotated: Vec<(f64, f64)> = (0..k).map(|i| atoms[(i + rot) % k]).collect();
        prop_assert_eq!(&base, &flagged(&rotated));
        let reversed: Vec<(f64, f64)> = atoms.iter().rev().copied().collect();
        prop_assert_eq!(&base, &flagged(&reversed));
    }

    #[test]
    fn flagged_pairs_are_numerically_degenerate(mu in 0.2f64..5.0, phi in 0.3f64..5.0) {
        let shape = ModelShape::new(
            Kernel::NegBin,
            Link::IdentityConstant,
            Dispersion::Link { link: Link::IdentityConstant },
        );
        let pair = [(mu, phi), (mu * (phi + 1.0) / phi, phi + 1.0)];
        prop_assert_eq!(identifiability::nb_pathological_pairs(&pair, 1, 1e-9).unwrap().len(), 1);
        let g = MixingMeasure::new(pair.iter().map(|&(m, p)| Atom::new(vec![m], vec![p], 0.5)).collect()).unwrap();
        let (ratio, _) = identifiability::numeric_singular_ratio(&shape, &g, 1, &GridSpec::new(vec![vec![]])).unwrap();
        prop_assert!(ratio < 1e-6, "ratio {ratio}");
    }
}

#[test]
fn gibbs_samples_stay_on_the_simplex() {
    let shape = nb_shape();
    let truth = MixingMeasure::from_parts(&[0.4, 0.6], &[vec![0.0, 1.0], vec![3f64.ln(), 1.0]], &[vec![0.5], vec![1.5]]).unwrap();
    let data = MixtureRegressionModel::new(shape.clone(), truth)
        .unwrap()
        .simulate(&CovariateDistribution::uniform(0.0, 2.0), 200, 3)
        .unwrap()
        .data;
    let chain = bayes::run_gibbs(&MCMCConfig::new(400, 100, 9), &PriorSpec::default(), &data, &shape, 3).unwrap();
    for s in &chain.samples {
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(s.weights.iter().all(|w| *w >= 0.0));
        assert!(s.eta.iter().all(|e| *e > 0.0) && s.phi.iter().all(|p| *p > 0.0));
        assert_eq!(s.counts.iter().sum::<usize>(), data.len());
    }
    let t = chain.theta_acceptance.rate();
    assert!((0.0..=1.0).contains(&t));
}

#[test]
fn nonlinear_links_have_finite_lipschitz_witnesses() {
    let cases: Vec<(Link, Vec<(f64, f64)>, Vec<(f64, f64)>)> = vec![
        (Link::LogLinear { p: 1 }, vec![(0.0, 2.0)], vec![(-1.0, 1.0); 2]),
        (Link::SigmoidLinear { p: 1, intercept: true }, vec![(-2.0, 2.0)], vec![(-4.0, 4.0); 2]),
        (Link::TrigPolynomial { degree: 2 }, vec![(-3.0, 3.0)], vec![(-2.0, 2.0); 5]),
        (
            Link::PowerProduct { p: 2, theta0: Theta0Scale::Log },
            vec![(1.0, 5.0); 2],
            vec![(-1.0, 1.0); 3],
        ),
    ];
    for (link, xb, tb) in cases {
        let w = links::lipschitz_witness(&link, &xb, &tb, 1000, 4).unwrap();
        assert!(w.is_finite() && w > 0.0, "{link:?}: {w}");
    }
}

#[test]
fn distinct_parameters_rarely_give_equal_links() {
    use rand::Rng;
    let mut rng = regmix::seed::rng(77);
    let grid: Vec<Vec<f64>> = (0..=1000).map(|i| vec![-3.0 + 6.0 * i as f64 / 1000.0]).collect();
    for link in [
        Link::Polynomial { degree: 2, p: 1 },
        Link::LogLinear { p: 1 },
        Link::SigmoidLinear { p: 1, intercept: true },
        Link::TrigPolynomial { degree: 1 },
    ] {
        let d = link.param_dim();
        for _ in 0..100 {
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f = links::coincidence_fraction(&link, &a, &b, &grid, 1e-9).unwrap();
            assert!(f < 0.01, "{link:?}: {f}");
        }
    }
}

#[test]
fn experiment_outputs_match_their_spec() {
    let mut spec = ExperimentSpec::rate_curve(Setting::Exact);
    if let Variant::RateCurve { n_grid, replicates, em, .. } = &mut spec.variant {
        *n_grid = vec![100, 200, 400];
        *replicates = 3;
        em.restarts = 2;
    }
    let r = experiments::run(&spec, None).unwrap();
    // one w1 row per (n, replicate)
    assert_eq!(r.records.iter().filter(|x| x.metric == "w1").count(), 9);
    for c in &r.summary.curves {
        assert!(c.q25 <= c.median && c.median <= c.q75);
        let n = c.n as f64;
        let lr = experiments::reference_log_rate(n, 0.5);
        assert_eq!(c.reference["log_n_over_n_pow_half"], lr);
        assert!((lr - (n.ln() / n).sqrt()).abs() < 1e-15);
    }
    let again = experiments::run(&spec, None).unwrap();
    assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
}
