//! Seeded simulation studies: inverse-bound scatter, EM rate curves, posterior
//! contraction under a pathological truth, and subsample stability on
//! crash-style count data. Every study is a pure function of its spec.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{self, DispersionScale, MCMCConfig, PriorSpec};
use crate::em::{self, EMConfig, Init, MStep};
use crate::error::{Error, Result};
use crate::identifiability::{self, GapSummary};
use crate::kernels::Kernel;
use crate::links::{Link, Theta0Scale};
use crate::measures::{self, Atom, MixingMeasure, ParamBox};
use crate::model::{self, CovariateDistribution, Dataset, Dispersion, MixtureRegressionModel, ModelShape};
use crate::seed;

// stream tags for seed derivation
const SIMULATE: u64 = 1;
const FIT: u64 = 2;
const CHAIN: u64 = 3;
const PERTURB: u64 = 4;
const RADIUS: u64 = 5;
const COVARIATES: u64 = 6;
const SUBSAMPLE: u64 = 7;
const FULL_DATA: u64 = 8;

/// How inverse-bound samples are drawn; recorded with the results.
pub const SCATTER_SCHEME: &str = "each sample perturbs G0 with radius r·u, u ~ U(0,1], using measures::perturb; \
E_X V uses one set of covariate draws shared by all samples";

/// Stream tags mixed into the master seed, by purpose. Every derived seed is
/// `seed::derive(master, &[tag, ..indices])`.
pub fn stream_tags() -> BTreeMap<&'static str, u64> {
    BTreeMap::from([
        ("simulate", SIMULATE),
        ("fit", FIT),
        ("chain", CHAIN),
        ("perturb", PERTURB),
        ("radius", RADIUS),
        ("covariates", COVARIATES),
        ("subsample", SUBSAMPLE),
        ("full_data", FULL_DATA),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Exact,
    Overfit,
}

impl Setting {
    fn order(self) -> u32 {
        match self {
            Setting::Exact => 1,
            Setting::Overfit => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Setting::Exact => "exact",
            Setting::Overfit => "overfit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Variant {
    InverseBoundScatter {
        radius: f64,
        samples: usize,
        mc_points: usize,
        /// Fixed measures evaluated alongside the random samples.
        #[serde(default)]
        probes: Vec<MixingMeasure>,
    },
    RateCurve {
        setting: Setting,
        n_grid: Vec<usize>,
        replicates: usize,
        /// Fit settings; the seed is replaced per replicate.
        em: EMConfig,
    },
    PosteriorContraction {
        n_grid: Vec<usize>,
        replicates: usize,
        mcmc: MCMCConfig,
        #[serde(default)]
        prior: PriorSpec,
        #[serde(default)]
        scale: DispersionScale,
    },
    SubsampleStability {
        n_grid: Vec<usize>,
        replicates: usize,
        band: f64,
        /// Rows simulated from the truth when no dataset is supplied.
        full_n: usize,
        em: EMConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(flatten)]
    pub variant: Variant,
    pub model: ModelShape,
    pub truth: MixingMeasure,
    pub covariates: CovariateDistribution,
    pub seed: u64,
}

/// One long-format row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub arm: String,
    pub n: usize,
    pub replicate: usize,
    pub metric: String,
    pub value: f64,
    pub ok: bool,
}

/// Replicate summary at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub arm: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub failures: usize,
    /// Analytic reference curves evaluated at n.
    pub reference: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSlope {
    pub arm: String,
    pub metric: String,
    #[serde(flatten)]
    pub fit: SlopeFit,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterStats {
    pub samples: usize,
    pub min_ratio: f64,
    pub median_ratio: f64,
    /// Smallest ratio among samples with W1 < 0.05.
    pub min_ratio_small_w1: Option<f64>,
    pub small_w1_samples: usize,
    /// Samples with W1 ≥ 0.05 and E_X V ≤ 1e-9.
    pub bound_violations: usize,
    pub scheme: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    pub curves: Vec<CurvePoint>,
    pub slopes: Vec<ArmSlope>,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scatter: Option<ScatterStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<GapSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_fit: Option<MixingMeasure>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<Record>,
    pub summary: Summary,
}

impl ExperimentResult {
    /// Values of `metric` on `arm` indexed by [n index][replicate], NaN for failures.
    pub fn table(&self, arm: &str, metric: &str) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.arm == arm && r.metric == metric) {
            out.entry(r.n).or_default().push((r.replicate, r.value));
        }
        out.into_iter()
            .map(|(n, mut v)| {
                v.sort_by_key(|p| p.0);
                (n, v.into_iter().map(|p| p.1).collect())
            })
            .collect()
    }

    pub fn write_records_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn check_grid(n_grid: &[usize], replicates: usize) -> Result<()> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid[0] == 0 {
        return Err(Error::InvalidParameter("n_grid must be nonempty, positive and strictly increasing".into()));
    }
    if replicates == 0 {
        return Err(Error::InvalidParameter("replicates must be >= 1".into()));
    }
    Ok(())
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_measure(&self.truth)?;
        self.covariates.validate()?;
        if self.covariates.dim() != self.model.covariate_dim() {
            return Err(Error::DimensionMismatch(format!(
                "covariate distribution has dimension {}, model needs {}",
                self.covariates.dim(),
                self.model.covariate_dim()
            )));
        }
        match &self.variant {
            Variant::InverseBoundScatter { radius, samples, mc_points, probes } => {
                if !(*radius > 0.0) || *samples == 0 || *mc_points == 0 {
                    return Err(Error::InvalidParameter("radius, samples and mc_points must be positive".into()));
                }
                for p in probes {
                    self.model.check_measure(p)?;
                }
            }
            Variant::RateCurve { n_grid, replicates, em, .. } => {
                check_grid(n_grid, *replicates)?;
                em.validate(&self.model)?;
            }
            Variant::PosteriorContraction { n_grid, replicates, mcmc, .. } => {
                check_grid(n_grid, *replicates)?;
                mcmc.validate()?;
            }
            Variant::SubsampleStability { n_grid, replicates, band, full_n, em } => {
                check_grid(n_grid, *replicates)?;
                em.validate(&self.model)?;
                if !(*band >= 0.0) || *full_n == 0 {
                    return Err(Error::InvalidParameter("band must be >= 0 and full_n >= 1".into()));
                }
            }
        }
        Ok(())
    }

    fn truth_model(&self) -> Result<MixtureRegressionModel> {
        MixtureRegressionModel::new(self.model.clone(), self.truth.clone())
    }

    /// Binomial N = 1 without covariates, G0 = ½δ_0.3 + ½δ_0.7, with mean-preserving probes.
    pub fn inverse_bound_binomial() -> Self {
        let probes = [0.05, 0.1, 0.15, 0.25, 0.3, 0.35, 0.4, 0.45]
            .iter()
            .map(|d| MixingMeasure::from_parts(&[0.5, 0.5], &[vec![0.5 - d], vec![0.5 + d]], &[]).expect("valid probe"))
            .collect();
        ExperimentSpec {
            name: "inverse_bound_binomial".into(),
            variant: Variant::InverseBoundScatter {
                radius: 0.3,
                samples: 2000,
                mc_points: 1,
                probes,
            },
            model: ModelShape::new(Kernel::Binomial { n: 1 }, Link::IdentityConstant, Dispersion::None)
                .with_bounds(ParamBox::new(&[(0.0, 1.0)], &[])),
            truth: MixingMeasure::from_parts(&[0.5, 0.5], &[vec![0.3], vec![0.7]], &[]).expect("valid truth"),
            covariates: CovariateDistribution::none(),
            seed: 20240101,
        }
    }

    /// Two logistic regressions σ(θx), G0 = ½δ_0.5 + ½δ_5, X ~ U[−6, 6].
    pub fn inverse_bound_logistic() -> Self {
        ExperimentSpec {
            name: "inverse_bound_logistic".into(),
            variant: Variant::InverseBoundScatter {
                radius: 0.3,
                samples: 2000,
                mc_points: 2000,
                probes: vec![],
            },
            model: ModelShape::new(
                Kernel::Binomial { n: 1 },
                Link::SigmoidLinear { p: 1, intercept: false },
                Dispersion::None,
            ),
            truth: MixingMeasure::from_parts(&[0.5, 0.5], &[vec![0.5], vec![5.0]], &[]).expect("valid truth"),
            covariates: CovariateDistribution::uniform(-6.0, 6.0),
            seed: 20240102,
        }
    }

    /// Normal kernel with σ² = 1, quadratic link, θ1 = (1, −5, 1), θ2 = (2, 5, 2), X ~ U[−3, 3].
    pub fn rate_curve(setting: Setting) -> Self {
        let k = match setting {
            Setting::Exact => 2,
            Setting::Overfit => 3,
        };
        let mut em = EMConfig::new(k, MStep::ClosedForm, 0);
        em.restarts = 32;
        em.collapse_guard = setting == Setting::Exact;
        ExperimentSpec {
            name: format!("rate_curve_{}", setting.name()),
            variant: Variant::RateCurve {
                setting,
                n_grid: (0..7).map(|i| 200 << i).collect(),
                replicates: 16,
                em,
            },
            model: ModelShape::new(
                Kernel::NormalFixed { sigma2: 1.0 },
                Link::Polynomial { degree: 2, p: 1 },
                Dispersion::None,
            )
            .with_bounds(ParamBox::new(&[(-10.0, 10.0); 3], &[])),
            truth: MixingMeasure::from_parts(&[0.5, 0.5], &[vec![1.0, -5.0, 1.0], vec![2.0, 5.0, 2.0]], &[])
                .expect("valid truth"),
            covariates: CovariateDistribution::uniform(-3.0, 3.0),
            seed: 20240103,
        }
    }

    /// Two NB regressions with log-linear means, θ1 = (0, 1), θ2 = (log 3, 1), φ = (0.5, 1.5).
    pub fn posterior_contraction() -> Self {
        ExperimentSpec {
            name: "posterior_contraction".into(),
            variant: Variant::PosteriorContraction {
                n_grid: vec![200, 800, 3200],
                replicates: 8,
                mcmc: MCMCConfig::new(2500, 500, 0),
                prior: PriorSpec::default(),
                scale: DispersionScale::Eta,
            },
            model: ModelShape::new(
                Kernel::NegBin,
                Link::LogLinear { p: 1 },
                Dispersion::Link { link: Link::IdentityConstant },
            ),
            truth: MixingMeasure::from_parts(&[0.4, 0.6], &[vec![0.0, 1.0], vec![3f64.ln(), 1.0]], &[vec![0.5], vec![1.5]])
                .expect("valid truth"),
            covariates: CovariateDistribution::uniform(0.0, 5.0),
            seed: 20240104,
        }
    }

    /// Crash-style NB mixture μ = θ0·F1^θ1·F2^θ2 with φ = (9.3692, 8.2437).
    pub fn subsample_stability() -> Self {
        let truth = MixingMeasure::from_parts(
            &[0.43, 0.57],
            &[vec![-10.9407, 0.8588, 0.5056], vec![-9.7842, 0.3987, 0.8703]],
            &[vec![9.3692], vec![8.2437]],
        )
        .expect("valid truth");
        let mut em = EMConfig::new(2, MStep::Em1Newton { backtracking: true }, 0);
        em.init = Init::Supplied { measure: truth.clone() };
        ExperimentSpec {
            name: "subsample_stability".into(),
            variant: Variant::SubsampleStability {
                n_grid: vec![100, 200, 300, 400],
                replicates: 8,
                band: 0.3,
                full_n: 868,
                em,
            },
            model: ModelShape::new(
                Kernel::NegBin,
                Link::PowerProduct { p: 2, theta0: Theta0Scale::Log },
                Dispersion::Link { link: Link::IdentityConstant },
            ),
            truth,
            covariates: CovariateDistribution::LogUniform {
                lo: vec![10000.0, 200.0],
                hi: vec![80000.0, 20000.0],
            },
            seed: 20240105,
        }
    }
}

/// OLS of log(error) on log(n).
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(n, e)| !(n > 0.0 && e > 0.0) || !n.is_finite() || !e.is_finite()) {
        return Err(Error::InvalidParameter("log-log fit needs positive finite values".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("log-log fit needs distinct n".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

pub fn reference_log_rate(n: f64, power: f64) -> f64 {
    (n.ln() / n).powf(power)
}

fn references(names: &[&str], n: usize) -> BTreeMap<String, f64> {
    let nf = n as f64;
    names
        .iter()
        .map(|&name| {
            let v = match name {
                "log_n_over_n_pow_half" => reference_log_rate(nf, 0.5),
                "log_n_over_n_pow_quarter" => reference_log_rate(nf, 0.25),
                "inv_log_n" => 1.0 / nf.ln(),
                "n_pow_minus_half" => nf.powf(-0.5),
                _ => f64::NAN,
            };
            (name.to_string(), v)
        })
        .collect()
}

fn summarize(records: &[Record], refs: &[&str]) -> (Vec<CurvePoint>, usize) {
    let mut groups: BTreeMap<(String, String, usize), Vec<&Record>> = BTreeMap::new();
    for r in records {
        groups.entry((r.arm.clone(), r.metric.clone(), r.n)).or_default().push(r);
    }
    let mut failures = 0;
    let curves = groups
        .into_iter()
        .map(|((arm, metric, n), rs)| {
            let mut ok: Vec<f64> = rs.iter().filter(|r| r.ok).map(|r| r.value).collect();
            let failed = rs.len() - ok.len();
            failures += failed;
            ok.sort_by(f64::total_cmp);
            let (mean, median, q25, q75) = if ok.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                (
                    ok.iter().sum::<f64>() / ok.len() as f64,
                    bayes::quantile(&ok, 0.5),
                    bayes::quantile(&ok, 0.25),
                    bayes::quantile(&ok, 0.75),
                )
            };
            CurvePoint {
                arm,
                metric,
                n,
                mean,
                median,
                q25,
                q75,
                failures: failed,
                reference: references(refs, n),
            }
        })
        .collect();
    (curves, failures)
}

fn slopes(curves: &[CurvePoint], metric: &str, notes: &mut Vec<String>) -> Vec<ArmSlope> {
    let mut arms: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for c in curves.iter().filter(|c| c.metric == metric) {
        let pts = arms.entry(c.arm.as_str()).or_default();
        if c.mean > 0.0 && c.mean.is_finite() {
            pts.push((c.n as f64, c.mean));
        } else {
            notes.push(format!("{} {} at n = {} left out of the slope fit (mean {})", c.arm, metric, c.n, c.mean));
        }
    }
    arms.into_iter()
        .filter_map(|(arm, pts)| match fit_loglog_slope(&pts) {
            Ok(fit) => Some(ArmSlope {
                arm: arm.to_string(),
                metric: metric.to_string(),
                fit,
                points: pts.len(),
            }),
            Err(e) => {
                notes.push(format!("no slope for {arm} {metric}: {e}"));
                None
            }
        })
        .collect()
}

fn record(arm: &str, n: usize, replicate: usize, metric: &str, value: Option<f64>) -> Record {
    let (value, ok) = match value {
        Some(v) if v.is_finite() => (v, true),
        _ => (f64::NAN, false),
    };
    Record {
        arm: arm.into(),
        n,
        replicate,
        metric: metric.into(),
        value,
        ok,
    }
}

/// Runs the study. `data` replaces the simulated full dataset of a subsample study.
pub fn run(spec: &ExperimentSpec, data: Option<&Dataset>) -> Result<ExperimentResult> {
    spec.validate()?;
    match &spec.variant {
        Variant::InverseBoundScatter { .. } => run_inverse_bound(spec),
        Variant::RateCurve { .. } => run_rate_curve(spec),
        Variant::PosteriorContraction { .. } => run_posterior_contraction(spec),
        Variant::SubsampleStability { .. } => {
            let full = match data {
                Some(d) => d.clone(),
                None => simulate_full(spec)?,
            };
            run_subsample_stability(spec, &full)
        }
    }
}

/// Scatter of (W1(G, G0), E_X V(f_G, f_G0)) over perturbed measures and probes.
pub fn run_inverse_bound(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let Variant::InverseBoundScatter { radius, samples, mc_points, probes } = &spec.variant else {
        return Err(Error::InvalidParameter("not an inverse-bound spec".into()));
    };
    spec.validate()?;
    let truth = spec.truth_model()?;
    let points = if spec.covariates.dim() == 0 { 1 } else { *mc_points };
    let xs = spec.covariates.sample_many(points, seed::derive(spec.seed, &[COVARIATES]))?;
    let evaluate = |g: &MixingMeasure| -> Result<(f64, f64)> {
        let w1 = measures::wasserstein_distance(g, &spec.truth, 1)?;
        let m = MixtureRegressionModel::new(spec.model.clone(), g.clone())?;
        let mut tv = 0.0;
        for x in &xs {
            tv += model::total_variation_at(&m, &truth, x)?;
        }
        Ok((w1, tv / xs.len() as f64))
    };
    let random: Vec<Result<(f64, f64)>> = (0..*samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(spec.seed, &[RADIUS, i as u64]));
            let u: f64 = 1.0 - rand::Rng::random::<f64>(&mut rng);
            let g = measures::perturb(&spec.truth, radius * u, seed::derive(spec.seed, &[PERTURB, i as u64]))?;
            evaluate(&g)
        })
        .collect();
    let probe_vals: Vec<Result<(f64, f64)>> = probes.par_iter().map(evaluate).collect();
    let mut records = Vec::with_capacity(2 * (random.len() + probe_vals.len()));
    let mut pairs = Vec::new();
    for (arm, vals) in [("random", &random), ("probe", &probe_vals)] {
        for (i, v) in vals.iter().enumerate() {
            let v = v.as_ref().ok();
            records.push(record(arm, 0, i, "w1", v.map(|p| p.0)));
            records.push(record(arm, 0, i, "expected_tv", v.map(|p| p.1)));
            if let Some(&p) = v {
                pairs.push(p);
            }
        }
    }
    let failures = records.iter().filter(|r| !r.ok).count() / 2;
    let mut ratios: Vec<f64> = pairs.iter().filter(|p| p.0 > 1e-6).map(|p| p.1 / p.0).collect();
    ratios.sort_by(f64::total_cmp);
    let small: Vec<f64> = pairs.iter().filter(|p| p.0 > 1e-6 && p.0 < 0.05).map(|p| p.1 / p.0).collect();
    let stats = ScatterStats {
        samples: pairs.len(),
        min_ratio: ratios.first().copied().unwrap_or(f64::NAN),
        median_ratio: if ratios.is_empty() { f64::NAN } else { bayes::quantile(&ratios, 0.5) },
        min_ratio_small_w1: small.iter().copied().reduce(f64::min),
        small_w1_samples: small.len(),
        bound_violations: pairs.iter().filter(|p| p.0 >= 0.05 && p.1 <= 1e-9).count(),
        scheme: format!("{SCATTER_SCHEME}; {}", measures::PERTURBATION_SCHEME),
    };
    Ok(ExperimentResult {
        records,
        summary: Summary {
            failures,
            scatter: Some(stats),
            ..Summary::default()
        },
    })
}

/// Data for replicate `rep`: the first n rows of one draw at the largest n, so
/// sample sizes within a replicate are nested.
fn nested_data(spec: &ExperimentSpec, truth: &MixtureRegressionModel, n_max: usize, rep: usize) -> Result<Dataset> {
    Ok(truth
        .simulate(&spec.covariates, n_max, seed::derive(spec.seed, &[SIMULATE, rep as u64]))?
        .data)
}

fn prefix(data: &Dataset, n: usize) -> Dataset {
    data.subset(&(0..n).collect::<Vec<_>>())
}

/// EM error curve: W1 (exact) or W2 (over-fitted) to the truth across n.
pub fn run_rate_curve(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let Variant::RateCurve { setting, n_grid, replicates, em } = &spec.variant else {
        return Err(Error::InvalidParameter("not a rate-curve spec".into()));
    };
    spec.validate()?;
    let truth = spec.truth_model()?;
    let n_max = *n_grid.last().expect("validated");
    let data: Vec<Dataset> = (0..*replicates)
        .into_par_iter()
        .map(|rep| nested_data(spec, &truth, n_max, rep))
        .collect::<Result<_>>()?;
    let metric = format!("w{}", setting.order());
    let jobs: Vec<(usize, usize)> = (0..n_grid.len()).flat_map(|i| (0..*replicates).map(move |r| (i, r))).collect();
    let records: Vec<Record> = jobs
        .par_iter()
        .map(|&(i, rep)| {
            let mut cfg = em.clone();
            cfg.seed = seed::derive(spec.seed, &[FIT, i as u64, rep as u64]);
            let value = em::fit(&cfg, &prefix(&data[rep], n_grid[i]), &spec.model)
                .and_then(|r| measures::wasserstein_distance(&r.g_hat, &spec.truth, setting.order()));
            record(setting.name(), n_grid[i], rep, &metric, value.ok())
        })
        .collect();
    let (curves, failures) = summarize(&records, &["log_n_over_n_pow_half", "log_n_over_n_pow_quarter"]);
    let mut notes = Vec::new();
    let slopes = slopes(&curves, &metric, &mut notes);
    Ok(ExperimentResult {
        records,
        summary: Summary {
            curves,
            slopes,
            failures,
            notes,
            ..Summary::default()
        },
    })
}

/// Per-replicate EM error at one n from a truth start and from the configured
/// random starts: (truth-initialized, random-initialized).
pub fn init_comparison(spec: &ExperimentSpec, n: usize, replicates: usize) -> Result<Vec<(Result<f64>, Result<f64>)>> {
    let Variant::RateCurve { setting, em, .. } = &spec.variant else {
        return Err(Error::InvalidParameter("not a rate-curve spec".into()));
    };
    spec.validate()?;
    let truth = spec.truth_model()?;
    Ok((0..replicates)
        .into_par_iter()
        .map(|rep| {
            let data = nested_data(spec, &truth, n, rep)?;
            let mut cfg = em.clone();
            cfg.seed = seed::derive(spec.seed, &[FIT, u64::MAX, rep as u64]);
            let err = |c: &EMConfig| {
                em::fit(c, &data, &spec.model)
                    .and_then(|r| measures::wasserstein_distance(&r.g_hat, &spec.truth, setting.order()))
            };
            let mut from_truth = cfg.clone();
            from_truth.restarts = 1;
            from_truth.init = Init::Supplied {
                measure: pad_truth(&spec.truth, cfg.k)?,
            };
            Ok((err(&from_truth), err(&cfg)))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?)
}

/// The truth with extra atoms split off its heaviest one when K exceeds k0.
fn pad_truth(truth: &MixingMeasure, k: usize) -> Result<MixingMeasure> {
    let mut atoms: Vec<Atom> = truth.atoms().to_vec();
    while atoms.len() < k {
        let (j, _) = atoms
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.weight.total_cmp(&b.1.weight))
            .expect("nonempty");
        atoms[j].weight /= 2.0;
        let mut twin = atoms[j].clone();
        for v in twin.theta1.iter_mut() {
            *v += 0.1;
        }
        atoms.push(twin);
    }
    MixingMeasure::normalized(atoms, truth.bounds().cloned())
}

/// Posterior W1 contraction of the Gibbs sampler across n.
pub fn run_posterior_contraction(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let Variant::PosteriorContraction { n_grid, replicates, mcmc, prior, scale } = &spec.variant else {
        return Err(Error::InvalidParameter("not a posterior-contraction spec".into()));
    };
    spec.validate()?;
    let truth = spec.truth_model()?;
    let n_max = *n_grid.last().expect("validated");
    let data: Vec<Dataset> = (0..*replicates)
        .into_par_iter()
        .map(|rep| nested_data(spec, &truth, n_max, rep))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..n_grid.len()).flat_map(|i| (0..*replicates).map(move |r| (i, r))).collect();
    let k = spec.truth.len();
    let records: Vec<Record> = jobs
        .par_iter()
        .flat_map_iter(|&(i, rep)| {
            let n = n_grid[i];
            let mut cfg = mcmc.clone();
            cfg.seed = seed::derive(spec.seed, &[CHAIN, i as u64, rep as u64]);
            let out = bayes::run_gibbs(&cfg, prior, &prefix(&data[rep], n), &spec.model, k).and_then(|chain| {
                let w = bayes::posterior_w1(&chain, &spec.truth, *scale)?;
                Ok((w, chain.theta_acceptance.rate(), chain.eta_acceptance.rate()))
            });
            let out = out.ok();
            let vals: [(&str, Option<f64>); 5] = [
                ("mean_w1", out.map(|o| o.0.mean)),
                ("q25_w1", out.map(|o| o.0.q25)),
                ("q75_w1", out.map(|o| o.0.q75)),
                ("theta_acceptance", out.map(|o| o.1)),
                ("eta_acceptance", out.map(|o| if o.2.is_nan() { -1.0 } else { o.2 })),
            ];
            vals.into_iter().map(move |(m, v)| record("gibbs", n, rep, m, v)).collect::<Vec<_>>()
        })
        .collect();
    let (curves, _) = summarize(&records, &["inv_log_n"]);
    let failures = records.iter().filter(|r| r.metric == "mean_w1" && !r.ok).count();
    let mut notes = vec!["eta_acceptance is -1 when the dispersion is not sampled".to_string()];
    let slopes = slopes(&curves, "mean_w1", &mut notes);
    Ok(ExperimentResult {
        records,
        summary: Summary {
            curves,
            slopes,
            failures,
            notes,
            ..Summary::default()
        },
    })
}

/// The full dataset of a subsample study simulated from its truth.
pub fn simulate_full(spec: &ExperimentSpec) -> Result<Dataset> {
    let Variant::SubsampleStability { full_n, .. } = &spec.variant else {
        return Err(Error::InvalidParameter("not a subsample-stability spec".into()));
    };
    Ok(spec
        .truth_model()?
        .simulate(&spec.covariates, *full_n, seed::derive(spec.seed, &[FULL_DATA]))?
        .data)
}

/// Subsample fits compared with the full-data fit, on all rows and on rows
/// whose ratio gap under the truth lies within the band.
pub fn run_subsample_stability(spec: &ExperimentSpec, full: &Dataset) -> Result<ExperimentResult> {
    let Variant::SubsampleStability { n_grid, replicates, band, em, .. } = &spec.variant else {
        return Err(Error::InvalidParameter("not a subsample-stability spec".into()));
    };
    spec.validate()?;
    full.check_support(&spec.model.kernel)?;
    if full.covariate_dim() != spec.model.covariate_dim() {
        return Err(Error::DimensionMismatch("dataset covariates do not match the model".into()));
    }
    let gap = identifiability::nb_pathology_gap(&spec.model, &spec.truth, &full.x, *band)?;
    let band_rows = gap.within.clone();
    let largest = *n_grid.last().expect("validated");
    if largest > full.len() {
        return Err(Error::InvalidParameter(format!(
            "subsample size {largest} exceeds the {} available rows",
            full.len()
        )));
    }
    // the reference and every subsample fit share one EM config, so a
    // subsample equal to the full data reproduces the reference exactly
    let reference = em::fit(em, full, &spec.model)?.g_hat;
    let banded = full.subset(&band_rows);
    let mut notes = vec![format!("{} of {} rows within the band |gap| <= {band}", band_rows.len(), full.len())];
    let arms: Vec<(&str, &Dataset)> = vec![("full", full), ("band", &banded)];
    let jobs: Vec<(usize, usize, usize)> = (0..arms.len())
        .flat_map(|a| (0..n_grid.len()).flat_map(move |i| (0..*replicates).map(move |r| (a, i, r))))
        .collect();
    let records: Vec<Record> = jobs
        .par_iter()
        .map(|&(a, i, rep)| {
            let (arm, data) = arms[a];
            let m = n_grid[i];
            let value = if m > data.len() {
                Err(Error::InvalidParameter(format!("subsample size {m} exceeds the {} rows of arm {arm}", data.len())))
            } else {
                let idx = em::subsample_indices(data.len(), m, seed::derive(spec.seed, &[SUBSAMPLE, a as u64, i as u64, rep as u64]));
                em::fit(em, &data.subset(&idx), &spec.model)
                    .and_then(|r| measures::wasserstein_distance(&r.g_hat, &reference, 1))
            };
            record(arm, m, rep, "w1", value.ok())
        })
        .collect();
    if n_grid.iter().any(|&m| m > banded.len()) {
        notes.push(format!("band arm has {} rows; larger subsample sizes are recorded as failures", banded.len()));
    }
    let (curves, failures) = summarize(&records, &["n_pow_minus_half"]);
    let slopes = slopes(&curves, "w1", &mut notes);
    Ok(ExperimentResult {
        records,
        summary: Summary {
            curves,
            slopes,
            failures,
            gap: Some(gap),
            reference_fit: Some(reference),
            notes,
            ..Summary::default()
        },
    })
}

/// value(n_hi)/value(n_lo) for each replicate, None where either failed.
pub fn replicate_ratios(result: &ExperimentResult, arm: &str, metric: &str, n_lo: usize, n_hi: usize) -> Vec<Option<f64>> {
    let t = result.table(arm, metric);
    match (t.get(&n_lo), t.get(&n_hi)) {
        (Some(lo), Some(hi)) => lo
            .iter()
            .zip(hi)
            .map(|(a, b)| if a.is_finite() && b.is_finite() && *a > 0.0 { Some(b / a) } else { None })
            .collect(),
        _ => vec![],
    }
}

/// Exact-fitted normal EM on the same n grid and replicate count as a
/// contraction spec; its per-replicate error ratios are the regular-rate control.
pub fn contraction_control(spec: &ExperimentSpec) -> Result<ExperimentSpec> {
    let Variant::PosteriorContraction { n_grid, replicates, .. } = &spec.variant else {
        return Err(Error::InvalidParameter("not a posterior-contraction spec".into()));
    };
    let mut control = ExperimentSpec::rate_curve(Setting::Exact);
    if let Variant::RateCurve {
        n_grid: g, replicates: r, ..
    } = &mut control.variant
    {
        *g = n_grid.clone();
        *r = *replicates;
    }
    control.name = format!("{}_control", spec.name);
    control.seed = spec.seed;
    Ok(control)
}

/// Per replicate: does the posterior error shrink more slowly than a regular
/// rate would allow, W1(n_hi) ≥ floor·W1(n_lo)? None where either run failed.
/// A parametric rate gives (n_lo/n_hi)^{1/2}, so floor = 0.5 for n_hi = 4·n_lo.
pub fn contraction_contrast(slow: &ExperimentResult, n_lo: usize, n_hi: usize, floor: f64) -> Vec<Option<bool>> {
    replicate_ratios(slow, "gibbs", "mean_w1", n_lo, n_hi)
        .into_iter()
        .map(|r| r.map(|r| r >= floor))
        .collect()
}
