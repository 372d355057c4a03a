//! Simulation designs: Karhunen–Loève image samples built from a known
//! orthonormal family, AR-correlated covariates, linear responses, and a
//! seeded Monte Carlo harness that scores the full pipeline against truth.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{bspline_tensor_basis, BasisSet};
use crate::error::{Error, Result};
use crate::hspcr::{fit_hspcr, gamma_from_scores, plugin_theta_cov};
use crate::inference::{
    bootstrap_point, fit_pipeline_from_model, jackknife_point, BootstrapKind, BootstrapSpec, ComponentRule,
    JackknifeSpec, ResponseData,
};
use crate::normal::normal_quantile;
use crate::pca::{fit_in_frame, select_pve, Frame};
use crate::rng::{mix64, purpose, stream_rng};
use crate::space::{AmbientSpace, Element, SampleSet, DEFAULT_DROP_TOL};

/// Ground-truth function families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Gaussian bumps on the unit square, orthonormalised in order.
    Synthetic2d,
    /// The radial quadratic and radial Gaussian on the unit cube,
    /// orthonormalised in that order.
    QuadraticGauss3d,
}

/// Centre (unit coordinates) and width of each 2D bump, in order.
pub const BUMPS_2D: [([f64; 2], f64); 8] = [
    ([0.30, 0.35], 0.16),
    ([0.70, 0.30], 0.14),
    ([0.50, 0.70], 0.15),
    ([0.25, 0.75], 0.12),
    ([0.75, 0.72], 0.12),
    ([0.50, 0.45], 0.10),
    ([0.15, 0.50], 0.11),
    ([0.85, 0.50], 0.11),
];

impl FamilyKind {
    pub fn max_components(self) -> usize {
        match self {
            FamilyKind::Synthetic2d => BUMPS_2D.len(),
            FamilyKind::QuadraticGauss3d => 2,
        }
    }

    pub fn ndim(self) -> usize {
        match self {
            FamilyKind::Synthetic2d => 2,
            FamilyKind::QuadraticGauss3d => 3,
        }
    }

    /// Raw (pre-orthonormalisation) function `j` at unit coordinates `s`.
    fn raw(self, j: usize, s: &[f64]) -> f64 {
        match self {
            FamilyKind::Synthetic2d => {
                let (c, w) = BUMPS_2D[j];
                let d2 = (s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2);
                (-d2 / (2.0 * w * w)).exp()
            }
            FamilyKind::QuadraticGauss3d => {
                let r2: f64 = s.iter().map(|x| (x - 0.5).powi(2)).sum();
                if j == 0 {
                    20.0 * r2
                } else {
                    (-15.0 * r2).exp()
                }
            }
        }
    }
}

/// Known orthonormal functions `phi_j`, one per row.
#[derive(Debug, Clone)]
pub struct TrueFamily {
    functions: DMatrix<f64>,
}

impl TrueFamily {
    pub fn functions(&self) -> &DMatrix<f64> {
        &self.functions
    }

    pub fn len(&self) -> usize {
        self.functions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.nrows() == 0
    }

    /// `Σ_j c_j phi_j`.
    pub fn combination(&self, coefs: &[f64]) -> Result<Element> {
        if coefs.len() != self.len() {
            return Err(Error::Conformance {
                what: "family coefficients",
                expected: self.len(),
                found: coefs.len(),
            });
        }
        let v = DVector::from_column_slice(coefs);
        Element::new((self.functions.transpose() * v).as_slice().to_vec())
    }
}

/// Modified Gram–Schmidt on the rows of `raw` under the space inner
/// product. Breaks down when a row keeps less than `1e-8` of its norm.
pub fn gram_schmidt(space: &AmbientSpace, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    space.check_len("family function", raw.ncols())?;
    let w = space.weights();
    let ip = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(w).map(|((x, y), w)| w * x * y).sum() };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(raw.nrows());
    for r in 0..raw.nrows() {
        let mut v: Vec<f64> = raw.row(r).iter().copied().collect();
        let orig = ip(&v, &v).sqrt();
        for q in &rows {
            let c = ip(&v, q);
            for (x, y) in v.iter_mut().zip(q) {
                *x -= c * y;
            }
        }
        let nrm = ip(&v, &v).sqrt();
        if !(nrm > 1e-8 * orig) {
            return Err(Error::Family(format!(
                "function {r} is linearly dependent on its predecessors"
            )));
        }
        v.iter_mut().for_each(|x| *x /= nrm);
        rows.push(v);
    }
    Ok(DMatrix::from_fn(rows.len(), raw.ncols(), |r, c| rows[r][c]))
}

/// Evaluate the first `j` functions of a family at the unit-mapped cell
/// centres and orthonormalise them.
pub fn make_family(space: &AmbientSpace, kind: FamilyKind, j: usize) -> Result<TrueFamily> {
    if space.ndim() != kind.ndim() {
        return Err(Error::Family(format!(
            "{kind:?} needs a {}-dimensional grid, got {}",
            kind.ndim(),
            space.ndim()
        )));
    }
    if j == 0 || j > kind.max_components() {
        return Err(Error::Family(format!(
            "{kind:?} provides 1 to {} functions, {j} requested",
            kind.max_components()
        )));
    }
    let v = space.cell_count();
    let centres: Vec<Vec<f64>> = (0..v).map(|c| space.unit_center(c)).collect();
    let raw = DMatrix::from_fn(j, v, |r, c| kind.raw(r, &centres[c]));
    Ok(TrueFamily {
        functions: gram_schmidt(space, &raw)?,
    })
}

/// `n × J` matrix of i.i.d. standard normals.
pub fn gen_normal_matrix(n: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // row-major fill so each observation's draws are contiguous in the stream
    let mut m = DMatrix::zeros(n, cols);
    for i in 0..n {
        for c in 0..cols {
            m[(i, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// `Z_i = Σ_j sqrt(lambda_j) U_ij phi_j` for given standardised scores `u`.
pub fn kl_sample_from_scores(family: &TrueFamily, lambdas: &[f64], u: &DMatrix<f64>) -> Result<SampleSet> {
    if lambdas.len() != family.len() || u.ncols() != family.len() {
        return Err(Error::Conformance {
            what: "eigenvalues",
            expected: family.len(),
            found: lambdas.len().min(u.ncols()),
        });
    }
    let mut scaled = u.clone();
    for (mut col, l) in scaled.column_iter_mut().zip(lambdas) {
        col *= l.max(0.0).sqrt();
    }
    SampleSet::from_matrix(scaled * family.functions())
}

/// Karhunen–Loève sample with standard normal scores and zero mean.
pub fn gen_kl_sample(family: &TrueFamily, lambdas: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<SampleSet> {
    let u = gen_normal_matrix(n, family.len(), rng);
    kl_sample_from_scores(family, lambdas, &u)
}

/// `Omega_d(r)` with entries `r^|l − l'|`.
pub fn ar_covariance(d: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |a, b| r.powi((a as i32 - b as i32).abs()))
}

/// Rows i.i.d. `N(0, Omega_d(r))` through the Cholesky factor of `Omega`.
pub fn gen_ar_covariates(n: usize, d: usize, r: f64, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Config(format!("AR correlation must lie in [0, 1), got {r}")));
    }
    let g = gen_normal_matrix(n, d, rng);
    if d == 0 {
        return Ok(g);
    }
    let chol = ar_covariance(d, r)
        .cholesky()
        .ok_or_else(|| Error::Config("AR covariance is not positive definite".into()))?;
    Ok(g * chol.l().transpose())
}

/// `y_i = alpha + betaᵀX_i + <gamma, Z_i> + eps_i`, `eps ~ N(0, noise_sd²)`.
#[allow(clippy::too_many_arguments)]
pub fn gen_response(
    space: &AmbientSpace,
    x: &DMatrix<f64>,
    sample: &SampleSet,
    gamma: &Element,
    alpha: f64,
    beta: &[f64],
    noise_sd: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    space.check_len("gamma", gamma.len())?;
    space.check_len("sample row", sample.cell_count())?;
    if x.nrows() != sample.n() || x.ncols() != beta.len() {
        return Err(Error::Conformance {
            what: "covariates",
            expected: sample.n() * beta.len(),
            found: x.nrows() * x.ncols(),
        });
    }
    let g = DMatrix::from_row_slice(1, gamma.len(), gamma.values());
    let zg = space.cross(sample.matrix(), &g);
    let b = DVector::from_column_slice(beta);
    let xb = x * b;
    Ok(DVector::from_fn(sample.n(), |i, _| {
        let eps: f64 = if noise_sd > 0.0 {
            rng.sample::<f64, _>(StandardNormal) * noise_sd
        } else {
            0.0
        };
        alpha + xb[i] + zg[(i, 0)] + eps
    }))
}

/// Tensor B-spline basis used to fit simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub degree: usize,
    pub interior_knots: usize,
}

impl BasisConfig {
    pub fn build(&self, space: &AmbientSpace) -> Result<BasisSet> {
        let nd = space.ndim();
        bspline_tensor_basis(space, &vec![self.degree; nd], &vec![self.interior_knots; nd])
    }
}

/// How each replicate quantifies uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum McInference {
    None,
    Bootstrap { wild: bool, b_reps: usize },
    Plugin,
    Jackknife { r: usize },
}

/// One simulation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dims: Vec<usize>,
    pub family_kind: FamilyKind,
    pub lambdas: Vec<f64>,
    pub alpha0: f64,
    pub beta0: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub r: f64,
    pub n: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub basis: BasisConfig,
    pub tau: f64,
    pub level: f64,
    pub inference: McInference,
}

/// Desk-scale and full-scale grid sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Full,
}

impl ScenarioConfig {
    /// The six-component 2D design: eigenvalues 3.5 to 1, four covariates,
    /// unit intercept and slopes.
    pub fn analog_2d(scale: Scale, n: usize, r: f64, seed: u64) -> Self {
        let (dims, knots) = match scale {
            Scale::Desk => (vec![20, 24], 10),
            Scale::Full => (vec![79, 95], 12),
        };
        Self {
            dims,
            family_kind: FamilyKind::Synthetic2d,
            lambdas: vec![3.5, 3.0, 2.5, 2.0, 1.5, 1.0],
            alpha0: 1.0,
            beta0: vec![1.0; 4],
            gamma0: vec![1.5, 1.0, 2.0, 2.5, 1.5, 3.0],
            r,
            n,
            noise_sd: 1.0,
            seed,
            basis: BasisConfig {
                degree: 3,
                interior_knots: knots,
            },
            tau: 0.95,
            level: 0.95,
            inference: McInference::None,
        }
    }

    /// The two-component 3D design with eigenvalues (2, 1).
    pub fn analog_3d(scale: Scale, n: usize, r: f64, seed: u64) -> Self {
        let (dims, knots) = match scale {
            Scale::Desk => (vec![12, 14, 10], 3),
            Scale::Full => (vec![79, 95, 66], 3),
        };
        Self {
            dims,
            family_kind: FamilyKind::QuadraticGauss3d,
            lambdas: vec![2.0, 1.0],
            alpha0: 1.0,
            beta0: vec![1.0; 4],
            gamma0: vec![1.5, -1.0],
            r,
            n,
            noise_sd: 1.0,
            seed,
            basis: BasisConfig {
                degree: 3,
                interior_knots: knots,
            },
            tau: 0.95,
            level: 0.95,
            inference: McInference::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty()
            || self.lambdas.iter().any(|l| !(*l > 0.0))
            || self.lambdas.windows(2).any(|w| !(w[0] > w[1]))
        {
            return Err(Error::Config(
                "eigenvalues must be positive and strictly decreasing".into(),
            ));
        }
        if self.gamma0.len() != self.lambdas.len() {
            return Err(Error::Config(format!(
                "{} gamma coefficients for {} components",
                self.gamma0.len(),
                self.lambdas.len()
            )));
        }
        if !(0.0..1.0).contains(&self.r) {
            return Err(Error::Config(format!(
                "AR correlation must lie in [0, 1), got {}",
                self.r
            )));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be nonnegative".into()));
        }
        if self.n < 2 {
            return Err(Error::Config("sample size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.beta0.len()
    }
}

/// Everything generated for one replicate.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub sample: SampleSet,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Fixed ingredients shared by all replicates of a scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub space: AmbientSpace,
    pub family: TrueFamily,
    pub gamma: Element,
    pub basis: BasisSet,
    pub frame: Frame,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let space = AmbientSpace::grid(&config.dims)?;
        let family = make_family(&space, config.family_kind, config.lambdas.len())?;
        let gamma = family.combination(&config.gamma0)?;
        let basis = config.basis.build(&space)?;
        let frame = Frame::new(&space, &basis, DEFAULT_DROP_TOL)?;
        Ok(Self {
            config,
            space,
            family,
            gamma,
            basis,
            frame,
        })
    }

    /// Data for replicate `rep`. Images, covariates and noise come from
    /// separate streams, so scenarios differing only in `r` share images.
    pub fn generate(&self, rep: u64) -> Result<SimulatedData> {
        let c = &self.config;
        let sample = gen_kl_sample(
            &self.family,
            &c.lambdas,
            c.n,
            &mut stream_rng(c.seed, purpose::SCORES, rep),
        )?;
        let x = gen_ar_covariates(c.n, c.d(), c.r, &mut stream_rng(c.seed, purpose::COVARIATES, rep))?;
        let y = gen_response(
            &self.space,
            &x,
            &sample,
            &self.gamma,
            c.alpha0,
            &c.beta0,
            c.noise_sd,
            &mut stream_rng(c.seed, purpose::NOISE, rep),
        )?;
        Ok(SimulatedData { sample, x, y })
    }

    /// Parameter names and true values: `lambda_j`, then `alpha`,
    /// `beta_k`, `gamma_j`.
    pub fn truth(&self) -> Vec<(String, f64)> {
        let c = &self.config;
        let mut out: Vec<(String, f64)> = c
            .lambdas
            .iter()
            .enumerate()
            .map(|(j, l)| (format!("lambda{}", j + 1), *l))
            .collect();
        out.push(("alpha".into(), c.alpha0));
        out.extend(c.beta0.iter().enumerate().map(|(k, b)| (format!("beta{}", k + 1), *b)));
        out.extend(
            c.gamma0
                .iter()
                .enumerate()
                .map(|(j, g)| (format!("gamma{}", j + 1), *g)),
        );
        out
    }

    /// Run the pipeline on one replicate and score it against truth.
    pub fn run_replicate(&self, rep: u64) -> Result<RepRecord> {
        let c = &self.config;
        let data = self.generate(rep)?;
        let mut model = fit_in_frame(&self.space, self.frame.clone(), &data.sample)?;
        model.align_signs_to(&self.space, self.family.functions());
        let big_j = c.lambdas.len();
        let lambdas_hat: Vec<f64> = (0..big_j)
            .map(|j| model.lambdas().get(j).copied().unwrap_or(0.0))
            .collect();
        let phi_err: Vec<f64> = (0..big_j)
            .map(|j| {
                let truth = self.family.functions().row(j);
                let diff: Vec<f64> = match j < model.rank() {
                    true => model
                        .eigenfunctions()
                        .row(j)
                        .iter()
                        .zip(truth.iter())
                        .map(|(a, b)| a - b)
                        .collect(),
                    false => truth.iter().copied().collect(),
                };
                diff.iter().zip(self.space.weights()).map(|(d, w)| w * d * d).sum()
            })
            .collect();
        let m_hat = select_pve(&model, c.tau)?.m;
        let mut record = RepRecord {
            rep,
            lambdas_hat,
            phi_err,
            m_hat,
            theta_hat: vec![],
            se: vec![],
            covered: vec![],
            gamma_err: f64::NAN,
        };
        let response = ResponseData::new(data.y.clone(), data.x.clone());
        let point = fit_pipeline_from_model(&self.space, model, &data.sample, &response, ComponentRule::Pve(c.tau))?;
        let p_true = 1 + c.d() + big_j;
        let truth: Vec<f64> = self.truth().into_iter().skip(big_j).map(|t| t.1).collect();
        let theta_hat: Vec<f64> = (0..p_true)
            .map(|k| point.theta.get(k).copied().unwrap_or(0.0))
            .collect();
        let gamma_hat = gamma_from_scores(&point.theta.as_slice()[1 + c.d()..], &point.model)?;
        record.gamma_err = gamma_hat
            .values()
            .iter()
            .zip(self.gamma.values())
            .zip(self.space.weights())
            .map(|((a, b), w)| w * (a - b).powi(2))
            .sum();
        let z = normal_quantile(1.0 - (1.0 - c.level) / 2.0);
        let bounds: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = match &c.inference {
            McInference::None => None,
            McInference::Bootstrap { wild, b_reps } => {
                let kind = if *wild {
                    BootstrapKind::Wild
                } else {
                    BootstrapKind::Nonparametric
                };
                let spec = BootstrapSpec::new(kind, *b_reps, mix64(mix64(c.seed ^ 0xB00F) ^ rep), c.level)?;
                let res = bootstrap_point(&data.sample, &response, point.clone(), &spec)?;
                Some((res.ci.lower, res.ci.upper, res.ci.se))
            }
            McInference::Plugin => {
                let fit = fit_hspcr(&point.design)?;
                let cov = plugin_theta_cov(&fit, &point.model, &self.space, &data.sample, &point.design)?;
                let se: Vec<f64> = (0..cov.nrows()).map(|k| cov[(k, k)].sqrt()).collect();
                let lo = point.theta.iter().zip(&se).map(|(t, s)| t - z * s).collect();
                let hi = point.theta.iter().zip(&se).map(|(t, s)| t + z * s).collect();
                Some((lo, hi, se))
            }
            McInference::Jackknife { r } => {
                let spec = JackknifeSpec { r: *r, level: c.level };
                let res = jackknife_point(&data.sample, &response, point.clone(), &spec)?;
                Some((res.ci.lower, res.ci.upper, res.ci.se))
            }
        };
        if let Some((lo, hi, se)) = bounds {
            record.covered = (0..p_true)
                .map(|k| k < lo.len() && lo[k] <= truth[k] && truth[k] <= hi[k])
                .collect();
            record.se = (0..p_true).map(|k| se.get(k).copied().unwrap_or(f64::NAN)).collect();
        }
        record.theta_hat = theta_hat;
        Ok(record)
    }
}

/// Per-replicate outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: u64,
    pub lambdas_hat: Vec<f64>,
    /// `||phi_hat_j − phi_j||²` after sign alignment.
    pub phi_err: Vec<f64>,
    pub m_hat: usize,
    /// `(alpha, beta, gamma)` estimates; empty when the regression was skipped.
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub covered: Vec<bool>,
    /// `||gamma_hat − gamma_0||²`.
    pub gamma_err: f64,
}

/// One parameter row of a Monte Carlo summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub parameter: String,
    pub truth: f64,
    pub mse: f64,
    pub coverage: Option<f64>,
    pub mean_se: Option<f64>,
}

/// Aggregated Monte Carlo results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub m_hat_histogram: BTreeMap<usize, usize>,
    pub replicates: usize,
    pub failed: usize,
}

impl MetricsTable {
    pub fn row(&self, parameter: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn m_hat_mean(&self) -> f64 {
        let total: usize = self.m_hat_histogram.values().sum();
        self.m_hat_histogram.iter().map(|(m, c)| (m * c) as f64).sum::<f64>() / total.max(1) as f64
    }

    pub fn m_hat_count(&self, m: usize) -> usize {
        self.m_hat_histogram.get(&m).copied().unwrap_or(0)
    }
}

/// Records plus their summary.
#[derive(Debug, Clone)]
pub struct MonteCarloOutput {
    pub table: MetricsTable,
    pub records: Vec<RepRecord>,
}

/// Run `reps` seeded replicates (in parallel, aggregated in replicate order).
pub fn run_monte_carlo(config: &ScenarioConfig, reps: usize) -> Result<MonteCarloOutput> {
    if reps < 1 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    let scenario = Scenario::new(config.clone())?;
    run_scenario(&scenario, reps)
}

pub fn run_scenario(scenario: &Scenario, reps: usize) -> Result<MonteCarloOutput> {
    let results: Vec<Result<RepRecord>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| scenario.run_replicate(rep))
        .collect();
    let mut records = Vec::with_capacity(reps);
    let mut failed = 0;
    let mut first = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failed += 1;
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if failed as f64 > 0.05 * reps as f64 {
        return Err(Error::ReplicateFailures {
            failed,
            total: reps,
            first: first.unwrap_or_default(),
        });
    }
    let table = summarize(scenario, &records, failed);
    Ok(MonteCarloOutput { table, records })
}

fn summarize(scenario: &Scenario, records: &[RepRecord], failed: usize) -> MetricsTable {
    let truth = scenario.truth();
    let big_j = scenario.config.lambdas.len();
    let count = records.len().max(1) as f64;
    let mut rows = Vec::with_capacity(truth.len() + 1);
    for (k, (name, t)) in truth.iter().enumerate() {
        let (mse, coverage, mean_se) = if k < big_j {
            let mse = records.iter().map(|r| (r.lambdas_hat[k] - t).powi(2)).sum::<f64>() / count;
            (mse, None, None)
        } else {
            let p = k - big_j;
            let with: Vec<&RepRecord> = records.iter().filter(|r| r.theta_hat.len() > p).collect();
            if with.is_empty() {
                continue;
            }
            let c = with.len() as f64;
            let mse = with.iter().map(|r| (r.theta_hat[p] - t).powi(2)).sum::<f64>() / c;
            let cov_recs: Vec<&&RepRecord> = with.iter().filter(|r| r.covered.len() > p).collect();
            let coverage = (!cov_recs.is_empty())
                .then(|| cov_recs.iter().filter(|r| r.covered[p]).count() as f64 / cov_recs.len() as f64);
            let mean_se =
                (!cov_recs.is_empty()).then(|| cov_recs.iter().map(|r| r.se[p]).sum::<f64>() / cov_recs.len() as f64);
            (mse, coverage, mean_se)
        };
        rows.push(MetricRow {
            parameter: name.clone(),
            truth: *t,
            mse,
            coverage,
            mean_se,
        });
    }
    for j in 0..big_j {
        rows.push(MetricRow {
            parameter: format!("phi{}", j + 1),
            truth: 0.0,
            mse: records.iter().map(|r| r.phi_err[j]).sum::<f64>() / count,
            coverage: None,
            mean_se: None,
        });
    }
    let with_gamma: Vec<f64> = records.iter().map(|r| r.gamma_err).filter(|g| g.is_finite()).collect();
    if !with_gamma.is_empty() {
        rows.push(MetricRow {
            parameter: "gamma_element".into(),
            truth: 0.0,
            mse: with_gamma.iter().sum::<f64>() / with_gamma.len() as f64,
            coverage: None,
            mean_se: None,
        });
    }
    let mut hist = BTreeMap::new();
    for r in records {
        *hist.entry(r.m_hat).or_insert(0) += 1;
    }
    MetricsTable {
        rows,
        m_hat_histogram: hist,
        replicates: records.len(),
        failed,
    }
}

/// Sample sizes and correlation levels of the standard simulation grid.
pub const TABLE_SAMPLE_SIZES: [usize; 3] = [100, 500, 2000];
pub const TABLE_CORRELATIONS: [f64; 2] = [0.0, 0.5];

/// One line of a reproduced table: the setting plus a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub r: f64,
    pub n: usize,
    pub parameter: String,
    pub mse: f64,
    pub coverage: Option<f64>,
}

/// Which analog table to rebuild.
///
/// 1: 2D eigenvalue MSEs and the selected component count. 2: 2D intercept
/// and slopes with bootstrap coverage. 3: 2D score coefficients with
/// bootstrap coverage. 4 and 5: 3D eigenvalue MSEs and component count.
/// 6: 3D coefficients with bootstrap coverage.
pub fn reproduce_table(table: u8, scale: Scale, reps: usize, seed: u64, b_reps: usize) -> Result<Vec<TableEntry>> {
    let (three_d, params): (bool, fn(&str) -> bool) = match table {
        1 => (false, |p| p.starts_with("lambda") || p == "m_hat"),
        2 => (false, |p| p == "alpha" || p.starts_with("beta")),
        3 => (false, |p| p.starts_with("gamma") && p != "gamma_element"),
        4 | 5 => (true, |p| p.starts_with("lambda") || p == "m_hat"),
        6 => (true, |p| {
            p == "alpha" || p.starts_with("beta") || (p.starts_with("gamma") && p != "gamma_element")
        }),
        _ => return Err(Error::Config(format!("no table {table}; choose 1 to 6"))),
    };
    let needs_inference = matches!(table, 2 | 3 | 6);
    let mut out = Vec::new();
    for &r in &TABLE_CORRELATIONS {
        for &n in &TABLE_SAMPLE_SIZES {
            let mut cfg = if three_d {
                ScenarioConfig::analog_3d(scale, n, r, seed)
            } else {
                ScenarioConfig::analog_2d(scale, n, r, seed)
            };
            if needs_inference {
                cfg.inference = McInference::Bootstrap { wild: false, b_reps };
            }
            let res = run_monte_carlo(&cfg, reps)?;
            for row in &res.table.rows {
                if params(&row.parameter) {
                    out.push(TableEntry {
                        r,
                        n,
                        parameter: row.parameter.clone(),
                        mse: row.mse,
                        coverage: row.coverage,
                    });
                }
            }
            if params("m_hat") {
                out.push(TableEntry {
                    r,
                    n,
                    parameter: "m_hat".into(),
                    mse: res.table.m_hat_mean(),
                    coverage: None,
                });
            }
        }
    }
    Ok(out)
}
