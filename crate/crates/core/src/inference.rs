//! Bootstrap (multinomial and wild) and block-jackknife inference for the
//! full AS-PCA + HS-PCR pipeline, with percentile confidence intervals.
//!
//! Replicates run in frame coordinates: the whitened frame depends only on
//! the basis, so projecting once and re-estimating the covariance, its
//! eigenvectors, the scores and the regression per replicate is exactly a
//! full refit at a fraction of the cost.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::hspcr::{design_matrix, fit_hspcr, fit_precision, solve_ols, term_names, RegressionDesign};
use crate::normal::normal_quantile;
use crate::pca::{component_scores, fit_in_frame, select_pve, subspace_eigen, EigenModel, Frame};
use crate::rng::{purpose, stream_rng};
use crate::space::{AmbientSpace, SampleSet, DEFAULT_DROP_TOL};

/// More than this fraction of failed replicates aborts a resampling run.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapKind {
    /// Multinomial resampling of observations.
    Nonparametric,
    /// Exponential(1) multipliers normalised to mean one.
    Wild,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSpec {
    pub kind: BootstrapKind,
    pub b_reps: usize,
    pub base_seed: u64,
    pub level: f64,
}

impl BootstrapSpec {
    pub fn new(kind: BootstrapKind, b_reps: usize, base_seed: u64, level: f64) -> Result<Self> {
        if b_reps < 1 {
            return Err(Error::Config("at least one bootstrap replicate is required".into()));
        }
        check_level(level)?;
        Ok(Self {
            kind,
            b_reps,
            base_seed,
            level,
        })
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )))
    }
}

/// Observation weights for one replicate. Multinomial weights are integer
/// counts summing to `n`; wild weights are positive with mean one.
pub fn gen_weights(spec: &BootstrapSpec, n: usize, replicate: u64) -> Vec<f64> {
    let mut rng = stream_rng(spec.base_seed, purpose::WEIGHTS, replicate);
    match spec.kind {
        BootstrapKind::Nonparametric => {
            let mut counts = vec![0.0; n];
            for _ in 0..n {
                counts[rng.random_range(0..n)] += 1.0;
            }
            counts
        }
        BootstrapKind::Wild => {
            let xi: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let mean = xi.iter().sum::<f64>() / n as f64;
            xi.into_iter().map(|x| x / mean).collect()
        }
    }
}

/// Interval table for a resampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct CiTable {
    pub terms: Vec<String>,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub se: Vec<f64>,
    pub method: String,
    pub level: f64,
    /// Replicates (or blocks) that completed.
    pub completed: usize,
}

/// Empirical quantile with linear interpolation at `h = (B − 1)q + 1`
/// (one-based) on sorted draws.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval per column of `draws` (rows are replicates).
pub fn percentile_ci(draws: &DMatrix<f64>, level: f64) -> Result<Vec<(f64, f64)>> {
    check_level(level)?;
    if draws.nrows() < 2 {
        return Err(Error::InsufficientData(format!(
            "percentile intervals need at least 2 draws, got {}",
            draws.nrows()
        )));
    }
    if let Some(index) = draws.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "draws", index });
    }
    let tail = (1.0 - level) / 2.0;
    Ok(draws
        .column_iter()
        .map(|col| {
            let mut v: Vec<f64> = col.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            (quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail))
        })
        .collect())
}

fn column_sd(draws: &DMatrix<f64>) -> Vec<f64> {
    let b = draws.nrows() as f64;
    draws
        .column_iter()
        .map(|col| {
            let mean = col.sum() / b;
            (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1.0)).sqrt()
        })
        .collect()
}

/// How many leading components enter the regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentRule {
    /// Proportion-of-variance rule with threshold `tau`.
    Pve(f64),
    Fixed(usize),
}

/// Response side of the pipeline.
#[derive(Debug, Clone)]
pub struct ResponseData {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub treatment: Option<Vec<bool>>,
}

impl ResponseData {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>) -> Self {
        Self { y, x, treatment: None }
    }

    pub fn with_treatment(mut self, treatment: Vec<bool>) -> Self {
        self.treatment = Some(treatment);
        self
    }
}

/// Point estimate of the complete pipeline.
#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub model: EigenModel,
    pub m: usize,
    pub design: RegressionDesign,
    pub theta: DVector<f64>,
    pub terms: Vec<String>,
}

/// AS-PCA, component selection, scores and HS-PCR (or the interaction
/// model when a treatment is present) with a precomputed frame.
pub fn fit_pipeline_in_frame(
    space: &AmbientSpace,
    frame: &Frame,
    sample: &SampleSet,
    data: &ResponseData,
    rule: ComponentRule,
) -> Result<PipelineFit> {
    let model = fit_in_frame(space, frame.clone(), sample)?;
    fit_pipeline_from_model(space, model, sample, data, rule)
}

/// Component selection, scores and regression on an existing AS-PCA fit.
/// Sign changes made to `model` beforehand carry through to the scores
/// and to the sign alignment of resampling replicates.
pub fn fit_pipeline_from_model(
    space: &AmbientSpace,
    model: EigenModel,
    sample: &SampleSet,
    data: &ResponseData,
    rule: ComponentRule,
) -> Result<PipelineFit> {
    let m = match rule {
        ComponentRule::Pve(tau) => select_pve(&model, tau)?.m,
        ComponentRule::Fixed(m) => {
            if m > model.rank() {
                return Err(Error::Config(format!(
                    "{m} components requested but only {} retained",
                    model.rank()
                )));
            }
            m
        }
    };
    let all = component_scores(&model, space, sample)?;
    let scores = all.columns(0, m).into_owned();
    let mut design = RegressionDesign::new(data.y.clone(), data.x.clone(), scores)?;
    let theta = match &data.treatment {
        Some(t) => {
            design = design.with_treatment(t.clone())?;
            fit_precision(&design)?.theta().clone()
        }
        None => fit_hspcr(&design)?.theta().clone(),
    };
    let terms = term_names(design.d(), m, data.treatment.is_some());
    Ok(PipelineFit {
        model,
        m,
        design,
        theta,
        terms,
    })
}

pub fn fit_pipeline(
    space: &AmbientSpace,
    basis: &BasisSet,
    sample: &SampleSet,
    data: &ResponseData,
    rule: ComponentRule,
) -> Result<PipelineFit> {
    let frame = Frame::new(space, basis, DEFAULT_DROP_TOL)?;
    fit_pipeline_in_frame(space, &frame, sample, data, rule)
}

/// Singular directions of the coordinate matrix below this fraction of the
/// largest are treated as absent.
const ROW_SPACE_TOL: f64 = 1e-9;

/// Express frame coordinates in an orthonormal basis `V_k` of their row
/// space. Every weighted or subsetted covariance of the rows lives in that
/// space, so replicate eigenproblems shrink to `k × k` without changing
/// their nonzero eigenpairs. Returns the reduced coordinates and `V_k`.
fn reduce_coords(coords: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let svd = coords.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > ROW_SPACE_TOL * smax)
        .collect();
    let vk = v_t.select_rows(&keep).transpose();
    (coords * &vk, vk)
}

/// Everything a replicate needs, in reduced frame coordinates.
struct ReplicateContext<'a> {
    coords: DMatrix<f64>,
    omega: DMatrix<f64>,
    m: usize,
    data: &'a ResponseData,
}

impl<'a> ReplicateContext<'a> {
    fn new(frame_coords: &DMatrix<f64>, omega: &DMatrix<f64>, m: usize, data: &'a ResponseData) -> Self {
        let (coords, vk) = reduce_coords(frame_coords);
        Self {
            coords,
            omega: omega * vk,
            m,
            data,
        }
    }

    fn eigen(&self, coords: &DMatrix<f64>, weights: Option<&[f64]>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (lambdas, mut omega) = subspace_eigen(coords, weights);
        if lambdas.len() < self.m {
            return Err(Error::DegenerateDesign(format!(
                "replicate retained {} components, fewer than the {} in the model",
                lambdas.len(),
                self.m
            )));
        }
        for j in 0..self.m.min(self.omega.nrows()) {
            if omega.row(j).dot(&self.omega.row(j)) < 0.0 {
                omega.row_mut(j).neg_mut();
            }
        }
        Ok((lambdas, omega))
    }

    fn theta(
        &self,
        coords: &DMatrix<f64>,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        treatment: Option<&[bool]>,
        weights: Option<&[f64]>,
    ) -> Result<DVector<f64>> {
        let (_, omega) = self.eigen(coords, weights)?;
        let scores = coords * omega.rows(0, self.m).transpose();
        let u = design_matrix(x, &scores, treatment);
        Ok(solve_ols(&u, y, weights)?.theta)
    }

    fn weighted(&self, weights: &[f64]) -> Result<DVector<f64>> {
        self.theta(
            &self.coords,
            &self.data.x,
            &self.data.y,
            self.data.treatment.as_deref(),
            Some(weights),
        )
    }

    fn subset(&self, idx: &[usize]) -> Result<DVector<f64>> {
        let coords = self.coords.select_rows(idx);
        let x = self.data.x.select_rows(idx);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.data.y[i]));
        let treatment: Option<Vec<bool>> = self
            .data
            .treatment
            .as_ref()
            .map(|t| idx.iter().map(|&i| t[i]).collect());
        self.theta(&coords, &x, &y, treatment.as_deref(), None)
    }
}

/// Collect replicate outcomes in index order, failing when too many broke.
fn gather(results: Vec<Result<Vec<f64>>>, width: usize) -> Result<(DMatrix<f64>, usize)> {
    let total = results.len();
    let mut rows = Vec::with_capacity(total);
    let mut failed = 0;
    let mut first = None;
    for r in results {
        match r {
            Ok(v) => rows.push(v),
            Err(e) => {
                failed += 1;
                if first.is_none() {
                    first = Some(e.to_string());
                }
            }
        }
    }
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::ReplicateFailures {
            failed,
            total,
            first: first.unwrap_or_default(),
        });
    }
    if failed > 0 {
        log::warn!("{failed} of {total} replicates failed and were skipped");
    }
    let draws = DMatrix::from_fn(rows.len(), width, |b, c| rows[b][c]);
    Ok((draws, failed))
}

/// Bootstrap draws of the coefficient vector with percentile intervals.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub point: PipelineFit,
    /// One replicate per row.
    pub draws: DMatrix<f64>,
    pub ci: CiTable,
    pub failed: usize,
}

/// Resample the full pipeline `spec.b_reps` times. The number of
/// components is fixed at the point estimate's choice and replicate
/// eigenvectors are sign-aligned to the point estimate.
pub fn bootstrap_theta(
    space: &AmbientSpace,
    basis: &BasisSet,
    sample: &SampleSet,
    data: &ResponseData,
    rule: ComponentRule,
    spec: &BootstrapSpec,
) -> Result<BootstrapResult> {
    let frame = Frame::new(space, basis, DEFAULT_DROP_TOL)?;
    bootstrap_theta_in_frame(space, &frame, sample, data, rule, spec)
}

pub fn bootstrap_theta_in_frame(
    space: &AmbientSpace,
    frame: &Frame,
    sample: &SampleSet,
    data: &ResponseData,
    rule: ComponentRule,
    spec: &BootstrapSpec,
) -> Result<BootstrapResult> {
    let point = fit_pipeline_in_frame(space, frame, sample, data, rule)?;
    bootstrap_point(sample, data, point, spec)
}

/// Bootstrap around an existing point estimate (built from `sample` and
/// `data`).
pub fn bootstrap_point(
    sample: &SampleSet,
    data: &ResponseData,
    point: PipelineFit,
    spec: &BootstrapSpec,
) -> Result<BootstrapResult> {
    let ctx = ReplicateContext::new(
        &point.model.frame().coordinates(sample.matrix()),
        point.model.eigvecs(),
        point.m,
        data,
    );
    let n = sample.n();
    let results: Vec<Result<Vec<f64>>> = (0..spec.b_reps as u64)
        .into_par_iter()
        .map(|b| {
            let w = gen_weights(spec, n, b);
            ctx.weighted(&w).map(|t| t.as_slice().to_vec())
        })
        .collect();
    let (draws, failed) = gather(results, point.theta.len())?;
    let ci = interval_table(&point.terms, point.theta.as_slice(), &draws, spec)?;
    Ok(BootstrapResult {
        point,
        draws,
        ci,
        failed,
    })
}

fn method_name(kind: BootstrapKind) -> &'static str {
    match kind {
        BootstrapKind::Nonparametric => "bootstrap-nonparametric",
        BootstrapKind::Wild => "bootstrap-wild",
    }
}

fn interval_table(terms: &[String], point: &[f64], draws: &DMatrix<f64>, spec: &BootstrapSpec) -> Result<CiTable> {
    let bounds = percentile_ci(draws, spec.level)?;
    Ok(CiTable {
        terms: terms.to_vec(),
        point: point.to_vec(),
        lower: bounds.iter().map(|b| b.0).collect(),
        upper: bounds.iter().map(|b| b.1).collect(),
        se: column_sd(draws),
        method: method_name(spec.kind).to_string(),
        level: spec.level,
        completed: draws.nrows(),
    })
}

/// Bootstrap draws of the retained eigenvalues.
#[derive(Debug, Clone)]
pub struct EigenBootstrap {
    pub lambdas: Vec<f64>,
    pub draws: DMatrix<f64>,
    pub ci: CiTable,
    pub failed: usize,
}

/// Bootstrap of the covariance eigenvalues, each replicate centred at its
/// own weighted mean. Components a replicate does not retain count as zero.
pub fn bootstrap_eigs(
    space: &AmbientSpace,
    basis: &BasisSet,
    sample: &SampleSet,
    spec: &BootstrapSpec,
) -> Result<EigenBootstrap> {
    let frame = Frame::new(space, basis, DEFAULT_DROP_TOL)?;
    let model = fit_in_frame(space, frame.clone(), sample)?;
    let (coords, _) = reduce_coords(&frame.coordinates(sample.matrix()));
    let big_j = model.rank();
    let n = sample.n();
    let results: Vec<Result<Vec<f64>>> = (0..spec.b_reps as u64)
        .into_par_iter()
        .map(|b| {
            let w = gen_weights(spec, n, b);
            let (l, _) = subspace_eigen(&coords, Some(&w));
            Ok((0..big_j).map(|j| l.get(j).copied().unwrap_or(0.0)).collect())
        })
        .collect();
    let (draws, failed) = gather(results, big_j)?;
    let terms: Vec<String> = (1..=big_j).map(|j| format!("lambda{j}")).collect();
    let ci = if big_j == 0 {
        CiTable {
            terms,
            point: vec![],
            lower: vec![],
            upper: vec![],
            se: vec![],
            method: method_name(spec.kind).to_string(),
            level: spec.level,
            completed: draws.nrows(),
        }
    } else {
        interval_table(&terms, model.lambdas(), &draws, spec)?
    };
    Ok(EigenBootstrap {
        lambdas: model.lambdas().to_vec(),
        draws,
        ci,
        failed,
    })
}

/// Block-jackknife settings: `r` interleaved blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JackknifeSpec {
    pub r: usize,
    pub level: f64,
}

/// Zero-based indices removed by each block: block `l` drops
/// `l, r + l, …, (k − 1)r + l` with `k = ⌊n/r⌋`.
pub fn jackknife_blocks(n: usize, r: usize) -> Result<Vec<Vec<usize>>> {
    if r < 2 {
        return Err(Error::Config(format!("the jackknife needs at least 2 blocks, got {r}")));
    }
    if n < 2 * r {
        return Err(Error::InsufficientData(format!(
            "{n} observations are fewer than twice the {r} blocks"
        )));
    }
    let k = n / r;
    Ok((0..r).map(|l| (0..k).map(|t| l + t * r).collect()).collect())
}

#[derive(Debug, Clone)]
pub struct JackknifeResult {
    pub point: PipelineFit,
    /// Leave-one-block-out estimates, one block per row.
    pub replicates: DMatrix<f64>,
    pub variance: DMatrix<f64>,
    pub ci: CiTable,
}

/// Block jackknife: refit the full pipeline on the first `r·k`
/// observations minus each block and combine the `r` estimates with
/// `(r − 1)/r · Σ (theta_l − theta_bar)(theta_l − theta_bar)ᵀ`.
pub fn block_jackknife(
    space: &AmbientSpace,
    basis: &BasisSet,
    sample: &SampleSet,
    data: &ResponseData,
    rule: ComponentRule,
    spec: &JackknifeSpec,
) -> Result<JackknifeResult> {
    let frame = Frame::new(space, basis, DEFAULT_DROP_TOL)?;
    block_jackknife_in_frame(space, &frame, sample, data, rule, spec)
}

pub fn block_jackknife_in_frame(
    space: &AmbientSpace,
    frame: &Frame,
    sample: &SampleSet,
    data: &ResponseData,
    rule: ComponentRule,
    spec: &JackknifeSpec,
) -> Result<JackknifeResult> {
    check_level(spec.level)?;
    let point = fit_pipeline_in_frame(space, frame, sample, data, rule)?;
    jackknife_point(sample, data, point, spec)
}

/// Block jackknife around an existing point estimate.
pub fn jackknife_point(
    sample: &SampleSet,
    data: &ResponseData,
    point: PipelineFit,
    spec: &JackknifeSpec,
) -> Result<JackknifeResult> {
    check_level(spec.level)?;
    let p = point.theta.len();
    let r = spec.r;
    if r <= p + 1 {
        return Err(Error::Config(format!(
            "block count r = {r} must exceed p + 1 = {} for {p} coefficients (moment and nondegeneracy assumption (A4))",
            p + 1
        )));
    }
    let n = sample.n();
    let blocks = jackknife_blocks(n, r)?;
    let used = r * (n / r);
    let ctx = ReplicateContext::new(
        &point.model.frame().coordinates(sample.matrix()),
        point.model.eigvecs(),
        point.m,
        data,
    );
    let results: Vec<Result<Vec<f64>>> = blocks
        .par_iter()
        .map(|block| {
            let mut drop = vec![false; used];
            for &i in block {
                drop[i] = true;
            }
            let keep: Vec<usize> = (0..used).filter(|&i| !drop[i]).collect();
            ctx.subset(&keep).map(|t| t.as_slice().to_vec())
        })
        .collect();
    let mut rows = Vec::with_capacity(r);
    for res in results {
        rows.push(res?);
    }
    let replicates = DMatrix::from_fn(r, p, |l, c| rows[l][c]);
    let mean = replicates.row_sum() / r as f64;
    let mut dev = replicates.clone();
    for mut row in dev.row_iter_mut() {
        row -= &mean;
    }
    let variance = dev.transpose() * &dev * ((r - 1) as f64 / r as f64);
    let z = normal_quantile(1.0 - (1.0 - spec.level) / 2.0);
    let se: Vec<f64> = (0..p).map(|c| variance[(c, c)].sqrt()).collect();
    let ci = CiTable {
        terms: point.terms.clone(),
        point: point.theta.as_slice().to_vec(),
        lower: point.theta.iter().zip(&se).map(|(t, s)| t - z * s).collect(),
        upper: point.theta.iter().zip(&se).map(|(t, s)| t + z * s).collect(),
        se,
        method: "block-jackknife".into(),
        level: spec.level,
        completed: r,
    };
    Ok(JackknifeResult {
        point,
        replicates,
        variance,
        ci,
    })
}
