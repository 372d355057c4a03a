//! Adaptive subspace PCA: covariance estimation inside the span of a
//! projection basis, eigendecomposition, the proportion-of-variance rule,
//! the projection-accuracy diagnostic and plug-in standard errors.

use nalgebra::DMatrix;

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::linalg::{fix_sign, mean_sd, sym_eigen_desc};
use crate::normal::normal_quantile;
use crate::space::{gram, mean_element, whiten, AmbientSpace, Element, SampleSet, Whitener, DEFAULT_DROP_TOL};

/// Eigenvalues at or below this fraction of the largest are discarded.
pub const EIGEN_RETAIN_TOL: f64 = 1e-12;

/// Default spectral-gap guard, relative to the leading eigenvalue.
pub const DEFAULT_GAP_TOL: f64 = 1e-6;

/// The whitened basis: an orthonormal frame spanning the same subspace as
/// the raw basis, plus the weighted copy used to project data onto it.
#[derive(Debug, Clone)]
pub struct Frame {
    whitener: Whitener,
    frame: DMatrix<f64>,
    weighted: DMatrix<f64>,
}

impl Frame {
    pub fn new(space: &AmbientSpace, basis: &BasisSet, drop_tol: f64) -> Result<Self> {
        let l = gram(space, basis)?;
        let whitener = whiten(&l, drop_tol)?;
        Ok(Self::from_whitener(space, basis, whitener))
    }

    pub fn from_whitener(space: &AmbientSpace, basis: &BasisSet, whitener: Whitener) -> Self {
        let frame = whitener.factor() * basis.functions();
        let mut weighted = frame.clone();
        for (mut col, w) in weighted.column_iter_mut().zip(space.weights()) {
            col *= *w;
        }
        Self {
            whitener,
            frame,
            weighted,
        }
    }

    pub fn whitener(&self) -> &Whitener {
        &self.whitener
    }

    /// Orthonormal frame elements as rows (`rank × V`).
    pub fn elements(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn rank(&self) -> usize {
        self.frame.nrows()
    }

    /// Uncentred frame coordinates `<psi_l, Z_i>` (`n × rank`).
    pub fn coordinates(&self, sample: &DMatrix<f64>) -> DMatrix<f64> {
        sample * self.weighted.transpose()
    }
}

/// Eigenvalues and eigenvectors of the (optionally weighted) covariance of
/// frame coordinates.
///
/// `weights`, when given, are bootstrap multipliers normalised so that they
/// average one; the covariance is centred at the weighted mean. Eigenvalues
/// at or below [`EIGEN_RETAIN_TOL`] times the largest are dropped. Rows of
/// the returned matrix are the eigenvectors `omega_j`.
pub fn subspace_eigen(coords: &DMatrix<f64>, weights: Option<&[f64]>) -> (Vec<f64>, DMatrix<f64>) {
    let n = coords.nrows();
    let rank = coords.ncols();
    let nf = n as f64;
    let mut centered = coords.clone();
    match weights {
        None => {
            let mean = coords.row_sum() / nf;
            for (mut col, m) in centered.column_iter_mut().zip(mean.iter()) {
                col.add_scalar_mut(-m);
            }
        }
        Some(w) => {
            let mut mean = vec![0.0; rank];
            for (c, m) in mean.iter_mut().enumerate() {
                *m = coords.column(c).iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / nf;
            }
            for (mut col, m) in centered.column_iter_mut().zip(&mean) {
                col.add_scalar_mut(-m);
            }
        }
    }
    let mut scaled = centered.clone();
    if let Some(w) = weights {
        for (mut row, wi) in scaled.row_iter_mut().zip(w) {
            row *= *wi;
        }
    }
    let cov = scaled.transpose() * &centered / nf;
    let (vals, vecs) = sym_eigen_desc(&cov);
    let top = vals.first().copied().unwrap_or(0.0);
    let keep = if top > 0.0 {
        vals.iter().take_while(|v| **v > EIGEN_RETAIN_TOL * top).count()
    } else {
        0
    };
    let omega = vecs.columns(0, keep).transpose();
    (vals[..keep].to_vec(), omega)
}

/// Output of AS-PCA.
#[derive(Debug, Clone)]
pub struct EigenModel {
    lambdas: Vec<f64>,
    eigvecs: DMatrix<f64>,
    eigenfunctions: DMatrix<f64>,
    mean: Element,
    frame: Frame,
    total_variance: f64,
    n: usize,
}

impl EigenModel {
    /// Estimated eigenvalues, descending.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Eigenvectors `omega_j` in frame coordinates, one per row (`J × rank`).
    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    /// Eigenfunctions on the grid, one per row (`J × V`).
    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    pub fn eigenfunction(&self, j: usize) -> Element {
        Element::new(self.eigenfunctions.row(j).iter().copied().collect()).expect("finite")
    }

    pub fn mean(&self) -> &Element {
        &self.mean
    }

    pub fn whitener(&self) -> &Whitener {
        self.frame.whitener()
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    /// Number of retained components `J`.
    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn sample_size(&self) -> usize {
        self.n
    }

    /// Flip the sign of component `j`.
    pub fn flip(&mut self, j: usize) {
        self.eigvecs.row_mut(j).neg_mut();
        self.eigenfunctions.row_mut(j).neg_mut();
    }

    /// Flip each component whose inner product with the matching row of
    /// `reference` (frame coordinates, `≥ J` rows) is negative.
    pub fn align_signs_frame(&mut self, reference: &DMatrix<f64>) {
        for j in 0..self.rank().min(reference.nrows()) {
            if self.eigvecs.row(j).dot(&reference.row(j)) < 0.0 {
                self.flip(j);
            }
        }
    }

    /// Flip components to maximise `<phi_hat_j, target_j>` for grid-space
    /// targets (one per row).
    pub fn align_signs_to(&mut self, space: &AmbientSpace, targets: &DMatrix<f64>) {
        let ip = space.cross(&self.eigenfunctions, targets);
        for j in 0..self.rank().min(targets.nrows()) {
            if ip[(j, j)] < 0.0 {
                self.flip(j);
            }
        }
    }
}

fn check_sample(space: &AmbientSpace, sample: &SampleSet, min_n: usize) -> Result<()> {
    space.check_len("sample row", sample.cell_count())?;
    if sample.n() < min_n {
        return Err(Error::InsufficientData(format!(
            "need at least {min_n} observations, got {}",
            sample.n()
        )));
    }
    Ok(())
}

/// Run AS-PCA: whiten the basis, estimate the covariance of the centred
/// frame coordinates, eigendecompose, and map eigenvectors back to the grid.
pub fn fit_aspca(space: &AmbientSpace, basis: &BasisSet, sample: &SampleSet, drop_tol: f64) -> Result<EigenModel> {
    check_sample(space, sample, 2)?;
    let frame = Frame::new(space, basis, drop_tol)?;
    fit_in_frame(space, frame, sample)
}

/// AS-PCA with a precomputed frame (the whitening step only depends on the
/// basis, so Monte Carlo loops reuse it).
pub fn fit_in_frame(space: &AmbientSpace, frame: Frame, sample: &SampleSet) -> Result<EigenModel> {
    check_sample(space, sample, 2)?;
    let n = sample.n();
    let mean = mean_element(sample)?;
    let coords = frame.coordinates(sample.matrix());
    let (lambdas, mut eigvecs) = subspace_eigen(&coords, None);
    let mut eigenfunctions = &eigvecs * frame.elements();
    for j in 0..lambdas.len() {
        let mut row: Vec<f64> = eigenfunctions.row(j).iter().copied().collect();
        let before = row.clone();
        fix_sign(&mut row);
        if row != before {
            eigenfunctions.row_mut(j).neg_mut();
            eigvecs.row_mut(j).neg_mut();
        }
    }
    let total_variance = total_variance(space, sample, &mean);
    Ok(EigenModel {
        lambdas,
        eigvecs,
        eigenfunctions,
        mean,
        frame,
        total_variance,
        n,
    })
}

fn centered(sample: &SampleSet, center: &Element) -> DMatrix<f64> {
    let mut c = sample.matrix().clone();
    for (mut col, m) in c.column_iter_mut().zip(center.values()) {
        col.add_scalar_mut(-m);
    }
    c
}

fn sq_norms(space: &AmbientSpace, rows: &DMatrix<f64>) -> Vec<f64> {
    (0..rows.nrows())
        .map(|i| rows.row(i).iter().zip(space.weights()).map(|(x, w)| w * x * x).sum())
        .collect()
}

/// `P_n ||Z − Z̄||²`.
pub fn total_variance(space: &AmbientSpace, sample: &SampleSet, mean: &Element) -> f64 {
    let c = centered(sample, mean);
    sq_norms(space, &c).iter().sum::<f64>() / sample.n() as f64
}

/// Uncentred scores `<phi_hat_j, Z_i>` (`n × J`).
pub fn component_scores(model: &EigenModel, space: &AmbientSpace, sample: &SampleSet) -> Result<DMatrix<f64>> {
    check_sample(space, sample, 1)?;
    space.check_len("eigenfunction", model.eigenfunctions.ncols())?;
    Ok(space.cross(sample.matrix(), &model.eigenfunctions))
}

/// Centred scores `<Z_i − Z̄, phi_hat_j>` (`n × J`), centred at the model mean.
pub fn centered_scores(model: &EigenModel, space: &AmbientSpace, sample: &SampleSet) -> Result<DMatrix<f64>> {
    check_sample(space, sample, 1)?;
    space.check_len("eigenfunction", model.eigenfunctions.ncols())?;
    Ok(space.cross(&centered(sample, &model.mean), &model.eigenfunctions))
}

/// Result of the proportion-of-variance rule.
#[derive(Debug, Clone, PartialEq)]
pub struct PveSelection {
    pub tau: f64,
    pub m: usize,
    /// `sum_{k<=j} lambda_k / total_variance` for each retained `j`.
    pub cumulative_fractions: Vec<f64>,
}

/// Smallest `m` whose leading eigenvalues sum to strictly more than
/// `tau · total_variance`.
pub fn select_pve(model: &EigenModel, tau: f64) -> Result<PveSelection> {
    pve_from_eigenvalues(&model.lambdas, model.total_variance, tau)
}

/// [`select_pve`] on bare eigenvalues.
pub fn pve_from_eigenvalues(lambdas: &[f64], total_variance: f64, tau: f64) -> Result<PveSelection> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    if !(total_variance > 0.0) {
        return Err(Error::DegenerateDesign(
            "total variance is zero; nothing to explain".into(),
        ));
    }
    let threshold = tau * total_variance;
    let mut cum = 0.0;
    let mut fractions = Vec::with_capacity(lambdas.len());
    let mut m = None;
    for (j, l) in lambdas.iter().enumerate() {
        cum += l;
        fractions.push(cum / total_variance);
        if m.is_none() && cum > threshold {
            m = Some(j + 1);
        }
    }
    match m {
        Some(m) => Ok(PveSelection {
            tau,
            m,
            cumulative_fractions: fractions,
        }),
        None => Err(Error::SelectionInfeasible {
            tau,
            achieved: fractions.last().copied().unwrap_or(0.0),
            components: lambdas.len(),
        }),
    }
}

/// Outcome of the projection-accuracy test.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticReport {
    /// Mean squared projection residual.
    pub delta_hat: f64,
    /// Same quantity from the variance-difference formula.
    pub delta_hat_variance_form: f64,
    pub s2_hat: f64,
    pub t_stat: f64,
    pub alpha: f64,
    pub critical: f64,
    pub reject: bool,
    pub n: usize,
}

/// Test whether the basis captures the sample variation to within
/// `o(1/n)`: reject when `T_n > z_{1−alpha}`.
pub fn diagnose_projection(
    space: &AmbientSpace,
    basis: &BasisSet,
    sample: &SampleSet,
    alpha: f64,
) -> Result<DiagnosticReport> {
    check_sample(space, sample, 2)?;
    let frame = Frame::new(space, basis, DEFAULT_DROP_TOL)?;
    diagnose_in_frame(space, &frame, sample, alpha)
}

pub fn diagnose_in_frame(
    space: &AmbientSpace,
    frame: &Frame,
    sample: &SampleSet,
    alpha: f64,
) -> Result<DiagnosticReport> {
    if !(alpha > 0.0 && alpha <= 0.05) {
        return Err(Error::Config(format!("alpha must lie in (0, 0.05], got {alpha}")));
    }
    check_sample(space, sample, 2)?;
    let n = sample.n();
    let nf = n as f64;
    let mean = mean_element(sample)?;
    let zc = centered(sample, &mean);
    let coords = frame.coordinates(&zc);
    // residuals r_i = (Z_i − Z̄) − G_N (Z_i − Z̄)
    let resid = &zc - &coords * frame.elements();
    let r2 = sq_norms(space, &resid);
    let delta_hat = r2.iter().sum::<f64>() / nf;
    let s2_hat = r2.iter().map(|r| (r - delta_hat).powi(2)).sum::<f64>() / nf;
    let total = sq_norms(space, &zc).iter().sum::<f64>() / nf;
    let captured = coords.iter().map(|c| c * c).sum::<f64>() / nf;
    let t_stat = nf.sqrt() * delta_hat / (s2_hat + 1.0 / nf).sqrt();
    let critical = normal_quantile(1.0 - alpha);
    Ok(DiagnosticReport {
        delta_hat,
        delta_hat_variance_form: total - captured,
        s2_hat,
        t_stat,
        alpha,
        critical,
        reject: t_stat > critical,
        n,
    })
}

/// Plug-in standard errors `sd(xi_ij²) / sqrt(n)` for each eigenvalue.
pub fn eigenvalue_se(model: &EigenModel, space: &AmbientSpace, sample: &SampleSet) -> Result<Vec<f64>> {
    let xi = centered_scores(model, space, sample)?;
    let n = sample.n() as f64;
    Ok((0..model.rank())
        .map(|j| {
            let sq: Vec<f64> = xi.column(j).iter().map(|x| x * x).collect();
            mean_sd(&sq).1 / n.sqrt()
        })
        .collect())
}

/// Plug-in covariance of `phi_hat_j` expressed in the other retained
/// eigenfunctions.
#[derive(Debug, Clone)]
pub struct EigenfunctionCov {
    pub j: usize,
    /// Indices `j'` of the other retained components, in order.
    pub others: Vec<usize>,
    /// `lambda_j − lambda_{j'}` for each entry of `others`.
    pub gaps: Vec<f64>,
    /// Empirical covariance of the products `xi_{j'} xi_j`.
    pub product_cov: DMatrix<f64>,
    /// Covariance of the coefficients `<phi_hat_j − phi_j, phi_{j'}>`:
    /// `product_cov` scaled by the inverse gaps and divided by `n`.
    pub cov: DMatrix<f64>,
}

/// Gap-weighted plug-in covariance for eigenfunction `j` (zero-based),
/// truncated to the retained components. `gap_tol` defaults to
/// `1e-6 · lambda_1`.
pub fn eigenfunction_cov(
    model: &EigenModel,
    space: &AmbientSpace,
    sample: &SampleSet,
    j: usize,
    gap_tol: Option<f64>,
) -> Result<EigenfunctionCov> {
    let big_j = model.rank();
    if j >= big_j {
        return Err(Error::Config(format!(
            "component {j} out of range; model retains {big_j}"
        )));
    }
    let tol = gap_tol.unwrap_or(DEFAULT_GAP_TOL * model.lambdas[0]);
    let others: Vec<usize> = (0..big_j).filter(|&k| k != j).collect();
    let gaps: Vec<f64> = others.iter().map(|&k| model.lambdas[j] - model.lambdas[k]).collect();
    for (&k, g) in others.iter().zip(&gaps) {
        if g.abs() <= tol {
            return Err(Error::NearMultiplicity {
                j,
                k,
                gap: g.abs(),
                tol,
            });
        }
    }
    let xi = centered_scores(model, space, sample)?;
    let n = sample.n();
    let nf = n as f64;
    let q = others.len();
    let products = DMatrix::from_fn(n, q, |i, a| xi[(i, others[a])] * xi[(i, j)]);
    let means: Vec<f64> = (0..q).map(|a| products.column(a).sum() / nf).collect();
    let product_cov = DMatrix::from_fn(q, q, |a, b| {
        (0..n)
            .map(|i| (products[(i, a)] - means[a]) * (products[(i, b)] - means[b]))
            .sum::<f64>()
            / nf
    });
    let cov = DMatrix::from_fn(q, q, |a, b| product_cov[(a, b)] / (gaps[a] * gaps[b] * nf));
    Ok(EigenfunctionCov {
        j,
        others,
        gaps,
        product_cov,
        cov,
    })
}
