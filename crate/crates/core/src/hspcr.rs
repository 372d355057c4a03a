//! Principal component regression of a scalar response on Euclidean
//! covariates plus the leading component scores of a grid-valued covariate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::pca::{centered_scores, component_scores, EigenModel, DEFAULT_GAP_TOL};
use crate::space::{AmbientSpace, Element, SampleSet};

/// Fits whose design second-moment matrix is worse conditioned than this
/// are rejected.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Response, covariates and component scores for one regression.
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    y: DVector<f64>,
    x: DMatrix<f64>,
    scores: DMatrix<f64>,
    treatment: Option<Vec<bool>>,
}

fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

impl RegressionDesign {
    /// `x` is `n × d` (use `d = 0` columns for no covariates), `scores` is
    /// `n × m` uncentred component scores.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, scores: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n {
            return Err(Error::Conformance {
                what: "covariate rows",
                expected: n,
                found: x.nrows(),
            });
        }
        if scores.nrows() != n {
            return Err(Error::Conformance {
                what: "score rows",
                expected: n,
                found: scores.nrows(),
            });
        }
        check_finite("response", y.as_slice())?;
        check_finite("covariates", x.as_slice())?;
        check_finite("scores", scores.as_slice())?;
        Ok(Self {
            y,
            x,
            scores,
            treatment: None,
        })
    }

    /// Attach a binary treatment indicator for the interaction design.
    pub fn with_treatment(mut self, treatment: Vec<bool>) -> Result<Self> {
        if treatment.len() != self.n() {
            return Err(Error::Conformance {
                what: "treatment",
                expected: self.n(),
                found: treatment.len(),
            });
        }
        self.treatment = Some(treatment);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.scores.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    pub fn treatment(&self) -> Option<&[bool]> {
        self.treatment.as_deref()
    }

    /// Regressor matrix `(1, X, S)`, or `(1, X, S, A, A·X, A·S)` when a
    /// treatment is attached.
    pub fn matrix(&self) -> DMatrix<f64> {
        design_matrix(&self.x, &self.scores, self.treatment.as_deref())
    }
}

/// Stack `(1, X, S)` and, with a treatment, the interacted copy `A·(1, X, S)`.
pub fn design_matrix(x: &DMatrix<f64>, scores: &DMatrix<f64>, treatment: Option<&[bool]>) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let m = scores.ncols();
    let p = 1 + d + m;
    let width = if treatment.is_some() { 2 * p } else { p };
    let mut u = DMatrix::zeros(n, width);
    for i in 0..n {
        u[(i, 0)] = 1.0;
        for k in 0..d {
            u[(i, 1 + k)] = x[(i, k)];
        }
        for j in 0..m {
            u[(i, 1 + d + j)] = scores[(i, j)];
        }
        if let Some(a) = treatment {
            if a[i] {
                for c in 0..p {
                    u[(i, p + c)] = u[(i, c)];
                }
            }
        }
    }
    u
}

/// Row labels for a coefficient vector: `alpha`, `beta1..`, `gamma1..`,
/// then the same names prefixed with `trt:` for the interaction block.
pub fn term_names(d: usize, m: usize, precision: bool) -> Vec<String> {
    let mut base = vec!["alpha".to_string()];
    base.extend((1..=d).map(|k| format!("beta{k}")));
    base.extend((1..=m).map(|j| format!("gamma{j}")));
    if precision {
        let modifier: Vec<String> = base.iter().map(|t| format!("trt:{t}")).collect();
        base.extend(modifier);
    }
    base
}

/// Least-squares solution of a (possibly weighted) linear model.
#[derive(Debug, Clone)]
pub(crate) struct OlsSolution {
    pub theta: DVector<f64>,
    pub condition: f64,
}

/// Solve `min Σ w_i (y_i − u_iᵀθ)²` through an SVD of the (row-scaled)
/// design. Fails when `(smax/smin)²`, the condition number of the
/// second-moment matrix, exceeds [`CONDITION_LIMIT`].
pub(crate) fn solve_ols(u: &DMatrix<f64>, y: &DVector<f64>, weights: Option<&[f64]>) -> Result<OlsSolution> {
    let (a, b) = match weights {
        None => (u.clone(), y.clone()),
        Some(w) => {
            let mut a = u.clone();
            let mut b = y.clone();
            for (i, wi) in w.iter().enumerate() {
                let s = wi.sqrt();
                a.row_mut(i).scale_mut(s);
                b[i] *= s;
            }
            (a, b)
        }
    };
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 {
        (smax / smin).powi(2)
    } else {
        f64::INFINITY
    };
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::Nondegeneracy {
            condition,
            limit: CONDITION_LIMIT,
        });
    }
    let theta = svd.solve(&b, 0.0).map_err(|e| Error::DegenerateDesign(e.to_string()))?;
    Ok(OlsSolution { theta, condition })
}

/// Fitted HS-PCR coefficients.
#[derive(Debug, Clone)]
pub struct ThetaFit {
    theta: DVector<f64>,
    d: usize,
    m: usize,
    sigma_hat: DMatrix<f64>,
    residuals: DVector<f64>,
    condition: f64,
}

impl ThetaFit {
    /// Full coefficient vector `(alpha, beta, gamma)`.
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn alpha_hat(&self) -> f64 {
        self.theta[0]
    }

    pub fn beta_hat(&self) -> &[f64] {
        &self.theta.as_slice()[1..1 + self.d]
    }

    pub fn gamma_scores(&self) -> &[f64] {
        &self.theta.as_slice()[1 + self.d..]
    }

    /// `P_n(U Uᵀ)`.
    pub fn sigma_hat(&self) -> &DMatrix<f64> {
        &self.sigma_hat
    }

    pub fn residuals(&self) -> &DVector<f64> {
        &self.residuals
    }

    /// Condition number of [`ThetaFit::sigma_hat`].
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }
}

/// `(theta, sigma_hat, residuals, condition)`.
type MatrixFit = (DVector<f64>, DMatrix<f64>, DVector<f64>, f64);

fn fit_matrix(u: &DMatrix<f64>, y: &DVector<f64>) -> Result<MatrixFit> {
    let n = u.nrows();
    if n <= u.ncols() {
        return Err(Error::InsufficientData(format!(
            "{n} observations for {} regressors",
            u.ncols()
        )));
    }
    let sol = solve_ols(u, y, None)?;
    let sigma = u.transpose() * u / n as f64;
    let residuals = y - u * &sol.theta;
    Ok((sol.theta, sigma, residuals, sol.condition))
}

/// Ordinary least squares on `(1, X, S)`. Any treatment column on the
/// design is ignored; use [`fit_precision`] for the interaction model.
pub fn fit_hspcr(design: &RegressionDesign) -> Result<ThetaFit> {
    let u = design_matrix(&design.x, &design.scores, None);
    let (theta, sigma_hat, residuals, condition) = fit_matrix(&u, &design.y)?;
    Ok(ThetaFit {
        theta,
        d: design.d(),
        m: design.m(),
        sigma_hat,
        residuals,
        condition,
    })
}

/// `gamma_hat = Σ_j gamma_j phi_hat_j`.
pub fn gamma_element(fit: &ThetaFit, model: &EigenModel) -> Result<Element> {
    gamma_from_scores(fit.gamma_scores(), model)
}

pub(crate) fn gamma_from_scores(gamma: &[f64], model: &EigenModel) -> Result<Element> {
    if gamma.len() > model.rank() {
        return Err(Error::Conformance {
            what: "gamma scores",
            expected: model.rank(),
            found: gamma.len(),
        });
    }
    let phi = model.eigenfunctions();
    let mut out = vec![0.0; phi.ncols()];
    for (j, g) in gamma.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(phi.row(j).iter()) {
            *o += g * p;
        }
    }
    Element::new(out)
}

/// `alpha + betaᵀx + gammaᵀs`.
pub fn predict(fit: &ThetaFit, x_new: &[f64], score_new: &[f64]) -> Result<f64> {
    if x_new.len() != fit.d {
        return Err(Error::Conformance {
            what: "covariate vector",
            expected: fit.d,
            found: x_new.len(),
        });
    }
    if score_new.len() != fit.m {
        return Err(Error::Conformance {
            what: "score vector",
            expected: fit.m,
            found: score_new.len(),
        });
    }
    let lin: f64 = fit.beta_hat().iter().zip(x_new).map(|(b, x)| b * x).sum::<f64>()
        + fit
            .gamma_scores()
            .iter()
            .zip(score_new)
            .map(|(g, s)| g * s)
            .sum::<f64>();
    Ok(fit.alpha_hat() + lin)
}

/// One `(alpha, beta, gamma)` block of the interaction model.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefBlock {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl CoefBlock {
    fn unpack(theta: &[f64], d: usize) -> Self {
        Self {
            alpha: theta[0],
            beta: theta[1..1 + d].to_vec(),
            gamma: theta[1 + d..].to_vec(),
        }
    }
}

/// Fit of `f(alpha1, beta1, gamma1) + A·f(alpha2, beta2, gamma2)`.
#[derive(Debug, Clone)]
pub struct PrecisionFit {
    pub base: CoefBlock,
    pub modifier: CoefBlock,
    theta: DVector<f64>,
    sigma_hat: DMatrix<f64>,
    residuals: DVector<f64>,
    condition: f64,
    d: usize,
    m: usize,
}

impl PrecisionFit {
    /// Stacked coefficients: base block then modifier block.
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn sigma_hat(&self) -> &DMatrix<f64> {
        &self.sigma_hat
    }

    pub fn residuals(&self) -> &DVector<f64> {
        &self.residuals
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }
}

/// OLS on `(1, X, S, A, A·X, A·S)`.
pub fn fit_precision(design: &RegressionDesign) -> Result<PrecisionFit> {
    let a = design
        .treatment()
        .ok_or_else(|| Error::Config("the interaction model needs a treatment indicator".into()))?;
    let treated = a.iter().filter(|t| **t).count();
    if treated == 0 || treated == a.len() {
        return Err(Error::DegenerateDesign(format!(
            "both treatment arms must be non-empty ({treated} of {} treated); the modifier block is not estimable",
            a.len()
        )));
    }
    let u = design.matrix();
    let (theta, sigma_hat, residuals, condition) = fit_matrix(&u, &design.y)?;
    let p = 1 + design.d() + design.m();
    Ok(PrecisionFit {
        base: CoefBlock::unpack(&theta.as_slice()[..p], design.d()),
        modifier: CoefBlock::unpack(&theta.as_slice()[p..], design.d()),
        theta,
        sigma_hat,
        residuals,
        condition,
        d: design.d(),
        m: design.m(),
    })
}

/// Score column `col` of the design carries component `j`, optionally
/// multiplied by the treatment indicator.
#[derive(Debug, Clone, Copy)]
struct ScoreColumn {
    col: usize,
    j: usize,
    treated_only: bool,
}

fn score_columns(d: usize, m: usize, precision: bool) -> Vec<ScoreColumn> {
    let p = 1 + d + m;
    let mut cols: Vec<ScoreColumn> = (0..m)
        .map(|j| ScoreColumn {
            col: 1 + d + j,
            j,
            treated_only: false,
        })
        .collect();
    if precision {
        cols.extend((0..m).map(|j| ScoreColumn {
            col: p + 1 + d + j,
            j,
            treated_only: true,
        }));
    }
    cols
}

fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .pseudo_inverse(0.0)
        .map_err(|e| Error::DegenerateDesign(e.to_string()))
}

/// Per-observation influence vectors (`n × p`) of the coefficient estimate,
/// `Sigma⁻¹ [U_i e_i + L0_i]`.
///
/// `L0` accounts for the estimation error of the eigenfunctions: each score
/// regressor is perturbed along the other retained components, weighted by
/// inverse spectral gaps, and propagated through the coefficients given in
/// `correction_theta`. Passing the fitted coefficients gives the plug-in
/// estimate. Passing zeros for the score coefficients while using every
/// retained component in the design reduces the result to the HC0
/// sandwich influence `Sigma⁻¹ U_i e_i`.
#[allow(clippy::too_many_arguments)]
fn influence_core(
    u: &DMatrix<f64>,
    residuals: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    correction_theta: &DVector<f64>,
    cols: &[ScoreColumn],
    treatment: Option<&[bool]>,
    xi: &DMatrix<f64>,
    s: &DMatrix<f64>,
    lambdas: &[f64],
    gap_tol: f64,
) -> Result<DMatrix<f64>> {
    let n = u.nrows();
    let p = u.ncols();
    let nf = n as f64;
    let big_j = lambdas.len();
    let a = |i: usize, treated_only: bool| -> f64 {
        match (treated_only, treatment) {
            (false, _) => 1.0,
            (true, Some(t)) => f64::from(u8::from(t[i])),
            (true, None) => 0.0,
        }
    };
    let needed: Vec<usize> = {
        let mut js: Vec<usize> = cols.iter().map(|c| c.j).collect();
        js.sort_unstable();
        js.dedup();
        js
    };
    let mut inv_gap = DMatrix::zeros(big_j, big_j);
    for &j in &needed {
        for k in 0..big_j {
            if k == j {
                continue;
            }
            let gap = lambdas[j] - lambdas[k];
            if gap.abs() <= gap_tol {
                return Err(Error::NearMultiplicity {
                    j,
                    k,
                    gap: gap.abs(),
                    tol: gap_tol,
                });
            }
            inv_gap[(j, k)] = 1.0 / gap;
        }
    }
    // e1[c][k] = P_n[a_c s_k e]
    let e1: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            (0..big_j)
                .map(|k| {
                    (0..n)
                        .map(|i| a(i, c.treated_only) * s[(i, k)] * residuals[i])
                        .sum::<f64>()
                        / nf
                })
                .collect()
        })
        .collect();
    // e2[col][c'][k] = P_n[U_col a_c' s_k]
    let mut e2 = vec![vec![vec![0.0; big_j]; cols.len()]; p];
    for (col, e2_col) in e2.iter_mut().enumerate() {
        for (cp, c) in cols.iter().enumerate() {
            for k in 0..big_j {
                e2_col[cp][k] = (0..n)
                    .map(|i| u[(i, col)] * a(i, c.treated_only) * s[(i, k)])
                    .sum::<f64>()
                    / nf;
            }
        }
    }
    let col_index: Vec<Option<usize>> = (0..p).map(|col| cols.iter().position(|c| c.col == col)).collect();
    let sigma_inv = pseudo_inverse(sigma_hat)?;
    let mut raw = DMatrix::zeros(n, p);
    let mut coef = vec![0.0; big_j];
    for i in 0..n {
        for col in 0..p {
            raw[(i, col)] = u[(i, col)] * residuals[i];
        }
        for &j in &needed {
            for k in 0..big_j {
                coef[k] = if k == j {
                    0.0
                } else {
                    xi[(i, k)] * xi[(i, j)] * inv_gap[(j, k)]
                };
            }
            for col in 0..p {
                let mut l0 = 0.0;
                if let Some(ci) = col_index[col] {
                    if cols[ci].j == j {
                        l0 += (0..big_j).map(|k| coef[k] * e1[ci][k]).sum::<f64>();
                    }
                }
                for (cp, c) in cols.iter().enumerate() {
                    if c.j != j {
                        continue;
                    }
                    let th = correction_theta[c.col];
                    if th == 0.0 {
                        continue;
                    }
                    l0 -= th * (0..big_j).map(|k| coef[k] * e2[col][cp][k]).sum::<f64>();
                }
                raw[(i, col)] += l0;
            }
        }
    }
    Ok(raw * sigma_inv.transpose())
}

/// Covariance of the mean of the influence vectors: their divisor-`n`
/// sample covariance divided by `n`.
pub fn influence_covariance(psi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = psi.nrows() as f64;
    let mut c = psi.clone();
    let means = psi.row_sum() / n;
    for (mut col, m) in c.column_iter_mut().zip(means.iter()) {
        col.add_scalar_mut(-m);
    }
    c.transpose() * &c / (n * n)
}

struct Moments {
    xi: DMatrix<f64>,
    s: DMatrix<f64>,
}

fn moments(model: &EigenModel, space: &AmbientSpace, sample: &SampleSet, n: usize) -> Result<Moments> {
    if sample.n() != n {
        return Err(Error::Conformance {
            what: "sample rows",
            expected: n,
            found: sample.n(),
        });
    }
    Ok(Moments {
        xi: centered_scores(model, space, sample)?,
        s: component_scores(model, space, sample)?,
    })
}

/// Influence vectors of the HS-PCR estimate with the eigenfunction
/// correction evaluated at `correction_theta` (length `1 + d + m`).
pub fn theta_influence(
    fit: &ThetaFit,
    model: &EigenModel,
    space: &AmbientSpace,
    sample: &SampleSet,
    design: &RegressionDesign,
    correction_theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if fit.m > model.rank() {
        return Err(Error::Conformance {
            what: "score columns",
            expected: model.rank(),
            found: fit.m,
        });
    }
    if correction_theta.len() != fit.theta.len() {
        return Err(Error::Conformance {
            what: "correction coefficients",
            expected: fit.theta.len(),
            found: correction_theta.len(),
        });
    }
    let mo = moments(model, space, sample, design.n())?;
    let u = design_matrix(&design.x, &design.scores, None);
    influence_core(
        &u,
        &fit.residuals,
        &fit.sigma_hat,
        correction_theta,
        &score_columns(fit.d, fit.m, false),
        None,
        &mo.xi,
        &mo.s,
        model.lambdas(),
        DEFAULT_GAP_TOL * model.lambdas().first().copied().unwrap_or(0.0),
    )
}

/// Plug-in covariance of the HS-PCR coefficients including the
/// eigenfunction-estimation correction, truncated to the retained
/// components.
pub fn plugin_theta_cov(
    fit: &ThetaFit,
    model: &EigenModel,
    space: &AmbientSpace,
    sample: &SampleSet,
    design: &RegressionDesign,
) -> Result<DMatrix<f64>> {
    let psi = theta_influence(fit, model, space, sample, design, fit.theta())?;
    Ok(influence_covariance(&psi))
}

/// Plug-in covariance for the interaction model.
pub fn plugin_precision_cov(
    fit: &PrecisionFit,
    model: &EigenModel,
    space: &AmbientSpace,
    sample: &SampleSet,
    design: &RegressionDesign,
) -> Result<DMatrix<f64>> {
    let mo = moments(model, space, sample, design.n())?;
    let u = design.matrix();
    let psi = influence_core(
        &u,
        &fit.residuals,
        &fit.sigma_hat,
        &fit.theta,
        &score_columns(fit.d, fit.m, true),
        design.treatment(),
        &mo.xi,
        &mo.s,
        model.lambdas(),
        DEFAULT_GAP_TOL * model.lambdas().first().copied().unwrap_or(0.0),
    )?;
    Ok(influence_covariance(&psi))
}

/// Heteroskedasticity-robust (HC0) sandwich `Sigma⁻¹ P_n(U Uᵀ e²) Sigma⁻¹ / n`.
pub fn sandwich_cov(fit: &ThetaFit, design: &RegressionDesign) -> Result<DMatrix<f64>> {
    let u = design_matrix(&design.x, &design.scores, None);
    let n = u.nrows() as f64;
    let mut ue = u.clone();
    for (mut row, e) in ue.row_iter_mut().zip(fit.residuals.iter()) {
        row *= *e;
    }
    let meat = ue.transpose() * &ue / n;
    let inv = pseudo_inverse(&fit.sigma_hat)?;
    Ok(&inv * meat * &inv / n)
}
