//! The discretised Hilbert space: grids, quadrature weights, elements,
//! inner products, Gram matrices and the whitening transform that turns a
//! raw basis into an orthonormal frame.

use nalgebra::DMatrix;

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;

/// Default relative threshold below which Gram eigenvalues count as zero.
pub const DEFAULT_DROP_TOL: f64 = 1e-10;

/// A rectangular grid with a quadrature weight per cell.
///
/// Cells are indexed row-major (last axis fastest). The inner product of two
/// elements is `sum_v weights[v] * a[v] * b[v]`, a Riemann sum for the L2
/// inner product over the grid's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientSpace {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    weights: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl AmbientSpace {
    /// Grid with unit spacing on every axis, so every cell has weight 1.
    pub fn grid(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    /// Grid with the given per-axis spacing; weights are the cell measure.
    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if spacing.len() != dims.len() {
            return Err(Error::Conformance {
                what: "spacing",
                expected: dims.len(),
                found: spacing.len(),
            });
        }
        if spacing.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::Config("grid spacing must be positive".into()));
        }
        let cell = spacing.iter().product::<f64>();
        let count = checked_count(dims)?;
        Self::build(dims.to_vec(), spacing.to_vec(), vec![cell; count], None)
    }

    /// Grid with explicit per-cell weights (unit spacing for geometry).
    pub fn with_weights(dims: &[usize], weights: Vec<f64>) -> Result<Self> {
        Self::build(dims.to_vec(), vec![1.0; dims.len()], weights, None)
    }

    pub(crate) fn build(
        dims: Vec<usize>,
        spacing: Vec<f64>,
        weights: Vec<f64>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let count = checked_count(&dims)?;
        if weights.len() != count {
            return Err(Error::Conformance {
                what: "weights",
                expected: count,
                found: weights.len(),
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                what: "weights",
                index: i,
            });
        }
        if weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("quadrature weights must be nonnegative".into()));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::EmptyDomain);
        }
        if let Some(m) = &mask {
            if m.len() != count {
                return Err(Error::Conformance {
                    what: "mask",
                    expected: count,
                    found: m.len(),
                });
            }
        }
        Ok(Self {
            dims,
            spacing,
            weights,
            mask,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Number of grid cells `V`.
    pub fn cell_count(&self) -> usize {
        self.weights.len()
    }

    /// Whether cell `v` lies inside the domain.
    pub fn is_inside(&self, v: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[v])
    }

    /// Physical length of axis `axis`.
    pub fn extent(&self, axis: usize) -> f64 {
        self.dims[axis] as f64 * self.spacing[axis]
    }

    /// Multi-index of cell `v`.
    pub fn unravel(&self, mut v: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims.len()];
        for axis in (0..self.dims.len()).rev() {
            idx[axis] = v % self.dims[axis];
            v /= self.dims[axis];
        }
        idx
    }

    /// Physical coordinates of the centre of cell `v`.
    pub fn cell_center(&self, v: usize) -> Vec<f64> {
        self.unravel(v)
            .iter()
            .zip(&self.spacing)
            .map(|(&i, &h)| (i as f64 + 0.5) * h)
            .collect()
    }

    /// Centre of cell `v` mapped into the unit cube.
    pub fn unit_center(&self, v: usize) -> Vec<f64> {
        self.unravel(v)
            .iter()
            .zip(&self.dims)
            .map(|(&i, &d)| (i as f64 + 0.5) / d as f64)
            .collect()
    }

    pub(crate) fn check_len(&self, what: &'static str, len: usize) -> Result<()> {
        if len != self.cell_count() {
            return Err(Error::Conformance {
                what,
                expected: self.cell_count(),
                found: len,
            });
        }
        Ok(())
    }

    /// `rows_a · diag(w) · rows_bᵀ`: all pairwise inner products between the
    /// rows of two stacks of elements.
    pub(crate) fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut aw = a.clone();
        for (mut col, w) in aw.column_iter_mut().zip(&self.weights) {
            col *= *w;
        }
        aw * b.transpose()
    }
}

fn checked_count(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Config(format!("grid dimensions must be positive, got {dims:?}")));
    }
    Ok(dims.iter().product())
}

/// One point of the discretised space.
#[derive(Debug, Clone, PartialEq)]
pub struct Element(Vec<f64>);

impl Element {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "element",
                index: i,
            });
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `n` elements stacked as the rows of an `n × V` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    rows: DMatrix<f64>,
}

impl SampleSet {
    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::EmptySample("sample has no rows".into()));
        }
        if let Some(i) = rows.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "sample",
                index: i,
            });
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Element]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::EmptySample("sample has no rows".into()))?;
        let v = first.len();
        for r in rows {
            if r.len() != v {
                return Err(Error::Conformance {
                    what: "sample row",
                    expected: v,
                    found: r.len(),
                });
            }
        }
        Ok(Self {
            rows: DMatrix::from_fn(rows.len(), v, |i, j| rows[i].0[j]),
        })
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn cell_count(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> Element {
        Element(self.rows.row(i).iter().copied().collect())
    }

    /// Subsample by row indices (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> SampleSet {
        SampleSet {
            rows: self.rows.select_rows(idx),
        }
    }
}

/// Gram matrix `L` of a basis under the space inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
}

impl GramMatrix {
    /// Wrap a matrix after checking symmetry (1e-12 relative) and positive
    /// semi-definiteness (min eigenvalue ≥ −1e-10 · max eigenvalue).
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::Config("Gram matrix must be square".into()));
        }
        let scale = entries.abs().max().max(f64::MIN_POSITIVE);
        let asym = (&entries - entries.transpose()).abs().max();
        if asym > 1e-12 * scale {
            return Err(Error::Config(format!("Gram matrix is not symmetric (defect {asym:e})")));
        }
        let (vals, _) = sym_eigen_desc(&entries);
        if let (Some(max), Some(min)) = (vals.first(), vals.last()) {
            if *min < -1e-10 * max.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::Config(format!(
                    "Gram matrix is not positive semi-definite (min eigenvalue {min:e})"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }
}

/// The rank-truncated inverse square root `Λ^{-1/2} Γᵀ` of a Gram matrix.
///
/// Row `k` of `factor` holds the coefficients of the `k`-th orthonormal frame
/// element on the raw basis; `factor · L · factorᵀ = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    factor: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    drop_tol: f64,
}

impl Whitener {
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn rank(&self) -> usize {
        self.factor.nrows()
    }

    /// Retained Gram eigenvalues, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn drop_tol(&self) -> f64 {
        self.drop_tol
    }
}

/// Weighted inner product of two elements.
pub fn inner(space: &AmbientSpace, a: &Element, b: &Element) -> Result<f64> {
    space.check_len("element", a.len())?;
    space.check_len("element", b.len())?;
    Ok(space
        .weights
        .iter()
        .zip(a.values().iter().zip(b.values()))
        .map(|(w, (x, y))| w * x * y)
        .sum())
}

/// Norm induced by the space inner product.
pub fn norm(space: &AmbientSpace, a: &Element) -> Result<f64> {
    Ok(inner(space, a, a)?.max(0.0).sqrt())
}

/// Gram matrix of a basis.
pub fn gram(space: &AmbientSpace, basis: &BasisSet) -> Result<GramMatrix> {
    space.check_len("basis function", basis.functions().ncols())?;
    let g = space.cross(basis.functions(), basis.functions());
    let g = (&g + g.transpose()) * 0.5;
    Ok(GramMatrix { entries: g })
}

/// Eigendecompose `L`, drop eigenvalues at or below `drop_tol · max`, and
/// return `Λ^{-1/2} Γᵀ` for the kept ones, rows in descending eigenvalue
/// order.
pub fn whiten(gram: &GramMatrix, drop_tol: f64) -> Result<Whitener> {
    if !(drop_tol > 0.0 && drop_tol < 1.0) {
        return Err(Error::Config(format!(
            "drop tolerance must lie in (0, 1), got {drop_tol}"
        )));
    }
    let (vals, vecs) = sym_eigen_desc(&gram.entries);
    let max = vals.first().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return Err(Error::EmptyBasis {
            drop_tol,
            max_eigenvalue: max,
        });
    }
    let kept: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > drop_tol * max).collect();
    let n = gram.size();
    let mut factor = DMatrix::zeros(kept.len(), n);
    for (row, &k) in kept.iter().enumerate() {
        let s = vals[k].sqrt();
        for c in 0..n {
            factor[(row, c)] = vecs[(c, k)] / s;
        }
    }
    Ok(Whitener {
        factor,
        eigenvalues: kept.iter().map(|&k| vals[k]).collect(),
        drop_tol,
    })
}

/// Componentwise sample mean.
pub fn mean_element(sample: &SampleSet) -> Result<Element> {
    let n = sample.n();
    if n == 0 {
        return Err(Error::EmptySample("mean of an empty sample".into()));
    }
    let m = sample.rows.row_sum() / n as f64;
    Ok(Element(m.iter().copied().collect()))
}

/// Entry `(i, l)` is `<psi*_l, Z_i − center>`.
pub fn project_scores(
    space: &AmbientSpace,
    basis: &BasisSet,
    sample: &SampleSet,
    center: &Element,
) -> Result<DMatrix<f64>> {
    space.check_len("basis function", basis.functions().ncols())?;
    space.check_len("sample row", sample.cell_count())?;
    space.check_len("center", center.len())?;
    let mut centered = sample.rows.clone();
    for (mut col, c) in centered.column_iter_mut().zip(center.values()) {
        col.add_scalar_mut(-c);
    }
    Ok(space.cross(&centered, basis.functions()))
}

/// The orthonormal frame `factor · Ψ*` as an `rank × V` matrix.
pub fn orthonormal_frame(basis: &BasisSet, whitener: &Whitener) -> DMatrix<f64> {
    whitener.factor() * basis.functions()
}
