use nalgebra::DMatrix;

use super::{BasisSet, Provenance};
use crate::error::{Error, Result};
use crate::space::AmbientSpace;

/// Clamped knot sequence for B-splines of a fixed degree.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    /// Validate a full knot sequence: nondecreasing, `degree + 1` repeated
    /// knots at each end, interior knots strictly inside.
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        let p = degree;
        if knots.len() < 2 * (p + 1) {
            return Err(Error::Config(format!(
                "a degree-{p} knot vector needs at least {} knots, got {}",
                2 * (p + 1),
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("knots must be finite and nondecreasing".into()));
        }
        let lo = knots[0];
        let hi = knots[knots.len() - 1];
        if !(hi > lo) {
            return Err(Error::Config("knot range has zero width".into()));
        }
        let m = knots.len();
        if knots[..=p].iter().any(|k| *k != lo) || knots[m - p - 1..].iter().any(|k| *k != hi) {
            return Err(Error::Config(format!(
                "ends must be clamped with multiplicity {}",
                p + 1
            )));
        }
        if knots[p + 1..m - p - 1].iter().any(|k| *k <= lo || *k >= hi) {
            return Err(Error::Config(
                "interior knots must lie strictly inside the clamped range".into(),
            ));
        }
        Ok(Self { degree, knots })
    }

    /// Clamped knots on `[lo, hi]` with `interior` uniformly spaced interior knots.
    pub fn uniform(degree: usize, interior: usize, lo: f64, hi: f64) -> Result<Self> {
        let mut knots = vec![lo; degree + 1];
        for i in 1..=interior {
            knots.push(lo + (hi - lo) * i as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Self::new(degree, knots)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `interior + degree + 1`.
    pub fn basis_count(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let n = self.basis_count();
        if x >= self.knots[n] {
            return n - 1;
        }
        if x <= self.knots[p] {
            return p;
        }
        // largest i in [p, n) with knots[i] <= x
        let mut lo = p;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// All basis functions at `x` (zero outside the knot range is not
    /// special-cased: `x` is clamped into the last span).
    pub fn eval_all(&self, x: f64) -> Vec<f64> {
        let p = self.degree;
        let t = &self.knots;
        let span = self.span(x);
        // triangular Cox–de Boor table for the p + 1 nonzero functions
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { vals[r] / denom } else { 0.0 };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        let mut out = vec![0.0; self.basis_count()];
        for (k, v) in vals.into_iter().enumerate() {
            out[span - p + k] = v;
        }
        out
    }
}

/// Tensor-product B-spline basis evaluated at cell centres, knots uniform
/// over each axis' physical extent. Rows enumerate per-axis function
/// indices in row-major order (last axis fastest) before masking.
pub fn bspline_tensor_basis(space: &AmbientSpace, degrees: &[usize], interior_knots: &[usize]) -> Result<BasisSet> {
    let nd = space.ndim();
    if degrees.len() != nd || interior_knots.len() != nd {
        return Err(Error::Config(format!(
            "expected {nd} per-axis degrees and knot counts, got {} and {}",
            degrees.len(),
            interior_knots.len()
        )));
    }
    let mut axis_vals: Vec<DMatrix<f64>> = Vec::with_capacity(nd);
    for axis in 0..nd {
        let points = space.dims()[axis];
        if points < degrees[axis] + 1 {
            return Err(Error::Config(format!(
                "axis {axis} has {points} grid points, too few for degree {}",
                degrees[axis]
            )));
        }
        let kv = KnotVector::uniform(degrees[axis], interior_knots[axis], 0.0, space.extent(axis))?;
        let h = space.spacing()[axis];
        let count = kv.basis_count();
        let mut m = DMatrix::zeros(count, points);
        for i in 0..points {
            let vals = kv.eval_all((i as f64 + 0.5) * h);
            for (k, v) in vals.into_iter().enumerate() {
                m[(k, i)] = v;
            }
        }
        axis_vals.push(m);
    }
    let counts: Vec<usize> = axis_vals.iter().map(|m| m.nrows()).collect();
    let total: usize = counts.iter().product();
    let v_count = space.cell_count();
    let cells: Vec<Vec<usize>> = (0..v_count).map(|v| space.unravel(v)).collect();
    let mut functions = DMatrix::zeros(total, v_count);
    let mut fidx = vec![0usize; nd];
    for row in 0..total {
        let mut rem = row;
        for axis in (0..nd).rev() {
            fidx[axis] = rem % counts[axis];
            rem /= counts[axis];
        }
        for (v, cell) in cells.iter().enumerate() {
            let mut val = 1.0;
            for axis in 0..nd {
                val *= axis_vals[axis][(fidx[axis], cell[axis])];
                if val == 0.0 {
                    break;
                }
            }
            functions[(row, v)] = val;
        }
    }
    let (functions, kept) = BasisSet::masked(functions, space);
    Ok(BasisSet {
        functions,
        provenance: Provenance::BSpline {
            degrees: degrees.to_vec(),
            interior_knots: interior_knots.to_vec(),
            kept,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::mask_space;

    /// Textbook recursive Cox–de Boor, half-open spans, used as an oracle.
    fn cox_de_boor(t: &[f64], i: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        let mut out = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 > 0.0 {
            out += (x - t[i]) / d1 * cox_de_boor(t, i, p - 1, x);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 > 0.0 {
            out += (t[i + p + 1] - x) / d2 * cox_de_boor(t, i + 1, p - 1, x);
        }
        out
    }

    #[test]
    fn knot_vector_validation() {
        assert!(KnotVector::new(1, vec![0., 0., 1., 1.]).is_ok());
        assert!(KnotVector::new(1, vec![0., 1., 1., 1.]).is_err());
        assert!(KnotVector::new(1, vec![0., 0., 0.5, 0.2, 1., 1.]).is_err());
        assert!(KnotVector::new(1, vec![0., 0., 0., 1., 1.]).is_err());
        assert!(KnotVector::new(2, vec![0., 0., 1., 1.]).is_err());
    }

    #[test]
    fn eval_matches_recursive_oracle() {
        for p in 0..=3 {
            let kv = KnotVector::uniform(p, 4, 0.0, 2.0).unwrap();
            for s in 0..97 {
                let x = s as f64 * 2.0 / 97.0;
                let fast = kv.eval_all(x);
                for (i, f) in fast.iter().enumerate() {
                    let slow = cox_de_boor(kv.knots(), i, p, x);
                    assert!((f - slow).abs() < 1e-13, "p={p} i={i} x={x}");
                }
            }
        }
    }

    #[test]
    fn degree_zero_single_span() {
        let s = AmbientSpace::grid(&[4]).unwrap();
        let b = bspline_tensor_basis(&s, &[0], &[0]).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.functions().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn degree_one_hats_sum_to_one() {
        let s = AmbientSpace::grid(&[7]).unwrap();
        let b = bspline_tensor_basis(&s, &[1], &[0]).unwrap();
        assert_eq!(b.len(), 2);
        for v in 0..7 {
            let sum: f64 = b.functions().column(v).sum();
            assert!((sum - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn cubic_tensor_counts_and_unity() {
        let s = AmbientSpace::grid(&[20, 24]).unwrap();
        let b = bspline_tensor_basis(&s, &[3, 3], &[5, 5]).unwrap();
        assert_eq!(b.len(), 81);
        for v in 0..s.cell_count() {
            let col = b.functions().column(v);
            assert!((col.sum() - 1.0).abs() < 1e-12);
            assert!(col.iter().all(|x| *x >= 0.0));
        }
        // spot-check rows against the recursive oracle
        let kx = KnotVector::uniform(3, 5, 0.0, 20.0).unwrap();
        let ky = KnotVector::uniform(3, 5, 0.0, 24.0).unwrap();
        for &(row, v) in &[(0usize, 0usize), (40, 250), (80, 479), (13, 77)] {
            let (fx, fy) = (row / 9, row % 9);
            let c = s.cell_center(v);
            let want = cox_de_boor(kx.knots(), fx, 3, c[0]) * cox_de_boor(ky.knots(), fy, 3, c[1]);
            assert!((b.functions()[(row, v)] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn grid_too_small() {
        let s = AmbientSpace::grid(&[3]).unwrap();
        assert!(matches!(bspline_tensor_basis(&s, &[3], &[0]), Err(Error::Config(_))));
    }

    #[test]
    fn masking_drops_vanishing_rows() {
        let s = AmbientSpace::grid(&[10]).unwrap();
        let mask: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let ms = mask_space(&s, &mask).unwrap();
        let full = bspline_tensor_basis(&s, &[1], &[8]).unwrap();
        let b = bspline_tensor_basis(&ms, &[1], &[8]).unwrap();
        assert!(b.len() < full.len());
        for v in 3..10 {
            assert!(b.functions().column(v).iter().all(|x| *x == 0.0));
        }
        for v in 0..3 {
            assert!((b.functions().column(v).sum() - 1.0).abs() < 1e-12);
        }
    }
}
