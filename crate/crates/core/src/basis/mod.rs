//! Projection bases sampled on the grid: tensor-product B-splines and
//! continuous piecewise-linear hat functions over triangulations.

mod bspline;
mod triangulation;

pub use bspline::{bspline_tensor_basis, KnotVector};
pub use triangulation::{tri_pl_basis, Triangulation};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::space::AmbientSpace;

/// Rows whose sup-norm falls below this after masking are dropped.
pub const ZERO_ROW_TOL: f64 = 1e-12;

/// Where a basis came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Raw,
    BSpline {
        degrees: Vec<usize>,
        interior_knots: Vec<usize>,
        /// Index of the tensor-product function behind each retained row.
        kept: Vec<usize>,
    },
    Triangulation {
        ndim: usize,
        vertices: usize,
        cells: usize,
        /// Mesh vertex behind each retained row.
        kept: Vec<usize>,
    },
}

/// `N` basis functions sampled at the grid cell centres, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    functions: DMatrix<f64>,
    provenance: Provenance,
}

impl BasisSet {
    /// Wrap a matrix as-is (no row filtering).
    pub fn raw(functions: DMatrix<f64>) -> Self {
        Self {
            functions,
            provenance: Provenance::Raw,
        }
    }

    pub fn functions(&self) -> &DMatrix<f64> {
        &self.functions
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Basis size `N`.
    pub fn len(&self) -> usize {
        self.functions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.nrows() == 0
    }

    /// Zero the values outside the domain mask and drop rows that vanish.
    /// Returns the basis and the indices of the rows kept.
    pub(crate) fn masked(mut functions: DMatrix<f64>, space: &AmbientSpace) -> (DMatrix<f64>, Vec<usize>) {
        if let Some(mask) = space.mask() {
            for (v, inside) in mask.iter().enumerate() {
                if !inside {
                    functions.column_mut(v).fill(0.0);
                }
            }
        }
        let kept: Vec<usize> = (0..functions.nrows())
            .filter(|&r| functions.row(r).amax() >= ZERO_ROW_TOL)
            .collect();
        if kept.len() < functions.nrows() {
            log::warn!(
                "dropping {} basis function(s) that vanish on the domain",
                functions.nrows() - kept.len()
            );
            functions = functions.select_rows(&kept);
        }
        (functions, kept)
    }
}

/// Restrict a space to the cells where `mask` is true by zeroing the other
/// weights. An existing mask is intersected with the new one.
pub fn mask_space(space: &AmbientSpace, mask: &[bool]) -> Result<AmbientSpace> {
    space.check_len("mask", mask.len())?;
    let combined: Vec<bool> = match space.mask() {
        Some(old) => old.iter().zip(mask).map(|(a, b)| *a && *b).collect(),
        None => mask.to_vec(),
    };
    if !combined.iter().any(|m| *m) {
        return Err(Error::EmptyDomain);
    }
    let weights = space
        .weights()
        .iter()
        .zip(&combined)
        .map(|(w, m)| if *m { *w } else { 0.0 })
        .collect();
    AmbientSpace::build(space.dims().to_vec(), space.spacing().to_vec(), weights, Some(combined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{inner, Element};

    #[test]
    fn mask_all_true_keeps_weights() {
        let s = AmbientSpace::with_spacing(&[3, 2], &[0.5, 2.0]).unwrap();
        let m = mask_space(&s, &[true; 6]).unwrap();
        assert_eq!(m.weights(), s.weights());
    }

    #[test]
    fn mask_half() {
        let s = AmbientSpace::grid(&[4]).unwrap();
        let m = mask_space(&s, &[true, false, true, false]).unwrap();
        assert_eq!(m.weights(), &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(mask_space(&s, &[false; 4]), Err(Error::EmptyDomain)));
        assert!(mask_space(&s, &[true; 3]).is_err());
    }

    #[test]
    fn circular_mask_ignores_exterior() {
        let s = AmbientSpace::grid(&[20, 20]).unwrap();
        let mask: Vec<bool> = (0..400)
            .map(|v| {
                let c = s.unit_center(v);
                (c[0] - 0.5).powi(2) + (c[1] - 0.5).powi(2) < 0.16
            })
            .collect();
        let ms = mask_space(&s, &mask).unwrap();
        let a: Vec<f64> = (0..400).map(|v| (v as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..400).map(|v| (v as f64 * 0.11).cos() + 1.0).collect();
        let direct: f64 = (0..400).filter(|&v| mask[v]).map(|v| a[v] * b[v]).sum();
        let got = inner(
            &ms,
            &Element::new(a.clone()).unwrap(),
            &Element::new(b.clone()).unwrap(),
        )
        .unwrap();
        assert!((got - direct).abs() < 1e-10);
        // changing exterior values leaves the inner product unchanged
        let a2: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(v, x)| if mask[v] { *x } else { 1e6 })
            .collect();
        let got2 = inner(&ms, &Element::new(a2).unwrap(), &Element::new(b).unwrap()).unwrap();
        assert_eq!(got, got2);
    }
}
