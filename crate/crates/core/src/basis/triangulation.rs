use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{BasisSet, Provenance};
use crate::error::{Error, Result};
use crate::space::AmbientSpace;

/// Barycentric slack when deciding whether a point lies in a simplex.
pub const COVER_TOL: f64 = 1e-9;

/// A conforming simplicial mesh (triangles in 2D, tetrahedra in 3D).
///
/// Coordinates live in the same physical frame as
/// [`AmbientSpace::cell_center`].
#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    ndim: usize,
    vertices: Vec<Vec<f64>>,
    cells: Vec<Vec<usize>>,
}

impl Triangulation {
    pub fn new(vertices: Vec<Vec<f64>>, cells: Vec<Vec<usize>>) -> Result<Self> {
        let ndim = vertices
            .first()
            .map(|v| v.len())
            .ok_or_else(|| Error::Mesh("no vertices".into()))?;
        if ndim != 2 && ndim != 3 {
            return Err(Error::Mesh(format!("only 2D and 3D meshes are supported, got {ndim}D")));
        }
        if let Some(i) = vertices.iter().position(|v| v.len() != ndim) {
            return Err(Error::Mesh(format!("vertex {i} has the wrong dimension")));
        }
        if vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Mesh("non-finite vertex coordinate".into()));
        }
        if cells.is_empty() {
            return Err(Error::Mesh("no cells".into()));
        }
        for (c, cell) in cells.iter().enumerate() {
            if cell.len() != ndim + 1 {
                return Err(Error::Mesh(format!(
                    "cell {c} has {} vertices, expected {}",
                    cell.len(),
                    ndim + 1
                )));
            }
            if let Some(bad) = cell.iter().find(|&&i| i >= vertices.len()) {
                return Err(Error::Mesh(format!("cell {c} references missing vertex {bad}")));
            }
        }
        let mesh = Self { ndim, vertices, cells };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Regular mesh of the rectangle `[x0, x1] × [y0, y1]`, each of the
    /// `nx × ny` squares split along its rising diagonal.
    pub fn rectangle(nx: usize, ny: usize, x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Mesh("rectangle needs at least one square per axis".into()));
        }
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(vec![
                    x0 + (x1 - x0) * i as f64 / nx as f64,
                    y0 + (y1 - y0) * j as f64 / ny as f64,
                ]);
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut cells = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                cells.push(vec![id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                cells.push(vec![id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        Self::new(vertices, cells)
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    fn edge_matrix(&self, cell: &[usize]) -> DMatrix<f64> {
        let d = self.ndim;
        let v0 = &self.vertices[cell[0]];
        DMatrix::from_fn(d, d, |r, c| self.vertices[cell[c + 1]][r] - v0[r])
    }

    fn scale(&self) -> f64 {
        let mut span: f64 = 0.0;
        for axis in 0..self.ndim {
            let (lo, hi) = self
                .vertices
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v[axis]), hi.max(v[axis])));
            span = span.max(hi - lo);
        }
        span.max(f64::MIN_POSITIVE)
    }

    fn validate(&self) -> Result<()> {
        let d = self.ndim;
        let scale = self.scale();
        for (c, cell) in self.cells.iter().enumerate() {
            let vol = self.edge_matrix(cell).determinant();
            if !(vol > 1e-12 * scale.powi(d as i32)) {
                return Err(Error::Mesh(format!(
                    "cell {c} has non-positive orientation volume {vol:e}"
                )));
            }
        }
        // facets shared by more than two cells, or boundary facets with a
        // foreign vertex on them (hanging node), break conformity
        let mut facets: HashMap<Vec<usize>, usize> = HashMap::new();
        for cell in &self.cells {
            for skip in 0..=d {
                let mut f: Vec<usize> = cell
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != skip)
                    .map(|(_, &v)| v)
                    .collect();
                f.sort_unstable();
                *facets.entry(f).or_insert(0) += 1;
            }
        }
        let mut boundary: Vec<&Vec<usize>> = Vec::new();
        for (f, count) in &facets {
            if *count > 2 {
                return Err(Error::Mesh(format!("facet {f:?} is shared by {count} cells")));
            }
            if *count == 1 {
                boundary.push(f);
            }
        }
        boundary.sort();
        let tol = 1e-9 * scale;
        for f in boundary {
            for (p, pt) in self.vertices.iter().enumerate() {
                if f.contains(&p) {
                    continue;
                }
                if self.point_on_facet(f, pt, tol) {
                    return Err(Error::Mesh(format!("hanging node: vertex {p} lies on facet {f:?}")));
                }
            }
        }
        Ok(())
    }

    fn point_on_facet(&self, f: &[usize], p: &[f64], tol: f64) -> bool {
        let a = DVector::from_column_slice(&self.vertices[f[0]]);
        let p = DVector::from_column_slice(p);
        if self.ndim == 2 {
            let b = DVector::from_column_slice(&self.vertices[f[1]]);
            let ab = &b - &a;
            let ap = &p - &a;
            let len2 = ab.norm_squared();
            let cross = ab[0] * ap[1] - ab[1] * ap[0];
            let t = ab.dot(&ap) / len2;
            cross.abs() <= tol * len2.sqrt() && t > 0.0 && t < 1.0
        } else {
            let b = DVector::from_column_slice(&self.vertices[f[1]]);
            let c = DVector::from_column_slice(&self.vertices[f[2]]);
            let ab = &b - &a;
            let ac = &c - &a;
            let ap = &p - &a;
            let normal = ab.cross(&ac);
            let nn = normal.norm();
            if (normal.dot(&ap) / nn).abs() > tol {
                return false;
            }
            // barycentric in the face plane
            let g = DMatrix::from_row_slice(2, 2, &[ab.dot(&ab), ab.dot(&ac), ab.dot(&ac), ac.dot(&ac)]);
            let rhs = DVector::from_vec(vec![ab.dot(&ap), ac.dot(&ap)]);
            match g.lu().solve(&rhs) {
                Some(uv) => uv[0] >= -1e-12 && uv[1] >= -1e-12 && uv[0] + uv[1] <= 1.0 + 1e-12,
                None => false,
            }
        }
    }

    /// Barycentric coordinates of `p` in cell `c` (vertex order of the cell).
    pub fn barycentric(&self, c: usize, p: &[f64]) -> Vec<f64> {
        let cell = &self.cells[c];
        let m = self.edge_matrix(cell);
        let v0 = &self.vertices[cell[0]];
        let rhs = DVector::from_fn(self.ndim, |r, _| p[r] - v0[r]);
        let lam = m.lu().solve(&rhs).expect("cells have positive volume");
        let mut out = Vec::with_capacity(self.ndim + 1);
        out.push(1.0 - lam.sum());
        out.extend(lam.iter().copied());
        out
    }

    /// First cell containing `p` within [`COVER_TOL`], with its barycentric
    /// coordinates.
    pub fn locate(&self, p: &[f64]) -> Option<(usize, Vec<f64>)> {
        (0..self.cells.len()).find_map(|c| {
            let b = self.barycentric(c, p);
            b.iter().all(|x| *x >= -COVER_TOL).then_some((c, b))
        })
    }

    /// Parse the `TRI <ndim> <nvert> <ncell>` text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .split_inclusive('\n')
            .scan(0u64, |off, line| {
                let start = *off;
                *off += line.len() as u64;
                Some((start, line.trim()))
            })
            .filter(|(_, l)| !l.is_empty());
        let fmt = |offset: u64, message: String| Error::Format { offset, message };
        let (off, header) = lines.next().ok_or_else(|| fmt(0, "empty mesh file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "TRI" {
            return Err(fmt(
                off,
                format!("expected 'TRI <ndim> <nvert> <ncell>', got '{header}'"),
            ));
        }
        let parse_usize = |s: &str, off: u64| {
            s.parse::<usize>()
                .map_err(|_| fmt(off, format!("expected a nonnegative integer, got '{s}'")))
        };
        let ndim = parse_usize(h[1], off)?;
        let nvert = parse_usize(h[2], off)?;
        let ncell = parse_usize(h[3], off)?;
        let mut vertices = Vec::with_capacity(nvert);
        for _ in 0..nvert {
            let (off, l) = lines
                .next()
                .ok_or_else(|| fmt(text.len() as u64, "truncated vertex list".into()))?;
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| fmt(off, format!("bad coordinate '{s}'"))))
                .collect::<Result<_>>()?;
            if v.len() != ndim {
                return Err(fmt(off, format!("vertex line has {} values, expected {ndim}", v.len())));
            }
            vertices.push(v);
        }
        let mut cells = Vec::with_capacity(ncell);
        for _ in 0..ncell {
            let (off, l) = lines
                .next()
                .ok_or_else(|| fmt(text.len() as u64, "truncated cell list".into()))?;
            let c: Vec<usize> = l
                .split_whitespace()
                .map(|s| parse_usize(s, off))
                .collect::<Result<_>>()?;
            if c.len() != ndim + 1 {
                return Err(fmt(
                    off,
                    format!("cell line has {} indices, expected {}", c.len(), ndim + 1),
                ));
            }
            cells.push(c);
        }
        if let Some((off, _)) = lines.next() {
            return Err(fmt(off, "trailing content after cell list".into()));
        }
        Self::new(vertices, cells)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("TRI {} {} {}\n", self.ndim, self.vertices.len(), self.cells.len());
        for v in &self.vertices {
            let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&parts.join(" "));
            s.push('\n');
        }
        for c in &self.cells {
            let parts: Vec<String> = c.iter().map(|x| x.to_string()).collect();
            s.push_str(&parts.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Hat-function basis over a triangulation: row `k` is the barycentric
/// coordinate of mesh vertex `k`, evaluated at every unmasked cell centre.
pub fn tri_pl_basis(space: &AmbientSpace, mesh: &Triangulation) -> Result<BasisSet> {
    if mesh.ndim() != space.ndim() {
        return Err(Error::Config(format!(
            "mesh is {}D but the grid is {}D",
            mesh.ndim(),
            space.ndim()
        )));
    }
    let v_count = space.cell_count();
    let mut functions = DMatrix::zeros(mesh.vertices().len(), v_count);
    let mut uncovered = Vec::new();
    for v in 0..v_count {
        if !space.is_inside(v) {
            continue;
        }
        match mesh.locate(&space.cell_center(v)) {
            Some((c, bary)) => {
                for (k, b) in mesh.cells()[c].iter().zip(bary) {
                    functions[(*k, v)] = b;
                }
            }
            None => uncovered.push(v),
        }
    }
    if !uncovered.is_empty() {
        return Err(Error::Coverage { cells: uncovered });
    }
    let (functions, kept) = BasisSet::masked(functions, space);
    Ok(BasisSet {
        functions,
        provenance: Provenance::Triangulation {
            ndim: mesh.ndim(),
            vertices: mesh.vertices().len(),
            cells: mesh.cells().len(),
            kept,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_triangle_vertices_give_identity() {
        // 3x3 grid, unit spacing: centres at 0.5, 1.5, 2.5
        let s = AmbientSpace::grid(&[3, 3]).unwrap();
        let mesh = Triangulation::new(
            vec![vec![0.5, 0.5], vec![2.5, 0.5], vec![0.5, 2.5]],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        let mask: Vec<bool> = (0..9).map(|v| [0usize, 2, 6].contains(&v)).collect();
        let ms = crate::basis::mask_space(&s, &mask).unwrap();
        let b = tri_pl_basis(&ms, &mesh).unwrap();
        assert_eq!(b.len(), 3);
        for (row, v) in [(0usize, 0usize), (1, 6), (2, 2)] {
            for r in 0..3 {
                let want = if r == row { 1.0 } else { 0.0 };
                assert!((b.functions()[(r, v)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn centroid_gets_one_third() {
        let mesh = Triangulation::new(
            vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        let (_, b) = mesh.locate(&[1.0, 1.0]).unwrap();
        for x in b {
            assert!((x - 1.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn square_mesh_matches_barycentric_solves() {
        let s = AmbientSpace::grid(&[4, 4]).unwrap();
        let mesh = Triangulation::rectangle(1, 1, 0.0, 4.0, 0.0, 4.0).unwrap();
        let b = tri_pl_basis(&s, &mesh).unwrap();
        assert_eq!(b.len(), 4);
        for v in 0..16 {
            let p = s.cell_center(v);
            // brute-force: solve the 3x3 affine system for each triangle
            let mut found = false;
            for cell in mesh.cells() {
                let vs: Vec<&Vec<f64>> = cell.iter().map(|&k| &mesh.vertices()[k]).collect();
                let a = DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        vs[0][0], vs[1][0], vs[2][0], vs[0][1], vs[1][1], vs[2][1], 1.0, 1.0, 1.0,
                    ],
                );
                let lam = a.lu().solve(&DVector::from_vec(vec![p[0], p[1], 1.0])).unwrap();
                if lam.iter().all(|x| *x >= -1e-12) {
                    for (k, &vk) in cell.iter().enumerate() {
                        assert!((b.functions()[(vk, v)] - lam[k]).abs() < 1e-12);
                    }
                    found = true;
                    break;
                }
            }
            assert!(found);
            assert!((b.functions().column(v).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn continuity_across_shared_edge() {
        let mesh = Triangulation::rectangle(1, 1, 0.0, 1.0, 0.0, 1.0).unwrap();
        // points on the diagonal shared by both triangles
        for t in [0.1, 0.37, 0.5, 0.9] {
            let p = [t, t];
            let b0 = mesh.barycentric(0, &p);
            let b1 = mesh.barycentric(1, &p);
            let mut h0 = [0.0; 4];
            let mut h1 = [0.0; 4];
            for (k, &vk) in mesh.cells()[0].iter().enumerate() {
                h0[vk] = b0[k];
            }
            for (k, &vk) in mesh.cells()[1].iter().enumerate() {
                h1[vk] = b1[k];
            }
            for k in 0..4 {
                assert!((h0[k] - h1[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn coverage_error_lists_cells() {
        let s = AmbientSpace::grid(&[4, 4]).unwrap();
        let mesh = Triangulation::rectangle(1, 1, 0.0, 2.0, 0.0, 2.0).unwrap();
        match tri_pl_basis(&s, &mesh) {
            Err(Error::Coverage { cells }) => {
                assert_eq!(cells.len(), 12);
                assert!(!cells.contains(&0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_meshes() {
        // clockwise triangle
        assert!(Triangulation::new(
            vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![0, 1, 2]]
        )
        .is_err());
        // hanging node: vertex 4 sits on the edge 1-2 of the left triangle
        let verts = vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![2.0, 2.0],
            vec![4.0, 0.0],
            vec![2.0, 1.0],
            vec![4.0, 2.0],
        ];
        let cells = vec![vec![0, 1, 2], vec![1, 3, 4], vec![4, 3, 5], vec![4, 5, 2]];
        assert!(matches!(Triangulation::new(verts, cells), Err(Error::Mesh(_))));
    }

    #[test]
    fn tetra_mesh_partition_of_unity() {
        // unit cube split into 6 tetrahedra around the main diagonal
        let verts: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                vec![
                    (i & 1) as f64 * 3.0,
                    ((i >> 1) & 1) as f64 * 3.0,
                    ((i >> 2) & 1) as f64 * 3.0,
                ]
            })
            .collect();
        let paths = [[1, 3], [1, 5], [2, 3], [2, 6], [4, 5], [4, 6]];
        let mut cells = Vec::new();
        for [a, b] in paths {
            let mut c = vec![0, a, b, 7];
            // orient positively
            let m = DMatrix::from_fn(3, 3, |r, k| verts[c[k + 1]][r] - verts[c[0]][r]);
            if m.determinant() < 0.0 {
                c.swap(1, 2);
            }
            cells.push(c);
        }
        let mesh = Triangulation::new(verts, cells).unwrap();
        let s = AmbientSpace::grid(&[3, 3, 3]).unwrap();
        let b = tri_pl_basis(&s, &mesh).unwrap();
        assert_eq!(b.len(), 8);
        for v in 0..27 {
            assert!((b.functions().column(v).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip_and_errors() {
        let mesh = Triangulation::rectangle(2, 1, 0.0, 1.0, 0.0, 0.5).unwrap();
        let back = Triangulation::parse(&mesh.to_text()).unwrap();
        assert_eq!(back, mesh);
        assert!(matches!(Triangulation::parse("TRI 2 1"), Err(Error::Format { .. })));
        let truncated = "TRI 2 3 1\n0 0\n1 0\n";
        assert!(matches!(Triangulation::parse(truncated), Err(Error::Format { .. })));
        match Triangulation::parse("TRI 2 3 1\n0 0\n1 x\n0 1\n0 1 2\n") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("unexpected {other:?}"),
        }
    }
}
