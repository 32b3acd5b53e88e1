//! Uniform rectangular grids in one or two dimensions.
//!
//! Scalar fields live on cells. Gradients live on interior faces: the face
//! between cell `c` and its forward neighbour `c + e_k` carries
//! `(f[c + e_k] - f[c]) / dx_k`. Boundary faces are never stored; they carry
//! zero flux, which realizes the homogeneous Neumann condition.
//!
//! Every interior face is *owned* by the cell on its lower side. The vector
//! gradient of a cell is the tuple of the faces it owns, with a zero component
//! along any axis where the cell has no forward neighbour. Cell energies built
//! from that tuple have exact discrete first variations expressed through
//! [`Grid::face_divergence`].

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid dimension must be 1 or 2, got {0}")]
    BadDimension(usize),
    #[error("axis {axis} has {cells} cells; at least 2 are required")]
    TooFewCells { axis: usize, cells: usize },
    #[error("axis {axis} has non-positive or non-finite spacing {spacing}")]
    BadSpacing { axis: usize, spacing: f64 },
    #[error("operands live on different grids")]
    Mismatch,
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

/// A uniform box `[0, n_0 dx_0] x [0, n_1 dx_1]` split into cells.
#[derive(Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    shape: [usize; 2],
    spacing: [f64; 2],
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Grid({:?} cells, spacing {:?})",
            self.shape(),
            self.spacing()
        )
    }
}

impl Grid {
    pub fn new(shape: &[usize], spacing: &[f64]) -> Result<Self, GridError> {
        let dim = shape.len();
        if !(1..=2).contains(&dim) {
            return Err(GridError::BadDimension(dim));
        }
        if spacing.len() != dim {
            return Err(GridError::Length {
                expected: dim,
                got: spacing.len(),
            });
        }
        let mut s = [1usize; 2];
        let mut h = [1.0; 2];
        for axis in 0..dim {
            if shape[axis] < 2 {
                return Err(GridError::TooFewCells {
                    axis,
                    cells: shape[axis],
                });
            }
            if !(spacing[axis].is_finite() && spacing[axis] > 0.0) {
                return Err(GridError::BadSpacing {
                    axis,
                    spacing: spacing[axis],
                });
            }
            s[axis] = shape[axis];
            h[axis] = spacing[axis];
        }
        Ok(Self {
            dim,
            shape: s,
            spacing: h,
        })
    }

    /// `n` cells per axis covering the unit interval / unit square.
    pub fn unit(dim: usize, n: usize) -> Result<Self, GridError> {
        let shape = vec![n; dim];
        let spacing = vec![1.0 / n as f64; dim];
        Self::new(&shape, &spacing)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.dim]
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_measure(&self) -> f64 {
        self.spacing().iter().product()
    }

    /// Lebesgue measure of the whole box.
    pub fn domain_measure(&self) -> f64 {
        self.cell_measure() * self.len() as f64
    }

    /// Row-major stride of `axis` (the last axis is contiguous).
    fn stride(&self, axis: usize) -> usize {
        if self.dim == 2 && axis == 0 {
            self.shape[1]
        } else {
            1
        }
    }

    /// Multi-index of a flat cell index.
    pub fn coords(&self, cell: usize) -> [usize; 2] {
        if self.dim == 1 {
            [cell, 0]
        } else {
            [cell / self.shape[1], cell % self.shape[1]]
        }
    }

    /// Cell center in physical coordinates.
    pub fn center(&self, cell: usize) -> [f64; 2] {
        let c = self.coords(cell);
        [
            (c[0] as f64 + 0.5) * self.spacing[0],
            (c[1] as f64 + 0.5) * self.spacing[1],
        ]
    }

    fn faces_on_axis(&self, axis: usize) -> usize {
        let mut n = self.len();
        n /= self.shape[axis];
        n * (self.shape[axis] - 1)
    }

    fn face_offset(&self, axis: usize) -> usize {
        (0..axis).map(|a| self.faces_on_axis(a)).sum()
    }

    /// Number of interior faces over all axes.
    pub fn face_count(&self) -> usize {
        (0..self.dim).map(|a| self.faces_on_axis(a)).sum()
    }

    /// Index of the face owned by `cell` along `axis`, if the cell has a
    /// forward neighbour there.
    pub fn owned_face(&self, axis: usize, cell: usize) -> Option<usize> {
        let c = self.coords(cell);
        if c[axis] + 1 >= self.shape[axis] {
            return None;
        }
        let local = if self.dim == 1 {
            c[0]
        } else if axis == 0 {
            c[0] * self.shape[1] + c[1]
        } else {
            c[0] * (self.shape[1] - 1) + c[1]
        };
        Some(self.face_offset(axis) + local)
    }

    /// Calls `visit(axis, face, lower_cell, upper_cell)` for every interior face.
    pub fn for_each_face(&self, mut visit: impl FnMut(usize, usize, usize, usize)) {
        let mut face = 0;
        for axis in 0..self.dim {
            let stride = self.stride(axis);
            for cell in 0..self.len() {
                let c = self.coords(cell);
                if c[axis] + 1 < self.shape[axis] {
                    visit(axis, face, cell, cell + stride);
                    face += 1;
                }
            }
        }
    }

    pub(crate) fn face_gradient_raw(&self, f: &[f64], out: &mut [f64]) {
        let h = self.spacing;
        self.for_each_face(|axis, face, lo, hi| {
            out[face] = (f[hi] - f[lo]) / h[axis];
        });
    }

    pub(crate) fn face_divergence_raw(&self, flux: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let h = self.spacing;
        self.for_each_face(|axis, face, lo, hi| {
            let q = flux[face] / h[axis];
            out[lo] += q;
            out[hi] -= q;
        });
    }

    /// Squared magnitude and components of the gradient owned by each cell,
    /// written as `[g_0, g_1]` per cell (`g_1 = 0` in one dimension).
    pub(crate) fn cell_vectors_raw(&self, faces: &[f64], out: &mut [[f64; 2]]) {
        out.iter_mut().for_each(|x| *x = [0.0; 2]);
        self.for_each_face(|axis, face, lo, _| {
            out[lo][axis] = faces[face];
        });
    }

    /// Scatters per-cell vector fluxes back onto the faces each cell owns.
    pub(crate) fn cell_flux_to_faces_raw(&self, flux: &[[f64; 2]], out: &mut [f64]) {
        self.for_each_face(|axis, face, lo, _| {
            out[face] = flux[lo][axis];
        });
    }

    fn check(&self, other: &Grid) -> Result<(), GridError> {
        if self == other {
            Ok(())
        } else {
            Err(GridError::Mismatch)
        }
    }

    /// Forward difference across every interior face.
    pub fn face_gradient(&self, f: &Field) -> Result<FaceField, GridError> {
        self.check(&f.grid)?;
        let mut values = vec![0.0; self.face_count()];
        self.face_gradient_raw(&f.values, &mut values);
        Ok(FaceField { grid: *self, values })
    }

    /// Negative adjoint of [`Grid::face_gradient`] with zero boundary flux.
    pub fn face_divergence(&self, flux: &FaceField) -> Result<Field, GridError> {
        self.check(&flux.grid)?;
        let mut values = vec![0.0; self.len()];
        self.face_divergence_raw(&flux.values, &mut values);
        Ok(Field { grid: *self, values })
    }

    pub fn neumann_laplacian(&self, f: &Field) -> Result<Field, GridError> {
        let faces = self.face_gradient(f)?;
        self.face_divergence(&faces)
    }

    pub fn inner(&self, f: &Field, g: &Field) -> Result<f64, GridError> {
        self.check(&f.grid)?;
        self.check(&g.grid)?;
        Ok(self.inner_raw(&f.values, &g.values))
    }

    pub(crate) fn inner_raw(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * self.cell_measure()
    }

    /// Face quadrature: each face carries the cell measure.
    pub fn face_inner(&self, p: &FaceField, q: &FaceField) -> Result<f64, GridError> {
        self.check(&p.grid)?;
        self.check(&q.grid)?;
        Ok(p.values.iter().zip(&q.values).map(|(a, b)| a * b).sum::<f64>() * self.cell_measure())
    }
}

/// One real value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::Length {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Evaluates `f` at every cell center.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.len()).map(|c| f(grid.center(c))).collect();
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.grid.inner_raw(&self.values, &self.values).sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Field) -> Result<Field, GridError> {
        self.grid.check(&other.grid)?;
        Ok(Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x + a * y)
                .collect(),
        })
    }
}

/// One real value per interior face, laid out axis by axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    grid: Grid,
    values: Vec<f64>,
}

impl FaceField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.face_count() {
            return Err(GridError::Length {
                expected: grid.face_count(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.face_count()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// The pair `v = [w, eta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    pub w: Field,
    pub eta: Field,
}

impl FieldPair {
    pub fn new(w: Field, eta: Field) -> Result<Self, GridError> {
        w.grid.check(&eta.grid)?;
        Ok(Self { w, eta })
    }

    pub fn constant(grid: Grid, w: f64, eta: f64) -> Self {
        Self {
            w: Field::constant(grid, w),
            eta: Field::constant(grid, eta),
        }
    }

    pub fn grid(&self) -> &Grid {
        self.w.grid()
    }

    /// `|v - other|_{L^2}^2` summed over both components.
    pub fn dist_sq(&self, other: &FieldPair) -> f64 {
        let g = self.grid();
        let dw: Vec<f64> = self.w.values.iter().zip(&other.w.values).map(|(a, b)| a - b).collect();
        let de: Vec<f64> = self
            .eta
            .values
            .iter()
            .zip(&other.eta.values)
            .map(|(a, b)| a - b)
            .collect();
        g.inner_raw(&dw, &dw) + g.inner_raw(&de, &de)
    }

    pub fn in_unit_box(&self) -> bool {
        self.w
            .values
            .iter()
            .chain(&self.eta.values)
            .all(|&x| (0.0..=1.0).contains(&x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: Grid, rng: &mut ChaCha8Rng) -> Field {
        Field::from_raw(grid, (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn random_faces(grid: Grid, rng: &mut ChaCha8Rng) -> FaceField {
        FaceField {
            grid,
            values: (0..grid.face_count()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert_eq!(Grid::new(&[1], &[1.0]), Err(GridError::TooFewCells { axis: 0, cells: 1 }));
        assert!(matches!(Grid::new(&[4], &[0.0]), Err(GridError::BadSpacing { .. })));
        assert!(matches!(Grid::new(&[2, 2, 2], &[1.0; 3]), Err(GridError::BadDimension(3))));
        let g = Grid::new(&[3, 5], &[0.1, 0.2]).unwrap();
        assert_eq!(g.len(), 15);
        assert_eq!(g.face_count(), 2 * 5 + 3 * 4);
    }

    #[test]
    fn forward_differences() {
        let g = Grid::new(&[2], &[1.0]).unwrap();
        let f = Field::new(g, vec![0.0, 1.0]).unwrap();
        assert_eq!(g.face_gradient(&f).unwrap().values(), &[1.0]);

        let g = Grid::new(&[3], &[0.5]).unwrap();
        let f = Field::new(g, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(g.face_gradient(&f).unwrap().values(), &[2.0, -2.0]);

        let g = Grid::new(&[4, 3], &[0.3, 0.7]).unwrap();
        let faces = g.face_gradient(&Field::constant(g, 2.5)).unwrap();
        assert!(faces.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn divergence_examples() {
        let g = Grid::new(&[2], &[1.0]).unwrap();
        let div = g
            .face_divergence(&FaceField::new(g, vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(div.values(), &[1.0, -1.0]);
        let g2 = Grid::new(&[3, 4], &[1.0, 0.5]).unwrap();
        let zero = g2.face_divergence(&FaceField::zeros(g2)).unwrap();
        assert!(zero.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn laplacian_examples() {
        let g = Grid::new(&[3], &[1.0]).unwrap();
        let f = Field::new(g, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(g.neumann_laplacian(&f).unwrap().values(), &[1.0, -2.0, 1.0]);
        let g2 = Grid::new(&[5, 4], &[0.2, 0.25]).unwrap();
        let lap = g2.neumann_laplacian(&Field::constant(g2, -3.0)).unwrap();
        assert!(lap.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inner_product_examples() {
        let g = Grid::new(&[2, 2], &[0.5, 0.5]).unwrap();
        let one = Field::constant(g, 1.0);
        assert_eq!(g.inner(&one, &one).unwrap(), 1.0);
        let other = Grid::new(&[4], &[0.25]).unwrap();
        assert_eq!(g.inner(&one, &Field::constant(other, 1.0)), Err(GridError::Mismatch));
    }

    #[test]
    fn adjoint_and_summation_by_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for grid in [
            Grid::new(&[9], &[0.13]).unwrap(),
            Grid::new(&[6, 5], &[0.2, 0.07]).unwrap(),
        ] {
            for _ in 0..50 {
                let f = random_field(grid, &mut rng);
                let g = random_field(grid, &mut rng);
                let q = random_faces(grid, &mut rng);
                let lhs = grid.inner(&grid.face_divergence(&q).unwrap(), &g).unwrap();
                let rhs = -grid.face_inner(&q, &grid.face_gradient(&g).unwrap()).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));

                let lap = grid.neumann_laplacian(&f).unwrap();
                let a = grid.inner(&lap, &g).unwrap();
                let b = -grid
                    .face_inner(&grid.face_gradient(&f).unwrap(), &grid.face_gradient(&g).unwrap())
                    .unwrap();
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                // zero-flux: the mean is preserved
                let mass: f64 = lap.values().iter().sum::<f64>() * grid.cell_measure();
                assert!(mass.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn laplacian_is_negative_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = Grid::new(&[7, 6], &[0.1, 0.3]).unwrap();
        for _ in 0..100 {
            let f = random_field(grid, &mut rng);
            let q = grid.inner(&grid.neumann_laplacian(&f).unwrap(), &f).unwrap();
            assert!(q <= 1e-14);
        }
    }

    #[test]
    fn inner_is_symmetric_and_cauchy_schwarz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Grid::new(&[5, 8], &[0.4, 0.1]).unwrap();
        for _ in 0..100 {
            let f = random_field(grid, &mut rng);
            let g = random_field(grid, &mut rng);
            let fg = grid.inner(&f, &g).unwrap();
            assert_eq!(fg, grid.inner(&g, &f).unwrap());
            assert!(fg.abs() <= f.l2_norm() * g.l2_norm() * (1.0 + 1e-14));
        }
    }

    #[test]
    fn owned_faces_match_iteration_order() {
        let grid = Grid::new(&[4, 3], &[1.0, 1.0]).unwrap();
        grid.for_each_face(|axis, face, lo, _| {
            assert_eq!(grid.owned_face(axis, lo), Some(face));
        });
        assert_eq!(grid.owned_face(0, 11), None);
        assert_eq!(grid.owned_face(1, 2), None);
    }
}
