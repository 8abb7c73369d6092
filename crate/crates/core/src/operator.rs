//! Dense complex operators bound to a [`SpaceDescriptor`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hilbert::{BasisLabel, Space};

pub type StateVector = DVector<Complex64>;

#[derive(Clone, Debug)]
pub struct OperatorMatrix {
    space: Space,
    entries: DMatrix<Complex64>,
}

impl OperatorMatrix {
    /// Panics if the matrix shape does not match the space.
    pub fn from_parts(space: Space, entries: DMatrix<Complex64>) -> Self {
        let d = space.dimension();
        assert_eq!(entries.shape(), (d, d), "operator shape does not match space dimension");
        Self { space, entries }
    }

    pub fn zeros(space: &Space) -> Self {
        let d = space.dimension();
        Self::from_parts(space.clone(), DMatrix::zeros(d, d))
    }

    pub fn identity(space: &Space) -> Self {
        let d = space.dimension();
        Self::from_parts(space.clone(), DMatrix::identity(d, d))
    }

    /// Diagonal operator whose entry on each basis state is `f(label)`.
    pub fn diagonal(space: &Space, f: impl Fn(&BasisLabel) -> f64) -> Self {
        let d = space.dimension();
        let mut m = DMatrix::zeros(d, d);
        for (i, l) in space.basis().iter().enumerate() {
            m[(i, i)] = Complex64::new(f(l), 0.0);
        }
        Self::from_parts(space.clone(), m)
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn dimension(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.entries
    }

    pub fn same_space(&self, other: &OperatorMatrix) -> bool {
        Arc::ptr_eq(&self.space, &other.space) || *self.space == *other.space
    }

    fn check(&self, other: &OperatorMatrix) -> Result<()> {
        if self.same_space(other) {
            Ok(())
        } else {
            Err(Error::SpaceMismatch)
        }
    }

    fn with(&self, entries: DMatrix<Complex64>) -> Self {
        Self { space: self.space.clone(), entries }
    }

    pub fn add(&self, other: &OperatorMatrix) -> Result<Self> {
        self.check(other)?;
        Ok(self.with(&self.entries + &other.entries))
    }

    pub fn sub(&self, other: &OperatorMatrix) -> Result<Self> {
        self.check(other)?;
        Ok(self.with(&self.entries - &other.entries))
    }

    pub fn mul(&self, other: &OperatorMatrix) -> Result<Self> {
        self.check(other)?;
        Ok(self.with(&self.entries * &other.entries))
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.with(self.entries.map(|z| z * factor))
    }

    pub fn scale_complex(&self, factor: Complex64) -> Self {
        self.with(self.entries.map(|z| z * factor))
    }

    /// `self + factor * other`
    pub fn axpy(&self, factor: f64, other: &OperatorMatrix) -> Result<Self> {
        self.check(other)?;
        Ok(self.with(&self.entries + other.entries.map(|z| z * factor)))
    }

    pub fn adjoint(&self) -> Self {
        self.with(self.entries.adjoint())
    }

    pub fn commutator(&self, other: &OperatorMatrix) -> Result<Self> {
        self.check(other)?;
        Ok(self.with(&self.entries * &other.entries - &other.entries * &self.entries))
    }

    pub fn power(&self, k: u32) -> Self {
        let mut out = DMatrix::identity(self.dimension(), self.dimension());
        for _ in 0..k {
            out = &out * &self.entries;
        }
        self.with(out)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn hermiticity_residual(&self) -> f64 {
        (&self.entries - self.entries.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_residual() <= tol
    }

    pub fn unitarity_residual(&self) -> f64 {
        let d = self.dimension();
        let prod = self.entries.adjoint() * &self.entries;
        (prod - DMatrix::<Complex64>::identity(d, d)).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_residual() <= tol
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn diagonal_part(&self) -> Self {
        let d = self.dimension();
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            m[(i, i)] = self.entries[(i, i)];
        }
        self.with(m)
    }

    pub fn offdiagonal_part(&self) -> Self {
        let mut m = self.entries.clone();
        for i in 0..self.dimension() {
            m[(i, i)] = Complex64::new(0.0, 0.0);
        }
        self.with(m)
    }

    /// Real parts of the diagonal.
    pub fn diagonal_values(&self) -> Vec<f64> {
        (0..self.dimension()).map(|i| self.entries[(i, i)].re).collect()
    }

    /// Keep only the entries for which `keep(row, col)` holds.
    pub fn mask(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = self.entries.clone();
        for j in 0..self.dimension() {
            for i in 0..self.dimension() {
                if !keep(i, j) {
                    m[(i, j)] = Complex64::new(0.0, 0.0);
                }
            }
        }
        self.with(m)
    }

    /// Principal submatrix on `indices`.
    pub fn restrict(&self, indices: &[usize]) -> DMatrix<Complex64> {
        DMatrix::from_fn(indices.len(), indices.len(), |i, j| self.entries[(indices[i], indices[j])])
    }

    pub fn apply(&self, state: &StateVector) -> StateVector {
        &self.entries * state
    }

    pub fn expectation(&self, state: &StateVector) -> Complex64 {
        state.dotc(&(&self.entries * state))
    }

    /// Basis vector `|index⟩`.
    pub fn basis_state(space: &Space, index: usize) -> Result<StateVector> {
        let d = space.dimension();
        if index >= d {
            return Err(Error::InvalidIndex { index, dimension: d });
        }
        let mut v = StateVector::zeros(d);
        v[index] = Complex64::new(1.0, 0.0);
        Ok(v)
    }
}
