//! Dense kernels: matrix exponential and Hermitian eigendecomposition.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::operator::OperatorMatrix;

/// Scaled norm bound for the Taylor stage; the series is summed until the
/// next term falls below `1e-17` of the running sum, which keeps the
/// truncation error below `1e-13` for any scaled argument.
const SCALED_NORM: f64 = 0.5;
const MAX_TERMS: usize = 60;

fn norm1(m: &DMatrix<Complex64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(A)` by scaling and squaring around a truncated Taylor series.
pub fn expm(a: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    if !a.is_square() {
        return Err(Error::InvalidIndex { index: a.ncols(), dimension: a.nrows() });
    }
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite);
    }
    let d = a.nrows();
    let norm = norm1(a);
    let squarings = if norm > SCALED_NORM {
        (norm / SCALED_NORM).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a * Complex64::new(0.5f64.powi(squarings), 0.0);

    let mut sum = DMatrix::<Complex64>::identity(d, d);
    let mut term = DMatrix::<Complex64>::identity(d, d);
    for k in 1..MAX_TERMS {
        term = &term * &scaled * Complex64::new(1.0 / k as f64, 0.0);
        sum += &term;
        if norm1(&term) <= 1e-17 * norm1(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    Ok(sum)
}

pub fn expm_operator(a: &OperatorMatrix) -> Result<OperatorMatrix> {
    Ok(OperatorMatrix::from_parts(a.space().clone(), expm(a.matrix())?))
}

/// Eigenpairs of a Hermitian matrix, eigenvalues ascending; column `k` of
/// `vectors` belongs to `values[k]`.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<Complex64>,
}

pub fn eigh(m: &DMatrix<Complex64>) -> HermitianEigen {
    let n = m.nrows();
    if n == 0 {
        return HermitianEigen { values: vec![], vectors: DMatrix::zeros(0, 0) };
    }
    // Symmetrize to kill rounding-level anti-Hermitian noise.
    let sym = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    HermitianEigen { values, vectors }
}

pub fn eigvalsh(m: &DMatrix<Complex64>) -> Vec<f64> {
    eigh(m).values
}

impl HermitianEigen {
    /// `V f(Λ) V†` applied to a vector, with `f` acting on eigenvalues.
    pub fn apply_function(&self, psi: &DVector<Complex64>, f: impl Fn(f64) -> Complex64) -> DVector<Complex64> {
        let coeffs = self.vectors.adjoint() * psi;
        let scaled = DVector::from_iterator(
            coeffs.len(),
            coeffs.iter().zip(&self.values).map(|(c, &l)| c * f(l)),
        );
        &self.vectors * scaled
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let z = DMatrix::<Complex64>::zeros(4, 4);
        let e = expm(&z).unwrap();
        assert_eq!(e, DMatrix::identity(4, 4));
    }

    #[test]
    fn rejects_non_finite() {
        let mut z = DMatrix::<Complex64>::zeros(2, 2);
        z[(0, 1)] = c(f64::NAN, 0.0);
        assert!(matches!(expm(&z), Err(Error::NonFinite)));
    }

    #[test]
    fn rotation_generator_matches_trig() {
        // exp(θ [[0,-1],[1,0]]) = [[cos, -sin],[sin, cos]]
        for theta in [0.1, 0.7, 3.0, 25.0] {
            let g = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(-theta, 0.0), c(theta, 0.0), c(0.0, 0.0)]);
            let e = expm(&g).unwrap();
            assert!((e[(0, 0)] - c(theta.cos(), 0.0)).norm() < 1e-13 * (1.0 + theta));
            assert!((e[(1, 0)] - c(theta.sin(), 0.0)).norm() < 1e-13 * (1.0 + theta));
            assert!((e[(0, 1)] + c(theta.sin(), 0.0)).norm() < 1e-13 * (1.0 + theta));
        }
    }

    #[test]
    fn anti_hermitian_gives_unitary() {
        let n = 12;
        let h = DMatrix::from_fn(n, n, |i, j| {
            let x = ((i * 7 + j * 3) % 5) as f64 - 2.0;
            let y = ((i * 2 + j * 11) % 7) as f64 - 3.0;
            c(x + y, if i == j { 0.0 } else { (x - y) * 0.3 })
        });
        let herm = (&h + h.adjoint()) * c(0.5, 0.0);
        let g = herm * c(0.0, -1.3);
        let u = expm(&g).unwrap();
        let res = (u.adjoint() * &u - DMatrix::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(res < 1e-12, "{res}");
    }

    #[test]
    fn expm_agrees_with_spectral_route() {
        let n = 6;
        let h = DMatrix::from_fn(n, n, |i, j| c(1.0 / (1.0 + i as f64 + j as f64), 0.0));
        let eig = eigh(&h);
        let t = 2.5;
        let u = expm(&(&h * c(0.0, -t))).unwrap();
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = c(1.0, 0.0);
            let via_eig = eig.apply_function(&e, |l| c(0.0, -l * t).exp());
            let via_series = u.column(k).into_owned();
            assert!((via_eig - via_series).norm() < 1e-12);
        }
    }

    #[test]
    fn eigh_sorted() {
        let m = DMatrix::from_row_slice(3, 3, &[c(3.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(2.0, 0.0)]);
        assert_eq!(eigvalsh(&m), vec![-1.0, 2.0, 3.0]);
    }
}
