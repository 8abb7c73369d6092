//! Polynomially deformed su(2)/su(3) generator sets.
//!
//! A [`DeformedAlgebra`] keeps the su(2) ladder relation `[X3, X±] = ±X±`
//! while `[X+, X-]` is an arbitrary diagonal operator, the structure
//! polynomial `P(X3)`. The structure is measured from the matrices, never
//! assumed.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{enumerate_basis, EnsembleSpec};
use crate::operator::OperatorMatrix;

/// Tolerance used when validating generator sets on construction.
pub const LADDER_TOL: f64 = 1e-10;
/// Tolerance at which relation reports are judged.
pub const RELATION_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct DeformedAlgebra {
    pub name: String,
    pub x3: OperatorMatrix,
    pub xplus: OperatorMatrix,
    pub xminus: OperatorMatrix,
    /// Measured `[X+, X-]`.
    pub structure: OperatorMatrix,
}

pub fn build_deformed(name: &str, x3: OperatorMatrix, xplus: OperatorMatrix) -> Result<DeformedAlgebra> {
    if !x3.same_space(&xplus) {
        return Err(Error::SpaceMismatch);
    }
    let herm = x3.hermiticity_residual();
    if herm > LADDER_TOL {
        return Err(Error::NotHermitian { residual: herm });
    }
    let ladder = x3.commutator(&xplus)?.sub(&xplus)?.max_abs();
    if ladder > LADDER_TOL {
        return Err(Error::LadderViolation { residual: ladder });
    }
    let xminus = xplus.adjoint();
    let structure = xplus.commutator(&xminus)?;
    Ok(DeformedAlgebra { name: name.to_string(), x3, xplus, xminus, structure })
}

impl DeformedAlgebra {
    /// `X+ − X-`, the generator direction of a small rotation.
    pub fn antihermitian_direction(&self) -> OperatorMatrix {
        self.xplus.sub(&self.xminus).expect("same space")
    }

    /// `X+ + X-`
    pub fn hermitian_coupling(&self) -> OperatorMatrix {
        self.xplus.add(&self.xminus).expect("same space")
    }

    /// Residuals of the defining relations, in the order
    /// `[X3,X+]−X+`, `[X3,X-]+X-`, `X- − X+†`, `[structure, X3]`.
    pub fn invariant_residuals(&self) -> [f64; 4] {
        let up = self.x3.commutator(&self.xplus).unwrap().sub(&self.xplus).unwrap().max_abs();
        let down = self.x3.commutator(&self.xminus).unwrap().add(&self.xminus).unwrap().max_abs();
        let adj = self.xminus.sub(&self.xplus.adjoint()).unwrap().max_abs();
        let comm = self.structure.commutator(&self.x3).unwrap().max_abs();
        [up, down, adj, comm]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSample {
    pub index: usize,
    pub x3: f64,
    pub conserved: Vec<f64>,
    pub p: f64,
}

/// Tabulate `P` against the joint eigenvalues of `X3` and the conserved
/// operators. All of them must be diagonal in the product basis.
pub fn structure_polynomial_samples(
    alg: &DeformedAlgebra,
    conserved: &[OperatorMatrix],
) -> Result<Vec<StructureSample>> {
    let mut worst: f64 = 0.0;
    for op in std::iter::once(&alg.structure).chain(std::iter::once(&alg.x3)).chain(conserved) {
        if !op.same_space(&alg.x3) {
            return Err(Error::SpaceMismatch);
        }
        worst = worst.max(op.offdiagonal_part().max_abs());
    }
    if worst > LADDER_TOL {
        return Err(Error::NotDiagonal { residual: worst });
    }
    let x3 = alg.x3.diagonal_values();
    let p = alg.structure.diagonal_values();
    let cons: Vec<Vec<f64>> = conserved.iter().map(|c| c.diagonal_values()).collect();
    Ok((0..x3.len())
        .map(|i| StructureSample {
            index: i,
            x3: x3[i],
            conserved: cons.iter().map(|c| c[i]).collect(),
            p: p[i],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationResidual {
    pub name: String,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    pub tolerance: f64,
    /// Residuals were evaluated only between states with every mode below
    /// its truncation level.
    pub interior_only: bool,
    pub entries: Vec<RelationResidual>,
}

impl RelationReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.residual <= self.tolerance)
    }

    pub fn max_residual(&self) -> f64 {
        self.entries.iter().map(|e| e.residual).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.residual)
    }
}

/// Frobenius norm of `op` on the sub-block of states strictly inside the
/// Fock truncation.
pub fn interior_norm(op: &OperatorMatrix) -> f64 {
    let space = op.space();
    let inner: Vec<usize> = (0..space.dimension()).filter(|&i| !space.at_truncation_edge(i)).collect();
    op.restrict(&inner).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Cross relations of the deformed Ξ algebra:
/// `[X+^{12}, X+^{23}] = −Y+^{13}`, `[X-^{12}, X-^{23}] = Y-^{13}`,
/// `[X+^{12}, X-^{23}] = 0`.
pub fn verify_su3_cross_relations(
    alg12: &DeformedAlgebra,
    alg23: &DeformedAlgebra,
    yplus13: &OperatorMatrix,
) -> Result<RelationReport> {
    let yminus13 = yplus13.adjoint();
    let r1 = alg12.xplus.commutator(&alg23.xplus)?.add(yplus13)?;
    let r2 = alg12.xminus.commutator(&alg23.xminus)?.sub(&yminus13)?;
    let r3 = alg12.xplus.commutator(&alg23.xminus)?;
    Ok(RelationReport {
        tolerance: RELATION_TOL,
        interior_only: true,
        entries: vec![
            RelationResidual { name: "[X+12,X+23]+Y+13".into(), residual: interior_norm(&r1) },
            RelationResidual { name: "[X-12,X-23]-Y-13".into(), residual: interior_norm(&r2) },
            RelationResidual { name: "[X+12,X-23]".into(), residual: interior_norm(&r3) },
        ],
    })
}

/// Λ analogue: with `X+^{13} = a S+^{13}`, `X+^{23} = a S+^{23}`,
/// `[X+^{13}, X-^{23}] = S+^{12} Y^{12}` where `Y^{12} = S^{33} − a†a`,
/// together with its adjoint and the vanishing same-direction commutators.
pub fn verify_lambda_cross_relations(
    alg13: &DeformedAlgebra,
    alg23: &DeformedAlgebra,
    splus12: &OperatorMatrix,
    y12: &OperatorMatrix,
) -> Result<RelationReport> {
    let target = splus12.mul(y12)?;
    let r1 = alg13.xplus.commutator(&alg23.xminus)?.sub(&target)?;
    let r2 = alg23.xplus.commutator(&alg13.xminus)?.sub(&target.adjoint())?;
    let r3 = alg13.xplus.commutator(&alg23.xplus)?;
    let r4 = alg13.xminus.commutator(&alg23.xminus)?;
    Ok(RelationReport {
        tolerance: RELATION_TOL,
        interior_only: true,
        entries: vec![
            RelationResidual { name: "[X+13,X-23]-S+12(S33-a†a)".into(), residual: interior_norm(&r1) },
            RelationResidual { name: "[X+23,X-13]-(S33-a†a)S-12".into(), residual: interior_norm(&r2) },
            RelationResidual { name: "[X+13,X+23]".into(), residual: interior_norm(&r3) },
            RelationResidual { name: "[X-13,X-23]".into(), residual: interior_norm(&r4) },
        ],
    })
}

/// Generators `(Y0, Y+, Y-)` of a Cartan–Weyl deformation on a single
/// ladder with `[Y-, Y+] = Φ(Y0 + 1) − Φ(Y0)`.
#[derive(Clone, Debug)]
pub struct CartanWeyl {
    pub y0: OperatorMatrix,
    pub yplus: OperatorMatrix,
    pub yminus: OperatorMatrix,
    /// Whether `Φ(y_top + 1) = Φ(y_lowest)`, i.e. the identity also holds
    /// on the top state of the finite ladder.
    pub closes: bool,
}

/// Ladder of `dim` states with `Y0 = lowest + k`. The lowest state is
/// annihilated by `Y-` and `|f_k|² = Φ(y_k) − Φ(y_0)`; negative values make
/// the structure function non-unitary on this ladder and are rejected.
pub fn cartan_weyl_ladder(phi: impl Fn(f64) -> f64, lowest: f64, dim: usize) -> Result<CartanWeyl> {
    if dim < 2 {
        return Err(Error::InvalidEnsemble("a ladder needs at least two states".into()));
    }
    let space = enumerate_basis(&[], EnsembleSpec::new(2, dim - 1)?)?;
    // ladder position = atoms in level 2
    let pos: Vec<usize> = space.basis().iter().map(|l| l.occupations[1]).collect();
    let mut index_of_pos = vec![0; dim];
    for (i, &k) in pos.iter().enumerate() {
        index_of_pos[k] = i;
    }
    let phi0 = phi(lowest);
    let mut amps = vec![0.0; dim + 1];
    for (k, amp) in amps.iter_mut().enumerate().take(dim).skip(1) {
        let sq = phi(lowest + k as f64) - phi0;
        if sq < -1e-12 {
            return Err(Error::InvalidModel(format!(
                "structure function gives negative norm {sq:.3e} at ladder step {k}"
            )));
        }
        *amp = sq.max(0.0).sqrt();
    }
    let y0 = OperatorMatrix::diagonal(&space, |l| lowest + l.occupations[1] as f64);
    let mut up = DMatrix::<Complex64>::zeros(dim, dim);
    for k in 0..dim - 1 {
        up[(index_of_pos[k + 1], index_of_pos[k])] = Complex64::new(amps[k + 1], 0.0);
    }
    let yplus = OperatorMatrix::from_parts(space.clone(), up);
    let yminus = yplus.adjoint();
    let top = lowest + (dim - 1) as f64;
    let closes = (phi(top + 1.0) - phi0).abs() <= 1e-12 * (1.0 + phi0.abs());
    Ok(CartanWeyl { y0, yplus, yminus, closes })
}

pub fn verify_cartan_weyl(cw: &CartanWeyl, phi: impl Fn(f64) -> f64) -> Result<RelationReport> {
    let lhs = cw.yminus.commutator(&cw.yplus)?;
    let y = cw.y0.diagonal_values();
    let top = y.iter().cloned().fold(f64::MIN, f64::max);
    let mut rhs_m = DMatrix::<Complex64>::zeros(y.len(), y.len());
    for (i, &yi) in y.iter().enumerate() {
        rhs_m[(i, i)] = Complex64::new(phi(yi + 1.0) - phi(yi), 0.0);
    }
    let diff = lhs.matrix() - rhs_m;
    let keep: Vec<usize> = (0..y.len()).filter(|&i| cw.closes || y[i] < top).collect();
    let residual = DMatrix::from_fn(keep.len(), keep.len(), |i, j| diff[(keep[i], keep[j])])
        .iter()
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt();
    let ladder_up = cw.y0.commutator(&cw.yplus)?.sub(&cw.yplus)?.max_abs();
    Ok(RelationReport {
        tolerance: RELATION_TOL,
        interior_only: !cw.closes,
        entries: vec![
            RelationResidual { name: "[Y0,Y+]-Y+".into(), residual: ladder_up },
            RelationResidual { name: "[Y-,Y+]-(Φ(Y0+1)-Φ(Y0))".into(), residual },
        ],
    })
}
