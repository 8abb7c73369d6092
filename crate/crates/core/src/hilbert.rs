//! Tensor-product Hilbert spaces: truncated Fock modes times the symmetric
//! (collective) subspace of an ensemble of identical `N`-level atoms.
//!
//! The collective subspace is realized with Schwinger bosons: one occupation
//! number per atomic level, with occupations summing to the atom count `A`.
//! That is exactly the totally symmetric irrep of u(N), of dimension
//! `binomial(A + N - 1, N - 1)`.
//!
//! Basis order is lexicographic over `(photons[0], .., photons[M-1],
//! occupations[0], .., occupations[N-1])`, so field modes are the slowest
//! indices and the last atomic level is the fastest. For a two-level ensemble
//! this puts `m = +A/2` (everything in level 2) first inside each photon
//! sector.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::operator::OperatorMatrix;

pub const DEFAULT_DIMENSION_CAP: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct FockTruncation {
    pub n_max: usize,
}

impl FockTruncation {
    pub fn new(n_max: usize) -> Self {
        Self { n_max }
    }

    pub fn dimension(&self) -> usize {
        self.n_max + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct EnsembleSpec {
    pub levels: usize,
    pub atoms: usize,
}

impl EnsembleSpec {
    pub fn new(levels: usize, atoms: usize) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidEnsemble(format!("need at least 2 levels, got {levels}")));
        }
        if atoms < 1 {
            return Err(Error::InvalidEnsemble("need at least one atom".into()));
        }
        Ok(Self { levels, atoms })
    }

    /// `binomial(A + N - 1, N - 1)`, or `None` on overflow.
    pub fn dimension(&self) -> Option<usize> {
        binomial(self.atoms + self.levels - 1, self.levels - 1)
    }
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return None;
        }
    }
    Some(acc as usize)
}

/// Photon numbers per mode and occupation per atomic level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BasisLabel {
    pub photons: Vec<usize>,
    pub occupations: Vec<usize>,
}

impl fmt::Display for BasisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|")?;
        for (k, n) in self.photons.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, ";")?;
        for (k, n) in self.occupations.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, "⟩")
    }
}

#[derive(Clone, Debug)]
pub struct SpaceDescriptor {
    modes: Vec<FockTruncation>,
    ensemble: EnsembleSpec,
    basis: Vec<BasisLabel>,
    index: HashMap<BasisLabel, usize>,
}

impl PartialEq for SpaceDescriptor {
    fn eq(&self, other: &Self) -> bool {
        self.modes == other.modes && self.ensemble == other.ensemble
    }
}

/// Shared handle; operators keep one of these.
pub type Space = Arc<SpaceDescriptor>;

/// Enumerate the product basis with the default dimension cap.
pub fn enumerate_basis(modes: &[FockTruncation], ensemble: EnsembleSpec) -> Result<Space> {
    enumerate_basis_capped(modes, ensemble, DEFAULT_DIMENSION_CAP)
}

pub fn enumerate_basis_capped(
    modes: &[FockTruncation],
    ensemble: EnsembleSpec,
    cap: usize,
) -> Result<Space> {
    let ensemble = EnsembleSpec::new(ensemble.levels, ensemble.atoms)?;
    let too_big = Error::Sizing { dimension: usize::MAX, cap };
    let atomic_dim = ensemble.dimension().ok_or(too_big)?;
    let dimension = modes
        .iter()
        .try_fold(atomic_dim, |acc, m| acc.checked_mul(m.dimension()))
        .ok_or(Error::Sizing { dimension: usize::MAX, cap })?;
    if dimension > cap {
        return Err(Error::Sizing { dimension, cap });
    }

    let occupations = occupation_tuples(ensemble.levels, ensemble.atoms);
    debug_assert_eq!(occupations.len(), atomic_dim);

    let mut photon_tuples: Vec<Vec<usize>> = vec![Vec::new()];
    for mode in modes {
        photon_tuples = photon_tuples
            .into_iter()
            .flat_map(|prefix| {
                (0..=mode.n_max).map(move |n| {
                    let mut t = prefix.clone();
                    t.push(n);
                    t
                })
            })
            .collect();
    }

    let mut basis = Vec::with_capacity(dimension);
    for photons in &photon_tuples {
        for occ in &occupations {
            basis.push(BasisLabel { photons: photons.clone(), occupations: occ.clone() });
        }
    }
    let index = basis.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
    Ok(Arc::new(SpaceDescriptor { modes: modes.to_vec(), ensemble, basis, index }))
}

/// All `levels`-tuples of non-negative integers summing to `atoms`, in
/// lexicographic order.
fn occupation_tuples(levels: usize, atoms: usize) -> Vec<Vec<usize>> {
    if levels == 1 {
        return vec![vec![atoms]];
    }
    let mut out = Vec::new();
    for first in 0..=atoms {
        for mut rest in occupation_tuples(levels - 1, atoms - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

impl SpaceDescriptor {
    pub fn dimension(&self) -> usize {
        self.basis.len()
    }

    pub fn modes(&self) -> &[FockTruncation] {
        &self.modes
    }

    pub fn ensemble(&self) -> EnsembleSpec {
        self.ensemble
    }

    pub fn levels(&self) -> usize {
        self.ensemble.levels
    }

    pub fn atoms(&self) -> usize {
        self.ensemble.atoms
    }

    pub fn basis(&self) -> &[BasisLabel] {
        &self.basis
    }

    pub fn label(&self, index: usize) -> Result<&BasisLabel> {
        self.basis
            .get(index)
            .ok_or(Error::InvalidIndex { index, dimension: self.dimension() })
    }

    pub fn index_of(&self, label: &BasisLabel) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// True when some mode sits at its truncation level in this state.
    pub fn at_truncation_edge(&self, index: usize) -> bool {
        self.basis[index]
            .photons
            .iter()
            .zip(&self.modes)
            .any(|(&n, m)| n == m.n_max)
    }
}

fn check_mode(space: &SpaceDescriptor, mode_index: usize) -> Result<()> {
    if mode_index >= space.modes.len() {
        return Err(Error::InvalidMode { index: mode_index, modes: space.modes.len() });
    }
    Ok(())
}

fn check_level(space: &SpaceDescriptor, level: usize) -> Result<()> {
    if level < 1 || level > space.levels() {
        return Err(Error::InvalidLevel { index: level, levels: space.levels() });
    }
    Ok(())
}

/// Bosonic annihilator on one mode, identity elsewhere. `a†|n_max⟩` is the
/// only direction lost to the truncation.
pub fn annihilator(space: &Space, mode_index: usize) -> Result<OperatorMatrix> {
    check_mode(space, mode_index)?;
    let dim = space.dimension();
    let mut m = DMatrix::<Complex64>::zeros(dim, dim);
    for (col, label) in space.basis.iter().enumerate() {
        let n = label.photons[mode_index];
        if n == 0 {
            continue;
        }
        let mut target = label.clone();
        target.photons[mode_index] = n - 1;
        let row = space.index[&target];
        m[(row, col)] = Complex64::new((n as f64).sqrt(), 0.0);
    }
    Ok(OperatorMatrix::from_parts(space.clone(), m))
}

pub fn creator(space: &Space, mode_index: usize) -> Result<OperatorMatrix> {
    Ok(annihilator(space, mode_index)?.adjoint())
}

pub fn number_operator(space: &Space, mode_index: usize) -> Result<OperatorMatrix> {
    check_mode(space, mode_index)?;
    Ok(OperatorMatrix::diagonal(space, |l| l.photons[mode_index] as f64))
}

/// Schwinger bilinear `b_i† b_j` on the collective subspace (1-based levels).
/// It moves one atom from level `j` to level `i`, and these bilinears obey
/// `[E^{ij}, E^{kl}] = δ_{jk} E^{il} − δ_{il} E^{kj}` exactly.
pub fn schwinger_bilinear(space: &Space, i: usize, j: usize) -> Result<OperatorMatrix> {
    check_level(space, i)?;
    check_level(space, j)?;
    let dim = space.dimension();
    let (i0, j0) = (i - 1, j - 1);
    let mut m = DMatrix::<Complex64>::zeros(dim, dim);
    for (col, label) in space.basis.iter().enumerate() {
        let occ = &label.occupations;
        if i0 == j0 {
            m[(col, col)] = Complex64::new(occ[i0] as f64, 0.0);
            continue;
        }
        if occ[j0] == 0 {
            continue;
        }
        let amp = ((occ[j0] * (occ[i0] + 1)) as f64).sqrt();
        let mut target = label.clone();
        target.occupations[j0] -= 1;
        target.occupations[i0] += 1;
        let row = space.index[&target];
        m[(row, col)] = Complex64::new(amp, 0.0);
    }
    Ok(OperatorMatrix::from_parts(space.clone(), m))
}

/// Collective transition operator `S^{ij}`: takes atoms from level `i` to
/// level `j` (for one atom, `|j⟩⟨i|`). `S^{ii}` counts atoms in level `i`.
/// For `i < j` this is the raising operator `S_+^{ij}`, and `S^{ji}` is
/// `S_-^{ij}`.
pub fn collective_operator(space: &Space, i: usize, j: usize) -> Result<OperatorMatrix> {
    schwinger_bilinear(space, j, i)
}

pub fn commutator(lhs: &OperatorMatrix, rhs: &OperatorMatrix) -> Result<OperatorMatrix> {
    lhs.commutator(rhs)
}

/// Collective su(2) generators on levels `(lower, upper)`:
/// `S_+ = S^{lower,upper}`, `S_3 = (S^{upper,upper} − S^{lower,lower})/2`.
pub struct Su2Pair {
    pub s3: OperatorMatrix,
    pub plus: OperatorMatrix,
    pub minus: OperatorMatrix,
}

pub fn su2_pair(space: &Space, lower: usize, upper: usize) -> Result<Su2Pair> {
    let plus = collective_operator(space, lower, upper)?;
    let minus = plus.adjoint();
    let s3 = collective_operator(space, upper, upper)?
        .sub(&collective_operator(space, lower, lower)?)?
        .scale(0.5);
    Ok(Su2Pair { s3, plus, minus })
}
