//! Small nonlinear rotations `U = exp[ε(X+ − X-)]`, their action on the
//! model Hamiltonians, and the closed-form effective Hamiltonians they lead
//! to.
//!
//! All rotations act as `H ↦ U H U†`. With the elimination generator
//! `S = Σ ε_t (X+_t − X-_t)`, `ε_t = g_t / D_t`, where `D_t` is the change of
//! the diagonal part of `H_int` when `X+_t` acts, the first-order
//! off-diagonal terms cancel exactly.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::algebra::DeformedAlgebra;
use crate::error::{Error, Result};
use crate::hilbert::{annihilator, collective_operator, number_operator, Space};
use crate::linalg::expm_operator;
use crate::models::{ModelInstance, ModelSpec, Transition, DISPERSIVE_LIMIT};
use crate::operator::{OperatorMatrix, StateVector};

/// Unitarity demanded of rotations handed to [`conjugate`].
pub const UNITARITY_TOL: f64 = 1e-10;
/// Matrix elements below this are treated as absent when sorting terms by
/// transition signature.
pub const PATTERN_THRESHOLD: f64 = 1e-13;
/// Relative agreement at which a printed closed form counts as matching.
pub const AGREEMENT_TOL: f64 = 1e-10;

pub fn matrix_exponential(a: &OperatorMatrix) -> Result<OperatorMatrix> {
    expm_operator(a)
}

/// `U·H·U†`; `U` must be unitary to [`UNITARITY_TOL`].
pub fn conjugate(h: &OperatorMatrix, u: &OperatorMatrix) -> Result<OperatorMatrix> {
    if !h.same_space(u) {
        return Err(Error::SpaceMismatch);
    }
    let residual = u.unitarity_residual();
    if residual > UNITARITY_TOL {
        return Err(Error::NotUnitary { residual });
    }
    u.mul(h)?.mul(&u.adjoint())
}

#[derive(Clone, Debug)]
pub struct RotationSpec<'a> {
    pub algebra: &'a DeformedAlgebra,
    pub epsilon: f64,
}

impl<'a> RotationSpec<'a> {
    pub fn new(algebra: &'a DeformedAlgebra, epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon.abs() >= 1.0 {
            return Err(Error::EpsilonOutOfRange { epsilon });
        }
        if epsilon.abs() > DISPERSIVE_LIMIT {
            log::warn!("rotation parameter {epsilon} exceeds {DISPERSIVE_LIMIT}; the expansion is poor");
        }
        Ok(Self { algebra, epsilon })
    }
}

/// `exp[ε(X+ − X-)]`
pub fn small_rotation(spec: &RotationSpec) -> Result<OperatorMatrix> {
    Ok(Rotation::from_generator(spec.algebra.antihermitian_direction().scale(spec.epsilon))?.unitary)
}

/// A unitary together with its anti-Hermitian generator, `U = exp(S)`.
#[derive(Clone, Debug)]
pub struct Rotation {
    pub generator: OperatorMatrix,
    pub unitary: OperatorMatrix,
}

impl Rotation {
    pub fn from_generator(generator: OperatorMatrix) -> Result<Self> {
        let anti = generator.add(&generator.adjoint())?.max_abs();
        if anti > 1e-12 * (1.0 + generator.max_abs()) {
            return Err(Error::NotHermitian { residual: anti });
        }
        let unitary = matrix_exponential(&generator)?;
        Ok(Self { generator, unitary })
    }

    pub fn apply(&self, h: &OperatorMatrix) -> Result<OperatorMatrix> {
        conjugate(h, &self.unitary)
    }

    /// `U† H U`, taking an operator in the rotated frame back.
    pub fn unapply(&self, h: &OperatorMatrix) -> Result<OperatorMatrix> {
        conjugate(h, &self.unitary.adjoint())
    }
}

/// `Δ X3 + (g²/Δ) P(X3)` with the measured structure operator.
pub fn effective_su2(alg: &DeformedAlgebra, delta: f64, g: f64) -> Result<OperatorMatrix> {
    if delta == 0.0 || !delta.is_finite() {
        return Err(Error::Guard("effective su(2) form needs a nonzero detuning".into()));
    }
    if (g / delta).abs() >= DISPERSIVE_LIMIT {
        log::warn!("|g/Δ| = {} is outside the dispersive regime", (g / delta).abs());
    }
    alg.x3.scale(delta).axpy(g * g / delta, &alg.structure)
}

/// Which eigenvector approximation [`corrected_eigenstate`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigenstateOrder {
    Exact,
    First,
    Second,
}

/// `U†|m⟩` for `U = exp(S)`. Finite orders truncate the series of
/// `exp(−S)`.
pub fn corrected_eigenstate(rotation: &Rotation, m: usize, order: EigenstateOrder) -> Result<StateVector> {
    let space = rotation.generator.space();
    let e = OperatorMatrix::basis_state(space, m)?;
    let s = rotation.generator.matrix();
    Ok(match order {
        EigenstateOrder::Exact => {
            let residual = rotation.unitary.unitarity_residual();
            if residual > UNITARITY_TOL {
                return Err(Error::NotUnitary { residual });
            }
            let v = rotation.unitary.adjoint().apply(&e);
            let norm = v.norm();
            v / num_complex::Complex64::new(norm, 0.0)
        }
        EigenstateOrder::First => &e - s * &e,
        EigenstateOrder::Second => {
            let se = s * &e;
            let sse = s * &se;
            &e - &se + sse * num_complex::Complex64::new(0.5, 0.0)
        }
    })
}

/// `‖offdiag(H)‖_F / ‖H‖_F`. With `groups`, entries inside one group count
/// as diagonal.
pub fn offdiagonal_residual(h: &OperatorMatrix, groups: Option<&[usize]>) -> f64 {
    let total = h.norm();
    if total == 0.0 {
        return 0.0;
    }
    let m = h.matrix();
    let mut off = 0.0;
    for j in 0..h.dimension() {
        for i in 0..h.dimension() {
            let same = match groups {
                Some(g) => g[i] == g[j],
                None => i == j,
            };
            if !same {
                off += m[(i, j)].norm_sqr();
            }
        }
    }
    off.sqrt() / total
}

/// Photon and occupation changes of a matrix element `⟨row|·|col⟩`,
/// final minus initial.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub photons: Vec<i64>,
    pub occupations: Vec<i64>,
}

impl Signature {
    pub fn between(space: &Space, row: usize, col: usize) -> Self {
        let (f, i) = (&space.basis()[row], &space.basis()[col]);
        Self {
            photons: f.photons.iter().zip(&i.photons).map(|(a, b)| *a as i64 - *b as i64).collect(),
            occupations: f.occupations.iter().zip(&i.occupations).map(|(a, b)| *a as i64 - *b as i64).collect(),
        }
    }

    /// `∏ a_m^{k_m} S^{lower,upper}`: absorbs `k_m` photons of mode `m`
    /// while one atom goes `lower → upper`.
    pub fn absorption(space: &Space, photons: &[(usize, i64)], lower: usize, upper: usize) -> Self {
        let mut p = vec![0; space.modes().len()];
        for &(m, k) in photons {
            p[m] -= k;
        }
        let mut o = vec![0; space.levels()];
        o[lower - 1] -= 1;
        o[upper - 1] += 1;
        Self { photons: p, occupations: o }
    }

    pub fn negated(&self) -> Self {
        Self {
            photons: self.photons.iter().map(|v| -v).collect(),
            occupations: self.occupations.iter().map(|v| -v).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.photons.iter().all(|&v| v == 0) && self.occupations.iter().all(|&v| v == 0)
    }

    /// Total photons exchanged, `Σ |Δn_m|`.
    pub fn photon_count(&self) -> i64 {
        self.photons.iter().map(|v| v.abs()).sum()
    }
}

/// Which terms survive the projection onto the effective sector.
#[derive(Clone, Debug, PartialEq)]
pub enum Sector {
    /// Diagonal terms only.
    Diagonal,
    /// Diagonal terms plus the listed signatures and their conjugates.
    Resonant(Vec<Signature>),
    /// Everything except single-photon exchanges.
    AllButSinglePhoton,
}

impl Sector {
    fn keeps(&self, sig: &Signature) -> bool {
        if sig.is_zero() {
            return true;
        }
        match self {
            Sector::Diagonal => false,
            Sector::Resonant(list) => list.iter().any(|s| s == sig || s.negated() == *sig),
            Sector::AllButSinglePhoton => sig.photon_count() != 1,
        }
    }
}

pub fn project(op: &OperatorMatrix, sector: &Sector) -> OperatorMatrix {
    let space = op.space().clone();
    op.mask(|i, j| i == j || sector.keeps(&Signature::between(&space, i, j)))
}

/// `e^S H e^{-S}` expanded to total order `order` in the couplings, with
/// `h_d` counted as zeroth order and `v` and `S` as first order:
/// `Σ_{k≤order} ad_S^k h_d / k! + Σ_{k<order} ad_S^k v / k!`.
pub fn truncated_conjugation(s: &OperatorMatrix, h_d: &OperatorMatrix, v: &OperatorMatrix, order: usize) -> Result<OperatorMatrix> {
    let mut total = h_d.clone();
    let mut term_d = h_d.clone();
    let mut term_v = v.clone();
    let mut factorial = 1.0;
    if order >= 1 {
        total = total.add(v)?;
    }
    for k in 1..=order {
        factorial *= k as f64;
        term_d = s.commutator(&term_d)?;
        total = total.axpy(1.0 / factorial, &term_d)?;
        if k < order {
            term_v = s.commutator(&term_v)?;
            total = total.axpy(1.0 / factorial, &term_v)?;
        }
    }
    Ok(total)
}

/// `∏ a_m^{k_m} S^{lower,upper}` as an operator.
pub fn absorption_operator(space: &Space, photons: &[(usize, u32)], lower: usize, upper: usize) -> Result<OperatorMatrix> {
    let mut op = collective_operator(space, lower, upper)?;
    for &(m, k) in photons {
        op = annihilator(space, m)?.power(k).mul(&op)?;
    }
    Ok(op)
}

/// The dipole operator `X+` of a transition.
pub fn transition_operator(space: &Space, t: &Transition) -> Result<OperatorMatrix> {
    match t.mode {
        Some(m) => absorption_operator(space, &[(m, 1)], t.lower, t.upper),
        None => collective_operator(space, t.lower, t.upper),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliminatedTransition {
    pub label: String,
    pub coupling: f64,
    pub detuning: f64,
    pub epsilon: f64,
    /// `A |g| √(n_max + 1) / |D|`
    pub dispersive_ratio: f64,
    pub valid: bool,
}

/// Generator `S = Σ ε_t (X+_t − X-_t)` removing the listed transitions at
/// first order.
pub fn elimination_generator(model: &ModelInstance, labels: &[&str]) -> Result<(OperatorMatrix, Vec<EliminatedTransition>)> {
    let space = &model.space;
    let mut s = OperatorMatrix::zeros(space);
    let mut info = Vec::new();
    for label in labels {
        let t = model
            .transition(label)
            .ok_or_else(|| Error::Guard(format!("model has no transition {label:?}")))?;
        if t.detuning == 0.0 {
            return Err(Error::Guard(format!(
                "transition {label} is resonant (zero detuning) and cannot be eliminated"
            )));
        }
        let eps = t.coupling / t.detuning;
        let xp = transition_operator(space, t)?;
        s = s.axpy(eps, &xp.sub(&xp.adjoint())?)?;
        let n_max = t.mode.map(|m| space.modes()[m].n_max).unwrap_or(0);
        let ratio = space.atoms() as f64 * t.coupling.abs() * ((n_max + 1) as f64).sqrt() / t.detuning.abs();
        info.push(EliminatedTransition {
            label: t.label.clone(),
            coupling: t.coupling,
            detuning: t.detuning,
            epsilon: eps,
            dispersive_ratio: ratio,
            valid: ratio < DISPERSIVE_LIMIT,
        });
    }
    Ok((s, info))
}

/// Cascade couplings: `ε_i`, the `λ_i^{(n)}` triangle and the second-stage
/// parameters `α_i^{(2)}`, `β_{ij}` (1-based in the math, 0-based here).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingTable {
    pub couplings: Vec<f64>,
    /// `Δ_1 .. Δ_N`
    pub detunings: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// `lambda[n-1][i-1] = λ_i^{(n)}`
    pub lambda: Vec<Vec<f64>>,
    pub alpha2: Vec<Option<f64>>,
    pub beta: Vec<Vec<Option<f64>>>,
}

pub fn coupling_table(g: &[f64], detunings: &[f64], max_order: usize) -> Result<CouplingTable> {
    let levels = detunings.len();
    if levels < 2 || g.len() + 1 != levels {
        return Err(Error::InvalidModel(format!(
            "coupling table needs N detunings and N−1 couplings, got {} and {}",
            levels,
            g.len()
        )));
    }
    let mut epsilon = Vec::with_capacity(g.len());
    for (i, gi) in g.iter().enumerate() {
        let d = detunings[i + 1] - detunings[i];
        if d == 0.0 {
            return Err(Error::Resonance(format!("one-photon resonance on transition {}↔{}", i + 1, i + 2)));
        }
        epsilon.push(gi / d);
    }
    let orders = max_order.clamp(1, levels - 1);
    let mut lambda = vec![g.to_vec()];
    for n in 1..orders {
        let prev = &lambda[n - 1];
        let next: Vec<f64> = (0..levels - 1 - n)
            .map(|i| epsilon[i + n] * prev[i] - epsilon[i] * prev[i + 1])
            .collect();
        lambda.push(next);
    }
    let alpha2 = match lambda.get(1) {
        Some(l2) => l2
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let d = detunings[i + 2] - detunings[i];
                (d != 0.0).then(|| l / d)
            })
            .collect(),
        None => vec![],
    };
    let beta = (0..g.len())
        .map(|i| {
            (0..g.len())
                .map(|j| {
                    let d = detunings[i + 1] - detunings[i] + detunings[j] - detunings[j + 1];
                    (i != j && d != 0.0).then(|| epsilon[i] * g[j] / d)
                })
                .collect()
        })
        .collect();
    Ok(CouplingTable { couplings: g.to_vec(), detunings: detunings.to_vec(), epsilon, lambda, alpha2, beta })
}

impl CouplingTable {
    /// `λ_i^{(n)}` with 1-based `i` and `n`.
    pub fn lambda(&self, i: usize, n: usize) -> Option<f64> {
        self.lambda.get(n.checked_sub(1)?)?.get(i.checked_sub(1)?).copied()
    }

    /// Coefficient of `a^{n+1} S_+^{i,i+n+1}` after the first stage,
    /// `n/(n+1)! λ_i^{(n+1)}`.
    pub fn multiphoton_coefficient(&self, i: usize, photons: usize) -> Option<f64> {
        let n = photons.checked_sub(1)?;
        let fact: f64 = (1..=photons).map(|k| k as f64).product();
        Some(n as f64 / fact * self.lambda(i, photons)?)
    }

    /// Every `|λ_i^{(n+1)}| < |λ_i^{(n)}|` that can be compared.
    pub fn decreasing(&self) -> bool {
        self.lambda.windows(2).all(|w| {
            w[1].iter().enumerate().all(|(i, l)| l.abs() < w[0][i].abs().max(w[0][i + 1].abs()))
        })
    }
}

/// `ξ_2^{(ab)} = g_{a3} g_{b2}/(Δ_4 − Δ_3) − g_{b3} g_{a2}/(Δ_3 − Δ_2)` with
/// detunings measured against mode `a`.
pub fn two_mode_xi(g_a: &[f64; 3], g_b: &[f64; 3], detunings: &[f64; 4]) -> Result<f64> {
    let (d43, d32) = (detunings[3] - detunings[2], detunings[2] - detunings[1]);
    if d43 == 0.0 || d32 == 0.0 {
        return Err(Error::Resonance("ξ_ab needs Δ_4 ≠ Δ_3 and Δ_3 ≠ Δ_2".into()));
    }
    Ok(g_a[2] * g_b[1] / d43 - g_b[2] * g_a[1] / d32)
}

/// Conditions under which the dipole-dipole part `h_nd` of the four-level
/// cascade turns resonant; when any holds it must stay in the effective
/// Hamiltonian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HndResonance {
    pub pair: String,
    pub condition: String,
    pub mismatch: f64,
    pub resonant: bool,
}

pub fn hnd_resonances(detunings: &[f64]) -> Vec<HndResonance> {
    let n = detunings.len();
    let mut out = Vec::new();
    for i in 0..n.saturating_sub(1) {
        for j in (i + 1)..n.saturating_sub(1) {
            // S_+^{i,i+1} S_-^{j,j+1}: atom i → i+1 and j+1 → j
            let mismatch = detunings[i + 1] - detunings[i] + detunings[j] - detunings[j + 1];
            let scale = detunings.iter().fold(1.0f64, |m, d| m.max(d.abs()));
            out.push(HndResonance {
                pair: format!("{}{}-{}{}", i + 1, i + 2, j + 1, j + 2),
                condition: format!("Δ{} − Δ{} + Δ{} − Δ{} = 0", i + 2, i + 1, j + 1, j + 2),
                mismatch,
                resonant: mismatch.abs() <= 1e-9 * scale,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioId {
    Su2Generic,
    DickeDispersive,
    XiFarLevel,
    XiTwoPhoton,
    LambdaDispersive,
    CascadeFirstStage,
    FourLevelThreePhoton,
    TwoModeFour,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 8] = [
        ScenarioId::Su2Generic,
        ScenarioId::DickeDispersive,
        ScenarioId::XiFarLevel,
        ScenarioId::XiTwoPhoton,
        ScenarioId::LambdaDispersive,
        ScenarioId::CascadeFirstStage,
        ScenarioId::FourLevelThreePhoton,
        ScenarioId::TwoModeFour,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioId::Su2Generic => "su2-generic",
            ScenarioId::DickeDispersive => "dicke-dispersive",
            ScenarioId::XiFarLevel => "xi-far-level",
            ScenarioId::XiTwoPhoton => "xi-two-photon",
            ScenarioId::LambdaDispersive => "lambda-dispersive",
            ScenarioId::CascadeFirstStage => "cascade-first-stage",
            ScenarioId::FourLevelThreePhoton => "four-level-three-photon",
            ScenarioId::TwoModeFour => "two-mode-four",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|id| id.as_str() == s)
    }

    /// Model kinds the scenario is defined for.
    pub fn model_kinds(&self) -> &'static [&'static str] {
        match self {
            ScenarioId::Su2Generic => &["spin-in-field", "dicke"],
            ScenarioId::DickeDispersive => &["dicke"],
            ScenarioId::XiFarLevel | ScenarioId::XiTwoPhoton => &["xi3"],
            ScenarioId::LambdaDispersive => &["lambda3"],
            ScenarioId::CascadeFirstStage | ScenarioId::FourLevelThreePhoton => &["cascadeN"],
            ScenarioId::TwoModeFour => &["two-mode-four"],
        }
    }

    /// The printed closed form.
    pub fn formula(&self) -> &'static str {
        match self {
            ScenarioId::Su2Generic => "H_eff = Δ X3 + (g²/Δ) P(X3)",
            ScenarioId::DickeDispersive => "H_eff = Δ S3 + (g²/Δ)[S3² − 2(a†a+1)S3 − C2]",
            ScenarioId::XiFarLevel => "H_eff = Δ23 S33 + g23(a S+23 + h.c.) + (g12²/Δ12) S22 (a†a+1)",
            ScenarioId::XiTwoPhoton => {
                "H_eff = (g12 g23/Δ12)(a² S+13 + h.c.) + (S3^13 + A/2)[(g23² − g12²)/Δ12 a†a + g23²/Δ12] + A (g12²/Δ12) a†a"
            }
            ScenarioId::LambdaDispersive => {
                "H_eff = −Δ31 S11 − Δ32 S22 + Σ_i (g_i3²/Δ_i3)[(S_ii+1)S33 + a†a(S33 − S_ii)] + (g13 g23/Δ31)(S+12 + h.c.)(S33 − a†a)"
            }
            ScenarioId::CascadeFirstStage => {
                "H_eff = h0 + h_d + h_nd + Σ_n n/(n+1)! Σ_i λ_i^(n+1) (a^(n+1) S+^(i,i+n+1) + h.c.)"
            }
            ScenarioId::FourLevelThreePhoton => {
                "H_eff = (g1 g2 g3/(Δ2 Δ3))(a³ S+14 + h.c.) − (S3^14 + A/2)[a†a(g1²/Δ2 − g3²/Δ3) + g3²/Δ3] + A (g1²/Δ2) a†a"
            }
            ScenarioId::TwoModeFour => {
                "H_eff = h0 + h_d(a) + h_d(b) + ½λ1^(2)(a² S+13 + h.c.) + ⅓λ1^(3)(b³ S+14 + h.c.) + ξ_ab (a b S+24 + h.c.)"
            }
        }
    }

    pub fn guards(&self) -> &'static str {
        match self {
            ScenarioId::Su2Generic | ScenarioId::DickeDispersive => "Δ ≠ 0; A g √(n_max+1)/|Δ| < 0.3",
            ScenarioId::XiFarLevel => "Δ12 ≠ 0, dispersive 1↔2; level 1 unpopulated (S11 = 0)",
            ScenarioId::XiTwoPhoton => "Δ12 = −Δ23 ≠ 0; dispersive 1↔2 and 2↔3; level 2 unpopulated (S22 = 0)",
            ScenarioId::LambdaDispersive => "Δ31, Δ32 ≠ 0; dispersive 1↔3 and 2↔3",
            ScenarioId::CascadeFirstStage => "Δ_{i+1} ≠ Δ_i; every one-photon transition dispersive",
            ScenarioId::FourLevelThreePhoton => {
                "N = 4; Δ4 = 0; no one- or two-photon resonance; levels 2 and 3 unpopulated"
            }
            ScenarioId::TwoModeFour => "no one-photon resonance in either mode",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectiveForm {
    Printed,
    #[default]
    Corrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveScenario {
    pub id: ScenarioId,
    pub form: EffectiveForm,
}

impl EffectiveScenario {
    pub fn corrected(id: ScenarioId) -> Self {
        Self { id, form: EffectiveForm::Corrected }
    }

    pub fn printed(id: ScenarioId) -> Self {
        Self { id, form: EffectiveForm::Printed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    /// Frobenius norm of `printed − corrected` on the compared states.
    pub norm_difference: f64,
    /// Same after removing the best constant shift.
    pub shift_free_difference: f64,
    pub max_abs_difference: f64,
    /// `norm_difference / ‖H_int‖` on the compared states.
    pub relative: f64,
    pub agree: bool,
    /// Number of basis states compared (admissible and clear of the
    /// truncation by the expansion order).
    pub compared_states: usize,
}

#[derive(Clone, Debug)]
pub struct EffectiveHamiltonian {
    pub scenario: EffectiveScenario,
    pub printed: OperatorMatrix,
    pub corrected: OperatorMatrix,
    pub deviation: DeviationReport,
    /// The first-stage rotation `exp(S)`.
    pub rotation: Rotation,
    pub eliminated: Vec<EliminatedTransition>,
    /// Basis indices allowed by the scenario's population assumptions.
    pub admissible: Vec<usize>,
    /// Expansion order of the corrected form; states within this many
    /// photons of the truncation are not trusted.
    pub order: usize,
    pub notes: Vec<String>,
}

impl EffectiveHamiltonian {
    /// The form selected by the scenario flag.
    pub fn selected(&self) -> &OperatorMatrix {
        match self.scenario.form {
            EffectiveForm::Printed => &self.printed,
            EffectiveForm::Corrected => &self.corrected,
        }
    }

    pub fn guards_hold(&self) -> bool {
        self.eliminated.iter().all(|e| e.valid)
    }

    /// Admissible states with every photon number at most `n_max − order`.
    pub fn trusted(&self) -> Vec<usize> {
        trusted_indices(self.printed.space(), &self.admissible, self.order)
    }
}

pub fn trusted_indices(space: &Space, candidates: &[usize], margin: usize) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&i| {
            space.basis()[i]
                .photons
                .iter()
                .zip(space.modes())
                .all(|(&n, m)| n + margin <= m.n_max)
        })
        .collect()
}

/// Indices of states with no atoms in any of `empty_levels`.
pub fn admissible_indices(space: &Space, empty_levels: &[usize]) -> Vec<usize> {
    (0..space.dimension())
        .filter(|&i| empty_levels.iter().all(|&l| space.basis()[i].occupations[l - 1] == 0))
        .collect()
}

pub fn deviation_report(printed: &OperatorMatrix, corrected: &OperatorMatrix, reference: &OperatorMatrix, indices: &[usize]) -> DeviationReport {
    let diff = printed.sub(corrected).expect("same space").restrict(indices);
    let norm = diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let shift = if indices.is_empty() { 0.0 } else { diff.trace().re / indices.len() as f64 };
    let mut shifted = diff.clone();
    for k in 0..indices.len() {
        shifted[(k, k)] -= num_complex::Complex64::new(shift, 0.0);
    }
    let shift_free = shifted.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let max_abs = diff.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let href = reference.restrict(indices).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let relative = if href > 0.0 { norm / href } else { norm };
    DeviationReport {
        norm_difference: norm,
        shift_free_difference: shift_free,
        max_abs_difference: max_abs,
        relative,
        agree: relative <= AGREEMENT_TOL,
        compared_states: indices.len(),
    }
}

/// Operator shorthands on one space.
struct Ops<'a> {
    space: &'a Space,
}

impl<'a> Ops<'a> {
    fn s(&self, i: usize, j: usize) -> OperatorMatrix {
        collective_operator(self.space, i, j).expect("level in range")
    }

    /// `S^{ij} + S^{ji}`
    fn sx(&self, i: usize, j: usize) -> OperatorMatrix {
        self.s(i, j).add(&self.s(j, i)).unwrap()
    }

    /// `(S^{jj} − S^{ii})/2`
    fn s3(&self, i: usize, j: usize) -> OperatorMatrix {
        self.s(j, j).sub(&self.s(i, i)).unwrap().scale(0.5)
    }

    fn n(&self, mode: usize) -> OperatorMatrix {
        number_operator(self.space, mode).expect("mode in range")
    }

    fn id(&self) -> OperatorMatrix {
        OperatorMatrix::identity(self.space)
    }

    /// `∏ a_m^{k_m} S^{lower,upper} + h.c.`
    fn absorb_hc(&self, photons: &[(usize, u32)], lower: usize, upper: usize) -> OperatorMatrix {
        let x = absorption_operator(self.space, photons, lower, upper).unwrap();
        x.add(&x.adjoint()).unwrap()
    }

    fn mul(&self, a: &OperatorMatrix, b: &OperatorMatrix) -> OperatorMatrix {
        a.mul(b).unwrap()
    }

    /// Stark pattern `a†a (S^{jj} − S^{ii}) + (S^{ii}+1) S^{jj}` on mode `m`.
    fn stark(&self, mode: usize, i: usize, j: usize) -> OperatorMatrix {
        let n = self.n(mode);
        let first = self.mul(&n, &self.s(j, j).sub(&self.s(i, i)).unwrap());
        let second = self.mul(&self.s(i, i).add(&self.id()).unwrap(), &self.s(j, j));
        first.add(&second).unwrap()
    }
}

fn unsupported(id: ScenarioId, model: &ModelInstance) -> Error {
    Error::UnsupportedScenario { scenario: id.as_str().into(), model: model.spec.kind().into() }
}

fn resonance_scale(values: &[f64]) -> f64 {
    values.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Build both the printed and the corrected effective Hamiltonian of a
/// scenario and compare them.
///
/// The corrected form is the conjugation `e^S H_int e^{-S}` expanded to the
/// order of the scenario, projected onto the diagonal and the scenario's
/// resonant transitions, on the full space. The comparison is restricted to
/// the admissible subspace and to states clear of the Fock truncation.
pub fn closed_form_effective(model: &ModelInstance, scenario: EffectiveScenario) -> Result<EffectiveHamiltonian> {
    let id = scenario.id;
    if !id.model_kinds().contains(&model.spec.kind()) {
        return Err(unsupported(id, model));
    }
    let space = &model.space;
    let ops = Ops { space };
    let h_d = model.hint.diagonal_part();
    let v = model.hint.offdiagonal_part();
    let mut notes = Vec::new();

    let (labels, sector, order, empty, printed): (Vec<String>, Sector, usize, Vec<usize>, OperatorMatrix) = match (&model.spec, id) {
        (ModelSpec::SpinInField(_), ScenarioId::Su2Generic) | (ModelSpec::Dicke(_), ScenarioId::Su2Generic) => {
            let t = &model.transitions[0];
            let printed = effective_su2(&model.algebras[0], t.detuning, t.coupling)?;
            (vec![t.label.clone()], Sector::Diagonal, 2, vec![], printed)
        }
        (ModelSpec::Dicke(spec), ScenarioId::DickeDispersive) => {
            let delta = spec.detuning();
            if delta == 0.0 {
                return Err(Error::Guard("dicke-dispersive needs Δ ≠ 0".into()));
            }
            let s3 = ops.s3(1, 2);
            let a = spec.atoms as f64 / 2.0;
            let c2 = a * (a + 1.0);
            let n1 = ops.n(0).add(&ops.id()).unwrap();
            let bracket = ops
                .mul(&s3, &s3)
                .sub(&ops.mul(&n1, &s3).scale(2.0))
                .unwrap()
                .sub(&ops.id().scale(c2))
                .unwrap();
            let printed = s3.scale(delta).axpy(spec.g * spec.g / delta, &bracket).unwrap();
            (vec!["12".into()], Sector::Diagonal, 2, vec![], printed)
        }
        (ModelSpec::Xi3(spec), ScenarioId::XiFarLevel) => {
            let (d12, d23) = (spec.d12(), spec.d23());
            if d12 == 0.0 {
                return Err(Error::Guard("xi-far-level needs Δ12 ≠ 0".into()));
            }
            let stark = ops.mul(&ops.s(2, 2), &ops.n(0).add(&ops.id()).unwrap());
            let printed = ops
                .s(3, 3)
                .scale(d23)
                .axpy(spec.g23, &ops.absorb_hc(&[(0, 1)], 2, 3))
                .unwrap()
                .axpy(spec.g12 * spec.g12 / d12, &stark)
                .unwrap();
            let kept = Signature::absorption(space, &[(0, 1)], 2, 3);
            (vec!["12".into()], Sector::Resonant(vec![kept]), 2, vec![1], printed)
        }
        (ModelSpec::Xi3(spec), ScenarioId::XiTwoPhoton) => {
            let (d12, d23) = (spec.d12(), spec.d23());
            if (d12 + d23).abs() > 1e-9 * resonance_scale(&[d12, d23]) {
                return Err(Error::Resonance(format!(
                    "two-photon resonance needs Δ12 = −Δ23, got Δ12 = {d12}, Δ23 = {d23}"
                )));
            }
            if d12 == 0.0 {
                return Err(Error::Guard("xi-two-photon needs Δ12 ≠ 0".into()));
            }
            let atoms = spec.atoms as f64;
            let (g12, g23) = (spec.g12, spec.g23);
            let bracket = ops.n(0).scale((g23 * g23 - g12 * g12) / d12).add(&ops.id().scale(g23 * g23 / d12)).unwrap();
            let pop = ops.s3(1, 3).add(&ops.id().scale(atoms / 2.0)).unwrap();
            let printed = ops
                .absorb_hc(&[(0, 2)], 1, 3)
                .scale(g12 * g23 / d12)
                .add(&ops.mul(&pop, &bracket))
                .unwrap()
                .axpy(atoms * g12 * g12 / d12, &ops.n(0))
                .unwrap();
            let kept = Signature::absorption(space, &[(0, 2)], 1, 3);
            (vec!["12".into(), "23".into()], Sector::Resonant(vec![kept]), 2, vec![2], printed)
        }
        (ModelSpec::Lambda3(spec), ScenarioId::LambdaDispersive) => {
            let (d31, d32) = (spec.d3(1), spec.d3(2));
            if d31 == 0.0 || d32 == 0.0 {
                return Err(Error::Guard("lambda-dispersive needs Δ31 ≠ 0 and Δ32 ≠ 0".into()));
            }
            notes.push("printed Stark denominators Δ13, Δ23 read as Δ31, Δ32".into());
            let exchange = ops.mul(&ops.sx(1, 2), &ops.s(3, 3).sub(&ops.n(0)).unwrap());
            let printed = ops
                .s(1, 1)
                .scale(-d31)
                .axpy(-d32, &ops.s(2, 2))
                .unwrap()
                .axpy(spec.g13 * spec.g13 / d31, &ops.stark(0, 1, 3))
                .unwrap()
                .axpy(spec.g23 * spec.g23 / d32, &ops.stark(0, 2, 3))
                .unwrap()
                .axpy(spec.g13 * spec.g23 / d31, &exchange)
                .unwrap();
            let kept = Signature::absorption(space, &[], 1, 2);
            (vec!["13".into(), "23".into()], Sector::Resonant(vec![kept]), 2, vec![], printed)
        }
        (ModelSpec::CascadeN(spec), ScenarioId::CascadeFirstStage) => {
            let levels = spec.levels();
            let table = coupling_table(&spec.couplings, &spec.detunings(), levels - 1)?;
            let printed = cascade_printed_first_stage(&ops, &h_d, &table, levels, &mut notes);
            let labels = model.transitions.iter().map(|t| t.label.clone()).collect();
            (labels, Sector::AllButSinglePhoton, levels - 1, vec![], printed)
        }
        (ModelSpec::CascadeN(spec), ScenarioId::FourLevelThreePhoton) => {
            if spec.levels() != 4 {
                return Err(Error::Guard(format!("four-level-three-photon needs N = 4, got N = {}", spec.levels())));
            }
            let d = spec.detunings();
            if d[3].abs() > 1e-9 * resonance_scale(&d) {
                return Err(Error::Resonance(format!("three-photon resonance needs Δ4 = 0, got {}", d[3])));
            }
            for i in 0..2 {
                if d[i + 2] == d[i] {
                    return Err(Error::Resonance(format!("two-photon resonance on {}↔{}", i + 1, i + 3)));
                }
            }
            let _ = coupling_table(&spec.couplings, &d, 3)?;
            let (g1, g2, g3) = (spec.couplings[0], spec.couplings[1], spec.couplings[2]);
            let (d2, d3) = (d[1], d[2]);
            let atoms = spec.atoms as f64;
            let pop = ops.s3(1, 4).add(&ops.id().scale(atoms / 2.0)).unwrap();
            let bracket = ops
                .n(0)
                .scale(g1 * g1 / d2 - g3 * g3 / d3)
                .add(&ops.id().scale(g3 * g3 / d3))
                .unwrap();
            let printed = ops
                .absorb_hc(&[(0, 3)], 1, 4)
                .scale(g1 * g2 * g3 / (d2 * d3))
                .sub(&ops.mul(&pop, &bracket))
                .unwrap()
                .axpy(atoms * g1 * g1 / d2, &ops.n(0))
                .unwrap();
            let kept = Signature::absorption(space, &[(0, 3)], 1, 4);
            let labels = model.transitions.iter().map(|t| t.label.clone()).collect();
            (labels, Sector::Resonant(vec![kept]), 3, vec![2, 3], printed)
        }
        (ModelSpec::TwoModeFour(spec), ScenarioId::TwoModeFour) => {
            let d = spec.detunings();
            let delta = spec.delta();
            let db: Vec<f64> = spec.energies.iter().enumerate().map(|(k, e)| e - spec.energies[0] - k as f64 * spec.omega_b).collect();
            let ta = coupling_table(&spec.g_a, &d, 3)?;
            let tb = coupling_table(&spec.g_b, &db, 3)?;
            let xi = two_mode_xi(&spec.g_a, &spec.g_b, &d)?;
            let mut printed = h_d.clone();
            for i in 1..=3 {
                let eb = spec.g_b[i - 1] / (d[i] - d[i - 1] - delta);
                printed = printed.axpy(spec.g_a[i - 1] * ta.epsilon[i - 1], &ops.stark(0, i, i + 1)).unwrap();
                printed = printed.axpy(spec.g_b[i - 1] * eb, &ops.stark(1, i, i + 1)).unwrap();
            }
            printed = printed
                .axpy(0.5 * ta.lambda(1, 2).unwrap(), &ops.absorb_hc(&[(0, 2)], 1, 3))
                .unwrap()
                .axpy(tb.lambda(1, 3).unwrap() / 3.0, &ops.absorb_hc(&[(1, 3)], 1, 4))
                .unwrap()
                .axpy(xi, &ops.absorb_hc(&[(0, 1), (1, 1)], 2, 4))
                .unwrap();
            notes.push("b-mode λ constants use detunings measured against ω_b".into());
            let labels = model.transitions.iter().map(|t| t.label.clone()).collect();
            (labels, Sector::AllButSinglePhoton, 3, vec![], printed)
        }
        _ => return Err(unsupported(id, model)),
    };

    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let (s, eliminated) = elimination_generator(model, &label_refs)?;
    let conjugated = truncated_conjugation(&s, &h_d, &v, order)?;
    let corrected = project(&conjugated, &sector);
    let rotation = Rotation::from_generator(s)?;
    let admissible = admissible_indices(space, &empty);
    let trusted = trusted_indices(space, &admissible, order);
    let deviation = deviation_report(&printed, &corrected, &model.hint, &trusted);
    Ok(EffectiveHamiltonian {
        scenario,
        printed,
        corrected,
        deviation,
        rotation,
        eliminated,
        admissible,
        order,
        notes,
    })
}

fn cascade_printed_first_stage(ops: &Ops, h0: &OperatorMatrix, table: &CouplingTable, levels: usize, notes: &mut Vec<String>) -> OperatorMatrix {
    let g = &table.couplings;
    let eps = &table.epsilon;
    let mut out = h0.clone();
    for i in 1..levels {
        out = out.axpy(g[i - 1] * eps[i - 1], &ops.stark(0, i, i + 1)).unwrap();
    }
    // S_+^{i,i+1} S_-^{j,j+1} + h.c.
    let pair = |i: usize, j: usize| {
        let p = ops.mul(&ops.s(i, i + 1), &ops.s(j + 1, j));
        p.add(&p.adjoint()).unwrap()
    };
    if levels == 4 {
        out = out
            .axpy(0.5 * (eps[0] * g[2] + eps[2] * g[0]), &pair(1, 3))
            .unwrap()
            .axpy(0.5 * (eps[0] * g[1] + eps[1] * g[0]), &pair(1, 2))
            .unwrap();
    } else {
        notes.push(format!("h_nd has no printed form for N = {levels}; the pairwise sum ½(ε_i g_j + ε_j g_i) is used"));
        for i in 1..levels {
            for j in (i + 1)..levels {
                out = out.axpy(0.5 * (eps[i - 1] * g[j - 1] + eps[j - 1] * g[i - 1]), &pair(i, j)).unwrap();
            }
        }
    }
    for photons in 2..levels {
        for i in 1..=(levels - photons) {
            if let Some(c) = table.multiphoton_coefficient(i, photons) {
                out = out.axpy(c, &ops.absorb_hc(&[(0, photons as u32)], i, i + photons)).unwrap();
            }
        }
    }
    out
}

/// One `a^k S_+^{i,i+k}` term of the rotated cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiphotonTerm {
    pub photons: usize,
    pub lower: usize,
    pub upper: usize,
    /// `(k−1)/k! λ_i^{(k)}` from the coupling table.
    pub predicted: f64,
    /// Matrix element of the rotated Hamiltonian divided by that of
    /// `a^k S_+^{i,i+k}`, on the reference state.
    pub extracted: f64,
    pub relative_error: f64,
    pub reference_state: String,
}

#[derive(Clone, Debug)]
pub struct CascadeDecomposition {
    pub table: CouplingTable,
    pub rotation: Rotation,
    pub rotated: OperatorMatrix,
    /// `Σ Δ_i S^{ii}`, untouched by the rotation.
    pub h0: OperatorMatrix,
    /// Diagonal part of the rotated Hamiltonian minus `h0`.
    pub h_d: OperatorMatrix,
    /// Photon-free off-diagonal part.
    pub h_nd: OperatorMatrix,
    /// Terms exchanging two or more photons.
    pub multiphoton: OperatorMatrix,
    /// Leftover one-photon terms, of third order.
    pub residual: OperatorMatrix,
    pub terms: Vec<MultiphotonTerm>,
    pub hnd_resonances: Vec<HndResonance>,
}

/// Eliminate every one-photon transition of a cascade with the full
/// rotation `exp[Σ ε_i (X+^{i,i+1} − X-^{i,i+1})]` and sort the rotated
/// Hamiltonian into its pieces by transition signature.
pub fn cascade_first_stage(model: &ModelInstance) -> Result<CascadeDecomposition> {
    let spec = match &model.spec {
        ModelSpec::CascadeN(s) => s,
        _ => return Err(unsupported(ScenarioId::CascadeFirstStage, model)),
    };
    let levels = spec.levels();
    let detunings = spec.detunings();
    let table = coupling_table(&spec.couplings, &detunings, levels - 1)?;
    if let Some(e) = table.epsilon.iter().find(|e| e.abs() >= DISPERSIVE_LIMIT) {
        return Err(Error::Guard(format!("one-photon parameter ε = {e:.4} is not small (limit {DISPERSIVE_LIMIT})")));
    }
    let labels: Vec<&str> = model.transitions.iter().map(|t| t.label.as_str()).collect();
    let (s, _) = elimination_generator(model, &labels)?;
    let rotation = Rotation::from_generator(s)?;
    let rotated = rotation.apply(&model.hint)?;
    let space = model.space.clone();
    let h0 = model.hint.diagonal_part();
    let diag = rotated.diagonal_part();
    let h_d = diag.sub(&h0)?;
    let sig_keep = |want: &dyn Fn(&Signature) -> bool| {
        let sp = space.clone();
        rotated.mask(move |i, j| {
            i != j && want(&Signature::between(&sp, i, j))
        })
    };
    let h_nd = sig_keep(&|s: &Signature| s.photon_count() == 0);
    let multiphoton = sig_keep(&|s: &Signature| s.photon_count() >= 2);
    let residual = sig_keep(&|s: &Signature| s.photon_count() == 1);

    let mut terms = Vec::new();
    for photons in 2..levels {
        for lower in 1..=(levels - photons) {
            let upper = lower + photons;
            let predicted = table.multiphoton_coefficient(lower, photons).unwrap_or(0.0);
            if let Some(term) = extract_multiphoton(&rotated, photons, lower, upper, predicted)? {
                terms.push(term);
            }
        }
    }
    Ok(CascadeDecomposition {
        table,
        rotation,
        rotated: rotated.clone(),
        h0,
        h_d,
        h_nd,
        multiphoton,
        residual,
        terms,
        hnd_resonances: hnd_resonances(&detunings),
    })
}

/// Reference state: all atoms in `lower`, the fewest photons that allow the
/// transition.
fn extract_multiphoton(rotated: &OperatorMatrix, photons: usize, lower: usize, upper: usize, predicted: f64) -> Result<Option<MultiphotonTerm>> {
    let space = rotated.space();
    let pattern = absorption_operator(space, &[(0, photons as u32)], lower, upper)?;
    let n_max = space.modes()[0].n_max;
    if n_max < photons {
        return Ok(None);
    }
    let mut occ = vec![0; space.levels()];
    occ[lower - 1] = space.atoms();
    let initial = crate::hilbert::BasisLabel { photons: vec![photons], occupations: occ.clone() };
    let mut occ_f = occ;
    occ_f[lower - 1] -= 1;
    occ_f[upper - 1] += 1;
    let fin = crate::hilbert::BasisLabel { photons: vec![0], occupations: occ_f };
    let (Some(i), Some(f)) = (space.index_of(&initial), space.index_of(&fin)) else {
        return Ok(None);
    };
    let element = pattern.matrix()[(f, i)].re;
    if element == 0.0 {
        return Ok(None);
    }
    let extracted = rotated.matrix()[(f, i)].re / element;
    let relative_error = if predicted != 0.0 { ((extracted - predicted) / predicted).abs() } else { extracted.abs() };
    Ok(Some(MultiphotonTerm {
        photons,
        lower,
        upper,
        predicted,
        extracted,
        relative_error,
        reference_state: format!("{}", space.basis()[i]),
    }))
}

/// Distinct transition signatures present in `op` above [`PATTERN_THRESHOLD`].
pub fn signatures_present(op: &OperatorMatrix) -> BTreeSet<Signature> {
    let space = op.space();
    let mut out = BTreeSet::new();
    for j in 0..op.dimension() {
        for i in 0..op.dimension() {
            if op.matrix()[(i, j)].norm() > PATTERN_THRESHOLD {
                out.insert(Signature::between(space, i, j));
            }
        }
    }
    out
}

/// The diagonal cascade pattern `Σ g_i ε_i [a†a(S^{i+1,i+1} − S^{ii}) + (S^{ii}+1) S^{i+1,i+1}]`.
pub fn cascade_stark_pattern(model: &ModelInstance) -> Result<OperatorMatrix> {
    let spec = match &model.spec {
        ModelSpec::CascadeN(s) => s,
        _ => return Err(unsupported(ScenarioId::CascadeFirstStage, model)),
    };
    let table = coupling_table(&spec.couplings, &spec.detunings(), 1)?;
    let ops = Ops { space: &model.space };
    let mut out = OperatorMatrix::zeros(&model.space);
    for i in 1..spec.levels() {
        out = out.axpy(spec.couplings[i - 1] * table.epsilon[i - 1], &ops.stark(0, i, i + 1))?;
    }
    Ok(out)
}
