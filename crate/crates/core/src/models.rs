//! The model families: spin in a field, Dicke, Ξ and Λ three-level
//! ensembles, the `N`-level cascade, and the two-mode four-level cascade.
//!
//! Every builder splits the lab-frame Hamiltonian as `H = H0 + H_int`, where
//! `H0` is a function of the integrals of motion only, so `[H0, H_int] = 0`
//! and all comparisons can be done with `H_int` alone. Energies are in units
//! with ħ = 1.

use serde::{Deserialize, Serialize};

use crate::algebra::{build_deformed, DeformedAlgebra};
use crate::blocks::{conserved_blocks, Block};
use crate::error::{Error, Result};
use crate::hilbert::{
    annihilator, collective_operator, enumerate_basis, number_operator, su2_pair, EnsembleSpec,
    FockTruncation, Space,
};
use crate::operator::OperatorMatrix;

/// Default field frequency used by the detuning-based constructors. Only
/// `H0` depends on it.
pub const REFERENCE_FREQUENCY: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinInFieldSpec {
    pub omega: f64,
    pub g: f64,
    /// `2j`
    pub atoms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DickeSpec {
    pub omega_f: f64,
    pub omega_0: f64,
    pub g: f64,
    pub atoms: usize,
    pub n_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Xi3Spec {
    pub energies: [f64; 3],
    pub omega_f: f64,
    pub g12: f64,
    pub g23: f64,
    pub atoms: usize,
    pub n_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambda3Spec {
    pub energies: [f64; 3],
    pub omega_f: f64,
    pub g13: f64,
    pub g23: f64,
    pub atoms: usize,
    pub n_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSpec {
    pub energies: Vec<f64>,
    pub omega_f: f64,
    /// `g_i` for the transitions `i ↔ i+1`.
    pub couplings: Vec<f64>,
    pub atoms: usize,
    pub n_max: usize,
    /// Demand the `(N−1)`-photon resonance `Δ_N = 0`.
    #[serde(default)]
    pub require_resonance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoModeSpec {
    pub energies: [f64; 4],
    pub omega_a: f64,
    pub omega_b: f64,
    pub g_a: [f64; 3],
    pub g_b: [f64; 3],
    pub atoms: usize,
    pub n_max_a: usize,
    pub n_max_b: usize,
    /// Demand `E4 − E1 = 3ω_b` and `E3 − E1 = 2ω_b`.
    #[serde(default)]
    pub require_resonance: bool,
    /// Demand `δ = ω_b − ω_a > 0`.
    #[serde(default)]
    pub strict_delta: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ModelSpec {
    #[serde(rename = "spin-in-field")]
    SpinInField(SpinInFieldSpec),
    #[serde(rename = "dicke")]
    Dicke(DickeSpec),
    #[serde(rename = "xi3")]
    Xi3(Xi3Spec),
    #[serde(rename = "lambda3")]
    Lambda3(Lambda3Spec),
    #[serde(rename = "cascadeN", alias = "cascade-n")]
    CascadeN(CascadeSpec),
    #[serde(rename = "two-mode-four")]
    TwoModeFour(TwoModeSpec),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::SpinInField(_) => "spin-in-field",
            ModelSpec::Dicke(_) => "dicke",
            ModelSpec::Xi3(_) => "xi3",
            ModelSpec::Lambda3(_) => "lambda3",
            ModelSpec::CascadeN(_) => "cascadeN",
            ModelSpec::TwoModeFour(_) => "two-mode-four",
        }
    }

    pub fn build(&self) -> Result<ModelInstance> {
        match self {
            ModelSpec::SpinInField(s) => build_spin_in_field(s),
            ModelSpec::Dicke(s) => build_dicke(s),
            ModelSpec::Xi3(s) => build_xi3(s),
            ModelSpec::Lambda3(s) => build_lambda3(s),
            ModelSpec::CascadeN(s) => build_cascade_n(s),
            ModelSpec::TwoModeFour(s) => build_two_mode_four(s),
        }
    }

    /// Same model with every coupling multiplied by `factor`.
    pub fn scaled_couplings(&self, factor: f64) -> ModelSpec {
        let mut out = self.clone();
        match &mut out {
            ModelSpec::SpinInField(s) => s.g *= factor,
            ModelSpec::Dicke(s) => s.g *= factor,
            ModelSpec::Xi3(s) => {
                s.g12 *= factor;
                s.g23 *= factor;
            }
            ModelSpec::Lambda3(s) => {
                s.g13 *= factor;
                s.g23 *= factor;
            }
            ModelSpec::CascadeN(s) => s.couplings.iter_mut().for_each(|g| *g *= factor),
            ModelSpec::TwoModeFour(s) => {
                s.g_a.iter_mut().chain(s.g_b.iter_mut()).for_each(|g| *g *= factor);
            }
        }
        out
    }
}

impl DickeSpec {
    pub fn from_detuning(delta: f64, g: f64, atoms: usize, n_max: usize) -> Self {
        Self { omega_f: REFERENCE_FREQUENCY, omega_0: REFERENCE_FREQUENCY + delta, g, atoms, n_max }
    }

    pub fn detuning(&self) -> f64 {
        self.omega_0 - self.omega_f
    }
}

impl Xi3Spec {
    pub fn from_detunings(d12: f64, d23: f64, g12: f64, g23: f64, atoms: usize, n_max: usize) -> Self {
        let w = REFERENCE_FREQUENCY;
        let e2 = w + d12;
        Self { energies: [0.0, e2, e2 + w + d23], omega_f: w, g12, g23, atoms, n_max }
    }

    pub fn d12(&self) -> f64 {
        self.energies[1] - self.energies[0] - self.omega_f
    }

    pub fn d23(&self) -> f64 {
        self.energies[2] - self.energies[1] - self.omega_f
    }
}

impl Lambda3Spec {
    pub fn from_detunings(d31: f64, d32: f64, g13: f64, g23: f64, atoms: usize, n_max: usize) -> Self {
        let w = REFERENCE_FREQUENCY;
        let e3 = 2.0 * w;
        Self { energies: [e3 - w - d31, e3 - w - d32, e3], omega_f: w, g13, g23, atoms, n_max }
    }

    /// `Δ_{3i} = E3 − E_i − ω_f`
    pub fn d3(&self, i: usize) -> f64 {
        self.energies[2] - self.energies[i - 1] - self.omega_f
    }
}

impl CascadeSpec {
    /// Build from detunings `Δ_1 = 0, Δ_2, .., Δ_N` (the leading zero is
    /// implied, pass `Δ_2..Δ_N`).
    pub fn from_detunings(detunings: &[f64], couplings: &[f64], atoms: usize, n_max: usize) -> Self {
        let w = REFERENCE_FREQUENCY;
        let mut energies = vec![0.0];
        for (k, d) in detunings.iter().enumerate() {
            energies.push(d + (k + 1) as f64 * w);
        }
        Self { energies, omega_f: w, couplings: couplings.to_vec(), atoms, n_max, require_resonance: false }
    }

    pub fn levels(&self) -> usize {
        self.energies.len()
    }

    /// `Δ_j = E_j − E_1 − (j−1) ω_f`, `j = 1..=N`.
    pub fn detunings(&self) -> Vec<f64> {
        self.energies
            .iter()
            .enumerate()
            .map(|(k, e)| e - self.energies[0] - k as f64 * self.omega_f)
            .collect()
    }

    /// `μ_i = i (N − i)`, `i = 1..N−1`.
    pub fn mu(&self) -> Vec<f64> {
        integral_weights(self.levels())
    }
}

impl TwoModeSpec {
    /// Detunings relative to mode `a`, `Δ_2..Δ_4`, and `δ = ω_b − ω_a`.
    pub fn from_detunings(detunings: [f64; 3], delta: f64, g_a: [f64; 3], g_b: [f64; 3], atoms: usize, n_max_a: usize, n_max_b: usize) -> Self {
        let w = REFERENCE_FREQUENCY;
        let energies = [0.0, detunings[0] + w, detunings[1] + 2.0 * w, detunings[2] + 3.0 * w];
        Self {
            energies,
            omega_a: w,
            omega_b: w + delta,
            g_a,
            g_b,
            atoms,
            n_max_a,
            n_max_b,
            require_resonance: false,
            strict_delta: false,
        }
    }

    /// `Δ_j = E_j − E_1 − (j−1) ω_a`
    pub fn detunings(&self) -> [f64; 4] {
        let mut d = [0.0; 4];
        for (k, e) in self.energies.iter().enumerate() {
            d[k] = e - self.energies[0] - k as f64 * self.omega_a;
        }
        d
    }

    pub fn delta(&self) -> f64 {
        self.omega_b - self.omega_a
    }
}

pub fn integral_weights(levels: usize) -> Vec<f64> {
    (1..levels).map(|i| (i * (levels - i)) as f64).collect()
}

/// A dipole transition `lower → upper` driven by one mode (`None` for the
/// classical-field spin model). `detuning` is the energy change under the
/// diagonal part of `H_int` when `X+` acts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub label: String,
    pub mode: Option<usize>,
    pub lower: usize,
    pub upper: usize,
    pub coupling: f64,
    pub detuning: f64,
}

#[derive(Clone, Debug)]
pub struct NamedOperator {
    pub name: String,
    pub op: OperatorMatrix,
}

#[derive(Clone, Debug)]
pub struct ModelInstance {
    pub spec: ModelSpec,
    pub space: Space,
    pub h0: OperatorMatrix,
    pub hint: OperatorMatrix,
    pub conserved: Vec<NamedOperator>,
    pub algebras: Vec<DeformedAlgebra>,
    pub transitions: Vec<Transition>,
    /// Extra named operators (e.g. `Y+^{13}`), available to analyses.
    pub auxiliary: Vec<NamedOperator>,
}

impl ModelInstance {
    pub fn hamiltonian(&self) -> OperatorMatrix {
        self.h0.add(&self.hint).expect("same space")
    }

    pub fn algebra(&self, name: &str) -> Option<&DeformedAlgebra> {
        self.algebras.iter().find(|a| a.name == name)
    }

    pub fn auxiliary(&self, name: &str) -> Option<&OperatorMatrix> {
        self.auxiliary.iter().find(|a| a.name == name).map(|a| &a.op)
    }

    pub fn transition(&self, label: &str) -> Option<&Transition> {
        self.transitions.iter().find(|t| t.label == label)
    }

    pub fn blocks(&self) -> Result<Vec<Block>> {
        let ops: Vec<&OperatorMatrix> = self.conserved.iter().map(|c| &c.op).collect();
        conserved_blocks(&self.space, &ops)
    }

    /// Largest `‖[H_int, C]‖` entry over the declared integrals of motion.
    pub fn conservation_residual(&self) -> f64 {
        self.conserved
            .iter()
            .map(|c| self.hint.commutator(&c.op).expect("same space").max_abs())
            .fold(0.0, f64::max)
    }

    /// Number of levels in the atomic ensemble.
    pub fn levels(&self) -> usize {
        self.space.levels()
    }

    pub fn population(&self, level: usize) -> Result<OperatorMatrix> {
        collective_operator(&self.space, level, level)
    }
}

fn require_atoms(atoms: usize) -> Result<()> {
    if atoms == 0 {
        return Err(Error::InvalidModel("atom count must be at least 1".into()));
    }
    Ok(())
}

fn require_truncation(n_max: usize) -> Result<()> {
    if n_max == 0 {
        return Err(Error::InvalidModel("Fock truncation must be positive".into()));
    }
    Ok(())
}

fn require_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidModel("parameters must be finite real numbers".into()));
    }
    Ok(())
}

fn require_ordered(energies: &[f64]) -> Result<()> {
    if energies.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidModel(format!("cascade energies must increase, got {energies:?}")));
    }
    Ok(())
}

/// `c (a_mode S^{lower,upper} + h.c.)`; returns `(a S_+, coupling term)`.
fn dipole(space: &Space, mode: usize, lower: usize, upper: usize) -> Result<OperatorMatrix> {
    annihilator(space, mode)?.mul(&collective_operator(space, lower, upper)?)
}

fn ladder_x3(space: &Space, lower: usize, upper: usize) -> Result<OperatorMatrix> {
    Ok(su2_pair(space, lower, upper)?.s3)
}

fn zero(space: &Space) -> OperatorMatrix {
    OperatorMatrix::zeros(space)
}

/// `H = ω S3 + g (S+ + S-)` for spin `j = A/2`.
pub fn build_spin_in_field(spec: &SpinInFieldSpec) -> Result<ModelInstance> {
    require_finite(&[spec.omega, spec.g])?;
    if spec.atoms == 0 {
        return Err(Error::InvalidModel("spin j must be a positive half-integer (atoms = 2j ≥ 1)".into()));
    }
    let space = enumerate_basis(&[], EnsembleSpec::new(2, spec.atoms)?)?;
    let p = su2_pair(&space, 1, 2)?;
    let hint = p.s3.scale(spec.omega).axpy(spec.g, &p.plus.add(&p.minus)?)?;
    let alg = build_deformed("su2", p.s3.clone(), p.plus.clone())?;
    Ok(ModelInstance {
        spec: ModelSpec::SpinInField(spec.clone()),
        h0: zero(&space),
        hint,
        conserved: vec![],
        algebras: vec![alg],
        transitions: vec![Transition {
            label: "12".into(),
            mode: None,
            lower: 1,
            upper: 2,
            coupling: spec.g,
            detuning: spec.omega,
        }],
        auxiliary: vec![],
        space,
    })
}

pub fn build_dicke(spec: &DickeSpec) -> Result<ModelInstance> {
    require_finite(&[spec.omega_f, spec.omega_0, spec.g])?;
    require_atoms(spec.atoms)?;
    require_truncation(spec.n_max)?;
    let space = enumerate_basis(&[FockTruncation::new(spec.n_max)], EnsembleSpec::new(2, spec.atoms)?)?;
    let p = su2_pair(&space, 1, 2)?;
    let xplus = dipole(&space, 0, 1, 2)?;
    let delta = spec.detuning();
    let hint = p.s3.scale(delta).axpy(spec.g, &xplus.add(&xplus.adjoint())?)?;
    let n = number_operator(&space, 0)?.add(&p.s3)?;
    let h0 = n.scale(spec.omega_f);
    let alg = build_deformed("dicke", p.s3.clone(), xplus)?;
    Ok(ModelInstance {
        spec: ModelSpec::Dicke(spec.clone()),
        h0,
        hint,
        conserved: vec![NamedOperator { name: "N".into(), op: n }],
        algebras: vec![alg],
        transitions: vec![Transition { label: "12".into(), mode: Some(0), lower: 1, upper: 2, coupling: spec.g, detuning: delta }],
        auxiliary: vec![],
        space,
    })
}

pub fn build_xi3(spec: &Xi3Spec) -> Result<ModelInstance> {
    require_finite(&spec.energies)?;
    require_finite(&[spec.omega_f, spec.g12, spec.g23])?;
    require_atoms(spec.atoms)?;
    require_truncation(spec.n_max)?;
    require_ordered(&spec.energies)?;
    let space = enumerate_basis(&[FockTruncation::new(spec.n_max)], EnsembleSpec::new(3, spec.atoms)?)?;
    let s11 = collective_operator(&space, 1, 1)?;
    let s33 = collective_operator(&space, 3, 3)?;
    let x12 = dipole(&space, 0, 1, 2)?;
    let x23 = dipole(&space, 0, 2, 3)?;
    let (d12, d23) = (spec.d12(), spec.d23());
    let hint = s11
        .scale(-d12)
        .axpy(d23, &s33)?
        .axpy(spec.g12, &x12.add(&x12.adjoint())?)?
        .axpy(spec.g23, &x23.add(&x23.adjoint())?)?;
    let n = number_operator(&space, 0)?.add(&s33)?.sub(&s11)?;
    let h0 = n
        .scale(spec.omega_f)
        .add(&OperatorMatrix::identity(&space).scale(spec.energies[1] * spec.atoms as f64))?;
    let a = annihilator(&space, 0)?;
    let y13 = a.mul(&a)?.mul(&collective_operator(&space, 1, 3)?)?;
    let algebras = vec![
        build_deformed("12", ladder_x3(&space, 1, 2)?, x12)?,
        build_deformed("23", ladder_x3(&space, 2, 3)?, x23)?,
    ];
    Ok(ModelInstance {
        spec: ModelSpec::Xi3(spec.clone()),
        h0,
        hint,
        conserved: vec![NamedOperator { name: "N_xi".into(), op: n }],
        algebras,
        transitions: vec![
            Transition { label: "12".into(), mode: Some(0), lower: 1, upper: 2, coupling: spec.g12, detuning: d12 },
            Transition { label: "23".into(), mode: Some(0), lower: 2, upper: 3, coupling: spec.g23, detuning: d23 },
        ],
        auxiliary: vec![NamedOperator { name: "Y+13".into(), op: y13 }],
        space,
    })
}

pub fn build_lambda3(spec: &Lambda3Spec) -> Result<ModelInstance> {
    require_finite(&spec.energies)?;
    require_finite(&[spec.omega_f, spec.g13, spec.g23])?;
    require_atoms(spec.atoms)?;
    require_truncation(spec.n_max)?;
    if spec.energies[2] <= spec.energies[0] || spec.energies[2] <= spec.energies[1] {
        return Err(Error::InvalidModel("Λ configuration needs E3 above both lower levels".into()));
    }
    let space = enumerate_basis(&[FockTruncation::new(spec.n_max)], EnsembleSpec::new(3, spec.atoms)?)?;
    let s11 = collective_operator(&space, 1, 1)?;
    let s22 = collective_operator(&space, 2, 2)?;
    let s33 = collective_operator(&space, 3, 3)?;
    let x13 = dipole(&space, 0, 1, 3)?;
    let x23 = dipole(&space, 0, 2, 3)?;
    let (d31, d32) = (spec.d3(1), spec.d3(2));
    let hint = s11
        .scale(-d31)
        .axpy(-d32, &s22)?
        .axpy(spec.g13, &x13.add(&x13.adjoint())?)?
        .axpy(spec.g23, &x23.add(&x23.adjoint())?)?;
    let photons = number_operator(&space, 0)?;
    let n = photons.add(&s33)?;
    let total = s11.add(&s22)?.add(&s33)?;
    let h0 = n
        .scale(spec.omega_f)
        .add(&OperatorMatrix::identity(&space).scale((spec.energies[2] - spec.omega_f) * spec.atoms as f64))?;
    let y12 = s33.sub(&photons)?;
    let algebras = vec![
        build_deformed("13", ladder_x3(&space, 1, 3)?, x13)?,
        build_deformed("23", ladder_x3(&space, 2, 3)?, x23)?,
    ];
    Ok(ModelInstance {
        spec: ModelSpec::Lambda3(spec.clone()),
        h0,
        hint,
        conserved: vec![
            NamedOperator { name: "N_lambda".into(), op: n },
            NamedOperator { name: "atoms".into(), op: total },
        ],
        algebras,
        transitions: vec![
            Transition { label: "13".into(), mode: Some(0), lower: 1, upper: 3, coupling: spec.g13, detuning: d31 },
            Transition { label: "23".into(), mode: Some(0), lower: 2, upper: 3, coupling: spec.g23, detuning: d32 },
        ],
        auxiliary: vec![
            NamedOperator { name: "Y12".into(), op: y12 },
            NamedOperator { name: "S+12".into(), op: collective_operator(&space, 1, 2)? },
        ],
        space,
    })
}

/// `Σ μ_i S_3^{i,i+1}` for the cascade integral of motion.
fn weighted_inversion(space: &Space, levels: usize) -> Result<OperatorMatrix> {
    let mu = integral_weights(levels);
    let mut acc = OperatorMatrix::zeros(space);
    for (k, m) in mu.iter().enumerate() {
        acc = acc.axpy(*m, &ladder_x3(space, k + 1, k + 2)?)?;
    }
    Ok(acc)
}

pub fn build_cascade_n(spec: &CascadeSpec) -> Result<ModelInstance> {
    let levels = spec.levels();
    if levels < 3 {
        return Err(Error::InvalidModel(format!("cascade needs N ≥ 3 levels, got {levels}")));
    }
    if spec.couplings.len() != levels - 1 {
        return Err(Error::InvalidModel(format!(
            "cascade with {levels} levels needs {} couplings, got {}",
            levels - 1,
            spec.couplings.len()
        )));
    }
    require_finite(&spec.energies)?;
    require_finite(&spec.couplings)?;
    require_finite(&[spec.omega_f])?;
    require_atoms(spec.atoms)?;
    require_truncation(spec.n_max)?;
    require_ordered(&spec.energies)?;
    let detunings = spec.detunings();
    let d_last = detunings[levels - 1];
    let scale = spec.omega_f.abs().max(1.0);
    if spec.require_resonance && d_last.abs() > 1e-12 * scale {
        return Err(Error::Resonance(format!(
            "(N−1)-photon resonance needs Δ_N = 0, got Δ_{levels} = {d_last:.6e}"
        )));
    }
    let space = enumerate_basis(&[FockTruncation::new(spec.n_max)], EnsembleSpec::new(levels, spec.atoms)?)?;
    let mut h_diag = OperatorMatrix::zeros(&space);
    for (k, d) in detunings.iter().enumerate() {
        h_diag = h_diag.axpy(*d, &collective_operator(&space, k + 1, k + 1)?)?;
    }
    let mut hint = h_diag;
    let mut algebras = Vec::new();
    let mut transitions = Vec::new();
    for (k, g) in spec.couplings.iter().enumerate() {
        let (lo, hi) = (k + 1, k + 2);
        let x = dipole(&space, 0, lo, hi)?;
        hint = hint.axpy(*g, &x.add(&x.adjoint())?)?;
        let label = format!("{lo}{hi}");
        transitions.push(Transition {
            label: label.clone(),
            mode: Some(0),
            lower: lo,
            upper: hi,
            coupling: *g,
            detuning: detunings[hi - 1] - detunings[lo - 1],
        });
        algebras.push(build_deformed(&label, ladder_x3(&space, lo, hi)?, x)?);
    }
    let n = number_operator(&space, 0)?.add(&weighted_inversion(&space, levels)?)?;
    // ω_f N + (E_1 + (N−1) ω_f / 2) A, equal to ω_f N + E A when Δ_N = 0.
    let offset = spec.energies[0] + (levels - 1) as f64 * spec.omega_f / 2.0;
    let h0 = n.scale(spec.omega_f).add(&OperatorMatrix::identity(&space).scale(offset * spec.atoms as f64))?;
    Ok(ModelInstance {
        spec: ModelSpec::CascadeN(spec.clone()),
        h0,
        hint,
        conserved: vec![NamedOperator { name: "N".into(), op: n }],
        algebras,
        transitions,
        auxiliary: vec![],
        space,
    })
}

pub fn build_two_mode_four(spec: &TwoModeSpec) -> Result<ModelInstance> {
    require_finite(&spec.energies)?;
    require_finite(&spec.g_a)?;
    require_finite(&spec.g_b)?;
    require_finite(&[spec.omega_a, spec.omega_b])?;
    require_atoms(spec.atoms)?;
    require_truncation(spec.n_max_a)?;
    require_truncation(spec.n_max_b)?;
    require_ordered(&spec.energies)?;
    let delta = spec.delta();
    if spec.strict_delta && delta <= 0.0 {
        return Err(Error::InvalidModel(format!("δ = ω_b − ω_a must be positive, got {delta}")));
    }
    if spec.require_resonance {
        let e = &spec.energies;
        let tol = 1e-12 * spec.omega_b.abs().max(1.0);
        let r4 = e[3] - e[0] - 3.0 * spec.omega_b;
        let r3 = e[2] - e[0] - 2.0 * spec.omega_b;
        if r4.abs() > tol || r3.abs() > tol {
            return Err(Error::Resonance(format!(
                "need E4 − E1 = 3ω_b and E3 − E1 = 2ω_b (mismatch {r4:.3e}, {r3:.3e})"
            )));
        }
    }
    let space = enumerate_basis(
        &[FockTruncation::new(spec.n_max_a), FockTruncation::new(spec.n_max_b)],
        EnsembleSpec::new(4, spec.atoms)?,
    )?;
    let d = spec.detunings();
    let nb = number_operator(&space, 1)?;
    let mut hint = nb.scale(delta);
    for (k, dk) in d.iter().enumerate() {
        hint = hint.axpy(*dk, &collective_operator(&space, k + 1, k + 1)?)?;
    }
    let mut algebras = Vec::new();
    let mut transitions = Vec::new();
    for (mode, name, couplings) in [(0usize, "a", &spec.g_a), (1usize, "b", &spec.g_b)] {
        for (k, g) in couplings.iter().enumerate() {
            let (lo, hi) = (k + 1, k + 2);
            let x = dipole(&space, mode, lo, hi)?;
            hint = hint.axpy(*g, &x.add(&x.adjoint())?)?;
            let label = format!("{name}:{lo}{hi}");
            let photon_energy = if mode == 1 { delta } else { 0.0 };
            transitions.push(Transition {
                label: label.clone(),
                mode: Some(mode),
                lower: lo,
                upper: hi,
                coupling: *g,
                detuning: d[hi - 1] - d[lo - 1] - photon_energy,
            });
            algebras.push(build_deformed(&label, ladder_x3(&space, lo, hi)?, x)?);
        }
    }
    let n = number_operator(&space, 0)?.add(&nb)?.add(&weighted_inversion(&space, 4)?)?;
    let offset = spec.energies[0] + 1.5 * spec.omega_a;
    let h0 = n.scale(spec.omega_a).add(&OperatorMatrix::identity(&space).scale(offset * spec.atoms as f64))?;
    Ok(ModelInstance {
        spec: ModelSpec::TwoModeFour(spec.clone()),
        h0,
        hint,
        conserved: vec![NamedOperator { name: "N".into(), op: n }],
        algebras,
        transitions,
        auxiliary: vec![],
        space,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub transition: String,
    /// `A g √(n_max + 1) / |Δ|`
    pub ratio: f64,
    pub valid: bool,
}

pub const DISPERSIVE_LIMIT: f64 = 0.3;

/// Dispersive-regime check for one transition; the truncation level stands
/// in for the mean photon number.
pub fn dispersive_guard(model: &ModelInstance, transition: &str) -> Result<GuardReport> {
    let t = model
        .transition(transition)
        .ok_or_else(|| Error::Guard(format!("model has no transition {transition:?}")))?;
    let n_max = t.mode.map(|m| model.space.modes()[m].n_max).unwrap_or(0);
    let atoms = model.space.atoms() as f64;
    let ratio = if t.detuning == 0.0 {
        f64::INFINITY
    } else {
        atoms * t.coupling.abs() * ((n_max + 1) as f64).sqrt() / t.detuning.abs()
    };
    Ok(GuardReport { transition: t.label.clone(), ratio, valid: ratio < DISPERSIVE_LIMIT })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::block_leakage;
    use crate::hilbert::BasisLabel;
    use crate::linalg::eigvalsh;

    fn lab_frame_xi(spec: &Xi3Spec, m: &ModelInstance) -> OperatorMatrix {
        let s = &m.space;
        let mut h = number_operator(s, 0).unwrap().scale(spec.omega_f);
        for (k, e) in spec.energies.iter().enumerate() {
            h = h.axpy(*e, &collective_operator(s, k + 1, k + 1).unwrap()).unwrap();
        }
        let x12 = dipole(s, 0, 1, 2).unwrap();
        let x23 = dipole(s, 0, 2, 3).unwrap();
        h.axpy(spec.g12, &x12.add(&x12.adjoint()).unwrap())
            .unwrap()
            .axpy(spec.g23, &x23.add(&x23.adjoint()).unwrap())
            .unwrap()
    }

    fn check_instance(m: &ModelInstance) {
        assert!(m.conservation_residual() < 1e-12, "{}", m.conservation_residual());
        assert!(m.hint.is_hermitian(1e-12));
        assert!(m.h0.is_hermitian(1e-12));
        assert!(m.h0.commutator(&m.hint).unwrap().max_abs() < 1e-10);
        let blocks = m.blocks().unwrap();
        assert!(block_leakage(&m.hint, &blocks) <= 1e-14);
    }

    #[test]
    fn spin_in_field_spectrum() {
        let m = build_spin_in_field(&SpinInFieldSpec { omega: 1.0, g: 0.0, atoms: 1 }).unwrap();
        assert_eq!(eigvalsh(m.hint.matrix()), vec![-0.5, 0.5]);
        let m = build_spin_in_field(&SpinInFieldSpec { omega: 1.0, g: 0.3, atoms: 1 }).unwrap();
        let ev = eigvalsh(m.hint.matrix());
        assert!((ev[1] - 0.5831).abs() < 5e-5, "{ev:?}");
        for atoms in 1..=6 {
            let (w, g) = (1.3, 0.4);
            let m = build_spin_in_field(&SpinInFieldSpec { omega: w, g, atoms }).unwrap();
            let ev = eigvalsh(m.hint.matrix());
            let scale = w * (1.0 + 4.0 * g * g / (w * w)).sqrt();
            let j = atoms as f64 / 2.0;
            for (k, e) in ev.iter().enumerate() {
                assert!((e - (-j + k as f64) * scale).abs() < 1e-12);
            }
        }
        assert!(build_spin_in_field(&SpinInFieldSpec { omega: 1.0, g: 0.1, atoms: 0 }).is_err());
    }

    #[test]
    fn dicke_invariants_and_jc_blocks() {
        let spec = DickeSpec::from_detuning(0.7, 0.11, 1, 6);
        let m = build_dicke(&spec).unwrap();
        check_instance(&m);
        let lab = number_operator(&m.space, 0)
            .unwrap()
            .scale(spec.omega_f)
            .add(&m.algebras[0].x3.scale(spec.omega_0))
            .unwrap()
            .axpy(spec.g, &m.algebras[0].hermitian_coupling())
            .unwrap();
        assert!(lab.sub(&m.hamiltonian()).unwrap().max_abs() < 1e-12);
        for block in m.blocks().unwrap() {
            if block.len() != 2 || block.touches_truncation {
                continue;
            }
            // {|n, e⟩, |n+1, g⟩} with n = N − 1/2
            let n = block.key[0] - 0.5;
            let ev = eigvalsh(&m.hint.restrict(&block.indices));
            let r = (0.7f64 * 0.7 / 4.0 + 0.11 * 0.11 * (n + 1.0)).sqrt();
            assert!((ev[0] + r).abs() < 1e-12 && (ev[1] - r).abs() < 1e-12);
        }
        for a in 2..=3 {
            check_instance(&build_dicke(&DickeSpec::from_detuning(1.0, 0.05, a, 4)).unwrap());
        }
    }

    #[test]
    fn xi_invariants_and_reduction() {
        let spec = Xi3Spec::from_detunings(0.9, -0.4, 0.07, 0.05, 2, 4);
        let m = build_xi3(&spec).unwrap();
        check_instance(&m);
        assert!(lab_frame_xi(&spec, &m).sub(&m.hamiltonian()).unwrap().max_abs() < 1e-10);

        // g23 = 0: on states without level 3 the model is a Dicke model on levels 1,2.
        let spec = Xi3Spec::from_detunings(0.6, 0.3, 0.08, 0.0, 1, 5);
        let xi = build_xi3(&spec).unwrap();
        let dicke = build_dicke(&DickeSpec::from_detuning(0.6, 0.08, 1, 5)).unwrap();
        let map = |l: &BasisLabel| BasisLabel { photons: l.photons.clone(), occupations: vec![l.occupations[0], l.occupations[1], 0] };
        for (i, li) in dicke.space.basis().iter().enumerate() {
            for (j, lj) in dicke.space.basis().iter().enumerate() {
                let (xi_i, xi_j) = (xi.space.index_of(&map(li)).unwrap(), xi.space.index_of(&map(lj)).unwrap());
                let lhs = xi.hint.matrix()[(xi_i, xi_j)];
                // Dicke: Δ S3 = Δ (S22 − S11)/2; Ξ: −Δ12 S11 = Δ12 (S3 − 1/2) on one atom
                let mut rhs = dicke.hint.matrix()[(i, j)];
                if i == j {
                    rhs -= num_complex::Complex64::new(0.3, 0.0);
                }
                assert!((lhs - rhs).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn xi_two_photon_block_spectrum() {
        // Brute-force oracle: the N_Ξ = 1 block of one atom is spanned by
        // |2;1⟩, |1;2⟩, |0;3⟩ with energies −Δ12, 0, Δ23.
        let (d12, g12, g23) = (1.0, 0.2, 0.15);
        let m = build_xi3(&Xi3Spec::from_detunings(d12, -d12, g12, g23, 1, 4)).unwrap();
        let block = m.blocks().unwrap().into_iter().find(|b| b.key == vec![1.0]).unwrap();
        assert_eq!(block.len(), 3);
        let mut ev = eigvalsh(&m.hint.restrict(&block.indices));
        let oracle = nalgebra::DMatrix::from_row_slice(3, 3, &[
            -d12, g12 * 2f64.sqrt(), 0.0,
            g12 * 2f64.sqrt(), 0.0, g23,
            0.0, g23, -d12,
        ]);
        let mut want: Vec<f64> = oracle.symmetric_eigen().eigenvalues.iter().cloned().collect();
        want.sort_by(f64::total_cmp);
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_invariants() {
        let m = build_lambda3(&Lambda3Spec::from_detunings(1.0, 1.0, 0.05, 0.05, 2, 4)).unwrap();
        check_instance(&m);
        // one atom in level 1, vacuum: H_int only adds the diagonal −Δ31
        let m = build_lambda3(&Lambda3Spec::from_detunings(1.0, 0.8, 0.05, 0.04, 1, 3)).unwrap();
        let idx = m.space.index_of(&BasisLabel { photons: vec![0], occupations: vec![1, 0, 0] }).unwrap();
        let psi = OperatorMatrix::basis_state(&m.space, idx).unwrap();
        let out = m.hint.apply(&psi);
        assert!((out.clone() - psi * num_complex::Complex64::new(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn lambda_degenerate_blocks_match_oracle() {
        // bright/dark structure: degenerate lower levels, one atom.
        let (d, g) = (1.0, 0.1);
        let m = build_lambda3(&Lambda3Spec::from_detunings(d, d, g, g, 1, 5)).unwrap();
        for block in m.blocks().unwrap() {
            if block.touches_truncation || block.len() != 3 {
                continue;
            }
            let n = block.key[0]; // N_Λ = n for an atom in level 1 or 2
            let ev = eigvalsh(&m.hint.restrict(&block.indices));
            let g_bright = g * (2.0 * n).sqrt();
            let disc = (d * d + 4.0 * g_bright * g_bright).sqrt();
            let mut want = [(-d - disc) / 2.0, -d, (-d + disc) / 2.0];
            want.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cascade_weights_and_resonance() {
        assert_eq!(integral_weights(4), vec![3.0, 4.0, 3.0]);
        let mut spec = CascadeSpec::from_detunings(&[1.0, 1.7, 0.0], &[0.03, 0.03, 0.03], 1, 5);
        assert_eq!(spec.detunings()[0], 0.0);
        spec.require_resonance = true;
        let m = build_cascade_n(&spec).unwrap();
        check_instance(&m);
        let spec2 = CascadeSpec::from_detunings(&[1.0, 1.7, 0.2], &[0.03, 0.03, 0.03], 2, 4);
        check_instance(&build_cascade_n(&spec2).unwrap());
        let mut bad = spec2.clone();
        bad.require_resonance = true;
        assert!(matches!(build_cascade_n(&bad), Err(Error::Resonance(_))));
        assert!(build_cascade_n(&CascadeSpec::from_detunings(&[1.0], &[0.1], 1, 3)).is_err());
        assert!(build_cascade_n(&CascadeSpec::from_detunings(&[1.0, 0.5], &[0.1], 1, 3)).is_err());
    }

    #[test]
    fn cascade_splitting_reproduces_lab_frame() {
        let spec = CascadeSpec::from_detunings(&[0.5, -0.3, 0.0], &[0.1, 0.2, 0.15], 2, 3);
        let m = build_cascade_n(&spec).unwrap();
        let s = &m.space;
        let mut h = number_operator(s, 0).unwrap().scale(spec.omega_f);
        for (k, e) in spec.energies.iter().enumerate() {
            h = h.axpy(*e, &collective_operator(s, k + 1, k + 1).unwrap()).unwrap();
        }
        for (k, g) in spec.couplings.iter().enumerate() {
            let x = dipole(s, 0, k + 1, k + 2).unwrap();
            h = h.axpy(*g, &x.add(&x.adjoint()).unwrap()).unwrap();
        }
        assert!(h.sub(&m.hamiltonian()).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn two_mode_invariants_and_reduction() {
        let spec = TwoModeSpec::from_detunings([1.0, 1.8, 0.6], 0.2, [0.03, 0.02, 0.04], [0.01, 0.05, 0.02], 1, 3, 3);
        let m = build_two_mode_four(&spec).unwrap();
        check_instance(&m);
        let spec2 = TwoModeSpec::from_detunings([1.0, 1.8, 0.6], 0.2, [0.03, 0.02, 0.04], [0.01, 0.05, 0.02], 2, 2, 2);
        check_instance(&build_two_mode_four(&spec2).unwrap());

        // g_b = 0: the vacuum sector of mode b is a single-mode cascade
        let spec = TwoModeSpec::from_detunings([1.0, 1.8, 0.6], 0.2, [0.03, 0.02, 0.04], [0.0; 3], 1, 3, 2);
        let two = build_two_mode_four(&spec).unwrap();
        let one = build_cascade_n(&CascadeSpec::from_detunings(&[1.0, 1.8, 0.6], &[0.03, 0.02, 0.04], 1, 3)).unwrap();
        for (i, li) in one.space.basis().iter().enumerate() {
            for (j, lj) in one.space.basis().iter().enumerate() {
                let lift = |l: &BasisLabel| BasisLabel { photons: vec![l.photons[0], 0], occupations: l.occupations.clone() };
                let (ti, tj) = (two.space.index_of(&lift(li)).unwrap(), two.space.index_of(&lift(lj)).unwrap());
                assert!((two.hint.matrix()[(ti, tj)] - one.hint.matrix()[(i, j)]).norm() < 1e-12);
            }
        }
        let mut strict = spec.clone();
        strict.strict_delta = true;
        strict.omega_b = strict.omega_a - 0.1;
        assert!(build_two_mode_four(&strict).is_err());
        let mut res = spec.clone();
        res.require_resonance = true;
        assert!(matches!(build_two_mode_four(&res), Err(Error::Resonance(_))));
    }

    #[test]
    fn two_mode_block_spectrum_matches_direct_diagonalization() {
        // Oracle: the whole Hamiltonian's spectrum is the union of block spectra.
        let spec = TwoModeSpec::from_detunings([1.0, 1.8, 0.6], 0.2, [0.1, 0.2, 0.15], [0.05, 0.1, 0.2], 1, 2, 2);
        let m = build_two_mode_four(&spec).unwrap();
        let mut all = eigvalsh(m.hint.matrix());
        let mut from_blocks: Vec<f64> = m
            .blocks()
            .unwrap()
            .iter()
            .flat_map(|b| eigvalsh(&m.hint.restrict(&b.indices)))
            .collect();
        all.sort_by(f64::total_cmp);
        from_blocks.sort_by(f64::total_cmp);
        for (a, b) in all.iter().zip(&from_blocks) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn dispersive_guard_examples() {
        let m = build_dicke(&DickeSpec::from_detuning(1.0, 0.0, 1, 3)).unwrap();
        let r = dispersive_guard(&m, "12").unwrap();
        assert_eq!(r.ratio, 0.0);
        assert!(r.valid);
        let m = build_dicke(&DickeSpec::from_detuning(1.0, 0.05, 1, 3)).unwrap();
        let r = dispersive_guard(&m, "12").unwrap();
        assert!((r.ratio - 0.1).abs() < 1e-12 && r.valid);
        let m = build_dicke(&DickeSpec::from_detuning(0.0, 0.05, 1, 3)).unwrap();
        assert!(!dispersive_guard(&m, "12").unwrap().valid);
        assert!(dispersive_guard(&m, "99").is_err());
    }

    #[test]
    fn spec_roundtrips_through_toml() {
        let spec = ModelSpec::Dicke(DickeSpec::from_detuning(1.0, 0.02, 2, 6));
        let text = toml::to_string(&spec).unwrap();
        assert!(text.contains("kind = \"dicke\""));
        let back: ModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
