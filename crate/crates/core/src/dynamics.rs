//! Exact evolution, fidelities, block spectra and ε-scaling fits.
//!
//! Comparisons are made with `H_int` alone; `H0` commutes with it and only
//! contributes a phase inside each conserved block.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::blocks::{block_leakage, Block};
use crate::error::{Error, Result};
use crate::linalg::{eigh, eigvalsh, HermitianEigen};
use crate::operator::{OperatorMatrix, StateVector};
use crate::rotations::{DeviationReport, EliminatedTransition, Rotation};
use crate::sweep;

pub const HERMITICITY_TOL: f64 = 1e-10;
pub const NORM_TOL: f64 = 1e-10;
/// Metric values below this are numerical noise, not a scaling signal.
pub const SATURATION_FLOOR: f64 = 1e-14;
/// Largest RMS log-residual at which a fitted order is reported.
pub const FIT_RESIDUAL_LIMIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub observables: BTreeMap<String, Vec<f64>>,
}

impl Trajectory {
    pub fn observable(&self, name: &str) -> Option<&[f64]> {
        self.observables.get(name).map(Vec::as_slice)
    }

    /// `max_t |1 − ‖ψ(t)‖|`
    pub fn norm_drift(&self) -> f64 {
        self.states.iter().map(|s| (1.0 - s.norm()).abs()).fold(0.0, f64::max)
    }

    pub fn add_observable(&mut self, name: &str, op: &OperatorMatrix) {
        let series = self.states.iter().map(|s| op.expectation(s).re).collect();
        self.observables.insert(name.to_string(), series);
    }
}

/// Propagator `exp(−iHt)` through one eigendecomposition.
#[derive(Clone, Debug)]
pub struct Propagator {
    eigen: HermitianEigen,
}

impl Propagator {
    pub fn new(h: &OperatorMatrix) -> Result<Self> {
        let residual = h.hermiticity_residual();
        if residual > HERMITICITY_TOL {
            return Err(Error::NotHermitian { residual });
        }
        Ok(Self { eigen: eigh(h.matrix()) })
    }

    pub fn apply(&self, psi: &StateVector, t: f64) -> StateVector {
        self.eigen.apply_function(psi, |e| Complex64::new(0.0, -e * t).exp())
    }
}

/// `ψ(t) = exp(−iHt) ψ0` on every requested time.
pub fn evolve(h: &OperatorMatrix, psi0: &StateVector, times: &[f64]) -> Result<Trajectory> {
    if psi0.len() != h.dimension() {
        return Err(Error::SpaceMismatch);
    }
    let norm = psi0.norm();
    if (norm - 1.0).abs() > NORM_TOL {
        return Err(Error::Guard(format!("initial state is not normalized (‖ψ0‖ = {norm})")));
    }
    let prop = Propagator::new(h)?;
    let states = times.iter().map(|&t| prop.apply(psi0, t)).collect();
    Ok(Trajectory { times: times.to_vec(), states, observables: BTreeMap::new() })
}

/// `|⟨ψ|φ⟩|²`
pub fn fidelity(psi: &StateVector, phi: &StateVector) -> Result<f64> {
    if psi.len() != phi.len() {
        return Err(Error::SpaceMismatch);
    }
    Ok(psi.dotc(phi).norm_sqr().min(1.0))
}

pub fn linspace(start: f64, stop: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![start],
        _ => (0..points).map(|k| start + (stop - start) * k as f64 / (points - 1) as f64).collect(),
    }
}

/// Geometric grid `start, start·ratio, ...`.
pub fn geometric_grid(start: f64, ratio: f64, points: usize) -> Vec<f64> {
    (0..points).map(|k| start * ratio.powi(k as i32)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityTrace {
    pub times: Vec<f64>,
    /// `1 − F` against `U† exp(−i H_eff t) U ψ0`.
    pub rotated: Vec<f64>,
    /// `1 − F` against `exp(−i H_eff t) ψ0`.
    pub naive: Vec<f64>,
}

impl FidelityTrace {
    pub fn max_rotated(&self) -> f64 {
        self.rotated.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_naive(&self) -> f64 {
        self.naive.iter().copied().fold(0.0, f64::max)
    }
}

/// Infidelity between exact evolution under `h_exact` and effective
/// evolution under `h_eff`, the latter read in the rotated frame of
/// `rotation` and also naively.
pub fn fidelity_trace(h_exact: &OperatorMatrix, h_eff: &OperatorMatrix, rotation: &Rotation, psi0: &StateVector, times: &[f64]) -> Result<FidelityTrace> {
    let exact = evolve(h_exact, psi0, times)?;
    let eff = Propagator::new(h_eff)?;
    let u = rotation.unitary.matrix();
    let udag = u.adjoint();
    let start = u * psi0;
    let mut rotated = Vec::with_capacity(times.len());
    let mut naive = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let r = &udag * eff.apply(&start, t);
        let n = eff.apply(psi0, t);
        rotated.push(1.0 - fidelity(&exact.states[k], &r)?);
        naive.push(1.0 - fidelity(&exact.states[k], &n)?);
    }
    Ok(FidelityTrace { times: times.to_vec(), rotated, naive })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpectrum {
    pub block_id: String,
    pub exact: Vec<f64>,
    pub effective: Vec<f64>,
    pub max_error: f64,
    pub mean_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumComparison {
    pub blocks: Vec<BlockSpectrum>,
    pub max_error: f64,
    pub mean_error: f64,
}

/// Sorted eigenvalues of both operators inside each block, paired by rank.
/// Rank pairing compares degenerate clusters as multisets.
pub fn compare_spectra(h_exact: &OperatorMatrix, h_eff: &OperatorMatrix, blocks: &[Block]) -> Result<SpectrumComparison> {
    if !h_exact.same_space(h_eff) {
        return Err(Error::SpaceMismatch);
    }
    for h in [h_exact, h_eff] {
        let leak = block_leakage(h, blocks);
        if leak > 1e-10 {
            return Err(Error::BlockViolation { residual: leak });
        }
    }
    let per: Vec<BlockSpectrum> = sweep::map(blocks, |b| {
        let exact = eigvalsh(&h_exact.restrict(&b.indices));
        let effective = eigvalsh(&h_eff.restrict(&b.indices));
        let errs: Vec<f64> = exact.iter().zip(&effective).map(|(a, b)| (a - b).abs()).collect();
        BlockSpectrum {
            block_id: b.id(),
            max_error: errs.iter().copied().fold(0.0, f64::max),
            mean_error: if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 },
            exact,
            effective,
        }
    });
    let count: usize = per.iter().map(|b| b.exact.len()).sum();
    let total: f64 = per.iter().map(|b| b.mean_error * b.exact.len() as f64).sum();
    Ok(SpectrumComparison {
        max_error: per.iter().map(|b| b.max_error).fold(0.0, f64::max),
        mean_error: if count == 0 { 0.0 } else { total / count as f64 },
        blocks: per,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMetric {
    EigenvalueError,
    Infidelity,
    OffdiagResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub epsilons: Vec<f64>,
    pub metrics: Vec<f64>,
    /// Fitted slope of `log(metric)` against `log(ε)`; `None` when the fit
    /// is saturated or its residual exceeds [`FIT_RESIDUAL_LIMIT`].
    pub order: Option<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// RMS residual of the log-log fit.
    pub residual: f64,
    /// `slope ± 2σ` from the fit.
    pub band: (f64, f64),
    pub saturated: bool,
}

impl ScalingFit {
    /// `metric(ε_k)/metric(ε_{k+1})` for consecutive grid points.
    pub fn ratios(&self) -> Vec<f64> {
        self.metrics.windows(2).map(|w| w[0] / w[1]).collect()
    }
}

/// Least-squares order fit of `metric ∝ ε^p`.
pub fn fit_scaling(epsilons: &[f64], metrics: &[f64]) -> Result<ScalingFit> {
    if epsilons.len() < 3 || epsilons.len() != metrics.len() || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::ScalingGrid);
    }
    let saturated = metrics.iter().any(|m| !(m.abs() >= SATURATION_FLOOR));
    if saturated {
        return Ok(ScalingFit {
            epsilons: epsilons.to_vec(),
            metrics: metrics.to_vec(),
            order: None,
            slope: f64::NAN,
            intercept: f64::NAN,
            residual: f64::NAN,
            band: (f64::NAN, f64::NAN),
            saturated: true,
        });
    }
    let xs: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = metrics.iter().map(|m| m.abs().ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let residual = (ss / n).sqrt();
    let sigma = (ss / (n - 2.0) / sxx).sqrt();
    Ok(ScalingFit {
        epsilons: epsilons.to_vec(),
        metrics: metrics.to_vec(),
        order: (residual <= FIT_RESIDUAL_LIMIT).then_some(slope),
        slope,
        intercept,
        residual,
        band: (slope - 2.0 * sigma, slope + 2.0 * sigma),
        saturated: false,
    })
}

/// Evaluate `metric(ε)` over a geometric grid (points run concurrently when
/// the `parallel` feature is on) and fit its order.
pub fn scaling_study<F>(grid: &[f64], metric: F) -> Result<ScalingFit>
where
    F: Fn(f64) -> Result<f64> + Sync + Send,
{
    if grid.len() < 3 {
        return Err(Error::ScalingGrid);
    }
    let ratio = grid[1] / grid[0];
    let geometric = grid.windows(2).all(|w| ((w[1] / w[0]) / ratio - 1.0).abs() < 1e-9);
    if !geometric {
        return Err(Error::ScalingGrid);
    }
    let metrics = sweep::try_map(grid, |&e| metric(e))?;
    fit_scaling(grid, &metrics)
}

/// Dominant frequency (cycles per unit time) of an oscillating series from
/// the mean spacing of its maxima. Maxima are separated by hysteresis
/// around the midline, and each one is refined by a parabola through the
/// three samples around it.
pub fn effective_frequency(traj: &Trajectory, observable: &str) -> Result<f64> {
    let series = traj
        .observable(observable)
        .ok_or_else(|| Error::NotOscillatory(format!("no observable named {observable:?}")))?;
    series_frequency(&traj.times, series)
}

pub fn series_frequency(times: &[f64], series: &[f64]) -> Result<f64> {
    let peaks = peak_times(times, series)?;
    if peaks.len() < 2 {
        return Err(Error::NotOscillatory(format!("found {} maxima, need at least 2", peaks.len())));
    }
    let period = (peaks[peaks.len() - 1] - peaks[0]) / (peaks.len() - 1) as f64;
    Ok(1.0 / period)
}

fn peak_times(times: &[f64], series: &[f64]) -> Result<Vec<f64>> {
    if times.len() != series.len() || times.len() < 3 {
        return Err(Error::NotOscillatory("series too short".into()));
    }
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let amp = hi - lo;
    if !(amp > 1e-9 * (1.0 + hi.abs())) {
        return Err(Error::NotOscillatory("series is constant".into()));
    }
    let mid = 0.5 * (hi + lo);
    let (upper, lower) = (mid + 0.25 * amp, mid - 0.25 * amp);
    let mut peaks = Vec::new();
    // Only maxima that follow a dip below `lower` and precede one count;
    // this skips a maximum sitting at t = 0 or cut off at the end.
    let mut armed = series[0] < lower;
    let mut best: Option<usize> = None;
    for (k, &y) in series.iter().enumerate() {
        if !armed {
            armed = y < lower;
            continue;
        }
        if y > upper {
            if best.is_none_or(|b| y > series[b]) {
                best = Some(k);
            }
        } else if y < lower {
            if let Some(b) = best.take() {
                peaks.push(refine(times, series, b));
            }
        }
    }
    Ok(peaks)
}

fn refine(times: &[f64], y: &[f64], k: usize) -> f64 {
    if k == 0 || k + 1 >= y.len() {
        return times[k];
    }
    let (a, b, c) = (y[k - 1], y[k], y[k + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-300 {
        return times[k];
    }
    let shift = 0.5 * (a - c) / denom;
    let dt = times[k + 1] - times[k];
    times[k] + shift.clamp(-1.0, 1.0) * dt
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub spectra: Option<SpectrumComparison>,
    pub fidelity: Option<FidelityTrace>,
    pub scaling: Option<ScalingFit>,
    pub deviation: Option<DeviationReport>,
    pub guards: Vec<EliminatedTransition>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::BasisLabel;
    use crate::models::{build_dicke, build_spin_in_field, DickeSpec, SpinInFieldSpec};

    #[test]
    fn resonant_jaynes_cummings() {
        let g = 0.1;
        let m = build_dicke(&DickeSpec::from_detuning(0.0, g, 1, 4)).unwrap();
        let i = m.space.index_of(&BasisLabel { photons: vec![0], occupations: vec![0, 1] }).unwrap();
        let psi = OperatorMatrix::basis_state(&m.space, i).unwrap();
        let times = linspace(0.0, 100.0, 2001);
        let mut traj = evolve(&m.hint, &psi, &times).unwrap();
        traj.add_observable("Pe", &m.population(2).unwrap());
        for (t, p) in times.iter().zip(traj.observable("Pe").unwrap()) {
            assert!((p - (g * t).cos().powi(2)).abs() < 1e-10);
        }
        assert!(traj.norm_drift() < 1e-12);
        assert!((traj.states[0].clone() - psi).norm() < 1e-14);
        let f = effective_frequency(&traj, "Pe").unwrap();
        assert!((f - g / std::f64::consts::PI).abs() < 1e-5, "{f}");
    }

    #[test]
    fn eigenstates_only_pick_up_phases() {
        let m = build_spin_in_field(&SpinInFieldSpec { omega: 1.0, g: 0.0, atoms: 2 }).unwrap();
        let psi = OperatorMatrix::basis_state(&m.space, 1).unwrap();
        let traj = evolve(&m.hint, &psi, &[0.0, 1.0, 7.5]).unwrap();
        for s in &traj.states {
            assert!((fidelity(s, &psi).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn evolve_guards() {
        let m = build_dicke(&DickeSpec::from_detuning(0.3, 0.1, 1, 2)).unwrap();
        let a = crate::hilbert::annihilator(&m.space, 0).unwrap();
        let psi = OperatorMatrix::basis_state(&m.space, 0).unwrap();
        assert!(matches!(evolve(&a, &psi, &[1.0]), Err(Error::NotHermitian { .. })));
        assert!(evolve(&m.hint, &(psi.clone() * Complex64::new(2.0, 0.0)), &[1.0]).is_err());
    }

    #[test]
    fn fidelity_properties() {
        let m = build_dicke(&DickeSpec::from_detuning(0.3, 0.1, 1, 2)).unwrap();
        let a = OperatorMatrix::basis_state(&m.space, 0).unwrap();
        let b = OperatorMatrix::basis_state(&m.space, 1).unwrap();
        assert_eq!(fidelity(&a, &a).unwrap(), 1.0);
        assert_eq!(fidelity(&a, &b).unwrap(), 0.0);
        let phased = &a * Complex64::new(0.0, 1.0).exp();
        assert!((fidelity(&a, &phased).unwrap() - 1.0).abs() < 1e-15);
        assert!(fidelity(&a, &StateVector::zeros(3)).is_err());
    }

    #[test]
    fn spin_spectrum_error_example() {
        let (w, g) = (1.0, 0.1);
        let m = build_spin_in_field(&SpinInFieldSpec { omega: w, g, atoms: 1 }).unwrap();
        let eff = m.algebras[0].x3.scale(w + 2.0 * g * g / w);
        let block = Block { key: vec![], indices: vec![0, 1], touches_truncation: false };
        let cmp = compare_spectra(&m.hint, &eff, &[block]).unwrap();
        let want = (w * ((1.0f64 + 4.0 * g * g).sqrt() - 1.0 - 2.0 * g * g)).abs() / 2.0;
        assert!((cmp.max_error - want).abs() < 1e-15);
        assert!((want - 1.0e-4).abs() < 5e-6);
        let same = compare_spectra(&m.hint, &m.hint, &m.blocks().unwrap_or_default()).unwrap();
        assert_eq!(same.max_error, 0.0);
    }

    #[test]
    fn block_violation_detected() {
        let m = build_dicke(&DickeSpec::from_detuning(1.0, 0.1, 1, 3)).unwrap();
        let blocks = m.blocks().unwrap();
        let a = crate::hilbert::annihilator(&m.space, 0).unwrap();
        let bad = a.add(&a.adjoint()).unwrap();
        assert!(matches!(compare_spectra(&m.hint, &bad, &blocks), Err(Error::BlockViolation { .. })));
    }

    #[test]
    fn dicke_block_error_is_fourth_order() {
        let (d, g) = (1.0, 0.02);
        let m = build_dicke(&DickeSpec::from_detuning(d, g, 1, 3)).unwrap();
        let eff = crate::rotations::effective_su2(&m.algebras[0], d, g).unwrap();
        let blocks: Vec<Block> = m.blocks().unwrap().into_iter().filter(|b| b.key == vec![0.5]).collect();
        let cmp = compare_spectra(&m.hint, &eff, &blocks).unwrap();
        assert!(cmp.max_error <= 2.0 * g.powi(4) / d.powi(3), "{}", cmp.max_error);
    }

    #[test]
    fn scaling_fit_recovers_power() {
        let grid = geometric_grid(0.1, 0.5, 3);
        let fit = scaling_study(&grid, |e| Ok(3.0 * e.powi(4) * (1.0 + e))).unwrap();
        assert!((fit.order.unwrap() - 4.0).abs() < 0.2);
        let sat = scaling_study(&grid, |_| Ok(1e-16)).unwrap();
        assert!(sat.saturated && sat.order.is_none());
        assert!(scaling_study(&grid[..2], Ok).is_err());
        assert!(scaling_study(&[0.1, 0.05, 0.01], Ok).is_err());
    }

    #[test]
    fn frequency_rejects_flat_series() {
        let times = linspace(0.0, 1.0, 11);
        assert!(matches!(series_frequency(&times, &[0.5; 11]), Err(Error::NotOscillatory(_))));
        let sine: Vec<f64> = times.iter().map(|t| (2.0 * std::f64::consts::PI * 0.3 * t).sin()).collect();
        assert!(series_frequency(&times, &sine).is_err());
    }
}
