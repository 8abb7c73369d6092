//! Config-driven front end: `run`, `list-scenarios`, `validate-config`.
//!
//! A run writes one report, CSV or JSON. CSV files carry `#` metadata lines
//! followed by a fixed header row per analysis kind; JSON reports are a
//! single object `{config, checks, data}`. Nothing in the data section
//! depends on the clock, the thread count or the environment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{verify_lambda_cross_relations, verify_su3_cross_relations};
use crate::blocks::Block;
use crate::dynamics::{evolve, fidelity_trace, fit_scaling, linspace};
use crate::error::{Error, Result};
use crate::hilbert::{number_operator, BasisLabel};
use crate::linalg::eigvalsh;
use crate::models::{ModelInstance, ModelSpec};
use crate::operator::{OperatorMatrix, StateVector};
use crate::rotations::{
    cascade_first_stage, closed_form_effective, coupling_table, elimination_generator, two_mode_xi, EffectiveForm,
    EffectiveHamiltonian, EffectiveScenario, Rotation, ScenarioId,
};
use crate::sweep;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "EFFHAM_OUTPUT_DIR";

pub const DEFAULT_MIN_ORDER: f64 = 3.5;
pub const DEFAULT_SAMPLES: usize = 200;
const RELATION_TOL: f64 = 1e-12;
const CONSERVATION_TOL: f64 = 1e-9;
const EXTRACTION_TOL: f64 = 0.1;
const MATRIX_ELEMENT_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    AlgebraCheck,
    Spectrum,
    Evolve,
    Couplings,
    Scaling,
    Effective,
}

impl Analysis {
    pub fn columns(&self) -> &'static [&'static str] {
        match self {
            Analysis::AlgebraCheck => &["relation", "residual", "tolerance"],
            Analysis::Spectrum => &["block_id", "index", "exact_ev", "eff_ev", "abs_err"],
            Analysis::Evolve => &["time", "observable", "value"],
            Analysis::Couplings => &["quantity", "label", "value"],
            Analysis::Scaling => &["epsilon", "metric", "block_id"],
            Analysis::Effective => &["row", "col", "row_label", "col_label", "printed_re", "printed_im", "corrected_re", "corrected_im"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn extension(&self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    #[serde(default)]
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

/// Either a basis label (`photons` and `occupations`) or the full list of
/// amplitudes as `[re, im]` pairs in basis order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photons: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupations: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<[f64; 2]>>,
}

impl InitialState {
    pub fn resolve(&self, model: &ModelInstance) -> Result<StateVector> {
        let space = &model.space;
        match (&self.photons, &self.occupations, &self.coefficients) {
            (Some(p), Some(o), None) => {
                let label = BasisLabel { photons: p.clone(), occupations: o.clone() };
                let idx = space
                    .index_of(&label)
                    .ok_or_else(|| Error::Config(format!("initial state {label} is not in the basis")))?;
                OperatorMatrix::basis_state(space, idx)
            }
            (None, None, Some(c)) => {
                if c.len() != space.dimension() {
                    return Err(Error::Config(format!(
                        "initial state has {} amplitudes, basis has {}",
                        c.len(),
                        space.dimension()
                    )));
                }
                let v = StateVector::from_iterator(c.len(), c.iter().map(|z| Complex64::new(z[0], z[1])));
                let norm = v.norm();
                if !(norm > 0.0) {
                    return Err(Error::Config("initial state has zero norm".into()));
                }
                Ok(v / Complex64::new(norm, 0.0))
            }
            _ => Err(Error::Config("initial state needs photons + occupations, or coefficients".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub analysis: Analysis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioId>,
    #[serde(default)]
    pub form: EffectiveForm,
    /// Rotation-angle grid `max |g/D|` for scaling runs, or a single angle
    /// the model couplings are rescaled to.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilon: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<TimeGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    /// Lowest acceptable fitted order in scaling runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_order: Option<f64>,
    /// Largest acceptable eigenvalue error in spectrum runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    pub model: ModelSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn scenario_id(&self) -> ScenarioId {
        self.scenario.unwrap_or(match self.model {
            ModelSpec::SpinInField(_) => ScenarioId::Su2Generic,
            ModelSpec::Dicke(_) => ScenarioId::DickeDispersive,
            ModelSpec::Xi3(_) => ScenarioId::XiFarLevel,
            ModelSpec::Lambda3(_) => ScenarioId::LambdaDispersive,
            ModelSpec::CascadeN(_) => ScenarioId::CascadeFirstStage,
            ModelSpec::TwoModeFour(_) => ScenarioId::TwoModeFour,
        })
    }

    /// Static checks that need no numerics beyond building the model.
    pub fn validate(&self) -> Result<()> {
        let id = self.scenario_id();
        if !id.model_kinds().contains(&self.model.kind()) {
            return Err(Error::UnsupportedScenario { scenario: id.to_string(), model: self.model.kind().to_string() });
        }
        if self.epsilon.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(Error::Config("epsilon values must lie in (0, 1)".into()));
        }
        match self.analysis {
            Analysis::Scaling if self.epsilon.len() < 3 => {
                return Err(Error::Config("scaling needs an epsilon grid with at least 3 points".into()));
            }
            Analysis::Evolve => {
                let t = self.time.as_ref().ok_or_else(|| Error::Config("evolve needs a [time] grid".into()))?;
                if t.points < 2 || !(t.stop > t.start) {
                    return Err(Error::Config("time grid needs stop > start and at least 2 points".into()));
                }
                if self.initial.is_none() {
                    return Err(Error::Config("evolve needs an [initial] state".into()));
                }
            }
            Analysis::Couplings
                if !matches!(self.model, ModelSpec::CascadeN(_) | ModelSpec::TwoModeFour(_)) =>
            {
                return Err(Error::Config("couplings needs a cascadeN or two-mode-four model".into()));
            }
            _ => {}
        }
        if self.analysis != Analysis::Scaling && self.epsilon.len() > 1 {
            return Err(Error::Config("a single epsilon is expected outside scaling runs".into()));
        }
        let model = self.model.build()?;
        if let Some(init) = &self.initial {
            init.resolve(&model)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Reported, never fails a run.
    Info,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        let status = if value <= threshold { CheckStatus::Pass } else { CheckStatus::Fail };
        Self { name: name.into(), status, value, threshold: Some(threshold), detail: detail.into() }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        let status = if value >= threshold { CheckStatus::Pass } else { CheckStatus::Fail };
        Self { name: name.into(), status, value, threshold: Some(threshold), detail: detail.into() }
    }

    fn info(name: impl Into<String>, value: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), status: CheckStatus::Info, value, threshold: None, detail: detail.into() }
    }

    pub fn summary_line(&self) -> String {
        let status = match self.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Info => "INFO",
        };
        let bound = self.threshold.map(|t| format!(" (threshold {})", num(t))).unwrap_or_default();
        format!("{status} {}: {}{bound} {}", self.name, num(self.value), self.detail).trim_end().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) => num(*x),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub checks: Vec<CheckResult>,
    pub data: Table,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn to_csv(&self, timestamp: Option<u64>) -> String {
        let mut out = String::new();
        let cfg = &self.config;
        let _ = writeln!(out, "# effham report");
        if let Some(t) = timestamp {
            let _ = writeln!(out, "# generated-unix: {t}");
        }
        let _ = writeln!(out, "# model: {}", cfg.model.kind());
        let _ = writeln!(out, "# analysis: {}", serde_plain(&cfg.analysis));
        let _ = writeln!(out, "# scenario: {} ({})", cfg.scenario_id(), serde_plain(&cfg.form));
        for c in &self.checks {
            let _ = writeln!(out, "# check {}", c.summary_line());
        }
        let _ = writeln!(out, "{}", self.data.columns.join(","));
        for row in &self.data.rows {
            let cells: Vec<String> = row.iter().map(Cell::csv).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Scientific notation with 13 significant digits.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.12e}")
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Largest `|ε|` among the transitions a scenario eliminates.
fn eliminated_angle(e: &EffectiveHamiltonian) -> f64 {
    e.eliminated.iter().map(|t| t.epsilon.abs()).fold(0.0, f64::max)
}

fn guard_checks(e: &EffectiveHamiltonian) -> Vec<CheckResult> {
    e.eliminated
        .iter()
        .map(|t| {
            CheckResult::at_most(
                format!("guard {}", t.label),
                t.dispersive_ratio,
                crate::models::DISPERSIVE_LIMIT,
                format!("A|g|√(n_max+1)/|D| with g={} D={}", num(t.coupling), num(t.detuning)),
            )
        })
        .collect()
}

/// Apply `--epsilon` style rescaling: the model couplings are scaled so the
/// largest eliminated rotation angle equals `target`.
fn rescale_to_angle(spec: &ModelSpec, scenario: ScenarioId, target: f64) -> Result<ModelSpec> {
    let base = spec.build()?;
    let e = closed_form_effective(&base, EffectiveScenario::corrected(scenario))?;
    let angle = eliminated_angle(&e);
    if !(angle > 0.0 && angle.is_finite()) {
        return Err(Error::Config("cannot rescale a model without coupling to an eliminated transition".into()));
    }
    Ok(spec.scaled_couplings(target / angle))
}

struct BlockRow {
    block_id: String,
    exact: f64,
    effective: f64,
}

/// Eigenvalues of the effective form on the trusted part of each block,
/// paired with the nearest unused exact eigenvalue of the whole block.
fn block_spectra(model: &ModelInstance, e: &EffectiveHamiltonian) -> Result<Vec<BlockRow>> {
    let trusted: std::collections::BTreeSet<usize> = e.trusted().into_iter().collect();
    let h_eff = e.selected();
    let blocks: Vec<Block> = model.blocks()?;
    let per: Vec<Vec<BlockRow>> = sweep::map(&blocks, |b| {
        if b.touches_truncation {
            return vec![];
        }
        let inside: Vec<usize> = b.indices.iter().copied().filter(|i| trusted.contains(i)).collect();
        if inside.is_empty() {
            return vec![];
        }
        let exact = eigvalsh(&model.hint.restrict(&b.indices));
        let eff = eigvalsh(&h_eff.restrict(&inside));
        let mut used = vec![false; exact.len()];
        eff.iter()
            .map(|&ev| {
                let k = (0..exact.len())
                    .filter(|&k| !used[k])
                    .min_by(|&a, &c| (exact[a] - ev).abs().total_cmp(&(exact[c] - ev).abs()))
                    .expect("block at least as large as its trusted part");
                used[k] = true;
                BlockRow { block_id: b.id(), exact: exact[k], effective: ev }
            })
            .collect()
    });
    Ok(per.into_iter().flatten().collect())
}

fn run_spectrum(cfg: &RunConfig, model: &ModelInstance) -> Result<(Vec<CheckResult>, Table)> {
    let e = closed_form_effective(model, EffectiveScenario { id: cfg.scenario_id(), form: cfg.form })?;
    let mut checks = guard_checks(&e);
    let rows = block_spectra(model, &e)?;
    let worst = rows.iter().map(|r| (r.exact - r.effective).abs()).fold(0.0, f64::max);
    checks.push(CheckResult::at_least("compared eigenvalues", rows.len() as f64, 1.0, ""));
    match cfg.tolerance {
        Some(tol) => checks.push(CheckResult::at_most("max eigenvalue error", worst, tol, "")),
        None => checks.push(CheckResult::info("max eigenvalue error", worst, "")),
    }
    checks.push(CheckResult::info("printed vs corrected", e.deviation.norm_difference, "Frobenius norm on trusted states"));
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    let data = rows
        .iter()
        .map(|r| {
            let k = counters.entry(r.block_id.clone()).or_default();
            let row = vec![
                Cell::from(r.block_id.clone()),
                Cell::from(*k),
                r.exact.into(),
                r.effective.into(),
                (r.exact - r.effective).abs().into(),
            ];
            *k += 1;
            row
        })
        .collect();
    Ok((checks, table(Analysis::Spectrum, data)))
}

fn run_scaling(cfg: &RunConfig, _model: &ModelInstance) -> Result<(Vec<CheckResult>, Table)> {
    let scenario = EffectiveScenario { id: cfg.scenario_id(), form: cfg.form };
    let per_eps: Vec<(Vec<BlockRow>, Vec<CheckResult>)> = sweep::try_map(&cfg.epsilon, |&eps| {
        let spec = rescale_to_angle(&cfg.model, scenario.id, eps)?;
        let m = spec.build()?;
        let e = closed_form_effective(&m, scenario)?;
        Ok::<_, Error>((block_spectra(&m, &e)?, guard_checks(&e)))
    })?;
    let mut data = Vec::new();
    let mut maxima = Vec::new();
    for (eps, (rows, _)) in cfg.epsilon.iter().zip(&per_eps) {
        let mut per_block: BTreeMap<String, f64> = BTreeMap::new();
        for r in rows {
            let err = (r.exact - r.effective).abs();
            let slot = per_block.entry(r.block_id.clone()).or_insert(0.0);
            *slot = slot.max(err);
        }
        let worst = per_block.values().copied().fold(0.0, f64::max);
        for (id, err) in per_block {
            data.push(vec![Cell::from(*eps), err.into(), id.into()]);
        }
        data.push(vec![Cell::from(*eps), worst.into(), "max".into()]);
        maxima.push(worst);
    }
    // guards matter at the largest angle of the grid
    let largest = cfg.epsilon.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
    let mut checks = per_eps[largest].1.clone();
    let fit = fit_scaling(&cfg.epsilon, &maxima)?;
    let min_order = cfg.min_order.unwrap_or(DEFAULT_MIN_ORDER);
    let detail = format!("slope {} ± band [{}, {}], residual {}", num(fit.slope), num(fit.band.0), num(fit.band.1), num(fit.residual));
    match fit.order {
        Some(p) => checks.push(CheckResult::at_least("fitted order", p, min_order, detail)),
        None => checks.push(CheckResult {
            name: "fitted order".into(),
            status: CheckStatus::Fail,
            value: fit.slope,
            threshold: Some(min_order),
            detail: if fit.saturated { "metric saturated at the numerical floor".into() } else { detail },
        }),
    }
    Ok((checks, table(Analysis::Scaling, data)))
}

fn run_effective(cfg: &RunConfig, model: &ModelInstance) -> Result<(Vec<CheckResult>, Table)> {
    let e = closed_form_effective(model, EffectiveScenario { id: cfg.scenario_id(), form: cfg.form })?;
    let mut checks = guard_checks(&e);
    checks.push(CheckResult::info("printed vs corrected", e.deviation.norm_difference, "Frobenius norm on trusted states"));
    checks.push(CheckResult::info("printed vs corrected, shifts removed", e.deviation.shift_free_difference, ""));
    let trusted = e.trusted();
    let (p, c) = (e.printed.matrix(), e.corrected.matrix());
    let mut data = Vec::new();
    for &col in &trusted {
        for &row in &trusted {
            let (pv, cv) = (p[(row, col)], c[(row, col)]);
            if pv.norm().max(cv.norm()) <= MATRIX_ELEMENT_FLOOR {
                continue;
            }
            data.push(vec![
                Cell::from(row),
                Cell::from(col),
                Cell::from(model.space.basis()[row].to_string()),
                Cell::from(model.space.basis()[col].to_string()),
                pv.re.into(),
                pv.im.into(),
                cv.re.into(),
                cv.im.into(),
            ]);
        }
    }
    data.sort_by_key(|r| match (&r[0], &r[1]) {
        (Cell::Int(a), Cell::Int(b)) => (*a, *b),
        _ => unreachable!(),
    });
    Ok((checks, table(Analysis::Effective, data)))
}

fn run_algebra_check(_cfg: &RunConfig, model: &ModelInstance) -> Result<(Vec<CheckResult>, Table)> {
    let mut entries: Vec<(String, f64)> = Vec::new();
    let names = ["[X3,X+]-X+", "[X3,X-]+X-", "X- - (X+)†", "[P,X3]"];
    for alg in &model.algebras {
        for (n, r) in names.iter().zip(alg.invariant_residuals()) {
            entries.push((format!("{}:{n}", alg.name), r));
        }
    }
    let cross = match &model.spec {
        ModelSpec::Xi3(_) => Some(verify_su3_cross_relations(
            model.algebra("12").expect("Ξ algebra 12"),
            model.algebra("23").expect("Ξ algebra 23"),
            model.auxiliary("Y+13").expect("Ξ auxiliary Y+13"),
        )?),
        ModelSpec::Lambda3(_) => Some(verify_lambda_cross_relations(
            model.algebra("13").expect("Λ algebra 13"),
            model.algebra("23").expect("Λ algebra 23"),
            model.auxiliary("S+12").expect("Λ auxiliary S+12"),
            model.auxiliary("Y12").expect("Λ auxiliary Y12"),
        )?),
        _ => None,
    };
    if let Some(rep) = cross {
        entries.extend(rep.entries.into_iter().map(|e| (e.name, e.residual)));
    }
    entries.push(("conserved quantities".into(), model.conservation_residual()));
    let checks = entries.iter().map(|(n, r)| CheckResult::at_most(n.clone(), *r, RELATION_TOL, "")).collect();
    let data = entries.into_iter().map(|(n, r)| vec![Cell::from(n), r.into(), RELATION_TOL.into()]).collect();
    Ok((checks, table(Analysis::AlgebraCheck, data)))
}

fn run_evolve(cfg: &RunConfig, model: &ModelInstance) -> Result<(Vec<CheckResult>, Table)> {
    let grid = cfg.time.as_ref().ok_or_else(|| Error::Config("evolve needs a [time] grid".into()))?;
    let init = cfg.initial.as_ref().ok_or_else(|| Error::Config("evolve needs an [initial] state".into()))?;
    let psi0 = init.resolve(model)?;
    let times = linspace(grid.start, grid.stop, grid.points);
    let mut traj = evolve(&model.hint, &psi0, &times)?;
    let mut names = Vec::new();
    for mode in 0..model.space.modes().len() {
        let name = format!("photons_{}", ["a", "b", "c", "d"].get(mode).copied().unwrap_or("x"));
        traj.add_observable(&name, &number_operator(&model.space, mode)?);
        names.push(name);
    }
    for level in 1..=model.levels() {
        let name = format!("population_{level}");
        traj.add_observable(&name, &model.population(level)?);
        names.push(name);
    }
    for c in &model.conserved {
        let name = format!("conserved_{}", c.name);
        traj.add_observable(&name, &c.op);
        names.push(name);
    }
    let mut checks = vec![CheckResult::at_most("norm drift", traj.norm_drift(), CONSERVATION_TOL, "")];
    for c in &model.conserved {
        let series = traj.observable(&format!("conserved_{}", c.name)).expect("added above");
        let drift = series.iter().map(|x| (x - series[0]).abs()).fold(0.0, f64::max);
        checks.push(CheckResult::at_most(format!("drift of {}", c.name), drift, CONSERVATION_TOL, ""));
    }
    let mut extra: Vec<(String, Vec<f64>)> = Vec::new();
    if cfg.scenario.is_some() {
        let e = closed_form_effective(model, EffectiveScenario { id: cfg.scenario_id(), form: cfg.form })?;
        checks.extend(guard_checks(&e));
        let trace = fidelity_trace(&model.hint, e.selected(), &e.rotation, &psi0, &times)?;
        checks.push(CheckResult::info("max infidelity, rotated frame", trace.max_rotated(), ""));
        checks.push(CheckResult::info("max infidelity, lab frame", trace.max_naive(), ""));
        extra.push(("infidelity_rotated".into(), trace.rotated.clone()));
        extra.push(("infidelity_naive".into(), trace.naive.clone()));
    }
    let mut data = Vec::new();
    for (k, t) in times.iter().enumerate() {
        for n in &names {
            data.push(vec![Cell::from(*t), Cell::from(n.clone()), traj.observable(n).expect("added above")[k].into()]);
        }
        for (n, series) in &extra {
            data.push(vec![Cell::from(*t), Cell::from(n.clone()), series[k].into()]);
        }
    }
    Ok((checks, table(Analysis::Evolve, data)))
}

fn run_couplings(cfg: &RunConfig, model: &ModelInstance) -> Result<(Vec<CheckResult>, Table)> {
    let mut checks = Vec::new();
    let mut data: Vec<Vec<Cell>> = Vec::new();
    match &model.spec {
        ModelSpec::CascadeN(spec) => {
            let d = spec.detunings();
            let levels = spec.levels();
            let t = coupling_table(&spec.couplings, &d, levels - 1)?;
            for (i, e) in t.epsilon.iter().enumerate() {
                data.push(vec!["epsilon".into(), format!("{}", i + 1).into(), (*e).into()]);
            }
            for n in 2..levels {
                for i in 1..=(levels - n) {
                    if let Some(l) = t.lambda(i, n) {
                        data.push(vec![format!("lambda^({n})").into(), format!("{i}").into(), l.into()]);
                    }
                }
            }
            for (i, a) in t.alpha2.iter().enumerate() {
                if let Some(a) = a {
                    data.push(vec!["alpha^(2)".into(), format!("{}", i + 1).into(), (*a).into()]);
                }
            }
            for (i, row) in t.beta.iter().enumerate() {
                for (j, b) in row.iter().enumerate() {
                    if let Some(b) = b {
                        data.push(vec!["beta".into(), format!("{},{}", i + 1, j + 1).into(), (*b).into()]);
                    }
                }
            }
            let labels: Vec<&str> = model.transitions.iter().map(|t| t.label.as_str()).collect();
            let (_, eliminated) = elimination_generator(model, &labels)?;
            let mut guards_ok = true;
            for el in &eliminated {
                let ok = el.epsilon.abs() < crate::models::DISPERSIVE_LIMIT;
                guards_ok &= ok;
                checks.push(CheckResult::at_most(
                    format!("rotation angle {}", el.label),
                    el.epsilon.abs(),
                    crate::models::DISPERSIVE_LIMIT,
                    "",
                ));
            }
            if guards_ok {
                let dec = cascade_first_stage(model)?;
                for term in &dec.terms {
                    let label = format!("{}->{} ({} photons)", term.lower, term.upper, term.photons);
                    data.push(vec!["multiphoton predicted".into(), label.clone().into(), term.predicted.into()]);
                    data.push(vec!["multiphoton extracted".into(), label.clone().into(), term.extracted.into()]);
                    checks.push(CheckResult::at_most(
                        format!("multiphoton {label}"),
                        term.relative_error,
                        EXTRACTION_TOL,
                        format!("reference {}", term.reference_state),
                    ));
                }
                for r in &dec.hnd_resonances {
                    checks.push(CheckResult::info(
                        format!("h_nd pair {}", r.pair),
                        r.mismatch,
                        format!("{}{}", r.condition, if r.resonant { ", resonant" } else { "" }),
                    ));
                }
            }
            checks.push(randomized_recurrence(cfg, levels));
        }
        ModelSpec::TwoModeFour(spec) => {
            let d = spec.detunings();
            let xi = two_mode_xi(&spec.g_a, &spec.g_b, &d)?;
            data.push(vec!["xi_ab predicted".into(), "2->4".into(), xi.into()]);
            let labels: Vec<&str> = model.transitions.iter().map(|t| t.label.as_str()).collect();
            let (s, eliminated) = elimination_generator(model, &labels)?;
            for el in &eliminated {
                checks.push(CheckResult::at_most(
                    format!("guard {}", el.label),
                    el.dispersive_ratio,
                    crate::models::DISPERSIVE_LIMIT,
                    "",
                ));
            }
            let rotated = Rotation::from_generator(s)?.apply(&model.hint)?;
            let from = vec![spec.atoms - 1, 1, 0, 0];
            let to = vec![spec.atoms - 1, 0, 0, 1];
            let i = model.space.index_of(&BasisLabel { photons: vec![1, 1], occupations: from });
            let f = model.space.index_of(&BasisLabel { photons: vec![0, 0], occupations: to });
            if let (Some(i), Some(f)) = (i, f) {
                let extracted = rotated.matrix()[(f, i)].re;
                data.push(vec!["xi_ab extracted".into(), "2->4".into(), extracted.into()]);
                let rel = ((extracted - xi) / xi).abs();
                let mismatch = d[3] - d[1] - spec.delta();
                if mismatch.abs() < 1e-12 {
                    checks.push(CheckResult::at_most("xi_ab", rel, EXTRACTION_TOL, ""));
                } else {
                    checks.push(CheckResult::info("xi_ab", rel, format!("off resonance by {}", num(mismatch))));
                }
            }
        }
        _ => return Err(Error::Config("couplings needs a cascadeN or two-mode-four model".into())),
    }
    Ok((checks, table(Analysis::Couplings, data)))
}

/// Random cascades: the recurrence against the direct second-order form
/// `λ_i^(2) = g_i g_{i+1} [1/(Δ_{i+2} − Δ_{i+1}) − 1/(Δ_{i+1} − Δ_i)]`.
fn randomized_recurrence(cfg: &RunConfig, levels: usize) -> CheckResult {
    let seed = cfg.seed.unwrap_or(0);
    let samples = cfg.samples.unwrap_or(DEFAULT_SAMPLES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < samples {
        let g: Vec<f64> = (0..levels - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut d: Vec<f64> = vec![0.0];
        d.extend((1..levels).map(|_| rng.random_range(-5.0..5.0)));
        if d.windows(2).any(|w| (w[1] - w[0]).abs() < 0.1) {
            continue;
        }
        done += 1;
        let t = match coupling_table(&g, &d, 2) {
            Ok(t) => t,
            Err(_) => continue,
        };
        for i in 1..levels - 1 {
            let want = g[i - 1] * g[i] * (1.0 / (d[i + 1] - d[i]) - 1.0 / (d[i] - d[i - 1]));
            let got = t.lambda(i, 2).unwrap_or(f64::NAN);
            let scale = want.abs().max(f64::MIN_POSITIVE);
            worst = worst.max((got - want).abs() / scale);
        }
    }
    CheckResult::at_most("randomized recurrence", worst, 1e-12, format!("{samples} draws, seed {seed}"))
}

fn table(kind: Analysis, rows: Vec<Vec<Cell>>) -> Table {
    Table { columns: kind.columns().iter().map(|s| s.to_string()).collect(), rows }
}

/// Run one configuration. Errors map to exit code 2, failed checks to 1.
pub fn execute(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let (checks, data) = match cfg.analysis {
        Analysis::AlgebraCheck => run_algebra_check(cfg, &model)?,
        Analysis::Spectrum => run_spectrum(cfg, &model)?,
        Analysis::Evolve => run_evolve(cfg, &model)?,
        Analysis::Couplings => run_couplings(cfg, &model)?,
        Analysis::Scaling => run_scaling(cfg, &model)?,
        Analysis::Effective => run_effective(cfg, &model)?,
    };
    Ok(Report { config: cfg.clone(), checks, data })
}

#[derive(Debug, Parser)]
#[command(name = "effham", version, about = "Effective Hamiltonians from small nonlinear rotations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the analysis described by a config file.
    Run {
        config: PathBuf,
        /// Report path; defaults to `<config stem>.<format>` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Rotation angle(s), comma separated; replaces the config grid.
        #[arg(long, value_delimiter = ',')]
        epsilon: Option<Vec<f64>>,
        /// Seed for randomized checks.
        #[arg(long)]
        seed: Option<u64>,
        /// Default output directory.
        #[arg(long, env = OUTPUT_DIR_ENV)]
        output_dir: Option<PathBuf>,
        /// Add a `#` timestamp line to CSV reports.
        #[arg(long)]
        timestamp: bool,
    },
    /// Print every effective-Hamiltonian scenario with its formula and guards.
    ListScenarios,
    /// Parse and check a config file without running it.
    ValidateConfig { config: PathBuf },
}

pub fn scenario_table() -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario\tmodels\tformula\tguards");
    for id in ScenarioId::ALL {
        let _ = writeln!(out, "{id}\t{}\t{}\t{}", id.model_kinds().join(","), id.formula(), id.guards());
    }
    out
}

fn apply_overrides(mut cfg: RunConfig, epsilon: Option<Vec<f64>>, seed: Option<u64>, format: Option<Format>) -> Result<RunConfig> {
    if let Some(eps) = epsilon {
        cfg.epsilon = eps;
    }
    if seed.is_some() {
        cfg.seed = seed;
    }
    if format.is_some() {
        cfg.format = format;
    }
    if cfg.analysis != Analysis::Scaling {
        if let Some(&eps) = cfg.epsilon.first() {
            if cfg.epsilon.len() > 1 {
                return Err(Error::Config("a single epsilon is expected outside scaling runs".into()));
            }
            cfg.model = rescale_to_angle(&cfg.model, cfg.scenario_id(), eps)?;
            cfg.epsilon.clear();
        }
    }
    Ok(cfg)
}

fn output_path(cfg: &RunConfig, config_path: &Path, output: Option<PathBuf>, dir: Option<PathBuf>) -> (PathBuf, Format) {
    let path = output.or_else(|| cfg.output.clone());
    let format = cfg
        .format
        .or_else(|| path.as_ref().and_then(|p| p.extension()).filter(|e| *e == "json").map(|_| Format::Json))
        .unwrap_or(Format::Csv);
    let path = path.unwrap_or_else(|| {
        let stem = config_path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "report".into());
        dir.unwrap_or_else(|| PathBuf::from(".")).join(format!("{stem}.{}", format.extension()))
    });
    (path, format)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::ListScenarios => {
            print!("{}", scenario_table());
            EXIT_OK
        }
        Command::ValidateConfig { config } => match RunConfig::load(&config).and_then(|c| c.validate()) {
            Ok(()) => {
                println!("{}: ok", config.display());
                EXIT_OK
            }
            Err(e) => {
                eprintln!("{}: {e}", config.display());
                EXIT_USAGE
            }
        },
        Command::Run { config, output, format, epsilon, seed, output_dir, timestamp } => {
            let cfg = match RunConfig::load(&config).and_then(|c| apply_overrides(c, epsilon, seed, format)) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_USAGE;
                }
            };
            let report = match execute(&cfg) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_USAGE;
                }
            };
            for c in &report.checks {
                println!("{}", c.summary_line());
            }
            let (path, format) = output_path(&cfg, &config, output, output_dir);
            let text = match format {
                Format::Csv => {
                    let t = timestamp.then(|| {
                        std::time::SystemTime::now()
                            .duration_since(std::time::UNIX_EPOCH)
                            .map(|d| d.as_secs())
                            .unwrap_or(0)
                    });
                    report.to_csv(t)
                }
                Format::Json => report.to_json(),
            };
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                if let Err(e) = std::fs::create_dir_all(parent) {
                    eprintln!("error: cannot create {}: {e}", parent.display());
                    return EXIT_USAGE;
                }
            }
            if let Err(e) = std::fs::write(&path, text) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return EXIT_USAGE;
            }
            println!("wrote {}", path.display());
            if report.passed() { EXIT_OK } else { EXIT_CHECK_FAILED }
        }
    }
}
