//! (J, γ) scans, steady-state classification, critical rates and power-law fits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::meanfield::{self, MeanfieldRunOptions};
use crate::model::{CouplingModel, LatticeParams};
use crate::record::{InitialCondition, SteadyStateRecord};
use crate::twomode::{self, RateModelParams, TwoModeRunOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Superfluid,
    Bistable,
    Resistive,
}

impl Regime {
    fn rank(self) -> u8 {
        match self {
            Regime::Superfluid => 0,
            Regime::Bistable => 1,
            Regime::Resistive => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub high: f64,
    pub agree: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { high: 0.9, agree: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub j_coupling: f64,
    pub gamma: f64,
    pub label: Regime,
    pub full: SteadyStateRecord,
    pub empty: SteadyStateRecord,
}

/// Superfluid if both fillings reach `high`, Bistable if they differ by at
/// least `agree`, Resistive otherwise. Failed runs carry no filling and are
/// rejected.
pub fn classify(full: &SteadyStateRecord, empty: &SteadyStateRecord, th: &Thresholds) -> Result<PhasePoint> {
    if full.j_coupling != empty.j_coupling || full.gamma != empty.gamma {
        return Err(Error::Pairing(format!(
            "full run at (J, γ) = ({}, {}), empty run at ({}, {})",
            full.j_coupling, full.gamma, empty.j_coupling, empty.gamma
        )));
    }
    let (f, e) = (full.filling_ratio, empty.filling_ratio);
    if !f.is_finite() || !e.is_finite() {
        return Err(Error::domain(format!(
            "cannot classify (J, γ) = ({}, {}): a run has no filling",
            full.j_coupling, full.gamma
        )));
    }
    let label = if f >= th.high && e >= th.high {
        Regime::Superfluid
    } else if (f - e).abs() >= th.agree {
        Regime::Bistable
    } else {
        Regime::Resistive
    };
    Ok(PhasePoint {
        j_coupling: full.j_coupling,
        gamma: full.gamma,
        label,
        full: full.clone(),
        empty: empty.clone(),
    })
}

/// A bracketed critical rate with half the bracket as uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalRate {
    pub value: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CriticalRates {
    pub gamma_rb: Option<CriticalRate>,
    pub gamma_sf: Option<CriticalRate>,
    pub gamma_csd: Option<CriticalRate>,
}

impl CriticalRates {
    /// γ_RB ≤ γ_CSD ≤ γ_SF within the stated uncertainties, when all exist.
    pub fn is_ordered(&self) -> Option<bool> {
        let (rb, csd, sf) = (self.gamma_rb?, self.gamma_csd?, self.gamma_sf?);
        let le = |a: CriticalRate, b: CriticalRate| a.value <= b.value + a.uncertainty + b.uncertainty;
        Some(le(rb, csd) && le(csd, sf))
    }
}

/// First change of `cond` along the sorted γ list, as a bracket midpoint.
fn first_change(gammas: &[f64], cond: &[bool]) -> Option<CriticalRate> {
    (1..cond.len()).find(|&k| cond[k] != cond[k - 1]).map(|k| CriticalRate {
        value: 0.5 * (gammas[k - 1] + gammas[k]),
        uncertainty: 0.5 * (gammas[k] - gammas[k - 1]),
    })
}

/// Critical rates along one fixed-J line. `tau_curve` holds (γ, τ) on the
/// empty branch; γ_CSD is its argmax when that is interior.
pub fn extract_critical_rates(
    points: &[PhasePoint],
    tau_curve: &[(f64, Option<f64>)],
    th: &Thresholds,
) -> Result<CriticalRates> {
    if points.windows(2).any(|w| !(w[0].gamma < w[1].gamma)) {
        return Err(Error::domain("phase points must be sorted by ascending γ"));
    }
    let gammas: Vec<f64> = points.iter().map(|p| p.gamma).collect();
    let refilled: Vec<bool> = points.iter().map(|p| p.empty.filling_ratio >= th.high).collect();
    let full_kept: Vec<bool> = points.iter().map(|p| p.full.filling_ratio >= th.high).collect();
    // the rate only counts if the branch started full
    let gamma_rb = if refilled.first() == Some(&true) {
        first_change(&gammas, &refilled)
    } else {
        None
    };
    let gamma_sf = if full_kept.first() == Some(&true) {
        first_change(&gammas, &full_kept)
    } else {
        None
    };
    Ok(CriticalRates {
        gamma_rb,
        gamma_sf,
        gamma_csd: tau_argmax(tau_curve),
    })
}

fn tau_argmax(tau_curve: &[(f64, Option<f64>)]) -> Option<CriticalRate> {
    let valid: Vec<(usize, f64)> = tau_curve
        .iter()
        .enumerate()
        .filter_map(|(k, (_, t))| t.filter(|v| v.is_finite()).map(|v| (k, v)))
        .collect();
    let &(k, _) = valid.iter().max_by(|a, b| a.1.total_cmp(&b.1))?;
    if k == 0 || k + 1 == tau_curve.len() {
        return None;
    }
    let g = |i: usize| tau_curve[i].0;
    Some(CriticalRate {
        value: g(k),
        uncertainty: 0.5 * (g(k + 1) - g(k - 1)) * 0.5,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub amplitude: f64,
    pub exponent: f64,
    pub exponent_stderr: f64,
}

/// Least squares on log y = log a + b·log x.
pub fn fit_power_law(pairs: &[(f64, f64)]) -> Result<PowerLawFit> {
    if pairs.len() < 3 {
        return Err(Error::domain(format!("need at least 3 pairs, got {}", pairs.len())));
    }
    for &(x, y) in pairs {
        ensure_finite("x", x)?;
        ensure_finite("y", y)?;
        if x <= 0.0 || y <= 0.0 {
            return Err(Error::domain(format!("power-law fit needs positive values, got ({x}, {y})")));
        }
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("power-law fit needs at least two distinct x"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    Ok(PowerLawFit {
        amplitude: a.exp(),
        exponent: b,
        exponent_stderr: (ssr / (n - 2.0) / sxx).sqrt(),
    })
}

/// Solver plus parameters; J and γ are overwritten per grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverTemplate {
    TwoMode {
        params: RateModelParams,
        run: TwoModeRunOptions,
    },
    Meanfield {
        lattice: LatticeParams,
        coupling: CouplingModel,
        run: MeanfieldRunOptions,
    },
}

impl SolverTemplate {
    /// Independent run from `ic`; errors become Failed records.
    pub fn run(&self, j: f64, gamma: f64, ic: InitialCondition) -> SteadyStateRecord {
        match self {
            SolverTemplate::TwoMode { params, run } => {
                let r = params
                    .with_j(j)
                    .and_then(|p| p.with_gamma(gamma))
                    .and_then(|p| twomode::steady_state(&p, ic, run));
                r.unwrap_or_else(|e| {
                    SteadyStateRecord::failed(
                        j,
                        gamma,
                        params.lattice.n0(),
                        ic,
                        crate::record::SolverKind::TwoMode,
                        e.to_string(),
                    )
                })
            }
            SolverTemplate::Meanfield { lattice, coupling, run } => {
                match lattice.with_j(j).and_then(|l| l.with_gamma(gamma)) {
                    Ok(l) => meanfield::steady_state(&l, coupling, ic, run),
                    Err(e) => SteadyStateRecord::failed(
                        j,
                        gamma,
                        lattice.n0(),
                        ic,
                        crate::record::SolverKind::Meanfield,
                        e.to_string(),
                    ),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSummary {
    pub j_coupling: f64,
    pub rates: CriticalRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub j_coupling: f64,
    pub gamma: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    /// sorted by (J, γ)
    pub points: Vec<PhasePoint>,
    pub lines: Vec<LineSummary>,
    /// grid points that could not be classified
    pub failures: Vec<Failure>,
    /// every run, sorted by (J, γ, initial condition), failed ones included
    pub records: Vec<SteadyStateRecord>,
}

/// Default J grid: 8 log-spaced points on [100, 600] s⁻¹.
pub fn default_j_grid() -> Vec<f64> {
    log_space(100.0, 600.0, 8)
}

/// Default γ/J grid: 40 points on [0, 8].
pub fn default_gamma_over_j_grid() -> Vec<f64> {
    (0..40).map(|k| 8.0 * k as f64 / 39.0).collect()
}

pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}

fn check_ascending(name: &str, g: &[f64]) -> Result<()> {
    if g.is_empty() {
        return Err(Error::domain(format!("{name} is empty")));
    }
    for &v in g {
        ensure_finite(name, v)?;
    }
    if g.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::domain(format!("{name} must be strictly ascending")));
    }
    Ok(())
}

/// Runs both initial conditions at every (J, γ = x·J) independently and in
/// parallel, then classifies each point and extracts critical rates per J.
pub fn build_phase_diagram(
    j_grid: &[f64],
    gamma_over_j: &[f64],
    template: &SolverTemplate,
    th: &Thresholds,
) -> Result<PhaseDiagram> {
    check_ascending("j_grid", j_grid)?;
    check_ascending("gamma_over_j", gamma_over_j)?;
    if j_grid[0] <= 0.0 || gamma_over_j[0] < 0.0 {
        return Err(Error::domain("grids must have J > 0 and γ >= 0"));
    }
    let items: Vec<(usize, usize, InitialCondition)> = (0..j_grid.len())
        .flat_map(|a| {
            (0..gamma_over_j.len())
                .flat_map(move |b| [(a, b, InitialCondition::Full), (a, b, InitialCondition::Empty)])
        })
        .collect();
    // collect keeps item order, so the output never depends on scheduling
    let records: Vec<SteadyStateRecord> = items
        .par_iter()
        .map(|&(a, b, ic)| {
            let j = j_grid[a];
            template.run(j, gamma_over_j[b] * j, ic)
        })
        .collect();

    let mut points = Vec::new();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (a, &j) in j_grid.iter().enumerate() {
        let mut line = Vec::new();
        let mut taus = Vec::new();
        for b in 0..gamma_over_j.len() {
            let k = 2 * (a * gamma_over_j.len() + b);
            let (full, empty) = (&records[k], &records[k + 1]);
            taus.push((empty.gamma, empty.tau));
            match classify(full, empty, th) {
                Ok(p) => line.push(p),
                Err(e) => failures.push(Failure {
                    j_coupling: j,
                    gamma: full.gamma,
                    message: failure_message(full, empty, &e),
                }),
            }
        }
        lines.push(LineSummary {
            j_coupling: j,
            rates: extract_critical_rates(&line, &taus, th)?,
        });
        points.extend(line);
    }
    Ok(PhaseDiagram {
        points,
        lines,
        failures,
        records,
    })
}

fn failure_message(full: &SteadyStateRecord, empty: &SteadyStateRecord, e: &Error) -> String {
    use crate::record::RunStatus::Failed;
    match (&full.status, &empty.status) {
        (Failed(m), _) => format!("full: {m}"),
        (_, Failed(m)) => format!("empty: {m}"),
        _ => e.to_string(),
    }
}

/// True when labels along each fixed-J line never step back from Resistive
/// toward Superfluid.
pub fn regimes_ordered(points: &[PhasePoint]) -> bool {
    let mut by_j: Vec<&PhasePoint> = points.iter().collect();
    by_j.sort_by(|a, b| a.j_coupling.total_cmp(&b.j_coupling).then(a.gamma.total_cmp(&b.gamma)));
    by_j.windows(2)
        .all(|w| w[0].j_coupling != w[1].j_coupling || w[0].label.rank() <= w[1].label.rank())
}

/// Two-mode template with the default closure and coupling for `lattice`.
pub fn two_mode_template(lattice: LatticeParams) -> Result<SolverTemplate> {
    Ok(SolverTemplate::TwoMode {
        params: RateModelParams::default_for(lattice)?,
        run: TwoModeRunOptions::default(),
    })
}
