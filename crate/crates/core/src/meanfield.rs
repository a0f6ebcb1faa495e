//! Dissipative discrete nonlinear Schrödinger lattice.
//!
//! dψₙ/dt = i·J̃ₙ(ψₙ₋₁ + ψₙ₊₁) − i·U|ψₙ|²ψₙ − δₙₘ(γ/2)ψₙ with ħ = 1. The two
//! bonds touching the lossy site m carry J′(ΔN), ΔN = mean neighbour filling − Nₘ.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{CouplingModel, LatticeParams};
use crate::ode::{complex_as_real, real_as_complex, Dopri5, StepControl};
use crate::record::{InitialCondition, RunStatus, SolverKind, SteadyStateRecord};
use crate::twomode::settling_time;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Default seed fraction for an emptied lossy site.
pub const DEFAULT_SEED_FRACTION: f64 = 1e-3;
/// Default aggregate reservoir depletion at which a run aborts.
pub const DEFAULT_DEPLETION_LIMIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanfieldState {
    pub amplitudes: Vec<Complex64>,
    pub time: f64,
}

impl MeanfieldState {
    pub fn new(amplitudes: Vec<Complex64>, time: f64) -> Self {
        Self { amplitudes, time }
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn fillings(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|z| z.norm_sqr()).collect()
    }

    pub fn phases(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|z| z.arg()).collect()
    }

    pub fn filling(&self, site: usize) -> f64 {
        self.amplitudes[site].norm_sqr()
    }

    pub fn total_atoms(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Phase of site `a` minus phase of site `b`, wrapped to (−π, π].
    pub fn phase_difference(&self, a: usize, b: usize) -> f64 {
        (self.amplitudes[a] * self.amplitudes[b].conj()).arg()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochSteadyState {
    pub delta_phi: f64,
    pub quasi_momentum: f64,
    pub filling: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Boundary {
    /// Hard walls: the missing neighbour is dropped.
    #[default]
    Open,
    /// Edge magnitudes are held fixed; edge phases follow a virtual neighbour
    /// that continues the local phase gradient.
    ClampedEdges,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialKind {
    FullUniform,
    EmptyLossySite,
}

fn check_len(state: &MeanfieldState, params: &LatticeParams) -> Result<()> {
    if state.len() != params.n_sites() {
        return Err(Error::Shape {
            expected: params.n_sites(),
            got: state.len(),
        });
    }
    Ok(())
}

fn check_boundary(params: &LatticeParams, boundary: Boundary) -> Result<()> {
    if boundary == Boundary::ClampedEdges {
        let n = params.n_sites();
        let m = params.lossy_site();
        if n < 3 || m == 0 || m + 1 == n {
            return Err(Error::domain(
                "clamped edges need at least 3 sites and an interior lossy site",
            ));
        }
    }
    Ok(())
}

/// J′ on the bonds touching the lossy site.
fn lossy_bond_coupling(psi: &[Complex64], params: &LatticeParams, coupling: &CouplingModel) -> f64 {
    let m = params.lossy_site();
    let n = psi.len();
    let mut sum = 0.0;
    let mut cnt = 0.0;
    if m > 0 {
        sum += psi[m - 1].norm_sqr();
        cnt += 1.0;
    }
    if m + 1 < n {
        sum += psi[m + 1].norm_sqr();
        cnt += 1.0;
    }
    if cnt == 0.0 {
        return params.j_coupling();
    }
    coupling.eval(params.j_coupling(), sum / cnt - psi[m].norm_sqr())
}

pub(crate) fn rhs_into(
    psi: &[Complex64],
    out: &mut [Complex64],
    params: &LatticeParams,
    coupling: &CouplingModel,
    boundary: Boundary,
) {
    let n = psi.len();
    let m = params.lossy_site();
    let j = params.j_coupling();
    let u = params.u_interaction();
    let jp = lossy_bond_coupling(psi, params, coupling);
    // coupling on bond (k, k+1)
    let bond = |k: usize| if k == m || k + 1 == m { jp } else { j };

    for k in 0..n {
        let mut s = Complex64::new(0.0, 0.0);
        if k > 0 {
            s += bond(k - 1) * psi[k - 1];
        }
        if k + 1 < n {
            s += bond(k) * psi[k + 1];
        }
        out[k] = I * s - I * (u * psi[k].norm_sqr()) * psi[k];
        if k == m {
            out[k] -= 0.5 * params.gamma() * psi[k];
        }
    }

    if boundary == Boundary::ClampedEdges && n >= 3 {
        for (edge, inner) in [(0, 1), (n - 1, n - 2)] {
            let z = psi[edge];
            let r2 = z.norm_sqr();
            if r2 == 0.0 {
                out[edge] = Complex64::new(0.0, 0.0);
                continue;
            }
            let w = psi[inner];
            let virt = if w.norm_sqr() > 0.0 {
                z * (z / w) * (w.norm() / z.norm())
            } else {
                z
            };
            let mut f = out[edge] + I * j * virt;
            // drop the radial part so |ψ_edge| stays fixed
            f -= ((f * z.conj()).re / r2) * z;
            out[edge] = f;
        }
    }
}

/// Right-hand side of the lattice equation with open boundaries.
pub fn dnls_rhs(
    state: &MeanfieldState,
    params: &LatticeParams,
    coupling: &CouplingModel,
) -> Result<Vec<Complex64>> {
    dnls_rhs_with(state, params, coupling, Boundary::Open)
}

pub fn dnls_rhs_with(
    state: &MeanfieldState,
    params: &LatticeParams,
    coupling: &CouplingModel,
    boundary: Boundary,
) -> Result<Vec<Complex64>> {
    check_len(state, params)?;
    check_boundary(params, boundary)?;
    let mut out = vec![Complex64::new(0.0, 0.0); state.len()];
    rhs_into(&state.amplitudes, &mut out, params, coupling, boundary);
    Ok(out)
}

/// Steady Bloch state with sin ΔΦ = γ/(4J).
pub fn analytic_bloch_steady_state(params: &LatticeParams) -> Result<BlochSteadyState> {
    let limit = 4.0 * params.j_coupling();
    if params.gamma() > limit {
        return Err(Error::NoSuperfluidSteadyState {
            gamma: params.gamma(),
            limit,
        });
    }
    let delta_phi = (params.gamma() / limit).clamp(0.0, 1.0).asin();
    Ok(BlochSteadyState {
        delta_phi,
        quasi_momentum: delta_phi,
        filling: params.n0(),
    })
}

/// Lattice amplitudes of a Bloch steady state: phase −ΔΦ·|n − m|, uniform filling.
pub fn bloch_state(params: &LatticeParams, bloch: &BlochSteadyState) -> MeanfieldState {
    let m = params.lossy_site() as f64;
    let r = bloch.filling.sqrt();
    let amplitudes = (0..params.n_sites())
        .map(|k| Complex64::from_polar(r, -bloch.delta_phi * (k as f64 - m).abs()))
        .collect();
    MeanfieldState::new(amplitudes, 0.0)
}

pub fn prepare_initial(
    params: &LatticeParams,
    kind: InitialKind,
    seed_fraction: f64,
) -> Result<MeanfieldState> {
    let r = params.n0().sqrt();
    let mut amplitudes = vec![Complex64::new(r, 0.0); params.n_sites()];
    if kind == InitialKind::EmptyLossySite {
        if !(seed_fraction > 0.0 && seed_fraction < 1.0) {
            return Err(Error::domain(format!(
                "seed_fraction must lie in (0, 1), got {seed_fraction}"
            )));
        }
        amplitudes[params.lossy_site()] = Complex64::new((seed_fraction * params.n0()).sqrt(), 0.0);
    }
    Ok(MeanfieldState::new(amplitudes, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions {
    pub tol: f64,
    /// Number of stored samples including the initial state.
    pub n_samples: usize,
    pub boundary: Boundary,
    /// Abort when the reservoir has lost this fraction of its atoms; `None` disables.
    pub depletion_limit: Option<f64>,
    /// Integrate in the frame rotating at U·N₀ − 2J; samples are always lab frame.
    pub co_rotating: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            n_samples: 101,
            boundary: Boundary::Open,
            depletion_limit: Some(DEFAULT_DEPLETION_LIMIT),
            co_rotating: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<MeanfieldState>,
    pub params: LatticeParams,
    pub coupling: CouplingModel,
    pub boundary: Boundary,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.time).collect()
    }

    pub fn last(&self) -> &MeanfieldState {
        self.samples.last().expect("trajectory is never empty")
    }

    pub fn lossy_filling(&self) -> Vec<f64> {
        let m = self.params.lossy_site();
        self.samples.iter().map(|s| s.filling(m)).collect()
    }
}

fn reservoir_atoms(psi: &[Complex64], m: usize) -> f64 {
    psi.iter()
        .enumerate()
        .filter(|(k, _)| *k != m)
        .map(|(_, z)| z.norm_sqr())
        .sum()
}

pub fn evolve(
    state: &MeanfieldState,
    params: &LatticeParams,
    coupling: &CouplingModel,
    t_final: f64,
    tol: f64,
) -> Result<Trajectory> {
    let opts = EvolveOptions {
        tol,
        ..EvolveOptions::default()
    };
    evolve_with(state, params, coupling, t_final, &opts)
}

pub fn evolve_with(
    state: &MeanfieldState,
    params: &LatticeParams,
    coupling: &CouplingModel,
    t_final: f64,
    opts: &EvolveOptions,
) -> Result<Trajectory> {
    check_len(state, params)?;
    check_boundary(params, opts.boundary)?;
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::domain(format!("t_final must be > 0, got {t_final}")));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::domain(format!("tol must be > 0, got {}", opts.tol)));
    }
    if opts.n_samples < 2 {
        return Err(Error::domain("need at least 2 samples"));
    }

    let n = state.len();
    let m = params.lossy_site();
    let omega = if opts.co_rotating {
        params.u_interaction() * params.n0() - 2.0 * params.j_coupling()
    } else {
        0.0
    };
    let t0 = state.time;
    let to_lab = |psi: &[Complex64], t: f64| -> Vec<Complex64> {
        let ph = Complex64::from_polar(1.0, -omega * (t - t0));
        psi.iter().map(|z| z * ph).collect()
    };

    let p = *params;
    let c = *coupling;
    let boundary = opts.boundary;
    let mut zbuf = vec![Complex64::new(0.0, 0.0); n];
    let mut fbuf = vec![Complex64::new(0.0, 0.0); n];
    let rhs = move |_t: f64, y: &[f64], dy: &mut [f64]| {
        for (k, z) in zbuf.iter_mut().enumerate() {
            *z = Complex64::new(y[2 * k], y[2 * k + 1]);
        }
        rhs_into(&zbuf, &mut fbuf, &p, &c, boundary);
        for k in 0..n {
            let f = fbuf[k] + I * omega * zbuf[k];
            dy[2 * k] = f.re;
            dy[2 * k + 1] = f.im;
        }
    };

    let res0 = reservoir_atoms(&state.amplitudes, m);
    let mut solver = Dopri5::new(rhs, t0, complex_as_real(&state.amplitudes), StepControl::new(opts.tol));
    let mut samples = Vec::with_capacity(opts.n_samples);
    samples.push(state.clone());
    let mut depleted: Option<(f64, f64)> = None;
    for s in 1..opts.n_samples {
        let t = t0 + t_final * s as f64 / (opts.n_samples - 1) as f64;
        if let Some(limit) = opts.depletion_limit {
            solver.advance_to_with(t, |tt, y| {
                if depleted.is_none() && res0 > 0.0 {
                    let mut res = 0.0;
                    for k in (0..n).filter(|&k| k != m) {
                        res += y[2 * k] * y[2 * k] + y[2 * k + 1] * y[2 * k + 1];
                    }
                    let frac = 1.0 - res / res0;
                    if frac > limit {
                        depleted = Some((tt, frac));
                    }
                }
                false
            })?;
            if let Some((time, fraction)) = depleted {
                log::warn!("reservoir depletion {fraction:.3} exceeds {limit} at t = {time:.4e} s");
                return Err(Error::ReservoirDepleted { time, fraction, limit });
            }
        } else {
            solver.advance_to(t)?;
        }
        let psi = real_as_complex(solver.state());
        samples.push(MeanfieldState::new(to_lab(&psi, t), t));
    }
    Ok(Trajectory {
        samples,
        params: *params,
        coupling: *coupling,
        boundary,
    })
}

/// I(t) = dNₘ/dt + γNₘ at every sample, with dNₘ/dt taken from the equation of motion.
pub fn site_current(trajectory: &Trajectory) -> Vec<(f64, f64)> {
    let p = &trajectory.params;
    let m = p.lossy_site();
    let mut out = vec![Complex64::new(0.0, 0.0); p.n_sites()];
    trajectory
        .samples
        .iter()
        .map(|s| {
            rhs_into(&s.amplitudes, &mut out, p, &trajectory.coupling, trajectory.boundary);
            let dn = 2.0 * (s.amplitudes[m].conj() * out[m]).re;
            (s.time, dn + p.gamma() * s.filling(m))
        })
        .collect()
}

/// d(Σ|ψ|²)/dt + γ|ψₘ|² for one state; zero for open boundaries.
pub fn norm_balance_residual(
    state: &MeanfieldState,
    params: &LatticeParams,
    coupling: &CouplingModel,
) -> Result<f64> {
    let f = dnls_rhs(state, params, coupling)?;
    let dn: f64 = state
        .amplitudes
        .iter()
        .zip(&f)
        .map(|(z, dz)| 2.0 * (z.conj() * dz).re)
        .sum();
    Ok(dn + params.gamma() * state.filling(params.lossy_site()))
}

/// Settings for a single mean-field steady-state run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanfieldRunOptions {
    pub evolve: EvolveOptions,
    /// run length in tunneling times ħ/J
    pub tunneling_times: f64,
    pub seed_fraction: f64,
    pub epsilon: f64,
    /// trailing fraction of samples averaged for N_S
    pub window: f64,
}

impl Default for MeanfieldRunOptions {
    fn default() -> Self {
        Self {
            evolve: EvolveOptions {
                n_samples: 201,
                boundary: Boundary::ClampedEdges,
                ..EvolveOptions::default()
            },
            tunneling_times: 20.0,
            seed_fraction: DEFAULT_SEED_FRACTION,
            epsilon: 0.05,
            window: 0.2,
        }
    }
}

/// Runs from one initial condition and reduces the lossy-site series to a
/// record. N_S is the mean over the trailing window; the run counts as
/// converged when that window stays within ε·N₀ of N_S.
pub fn steady_state(
    params: &LatticeParams,
    coupling: &CouplingModel,
    ic: InitialCondition,
    opts: &MeanfieldRunOptions,
) -> SteadyStateRecord {
    let fail = |e: Error| {
        SteadyStateRecord::failed(
            params.j_coupling(),
            params.gamma(),
            params.n0(),
            ic,
            SolverKind::Meanfield,
            e.to_string(),
        )
    };
    let kind = match ic {
        InitialCondition::Full => InitialKind::FullUniform,
        InitialCondition::Empty => InitialKind::EmptyLossySite,
    };
    let start = match prepare_initial(params, kind, opts.seed_fraction) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let t_final = opts.tunneling_times * params.tunneling_time();
    let tr = match evolve_with(&start, params, coupling, t_final, &opts.evolve) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let series = tr.lossy_filling();
    let k0 = ((1.0 - opts.window) * series.len() as f64).floor() as usize;
    let tail = &series[k0.min(series.len() - 1)..];
    let n_s = tail.iter().sum::<f64>() / tail.len() as f64;
    let band = opts.epsilon * params.n0();
    let converged = tail.iter().all(|v| (v - n_s).abs() < band);
    let m = params.lossy_site();
    let nb = if m > 0 { m - 1 } else { (m + 1).min(params.n_sites() - 1) };
    let delta_phi = tr.last().phase_difference(nb, m);
    let (tau, status) = if converged {
        let pts: Vec<(f64, f64)> = tr.times().into_iter().zip(series.iter().copied()).collect();
        (Some(settling_time(&pts, n_s, band)), RunStatus::Converged)
    } else {
        (None, RunStatus::NotConverged)
    };
    SteadyStateRecord::new(
        params.j_coupling(),
        params.gamma(),
        params.n0(),
        ic,
        n_s / params.n0(),
        delta_phi,
        tau,
        SolverKind::Meanfield,
        status,
    )
}
