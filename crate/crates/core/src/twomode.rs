//! Lumped model of the lossy site fed by two reservoir leads.
//!
//! dN/dt = −γN + 4J′(N₀ − N)·√(N·N₀)·sin ΔΦ + κ(N₀ − N), κ = c·J².
//!
//! The phase equation depends on [`PhaseClosure`]. `Josephson` is the plain
//! dΔΦ/dt = Δμ. `Saturating` uses
//!
//!   dΔΦ/dt = Δμ·[1 − sgn(Δμ)·sin ΔΦ·(1 − cos ΔΦ)],
//!
//! which is Josephson-like near ΔΦ = 0 but stalls at ±π/2 when Δμ pushes
//! outward. The strip |ΔΦ| ≤ π/2 is invariant. In the resistive state the
//! coherent channel delivers its maximum current and the rest of the
//! transport is incoherent.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{ensure_finite, Error, Result};
use crate::model::{ChemicalPotentialModel, CouplingModel, LatticeParams};
use crate::ode::{Dopri5, StepControl};
use crate::record::{InitialCondition, RunStatus, SolverKind, SteadyStateRecord};

/// Default c in κ = c·J², in seconds.
pub const DEFAULT_KAPPA_COEFFICIENT: f64 = 0.004;
/// Default relaxation threshold as a fraction of N₀.
pub const DEFAULT_EPSILON: f64 = 0.05;
/// Default filling fraction of an emptied site.
pub const DEFAULT_SEED_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoModeState {
    pub n: f64,
    pub delta_phi: f64,
}

/// Wraps an angle to (−π, π].
pub fn wrap_phase(phi: f64) -> f64 {
    let mut x = phi.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

impl TwoModeState {
    pub fn new(n: f64, delta_phi: f64) -> Result<Self> {
        ensure_finite("n", n)?;
        ensure_finite("delta_phi", delta_phi)?;
        if n < 0.0 {
            return Err(Error::domain(format!("filling must be >= 0, got {n}")));
        }
        Ok(Self {
            n,
            delta_phi: wrap_phase(delta_phi),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoModeDerivative {
    pub dn_dt: f64,
    pub dphi_dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum PhaseClosure {
    #[default]
    Saturating,
    Josephson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateModelParams {
    pub lattice: LatticeParams,
    pub coupling: CouplingModel,
    pub kappa_coefficient: f64,
    pub mu_model: ChemicalPotentialModel,
    pub closure: PhaseClosure,
}

impl RateModelParams {
    pub fn new(
        lattice: LatticeParams,
        coupling: CouplingModel,
        kappa_coefficient: f64,
        mu_model: ChemicalPotentialModel,
    ) -> Result<Self> {
        ensure_finite("kappa_coefficient", kappa_coefficient)?;
        if kappa_coefficient < 0.0 {
            return Err(Error::domain(format!(
                "kappa_coefficient must be >= 0, got {kappa_coefficient}"
            )));
        }
        if let CouplingModel::FranckCondon { width } = coupling {
            CouplingModel::franck_condon(width)?;
        }
        Ok(Self {
            lattice,
            coupling,
            kappa_coefficient,
            mu_model,
            closure: PhaseClosure::default(),
        })
    }

    /// Franck-Condon width N₀/4, c = 0.004 s and μ = U·N with the lattice U.
    pub fn default_for(lattice: LatticeParams) -> Result<Self> {
        Self::new(
            lattice,
            CouplingModel::default_for(lattice.n0()),
            DEFAULT_KAPPA_COEFFICIENT,
            ChemicalPotentialModel::linear(lattice.u_interaction())?,
        )
    }

    pub fn with_closure(mut self, closure: PhaseClosure) -> Self {
        self.closure = closure;
        self
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Ok(Self {
            lattice: self.lattice.with_gamma(gamma)?,
            ..*self
        })
    }

    pub fn with_j(&self, j: f64) -> Result<Self> {
        Ok(Self {
            lattice: self.lattice.with_j(j)?,
            ..*self
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa_coefficient * self.lattice.j_coupling().powi(2)
    }

    /// Phase interval searched for fixed points.
    pub fn phase_range(&self) -> (f64, f64) {
        match self.closure {
            PhaseClosure::Saturating => (-FRAC_PI_2, FRAC_PI_2),
            PhaseClosure::Josephson => (-PI, PI),
        }
    }

    /// Default integration horizon: max(100/γ, 10⁴/J).
    pub fn default_t_max(&self) -> f64 {
        let tj = 1e4 / self.lattice.j_coupling();
        if self.lattice.gamma() > 0.0 {
            tj.max(100.0 / self.lattice.gamma())
        } else {
            tj
        }
    }
}

#[inline]
fn flow(p: &RateModelParams, n: f64, phi: f64) -> (f64, f64) {
    let l = &p.lattice;
    let n0 = l.n0();
    let jp = p.coupling.eval(l.j_coupling(), n0 - n);
    let dn = -l.gamma() * n + 4.0 * jp * (n.max(0.0) * n0).sqrt() * phi.sin() + p.kappa() * (n0 - n);
    let dmu = p.mu_model.mu(n0) - p.mu_model.mu(n);
    let dphi = match p.closure {
        PhaseClosure::Josephson => dmu,
        PhaseClosure::Saturating => dmu * (1.0 - dmu.signum() * phi.sin() * (1.0 - phi.cos())),
    };
    (dn, dphi)
}

pub fn rate_rhs(state: &TwoModeState, p: &RateModelParams) -> Result<TwoModeDerivative> {
    ensure_finite("n", state.n)?;
    ensure_finite("delta_phi", state.delta_phi)?;
    if state.n < 0.0 {
        return Err(Error::domain(format!("filling must be >= 0, got {}", state.n)));
    }
    let (dn_dt, dphi_dt) = flow(p, state.n, state.delta_phi);
    Ok(TwoModeDerivative { dn_dt, dphi_dt })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Unstable,
    Saddle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub state: TwoModeState,
    pub stability: Stability,
    pub eigenvalues: [Complex64; 2],
}

impl FixedPoint {
    /// Real part of the eigenvalue closest to zero.
    pub fn slowest_rate(&self) -> f64 {
        let [a, b] = self.eigenvalues;
        if a.re.abs() <= b.re.abs() {
            a.re
        } else {
            b.re
        }
    }

    pub fn is_superfluid(&self, n0: f64) -> bool {
        self.state.n == n0
    }
}

/// Central-difference Jacobian, step 10⁻⁶ relative; one-sided next to N = 0.
pub fn jacobian(p: &RateModelParams, state: &TwoModeState) -> [[f64; 2]; 2] {
    jac_fd(p, state.n, state.delta_phi)
}

fn jac_fd(p: &RateModelParams, n: f64, phi: f64) -> [[f64; 2]; 2] {
    let hn = 1e-6 * n.abs().max(1e-3 * p.lattice.n0());
    let hp = 1e-6 * phi.abs().max(1.0);
    let (a, c) = if n - hn >= 0.0 {
        let fp = flow(p, n + hn, phi);
        let fm = flow(p, n - hn, phi);
        ((fp.0 - fm.0) / (2.0 * hn), (fp.1 - fm.1) / (2.0 * hn))
    } else {
        let fp = flow(p, n + hn, phi);
        let f0 = flow(p, n, phi);
        ((fp.0 - f0.0) / hn, (fp.1 - f0.1) / hn)
    };
    let fp = flow(p, n, phi + hp);
    let fm = flow(p, n, phi - hp);
    let b = (fp.0 - fm.0) / (2.0 * hp);
    let d = (fp.1 - fm.1) / (2.0 * hp);
    [[a, b], [c, d]]
}

fn eigen2(m: &[[f64; 2]; 2]) -> [Complex64; 2] {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = Complex64::new(0.25 * tr * tr - det, 0.0).sqrt();
    let h = Complex64::new(0.5 * tr, 0.0);
    [h - disc, h + disc]
}

fn classify_eigs(ev: &[Complex64; 2]) -> Stability {
    let (a, b) = (ev[0].re, ev[1].re);
    if a < 0.0 && b < 0.0 {
        Stability::Stable
    } else if (a < 0.0 && b > 0.0) || (a > 0.0 && b < 0.0) {
        Stability::Saddle
    } else {
        Stability::Unstable
    }
}

fn make_fixed_point(p: &RateModelParams, n: f64, phi: f64) -> FixedPoint {
    let ev = eigen2(&jac_fd(p, n, phi));
    FixedPoint {
        state: TwoModeState {
            n,
            delta_phi: wrap_phase(phi),
        },
        stability: classify_eigs(&ev),
        eigenvalues: ev,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    /// Top-level cells along N on [0, n_max_factor·N₀].
    pub n_cells: usize,
    /// Top-level cells per π of phase.
    pub phi_cells_per_pi: usize,
    /// Quad-tree refinement depth for cells that may hide a root.
    pub max_depth: u32,
    pub n_max_factor: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            n_cells: 240,
            phi_cells_per_pi: 48,
            max_depth: 3,
            n_max_factor: 1.2,
        }
    }
}

/// Scaled residual: ṅ in units of N₀·J, dΔΦ/dt in units of J.
fn scaled(p: &RateModelParams, f: (f64, f64)) -> (f64, f64) {
    let j = p.lattice.j_coupling();
    (f.0 / (p.lattice.n0() * j), f.1 / j)
}

const RESIDUAL_TOL: f64 = 1e-10;

fn converged(p: &RateModelParams, n: f64, phi: f64) -> bool {
    let (a, b) = scaled(p, flow(p, n, phi));
    a.abs() < RESIDUAL_TOL && b.abs() < RESIDUAL_TOL
}

/// Damped Newton in scaled variables (N/N₀, ΔΦ); `None` if it stalls.
fn newton(p: &RateModelParams, n_start: f64, phi_start: f64, phi_bounds: Option<(f64, f64)>) -> Option<(f64, f64)> {
    let n0 = p.lattice.n0();
    let j = p.lattice.j_coupling();
    let merit = |n: f64, phi: f64| {
        let (a, b) = scaled(p, flow(p, n, phi));
        a * a + b * b
    };
    let (mut n, mut phi) = (n_start, phi_start);
    for _ in 0..200 {
        if converged(p, n, phi) {
            return Some((n, phi));
        }
        let (f1, f2) = scaled(p, flow(p, n, phi));
        let m = jac_fd(p, n, phi);
        // d(scaled f)/d(u, φ) with u = N/N₀
        let a = m[0][0] / j;
        let b = m[0][1] / (n0 * j);
        let c = m[1][0] * n0 / j;
        let d = m[1][1] / j;
        let det = a * d - b * c;
        let (du, dp) = if det.is_finite() && det.abs() > 1e-13 * (a * d).abs().max((b * c).abs()) && det != 0.0 {
            ((-f1 * d + f2 * b) / det, (-f2 * a + f1 * c) / det)
        } else {
            // Levenberg-Marquardt step
            let (g11, g12, g22) = (a * a + c * c, a * b + c * d, b * b + d * d);
            let lam = 1e-8 * (g11 + g22).max(1e-300);
            let (r1, r2) = (-(a * f1 + c * f2), -(b * f1 + d * f2));
            let dd = (g11 + lam) * (g22 + lam) - g12 * g12;
            (((g22 + lam) * r1 - g12 * r2) / dd, ((g11 + lam) * r2 - g12 * r1) / dd)
        };
        if !(du.is_finite() && dp.is_finite()) {
            return None;
        }
        let m0 = merit(n, phi);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let mut nn = n + t * du * n0;
            let mut pp = phi + t * dp;
            if nn < 0.0 {
                nn = 0.0;
            }
            if let Some((lo, hi)) = phi_bounds {
                pp = pp.clamp(lo, hi);
            }
            let m1 = merit(nn, pp);
            if m1 < m0 {
                n = nn;
                phi = pp;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            return if converged(p, n, phi) { Some((n, phi)) } else { None };
        }
    }
    if converged(p, n, phi) {
        Some((n, phi))
    } else {
        None
    }
}

/// Pins roots onto the invariant sets N = N₀ and ΔΦ = ±π/2 when they sit there.
fn snap(p: &RateModelParams, n: f64, phi: f64) -> (f64, f64) {
    let n0 = p.lattice.n0();
    let mut n_s = n;
    let mut phi_s = phi;
    if (n - n0).abs() <= 1e-9 * n0 {
        n_s = n0;
    }
    if p.closure == PhaseClosure::Saturating {
        for edge in [-FRAC_PI_2, FRAC_PI_2] {
            if (phi - edge).abs() <= 1e-9 {
                phi_s = edge;
            }
        }
    }
    if (n_s, phi_s) == (n, phi) {
        return (n, phi);
    }
    // re-solve the free coordinate at the pinned value
    let mut x = (n_s, phi_s);
    for _ in 0..20 {
        if converged(p, x.0, x.1) {
            return x;
        }
        let (f1, _) = flow(p, x.0, x.1);
        let m = jac_fd(p, x.0, x.1);
        if n_s == n0 && phi_s == phi {
            if m[0][1] == 0.0 {
                break;
            }
            x.1 -= f1 / m[0][1];
        } else if phi_s != phi && n_s != n0 {
            if m[0][0] == 0.0 {
                break;
            }
            x.0 -= f1 / m[0][0];
        } else {
            break;
        }
    }
    if converged(p, x.0, x.1) {
        x
    } else {
        (n, phi)
    }
}

struct Cell {
    n_lo: f64,
    n_hi: f64,
    p_lo: f64,
    p_hi: f64,
    // corner values: (n_lo,p_lo), (n_hi,p_lo), (n_lo,p_hi), (n_hi,p_hi)
    f: [(f64, f64); 4],
}

fn straddles(v: [f64; 4]) -> bool {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    lo <= 0.0 && hi >= 0.0
}

fn suspicious(v: [f64; 4]) -> bool {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_abs = v.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
    (lo <= 0.0 && hi >= 0.0) || min_abs <= hi - lo
}

fn search_cell(
    p: &RateModelParams,
    cell: Cell,
    depth: u32,
    opts: &FixedPointOptions,
    bounds: (f64, f64),
    out: &mut Vec<(f64, f64)>,
) -> Result<()> {
    let f1 = [cell.f[0].0, cell.f[1].0, cell.f[2].0, cell.f[3].0];
    let f2 = [cell.f[0].1, cell.f[1].1, cell.f[2].1, cell.f[3].1];
    if !(suspicious(f1) && suspicious(f2)) {
        return Ok(());
    }
    let bracketed = straddles(f1) && straddles(f2);
    if depth < opts.max_depth {
        let nm = 0.5 * (cell.n_lo + cell.n_hi);
        let pm = 0.5 * (cell.p_lo + cell.p_hi);
        let e = |n, ph| flow(p, n, ph);
        let (c_ll, c_hl, c_lh, c_hh) = (cell.f[0], cell.f[1], cell.f[2], cell.f[3]);
        let (m_bl, m_tl, m_lm, m_rm, m_c) = (
            e(nm, cell.p_lo),
            e(nm, cell.p_hi),
            e(cell.n_lo, pm),
            e(cell.n_hi, pm),
            e(nm, pm),
        );
        let kids = [
            Cell { n_lo: cell.n_lo, n_hi: nm, p_lo: cell.p_lo, p_hi: pm, f: [c_ll, m_bl, m_lm, m_c] },
            Cell { n_lo: nm, n_hi: cell.n_hi, p_lo: cell.p_lo, p_hi: pm, f: [m_bl, c_hl, m_c, m_rm] },
            Cell { n_lo: cell.n_lo, n_hi: nm, p_lo: pm, p_hi: cell.p_hi, f: [m_lm, m_c, c_lh, m_tl] },
            Cell { n_lo: nm, n_hi: cell.n_hi, p_lo: pm, p_hi: cell.p_hi, f: [m_c, m_rm, m_tl, c_hh] },
        ];
        for k in kids {
            search_cell(p, k, depth + 1, opts, bounds, out)?;
        }
        return Ok(());
    }
    let starts = [
        (0.5 * (cell.n_lo + cell.n_hi), 0.5 * (cell.p_lo + cell.p_hi)),
        (cell.n_lo, cell.p_lo),
        (cell.n_hi, cell.p_lo),
        (cell.n_lo, cell.p_hi),
        (cell.n_hi, cell.p_hi),
    ];
    for (n, ph) in starts {
        if let Some(r) = newton(p, n, ph, Some(bounds)) {
            out.push(r);
            return Ok(());
        }
    }
    if bracketed {
        return Err(Error::NewtonFailed {
            n_lo: cell.n_lo,
            n_hi: cell.n_hi,
            phi_lo: cell.p_lo,
            phi_hi: cell.p_hi,
        });
    }
    Ok(())
}

pub fn find_fixed_points(p: &RateModelParams) -> Result<Vec<FixedPoint>> {
    find_fixed_points_with(p, &FixedPointOptions::default())
}

/// Grid bracketing over N ∈ [0, 1.2·N₀] and the closure's phase range,
/// quad-tree refinement, damped Newton, then a deterministic (N, ΔΦ) ordering.
pub fn find_fixed_points_with(p: &RateModelParams, opts: &FixedPointOptions) -> Result<Vec<FixedPoint>> {
    if opts.n_cells == 0 || opts.phi_cells_per_pi == 0 {
        return Err(Error::domain("fixed-point grid needs at least one cell per axis"));
    }
    let n0 = p.lattice.n0();
    let n_max = opts.n_max_factor * n0;
    let (p_lo, p_hi) = p.phase_range();
    let n_phi = ((p_hi - p_lo) / PI * opts.phi_cells_per_pi as f64).round().max(1.0) as usize;
    let nn = opts.n_cells;
    let n_at = |i: usize| n_max * i as f64 / nn as f64;
    let p_at = |k: usize| p_lo + (p_hi - p_lo) * k as f64 / n_phi as f64;

    let grid: Vec<Vec<(f64, f64)>> = (0..=nn)
        .into_par_iter()
        .map(|i| (0..=n_phi).map(|k| flow(p, n_at(i), p_at(k))).collect())
        .collect();

    let per_row: Vec<Result<Vec<(f64, f64)>>> = (0..nn)
        .into_par_iter()
        .map(|i| {
            let mut roots = Vec::new();
            for k in 0..n_phi {
                let cell = Cell {
                    n_lo: n_at(i),
                    n_hi: n_at(i + 1),
                    p_lo: p_at(k),
                    p_hi: p_at(k + 1),
                    f: [grid[i][k], grid[i + 1][k], grid[i][k + 1], grid[i + 1][k + 1]],
                };
                search_cell(p, cell, 0, opts, (p_lo, p_hi), &mut roots)?;
            }
            Ok(roots)
        })
        .collect();

    let mut raw = Vec::new();
    for r in per_row {
        raw.extend(r?);
    }
    let mut roots: Vec<(f64, f64)> = Vec::new();
    for (n, ph) in raw {
        let (n, ph) = snap(p, n, ph);
        if !(0.0..=n_max * (1.0 + 1e-12)).contains(&n) {
            continue;
        }
        let ph = if p.closure == PhaseClosure::Josephson { wrap_phase(ph) } else { ph };
        let dup = roots.iter().any(|&(m, q)| {
            let dq = if p.closure == PhaseClosure::Josephson { wrap_phase(ph - q) } else { ph - q };
            (m - n).abs() <= 1e-5 * n0 && dq.abs() <= 1e-4
        });
        if !dup {
            roots.push((n, ph));
        }
    }
    roots.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(roots.into_iter().map(|(n, ph)| make_fixed_point(p, n, ph)).collect())
}

/// Newton refinement from a guess; returns the classified root if one is reached.
pub fn refine_fixed_point(p: &RateModelParams, guess: &TwoModeState) -> Option<FixedPoint> {
    let bounds = match p.closure {
        PhaseClosure::Saturating => Some(p.phase_range()),
        PhaseClosure::Josephson => None,
    };
    let (n, ph) = newton(p, guess.n, guess.delta_phi, bounds)?;
    let (n, ph) = snap(p, n, ph);
    Some(make_fixed_point(p, n, ph))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxOptions {
    pub tol: f64,
    /// Integration horizon; `None` uses [`RateModelParams::default_t_max`].
    pub t_max: Option<f64>,
    /// Interval between convergence checks, in units of 1/J.
    pub check_every: f64,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            t_max: None,
            check_every: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Relaxation {
    pub state: TwoModeState,
    pub time: f64,
    pub converged: bool,
    pub fixed_point: Option<FixedPoint>,
    /// (t, N) at every accepted step.
    pub history: Vec<(f64, f64)>,
}

/// Integrates until the state sits on a stable fixed point or `t_max` passes.
pub fn relax(p: &RateModelParams, initial: &TwoModeState, opts: &RelaxOptions) -> Result<Relaxation> {
    ensure_finite("n", initial.n)?;
    if initial.n < 0.0 {
        return Err(Error::domain(format!("filling must be >= 0, got {}", initial.n)));
    }
    let t_max = opts.t_max.unwrap_or_else(|| p.default_t_max());
    if !(t_max > 0.0) {
        return Err(Error::domain(format!("t_max must be > 0, got {t_max}")));
    }
    let n0 = p.lattice.n0();
    let pc = *p;
    let rhs = move |_t: f64, y: &[f64], dy: &mut [f64]| {
        let (a, b) = flow(&pc, y[0], y[1]);
        dy[0] = a;
        dy[1] = b;
    };
    let mut solver = Dopri5::new(rhs, 0.0, vec![initial.n, initial.delta_phi], StepControl::new(opts.tol));
    let mut history = vec![(0.0, initial.n)];
    let chunk = opts.check_every / p.lattice.j_coupling();

    let check = |n: f64, phi: f64| -> Option<FixedPoint> {
        let (a, b) = scaled(p, flow(p, n, phi));
        // integration noise keeps the residual near tol·N₀·ω, so polish early
        if a.abs().max(b.abs()) > 1e-6 {
            return None;
        }
        let fp = refine_fixed_point(p, &TwoModeState { n, delta_phi: phi })?;
        let close = (fp.state.n - n).abs() <= 1e-4 * n0 && wrap_phase(fp.state.delta_phi - phi).abs() <= 1e-4;
        (close && fp.stability == Stability::Stable).then_some(fp)
    };

    if let Some(fp) = check(initial.n, initial.delta_phi) {
        return Ok(Relaxation {
            state: fp.state,
            time: 0.0,
            converged: true,
            fixed_point: Some(fp),
            history,
        });
    }
    loop {
        let t = (solver.time() + chunk).min(t_max);
        solver.advance_to_with(t, |tt, y| {
            history.push((tt, y[0]));
            false
        })?;
        let y = solver.state();
        if let Some(fp) = check(y[0], y[1]) {
            return Ok(Relaxation {
                state: fp.state,
                time: solver.time(),
                converged: true,
                fixed_point: Some(fp),
                history,
            });
        }
        if solver.time() >= t_max {
            return Ok(Relaxation {
                state: TwoModeState {
                    n: y[0].max(0.0),
                    delta_phi: wrap_phase(y[1]),
                },
                time: solver.time(),
                converged: false,
                fixed_point: None,
                history,
            });
        }
    }
}

/// Time after which |x(t) − target| stays below `threshold`, measured from the
/// first sample and interpolated linearly between samples.
pub fn settling_time(series: &[(f64, f64)], target: f64, threshold: f64) -> f64 {
    let Some(&(t0, _)) = series.first() else {
        return 0.0;
    };
    let dev = |v: f64| (v - target).abs() - threshold;
    let Some(k) = series.iter().rposition(|&(_, v)| dev(v) >= 0.0) else {
        return 0.0;
    };
    if k + 1 == series.len() {
        return series[k].0 - t0;
    }
    let (ta, va) = series[k];
    let (tb, vb) = series[k + 1];
    let (da, db) = (dev(va), dev(vb));
    let s = if da - db > 0.0 { da / (da - db) } else { 0.0 };
    ta + s * (tb - ta) - t0
}

pub fn relaxation_time(p: &RateModelParams, initial: &TwoModeState, epsilon: f64) -> Result<f64> {
    relaxation_time_with(p, initial, epsilon, &RelaxOptions::default())
}

pub fn relaxation_time_with(
    p: &RateModelParams,
    initial: &TwoModeState,
    epsilon: f64,
    opts: &RelaxOptions,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let r = relax(p, initial, opts)?;
    if !r.converged {
        return Err(Error::Divergent { t_max: r.time });
    }
    Ok(settling_time(&r.history, r.state.n, epsilon * p.lattice.n0()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepDirection {
    /// Follows the emptied-site branch, stepping γ downward from the largest rate.
    Up,
    /// Follows the full-site branch, stepping γ upward from the smallest rate.
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoModeRunOptions {
    pub relax: RelaxOptions,
    pub seed_fraction: f64,
    pub epsilon: f64,
}

impl Default for TwoModeRunOptions {
    fn default() -> Self {
        Self {
            relax: RelaxOptions::default(),
            seed_fraction: DEFAULT_SEED_FRACTION,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

pub fn initial_state(p: &RateModelParams, ic: InitialCondition, seed_fraction: f64) -> Result<TwoModeState> {
    match ic {
        InitialCondition::Full => TwoModeState::new(p.lattice.n0(), 0.0),
        InitialCondition::Empty => {
            if !(seed_fraction > 0.0 && seed_fraction < 1.0) {
                return Err(Error::domain(format!(
                    "seed_fraction must lie in (0, 1), got {seed_fraction}"
                )));
            }
            TwoModeState::new(seed_fraction * p.lattice.n0(), 0.0)
        }
    }
}

fn record_from(p: &RateModelParams, ic: InitialCondition, r: &Relaxation, epsilon: f64) -> SteadyStateRecord {
    let l = &p.lattice;
    let (tau, status) = if r.converged {
        (
            Some(settling_time(&r.history, r.state.n, epsilon * l.n0())),
            RunStatus::Converged,
        )
    } else {
        (None, RunStatus::NotConverged)
    };
    SteadyStateRecord::new(
        l.j_coupling(),
        l.gamma(),
        l.n0(),
        ic,
        r.state.n / l.n0(),
        r.state.delta_phi,
        tau,
        SolverKind::TwoMode,
        status,
    )
}

/// Independent run from one initial condition.
pub fn steady_state(p: &RateModelParams, ic: InitialCondition, opts: &TwoModeRunOptions) -> Result<SteadyStateRecord> {
    let s = initial_state(p, ic, opts.seed_fraction)?;
    let r = relax(p, &s, &opts.relax)?;
    Ok(record_from(p, ic, &r, opts.epsilon))
}

fn check_grid(gamma_grid: &[f64]) -> Result<()> {
    if gamma_grid.is_empty() {
        return Err(Error::domain("gamma grid is empty"));
    }
    for &g in gamma_grid {
        ensure_finite("gamma", g)?;
        if g < 0.0 {
            return Err(Error::domain(format!("gamma must be >= 0, got {g}")));
        }
    }
    if gamma_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("gamma grid must be strictly ascending"));
    }
    Ok(())
}

pub fn hysteresis_sweep(p: &RateModelParams, gamma_grid: &[f64], direction: SweepDirection) -> Result<Vec<SteadyStateRecord>> {
    hysteresis_sweep_with(p, gamma_grid, direction, &TwoModeRunOptions::default())
}

/// Adiabatic continuation: each γ starts from the state reached at the previous one.
/// Records come back in ascending γ for both directions.
pub fn hysteresis_sweep_with(
    p: &RateModelParams,
    gamma_grid: &[f64],
    direction: SweepDirection,
    opts: &TwoModeRunOptions,
) -> Result<Vec<SteadyStateRecord>> {
    check_grid(gamma_grid)?;
    let (ic, order): (InitialCondition, Vec<f64>) = match direction {
        SweepDirection::Down => (InitialCondition::Full, gamma_grid.to_vec()),
        SweepDirection::Up => (InitialCondition::Empty, gamma_grid.iter().rev().cloned().collect()),
    };
    let mut state = initial_state(p, ic, opts.seed_fraction)?;
    let mut out = Vec::with_capacity(order.len());
    for g in order {
        let pg = p.with_gamma(g)?;
        let r = relax(&pg, &state, &opts.relax)?;
        out.push(record_from(&pg, ic, &r, opts.epsilon));
        state = r.state;
    }
    if direction == SweepDirection::Up {
        out.reverse();
    }
    Ok(out)
}

/// (Δμ(N₀, N_S), I_S) for each record.
pub fn current_voltage_curve(records: &[SteadyStateRecord], mu_model: &ChemicalPotentialModel) -> Vec<(f64, f64)> {
    records
        .iter()
        .map(|r| (mu_model.mu(r.n0) - mu_model.mu(r.filling()), r.current))
        .collect()
}

/// Fixed points at each γ, for bifurcation diagrams.
pub fn bifurcation_diagram(p: &RateModelParams, gammas: &[f64]) -> Result<Vec<(f64, FixedPoint)>> {
    let mut out = Vec::new();
    for &g in gammas {
        for fp in find_fixed_points(&p.with_gamma(g)?)? {
            out.push((g, fp));
        }
    }
    Ok(out)
}

/// Last γ on the way from `gamma_from` toward `gamma_to` at which the branch
/// through `branch` (a fixed point at gamma_from) still exists. Natural
/// continuation with step halving; returns `gamma_to` if the branch survives.
pub fn branch_end(
    p: &RateModelParams,
    branch: &TwoModeState,
    gamma_from: f64,
    gamma_to: f64,
    rel_tol: f64,
) -> Result<f64> {
    ensure_finite("gamma_from", gamma_from)?;
    ensure_finite("gamma_to", gamma_to)?;
    if gamma_from == gamma_to || !(rel_tol > 0.0) {
        return Err(Error::domain("branch_end needs distinct end points and rel_tol > 0"));
    }
    let n0 = p.lattice.n0();
    let start = refine_fixed_point(&p.with_gamma(gamma_from)?, branch)
        .ok_or_else(|| Error::domain("no fixed point near the branch guess at gamma_from"))?;
    let mut track = start.state;
    let mut g = gamma_from;
    let mut h = (gamma_to - gamma_from) / 64.0;
    let floor = rel_tol * gamma_from.abs().max(gamma_to.abs());
    while h.abs() > floor {
        let next = if (gamma_to - g - h) * h.signum() < 0.0 { gamma_to } else { g + h };
        let step = refine_fixed_point(&p.with_gamma(next)?, &track).filter(|fp| {
            fp.stability == start.stability
                && (fp.state.n - track.n).abs() < 0.05 * n0
                && (fp.state.delta_phi - track.delta_phi).abs() < 0.1
        });
        match step {
            Some(fp) => {
                track = fp.state;
                g = next;
                if g == gamma_to {
                    break;
                }
            }
            None => h *= 0.5,
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    const J: f64 = 230.0;
    const N0: f64 = 700.0;

    fn params(gamma: f64, coupling: CouplingModel, c: f64) -> RateModelParams {
        let l = LatticeParams::centered(41, J, 5.0, gamma, N0).unwrap();
        RateModelParams::new(l, coupling, c, ChemicalPotentialModel::linear(5.0).unwrap()).unwrap()
    }

    #[test]
    fn equilibrium_has_zero_flow() {
        let p = params(0.0, CouplingModel::Constant, 0.004);
        let d = rate_rhs(&TwoModeState::new(N0, 0.0).unwrap(), &p).unwrap();
        assert_eq!(d.dn_dt, 0.0);
        assert_eq!(d.dphi_dt, 0.0);
    }

    #[test]
    fn superfluid_phase_relation() {
        for g in [0.3, 1.0, 2.5, 3.9] {
            let p = params(g * J, CouplingModel::Constant, 0.0);
            let phi = (g / 4.0).asin();
            let d = rate_rhs(&TwoModeState::new(N0, phi).unwrap(), &p).unwrap();
            assert!(d.dn_dt.abs() < 1e-10 * N0 * J);
            assert_eq!(d.dphi_dt, 0.0);
        }
    }

    #[test]
    fn empty_site_refills_incoherently() {
        let p = params(50.0, CouplingModel::default_for(N0), 0.004);
        for phi in [-2.0, 0.0, 1.0, 3.0] {
            let d = rate_rhs(&TwoModeState::new(0.0, phi).unwrap(), &p).unwrap();
            assert!((d.dn_dt - p.kappa() * N0).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_filling_rejected() {
        let p = params(50.0, CouplingModel::Constant, 0.0);
        let s = TwoModeState { n: -1.0, delta_phi: 0.0 };
        assert!(rate_rhs(&s, &p).is_err());
        assert!(TwoModeState::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn phase_is_wrapped() {
        let s = TwoModeState::new(1.0, 3.0 * PI).unwrap();
        assert!((s.delta_phi - PI).abs() < 1e-12);
        let s = TwoModeState::new(1.0, -PI).unwrap();
        assert!((s.delta_phi - PI).abs() < 1e-12);
    }

    #[test]
    fn lossless_fixed_point_is_unique_attractor() {
        for closure in [PhaseClosure::Saturating, PhaseClosure::Josephson] {
            let p = params(0.0, CouplingModel::default_for(N0), 0.004).with_closure(closure);
            let fps = find_fixed_points(&p).unwrap();
            let stable: Vec<_> = fps.iter().filter(|f| f.stability == Stability::Stable).collect();
            assert_eq!(stable.len(), 1, "{closure:?}: {fps:?}");
            assert_eq!(stable[0].state.n, N0);
            assert!(stable[0].state.delta_phi.abs() < 1e-10);
        }
    }

    #[test]
    fn settling_time_of_exponential() {
        let tau0 = 0.02;
        let series: Vec<(f64, f64)> = (0..=200_000)
            .map(|k| {
                let t = k as f64 * 1e-6;
                (t, 100.0 + N0 * (-t / tau0).exp())
            })
            .collect();
        let t = settling_time(&series, 100.0, 0.05 * N0);
        assert!((t - tau0 * (1.0f64 / 0.05).ln()).abs() < 1e-7, "{t}");
    }

    #[test]
    fn relaxation_time_zero_at_fixed_point() {
        let p = params(100.0, CouplingModel::default_for(N0), 0.004);
        let s = TwoModeState::new(N0, (100.0 / (4.0 * J)).asin()).unwrap();
        assert_eq!(relaxation_time(&p, &s, 0.05).unwrap(), 0.0);
        assert!(relaxation_time(&p, &s, 1.5).is_err());
    }

    #[test]
    fn iv_curve_examples() {
        let mu = ChemicalPotentialModel::linear(1.0).unwrap();
        let sf = SteadyStateRecord::new(J, 10.0, N0, InitialCondition::Full, 1.0, 0.01, None, SolverKind::TwoMode, RunStatus::Converged);
        let z = SteadyStateRecord::new(J, 0.0, N0, InitialCondition::Full, 1.0, 0.0, None, SolverKind::TwoMode, RunStatus::Converged);
        let rs = SteadyStateRecord::new(J, 10.0, N0, InitialCondition::Empty, 0.5, 1.5, None, SolverKind::TwoMode, RunStatus::Converged);
        let iv = current_voltage_curve(&[sf, z, rs], &mu);
        assert_eq!(iv[0], (0.0, 10.0 * N0));
        assert_eq!(iv[1], (0.0, 0.0));
        assert_eq!(iv[2], (350.0, 3500.0));
    }

    #[test]
    fn jacobian_matches_superfluid_closed_form() {
        let g = 100.0;
        let p = params(g, CouplingModel::default_for(N0), 0.004);
        let phi = (g / (4.0 * J)).asin();
        let m = jacobian(&p, &TwoModeState { n: N0, delta_phi: phi });
        assert!((m[0][0] - (-g / 2.0 - p.kappa())).abs() < 1e-4 * J);
        assert!((m[0][1] - 4.0 * J * N0 * phi.cos()).abs() < 1e-6 * N0 * J);
        // the closure has a kink at Δμ = 0; the central difference averages both sides
        assert!((m[1][0] + 5.0).abs() < 1e-6);
        assert!(m[1][1].abs() < 1e-6);
    }
}
