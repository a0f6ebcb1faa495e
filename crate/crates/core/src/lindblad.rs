//! Exact open-system dynamics of a few-site Bose-Hubbard chain with local
//! particle loss: dense master equation and quantum-jump trajectories.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::model::LatticeParams;
use crate::ode::{Dopri5, StepControl};

/// Default cap on D² for the dense solvers.
pub const DEFAULT_MAX_DIM_SQ: usize = 1_000_000;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// All occupation tuples with nᵢ ≤ n_max and Σnᵢ ≤ n_total_cap, in
/// lexicographic order.
#[derive(Debug, Clone)]
pub struct FockBasis {
    n_sites: usize,
    n_max: usize,
    n_total_cap: usize,
    states: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
}

impl FockBasis {
    pub fn new(n_sites: usize, n_max: usize, n_total_cap: Option<usize>) -> Result<Self> {
        if n_sites == 0 {
            return Err(Error::domain("basis needs at least one site"));
        }
        if n_max > u8::MAX as usize {
            return Err(Error::domain(format!("n_max {n_max} exceeds {}", u8::MAX)));
        }
        let cap = n_total_cap.unwrap_or(n_sites * n_max);
        let mut states = Vec::new();
        let mut cur = vec![0u8; n_sites];
        enumerate(&mut cur, 0, n_max as u8, cap, 0, &mut states);
        let index = states.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();
        Ok(Self {
            n_sites,
            n_max,
            n_total_cap: cap,
            states,
            index,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn n_total_cap(&self) -> usize {
        self.n_total_cap
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, k: usize) -> &[u8] {
        &self.states[k]
    }

    pub fn index_of(&self, occupation: &[u8]) -> Option<usize> {
        self.index.get(occupation).copied()
    }

    /// Basis vector |n₁, n₂, ...⟩.
    pub fn fock_state(&self, occupation: &[u8]) -> Result<Vec<Complex64>> {
        if occupation.len() != self.n_sites {
            return Err(Error::Shape {
                expected: self.n_sites,
                got: occupation.len(),
            });
        }
        let k = self
            .index_of(occupation)
            .ok_or_else(|| Error::domain(format!("occupation {occupation:?} is outside the basis")))?;
        let mut psi = vec![Complex64::new(0.0, 0.0); self.dim()];
        psi[k] = Complex64::new(1.0, 0.0);
        Ok(psi)
    }

    fn occupation(&self, k: usize, site: usize) -> f64 {
        self.states[k][site] as f64
    }
}

fn enumerate(cur: &mut Vec<u8>, pos: usize, n_max: u8, cap: usize, used: usize, out: &mut Vec<Vec<u8>>) {
    if pos == cur.len() {
        out.push(cur.clone());
        return;
    }
    for n in 0..=n_max {
        if used + n as usize > cap {
            break;
        }
        cur[pos] = n;
        enumerate(cur, pos + 1, n_max, cap, used + n as usize, out);
    }
    cur[pos] = 0;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpOperatorSpec {
    pub site: usize,
    pub rate: f64,
}

impl JumpOperatorSpec {
    pub fn new(site: usize, rate: f64) -> Result<Self> {
        ensure_finite("rate", rate)?;
        if rate < 0.0 {
            return Err(Error::domain(format!("jump rate must be >= 0, got {rate}")));
        }
        Ok(Self { site, rate })
    }

    /// Single loss channel on the lattice's lossy site.
    pub fn from_lattice(p: &LatticeParams) -> Self {
        Self {
            site: p.lossy_site(),
            rate: p.gamma(),
        }
    }
}

/// Row-major D×D density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    dim: usize,
    entries: Vec<Complex64>,
}

impl DensityMatrix {
    pub fn from_entries(dim: usize, entries: Vec<Complex64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::Shape {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        Ok(Self { dim, entries })
    }

    /// |ψ⟩⟨ψ| / ⟨ψ|ψ⟩.
    pub fn from_pure(psi: &[Complex64]) -> Result<Self> {
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::domain("pure state has zero or non-finite norm"));
        }
        let d = psi.len();
        let mut entries = vec![Complex64::new(0.0, 0.0); d * d];
        for r in 0..d {
            for c in 0..d {
                entries[r * d + c] = psi[r] * psi[c].conj() / norm;
            }
        }
        Ok(Self { dim: d, entries })
    }

    pub fn vacuum(basis: &FockBasis) -> Self {
        let d = basis.dim();
        let mut entries = vec![Complex64::new(0.0, 0.0); d * d];
        // the all-zero tuple is first in lexicographic order
        entries[0] = Complex64::new(1.0, 0.0);
        Self { dim: d, entries }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        let mut entries = vec![Complex64::new(0.0, 0.0); dim * dim];
        for k in 0..dim {
            entries[k * dim + k] = Complex64::new(1.0 / dim as f64, 0.0);
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.entries[r * self.dim + c]
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|k| self.get(k, k)).sum()
    }

    /// max |ρ − ρ†| entry.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim;
        let mut e: f64 = 0.0;
        for r in 0..d {
            for c in r..d {
                e = e.max((self.get(r, c) - self.get(c, r).conj()).norm());
            }
        }
        e
    }

    fn to_matrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.entries)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = self.to_matrix();
        let h = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// ½‖ρ − σ‖₁.
    pub fn trace_distance(&self, other: &Self) -> Result<f64> {
        if other.dim != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: other.dim,
            });
        }
        let diff = self.to_matrix() - other.to_matrix();
        let h = (&diff + diff.adjoint()) * Complex64::new(0.5, 0.0);
        Ok(0.5 * h.symmetric_eigenvalues().iter().map(|v| v.abs()).sum::<f64>())
    }

    /// Checks Hermiticity, unit trace and positivity within `eig_tol`.
    pub fn validate(&self, eig_tol: f64) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > 1e-10 {
            return Err(Error::domain(format!("density matrix not Hermitian (error {herm:.3e})")));
        }
        let tr = self.trace();
        if (tr - 1.0).norm() > 1e-8 {
            return Err(Error::domain(format!("density matrix trace is {tr}")));
        }
        let min = self.min_eigenvalue();
        if min < -eig_tol {
            return Err(Error::domain(format!("density matrix has eigenvalue {min:.3e}")));
        }
        Ok(())
    }

    /// ⟨n̂ᵢ⟩ for every site.
    pub fn occupations(&self, basis: &FockBasis) -> Vec<f64> {
        (0..basis.n_sites())
            .map(|i| (0..self.dim).map(|k| self.get(k, k).re * basis.occupation(k, i)).sum())
            .collect()
    }

    pub fn total_atoms(&self, basis: &FockBasis) -> f64 {
        self.occupations(basis).iter().sum()
    }

    fn hermitize(entries: &mut [Complex64], d: usize) {
        for r in 0..d {
            entries[r * d + r].im = 0.0;
            for c in (r + 1)..d {
                let avg = 0.5 * (entries[r * d + c] + entries[c * d + r].conj());
                entries[r * d + c] = avg;
                entries[c * d + r] = avg.conj();
            }
        }
    }
}

/// For each basis index, the image under one bosonic operator: target index
/// and matrix element, if inside the basis.
type Ladder = Vec<Option<(usize, f64)>>;

/// Matrix-free ℒ(ρ) = −i[H, ρ] + Σᵢ γᵢ(âᵢρâᵢ† − ½{âᵢ†âᵢ, ρ}).
#[derive(Debug, Clone)]
pub struct Liouvillian {
    basis: FockBasis,
    j_coupling: f64,
    h_diag: Vec<f64>,
    // off-diagonal part of H, symmetric, per row
    hop: Vec<Vec<(usize, f64)>>,
    // ½ Σ γᵢ nᵢ(k)
    loss_diag: Vec<f64>,
    // (γᵢ, âᵢ† ladder) so âᵢρâᵢ† can be gathered row by row
    raise: Vec<(f64, Ladder)>,
    lower: Vec<(f64, Ladder)>,
    jumps: Vec<JumpOperatorSpec>,
}

impl Liouvillian {
    pub fn new(params: &LatticeParams, basis: &FockBasis, jumps: &[JumpOperatorSpec]) -> Result<Self> {
        Self::with_cap(params, basis, jumps, DEFAULT_MAX_DIM_SQ)
    }

    pub fn with_cap(
        params: &LatticeParams,
        basis: &FockBasis,
        jumps: &[JumpOperatorSpec],
        max_dim_sq: usize,
    ) -> Result<Self> {
        if params.n_sites() != basis.n_sites() {
            return Err(Error::Shape {
                expected: params.n_sites(),
                got: basis.n_sites(),
            });
        }
        let d = basis.dim();
        let dim_sq = d.saturating_mul(d);
        if dim_sq > max_dim_sq {
            return Err(Error::DimensionOverflow {
                dim: d,
                dim_sq,
                cap: max_dim_sq,
            });
        }
        for jp in jumps {
            if jp.site >= basis.n_sites() {
                return Err(Error::domain(format!("jump site {} out of range", jp.site)));
            }
            JumpOperatorSpec::new(jp.site, jp.rate)?;
        }
        let (j, u) = (params.j_coupling(), params.u_interaction());
        let h_diag = (0..d)
            .map(|k| {
                (0..basis.n_sites())
                    .map(|i| {
                        let n = basis.occupation(k, i);
                        0.5 * u * n * (n - 1.0)
                    })
                    .sum()
            })
            .collect();
        let mut hop = vec![Vec::new(); d];
        for k in 0..d {
            for i in 0..basis.n_sites().saturating_sub(1) {
                if let Some((t, amp)) = hop_target(basis, k, i, i + 1) {
                    hop[t].push((k, -j * amp));
                    hop[k].push((t, -j * amp));
                }
            }
        }
        let loss_diag = (0..d)
            .map(|k| jumps.iter().map(|jp| 0.5 * jp.rate * basis.occupation(k, jp.site)).sum())
            .collect();
        let raise = jumps.iter().map(|jp| (jp.rate, ladder(basis, jp.site, 1))).collect();
        let lower = jumps.iter().map(|jp| (jp.rate, ladder(basis, jp.site, -1))).collect();
        Ok(Self {
            basis: basis.clone(),
            j_coupling: j,
            h_diag,
            hop,
            loss_diag,
            raise,
            lower,
            jumps: jumps.to_vec(),
        })
    }

    pub fn basis(&self) -> &FockBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn jumps(&self) -> &[JumpOperatorSpec] {
        &self.jumps
    }

    pub fn total_loss_rate(&self) -> f64 {
        self.jumps.iter().map(|j| j.rate).sum()
    }

    /// out = ℒ(ρ) on row-major entries.
    pub fn apply_into(&self, rho: &[Complex64], out: &mut [Complex64]) {
        let d = self.dim();
        for r in 0..d {
            for c in 0..d {
                let x = rho[r * d + c];
                let mut comm = (self.h_diag[r] - self.h_diag[c]) * x;
                for &(k, v) in &self.hop[r] {
                    comm += v * rho[k * d + c];
                }
                for &(k, v) in &self.hop[c] {
                    comm -= v * rho[r * d + k];
                }
                let mut acc = -I * comm - (self.loss_diag[r] + self.loss_diag[c]) * x;
                for (rate, up) in &self.raise {
                    if let (Some((sr, ar)), Some((sc, ac))) = (up[r], up[c]) {
                        acc += rate * ar * ac * rho[sr * d + sc];
                    }
                }
                out[r * d + c] = acc;
            }
        }
    }

    pub fn apply(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        if rho.dim() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: rho.dim(),
            });
        }
        let mut out = vec![Complex64::new(0.0, 0.0); rho.entries.len()];
        self.apply_into(&rho.entries, &mut out);
        Ok(DensityMatrix { dim: rho.dim, entries: out })
    }

    /// max-entry norm of ℒ(ρ).
    pub fn residual(&self, rho: &DensityMatrix) -> Result<f64> {
        Ok(self.apply(rho)?.entries.iter().map(|z| z.norm()).fold(0.0, f64::max))
    }

    /// i·J⟨âₘ†(âₘ₋₁ + âₘ₊₁) − h.c.⟩, the coherent current into site m.
    pub fn coherent_current(&self, rho: &DensityMatrix, site: usize) -> f64 {
        let b = &self.basis;
        let d = b.dim();
        let mut s = Complex64::new(0.0, 0.0);
        for nb in [site.wrapping_sub(1), site + 1] {
            if nb >= b.n_sites() {
                continue;
            }
            // ⟨âₘ†â_nb⟩ = Σ_k ⟨t|âₘ†â_nb|k⟩ ρ[k][t]
            for k in 0..d {
                if let Some((t, amp)) = hop_target(b, k, site, nb) {
                    s += amp * rho.entries[k * d + t];
                }
            }
        }
        // i·J·(x − x*) = −2J·Im x
        -2.0 * self.j_coupling * s.im
    }

    /// ψ̇ = −i H_eff ψ with H_eff = H − (i/2)Σγᵢâᵢ†âᵢ.
    fn drift_into(&self, psi: &[Complex64], out: &mut [Complex64]) {
        for r in 0..self.dim() {
            let mut h = self.h_diag[r] * psi[r];
            for &(k, v) in &self.hop[r] {
                h += v * psi[k];
            }
            out[r] = -I * h - self.loss_diag[r] * psi[r];
        }
    }
}

/// Image of basis state k under âᵢ†â_j, if inside the basis.
fn hop_target(basis: &FockBasis, k: usize, i: usize, j: usize) -> Option<(usize, f64)> {
    let s = basis.state(k);
    if s[j] == 0 || s[i] as usize >= basis.n_max() {
        return None;
    }
    let mut t = s.to_vec();
    t[i] += 1;
    t[j] -= 1;
    let amp = ((s[i] as f64 + 1.0) * s[j] as f64).sqrt();
    basis.index_of(&t).map(|ti| (ti, amp))
}

/// âᵢ (dir = −1) or âᵢ† (dir = +1) acting on each basis state.
fn ladder(basis: &FockBasis, site: usize, dir: i32) -> Ladder {
    (0..basis.dim())
        .map(|k| {
            let s = basis.state(k);
            let n = s[site] as i32;
            let m = n + dir;
            if m < 0 {
                return None;
            }
            let mut t = s.to_vec();
            t[site] = m as u8;
            let amp = (n.max(m) as f64).sqrt();
            basis.index_of(&t).map(|ti| (ti, amp))
        })
        .collect()
}

fn as_real(z: &[Complex64]) -> &[f64] {
    // SAFETY: Complex64 is repr(C) { re, im }
    unsafe { std::slice::from_raw_parts(z.as_ptr() as *const f64, z.len() * 2) }
}

fn as_complex(x: &[f64]) -> &[Complex64] {
    // SAFETY: length is even by construction; layout as above
    unsafe { std::slice::from_raw_parts(x.as_ptr() as *const Complex64, x.len() / 2) }
}

fn as_complex_mut(x: &mut [f64]) -> &mut [Complex64] {
    // SAFETY: as above
    unsafe { std::slice::from_raw_parts_mut(x.as_mut_ptr() as *mut Complex64, x.len() / 2) }
}

/// Sampled density matrices.
#[derive(Debug, Clone)]
pub struct MasterTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
}

impl MasterTrajectory {
    /// ⟨n̂ᵢ⟩ per sample.
    pub fn occupations(&self, basis: &FockBasis) -> Vec<Vec<f64>> {
        self.states.iter().map(|r| r.occupations(basis)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MasterOptions {
    pub tol: f64,
    pub n_samples: usize,
    /// eigenvalues below −positivity_tol abort the run
    pub positivity_tol: f64,
    pub check_positivity: bool,
}

impl Default for MasterOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            n_samples: 51,
            positivity_tol: 1e-6,
            check_positivity: true,
        }
    }
}

pub fn evolve_master(rho0: &DensityMatrix, lv: &Liouvillian, t_final: f64, tol: f64) -> Result<MasterTrajectory> {
    evolve_master_with(
        rho0,
        lv,
        t_final,
        &MasterOptions {
            tol,
            ..MasterOptions::default()
        },
    )
}

pub fn evolve_master_with(
    rho0: &DensityMatrix,
    lv: &Liouvillian,
    t_final: f64,
    opts: &MasterOptions,
) -> Result<MasterTrajectory> {
    ensure_finite("t_final", t_final)?;
    if t_final < 0.0 || opts.n_samples < 2 || !(opts.tol > 0.0) {
        return Err(Error::domain("need t_final >= 0, n_samples >= 2 and tol > 0"));
    }
    if rho0.dim() != lv.dim() {
        return Err(Error::Shape {
            expected: lv.dim(),
            got: rho0.dim(),
        });
    }
    rho0.validate(opts.positivity_tol)?;
    let d = lv.dim();
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| lv.apply_into(as_complex(y), as_complex_mut(dy));
    let mut solver = Dopri5::new(rhs, 0.0, as_real(&rho0.entries).to_vec(), StepControl::new(opts.tol));
    let mut times = Vec::with_capacity(opts.n_samples);
    let mut states = Vec::with_capacity(opts.n_samples);
    for s in 0..opts.n_samples {
        let t = t_final * s as f64 / (opts.n_samples - 1) as f64;
        solver.advance_to_with(t, |_, y| {
            DensityMatrix::hermitize(as_complex_mut(y), d);
            true
        })?;
        let rho = DensityMatrix {
            dim: d,
            entries: as_complex(solver.state()).to_vec(),
        };
        if opts.check_positivity {
            let min = rho.min_eigenvalue();
            if min < -opts.positivity_tol {
                return Err(Error::IntegrationAccuracy { time: t, eigenvalue: min });
            }
        }
        times.push(t);
        states.push(rho);
    }
    Ok(MasterTrajectory { times, states })
}

/// Trajectory-averaged site occupations.
#[derive(Debug, Clone)]
pub struct TrajectoryAverage {
    pub times: Vec<f64>,
    /// [sample][site]
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub n_traj: usize,
    pub restarts: usize,
    pub jumps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryOptions {
    pub tol: f64,
    pub n_samples: usize,
    /// tolerance on ‖ψ‖² when locating a jump time
    pub jump_tol: f64,
    pub max_restarts: usize,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            n_samples: 21,
            jump_tol: 1e-6,
            max_restarts: 100,
        }
    }
}

pub fn evolve_trajectories(
    psi0: &[Complex64],
    lv: &Liouvillian,
    t_final: f64,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryAverage> {
    evolve_trajectories_with(psi0, lv, t_final, n_traj, seed, &TrajectoryOptions::default())
}

pub fn evolve_trajectories_with(
    psi0: &[Complex64],
    lv: &Liouvillian,
    t_final: f64,
    n_traj: usize,
    seed: u64,
    opts: &TrajectoryOptions,
) -> Result<TrajectoryAverage> {
    ensure_finite("t_final", t_final)?;
    if n_traj == 0 {
        return Err(Error::domain("n_traj must be >= 1"));
    }
    if t_final < 0.0 || opts.n_samples < 2 {
        return Err(Error::domain("need t_final >= 0 and n_samples >= 2"));
    }
    if psi0.len() != lv.dim() {
        return Err(Error::Shape {
            expected: lv.dim(),
            got: psi0.len(),
        });
    }
    let norm: f64 = psi0.iter().map(|z| z.norm_sqr()).sum();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::domain("initial state has zero or non-finite norm"));
    }
    let psi0: Vec<Complex64> = psi0.iter().map(|z| z / norm.sqrt()).collect();
    let times: Vec<f64> = (0..opts.n_samples)
        .map(|s| t_final * s as f64 / (opts.n_samples - 1) as f64)
        .collect();

    let runs: Vec<Result<SingleRun>> = (0..n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let mut restarts = 0;
            loop {
                match single_trajectory(&psi0, lv, &times, &mut rng, opts)? {
                    Some(mut run) => {
                        run.restarts = restarts;
                        return Ok(run);
                    }
                    None => {
                        restarts += 1;
                        log::warn!("trajectory {k}: zero-norm collapse, restart {restarts}");
                        if restarts > opts.max_restarts {
                            return Err(Error::domain(format!("trajectory {k} collapsed {restarts} times")));
                        }
                    }
                }
            }
        })
        .collect();

    let n_sites = lv.basis().n_sites();
    let mut mean = vec![vec![0.0; n_sites]; times.len()];
    let mut m2 = vec![vec![0.0; n_sites]; times.len()];
    let (mut restarts, mut jumps) = (0, 0);
    // Welford in index order: identical inputs give exactly zero spread
    for (count, run) in runs.into_iter().enumerate() {
        let run = run?;
        restarts += run.restarts;
        jumps += run.jumps;
        let w = (count + 1) as f64;
        for (s, occ) in run.occupations.iter().enumerate() {
            for i in 0..n_sites {
                let delta = occ[i] - mean[s][i];
                mean[s][i] += delta / w;
                m2[s][i] += delta * (occ[i] - mean[s][i]);
            }
        }
    }
    let stderr = m2
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| {
                    if n_traj > 1 {
                        (v / (n_traj - 1) as f64 / n_traj as f64).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(TrajectoryAverage {
        times,
        mean,
        stderr,
        n_traj,
        restarts,
        jumps,
    })
}

struct SingleRun {
    occupations: Vec<Vec<f64>>,
    restarts: usize,
    jumps: usize,
}

fn propagate(lv: &Liouvillian, psi: &[Complex64], dt: f64, tol: f64) -> Result<Vec<Complex64>> {
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| lv.drift_into(as_complex(y), as_complex_mut(dy));
    let mut solver = Dopri5::new(rhs, 0.0, as_real(psi).to_vec(), StepControl::new(tol));
    solver.advance_to(dt)?;
    Ok(as_complex(solver.state()).to_vec())
}

fn norm_sqr(psi: &[Complex64]) -> f64 {
    psi.iter().map(|z| z.norm_sqr()).sum()
}

fn normalized_occupations(basis: &FockBasis, psi: &[Complex64]) -> Vec<f64> {
    let n = norm_sqr(psi);
    (0..basis.n_sites())
        .map(|i| psi.iter().enumerate().map(|(k, z)| z.norm_sqr() * basis.occupation(k, i)).sum::<f64>() / n)
        .collect()
}

/// One quantum-jump trajectory; None on zero-norm collapse.
fn single_trajectory(
    psi0: &[Complex64],
    lv: &Liouvillian,
    times: &[f64],
    rng: &mut ChaCha8Rng,
    opts: &TrajectoryOptions,
) -> Result<Option<SingleRun>> {
    let basis = lv.basis();
    let mut psi = psi0.to_vec();
    let mut t = 0.0;
    let mut r: f64 = 1.0 - rng.random::<f64>();
    let mut occupations = Vec::with_capacity(times.len());
    let mut jumps = 0;
    for &ts in times {
        while t < ts {
            let next = propagate(lv, &psi, ts - t, opts.tol)?;
            if norm_sqr(&next) > r {
                psi = next;
                t = ts;
                break;
            }
            // the norm decays monotonically, so bisect the crossing
            let (mut lo, mut hi) = (0.0, ts - t);
            let at = loop {
                let mid = 0.5 * (lo + hi);
                let trial = propagate(lv, &psi, mid, opts.tol)?;
                let n = norm_sqr(&trial);
                if (n - r).abs() <= opts.jump_tol || hi - lo <= 1e-15 * ts.max(1.0) {
                    hi = mid;
                    break trial;
                }
                if n > r {
                    lo = mid;
                } else {
                    hi = mid;
                }
            };
            t += hi;
            psi = at;
            let weights: Vec<f64> = lv
                .lower
                .iter()
                .map(|(rate, low)| rate * jumped(low, &psi).iter().map(|z| z.norm_sqr()).sum::<f64>())
                .collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                return Ok(None);
            }
            let mut pick = rng.random::<f64>() * total;
            let mut ch = weights.len() - 1;
            for (c, w) in weights.iter().enumerate() {
                if pick < *w {
                    ch = c;
                    break;
                }
                pick -= w;
            }
            let after = jumped(&lv.lower[ch].1, &psi);
            let n = norm_sqr(&after);
            if !(n > 0.0) {
                return Ok(None);
            }
            psi = after.iter().map(|z| z / n.sqrt()).collect();
            jumps += 1;
            r = 1.0 - rng.random::<f64>();
        }
        occupations.push(normalized_occupations(basis, &psi));
    }
    Ok(Some(SingleRun {
        occupations,
        restarts: 0,
        jumps,
    }))
}

fn jumped(low: &Ladder, psi: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); psi.len()];
    for (k, z) in psi.iter().enumerate() {
        if let Some((t, amp)) = low[k] {
            out[t] += amp * z;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NessMethod {
    LongTime,
    PowerIteration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NessOptions {
    pub residual_tol: f64,
    pub max_time_factor: f64,
    pub max_iterations: usize,
}

impl Default for NessOptions {
    fn default() -> Self {
        Self {
            residual_tol: 1e-8,
            max_time_factor: 1e4,
            max_iterations: 10_000_000,
        }
    }
}

pub fn find_ness(lv: &Liouvillian, method: NessMethod) -> Result<DensityMatrix> {
    find_ness_from(lv, method, &DensityMatrix::maximally_mixed(lv.dim()), &NessOptions::default())
}

pub fn find_ness_from(
    lv: &Liouvillian,
    method: NessMethod,
    start: &DensityMatrix,
    opts: &NessOptions,
) -> Result<DensityMatrix> {
    let gamma = lv.total_loss_rate();
    if gamma == 0.0 {
        return Err(Error::NonUniqueSteadyState);
    }
    if start.dim() != lv.dim() {
        return Err(Error::Shape {
            expected: lv.dim(),
            got: start.dim(),
        });
    }
    let d = lv.dim();
    match method {
        NessMethod::LongTime => {
            let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| lv.apply_into(as_complex(y), as_complex_mut(dy));
            let mut solver = Dopri5::new(rhs, 0.0, as_real(&start.entries).to_vec(), StepControl::new(1e-12));
            let t_max = opts.max_time_factor / gamma;
            let chunk = 1.0 / gamma;
            loop {
                let t = solver.time() + chunk;
                solver.advance_to_with(t, |_, y| {
                    DensityMatrix::hermitize(as_complex_mut(y), d);
                    true
                })?;
                let rho = DensityMatrix {
                    dim: d,
                    entries: as_complex(solver.state()).to_vec(),
                };
                if lv.residual(&rho)? < opts.residual_tol {
                    return Ok(rho);
                }
                if t >= t_max {
                    return Err(Error::Divergent { t_max });
                }
            }
        }
        NessMethod::PowerIteration => {
            // iterate the RK4 polynomial of εℒ; it contracts every mode with
            // Re λ < 0 for |ελ| inside the stability disc, unlike 1 + εℒ
            let eps = 1.0 / spectral_bound(lv);
            let mut rho = start.entries.clone();
            let mut k = [vec![Complex64::new(0.0, 0.0); d * d], vec![Complex64::new(0.0, 0.0); d * d]];
            for it in 0..opts.max_iterations {
                // k0 = ρ; accumulate Σ (εℒ)^n/n! ρ
                k[0].copy_from_slice(&rho);
                let mut next = rho.clone();
                let mut fact = 1.0;
                for n in 1..=4 {
                    let (a, b) = k.split_at_mut(1);
                    lv.apply_into(&a[0], &mut b[0]);
                    fact *= n as f64;
                    for (x, y) in next.iter_mut().zip(&b[0]) {
                        *x += y * (eps.powi(n) / fact);
                    }
                    k.swap(0, 1);
                }
                DensityMatrix::hermitize(&mut next, d);
                let tr: Complex64 = (0..d).map(|i| next[i * d + i]).sum();
                for x in next.iter_mut() {
                    *x /= tr.re;
                }
                rho = next;
                if it % 16 == 0 {
                    let m = DensityMatrix {
                        dim: d,
                        entries: rho.clone(),
                    };
                    if lv.residual(&m)? < opts.residual_tol {
                        return Ok(m);
                    }
                }
            }
            Err(Error::Divergent {
                t_max: eps * opts.max_iterations as f64,
            })
        }
    }
}

/// Upper bound on |λ| for ℒ from Gershgorin row sums of H and the loss terms.
fn spectral_bound(lv: &Liouvillian) -> f64 {
    let h: f64 = (0..lv.dim())
        .map(|r| lv.h_diag[r].abs() + lv.hop[r].iter().map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let n = lv.basis().n_max() as f64;
    2.0 * h + 2.0 * lv.jumps.iter().map(|j| j.rate * n).sum::<f64>() + f64::MIN_POSITIVE
}
