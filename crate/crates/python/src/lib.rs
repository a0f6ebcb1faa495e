//! Python bindings. Results come back as plain lists, tuples and small record objects.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use jjarray_core::config;
use jjarray_core::lindblad::{self, DensityMatrix, FockBasis, JumpOperatorSpec, Liouvillian, MasterOptions, TrajectoryOptions};
use jjarray_core::meanfield::{self, Boundary, EvolveOptions, InitialKind};
use jjarray_core::model::{CouplingModel, LatticeParams as CoreLattice, DEFAULT_N0, DEFAULT_U_INTERACTION};
use jjarray_core::record::{InitialCondition, RunStatus, SteadyStateRecord as CoreRecord};
use jjarray_core::sweep;
use jjarray_core::twomode::{self, RateModelParams, SweepDirection, TwoModeRunOptions};

fn err(e: jjarray_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn initial_condition(s: &str) -> PyResult<InitialCondition> {
    match s.to_ascii_lowercase().as_str() {
        "full" => Ok(InitialCondition::Full),
        "empty" => Ok(InitialCondition::Empty),
        _ => Err(PyValueError::new_err(format!("initial condition must be 'full' or 'empty', got {s:?}"))),
    }
}

#[pyclass(name = "LatticeParams", frozen, from_py_object)]
#[derive(Clone)]
struct PyLattice {
    inner: CoreLattice,
}

#[pymethods]
impl PyLattice {
    /// The lossy site defaults to the centre.
    #[new]
    #[pyo3(signature = (n_sites=41, j=230.0, u=DEFAULT_U_INTERACTION, gamma=0.0, lossy_site=None, n0=DEFAULT_N0))]
    fn new(n_sites: usize, j: f64, u: f64, gamma: f64, lossy_site: Option<usize>, n0: f64) -> PyResult<Self> {
        let m = lossy_site.unwrap_or(n_sites / 2);
        Ok(Self {
            inner: CoreLattice::new(n_sites, j, u, gamma, m, n0).map_err(err)?,
        })
    }

    #[getter]
    fn n_sites(&self) -> usize {
        self.inner.n_sites()
    }
    #[getter]
    fn j(&self) -> f64 {
        self.inner.j_coupling()
    }
    #[getter]
    fn u(&self) -> f64 {
        self.inner.u_interaction()
    }
    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }
    #[getter]
    fn lossy_site(&self) -> usize {
        self.inner.lossy_site()
    }
    #[getter]
    fn n0(&self) -> f64 {
        self.inner.n0()
    }

    fn with_gamma(&self, gamma: f64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_gamma(gamma).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "LatticeParams(n_sites={}, j={}, u={}, gamma={}, lossy_site={}, n0={})",
            p.n_sites(),
            p.j_coupling(),
            p.u_interaction(),
            p.gamma(),
            p.lossy_site(),
            p.n0()
        )
    }
}

#[pyclass(name = "SteadyStateRecord", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyRecord {
    j_coupling: f64,
    gamma: f64,
    n0: f64,
    initial_condition: String,
    filling_ratio: f64,
    current: f64,
    delta_phi: f64,
    tau: Option<f64>,
    solver: String,
    status: String,
}

impl From<&CoreRecord> for PyRecord {
    fn from(r: &CoreRecord) -> Self {
        Self {
            j_coupling: r.j_coupling,
            gamma: r.gamma,
            n0: r.n0,
            initial_condition: format!("{:?}", r.initial_condition),
            filling_ratio: r.filling_ratio,
            current: r.current,
            delta_phi: r.delta_phi,
            tau: r.tau,
            solver: format!("{:?}", r.solver),
            status: match &r.status {
                RunStatus::Failed(m) => format!("Failed: {m}"),
                s => format!("{s:?}"),
            },
        }
    }
}

#[pymethods]
impl PyRecord {
    fn __repr__(&self) -> String {
        format!(
            "SteadyStateRecord(j={}, gamma={}, start={}, filling_ratio={}, status={})",
            self.j_coupling, self.gamma, self.initial_condition, self.filling_ratio, self.status
        )
    }
}

/// Lumped reservoir/site model with the default coupling and closure.
#[pyclass(name = "RateModel", frozen)]
struct PyRateModel {
    inner: RateModelParams,
}

#[pymethods]
impl PyRateModel {
    #[new]
    fn new(lattice: PyLattice) -> PyResult<Self> {
        Ok(Self {
            inner: RateModelParams::default_for(lattice.inner).map_err(err)?,
        })
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }

    /// List of (filling_ratio, delta_phi, stability).
    fn fixed_points(&self) -> PyResult<Vec<(f64, f64, String)>> {
        let n0 = self.inner.lattice.n0();
        Ok(twomode::find_fixed_points(&self.inner)
            .map_err(err)?
            .iter()
            .map(|f| (f.state.n / n0, f.state.delta_phi, format!("{:?}", f.stability)))
            .collect())
    }

    fn steady_state(&self, initial: &str) -> PyResult<PyRecord> {
        let r = twomode::steady_state(&self.inner, initial_condition(initial)?, &TwoModeRunOptions::default()).map_err(err)?;
        Ok((&r).into())
    }

    /// Adiabatic sweep; "down" follows the full branch, "up" the empty one.
    fn hysteresis_sweep(&self, gammas: Vec<f64>, direction: &str) -> PyResult<Vec<PyRecord>> {
        let dir = match direction {
            "down" => SweepDirection::Down,
            "up" => SweepDirection::Up,
            _ => return Err(PyValueError::new_err("direction must be 'up' or 'down'")),
        };
        let recs = twomode::hysteresis_sweep(&self.inner, &gammas, dir).map_err(err)?;
        Ok(recs.iter().map(Into::into).collect())
    }
}

/// Mean-field evolution from a full or emptied lossy site; returns (times, lossy-site fillings).
/// `boundary` is "clamped" or "open".
#[pyfunction]
#[pyo3(signature = (lattice, initial, t_final, n_samples=101, tol=1e-8, boundary="clamped"))]
fn evolve_meanfield(
    lattice: PyLattice,
    initial: &str,
    t_final: f64,
    n_samples: usize,
    tol: f64,
    boundary: &str,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let p = lattice.inner;
    let boundary = match boundary {
        "clamped" => Boundary::ClampedEdges,
        "open" => Boundary::Open,
        _ => return Err(PyValueError::new_err("boundary must be 'clamped' or 'open'")),
    };
    let kind = match initial_condition(initial)? {
        InitialCondition::Full => InitialKind::FullUniform,
        InitialCondition::Empty => InitialKind::EmptyLossySite,
    };
    let s = meanfield::prepare_initial(&p, kind, meanfield::DEFAULT_SEED_FRACTION).map_err(err)?;
    let opts = EvolveOptions {
        tol,
        n_samples,
        boundary,
        ..EvolveOptions::default()
    };
    let tr = meanfield::evolve_with(&s, &p, &CouplingModel::default_for(p.n0()), t_final, &opts).map_err(err)?;
    Ok((tr.times(), tr.lossy_filling()))
}

/// Two-mode phase diagram; returns (points, lines) with points as
/// (j, gamma, label, full_ratio, empty_ratio) and lines as (j, gamma_rb, gamma_csd, gamma_sf).
#[pyfunction]
#[pyo3(signature = (j_grid=None, gamma_over_j=None))]
#[allow(clippy::type_complexity)]
fn phase_diagram(
    j_grid: Option<Vec<f64>>,
    gamma_over_j: Option<Vec<f64>>,
) -> PyResult<(Vec<(f64, f64, String, f64, f64)>, Vec<(f64, Option<f64>, Option<f64>, Option<f64>)>)> {
    let js = j_grid.unwrap_or_else(sweep::default_j_grid);
    let xs = gamma_over_j.unwrap_or_else(sweep::default_gamma_over_j_grid);
    let lat = CoreLattice::centered(41, js.first().copied().unwrap_or(230.0), DEFAULT_U_INTERACTION, 0.0, DEFAULT_N0).map_err(err)?;
    let t = sweep::two_mode_template(lat).map_err(err)?;
    let pd = sweep::build_phase_diagram(&js, &xs, &t, &sweep::Thresholds::default()).map_err(err)?;
    let points = pd
        .points
        .iter()
        .map(|p| (p.j_coupling, p.gamma, format!("{:?}", p.label), p.full.filling_ratio, p.empty.filling_ratio))
        .collect();
    let v = |r: Option<sweep::CriticalRate>| r.map(|r| r.value);
    let lines = pd
        .lines
        .iter()
        .map(|l| (l.j_coupling, v(l.rates.gamma_rb), v(l.rates.gamma_csd), v(l.rates.gamma_sf)))
        .collect();
    Ok((points, lines))
}

/// Returns (amplitude, exponent, exponent_stderr) of y = A·x^b.
#[pyfunction]
fn fit_power_law(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y differ in length"));
    }
    let pairs: Vec<(f64, f64)> = x.into_iter().zip(y).collect();
    let f = sweep::fit_power_law(&pairs).map_err(err)?;
    Ok((f.amplitude, f.exponent, f.exponent_stderr))
}

fn liouvillian(lattice: &PyLattice, n_max: usize, cap: Option<usize>) -> PyResult<Liouvillian> {
    let p = &lattice.inner;
    let basis = FockBasis::new(p.n_sites(), n_max, cap).map_err(err)?;
    Liouvillian::new(p, &basis, &[JumpOperatorSpec::from_lattice(p)]).map_err(err)
}

/// Master-equation occupations from a Fock state; returns (times, [[n_k] per sample]).
#[pyfunction]
#[pyo3(signature = (lattice, occupation, t_final, n_max=3, n_total_cap=None, n_samples=51, tol=1e-10))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn lindblad_master(
    lattice: PyLattice,
    occupation: Vec<u8>,
    t_final: f64,
    n_max: usize,
    n_total_cap: Option<usize>,
    n_samples: usize,
    tol: f64,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let lv = liouvillian(&lattice, n_max, n_total_cap)?;
    let psi = lv.basis().fock_state(&occupation).map_err(err)?;
    let rho0 = DensityMatrix::from_pure(&psi).map_err(err)?;
    let opts = MasterOptions {
        tol,
        n_samples,
        ..MasterOptions::default()
    };
    let tr = lindblad::evolve_master_with(&rho0, &lv, t_final, &opts).map_err(err)?;
    let occ = tr.occupations(lv.basis());
    Ok((tr.times, occ))
}

/// Quantum-jump average; returns (times, mean, stderr).
#[pyfunction]
#[pyo3(signature = (lattice, occupation, t_final, n_traj, seed=0, n_max=3, n_total_cap=None, n_samples=21))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn lindblad_trajectories(
    lattice: PyLattice,
    occupation: Vec<u8>,
    t_final: f64,
    n_traj: usize,
    seed: u64,
    n_max: usize,
    n_total_cap: Option<usize>,
    n_samples: usize,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let lv = liouvillian(&lattice, n_max, n_total_cap)?;
    let psi = lv.basis().fock_state(&occupation).map_err(err)?;
    let opts = TrajectoryOptions {
        n_samples,
        ..TrajectoryOptions::default()
    };
    let avg = lindblad::evolve_trajectories_with(&psi, &lv, t_final, n_traj, seed, &opts).map_err(err)?;
    Ok((avg.times, avg.mean, avg.stderr))
}

/// Parses a TOML run config and returns its normalized form.
#[pyfunction]
fn normalize_config(text: &str) -> PyResult<String> {
    Ok(config::parse_config(text).map_err(err)?.dump())
}

#[pymodule]
fn jjarray(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLattice>()?;
    m.add_class::<PyRecord>()?;
    m.add_class::<PyRateModel>()?;
    m.add_function(wrap_pyfunction!(evolve_meanfield, m)?)?;
    m.add_function(wrap_pyfunction!(phase_diagram, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    m.add_function(wrap_pyfunction!(lindblad_master, m)?)?;
    m.add_function(wrap_pyfunction!(lindblad_trajectories, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    Ok(())
}
