//! Shared lattice parameters and the filling-dependent coupling models.
//!
//! Units: ħ = 1. Every energy is stored as an angular rate in s⁻¹, so
//! `j_coupling = 230.0` means J/ħ = 230 s⁻¹.

use crate::error::{ensure_finite, Error, Result};

/// Default on-site interaction U/ħ in s⁻¹ (U·N₀ = 3.5·10⁴ s⁻¹ at N₀ = 700).
pub const DEFAULT_U_INTERACTION: f64 = 50.0;
/// Default reservoir filling, atoms per site.
pub const DEFAULT_N0: f64 = 700.0;
/// Default chain length for the mean-field lattice.
pub const DEFAULT_N_SITES: usize = 41;

/// Physical configuration of the array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeParams {
    n_sites: usize,
    j_coupling: f64,
    u_interaction: f64,
    gamma: f64,
    lossy_site: usize,
    n0: f64,
}

impl LatticeParams {
    pub fn new(
        n_sites: usize,
        j_coupling: f64,
        u_interaction: f64,
        gamma: f64,
        lossy_site: usize,
        n0: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("j_coupling", j_coupling),
            ("u_interaction", u_interaction),
            ("gamma", gamma),
            ("n0", n0),
        ] {
            ensure_finite(name, v)?;
        }
        if n_sites == 0 {
            return Err(Error::domain("n_sites must be positive"));
        }
        if lossy_site >= n_sites {
            return Err(Error::domain(format!(
                "lossy_site {lossy_site} out of range for {n_sites} sites"
            )));
        }
        if j_coupling <= 0.0 {
            return Err(Error::domain(format!("j_coupling must be > 0, got {j_coupling}")));
        }
        if u_interaction < 0.0 {
            return Err(Error::domain(format!(
                "u_interaction must be >= 0, got {u_interaction}"
            )));
        }
        if gamma < 0.0 {
            return Err(Error::domain(format!("gamma must be >= 0, got {gamma}")));
        }
        if n0 <= 0.0 {
            return Err(Error::domain(format!("n0 must be > 0, got {n0}")));
        }
        Ok(Self {
            n_sites,
            j_coupling,
            u_interaction,
            gamma,
            lossy_site,
            n0,
        })
    }

    /// Chain with the lossy site in the middle.
    pub fn centered(n_sites: usize, j_coupling: f64, u_interaction: f64, gamma: f64, n0: f64) -> Result<Self> {
        Self::new(n_sites, j_coupling, u_interaction, gamma, n_sites / 2, n0)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }
    pub fn j_coupling(&self) -> f64 {
        self.j_coupling
    }
    pub fn u_interaction(&self) -> f64 {
        self.u_interaction
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn lossy_site(&self) -> usize {
        self.lossy_site
    }
    pub fn n0(&self) -> f64 {
        self.n0
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.n_sites, self.j_coupling, self.u_interaction, gamma, self.lossy_site, self.n0)
    }

    pub fn with_j(&self, j_coupling: f64) -> Result<Self> {
        Self::new(self.n_sites, j_coupling, self.u_interaction, self.gamma, self.lossy_site, self.n0)
    }

    pub fn with_u(&self, u_interaction: f64) -> Result<Self> {
        Self::new(self.n_sites, self.j_coupling, u_interaction, self.gamma, self.lossy_site, self.n0)
    }

    /// One tunneling time ħ/J in seconds.
    pub fn tunneling_time(&self) -> f64 {
        1.0 / self.j_coupling
    }
}

/// Tunneling coupling between the reservoir and a partially emptied site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingModel {
    /// J′ = J regardless of the population difference.
    Constant,
    /// Gaussian suppression J′ = J·exp(−(max(ΔN, 0)/width)²).
    FranckCondon { width: f64 },
}

impl CouplingModel {
    pub fn franck_condon(width: f64) -> Result<Self> {
        ensure_finite("fc_width", width)?;
        if width <= 0.0 {
            return Err(Error::domain(format!("fc_width must be > 0, got {width}")));
        }
        Ok(CouplingModel::FranckCondon { width })
    }

    /// Franck-Condon coupling with the default width N₀/4.
    pub fn default_for(n0: f64) -> Self {
        CouplingModel::FranckCondon { width: n0 / 4.0 }
    }

    /// J′(ΔN) for a population difference `delta_n = N_reservoir − N_site`.
    pub fn effective_coupling(&self, j: f64, delta_n: f64) -> Result<f64> {
        ensure_finite("delta_n", delta_n)?;
        ensure_finite("j", j)?;
        if j <= 0.0 {
            return Err(Error::domain(format!("coupling J must be > 0, got {j}")));
        }
        Ok(self.eval(j, delta_n))
    }

    /// Unchecked evaluation for inner loops.
    #[inline]
    pub fn eval(&self, j: f64, delta_n: f64) -> f64 {
        match *self {
            CouplingModel::Constant => j,
            CouplingModel::FranckCondon { width } => {
                let x = delta_n.max(0.0) / width;
                // exp underflows to zero past x ≈ 27; keep J′ strictly positive
                (j * (-x * x).exp()).max(j * f64::MIN_POSITIVE)
            }
        }
    }

    /// dJ′/d(ΔN), used by analytic Jacobians.
    #[inline]
    pub fn eval_derivative(&self, j: f64, delta_n: f64) -> f64 {
        match *self {
            CouplingModel::Constant => 0.0,
            CouplingModel::FranckCondon { width } => {
                if delta_n <= 0.0 {
                    0.0
                } else {
                    let x = delta_n / width;
                    -2.0 * x / width * j * (-x * x).exp()
                }
            }
        }
    }
}

/// Filling → chemical potential conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChemicalPotentialModel {
    /// μ(N) = U·N.
    Linear { u: f64 },
}

impl ChemicalPotentialModel {
    pub fn linear(u: f64) -> Result<Self> {
        ensure_finite("u", u)?;
        if u <= 0.0 {
            return Err(Error::domain(format!(
                "linear chemical potential needs U > 0, got {u}"
            )));
        }
        Ok(ChemicalPotentialModel::Linear { u })
    }

    #[inline]
    pub fn mu(&self, n: f64) -> f64 {
        match *self {
            ChemicalPotentialModel::Linear { u } => u * n,
        }
    }

    #[inline]
    pub fn dmu_dn(&self, _n: f64) -> f64 {
        match *self {
            ChemicalPotentialModel::Linear { u } => u,
        }
    }

    /// Δμ = μ(N_reservoir) − μ(N_site).
    pub fn chemical_potential_difference(&self, n_reservoir: f64, n_site: f64) -> Result<f64> {
        ensure_finite("n_reservoir", n_reservoir)?;
        ensure_finite("n_site", n_site)?;
        if n_reservoir < 0.0 || n_site < 0.0 {
            return Err(Error::domain(format!(
                "fillings must be non-negative, got ({n_reservoir}, {n_site})"
            )));
        }
        Ok(self.mu(n_reservoir) - self.mu(n_site))
    }
}
