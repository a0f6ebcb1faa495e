//! Steady-state records shared by the lumped solver, the sweep engine and the writers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InitialCondition {
    Full,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    Meanfield,
    TwoMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Converged,
    NotConverged,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateRecord {
    pub j_coupling: f64,
    pub gamma: f64,
    pub n0: f64,
    pub initial_condition: InitialCondition,
    #[serde(with = "nan_as_null")]
    pub filling_ratio: f64,
    #[serde(with = "nan_as_null")]
    pub current: f64,
    #[serde(with = "nan_as_null")]
    pub delta_phi: f64,
    /// Relaxation time in seconds; `None` when it could not be measured.
    pub tau: Option<f64>,
    pub solver: SolverKind,
    pub status: RunStatus,
}

/// JSON has no NaN; failed runs carry `null` instead.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl SteadyStateRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        j_coupling: f64,
        gamma: f64,
        n0: f64,
        initial_condition: InitialCondition,
        filling_ratio: f64,
        delta_phi: f64,
        tau: Option<f64>,
        solver: SolverKind,
        status: RunStatus,
    ) -> Self {
        Self {
            j_coupling,
            gamma,
            n0,
            initial_condition,
            filling_ratio,
            current: gamma * filling_ratio * n0,
            delta_phi,
            tau,
            solver,
            status,
        }
    }

    /// Placeholder for a run that raised an error.
    pub fn failed(
        j_coupling: f64,
        gamma: f64,
        n0: f64,
        initial_condition: InitialCondition,
        solver: SolverKind,
        message: String,
    ) -> Self {
        Self::new(
            j_coupling,
            gamma,
            n0,
            initial_condition,
            f64::NAN,
            f64::NAN,
            None,
            solver,
            RunStatus::Failed(message),
        )
    }

    pub fn filling(&self) -> f64 {
        self.filling_ratio * self.n0
    }

    pub fn is_converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    /// current = γ·(N_S/N₀)·N₀, bit for bit.
    pub fn is_self_consistent(&self) -> bool {
        let c = self.gamma * self.filling_ratio * self.n0;
        c == self.current || (c.is_nan() && self.current.is_nan())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn current_is_exact_product() {
        let r = SteadyStateRecord::new(
            230.0,
            10.0,
            700.0,
            InitialCondition::Full,
            1.0,
            0.01,
            Some(0.0),
            SolverKind::TwoMode,
            RunStatus::Converged,
        );
        assert_eq!(r.current, 7000.0);
        assert!(r.is_self_consistent());
        let f = SteadyStateRecord::failed(230.0, 1.0, 700.0, InitialCondition::Empty, SolverKind::TwoMode, "x".into());
        assert!(f.is_self_consistent());
        assert!(!f.is_converged());
    }
}
