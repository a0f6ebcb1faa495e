//! Run configuration in TOML with strict keys and normalized dumps.
//!
//! ```toml
//! solver = "TwoMode"          # Meanfield | TwoMode | Lindblad
//! rng_seed = 7
//! output = "out.csv"
//!
//! [lattice]
//! j = 230.0
//! gamma = 100.0
//! ```
//!
//! Every other key has a default; `dump` writes them all out.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lindblad::{FockBasis, JumpOperatorSpec, Liouvillian};
use crate::meanfield::{Boundary, EvolveOptions, MeanfieldRunOptions, DEFAULT_DEPLETION_LIMIT};
use crate::model::{
    ChemicalPotentialModel, CouplingModel, LatticeParams, DEFAULT_N0, DEFAULT_N_SITES, DEFAULT_U_INTERACTION,
};
use crate::record::{InitialCondition, SolverKind};
use crate::sweep::{self, SolverTemplate, Thresholds};
use crate::twomode::{
    PhaseClosure, RateModelParams, RelaxOptions, TwoModeRunOptions, DEFAULT_EPSILON, DEFAULT_KAPPA_COEFFICIENT,
    DEFAULT_SEED_FRACTION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverChoice {
    Meanfield,
    TwoMode,
    Lindblad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    #[serde(default = "d_n_sites")]
    pub n_sites: usize,
    #[serde(default = "d_j")]
    pub j: f64,
    #[serde(default = "d_u")]
    pub u: f64,
    #[serde(default)]
    pub gamma: f64,
    /// centre site when omitted
    #[serde(default)]
    pub lossy_site: Option<usize>,
    #[serde(default = "d_n0")]
    pub n0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouplingKind {
    Constant,
    FranckCondon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    #[serde(default = "d_coupling_kind")]
    pub kind: CouplingKind,
    /// N₀/4 when omitted
    #[serde(default)]
    pub width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuSection {
    /// lattice.u when omitted
    #[serde(default)]
    pub u: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoModeSection {
    #[serde(default = "d_kappa")]
    pub kappa_coefficient: f64,
    #[serde(default = "d_closure")]
    pub closure: PhaseClosure,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_seed")]
    pub seed_fraction: f64,
    #[serde(default = "d_tol_tm")]
    pub tol: f64,
    /// 100/γ or 10⁴/J, whichever is larger, when omitted
    #[serde(default)]
    pub t_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanfieldStart {
    Full,
    Empty,
    Bloch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanfieldSection {
    #[serde(default = "d_tunneling_times")]
    pub tunneling_times: f64,
    #[serde(default = "d_tol_mf")]
    pub tol: f64,
    #[serde(default = "d_mf_samples")]
    pub n_samples: usize,
    #[serde(default = "d_boundary")]
    pub boundary: Boundary,
    /// 0 disables the guard
    #[serde(default = "d_depletion")]
    pub depletion_limit: f64,
    #[serde(default = "d_seed")]
    pub seed_fraction: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_start")]
    pub initial: MeanfieldStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LindbladSection {
    #[serde(default = "d_n_max")]
    pub n_max: usize,
    /// n_sites·n_max when omitted
    #[serde(default)]
    pub n_total_cap: Option<usize>,
    /// initial Fock occupations; one atom per site when omitted
    #[serde(default)]
    pub initial: Option<Vec<u8>>,
    #[serde(default = "d_t_final")]
    pub t_final: f64,
    #[serde(default = "d_l_samples")]
    pub n_samples: usize,
    #[serde(default = "d_n_traj")]
    pub n_traj: usize,
    #[serde(default = "d_tol_l")]
    pub tol: f64,
    #[serde(default = "d_dim_sq")]
    pub max_dim_sq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    #[serde(default = "sweep::default_j_grid")]
    pub j: Vec<f64>,
    #[serde(default = "sweep::default_gamma_over_j_grid")]
    pub gamma_over_j: Vec<f64>,
    #[serde(default = "d_high")]
    pub threshold_high: f64,
    #[serde(default = "d_agree")]
    pub threshold_agree: f64,
}

/// Fully normalized configuration: every optional key filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub solver: Option<SolverChoice>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "d_output")]
    pub output: String,
    #[serde(default = "d_format")]
    pub format: OutputFormat,
    #[serde(default = "d_lattice")]
    pub lattice: LatticeSection,
    #[serde(default = "d_coupling")]
    pub coupling: CouplingSection,
    #[serde(default = "d_mu")]
    pub mu: MuSection,
    #[serde(default = "d_two_mode")]
    pub two_mode: TwoModeSection,
    #[serde(default = "d_meanfield")]
    pub meanfield: MeanfieldSection,
    #[serde(default = "d_lindblad")]
    pub lindblad: LindbladSection,
    #[serde(default = "d_scan")]
    pub scan: ScanSection,
}

fn d_n_sites() -> usize {
    DEFAULT_N_SITES
}
fn d_j() -> f64 {
    230.0
}
fn d_u() -> f64 {
    DEFAULT_U_INTERACTION
}
fn d_n0() -> f64 {
    DEFAULT_N0
}
fn d_coupling_kind() -> CouplingKind {
    CouplingKind::FranckCondon
}
fn d_kappa() -> f64 {
    DEFAULT_KAPPA_COEFFICIENT
}
fn d_closure() -> PhaseClosure {
    PhaseClosure::Saturating
}
fn d_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn d_seed() -> f64 {
    DEFAULT_SEED_FRACTION
}
fn d_tol_tm() -> f64 {
    1e-9
}
fn d_tunneling_times() -> f64 {
    20.0
}
fn d_tol_mf() -> f64 {
    1e-8
}
fn d_mf_samples() -> usize {
    201
}
fn d_boundary() -> Boundary {
    Boundary::ClampedEdges
}
fn d_depletion() -> f64 {
    DEFAULT_DEPLETION_LIMIT
}
fn d_start() -> MeanfieldStart {
    MeanfieldStart::Full
}
fn d_n_max() -> usize {
    3
}
fn d_t_final() -> f64 {
    0.01
}
fn d_l_samples() -> usize {
    21
}
fn d_n_traj() -> usize {
    1000
}
fn d_tol_l() -> f64 {
    1e-10
}
fn d_dim_sq() -> usize {
    crate::lindblad::DEFAULT_MAX_DIM_SQ
}
fn d_high() -> f64 {
    0.9
}
fn d_agree() -> f64 {
    0.1
}
fn d_output() -> String {
    "out.csv".into()
}
fn d_format() -> OutputFormat {
    OutputFormat::Csv
}
fn d_lattice() -> LatticeSection {
    toml::from_str("").expect("defaults")
}
fn d_coupling() -> CouplingSection {
    toml::from_str("").expect("defaults")
}
fn d_mu() -> MuSection {
    MuSection { u: None }
}
fn d_two_mode() -> TwoModeSection {
    toml::from_str("").expect("defaults")
}
fn d_meanfield() -> MeanfieldSection {
    toml::from_str("").expect("defaults")
}
fn d_lindblad() -> LindbladSection {
    toml::from_str("").expect("defaults")
}
fn d_scan() -> ScanSection {
    toml::from_str("").expect("defaults")
}

/// 1-based line of `section.key` in `text`, or of the section header, or 0.
fn locate(text: &str, path: &str) -> usize {
    let (section, key) = match path.rsplit_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, path),
    };
    let mut current: Option<String> = None;
    let mut header_line = 0;
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(h.trim().to_string());
            if Some(h.trim()) == section {
                header_line = k + 1;
            }
            continue;
        }
        let name = line.split('=').next().unwrap_or("").trim();
        if name == key && current.as_deref() == section {
            return k + 1;
        }
    }
    header_line
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn config_error(text: &str, key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        line: locate(text, key),
        message: message.into(),
    }
}

/// Parses, fills defaults and validates.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(0);
        let key = text
            .lines()
            .nth(line.wrapping_sub(1))
            .map(|l| l.split('=').next().unwrap_or("").trim().trim_matches(['[', ']']).to_string())
            .unwrap_or_default();
        Error::Config {
            key,
            line,
            message: e.message().trim().to_string(),
        }
    })?;
    if cfg.solver.is_none() {
        return Err(Error::Config {
            key: "solver".into(),
            line: 0,
            message: "missing solver".into(),
        });
    }
    if cfg.lattice.lossy_site.is_none() {
        cfg.lattice.lossy_site = Some(cfg.lattice.n_sites / 2);
    }
    if cfg.coupling.width.is_none() && cfg.coupling.kind == CouplingKind::FranckCondon {
        cfg.coupling.width = Some(cfg.lattice.n0 / 4.0);
    }
    if cfg.mu.u.is_none() {
        cfg.mu.u = Some(cfg.lattice.u);
    }
    if cfg.lindblad.n_total_cap.is_none() {
        cfg.lindblad.n_total_cap = Some(cfg.lattice.n_sites * cfg.lindblad.n_max);
    }
    if cfg.lindblad.initial.is_none() {
        cfg.lindblad.initial = Some(vec![1; cfg.lattice.n_sites]);
    }
    validate(&cfg, text)?;
    Ok(cfg)
}

fn validate(c: &RunConfig, text: &str) -> Result<()> {
    let err = |key: &str, msg: String| Err(config_error(text, key, msg));
    let l = &c.lattice;
    let positive = [
        ("lattice.j", l.j),
        ("lattice.n0", l.n0),
        ("two_mode.epsilon", c.two_mode.epsilon),
        ("two_mode.tol", c.two_mode.tol),
        ("meanfield.tunneling_times", c.meanfield.tunneling_times),
        ("meanfield.tol", c.meanfield.tol),
        ("meanfield.epsilon", c.meanfield.epsilon),
        ("lindblad.t_final", c.lindblad.t_final),
        ("lindblad.tol", c.lindblad.tol),
    ];
    for (k, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            return err(k, format!("must be a finite number > 0, got {v}"));
        }
    }
    let non_negative = [
        ("lattice.gamma", l.gamma),
        ("lattice.u", l.u),
        ("two_mode.kappa_coefficient", c.two_mode.kappa_coefficient),
        ("meanfield.depletion_limit", c.meanfield.depletion_limit),
    ];
    for (k, v) in non_negative {
        if !(v >= 0.0 && v.is_finite()) {
            return err(k, format!("must be a finite number >= 0, got {v}"));
        }
    }
    for (k, v) in [("two_mode.seed_fraction", c.two_mode.seed_fraction), ("meanfield.seed_fraction", c.meanfield.seed_fraction)] {
        if !(v > 0.0 && v < 1.0) {
            return err(k, format!("must lie in (0, 1), got {v}"));
        }
    }
    if c.two_mode.epsilon >= 1.0 || c.meanfield.epsilon >= 1.0 {
        let k = if c.two_mode.epsilon >= 1.0 { "two_mode.epsilon" } else { "meanfield.epsilon" };
        return err(k, "must be < 1".into());
    }
    if let Some(t) = c.two_mode.t_max {
        if !(t > 0.0 && t.is_finite()) {
            return err("two_mode.t_max", format!("must be > 0, got {t}"));
        }
    }
    if l.n_sites == 0 {
        return err("lattice.n_sites", "must be >= 1".into());
    }
    let m = l.lossy_site.unwrap_or(0);
    if m >= l.n_sites {
        return err("lattice.lossy_site", format!("{m} out of range for {} sites", l.n_sites));
    }
    if let Some(w) = c.coupling.width {
        if !(w > 0.0 && w.is_finite()) {
            return err("coupling.width", format!("must be > 0, got {w}"));
        }
    }
    if let Some(u) = c.mu.u {
        if !(u > 0.0 && u.is_finite()) {
            return err("mu.u", format!("must be > 0, got {u}"));
        }
    }
    if c.meanfield.n_samples < 2 {
        return err("meanfield.n_samples", "must be >= 2".into());
    }
    if c.lindblad.n_samples < 2 {
        return err("lindblad.n_samples", "must be >= 2".into());
    }
    if c.lindblad.n_traj == 0 {
        return err("lindblad.n_traj", "must be >= 1".into());
    }
    if c.lindblad.n_max == 0 || c.lindblad.n_max > u8::MAX as usize {
        return err("lindblad.n_max", format!("must lie in 1..=255, got {}", c.lindblad.n_max));
    }
    if let Some(init) = &c.lindblad.initial {
        if init.len() != l.n_sites {
            return err(
                "lindblad.initial",
                format!("needs {} occupations, got {}", l.n_sites, init.len()),
            );
        }
        let total: usize = init.iter().map(|&n| n as usize).sum();
        if init.iter().any(|&n| n as usize > c.lindblad.n_max) || total > c.lindblad.n_total_cap.unwrap_or(usize::MAX) {
            return err("lindblad.initial", "occupation outside the truncated basis".into());
        }
    }
    let s = &c.scan;
    for (k, g) in [("scan.j", &s.j), ("scan.gamma_over_j", &s.gamma_over_j)] {
        if g.is_empty() || g.iter().any(|v| !v.is_finite()) || g.windows(2).any(|w| !(w[0] < w[1])) {
            return err(k, "must be a non-empty, strictly ascending list".into());
        }
    }
    if s.j[0] <= 0.0 {
        return err("scan.j", "values must be > 0".into());
    }
    if s.gamma_over_j[0] < 0.0 {
        return err("scan.gamma_over_j", "values must be >= 0".into());
    }
    if !(s.threshold_high > 0.0 && s.threshold_high <= 1.05) {
        return err("scan.threshold_high", format!("must lie in (0, 1.05], got {}", s.threshold_high));
    }
    if !(s.threshold_agree > 0.0 && s.threshold_agree < 1.0) {
        return err("scan.threshold_agree", format!("must lie in (0, 1), got {}", s.threshold_agree));
    }
    if c.output.trim().is_empty() {
        return err("output", "must not be empty".into());
    }
    Ok(())
}

impl RunConfig {
    pub fn solver(&self) -> SolverChoice {
        self.solver.expect("validated config has a solver")
    }

    /// Normalized TOML with every key written out.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the normalized dump.
    pub fn hash(&self) -> String {
        Sha256::digest(self.dump().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn lattice(&self) -> Result<LatticeParams> {
        let l = &self.lattice;
        LatticeParams::new(l.n_sites, l.j, l.u, l.gamma, l.lossy_site.unwrap_or(l.n_sites / 2), l.n0)
    }

    pub fn coupling(&self) -> Result<CouplingModel> {
        match self.coupling.kind {
            CouplingKind::Constant => Ok(CouplingModel::Constant),
            CouplingKind::FranckCondon => {
                CouplingModel::franck_condon(self.coupling.width.unwrap_or(self.lattice.n0 / 4.0))
            }
        }
    }

    pub fn mu_model(&self) -> Result<ChemicalPotentialModel> {
        ChemicalPotentialModel::linear(self.mu.u.unwrap_or(self.lattice.u))
    }

    pub fn rate_params(&self) -> Result<RateModelParams> {
        Ok(
            RateModelParams::new(self.lattice()?, self.coupling()?, self.two_mode.kappa_coefficient, self.mu_model()?)?
                .with_closure(self.two_mode.closure),
        )
    }

    pub fn two_mode_run(&self) -> TwoModeRunOptions {
        TwoModeRunOptions {
            relax: RelaxOptions {
                tol: self.two_mode.tol,
                t_max: self.two_mode.t_max,
                ..RelaxOptions::default()
            },
            seed_fraction: self.two_mode.seed_fraction,
            epsilon: self.two_mode.epsilon,
        }
    }

    pub fn meanfield_run(&self) -> MeanfieldRunOptions {
        let m = &self.meanfield;
        MeanfieldRunOptions {
            evolve: EvolveOptions {
                tol: m.tol,
                n_samples: m.n_samples,
                boundary: m.boundary,
                depletion_limit: (m.depletion_limit > 0.0).then_some(m.depletion_limit),
                ..EvolveOptions::default()
            },
            tunneling_times: m.tunneling_times,
            seed_fraction: m.seed_fraction,
            epsilon: m.epsilon,
            ..MeanfieldRunOptions::default()
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            high: self.scan.threshold_high,
            agree: self.scan.threshold_agree,
        }
    }

    pub fn template(&self) -> Result<SolverTemplate> {
        match self.solver() {
            SolverChoice::TwoMode => Ok(SolverTemplate::TwoMode {
                params: self.rate_params()?,
                run: self.two_mode_run(),
            }),
            SolverChoice::Meanfield => Ok(SolverTemplate::Meanfield {
                lattice: self.lattice()?,
                coupling: self.coupling()?,
                run: self.meanfield_run(),
            }),
            SolverChoice::Lindblad => Err(Error::Config {
                key: "solver".into(),
                line: 0,
                message: "Lindblad runs have no steady-state sweep".into(),
            }),
        }
    }

    pub fn solver_kind(&self) -> Option<SolverKind> {
        match self.solver() {
            SolverChoice::TwoMode => Some(SolverKind::TwoMode),
            SolverChoice::Meanfield => Some(SolverKind::Meanfield),
            SolverChoice::Lindblad => None,
        }
    }

    pub fn liouvillian(&self) -> Result<Liouvillian> {
        let p = self.lattice()?;
        let basis = FockBasis::new(p.n_sites(), self.lindblad.n_max, self.lindblad.n_total_cap)?;
        Liouvillian::with_cap(&p, &basis, &[JumpOperatorSpec::from_lattice(&p)], self.lindblad.max_dim_sq)
    }

    pub fn meanfield_initial(&self) -> Option<InitialCondition> {
        match self.meanfield.initial {
            MeanfieldStart::Full => Some(InitialCondition::Full),
            MeanfieldStart::Empty => Some(InitialCondition::Empty),
            MeanfieldStart::Bloch => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("solver = \"TwoMode\"\n[lattice]\nj = 230.0\ngamma = 100.0\n").unwrap();
        assert_eq!(c.solver(), SolverChoice::TwoMode);
        assert_eq!(c.lattice.lossy_site, Some(20));
        assert_eq!(c.coupling.width, Some(175.0));
        assert_eq!(c.mu.u, Some(DEFAULT_U_INTERACTION));
        assert_eq!(c.scan.gamma_over_j.len(), 40);
        let p = c.rate_params().unwrap();
        assert_eq!(p.lattice.gamma(), 100.0);
        assert!((p.kappa() - DEFAULT_KAPPA_COEFFICIENT * 230.0 * 230.0).abs() < 1e-9);
    }

    #[test]
    fn negative_gamma_names_key_and_line() {
        let text = "solver = \"TwoMode\"\n\n[lattice]\nj = 230.0\ngamma = -1.0\n";
        match parse_config(text) {
            Err(Error::Config { key, line, .. }) => {
                assert_eq!(key, "lattice.gamma");
                assert_eq!(line, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_text_is_missing_solver() {
        match parse_config("") {
            Err(Error::Config { message, .. }) => assert_eq!(message, "missing solver"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "solver = \"TwoMode\"\n[lattice]\nj = 230.0\nJ_typo = 1.0\n";
        match parse_config(text) {
            Err(Error::Config { key, line, message }) => {
                assert_eq!(line, 4, "{message}");
                assert_eq!(key, "J_typo");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_config("solver = \"TwoMode\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn type_mismatch_is_reported() {
        match parse_config("solver = \"TwoMode\"\n[lattice]\nn_sites = \"many\"\n") {
            Err(Error::Config { key, line, .. }) => {
                assert_eq!(key, "n_sites");
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            prop_oneof![Just("TwoMode"), Just("Meanfield"), Just("Lindblad")],
            any::<u64>(),
            3usize..60,
            1.0f64..1e3,
            0.0f64..1e3,
            0.0f64..200.0,
            prop_oneof![Just("Constant"), Just("FranckCondon")],
            1e-5f64..0.1,
            prop::collection::vec(0.01f64..10.0, 1..6),
        )
            .prop_map(|(solver, seed, n, j, g, u, kind, kappa, mut grid)| {
                grid.sort_by(|a, b| a.total_cmp(b));
                grid.dedup();
                let grid: Vec<String> = grid.iter().map(|v| format!("{v:?}")).collect();
                let text = format!(
                    "solver = \"{solver}\"\nrng_seed = {seed}\n[lattice]\nn_sites = {n}\nj = {j:?}\ngamma = {g:?}\nu = {u:?}\n\
                     [coupling]\nkind = \"{kind}\"\n[two_mode]\nkappa_coefficient = {kappa:?}\n[lindblad]\nn_max = 2\n\
                     [scan]\ngamma_over_j = [{}]\n",
                    grid.join(", ")
                );
                parse_config(&text).unwrap()
            })
    }

    proptest! {
        #[test]
        fn dump_round_trips(c in arb_config()) {
            let back = parse_config(&c.dump()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.hash(), c.hash());
        }
    }
}
