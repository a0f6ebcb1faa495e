//! Command-line front end. `main.rs` only parses arguments and maps errors to exit codes.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::config::{parse_config, RunConfig, SolverChoice};
use crate::error::{Error, Result};
use crate::lindblad::{self, DensityMatrix, MasterOptions, TrajectoryOptions};
use crate::meanfield::{self, InitialKind};
use crate::output::{self, fmt_f64, header_lines};
use crate::record::InitialCondition;
use crate::sweep::{build_phase_diagram, fit_power_law, CriticalRate};
use crate::twomode::{self, find_fixed_points, initial_state};

#[derive(Debug, Parser)]
#[command(name = "jjarray", version, about = "Driven-dissipative Josephson junction array solvers")]
pub struct Cli {
    /// Worker threads for parallel sweeps and trajectories (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time series from the configured initial state
    Evolve(RunArgs),
    /// Steady states from full and empty starts at the configured (J, γ)
    Steady(RunArgs),
    /// Phase diagram over the [scan] grid
    Sweep(RunArgs),
    /// Master-equation (or quantum-jump) evolution on a small lattice
    Lindblad {
        #[command(flatten)]
        run: RunArgs,
        /// Average quantum-jump trajectories instead of integrating ρ
        #[arg(long)]
        trajectories: bool,
    },
    /// Power-law fit y = A·x^b of two CSV columns
    Fit {
        input: PathBuf,
        #[arg(long, default_value = "x")]
        x: String,
        #[arg(long, default_value = "y")]
        y: String,
    },
    /// Parse a config and print it with every default filled in
    Validate { config: PathBuf },
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Overrides `output` from the config
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// Config errors exit with 2, everything else with 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

fn output_path(cfg: &RunConfig, args: &RunArgs) -> PathBuf {
    args.output.clone().unwrap_or_else(|| PathBuf::from(&cfg.output))
}

/// `out.csv` → `out.<tag>.csv`
pub fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{tag}.csv"))
}

fn need_solver(cfg: &RunConfig, allowed: &[SolverChoice], cmd: &str) -> Result<()> {
    if allowed.contains(&cfg.solver()) {
        Ok(())
    } else {
        Err(Error::Config {
            key: "solver".into(),
            line: 0,
            message: format!("`{cmd}` does not support solver {:?}", cfg.solver()),
        })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Evolve(a) => evolve(&a),
        Command::Steady(a) => steady(&a),
        Command::Sweep(a) => run_sweep(&a),
        Command::Lindblad { run, trajectories } => run_lindblad(&run, trajectories),
        Command::Fit { input, x, y } => fit(&input, &x, &y),
        Command::Validate { config } => {
            print!("{}", load_config(&config)?.dump());
            Ok(())
        }
    }
}

fn evolve(a: &RunArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    need_solver(&cfg, &[SolverChoice::Meanfield, SolverChoice::TwoMode], "evolve")?;
    let out = output_path(&cfg, a);
    let headers = header_lines(&cfg.hash(), &[format!("solver = {:?}", cfg.solver())]);
    match cfg.solver() {
        SolverChoice::TwoMode => {
            let p = cfg.rate_params()?;
            // a Bloch start has no lumped analogue
            let ic = cfg.meanfield_initial().unwrap_or(InitialCondition::Full);
            let start = initial_state(&p, ic, cfg.two_mode.seed_fraction)?;
            let r = twomode::relax(&p, &start, &cfg.two_mode_run().relax)?;
            let rows: Vec<Vec<String>> = r
                .history
                .iter()
                .map(|&(t, n)| vec![fmt_f64(t), fmt_f64(n / p.lattice.n0())])
                .collect();
            output::write_table(&out, &headers, &["time", "filling_ratio"], &rows)?;
        }
        _ => {
            let l = cfg.lattice()?;
            let coupling = cfg.coupling()?;
            let state = match cfg.meanfield_initial() {
                Some(InitialCondition::Full) => meanfield::prepare_initial(&l, InitialKind::FullUniform, cfg.meanfield.seed_fraction)?,
                Some(InitialCondition::Empty) => {
                    meanfield::prepare_initial(&l, InitialKind::EmptyLossySite, cfg.meanfield.seed_fraction)?
                }
                None => meanfield::bloch_state(&l, &meanfield::analytic_bloch_steady_state(&l)?),
            };
            let opts = cfg.meanfield_run().evolve;
            let t_final = cfg.meanfield.tunneling_times * l.tunneling_time();
            let traj = meanfield::evolve_with(&state, &l, &coupling, t_final, &opts)?;
            let current = meanfield::site_current(&traj);
            let m = l.lossy_site();
            let rows: Vec<Vec<String>> = traj
                .samples
                .iter()
                .zip(&current)
                .map(|(s, &(t, i))| {
                    vec![fmt_f64(t), fmt_f64(s.filling(m) / l.n0()), fmt_f64(i), fmt_f64(s.total_atoms())]
                })
                .collect();
            output::write_table(&out, &headers, &["time", "filling_ratio", "current", "total_atoms"], &rows)?;
        }
    }
    info!("wrote {}", out.display());
    Ok(())
}

fn steady(a: &RunArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    need_solver(&cfg, &[SolverChoice::Meanfield, SolverChoice::TwoMode], "steady")?;
    let out = output_path(&cfg, a);
    let t = cfg.template()?;
    let (j, g) = (cfg.lattice.j, cfg.lattice.gamma);
    let records: Vec<_> = [InitialCondition::Full, InitialCondition::Empty]
        .iter()
        .map(|&ic| t.run(j, g, ic))
        .collect();
    let headers = header_lines(&cfg.hash(), &[]);
    output::write_records(&out, cfg.format, &headers, &records)?;
    if cfg.solver() == SolverChoice::TwoMode {
        let fps = find_fixed_points(&cfg.rate_params()?)?;
        let rows: Vec<Vec<String>> = fps
            .iter()
            .map(|f| {
                vec![
                    fmt_f64(f.state.n / cfg.lattice.n0),
                    fmt_f64(f.state.delta_phi),
                    format!("{:?}", f.stability),
                    fmt_f64(f.eigenvalues[0].re),
                    fmt_f64(f.eigenvalues[0].im),
                    fmt_f64(f.eigenvalues[1].re),
                    fmt_f64(f.eigenvalues[1].im),
                ]
            })
            .collect();
        let cols = ["filling_ratio", "delta_phi", "stability", "eig0_re", "eig0_im", "eig1_re", "eig1_im"];
        output::write_table(&sibling(&out, "fixed_points"), &headers, &cols, &rows)?;
    }
    info!("wrote {}", out.display());
    Ok(())
}

fn rate_cells(r: Option<CriticalRate>) -> [String; 2] {
    match r {
        Some(r) => [fmt_f64(r.value), fmt_f64(r.uncertainty)],
        None => [String::new(), String::new()],
    }
}

fn run_sweep(a: &RunArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    need_solver(&cfg, &[SolverChoice::Meanfield, SolverChoice::TwoMode], "sweep")?;
    let out = output_path(&cfg, a);
    let pd = build_phase_diagram(&cfg.scan.j, &cfg.scan.gamma_over_j, &cfg.template()?, &cfg.thresholds())?;
    let mut extra: Vec<String> = pd
        .failures
        .iter()
        .map(|f| format!("unclassified J = {} gamma = {}: {}", fmt_f64(f.j_coupling), fmt_f64(f.gamma), f.message))
        .collect();
    extra.insert(0, format!("failures = {}", pd.failures.len()));
    let headers = header_lines(&cfg.hash(), &extra);
    output::write_records(&out, cfg.format, &headers, &pd.records)?;

    let rows: Vec<Vec<String>> = pd
        .points
        .iter()
        .map(|p| {
            vec![
                fmt_f64(p.j_coupling),
                fmt_f64(p.gamma),
                format!("{:?}", p.label),
                fmt_f64(p.full.filling_ratio),
                fmt_f64(p.empty.filling_ratio),
            ]
        })
        .collect();
    let cols = ["j_coupling", "gamma", "label", "full_filling_ratio", "empty_filling_ratio"];
    output::write_table(&sibling(&out, "phase"), &headers, &cols, &rows)?;

    let rows: Vec<Vec<String>> = pd
        .lines
        .iter()
        .map(|l| {
            let mut row = vec![fmt_f64(l.j_coupling)];
            for r in [l.rates.gamma_rb, l.rates.gamma_csd, l.rates.gamma_sf] {
                row.extend(rate_cells(r));
            }
            row.push(match l.rates.is_ordered() {
                Some(b) => b.to_string(),
                None => String::new(),
            });
            row
        })
        .collect();
    let cols = [
        "j_coupling",
        "gamma_rb",
        "gamma_rb_err",
        "gamma_csd",
        "gamma_csd_err",
        "gamma_sf",
        "gamma_sf_err",
        "ordered",
    ];
    output::write_table(&sibling(&out, "critical"), &headers, &cols, &rows)?;
    info!("wrote {} ({} points, {} failures)", out.display(), pd.points.len(), pd.failures.len());
    Ok(())
}

fn run_lindblad(a: &RunArgs, trajectories: bool) -> Result<()> {
    let cfg = load_config(&a.config)?;
    need_solver(&cfg, &[SolverChoice::Lindblad], "lindblad")?;
    let out = output_path(&cfg, a);
    let lv = cfg.liouvillian()?;
    let l = &cfg.lindblad;
    let init = l.initial.clone().unwrap_or_default();
    let psi0 = lv.basis().fock_state(&init)?;
    let n = cfg.lattice.n_sites;
    let mut cols: Vec<String> = vec!["time".into()];
    cols.extend((0..n).map(|k| format!("n_{k}")));
    let mut extra = vec![format!("dim = {}", lv.dim())];
    let rows: Vec<Vec<String>> = if trajectories {
        let opts = TrajectoryOptions {
            tol: l.tol.max(1e-12),
            n_samples: l.n_samples,
            ..TrajectoryOptions::default()
        };
        let avg = lindblad::evolve_trajectories_with(&psi0, &lv, l.t_final, l.n_traj, cfg.rng_seed, &opts)?;
        cols.extend((0..n).map(|k| format!("n_{k}_stderr")));
        extra.push(format!("n_traj = {}", avg.n_traj));
        avg.times
            .iter()
            .enumerate()
            .map(|(s, &t)| {
                let mut row = vec![fmt_f64(t)];
                row.extend(avg.mean[s].iter().map(|&v| fmt_f64(v)));
                row.extend(avg.stderr[s].iter().map(|&v| fmt_f64(v)));
                row
            })
            .collect()
    } else {
        let opts = MasterOptions {
            tol: l.tol,
            n_samples: l.n_samples,
            ..MasterOptions::default()
        };
        let rho0 = DensityMatrix::from_pure(&psi0)?;
        let tr = lindblad::evolve_master_with(&rho0, &lv, l.t_final, &opts)?;
        tr.times
            .iter()
            .zip(tr.occupations(lv.basis()))
            .map(|(&t, occ)| {
                let mut row = vec![fmt_f64(t)];
                row.extend(occ.iter().map(|&v| fmt_f64(v)));
                row
            })
            .collect()
    };
    let headers = header_lines(&cfg.hash(), &extra);
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    output::write_table(&out, &headers, &cols, &rows)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn fit(input: &Path, x: &str, y: &str) -> Result<()> {
    let f = std::fs::File::open(input).map_err(|source| Error::Io {
        path: input.to_path_buf(),
        source,
    })?;
    let (_, cols, rows) = output::read_table_from(f)?;
    let col = |name: &str| {
        cols.iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::domain(format!("no column {name:?} in {}", input.display())))
    };
    let (ix, iy) = (col(x)?, col(y)?);
    let mut pairs = Vec::new();
    for r in &rows {
        // blank cells mark missing values
        if r[ix].is_empty() || r[iy].is_empty() {
            continue;
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::domain(format!("not a number: {s:?}")));
        pairs.push((parse(&r[ix])?, parse(&r[iy])?));
    }
    let fit = fit_power_law(&pairs)?;
    println!("exponent = {} +/- {}", fit.exponent, fit.exponent_stderr);
    println!("amplitude = {}", fit.amplitude);
    println!("points = {}", pairs.len());
    Ok(())
}
