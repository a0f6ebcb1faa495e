use jjarray_core::model::{ChemicalPotentialModel, CouplingModel, LatticeParams, DEFAULT_U_INTERACTION};
use jjarray_core::record::{InitialCondition, RunStatus};
use jjarray_core::twomode::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const J: f64 = 230.0;
const N0: f64 = 700.0;

fn lattice(gamma: f64) -> LatticeParams {
    LatticeParams::centered(41, J, DEFAULT_U_INTERACTION, gamma, N0).unwrap()
}

fn default_params(gamma: f64) -> RateModelParams {
    RateModelParams::default_for(lattice(gamma)).unwrap()
}

fn constant_params(gamma: f64, c: f64) -> RateModelParams {
    RateModelParams::new(
        lattice(gamma),
        CouplingModel::Constant,
        c,
        ChemicalPotentialModel::linear(DEFAULT_U_INTERACTION).unwrap(),
    )
    .unwrap()
}

fn stable(fps: &[FixedPoint]) -> Vec<FixedPoint> {
    fps.iter().filter(|f| f.stability == Stability::Stable).cloned().collect()
}

#[test]
fn superfluid_point_exists_up_to_four_j() {
    for k in 0..=45 {
        let g = 0.1 * k as f64 * J;
        let p = constant_params(g, 0.0);
        let fps = find_fixed_points(&p).unwrap();
        let full: Vec<_> = fps.iter().filter(|f| f.state.n == N0).collect();
        if g <= 4.0 * J + 1e-9 {
            assert_eq!(full.len(), 1, "gamma/J = {}: {fps:?}", g / J);
            let s = full[0].state.delta_phi.sin();
            assert!((s - g / (4.0 * J)).abs() < 1e-10, "gamma/J = {}", g / J);
            let d = rate_rhs(&full[0].state, &p).unwrap();
            assert!(d.dn_dt.abs() < 1e-10 * N0 * J);
        } else {
            assert!(full.is_empty(), "gamma/J = {}: {fps:?}", g / J);
        }
    }
}

#[test]
fn strong_loss_leaves_only_low_filling_states() {
    let p = constant_params(5.0 * J, 1e-4);
    let fps = find_fixed_points(&p).unwrap();
    assert!(fps.iter().all(|f| f.state.n < 0.9 * N0), "{fps:?}");
    let st = stable(&fps);
    assert_eq!(st.len(), 1);
    assert!(st[0].state.n < 0.7 * N0);
}

#[test]
fn bistable_window_has_two_attractors_and_a_saddle() {
    for g in [1.2, 2.0, 3.0] {
        let fps = find_fixed_points(&default_params(g * J)).unwrap();
        let st = stable(&fps);
        let saddles = fps.iter().filter(|f| f.stability == Stability::Saddle).count();
        assert_eq!(st.len(), 2, "gamma/J = {g}: {fps:?}");
        assert_eq!(saddles, 1, "gamma/J = {g}: {fps:?}");
        assert_eq!(st[1].state.n, N0);
        assert!(st[0].state.n < 0.6 * N0);
    }
}

#[test]
fn stable_points_attract_nearby_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for g in [0.0, 0.5, 1.5, 3.0, 5.0] {
        let p = default_params(g * J);
        for fp in stable(&find_fixed_points(&p).unwrap()) {
            for _ in 0..10 {
                let dn = fp.state.n * 1e-3 * rng.random_range(-1.0..1.0);
                let dp = 1e-3 * rng.random_range(-1.0..1.0);
                let phi = (fp.state.delta_phi + dp).clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
                let start = TwoModeState::new(fp.state.n + dn, phi).unwrap();
                let r = relax(&p, &start, &RelaxOptions::default()).unwrap();
                assert!(r.converged);
                assert!((r.state.n - fp.state.n).abs() < 1e-6 * N0, "gamma/J = {g}");
            }
        }
    }
}

#[test]
fn hysteresis_sweeps() {
    // offset grid: 4J itself is the marginal end of the full branch
    let grid: Vec<f64> = (0..40).map(|k| (0.2 * k as f64 + 0.1) * J).collect();
    let p = default_params(0.0);
    let down = hysteresis_sweep(&p, &grid, SweepDirection::Down).unwrap();
    let up = hysteresis_sweep(&p, &grid, SweepDirection::Up).unwrap();
    let mut window = Vec::new();
    for (d, u) in down.iter().zip(&up) {
        assert_eq!(d.gamma, u.gamma);
        assert_eq!(d.initial_condition, InitialCondition::Full);
        assert_eq!(u.initial_condition, InitialCondition::Empty);
        assert_eq!(d.status, RunStatus::Converged, "down at {}", d.gamma / J);
        assert_eq!(u.status, RunStatus::Converged, "up at {}", u.gamma / J);
        assert!(d.is_self_consistent() && u.is_self_consistent());
        if (d.filling_ratio - u.filling_ratio).abs() > 0.2 {
            window.push(d.gamma / J);
        }
        // each branch sits on a stable fixed point
        let fps = stable(&find_fixed_points(&p.with_gamma(d.gamma).unwrap()).unwrap());
        for r in [d, u] {
            assert!(
                fps.iter().any(|f| (f.state.n - r.filling()).abs() < 1e-3 * N0),
                "gamma/J = {}: {} not in {fps:?}",
                r.gamma / J,
                r.filling_ratio
            );
        }
    }
    assert!(!window.is_empty());
    let (lo, hi) = (window[0], *window.last().unwrap());
    // contiguous window with agreement on both sides
    assert_eq!(window.len(), ((hi - lo) / 0.2).round() as usize + 1);
    assert!(lo > 0.1 && hi < 7.9);
    assert_eq!(down[0].filling_ratio, 1.0);
    assert_eq!(up[0].filling_ratio, 1.0);
    assert!(down[39].filling_ratio < 0.2 && up[39].filling_ratio < 0.2);
    assert!((down[39].filling_ratio - up[39].filling_ratio).abs() < 1e-6);
}

#[test]
fn full_branch_at_four_j_is_marginal() {
    let p = default_params(4.0 * J);
    let fps = find_fixed_points(&p).unwrap();
    let sf = fps.iter().find(|f| f.state.n == N0).unwrap();
    assert!((sf.state.delta_phi - std::f64::consts::FRAC_PI_2).abs() < 1e-4);
    assert!(sf.slowest_rate().abs() < 1e-2 * J, "{sf:?}");
}

#[test]
fn relaxation_time_peaks_at_the_empty_branch_fold() {
    let p = default_params(0.0);
    let fps = find_fixed_points(&p.with_gamma(1.2 * J).unwrap()).unwrap();
    let empty = stable(&fps)[0];
    let gc = branch_end(&p, &empty.state, 1.2 * J, 0.5 * J, 1e-12).unwrap();
    let start = initial_state(&p, InitialCondition::Empty, DEFAULT_SEED_FRACTION).unwrap();
    let taus: Vec<(f64, f64)> = [0.5, 0.7, 0.8, 0.9, 0.95, 0.99]
        .iter()
        .map(|&x| {
            let pg = p.with_gamma(x * gc).unwrap();
            (x, relaxation_time(&pg, &start, 0.05).unwrap())
        })
        .collect();
    for w in taus.windows(2) {
        assert!(w[1].1 > w[0].1, "{taus:?}");
    }
    let above = relaxation_time(&p.with_gamma(1.01 * gc).unwrap(), &start, 0.05).unwrap();
    assert!(above < 0.5 * taus.last().unwrap().1, "{above} vs {taus:?}");
}

#[test]
fn fold_has_vanishing_eigenvalue_and_square_root_scaling() {
    let p = default_params(0.0);
    let empty = stable(&find_fixed_points(&p.with_gamma(1.2 * J).unwrap()).unwrap())[0];
    let gc = branch_end(&p, &empty.state, 1.2 * J, 0.5 * J, 1e-13).unwrap();

    // slowest rate of the tracked branch shrinks toward the fold
    let mut rates = Vec::new();
    let mut guess = empty.state;
    for d in [1e-1, 1e-2, 1e-3, 1e-4] {
        let fp = refine_fixed_point(&p.with_gamma(gc * (1.0 + d)).unwrap(), &guess).unwrap();
        assert_eq!(fp.stability, Stability::Stable);
        guess = fp.state;
        rates.push(fp.slowest_rate().abs());
    }
    for w in rates.windows(2) {
        assert!(w[1] < 0.5 * w[0], "{rates:?}");
    }

    let start = initial_state(&p, InitialCondition::Empty, DEFAULT_SEED_FRACTION).unwrap();
    let opts = RelaxOptions {
        t_max: Some(100.0),
        ..RelaxOptions::default()
    };
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in 0..6 {
        let d = 1e-5 * 10f64.powf(k as f64 / 5.0);
        let g = gc * (1.0 - d);
        let tau = relaxation_time_with(&p.with_gamma(g).unwrap(), &start, 0.05, &opts).unwrap();
        xs.push((gc - g).ln());
        ys.push(tau.ln());
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    assert!((slope + 0.5).abs() < 0.15, "slope {slope}");
}

#[test]
fn josephson_closure_runs_without_resistive_fixed_points() {
    let p = default_params(2.0 * J).with_closure(PhaseClosure::Josephson);
    let fps = find_fixed_points(&p).unwrap();
    // only the zero-voltage pair: arcsin(γ/4J) and its mirror
    assert_eq!(fps.len(), 2, "{fps:?}");
    assert!(fps.iter().all(|f| f.state.n == N0));
    let start = initial_state(&p, InitialCondition::Empty, DEFAULT_SEED_FRACTION).unwrap();
    let opts = RelaxOptions {
        t_max: Some(0.5),
        ..RelaxOptions::default()
    };
    let r = relax(&p, &start, &opts).unwrap();
    assert!(!r.converged);
}
