"""Smoke test for the jjarray extension module.

Build and install first:  pip install --no-build-isolation -e crates/python
"""

import math

import jjarray


def main():
    lat = jjarray.LatticeParams(j=230.0, gamma=460.0)
    assert lat.lossy_site == 20 and lat.n0 == 700.0, lat

    model = jjarray.RateModel(lat)
    fps = model.fixed_points()
    assert [s for _, _, s in fps].count("Stable") == 2, fps

    full = model.steady_state("full")
    empty = model.steady_state("empty")
    assert full.status == "Converged" and full.filling_ratio == 1.0, full
    assert empty.filling_ratio < 0.6, empty
    assert full.current == full.gamma * full.filling_ratio * full.n0

    grid = [(0.2 * k + 0.1) * 230.0 for k in range(40)]
    down = model.hysteresis_sweep(grid, "down")
    up = model.hysteresis_sweep(grid, "up")
    assert any(abs(d.filling_ratio - u.filling_ratio) > 0.2 for d, u in zip(down, up))

    points, lines = jjarray.phase_diagram([100.0, 300.0], [0.25 * k for k in range(24)])
    assert len(points) == 48 and len(lines) == 2
    assert {p[2] for p in points} == {"Superfluid", "Bistable", "Resistive"}

    a, b, db = jjarray.fit_power_law([1.0, 2.0, 3.0, 4.0], [3.0, 12.0, 27.0, 48.0])
    assert abs(b - 2.0) < 1e-12 and abs(a - 3.0) < 1e-12, (a, b, db)

    t, n = jjarray.evolve_meanfield(jjarray.LatticeParams(n_sites=11, gamma=0.0), "full", 10.0 / 230.0)
    assert len(t) == 101 and abs(n[-1] - 700.0) < 1e-6 * 700.0

    one = jjarray.LatticeParams(n_sites=1, j=1.0, u=0.0, gamma=0.7, lossy_site=0, n0=1.0)
    times, occ = jjarray.lindblad_master(one, [2], 2.0)
    for ti, o in zip(times, occ):
        assert abs(o[0] - 2.0 * math.exp(-0.7 * ti)) < 1e-6

    times, mean, err = jjarray.lindblad_trajectories(one, [2], 2.0, 2000, seed=5)
    again = jjarray.lindblad_trajectories(one, [2], 2.0, 2000, seed=5)
    assert (times, mean, err) == again
    assert all(abs(m[0] - 2.0 * math.exp(-0.7 * ti)) <= 4.0 * e[0] + 1e-12 for ti, m, e in zip(times, mean, err))

    dump = jjarray.normalize_config('solver = "TwoMode"\n')
    assert jjarray.normalize_config(dump) == dump
    try:
        jjarray.normalize_config('solver = "TwoMode"\n[lattice]\ngamma = -1.0\n')
    except ValueError as e:
        assert "lattice.gamma" in str(e)
    else:
        raise AssertionError("negative gamma accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
