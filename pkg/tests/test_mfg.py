"""Coupled-system fixed point and the uniqueness-given-gradient probe."""

import math

import numpy as np
import pytest

from mfg_lab.grid import sup_norm
from mfg_lab.mfg import (
    drift_field,
    heat_flow_of_initial,
    probe_uniqueness_given_gradient,
    solution_distance,
    solve_picard,
)
from mfg_lab.perturb import perturb_density_values, spawn_rngs


def test_decoupled_converges_in_two_iterations(decoupled_model, monotone_grid, rng):
    init = perturb_density_values(
        monotone_grid, heat_flow_of_initial(decoupled_model, monotone_grid), 0.2, rng
    )
    sol = solve_picard(
        decoupled_model, monotone_grid, init_m=init, damping=1.0, tol=1e-12, max_iter=10
    )
    assert sol.converged and sol.iterations <= 2
    assert sol.residuals["hjb"] <= 1e-12
    # decoupled solution: u = 0, m = heat flow of m0
    assert sup_norm(sol.u.values) == 0.0
    x = monotone_grid.axis_coordinates()
    exact = np.stack(
        [
            1 + 0.5 * math.exp(-4 * math.pi**2 * t) * np.cos(2 * np.pi * x)
            for t in monotone_grid.times - monotone_grid.t0
        ]
    )
    assert sup_norm(sol.m.values - exact) <= 5 * (monotone_grid.dt + monotone_grid.dx**2)


def test_monotone_solution_quality(monotone_solution):
    sol = monotone_solution
    assert sol.converged
    assert sol.residuals["hjb"] <= 1e-10
    assert sol.residuals["kolmogorov"] <= 1e-10
    assert np.max(np.abs(sol.m.mass() - 1.0)) <= 1e-12


def test_converged_residuals_within_ten_tol(monotone_model, monotone_grid):
    tol = 1e-9
    sol = solve_picard(monotone_model, monotone_grid, damping=0.5, tol=tol, max_iter=500)
    assert sol.converged
    assert max(sol.residuals.values()) <= 10.0 * tol


def test_flux_formula_nodewise(monotone_model, monotone_solution):
    sol = monotone_solution
    b = drift_field(monotone_model, sol.grid, sol.u.values)
    w = -sol.m.values[..., None] * b
    assert sup_norm(sol.w.values - w) <= 1e-12


def test_damping_independent_limit(monotone_model, monotone_grid, monotone_solution):
    other = solve_picard(
        monotone_model, monotone_grid, damping=1.0, tol=1e-12, max_iter=500
    )
    assert other.converged
    assert solution_distance(other, monotone_solution) <= 1e-8


def test_random_inits_agree(monotone_model, monotone_grid, monotone_solution):
    rngs = spawn_rngs(99, 2)
    base = heat_flow_of_initial(monotone_model, monotone_grid)
    sols = []
    for r in rngs:
        init = perturb_density_values(monotone_grid, base, 0.3, r)
        sols.append(
            solve_picard(
                monotone_model, monotone_grid, init_m=init, damping=0.5,
                tol=1e-12, max_iter=500,
            )
        )
    for s in sols:
        assert s.converged
        assert solution_distance(s, monotone_solution) <= 1e-6


def test_nonconvergence_returns_data(monotone_model, monotone_grid):
    sol = solve_picard(monotone_model, monotone_grid, damping=0.5, tol=0.0, max_iter=2)
    assert not sol.converged
    assert sol.iterations == 2
    assert np.isfinite(sol.residuals["hjb"])


def test_probe_reflexive(monotone_solution):
    rep = probe_uniqueness_given_gradient(monotone_solution, monotone_solution)
    assert rep.d_grad == 0.0 and rep.d_sol == 0.0
    assert rep.verdict == "CONSISTENT"


def test_probe_on_rerun(monotone_model, monotone_grid, monotone_solution, rng):
    init = perturb_density_values(
        monotone_grid, heat_flow_of_initial(monotone_model, monotone_grid), 0.3, rng
    )
    rerun = solve_picard(
        monotone_model, monotone_grid, init_m=init, damping=0.5, tol=1e-12, max_iter=500
    )
    rep = probe_uniqueness_given_gradient(rerun, monotone_solution)
    assert rep.d_grad <= 1e-6
    assert rep.d_sol <= 1e-5
    assert rep.verdict == "CONSISTENT"


def test_probe_precondition_errors(monotone_model, monotone_solution):
    g2 = monotone_model.make_grid(16, 48)
    other = solve_picard(monotone_model, g2, damping=0.5, tol=1e-10, max_iter=300)
    with pytest.raises(ValueError):
        probe_uniqueness_given_gradient(monotone_solution, other)
    shifted = solve_picard(
        monotone_model,
        monotone_solution.grid,
        m0=np.roll(monotone_solution.m.values[0], 3),
        damping=0.5,
        tol=1e-10,
        max_iter=300,
    )
    with pytest.raises(ValueError):
        probe_uniqueness_given_gradient(shifted, monotone_solution)


def test_invalid_damping(monotone_model, monotone_grid):
    with pytest.raises(ValueError):
        solve_picard(monotone_model, monotone_grid, damping=0.0)
    with pytest.raises(ValueError):
        solve_picard(monotone_model, monotone_grid, damping=1.5)
