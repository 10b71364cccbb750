"""Fictitious play: best responses against the running average density.

Each round solves the backward problem against the current average belief
mu^n, plays the induced forward flow from the fixed initial density, and
updates the belief by the averaging rule

    mu^{n+1} = n/(n+1) mu^n + 1/(n+1) m^{n+1}.

The average is stored as a running sum divided on read, so the unrolled
identity mu^n = (1/n) sum_k m^k holds to rounding regardless of n, and
||mu^{n+1} - mu^n|| = gap_n / (n+1) exactly with gap_n = ||m^{n+1} - mu^n||.

Fixed points are discrete MFG solutions: a round with zero gap reproduces
the Picard map's legs, so the returned pair carries the same residual
diagnostics as the direct solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import (
    DensityField,
    FluxField,
    ScalarField,
    TorusGrid,
    c10_norm_field,
    l2_norm,
    sup_norm,
)
from .mfg import MfgSolution, drift_field, heat_flow_of_initial
from .models import MfgModel
from .pde import (
    HjbProblem,
    KolmogorovProblem,
    hjb_residual,
    kolmogorov_residual,
    solve_hjb,
    solve_kolmogorov,
)
from .perturb import perturb_density_values, spawn_rngs

__all__ = [
    "FpState",
    "FpTrace",
    "fp_start",
    "fp_step",
    "run_fp",
    "local_attractor_experiment",
    "AttractorReport",
]


@dataclass
class FpState:
    """Iteration count, running sum of played flows, and the last round."""

    model: MfgModel
    grid: TorusGrid
    m0: np.ndarray
    mu0: np.ndarray  # initial belief; weight 0 in every average
    n: int = 0
    sum_m: np.ndarray | None = None
    last_u: np.ndarray | None = None
    last_m: np.ndarray | None = None
    last_gap: float | None = None

    @property
    def mu(self) -> np.ndarray:
        if self.n == 0:
            return self.mu0
        return self.sum_m / self.n


def fp_start(model: MfgModel, grid: TorusGrid, mu0=None, m0=None) -> FpState:
    m0_slice = model.initial_density_slice(grid) if m0 is None else np.asarray(m0)
    if mu0 is None:
        mu0 = heat_flow_of_initial(model, grid, m0_slice)
    mu0 = np.asarray(mu0, dtype=float)
    if mu0.shape != (grid.n_time + 1, *grid.spatial_shape):
        raise ValueError("mu0 shape mismatch")
    return FpState(model=model, grid=grid, m0=m0_slice, mu0=mu0)


def fp_step(state: FpState) -> FpState:
    """One round: best response to mu^n, play it, average it in."""
    model, grid = state.model, state.grid
    mu = state.mu
    coup = model.coupling
    source = coup.f_field(grid, mu)
    terminal = coup.g(grid, mu[-1])
    u_new = solve_hjb(HjbProblem(model, grid, source, terminal)).u.values
    m_new = solve_kolmogorov(
        KolmogorovProblem(grid, drift_field(model, grid, u_new), state.m0)
    ).m.values
    gap = max(l2_norm(grid, m_new[k] - mu[k]) for k in range(grid.n_time + 1))
    sum_m = m_new.copy() if state.sum_m is None else state.sum_m + m_new
    return FpState(
        model=model,
        grid=grid,
        m0=state.m0,
        mu0=state.mu0,
        n=state.n + 1,
        sum_m=sum_m,
        last_u=u_new,
        last_m=m_new,
        last_gap=gap,
    )


@dataclass
class FpTrace:
    gaps: list
    mu_step_norms: list  # ||mu^{n+1} - mu^n||, same norm as the gap
    errors: list  # vs reference, when given
    n_iterations: int
    converged: bool
    final: MfgSolution
    state: FpState = field(repr=False, default=None)

    def to_csv(self, path, decimate: bool = True) -> None:
        """Columns n, gap_n, mu_step, err_n, plus final residuals in a header
        comment; rows are decimated past 50 to every 10th iterate."""
        lines = [
            "# residuals: "
            + " ".join(f"{k}={v:.6e}" for k, v in self.final.residuals.items()),
            "n,gap,mu_step,err",
        ]
        for i, g in enumerate(self.gaps):
            if decimate and i >= 50 and (i + 1) % 10 != 0 and i != len(self.gaps) - 1:
                continue
            err = repr(self.errors[i]) if self.errors else ""
            lines.append(f"{i},{g!r},{self.mu_step_norms[i]!r},{err}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _as_solution(state: FpState) -> MfgSolution:
    model, grid = state.model, state.grid
    source_used = model.coupling.f_field(grid, state.mu)
    source_of_m = model.coupling.f_field(grid, state.last_m)
    residuals = {
        "hjb": hjb_residual(model, grid, state.last_u, source_of_m),
        "kolmogorov": kolmogorov_residual(
            grid, state.last_m, drift_field(model, grid, state.last_u)
        ),
        "coupling_consistency": sup_norm(source_used - source_of_m),
    }
    w = -state.last_m[..., None] * drift_field(model, grid, state.last_u)
    return MfgSolution(
        model=model,
        grid=grid,
        u=ScalarField(grid, state.last_u),
        m=DensityField(grid, state.last_m),
        w=FluxField(grid, w),
        residuals=residuals,
        iterations=state.n,
        converged=state.last_gap is not None,
    )


def run_fp(
    model: MfgModel,
    grid: TorusGrid,
    mu0=None,
    n_max: int = 500,
    gap_tol: float = 0.0,
    reference: Optional[MfgSolution] = None,
    m0=None,
) -> FpTrace:
    """Iterate fp_step until gap_n <= gap_tol or n_max rounds.

    Non-convergence is data, not an error.  With a reference solution the
    per-round error ||u^n - u||_{C^{1,0}} + ||m^n - m||_sup is recorded.
    """
    state = fp_start(model, grid, mu0=mu0, m0=m0)
    gaps, steps, errors = [], [], []
    converged = False
    for _ in range(n_max):
        mu_before = state.mu.copy()
        state = fp_step(state)
        gaps.append(state.last_gap)
        steps.append(
            max(
                l2_norm(grid, state.mu[k] - mu_before[k])
                for k in range(grid.n_time + 1)
            )
        )
        if reference is not None:
            errors.append(
                c10_norm_field(grid, state.last_u - reference.u.values)
                + sup_norm(state.last_m - reference.m.values)
            )
        if state.last_gap <= gap_tol:
            converged = True
            break
    return FpTrace(
        gaps=gaps,
        mu_step_norms=steps,
        errors=errors,
        n_iterations=state.n,
        converged=converged,
        final=_as_solution(state),
        state=state,
    )


@dataclass
class AttractorReport:
    records: list

    def success_rate(self, delta: float) -> float:
        for rec in self.records:
            if rec["delta"] == delta:
                return rec["success_rate"]
        raise KeyError(delta)


def local_attractor_experiment(
    model: MfgModel,
    grid: TorusGrid,
    stable_ref: MfgSolution,
    delta_list,
    trials: int,
    seed,
    n_max: int = 300,
    success_err: float = 5e-4,
) -> AttractorReport:
    """Basin probe around a certified-stable equilibrium.

    For each delta, fictitious play starts from beliefs within sup-distance
    delta of the reference flow; a trial succeeds when the final error is
    below success_err.  The tail-monotonicity flag records whether err_n
    was non-increasing (within 5%) over the last third of the rounds.
    """
    deltas = list(delta_list)
    rngs = spawn_rngs(seed, len(deltas) * trials)
    records = []
    ri = 0
    for delta in deltas:
        successes = 0
        monotone_flags = []
        final_errors = []
        for _ in range(trials):
            rng = rngs[ri]
            ri += 1
            if delta == 0.0:
                mu0 = stable_ref.m.values.copy()
            else:
                mu0 = perturb_density_values(grid, stable_ref.m.values, delta, rng)
            trace = run_fp(
                model, grid, mu0=mu0, n_max=n_max, gap_tol=0.0, reference=stable_ref
            )
            err_final = trace.errors[-1]
            final_errors.append(err_final)
            if err_final <= success_err:
                successes += 1
            tail = trace.errors[-max(2, len(trace.errors) // 3) :]
            monotone_flags.append(
                all(b <= a * 1.05 for a, b in zip(tail, tail[1:]))
            )
        records.append(
            {
                "delta": float(delta),
                "trials": trials,
                "success_rate": successes / trials,
                "max_final_error": max(final_errors),
                "eventually_monotone_fraction": sum(monotone_flags) / trials,
            }
        )
    return AttractorReport(records=records)
