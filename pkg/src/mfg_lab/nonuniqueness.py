"""Two distinct equilibria of one game: the symmetric branch, a
symmetry-broken branch, and the explicit competitor that witnesses
non-minimality of the symmetric one.

Mechanism (d = 1, reflection x -> -x; d = 2 reflects x1): the running
potential theta*(1 - S(m)^2)^2 with S the first odd sine moment is
reflection-invariant yet cheapest for lopsided densities, so for theta and T
large enough the reflection-symmetric equilibrium stops being a minimizer of
the cost functional and a second, asymmetric equilibrium appears.  The sweep
searches (theta, T) cells for a residual-verified pair; the parameters where
this happens are experiment outputs, not assertions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import TorusGrid, gradient, l2_norm, laplacian_symbol, sup_norm
from .mfg import MfgSolution, drift_field, heat_flow_of_initial, solve_picard
from .models import MfgModel, builtin_quadratic
from .pde import HjbProblem, KolmogorovProblem, solve_hjb, solve_kolmogorov
from .potential import AdmissiblePair, JBreakdown, evaluate_J

__all__ = [
    "reflect_values",
    "reflection_defect",
    "find_symmetric_branch",
    "find_asymmetric_branch",
    "BranchPair",
    "make_branch_pair",
    "build_competitor",
    "sweep_nonuniqueness",
    "SweepResult",
]


def reflect_values(values: np.ndarray, spatial_axis: int = 1) -> np.ndarray:
    """Pushforward by x1 -> -x1 (mod 1) along the given array axis."""
    n = values.shape[spatial_axis]
    idx = (-np.arange(n)) % n
    return np.take(values, idx, axis=spatial_axis)


def reflection_defect(values: np.ndarray, spatial_axis: int = 1) -> float:
    return sup_norm(values - reflect_values(values, spatial_axis))


def find_symmetric_branch(
    model: MfgModel,
    grid: TorusGrid,
    damping: float = 0.5,
    tol: float = 1e-11,
    max_iter: int = 400,
    polish_iters: int = 5,
) -> tuple[MfgSolution, float]:
    """Picard with a symmetrization projection after each density update.

    The reflection-symmetric subspace is invariant for symmetric data, so
    the projected fixed point is a fixed point of the unprojected map too;
    this is verified by running `polish_iters` unprojected rounds at the
    end.  Returns (solution, unprojected drift during the polish).
    """
    m0 = model.initial_density_slice(grid)
    if reflection_defect(m0[None, ...]) > 1e-10:
        raise ValueError("symmetric branch requires a reflection-symmetric m0")
    m_values = heat_flow_of_initial(model, grid, m0)
    coup = model.coupling
    for _ in range(max_iter):
        source = coup.f_field(grid, m_values)
        u_values = solve_hjb(
            HjbProblem(model, grid, source, coup.g(grid, m_values[-1]))
        ).u.values
        m_new = solve_kolmogorov(
            KolmogorovProblem(grid, drift_field(model, grid, u_values), m0)
        ).m.values
        gap = max(
            l2_norm(grid, m_new[k] - m_values[k]) for k in range(grid.n_time + 1)
        )
        m_values = (1.0 - damping) * m_values + damping * m_new
        m_values = 0.5 * (m_values + reflect_values(m_values))
        m_values[0] = m0
        if gap <= tol:
            break
    # unprojected polish: the symmetric solution must hold on its own
    polished = solve_picard(
        model,
        grid,
        m0=m0,
        init_m=m_values,
        damping=1.0,
        tol=0.0,
        max_iter=polish_iters,
    )
    drift = sup_norm(polished.m.values - m_values)
    final = solve_picard(
        model, grid, m0=m0, init_m=polished.m.values, damping=damping,
        tol=tol, max_iter=50,
    )
    return final, drift


@dataclass
class AsymmetricSearch:
    found: bool
    solution: Optional[MfgSolution]
    reason: str
    fp_rounds: int
    reflection_defect: float


def asymmetric_initial_belief(grid: TorusGrid, amplitude: float = 0.8) -> np.ndarray:
    """Belief with mass shifted toward the sine-favored region (x1 = 1/4)."""
    coords = grid.coordinates()
    profile = 1.0 + amplitude * np.sin(2.0 * np.pi * coords[0])
    profile = profile / (grid.cell_volume * profile.sum())
    return np.broadcast_to(profile, (grid.n_time + 1, *grid.spatial_shape)).copy()


def _max_sine_moment(grid: TorusGrid, values: np.ndarray) -> float:
    coords = grid.coordinates()
    sine = np.sin(2.0 * np.pi * coords[0])
    moments = grid.cell_volume * (values * sine).reshape(values.shape[0], -1).sum(
        axis=1
    )
    return float(np.max(np.abs(moments)))


def find_asymmetric_branch(
    model: MfgModel,
    grid: TorusGrid,
    tol: float = 1e-8,
    fp_rounds: int = 150,
    symmetric_defect: float = 0.0,
    separation_floor: float = 1e-2,
    collapse_check_round: int = 40,
    collapse_moment: float = 0.02,
) -> AsymmetricSearch:
    """Fictitious play from an asymmetric belief, polished by damped Picard.

    Convergence back to the symmetric branch is reported as not-found at
    these parameters (that outcome steers the sweep), never as an error; a
    collapsing sine moment ends the run early.
    """
    from .fictitious_play import _as_solution, fp_start, fp_step
    from .pde import SolverError

    try:
        state = fp_start(model, grid, mu0=asymmetric_initial_belief(grid))
        for _ in range(fp_rounds):
            state = fp_step(state)
            if state.n == collapse_check_round:
                if _max_sine_moment(grid, state.last_m) < collapse_moment:
                    return AsymmetricSearch(
                        False,
                        None,
                        "converged to the symmetric branch",
                        state.n,
                        reflection_defect(state.last_m),
                    )
        candidate = _as_solution(state)
        for damping in (0.5, 0.25):
            polished = solve_picard(
                model,
                grid,
                init_m=candidate.m.values,
                damping=damping,
                tol=min(tol * 1e-2, 1e-10),
                max_iter=400,
            )
            if polished.converged:
                candidate = polished
                break
    except SolverError as exc:
        # a transport blow-up at these parameters is a not-found cell,
        # recorded so the sweep can steer around it
        return AsymmetricSearch(False, None, f"solver failure: {exc}", 0, 0.0)
    defect = reflection_defect(candidate.m.values)
    resid = max(candidate.residuals["hjb"], candidate.residuals["kolmogorov"])
    if resid > tol:
        return AsymmetricSearch(
            False, None, f"residual {resid:.2e} above {tol:.0e}", state.n, defect
        )
    if defect < max(10.0 * symmetric_defect, separation_floor):
        return AsymmetricSearch(
            False, None, "converged to the symmetric branch", state.n, defect
        )
    return AsymmetricSearch(True, candidate, "ok", state.n, defect)


@dataclass
class BranchPair:
    symmetric: MfgSolution
    asymmetric: MfgSolution
    separation: float
    j_symmetric: JBreakdown
    j_asymmetric: JBreakdown
    theta: float
    horizon: float
    reflection_defect_symmetric: float
    reflection_defect_asymmetric: float

    def summary(self) -> dict:
        return {
            "theta": self.theta,
            "horizon": self.horizon,
            "separation": self.separation,
            "j_symmetric": self.j_symmetric.total,
            "j_asymmetric": self.j_asymmetric.total,
            "reflection_defect_symmetric": self.reflection_defect_symmetric,
            "reflection_defect_asymmetric": self.reflection_defect_asymmetric,
            "residuals_symmetric": self.symmetric.residuals,
            "residuals_asymmetric": self.asymmetric.residuals,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def make_branch_pair(
    model: MfgModel, grid: TorusGrid, tol: float = 1e-8, fp_rounds: int = 150
) -> tuple[Optional[BranchPair], str]:
    sym, sym_drift = find_symmetric_branch(model, grid)
    sym_defect = reflection_defect(sym.m.values)
    search = find_asymmetric_branch(
        model, grid, tol=tol, fp_rounds=fp_rounds, symmetric_defect=sym_defect
    )
    if not search.found:
        return None, search.reason
    asym = search.solution
    separation = sup_norm(sym.m.values - asym.m.values)
    pair = BranchPair(
        symmetric=sym,
        asymmetric=asym,
        separation=separation,
        j_symmetric=evaluate_J(model, AdmissiblePair.from_solution(sym)),
        j_asymmetric=evaluate_J(model, AdmissiblePair.from_solution(asym)),
        theta=model.theta,
        horizon=grid.T - grid.t0,
        reflection_defect_symmetric=sym_defect,
        reflection_defect_asymmetric=search.reflection_defect,
    )
    _ = sym_drift
    return pair, "ok"


# ---------------------------------------------------------------------------
# explicit competitor
# ---------------------------------------------------------------------------


def _poisson_solve(grid: TorusGrid, rhs: np.ndarray) -> np.ndarray:
    """Periodic -Lap phi = rhs for zero-mean rhs, via the stencil symbol.

    Modes in the stencil kernel (zero mode and, for the wide stencil, the
    Nyquist modes) are projected out; smooth rhs carries only roundoff there.
    """
    lam = laplacian_symbol(grid)
    axes = tuple(range(grid.dim))
    rhs_hat = np.fft.fftn(rhs, axes=axes)
    denom = -lam
    phi_hat = np.where(np.abs(denom) > 1e-10, rhs_hat / np.where(denom == 0, 1.0, denom), 0.0)
    return np.fft.ifftn(phi_hat, axes=axes).real


def holding_rate(model: MfgModel, grid: TorusGrid, mbar: np.ndarray) -> float:
    """Cost rate of holding the profile mbar stationary: kinetic + potential."""
    coords = grid.coordinates()
    w = gradient(grid, mbar)
    q = w / mbar[..., None]
    kin = grid.cell_volume * float(np.sum(mbar * model.lagrangian.value(coords, q)))
    return kin + float(model.coupling.F(grid, mbar))


def best_holding_profile(model: MfgModel, grid: TorusGrid) -> tuple[np.ndarray, float]:
    """Sine profile 1 + a sin(2 pi x1) minimizing the holding rate over a."""
    coords = grid.coordinates()
    sine = np.sin(2.0 * np.pi * coords[0])
    best_a, best_rate = 0.0, holding_rate(model, grid, np.ones(grid.spatial_shape))
    for a in np.linspace(0.05, 0.95, 19):
        mbar = 1.0 + a * sine
        mbar = mbar / (grid.cell_volume * mbar.sum())
        rate = holding_rate(model, grid, mbar)
        if rate < best_rate:
            best_a, best_rate = a, rate
    mbar = 1.0 + best_a * sine
    mbar = mbar / (grid.cell_volume * mbar.sum())
    return mbar, best_rate


def build_competitor(
    model: MfgModel, grid: TorusGrid, mbar: Optional[np.ndarray] = None
) -> AdmissiblePair:
    """Admissible pair connecting m0 to a holding profile in unit time.

    On [t0, t0+1], m interpolates linearly between m0 and mbar with flux
    D m^{k+1} - D phi, where -Lap phi = m0 - mbar; afterwards the pair sits
    at (mbar, D mbar).  Both segments satisfy the discrete continuity
    equation exactly because the divergence of a gradient is the scheme's
    Laplacian.  Requires the horizon to exceed the unit transition time.
    """
    if grid.T - grid.t0 <= 1.0:
        raise ValueError("competitor needs a horizon longer than the unit transition")
    k1 = grid.time_index(grid.t0 + 1.0)
    m0 = model.initial_density_slice(grid)
    if mbar is None:
        mbar, _ = best_holding_profile(model, grid)
    phi = _poisson_solve(grid, m0 - mbar)
    dphi = gradient(grid, phi)

    K = grid.n_time
    m = np.empty((K + 1, *grid.spatial_shape))
    w = np.zeros((K + 1, *grid.spatial_shape, grid.dim))
    for k in range(K + 1):
        s = min(1.0, k / k1)
        m[k] = (1.0 - s) * m0 + s * mbar
    for k in range(K):
        if k < k1:
            w[k] = gradient(grid, m[k + 1]) - dphi
        else:
            w[k] = gradient(grid, mbar)
    w[K] = gradient(grid, mbar)
    return AdmissiblePair.from_values(grid, m, w)


# ---------------------------------------------------------------------------
# parameter sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    cells: list
    best: Optional[BranchPair]
    refined: Optional[BranchPair]
    separation_change: Optional[float]

    def to_csv(self, path) -> None:
        lines = ["theta,horizon,found,separation,j_symmetric,j_asymmetric,reason"]
        for c in self.cells:
            lines.append(
                f"{c['theta']!r},{c['horizon']!r},{int(c['found'])},"
                f"{c['separation']!r},{c['j_symmetric']!r},{c['j_asymmetric']!r},"
                f"{c['reason']}"
            )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _cell_model(theta: float, horizon: float, dim: int) -> MfgModel:
    return builtin_quadratic(
        theta=theta,
        coupling="antimonotone_symmetric",
        dim=dim,
        T=horizon,
        m0="uniform",
    )


def sweep_nonuniqueness(
    thetas=(1.0, 4.0, 16.0, 64.0),
    horizons=(0.5, 1.0, 2.0, 4.0, 8.0),
    dim: int = 1,
    n_space: int = 32,
    steps_per_unit_time: int = 128,
    tol: float = 1e-6,
    fp_rounds: int = 150,
    refine_best: bool = True,
    mapper=map,
) -> SweepResult:
    """Geometric (theta, T) sweep; each cell hunts for a branch pair.

    The best cell (largest separation with a verified J ordering) is re-run
    once at doubled resolution to guard against discretization phantoms.
    Cells are independent; `mapper` may evaluate them concurrently, results
    are collected in cell order either way.
    """
    params = [(theta, horizon) for theta in thetas for horizon in horizons]

    def run_cell(args):
        theta, horizon = args
        model = _cell_model(theta, horizon, dim)
        n_time = max(2, int(round(horizon * steps_per_unit_time)))
        grid = model.make_grid(n_space, n_time)
        return make_branch_pair(model, grid, tol=tol, fp_rounds=fp_rounds)

    cells = []
    best_pair: Optional[BranchPair] = None
    best_key = None
    for (theta, horizon), (pair, reason) in zip(params, mapper(run_cell, params)):
        found = pair is not None and pair.j_asymmetric.total < pair.j_symmetric.total
        cells.append(
            {
                "theta": theta,
                "horizon": horizon,
                "found": found,
                "separation": pair.separation if pair else 0.0,
                "j_symmetric": pair.j_symmetric.total if pair else math.nan,
                "j_asymmetric": pair.j_asymmetric.total if pair else math.nan,
                "reason": reason if not found else "ok",
            }
        )
        if found and (best_key is None or pair.separation > best_key):
            best_key = pair.separation
            best_pair = pair
    refined = None
    change = None
    if best_pair is not None and refine_best:
        model = _cell_model(best_pair.theta, best_pair.horizon, dim)
        n_time = int(round(best_pair.horizon * steps_per_unit_time * 2))
        grid = model.make_grid(n_space * 2, n_time)
        refined, _ = make_branch_pair(model, grid, tol=tol, fp_rounds=fp_rounds)
        if refined is not None:
            change = abs(refined.separation - best_pair.separation) / best_pair.separation
    return SweepResult(
        cells=cells, best=best_pair, refined=refined, separation_change=change
    )
