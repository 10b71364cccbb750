"""The variational side: the cost functional J over density-flux pairs, its
first variation, the second-variation quadratic form, and the restriction
property of minimizers.

Quadrature is fixed so that the discrete PDE schemes are exactly the
first-order conditions of the discrete J under the discrete continuity
constraint (for the shipped terminal data g = 0):

* kinetic term  sum_{k=0}^{K-1} dt <m^k L(x, w^k/m^k)>   (left endpoints),
* running potential sum_{k=1}^{K} dt F(m^k)              (right endpoints),
* terminal potential G(m^K) weighted once.

With this pairing, criticality of a converged solution and the vanishing of
the second variation on linearized solutions hold to solver precision, not
just to O(dt).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .grid import DensityField, FluxField, TorusGrid, c10_norm_field, sup_norm
from .mfg import MfgSolution, drift_field, solve_picard
from .models import MfgModel
from .pde import continuity_residual, solve_continuity
from .perturb import low_frequency_field, perturb_density_values

__all__ = [
    "AdmissiblePair",
    "JBreakdown",
    "evaluate_J",
    "first_variation",
    "criticality_defect",
    "evaluate_second_variation",
    "second_variation_parts",
    "admissible_direction",
    "perturbed_nonsolution_pair",
    "restriction_consistency",
    "CriticalityReport",
    "RestrictionReport",
]

ADMISSIBLE_DEFECT_TOL = 1e-8
DIVISION_FLOOR = 1e-12


@dataclass
class AdmissiblePair:
    """Density-flux pair under the discrete continuity equation.

    Membership in the discrete admissible class requires the continuity
    defect below 1e-8 and the kinetic integrand finite (w = 0 wherever
    m = 0).
    """

    m: DensityField
    w: FluxField
    continuity_defect: float

    @classmethod
    def from_values(cls, grid: TorusGrid, m_values, w_values) -> "AdmissiblePair":
        m = DensityField(grid, np.asarray(m_values, dtype=float))
        w = FluxField(grid, np.asarray(w_values, dtype=float))
        defect = continuity_residual(grid, m.values, w.values)
        return cls(m=m, w=w, continuity_defect=defect)

    @classmethod
    def from_solution(cls, sol: MfgSolution) -> "AdmissiblePair":
        return cls.from_values(sol.grid, sol.m.values, sol.w.values)

    @property
    def grid(self) -> TorusGrid:
        return self.m.grid

    def is_admissible(self) -> bool:
        return self.continuity_defect <= ADMISSIBLE_DEFECT_TOL

    def shifted(self, h: float, mu_values, z_values) -> "AdmissiblePair":
        return AdmissiblePair.from_values(
            self.grid, self.m.values + h * mu_values, self.w.values + h * z_values
        )


@dataclass
class JBreakdown:
    kinetic: float
    running_potential: float
    terminal_potential: float
    total: float
    finite: bool = True

    def to_json(self) -> str:
        return json.dumps(
            {
                "kinetic": self.kinetic,
                "running_potential": self.running_potential,
                "terminal_potential": self.terminal_potential,
                "total": self.total,
                "finite": self.finite,
            },
            sort_keys=True,
        )


def _kinetic_slice(model, grid, coords, m_slice, w_slice) -> float:
    """<m L(x, w/m)> with the 0/infinity convention at exact zeros of m."""
    m = np.asarray(m_slice)
    w = np.asarray(w_slice)
    floored = np.maximum(m, DIVISION_FLOOR)
    q = w / floored[..., None]
    contrib = m * model.lagrangian.value(coords, q)
    at_zero = m == 0.0
    if np.any(at_zero):
        w_there = np.max(np.abs(w), axis=-1)[at_zero]
        if np.any(w_there != 0.0):
            return math.inf
        contrib = np.where(at_zero, 0.0, contrib)
    return float(grid.cell_volume * np.sum(contrib))


def evaluate_J(model: MfgModel, pair: AdmissiblePair) -> JBreakdown:
    """Kinetic + running + terminal cost of an admissible pair."""
    grid = pair.grid
    if grid.dim != model.dim:
        raise ValueError("pair dimension does not match the model")
    coords = grid.coordinates()
    coup = model.coupling
    K, dt = grid.n_time, grid.dt

    kinetic = 0.0
    for k in range(K):
        part = _kinetic_slice(model, grid, coords, pair.m.values[k], pair.w.values[k])
        if math.isinf(part):
            return JBreakdown(math.inf, 0.0, 0.0, math.inf, finite=False)
        kinetic += dt * part
    running = dt * sum(float(coup.F(grid, pair.m.values[k])) for k in range(1, K + 1))
    terminal = float(coup.G(grid, pair.m.values[K]))
    return JBreakdown(
        kinetic=kinetic,
        running_potential=running,
        terminal_potential=terminal,
        total=kinetic + running + terminal,
        finite=True,
    )


def first_variation(
    model: MfgModel,
    pair: AdmissiblePair,
    mu_values: np.ndarray,
    z_values: np.ndarray,
) -> float:
    """Exact directional derivative of the discrete J along (mu, z).

    Kinetic part per node: mu (L(q) - D_qL(q).q) + D_qL(q).z with
    q = w/m; at a solution pair q = -D_pH(x,Du), so this coincides with the
    mu L + D_qL.(z + mu D_pH(x,Du)) form used in the continuum computation.
    """
    grid = pair.grid
    coords = grid.coordinates()
    coup = model.coupling
    K, dt, vol = grid.n_time, grid.dt, grid.cell_volume

    total = 0.0
    for k in range(K):
        m = pair.m.values[k]
        w = pair.w.values[k]
        mu = mu_values[k]
        z = z_values[k]
        q = w / np.maximum(m, DIVISION_FLOOR)[..., None]
        lval = model.lagrangian.value(coords, q)
        dql = model.lagrangian.grad_q(coords, q)
        node = mu * (lval - np.sum(dql * q, axis=-1)) + np.sum(dql * z, axis=-1)
        total += dt * vol * float(np.sum(node))
    for k in range(1, K + 1):
        total += dt * vol * float(
            np.sum(coup.f(grid, pair.m.values[k]) * mu_values[k])
        )
    total += vol * float(np.sum(coup.g(grid, pair.m.values[K]) * mu_values[K]))
    return total


def admissible_direction(
    grid: TorusGrid,
    rng: np.random.Generator,
    n_modes: int = 3,
    zero_fraction: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Flux-first probe direction: random smooth z, mu from the continuity solve.

    z vanishes on the first `zero_fraction` of time slices so mu(t0) = 0 and
    perturbed densities m + h mu stay positive for small h; the pair is
    normalized to unit sup magnitude.
    """
    K = grid.n_time
    k_zero = max(1, int(round(zero_fraction * K)))
    times = np.arange(K + 1, dtype=float) / K
    ramp = np.zeros(K + 1)
    width = max(1, K // 5)
    for k in range(K + 1):
        if k <= k_zero:
            ramp[k] = 0.0
        elif k >= k_zero + width:
            ramp[k] = 1.0
        else:
            s = (k - k_zero) / width
            ramp[k] = math.sin(0.5 * math.pi * s) ** 2
    mod = 1.0 + 0.5 * np.cos(2.0 * np.pi * times) * rng.standard_normal()

    tshape = (-1, *([1] * grid.dim))
    z = np.zeros((K + 1, *grid.spatial_shape, grid.dim))
    for a in range(grid.dim):
        profile = low_frequency_field(grid, rng, n_modes)
        z[..., a] = ramp.reshape(tshape) * mod.reshape(tshape) * profile
    mu = solve_continuity(grid, z, np.zeros(grid.spatial_shape))
    scale = max(sup_norm(mu), sup_norm(z), 1e-30)
    return mu / scale, z / scale


@dataclass
class CriticalityReport:
    max_defect: float
    max_fd_mismatch: float
    probes: int


def criticality_defect(
    model: MfgModel,
    sol: MfgSolution,
    probes: int,
    rng: np.random.Generator,
    fd_step: float = 1e-4,
    check_fd: bool = True,
) -> CriticalityReport:
    """Max |dJ/dh| over random admissible directions at a solution pair,
    cross-checked against central finite differences of evaluate_J."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    pair = AdmissiblePair.from_solution(sol)
    worst = 0.0
    worst_fd = 0.0
    for _ in range(probes):
        mu, z = admissible_direction(sol.grid, rng)
        analytic = first_variation(model, pair, mu, z)
        worst = max(worst, abs(analytic))
        if check_fd:
            plus = evaluate_J(model, pair.shifted(fd_step, mu, z)).total
            minus = evaluate_J(model, pair.shifted(-fd_step, mu, z)).total
            fd = (plus - minus) / (2.0 * fd_step)
            worst_fd = max(worst_fd, abs(analytic - fd))
    return CriticalityReport(max_defect=worst, max_fd_mismatch=worst_fd, probes=probes)


def perturbed_nonsolution_pair(
    model: MfgModel,
    sol: MfgSolution,
    amplitude: float,
    rng: np.random.Generator,
) -> AdmissiblePair:
    """Admissible pair at distance ~amplitude from a solution.

    Perturbs the flux and re-solves the continuity equation, so the result
    stays in the admissible class (perturbing m alone would leave it).
    """
    grid = sol.grid
    z = np.zeros((grid.n_time + 1, *grid.spatial_shape, grid.dim))
    for a in range(grid.dim):
        z[..., a] = low_frequency_field(grid, rng)
    w_new = sol.w.values + amplitude * z
    m_new = solve_continuity(grid, w_new, sol.m.values[0])
    if m_new.min() <= 0:
        raise ValueError("perturbation amplitude too large: density hit zero")
    return AdmissiblePair.from_values(grid, m_new, w_new)


def second_variation_parts(
    model: MfgModel,
    sol: MfgSolution,
    mu_values: np.ndarray,
    z_values: np.ndarray,
) -> tuple[float, float, float]:
    """(kinetic, running-kernel, terminal-kernel) pieces of the quadratic form."""
    grid = sol.grid
    coords = grid.coordinates()
    coup = model.coupling
    K, dt, vol = grid.n_time, grid.dt, grid.cell_volume
    b = drift_field(model, grid, sol.u.values)

    kin = 0.0
    for k in range(K):
        m = sol.m.values[k]
        floored = np.maximum(m, DIVISION_FLOOR)
        q = sol.w.values[k] / floored[..., None]
        d2l = model.lagrangian.hess_qq(coords, q)
        vec = z_values[k] + mu_values[k][..., None] * b[k]
        quad = np.einsum("...ij,...i,...j->...", d2l, vec, vec)
        kin += dt * vol * float(np.sum(quad / floored))
    run = 0.0
    for k in range(1, K + 1):
        Kf = coup.kernel_f(grid, sol.m.values[k])
        muf = mu_values[k].reshape(-1)
        run += dt * vol * vol * float(muf @ Kf @ muf)
    Kg = coup.kernel_g(grid, sol.m.values[K])
    muK = mu_values[K].reshape(-1)
    term = vol * vol * float(muK @ Kg @ muK)
    return kin, run, term


def evaluate_second_variation(
    model: MfgModel,
    sol: MfgSolution,
    mu_values: np.ndarray,
    z_values: np.ndarray,
) -> float:
    """Quadratic form d^2/dh^2 J((m,w) + h(mu,z)) for admissible directions.

    Raises on directions violating the linearized continuity equation with
    mu(t0) = 0.
    """
    grid = sol.grid
    defect = continuity_residual(grid, mu_values, z_values)
    if defect > ADMISSIBLE_DEFECT_TOL or sup_norm(mu_values[0]) > ADMISSIBLE_DEFECT_TOL:
        raise ValueError(
            f"inadmissible direction: continuity defect {defect:.3e}, "
            f"|mu(t0)| {sup_norm(mu_values[0]):.3e}"
        )
    kin, run, term = second_variation_parts(model, sol, mu_values, z_values)
    return kin + run + term


@dataclass
class RestrictionReport:
    t1_index: int
    dist_from_restriction_init: float
    dist_from_perturbed_init: float
    both_converged: bool


def restriction_consistency(
    model: MfgModel,
    sol: MfgSolution,
    t1_index: int,
    perturbation: float = 1e-2,
    seed=0,
    damping: float = 0.5,
    tol: float = 1e-11,
    max_iter: int = 400,
) -> RestrictionReport:
    """Re-solve on [t1, T] from the restriction's initial density.

    Distances of the re-solves to the restriction of sol are reported in
    sup(u C^{1,0}) + sup(m) form.
    """
    grid = sol.grid
    if not 0 < t1_index < grid.n_time:
        raise ValueError("t1 must be an interior grid time")
    rgrid = grid.restrict(t1_index)
    m_restr = sol.m.values[t1_index:].copy()
    u_restr = sol.u.values[t1_index:]
    m1 = m_restr[0]

    def dist(s):
        return c10_norm_field(rgrid, s.u.values - u_restr) + sup_norm(
            s.m.values - m_restr
        )

    run_a = solve_picard(
        model, rgrid, m0=m1, init_m=m_restr, damping=damping, tol=tol, max_iter=max_iter
    )
    rng = np.random.default_rng(seed)
    init_b = perturb_density_values(rgrid, m_restr, perturbation, rng)
    init_b[0] = m1
    run_b = solve_picard(
        model, rgrid, m0=m1, init_m=init_b, damping=damping, tol=tol, max_iter=max_iter
    )
    return RestrictionReport(
        t1_index=t1_index,
        dist_from_restriction_init=dist(run_a),
        dist_from_perturbed_init=dist(run_b),
        both_converged=run_a.converged and run_b.converged,
    )
