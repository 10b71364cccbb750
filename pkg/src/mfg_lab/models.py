"""Game data: Hamiltonians, Lagrangians, couplings, and the built-in models.

Sign convention used everywhere: the Lagrangian is the conjugate
``L(x,q) = sup_p { -p.q - H(x,p) }``, the optimal flux of a solution is
``w = -m * D_pH(x, Du)``, and the maximizer satisfies ``p* = -D_qL(q)``,
``q = -D_pH(p*)``, hence ``D2_qqL(x, w/m) @ D2_ppH(x, Du) = I``.

Couplings ship with their flat (measure) derivatives as grid kernels
``K(x_i, m, y_j)`` acting by dx^d-weighted matrix-vector products.  Both the
coupling value f and its kernel are the normalized representatives
(integral against m vanishes); adding slice-constants to f does not change
the game, but only the normalized pair satisfies the kernel symmetry
relation ``K(x,y) - K(y,x) = f(x) - f(y)`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .grid import TorusGrid

__all__ = [
    "Hamiltonian",
    "Lagrangian",
    "Coupling",
    "MfgModel",
    "builtin_quadratic",
    "quadratic_hamiltonian",
    "abs_hamiltonian",
    "zero_coupling",
    "monotone_local_coupling",
    "monotone_smoothed_coupling",
    "antimonotone_symmetric_coupling",
    "m0_preset",
    "check_convexity",
    "check_hamiltonian_gradient",
    "check_legendre",
    "check_symmetry_relation",
    "check_coupling_normalization",
    "legendre_transform_newton",
    "COUPLINGS",
    "HAMILTONIANS",
    "M0_PRESETS",
]


@dataclass(frozen=True)
class Hamiltonian:
    """H(x,p) with derivatives; x is a tuple of coordinate arrays, p has a
    trailing axis of length d matching x."""

    name: str
    value: Callable
    grad_p: Callable
    hess_pp: Callable
    grad_x: Callable
    c_low: float
    c_high: float


@dataclass(frozen=True)
class Lagrangian:
    name: str
    value: Callable
    grad_q: Callable
    hess_qq: Callable


class ZeroKernel:
    """Placeholder for couplings without a terminal of running kernel."""

    def __call__(self, grid, m_slice):
        n = grid.n_nodes
        return np.zeros((n, n))


@dataclass(frozen=True)
class Coupling:
    """Running coupling f with potential F and kernel, plus terminal (g, G).

    All callables take (grid, m_slice) with m_slice of spatial shape;
    kernels return (n_nodes, n_nodes) matrices acting through
    ``dx^d * K @ mu_flat``.
    """

    name: str
    is_potential: bool
    f: Callable
    kernel_f: Callable
    F: Optional[Callable]
    g: Callable
    kernel_g: Callable
    G: Optional[Callable]

    def f_field(self, grid, m_values: np.ndarray) -> np.ndarray:
        return np.stack(
            [self.f(grid, m_values[k]) for k in range(m_values.shape[0])]
        )


@dataclass(frozen=True)
class MfgModel:
    """Bundle of game data on a fixed horizon."""

    name: str
    dim: int
    hamiltonian: Hamiltonian
    lagrangian: Lagrangian
    coupling: Coupling
    t0: float
    T: float
    m0: Callable
    theta: float = 0.0

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError("model horizon requires T > t0")

    def make_grid(self, n_space: int, n_time: int) -> TorusGrid:
        return TorusGrid(self.dim, n_space, n_time, self.t0, self.T)

    def initial_density_slice(self, grid: TorusGrid) -> np.ndarray:
        """m0 sampled to the grid and renormalized to exact unit mass."""
        vals = np.asarray(self.m0(grid), dtype=float)
        if vals.shape != grid.spatial_shape:
            raise ValueError("m0 sample has wrong shape")
        if vals.min() < 0:
            raise ValueError("m0 must be nonnegative")
        mass = grid.cell_volume * vals.sum()
        if mass <= 0:
            raise ValueError("m0 must have positive mass")
        return vals / mass

    def with_horizon(self, t0: float, T: float) -> "MfgModel":
        return MfgModel(
            self.name,
            self.dim,
            self.hamiltonian,
            self.lagrangian,
            self.coupling,
            t0,
            T,
            self.m0,
            self.theta,
        )


# ---------------------------------------------------------------------------
# Hamiltonian / Lagrangian library
# ---------------------------------------------------------------------------


def _coef(eps: float):
    def a_of_x(x):
        return 1.0 + eps * np.cos(2.0 * np.pi * x[0])

    def da_of_x(x):
        return -2.0 * np.pi * eps * np.sin(2.0 * np.pi * x[0])

    return a_of_x, da_of_x


def quadratic_hamiltonian(eps: float = 0.0) -> tuple[Hamiltonian, Lagrangian]:
    """H(x,p) = (1 + eps*cos(2 pi x1)) |p|^2 / 2 and its conjugate.

    eps = 0 is the plain quadratic pair H = |p|^2/2, L = |q|^2/2.
    Requires |eps| < 1 for uniform convexity.
    """
    if not abs(eps) < 1.0:
        raise ValueError("need |eps| < 1 for uniform convexity")
    a_of_x, da_of_x = _coef(eps)

    def h_val(x, p):
        return 0.5 * a_of_x(x) * np.sum(p**2, axis=-1)

    def h_grad_p(x, p):
        return a_of_x(x)[..., None] * p

    def h_hess(x, p):
        d = p.shape[-1]
        out = np.zeros((*p.shape[:-1], d, d))
        idx = np.arange(d)
        out[..., idx, idx] = a_of_x(x)[..., None]
        return out

    def h_grad_x(x, p):
        d = p.shape[-1]
        out = np.zeros((*p.shape[:-1], d))
        out[..., 0] = 0.5 * da_of_x(x) * np.sum(p**2, axis=-1)
        return out

    def l_val(x, q):
        return 0.5 * np.sum(q**2, axis=-1) / a_of_x(x)

    def l_grad_q(x, q):
        return q / a_of_x(x)[..., None]

    def l_hess(x, q):
        d = q.shape[-1]
        out = np.zeros((*q.shape[:-1], d, d))
        idx = np.arange(d)
        out[..., idx, idx] = 1.0 / a_of_x(x)[..., None]
        return out

    name = "quadratic" if eps == 0.0 else f"quadratic_xdep(eps={eps})"
    ham = Hamiltonian(
        name=name,
        value=h_val,
        grad_p=h_grad_p,
        hess_pp=h_hess,
        grad_x=h_grad_x,
        c_low=(1.0 - abs(eps)),
        c_high=(1.0 + abs(eps)),
    )
    lag = Lagrangian(
        name=name, value=l_val, grad_q=l_grad_q, hess_qq=l_hess
    )
    return ham, lag


def abs_hamiltonian() -> Hamiltonian:
    """H(x,p) = |p|: degenerate Hessian, fails the uniform-convexity check.

    Shipped only so validation has a concrete failure case; no Lagrangian.
    """

    def h_val(x, p):
        return np.sqrt(np.sum(p**2, axis=-1))

    def h_grad_p(x, p):
        nrm = np.sqrt(np.sum(p**2, axis=-1))
        safe = np.where(nrm == 0.0, 1.0, nrm)
        return p / safe[..., None]

    def h_hess(x, p):
        d = p.shape[-1]
        nrm2 = np.sum(p**2, axis=-1)
        safe = np.where(nrm2 == 0.0, 1.0, nrm2)
        idx = np.arange(d)
        out = -p[..., :, None] * p[..., None, :] / safe[..., None, None]
        out[..., idx, idx] += 1.0
        return out / np.sqrt(safe)[..., None, None]

    def h_grad_x(x, p):
        return np.zeros((*p.shape[:-1], p.shape[-1]))

    return Hamiltonian(
        name="abs",
        value=h_val,
        grad_p=h_grad_p,
        hess_pp=h_hess,
        grad_x=h_grad_x,
        c_low=0.0,
        c_high=np.inf,
    )


# ---------------------------------------------------------------------------
# coupling library
# ---------------------------------------------------------------------------


def _flatten(grid: TorusGrid, slc: np.ndarray) -> np.ndarray:
    return np.asarray(slc).reshape(grid.n_nodes)


def zero_coupling() -> Coupling:
    zk = ZeroKernel()

    def zero_f(grid, m_slice):
        return np.zeros(grid.spatial_shape)

    return Coupling(
        name="none",
        is_potential=True,
        f=zero_f,
        kernel_f=zk,
        F=lambda grid, m: 0.0,
        g=zero_f,
        kernel_g=zk,
        G=lambda grid, m: 0.0,
    )


def monotone_local_coupling() -> Coupling:
    """f(x,m) = m(x) up to normalization; F(m) = 1/2 int m^2."""

    def f(grid, m):
        m = np.asarray(m)
        return m - grid.cell_volume * np.sum(m * m)

    def F(grid, m):
        return 0.5 * grid.cell_volume * float(np.sum(np.asarray(m) ** 2))

    def kernel(grid, m):
        mf = _flatten(grid, m)
        n = grid.n_nodes
        vol = grid.cell_volume
        K = np.full((n, n), 2.0 * vol * np.sum(mf * mf))
        K -= 2.0 * mf[None, :]
        K -= mf[:, None]
        K[np.arange(n), np.arange(n)] += 1.0 / vol
        return K

    zk = ZeroKernel()

    def zero_f(grid, m_slice):
        return np.zeros(grid.spatial_shape)

    return Coupling(
        name="monotone_local",
        is_potential=True,
        f=f,
        kernel_f=kernel,
        F=F,
        g=zero_f,
        kernel_g=zk,
        G=lambda grid, m: 0.0,
    )


def _smoothing_profile(grid: TorusGrid) -> np.ndarray:
    """Even, positive-definite mollifier: product of 1 + cos(2 pi x_a)."""
    x = grid.axis_coordinates()
    rho1 = 1.0 + np.cos(2.0 * np.pi * x)
    if grid.dim == 1:
        return rho1
    return rho1[:, None] * rho1[None, :]


def _circular_convolve(grid: TorusGrid, rho: np.ndarray, m: np.ndarray) -> np.ndarray:
    axes = tuple(range(grid.dim))
    out = np.fft.ifftn(
        np.fft.fftn(rho, axes=axes) * np.fft.fftn(m, axes=axes), axes=axes
    ).real
    return grid.cell_volume * out


def monotone_smoothed_coupling() -> Coupling:
    """f(x,m) = (rho * m)(x) with an even kernel; F(m) = 1/2 int (rho*m) m."""

    def conv(grid, m):
        return _circular_convolve(grid, _smoothing_profile(grid), np.asarray(m))

    def f(grid, m):
        rm = conv(grid, m)
        return rm - grid.cell_volume * np.sum(rm * np.asarray(m))

    def F(grid, m):
        rm = conv(grid, m)
        return 0.5 * grid.cell_volume * float(np.sum(rm * np.asarray(m)))

    def kernel(grid, m):
        rho = _smoothing_profile(grid)
        rm = _flatten(grid, conv(grid, m))
        mf = _flatten(grid, m)
        n = grid.n_nodes
        # circulant block: rho evaluated at x_i - y_j
        if grid.dim == 1:
            idx = np.arange(n)
            K = rho[(idx[:, None] - idx[None, :]) % n].astype(float)
        else:
            N = grid.n_space
            i1, i2 = np.divmod(np.arange(n), N)
            d1 = (i1[:, None] - i1[None, :]) % N
            d2 = (i2[:, None] - i2[None, :]) % N
            K = rho[d1, d2].astype(float)
        K -= 2.0 * rm[None, :]
        K -= rm[:, None]
        K += 2.0 * grid.cell_volume * np.sum(rm * mf)
        return K

    zk = ZeroKernel()

    def zero_f(grid, m_slice):
        return np.zeros(grid.spatial_shape)

    return Coupling(
        name="monotone_smoothed",
        is_potential=True,
        f=f,
        kernel_f=kernel,
        F=F,
        g=zero_f,
        kernel_g=zk,
        G=lambda grid, m: 0.0,
    )


def _sine_moment(grid: TorusGrid, m: np.ndarray) -> tuple[float, np.ndarray]:
    """First odd Fourier moment along x1 and its integrand sin(2 pi x1)."""
    coords = grid.coordinates()
    s_x = np.sin(2.0 * np.pi * coords[0])
    return float(grid.cell_volume * np.sum(s_x * np.asarray(m))), s_x


def _phi(s: float) -> float:
    return (1.0 - s * s) ** 2


def _phi_prime(s: float) -> float:
    return -4.0 * s * (1.0 - s * s)


def _phi_second(s: float) -> float:
    return -4.0 + 12.0 * s * s


def antimonotone_symmetric_coupling(theta: float) -> Coupling:
    """Symmetry-breaking potential F(m) = theta * (1 - S(m)^2)^2 with
    S(m) = int sin(2 pi x1) dm.

    F is invariant under x1 -> -x1 and is minimized at |S| = 1, so every
    reflection-symmetric density (S = 0) pays the maximal rate theta while
    lopsided densities pay less: the ingredient that makes multiple
    equilibria possible for large theta and long horizons.
    """
    if theta < 0:
        raise ValueError("theta must be >= 0")

    def f(grid, m):
        S, s_x = _sine_moment(grid, m)
        return theta * _phi_prime(S) * (s_x - S)

    def F(grid, m):
        S, _ = _sine_moment(grid, m)
        return theta * _phi(S)

    def kernel(grid, m):
        S, s_x = _sine_moment(grid, m)
        sf = _flatten(grid, s_x)
        coeff = _phi_second(S) * (sf - S)[:, None] - _phi_prime(S)
        return theta * (sf - S)[None, :] * coeff

    zk = ZeroKernel()

    def zero_f(grid, m_slice):
        return np.zeros(grid.spatial_shape)

    return Coupling(
        name="antimonotone_symmetric",
        is_potential=True,
        f=f,
        kernel_f=kernel,
        F=F,
        g=zero_f,
        kernel_g=zk,
        G=lambda grid, m: 0.0,
    )


# ---------------------------------------------------------------------------
# initial densities
# ---------------------------------------------------------------------------


def _m0_uniform(grid: TorusGrid) -> np.ndarray:
    return np.ones(grid.spatial_shape)


def _m0_cosine(grid: TorusGrid, amplitude: float = 0.5) -> np.ndarray:
    coords = grid.coordinates()
    return 1.0 + amplitude * np.cos(2.0 * np.pi * coords[0])


def _m0_bump(grid: TorusGrid) -> np.ndarray:
    coords = grid.coordinates()
    return np.exp(2.0 * np.cos(2.0 * np.pi * coords[0]))


M0_PRESETS = {
    "uniform": _m0_uniform,
    "cosine": _m0_cosine,
    "bump": _m0_bump,
}


def m0_preset(name: str, amplitude: float = 0.5) -> Callable:
    """Initial-density preset; `amplitude` parameterizes the cosine profile.

    Amplitudes above 1 produce signed profiles, rejected downstream by the
    density nonnegativity invariant (used as a validation failure case).
    """
    if name == "cosine":
        return lambda grid: _m0_cosine(grid, amplitude)
    return M0_PRESETS[name]

COUPLINGS = {
    "none": lambda theta: zero_coupling(),
    "monotone_local": lambda theta: monotone_local_coupling(),
    "monotone_smoothed": lambda theta: monotone_smoothed_coupling(),
    "antimonotone_symmetric": antimonotone_symmetric_coupling,
}

HAMILTONIANS = {
    "quadratic": lambda: quadratic_hamiltonian(0.0),
    "quadratic_xdep": lambda: quadratic_hamiltonian(0.1),
}


def builtin_quadratic(
    theta: float = 0.0,
    coupling: str = "antimonotone_symmetric",
    dim: int = 1,
    t0: float = 0.0,
    T: float = 1.0,
    m0: str | Callable = "uniform",
    hamiltonian: str = "quadratic",
    m0_amplitude: float = 0.5,
) -> MfgModel:
    """Quadratic-Hamiltonian model with a selectable coupling.

    theta scales the antimonotone coupling; theta = 0 or coupling='none'
    gives the decoupled game (f = 0, g = 0) whose solution is u = 0 with m
    the heat flow of m0.
    """
    if theta < 0:
        raise ValueError("theta must be >= 0")
    ham, lag = HAMILTONIANS[hamiltonian]()
    if coupling == "antimonotone_symmetric" and theta == 0.0:
        coup = zero_coupling()
    else:
        coup = COUPLINGS[coupling](theta)
    m0_fn = m0_preset(m0, m0_amplitude) if isinstance(m0, str) else m0
    return MfgModel(
        name=f"{hamiltonian}+{coup.name}",
        dim=dim,
        hamiltonian=ham,
        lagrangian=lag,
        coupling=coup,
        t0=t0,
        T=T,
        m0=m0_fn,
        theta=theta,
    )


# ---------------------------------------------------------------------------
# validation checks
# ---------------------------------------------------------------------------


@dataclass
class ConvexityReport:
    min_eig: float
    max_eig: float
    ok: bool
    samples: int


def _sample_xp(dim: int, samples: int, seed, p_max: float):
    rng = np.random.default_rng(seed)
    x = tuple(rng.uniform(0.0, 1.0, size=samples) for _ in range(dim))
    p = rng.uniform(-p_max, p_max, size=(samples, dim))
    return x, p


def check_convexity(
    h: Hamiltonian, dim: int, samples: int = 100, seed=0, p_max: float = 10.0
) -> ConvexityReport:
    """Extreme eigenvalues of D2_ppH over sampled (x, p) with |p_i| <= p_max.

    A violation (min_eig <= 0) is reported, not raised.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x, p = _sample_xp(dim, samples, seed, p_max)
    hess = h.hess_pp(x, p)
    eigs = np.linalg.eigvalsh(hess)
    lo, hi = float(eigs.min()), float(eigs.max())
    return ConvexityReport(min_eig=lo, max_eig=hi, ok=lo > 0.0, samples=samples)


def check_hamiltonian_gradient(
    h: Hamiltonian, dim: int, samples: int = 50, seed=0, step: float = 1e-4
) -> float:
    """Max |D_pH - central finite difference of H| over samples."""
    x, p = _sample_xp(dim, samples, seed, p_max=5.0)
    grad = h.grad_p(x, p)
    worst = 0.0
    for a in range(dim):
        e = np.zeros(dim)
        e[a] = step
        fd = (h.value(x, p + e) - h.value(x, p - e)) / (2.0 * step)
        worst = max(worst, float(np.max(np.abs(fd - grad[..., a]))))
    return worst


def legendre_transform_newton(
    h: Hamiltonian, x, q: np.ndarray, iters: int = 30, tol: float = 1e-12
) -> tuple[np.ndarray, np.ndarray]:
    """Inner maximization of -p.q - H(x,p) by Newton; returns (p*, L values)."""
    p = np.zeros_like(q)
    for _ in range(iters):
        r = q + h.grad_p(x, p)  # stationarity residual (negated)
        if np.max(np.abs(r)) < tol:
            break
        hess = h.hess_pp(x, p)
        p = p - np.linalg.solve(hess, r[..., None])[..., 0]
    lvals = -np.sum(p * q, axis=-1) - h.value(x, p)
    return p, lvals


@dataclass
class LegendreReport:
    conjugacy_defect: float
    hessian_identity_defect: float
    argmax_defect: float


def check_legendre(
    h: Hamiltonian,
    lag: Lagrangian,
    dim: int,
    samples: int = 200,
    seed=0,
) -> LegendreReport:
    """Consistency of the shipped (H, L) pair via the inner-maximization oracle.

    Checks L(x,q) + H(x,p*) + p*.q = 0 at the Newton maximizer p*, that
    p* = -D_qL(x,q), and the Hessian product identity
    D2_qqL(x, -D_pH(x,p)) @ D2_ppH(x,p) = I.
    """
    x, p = _sample_xp(dim, samples, seed, p_max=5.0)
    q = -h.grad_p(x, p)
    p_star, l_oracle = legendre_transform_newton(h, x, q)
    lvals = lag.value(x, q)
    conj = float(np.max(np.abs(lvals + h.value(x, p_star) + np.sum(p_star * q, axis=-1))))
    argmax = float(np.max(np.abs(p_star + lag.grad_q(x, q))))
    prod = np.einsum("...ij,...jk->...ik", lag.hess_qq(x, q), h.hess_pp(x, p))
    eye = np.eye(dim)
    hess_defect = float(np.max(np.abs(prod - eye)))
    _ = l_oracle
    return LegendreReport(
        conjugacy_defect=conj,
        hessian_identity_defect=hess_defect,
        argmax_defect=argmax,
    )


def check_symmetry_relation(
    coupling: Coupling,
    grid: TorusGrid,
    m_slice: np.ndarray,
    samples: Optional[int] = None,
    seed=0,
) -> float:
    """Max defect of K(x,y) - K(y,x) - f(x) + f(y) over node pairs.

    samples=None brute-forces all pairs.
    """
    K = coupling.kernel_f(grid, m_slice)
    fv = _flatten(grid, coupling.f(grid, m_slice))
    defect = K - K.T - (fv[:, None] - fv[None, :])
    if samples is None:
        return float(np.max(np.abs(defect)))
    rng = np.random.default_rng(seed)
    n = grid.n_nodes
    i = rng.integers(0, n, size=samples)
    j = rng.integers(0, n, size=samples)
    return float(np.max(np.abs(defect[i, j])))


def check_coupling_normalization(
    coupling: Coupling, grid: TorusGrid, m_slice: np.ndarray
) -> tuple[float, float]:
    """(|int f dm|, max_x |int K(x,.) dm|) for the running coupling."""
    mf = _flatten(grid, m_slice)
    fv = _flatten(grid, coupling.f(grid, m_slice))
    vol = grid.cell_volume
    f_defect = abs(float(vol * np.sum(fv * mf)))
    K = coupling.kernel_f(grid, m_slice)
    k_defect = float(np.max(np.abs(vol * K @ mf)))
    return f_defect, k_defect
