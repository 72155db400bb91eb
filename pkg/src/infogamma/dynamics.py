"""Fokker-Planck evolution on a grid and Euler-Maruyama particle ensembles.

The density update is a conservative finite-volume scheme with two-point
exponential-fitting (Scharfetter-Gummel) fluxes. Across a face normal to
axis ``k`` between cells ``L`` and ``R``::

    F = (B(-w) p_L - B(w) p_R) / h,    w = h b_k(face),    B(w) = w / (e^w - 1)

and ``F = 0`` on the box boundary. Time stepping is explicit Euler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .errors import CFLViolation, NegativeDensity
from .grid import Grid, ScalarField, sample
from .model import Problem

SCHEMES = ("exponential-fitting", "central+upwind")


@dataclass(frozen=True)
class SolverConfig:
    T: float
    stride: int | None = None
    save_interval: float | None = None
    safety: float = 0.4
    floor: float = 1e-300
    scheme: str = "exponential-fitting"
    check_positivity: bool = True

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not 0 < self.safety < 1:
            raise ValueError("safety factor must lie in (0, 1)")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.stride is not None and self.save_interval is not None:
            raise ValueError("give either stride or save_interval, not both")


@dataclass
class DensityTrajectory:
    times: list
    fields: list
    mass: list
    dt: float
    functionals: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.fields[0].grid


def bernoulli(w):
    """``w / (exp(w) - 1)`` with the removable singularity at 0 filled in."""
    w = np.asarray(w, dtype=float)
    out = np.ones_like(w)
    nz = w != 0.0
    with np.errstate(over="ignore"):
        out[nz] = w[nz] / np.expm1(w[nz])
    return out


def face_points(g: Grid, axis: int) -> np.ndarray:
    """Centers of the interior faces normal to ``axis``; shape (d, *face_shape)."""
    axes = list(g.axes)
    axes[axis] = g.lower[axis] + g.h[axis] * np.arange(1, g.shape[axis])
    return np.stack(np.meshgrid(*axes, indexing="ij"))


class _Operator:
    """Precomputed face coefficients of the discrete generator on a grid."""

    def __init__(self, p: Problem, g: Grid, scheme: str = "exponential-fitting"):
        self.grid = g
        self.coef = []
        self.max_b = 0.0
        for k in range(g.d):
            h = g.h[k]
            bk = np.broadcast_to(ex.evaluate(p.b[k], face_points(g, k)), _face_shape(g, k))
            self.max_b = max(self.max_b, float(np.max(np.abs(bk))) if bk.size else 0.0)
            w = h * bk
            if scheme == "exponential-fitting":
                a, c = bernoulli(-w), bernoulli(w)
            else:
                a, c = 1.0 + np.maximum(w, 0.0), 1.0 + np.maximum(-w, 0.0)
            lo = [slice(None)] * g.d
            hi = [slice(None)] * g.d
            lo[k] = slice(0, -1)
            hi[k] = slice(1, None)
            self.coef.append((tuple(lo), tuple(hi), a / h**2, c / h**2))

    def apply(self, p: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        dp = np.zeros_like(p) if out is None else out
        if out is not None:
            dp.fill(0.0)
        for lo, hi, a, c in self.coef:
            F = a * p[lo] - c * p[hi]
            dp[lo] -= F
            dp[hi] += F
        return dp

    def matrix(self):
        """The generator as a sparse matrix acting on C-ordered cell vectors."""
        import scipy.sparse as sp

        g = self.grid
        n = g.size
        idx = np.arange(n).reshape(g.shape)
        rows, cols, vals = [], [], []
        for lo, hi, a, c in self.coef:
            L = idx[lo].ravel()
            R = idx[hi].ravel()
            a = a.ravel()
            c = c.ravel()
            # dp_L -= a p_L - c p_R ; dp_R += a p_L - c p_R
            rows += [L, L, R, R]
            cols += [L, R, L, R]
            vals += [-a, c, a, -c]
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )


def _face_shape(g: Grid, axis: int) -> tuple:
    s = list(g.shape)
    s[axis] -= 1
    return tuple(s)


def stable_dt(p: Problem, g: Grid, safety: float = 0.4) -> float:
    op = _Operator(p, g)
    return _dt(op, g, safety)


def _dt(op: _Operator, g: Grid, safety: float) -> float:
    h = min(g.h)
    limits = [h * h / (2 * g.d)]
    if op.max_b > 0:
        limits.append(h / op.max_b)
    return safety * min(limits)


def evolve_fpe(p: Problem, p0: ScalarField, cfg: SolverConfig) -> DensityTrajectory:
    """Integrate the Fokker-Planck equation from ``p0`` up to ``cfg.T``.

    Mass is conserved to round-off because face fluxes telescope.
    Positivity is checked after every step when ``cfg.check_positivity``.
    """
    g = p0.grid
    vals = np.array(p0.values, dtype=float)
    if np.any(vals < 0):
        raise ValueError("initial density has negative values")
    m0 = float(np.sum(vals) * g.cell_volume)
    if abs(m0 - 1.0) > 1e-8:
        raise ValueError(f"initial density integrates to {m0}, not 1")
    op = _Operator(p, g, cfg.scheme)
    dt_max = _dt(op, g, cfg.safety)
    if not dt_max > 1e-14 * cfg.T:
        raise CFLViolation(f"stable time step {dt_max:g} underflows for T={cfg.T:g}")

    if cfg.save_interval is not None:
        nsave = max(1, int(round(cfg.T / cfg.save_interval)))
        per = max(1, math.ceil(cfg.save_interval / dt_max))
        dt = cfg.save_interval / per
        stride = per
        nsteps = nsave * per
    else:
        nsteps = max(1, math.ceil(cfg.T / dt_max))
        dt = cfg.T / nsteps
        stride = cfg.stride or nsteps
    if nsteps > 10**9:
        raise CFLViolation(f"{nsteps} steps needed; time step too small")

    times = [0.0]
    fields = [ScalarField(g, vals.copy())]
    mass = [m0]
    dp = np.empty_like(vals)
    vol = g.cell_volume
    for step in range(1, nsteps + 1):
        op.apply(vals, dp)
        vals += dt * dp
        if cfg.check_positivity and vals.min() < 0.0:
            k = np.unravel_index(int(np.argmin(vals)), vals.shape)
            raise NegativeDensity(f"density {vals[k]:.3e} < 0 at cell {tuple(map(int, k))}, step {step}")
        if step % stride == 0 or step == nsteps:
            times.append(step * dt)
            fields.append(ScalarField(g, vals.copy()))
            mass.append(float(np.sum(vals) * vol))
    return DensityTrajectory(times=times, fields=fields, mass=mass, dt=dt)


def truncated_gaussian(g: Grid, center, variance: float) -> ScalarField:
    """Isotropic Gaussian bump restricted to the grid and normalized on it."""
    pts = g.points()
    c = np.asarray(center, dtype=float).reshape((-1,) + (1,) * g.d)
    r2 = np.sum((pts - c) ** 2, axis=0)
    vals = np.exp(-(r2 - r2.min()) / (2.0 * variance))
    vals /= np.sum(vals) * g.cell_volume
    return ScalarField(g, vals)


def sampled_pi(p: Problem, g: Grid, normalize: bool = False) -> ScalarField:
    vals = np.exp(sample(p.log_pi_expr, g).values)
    if normalize:
        vals = vals / (np.sum(vals) * g.cell_volume)
    return ScalarField(g, vals)


def stationarity_defect(p: Problem, g: Grid) -> float:
    """``max |L_h pi| / max pi`` for the sampled invariant density."""
    pi = sampled_pi(p, g).values
    return float(np.max(np.abs(_Operator(p, g).apply(pi))) / np.max(pi))


def discrete_steady_state(p: Problem, g: Grid, scheme: str = "exponential-fitting") -> ScalarField:
    """Null vector of the discrete generator, normalized to unit mass."""
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    A = _Operator(p, g, scheme).matrix().tolil()
    n = g.size
    A[n - 1, :] = np.full(n, g.cell_volume)
    rhs = np.zeros(n)
    rhs[n - 1] = 1.0
    x = spla.spsolve(sp.csr_matrix(A), rhs)
    return ScalarField(g, x.reshape(g.shape))


# -- particles -------------------------------------------------------------------

@dataclass(frozen=True)
class Ensemble:
    positions: np.ndarray  # (N, d)
    time: float
    seed: int


def reflect(x: np.ndarray, lower, upper) -> np.ndarray:
    """Fold coordinates back into the box by mirror reflection at its faces."""
    lo = np.asarray(lower, dtype=float).reshape((-1,) + (1,) * (x.ndim - 1))
    hi = np.asarray(upper, dtype=float).reshape((-1,) + (1,) * (x.ndim - 1))
    L = hi - lo
    y = np.mod(x - lo, 2 * L)
    y = L - np.abs(y - L)
    return lo + y


def simulate_sde(
    p: Problem,
    N: int,
    T: float,
    dt: float,
    seed: int,
    x0=None,
    save_every: int | None = None,
) -> list:
    """Euler-Maruyama for ``dX = b(X) dt + sqrt(2) dB`` with reflecting walls.

    Starts from ``x0`` (array (N, d) or a single point) or, by default, from
    uniform positions in the box. The noise comes from a counter-based
    Philox stream keyed by ``seed``, so runs are bit-reproducible. Returns
    the saved :class:`Ensemble` snapshots, the last one at time ``T``.
    """
    if N < 1 or not dt > 0:
        raise ValueError("need N >= 1 and dt > 0")
    d = p.dim
    ss = np.random.SeedSequence(seed)
    init_ss, noise_ss = ss.spawn(2)
    lo = np.array(p.lower)
    hi = np.array(p.upper)
    if x0 is None:
        rng0 = np.random.Generator(np.random.Philox(init_ss))
        X = (lo + (hi - lo) * rng0.random((N, d))).T.copy()
    else:
        X = np.broadcast_to(np.asarray(x0, dtype=float), (N, d)).T.copy()
    rng = np.random.Generator(np.random.Philox(noise_ss))
    nsteps = max(1, int(round(T / dt)))
    h = T / nsteps
    sig = math.sqrt(2.0 * h)
    out = [Ensemble(X.T.copy(), 0.0, seed)]
    for step in range(1, nsteps + 1):
        drift = p.eval_b(X)
        X = X + h * drift + sig * rng.standard_normal((N, d)).T
        X = reflect(X, lo, hi)
        if (save_every and step % save_every == 0) or step == nsteps:
            out.append(Ensemble(X.T.copy(), step * h, seed))
    return out


def empirical_density(e: Ensemble, g: Grid) -> ScalarField:
    """Histogram of particle positions normalized to a density on ``g``."""
    edges = [a + h * np.arange(n + 1) for a, h, n in zip(g.lower, g.h, g.shape)]
    edges = [np.r_[ed[:-1], hi] for ed, hi in zip(edges, g.upper)]
    counts, _ = np.histogramdd(e.positions, bins=edges)
    N = e.positions.shape[0]
    return ScalarField(g, counts / (N * g.cell_volume))


def steady_state_error(p: Problem, g: Grid, scheme: str = "exponential-fitting") -> float:
    """``max |p_h - pi| / max pi`` for the discrete steady state ``p_h``."""
    ss = discrete_steady_state(p, g, scheme).values
    pi = sampled_pi(p, g, normalize=True).values
    return float(np.max(np.abs(ss - pi)) / np.max(pi))
