"""Divergences to the invariant density, decay traces and inequality checks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import expr as ex
from .errors import InsufficientData, NonConvergence, NonPositiveValue
from .grid import Grid, ScalarField, boundary_faces, boundary_cells

FISHER_FLOOR = 1e-12
LOG_FLOOR = 1e-300


# -- traces and reports -----------------------------------------------------------

@dataclass
class DecayTrace:
    times: np.ndarray
    mass: np.ndarray
    fisher: np.ndarray
    kl: np.ndarray
    l1: np.ndarray
    w2: np.ndarray | None = None
    boundary: np.ndarray | None = None  # outflow of p * gamma through the box faces

    def __post_init__(self):
        for name in ("times", "mass", "fisher", "kl", "l1", "w2", "boundary"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float))
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trace times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mass", "fisher", "kl", "l1"])
            for row in zip(self.times, self.mass, self.fisher, self.kl, self.l1):
                w.writerow([format(float(v), ".17g") for v in row])


@dataclass
class CheckReport:
    name: str
    lam: float | None
    margin: float
    where: object
    tolerance: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.margin >= -self.tolerance)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lambda": self.lam,
            "margin": _json_num(self.margin),
            "where": self.where,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "details": self.details,
        }


def _json_num(v):
    v = float(v)
    return v if math.isfinite(v) else (None if math.isnan(v) else str(v))


# -- pointwise ingredients ----------------------------------------------------------

def log_pi_values(p, g: Grid) -> np.ndarray:
    return np.asarray(np.broadcast_to(p.log_pi(g.points()), g.shape), dtype=float)


def _eroded(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for k in range(mask.ndim):
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        out[tuple(lo)] &= mask[tuple(hi)]
        out[tuple(hi)] &= mask[tuple(lo)]
    return out


def fisher_information(pField: ScalarField, p, floor: float = FISHER_FLOOR) -> float:
    """``int |grad log(p / pi)|^2 p`` with finite differences of ``log p - log pi``.

    Cells whose own or neighbouring density is below ``floor * max p`` are left
    out of the sum, where the integrand vanishes in the continuum anyway.
    """
    g = pField.grid
    v = pField.values
    if np.any(v < 0):
        raise ValueError("density has negative values")
    top = float(v.max())
    if top == 0.0:
        return 0.0
    keep = _eroded(v >= floor * top)
    u = np.log(np.maximum(v, LOG_FLOOR)) - log_pi_values(p, g)
    parts = np.gradient(u, *g.h, edge_order=2)
    if g.d == 1:
        parts = [parts]
    sq = sum(q * q for q in parts)
    return float(np.sum(np.where(keep, sq * v, 0.0)) * g.cell_volume)


def kl_divergence(pField: ScalarField, p) -> float:
    """``int p log(p / pi)`` with ``0 log 0 = 0``."""
    g = pField.grid
    v = pField.values
    pos = v > 0
    lp = log_pi_values(p, g)
    terms = np.where(pos, v * (np.log(np.where(pos, v, 1.0)) - lp), 0.0)
    return float(np.sum(terms) * g.cell_volume)


def l1_distance(pField: ScalarField, p) -> float:
    g = pField.grid
    return float(np.sum(np.abs(pField.values - np.exp(log_pi_values(p, g)))) * g.cell_volume)


def boundary_outflow(pField: ScalarField, p) -> float:
    """``sum over faces of p (gamma . n)``: the rate at which a no-flux wall
    withholds the non-gradient transport. Zero for ``p = pi`` only in the
    continuum when ``pi gamma`` is tangent to the boundary."""
    g = pField.grid
    total = 0.0
    for axis, sign, pts, area in boundary_faces(g):
        gam = ex.evaluate(p.gamma[axis], pts)
        cells = boundary_cells(pField.values, axis, sign)
        total += float(np.sum(cells * sign * np.broadcast_to(gam, cells.shape)) * area)
    return total


# -- entropic optimal transport -----------------------------------------------------

def aggregate(pField: ScalarField, coarse: int) -> tuple:
    """Sum cell masses into ``coarse`` blocks per axis (approximately, when
    the shape is not a multiple). Returns ``(points (n, d), masses (n,), coarse grid)``."""
    g = pField.grid
    mass = pField.values * g.cell_volume
    idx = []
    for k, n in enumerate(g.shape):
        m = min(coarse, n)
        idx.append(np.minimum((np.arange(n) * m) // n, m - 1))
    shape = tuple(min(coarse, n) for n in g.shape)
    flat = np.ravel_multi_index(np.meshgrid(*idx, indexing="ij"), shape)
    masses = np.bincount(flat.ravel(), weights=mass.ravel(), minlength=int(np.prod(shape)))
    cg = Grid(g.lower, g.upper, shape)
    pts = cg.points().reshape(g.d, -1).T
    return pts, masses, cg


def _softmin(G: np.ndarray, costs: list, eps: float) -> np.ndarray:
    """``-eps * log sum_j exp(G_j - C(i, j) / eps)`` for a cost that splits
    into per-axis terms, applied one axis at a time."""
    out = G
    for k, Ck in enumerate(costs):
        moved = np.moveaxis(out, k, 0)
        lse = logsumexp(moved[None, ...] - (Ck / eps).reshape(Ck.shape + (1,) * (moved.ndim - 1)), axis=1)
        out = np.moveaxis(lse, 0, k)
    return -eps * out


def _log(a):
    return np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), -np.inf)


def entropic_ot(a: np.ndarray, b: np.ndarray, axes: list, eps: float, tol: float = 1e-9,
                max_iter: int = 20000, symmetric: bool = False) -> float:
    """Entropic transport cost between grid measures ``a`` and ``b`` for the
    squared Euclidean cost, by log-domain Sinkhorn with epsilon scaling.

    ``a`` and ``b`` have the grid shape; ``axes`` are the coordinates per axis.
    Returns the dual value ``<f, a> + <g, b>``.
    """
    costs = [(x[:, None] - x[None, :]) ** 2 for x in axes]
    la, lb = _log(a), _log(b)
    f = np.zeros(a.shape)
    g = np.zeros(b.shape)
    e = max(sum(float(C.max()) for C in costs), eps)
    err = np.inf
    while True:
        e = max(0.5 * e, eps)
        stage_tol = tol if e == eps else max(tol, 1e-5)
        for it in range(max_iter):
            if symmetric:
                f = 0.5 * (f + _softmin(la + f / e, costs, e))
                g = f
                fn = _softmin(la + f / e, costs, e)
                err = np.sum(a * np.abs(np.expm1((f - fn) / e)))
            else:
                f = _softmin(lb + g / e, costs, e)
                g = _softmin(la + f / e, costs, e)
                fn = _softmin(lb + g / e, costs, e)
                err = np.sum(a * np.abs(np.expm1((f - fn) / e)))
            if err <= stage_tol:
                break
        else:
            raise NonConvergence(f"Sinkhorn marginal error {err:.3e} > {stage_tol:g} after {max_iter} iterations")
        if e == eps:
            break
    return float(np.sum(np.where(a > 0, f * a, 0.0)) + np.sum(np.where(b > 0, g * b, 0.0)))


def wasserstein2(pField: ScalarField, p, eps: float = 1e-2, coarse: int = 32, tol: float = 1e-9,
                 max_iter: int = 20000, other: ScalarField | None = None) -> float:
    """Debiased entropic estimate of ``W2(pField, pi)`` on a coarse grid.

    Both densities are aggregated to ``coarse`` cells per axis before solving;
    the result approximates W2 up to :func:`w2_error_bar`. Keep ``eps`` at or
    above the squared coarse cell width; much smaller values converge slowly.
    """
    if coarse > 48:
        raise ValueError("coarse grid limited to 48 cells per axis")
    g = pField.grid
    _, a, cg = aggregate(pField, coarse)
    if other is None:
        other = ScalarField(g, np.exp(log_pi_values(p, g)))
    _, b, _ = aggregate(other, coarse)
    a = np.clip(a, 0.0, None).reshape(cg.shape)
    b = np.clip(b, 0.0, None).reshape(cg.shape)
    a /= a.sum()
    b /= b.sum()
    ab = entropic_ot(a, b, cg.axes, eps, tol, max_iter)
    aa = entropic_ot(a, a, cg.axes, eps, tol, max_iter, symmetric=True)
    bb = entropic_ot(b, b, cg.axes, eps, tol, max_iter, symmetric=True)
    return math.sqrt(max(ab - 0.5 * aa - 0.5 * bb, 0.0))


def w2_error_bar(g: Grid, coarse: int = 32, eps: float = 1e-2) -> float:
    """Aggregation moves each measure by at most a coarse cell diagonal; the
    entropic bias left after debiasing is bounded by ``sqrt(eps)``."""
    hs = [(b - a) / min(coarse, n) for a, b, n in zip(g.lower, g.upper, g.shape)]
    return math.sqrt(sum(h * h for h in hs)) + math.sqrt(eps)


# -- traces ---------------------------------------------------------------------------

def decay_trace(traj, p, w2: bool = False, coarse: int = 32, eps: float = 1e-2) -> DecayTrace:
    """Evaluate mass, I, KL, L1 (and optionally W2) along a density trajectory."""
    fields = traj.fields
    tr = DecayTrace(
        times=traj.times,
        mass=traj.mass,
        fisher=[fisher_information(f, p) for f in fields],
        kl=[kl_divergence(f, p) for f in fields],
        l1=[l1_distance(f, p) for f in fields],
        w2=[wasserstein2(f, p, eps=eps, coarse=coarse) for f in fields] if w2 else None,
        boundary=[boundary_outflow(f, p) for f in fields],
    )
    traj.functionals.update(mass=tr.mass, fisher=tr.fisher, kl=tr.kl, l1=tr.l1)
    return tr


def decay_rate(trace: DecayTrace, which: str = "fisher", window=None) -> float:
    """Minus the least-squares slope of ``log value`` against time."""
    if which not in ("fisher", "kl"):
        raise ValueError("which must be 'fisher' or 'kl'")
    t = trace.times
    v = getattr(trace, which)
    sel = np.ones(len(t), dtype=bool) if window is None else (t >= window[0]) & (t <= window[1])
    if sel.sum() < 5:
        raise InsufficientData(f"{int(sel.sum())} samples in window; need at least 5")
    if np.any(v[sel] <= 0):
        raise NonPositiveValue(f"{which} has non-positive values in the window")
    slope = np.polyfit(t[sel], np.log(v[sel]), 1)[0]
    return float(-slope)


# -- checks ---------------------------------------------------------------------------

def check_theorem1(trace: DecayTrace, lam: float, tol: float = 0.05) -> CheckReport:
    """``log I(t) <= log I(0) - 2 lam t`` at every saved time, up to ``tol``."""
    I0 = trace.fisher[0]
    if I0 <= 0:
        return CheckReport("fisher_decay", lam, 0.0, None, tol, {"note": "I(p0) = 0"})
    with np.errstate(divide="ignore"):
        logI = np.log(trace.fisher)
    margins = math.log(I0) - 2 * lam * trace.times - logI
    k = int(np.argmin(margins[1:])) + 1 if len(margins) > 1 else 0
    return CheckReport("fisher_decay", lam, float(margins[k]), {"t": float(trace.times[k])}, tol,
                       {"I0": float(I0)})


def check_lsi(pField: ScalarField, p, lam: float, tol: float = 1e-6) -> CheckReport:
    I = fisher_information(pField, p)
    D = kl_divergence(pField, p)
    return CheckReport("lsi", lam, I / (2 * lam) - D, None, tol, {"fisher": I, "kl": D})


def check_lsi_trace(trace: DecayTrace, lam: float, tol: float = 1e-6) -> CheckReport:
    margins = trace.fisher / (2 * lam) - trace.kl
    k = int(np.argmin(margins))
    return CheckReport("lsi", lam, float(margins[k]), {"t": float(trace.times[k])}, tol)


def check_entropy_production(trace: DecayTrace, p=None, tol: float = 0.03) -> CheckReport:
    """Central-difference ``d/dt KL`` against ``-I`` at interior saved times.

    The margin is ``tol - max relative error``. When the trace carries the
    boundary outflow, the details also give the error of the balance
    ``d/dt KL = -I - outflow`` that holds with no-flux walls.
    """
    t, K, I = trace.times, trace.kl, trace.fisher
    if len(t) < 3:
        raise InsufficientData("need at least 3 saved times")
    dK = (K[2:] - K[:-2]) / (t[2:] - t[:-2])
    Ii = I[1:-1]
    scale = np.where(Ii > 0, Ii, 1.0)
    rel = np.where((Ii == 0) & (dK == 0), 0.0, np.abs(dK + Ii) / scale)
    k = int(np.argmax(rel))
    details = {"max_rel_error": float(rel[k]), "median_rel_error": float(np.median(rel))}
    if trace.boundary is not None:
        B = trace.boundary[1:-1]
        relb = np.abs(dK + Ii + B) / scale
        details["max_rel_error_with_outflow"] = float(relb.max())
    return CheckReport("entropy_production", None, tol - float(rel[k]),
                       {"t": float(t[1:-1][k])}, 0.0, details)


def poincare_sides(h: ex.Expr, p, g: Grid) -> tuple:
    """``(Var_pi h, int (|grad h|^2 - h (grad h, gamma)) pi)`` by quadrature."""
    pts = g.points()
    w = np.broadcast_to(p.pi(pts), g.shape)
    w = w / np.sum(w)
    hv = np.broadcast_to(ex.evaluate(h, pts), g.shape)
    grad = np.stack([np.broadcast_to(ex.evaluate(e, pts), g.shape) for e in ex.gradient(h, p.dim)])
    gam = p.eval_gamma(pts)
    mean = np.sum(w * hv)
    var = float(np.sum(w * (hv - mean) ** 2))
    form = float(np.sum(w * (np.sum(grad * grad, axis=0) - hv * np.sum(grad * gam, axis=0))))
    return var, form


def check_poincare(h: ex.Expr, p, lam: float, g: Grid, tol: float = 1e-6) -> CheckReport:
    if not lam > 0:
        raise ValueError("the Poincare check needs a positive rate")
    var, form = poincare_sides(h, p, g)
    return CheckReport("poincare", lam, form / lam - var, ex.to_string(h), tol,
                       {"variance": var, "dirichlet_form": form})


def check_corollary3(trace: DecayTrace, lam: float, D0: float | None = None,
                     tol_kl: float = 1e-6, tol_l1: float = 1e-4, tol_w: float | None = None) -> list:
    """KL, L1 and (if present) W2 decay bounds; one report per quantity."""
    D0 = float(trace.kl[0]) if D0 is None else float(D0)
    D0 = max(D0, 0.0)
    t = trace.times
    out = []
    bound = D0 * np.exp(-2 * lam * t)
    m = bound - trace.kl
    k = int(np.argmin(m))
    out.append(CheckReport("kl_decay", lam, float(m[k]), {"t": float(t[k])}, tol_kl, {"D0": D0}))
    bound = np.sqrt(2 * D0) * np.exp(-lam * t)
    m = bound - trace.l1
    k = int(np.argmin(m))
    out.append(CheckReport("l1_decay", lam, float(m[k]), {"t": float(t[k])}, tol_l1, {"D0": D0}))
    if trace.w2 is not None:
        bound = np.sqrt(2 * D0 / lam) * np.exp(-lam * t)
        m = bound - trace.w2
        k = int(np.argmin(m))
        out.append(CheckReport("w2_decay", lam, float(m[k]), {"t": float(t[k])},
                               0.0 if tol_w is None else tol_w, {"D0": D0, "advisory": True}))
    return out
