"""Problem assembly: invariant density from a potential plus a non-gradient drift.

The density is ``pi = exp(-U) / Z`` normalized on the box. The drift is
``b = -grad U - gamma`` where ``gamma`` is the non-gradient part; it is
given either directly, through ``b``, or as ``gamma = J grad U`` for a
constant antisymmetric ``J``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as ex
from .errors import ConfigError, DimensionMismatch, NonNormalizable
from .grid import Grid, integrate, sample

DRIFT_TYPES = ("gradient", "skew", "gamma", "b")
DEFAULT_INVARIANCE_TOL = 1e-8


def default_validation_cells(d: int) -> int:
    return {1: 4096, 2: 256, 3: 64}.get(d, 24)


@dataclass(frozen=True, eq=False)
class Problem:
    dim: int
    lower: tuple
    upper: tuple
    U: ex.Expr
    Z: float
    drift: str
    gamma: tuple
    b: tuple
    grad_U: tuple
    hess_U: tuple
    dgamma: tuple  # dgamma[i][j] = d gamma_i / d x_j
    J: tuple | None = None
    invariance: float = 0.0
    invariance_tol: float = DEFAULT_INVARIANCE_TOL
    validation_cells: int = 256
    config: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        """Whether ``div(pi gamma) = 0`` holds closely enough for theorem checks."""
        return self.invariance <= self.invariance_tol

    @property
    def reversible(self) -> bool:
        return all(ex._is_const(g, 0.0) for g in self.gamma)

    @property
    def log_Z(self) -> float:
        return math.log(self.Z)

    @property
    def log_pi_expr(self) -> ex.Expr:
        return ex.sub(ex.neg(self.U), ex.Const(self.log_Z))

    @property
    def grad_log_pi(self) -> tuple:
        return tuple(ex.neg(g) for g in self.grad_U)

    def grid(self, n) -> Grid:
        return Grid.uniform(self.lower, self.upper, n)

    def validation_grid(self) -> Grid:
        return self.grid(self.validation_cells)

    # array evaluators; x has shape (d, ...) ------------------------------
    def log_pi(self, x) -> np.ndarray:
        return -ex.evaluate(self.U, x) - self.log_Z

    def pi(self, x) -> np.ndarray:
        return np.exp(self.log_pi(x))

    def eval_grad_U(self, x) -> np.ndarray:
        return _stack([ex.evaluate(e, x) for e in self.grad_U], x)

    def eval_hess_U(self, x) -> np.ndarray:
        return _stack([[ex.evaluate(e, x) for e in row] for row in self.hess_U], x)

    def eval_gamma(self, x) -> np.ndarray:
        return _stack([ex.evaluate(e, x) for e in self.gamma], x)

    def eval_dgamma(self, x) -> np.ndarray:
        return _stack([[ex.evaluate(e, x) for e in row] for row in self.dgamma], x)

    def eval_b(self, x) -> np.ndarray:
        return _stack([ex.evaluate(e, x) for e in self.b], x)

    def to_config(self) -> dict:
        return _copy(self.config)


def _stack(parts, x):
    shape = np.shape(x)[1:]
    if isinstance(parts[0], list):
        return np.stack([_stack(row, x) for row in parts])
    return np.stack([np.broadcast_to(v, shape) for v in parts]).astype(float)


def _copy(obj):
    if isinstance(obj, dict):
        return {k: _copy(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_copy(v) for v in obj]
    return obj


@dataclass(frozen=True)
class ValidationReport:
    invariance: float
    stationarity: float
    normalization: float

    def to_dict(self) -> dict:
        return {
            "invariance": self.invariance,
            "stationarity": self.stationarity,
            "normalization": self.normalization,
        }


def _as_expr(v, d: int) -> ex.Expr:
    if isinstance(v, ex.Expr):
        if ex.max_index(v) > d:
            raise DimensionMismatch(f"expression uses x{ex.max_index(v)} in dimension {d}")
        return v
    if isinstance(v, (int, float)):
        return ex.Const(float(v))
    return ex.parse(str(v), d)


def skew_matrix_2d(c: float) -> np.ndarray:
    """The 2-d rotation generator ``[[0, c], [-c, 0]]``."""
    return np.array([[0.0, c], [-c, 0.0]])


def make_problem(
    U,
    lower: Sequence[float],
    upper: Sequence[float],
    *,
    c: float | None = None,
    J=None,
    gamma: Sequence | None = None,
    b: Sequence | None = None,
    validation_cells: int | None = None,
    invariance_tol: float = DEFAULT_INVARIANCE_TOL,
) -> Problem:
    """Assemble a :class:`Problem`.

    At most one of ``c`` / ``J`` (skew drift ``gamma = J grad U``), ``gamma``
    or ``b`` may be given; with none the dynamics are reversible.
    """
    lower = tuple(float(v) for v in lower)
    upper = tuple(float(v) for v in upper)
    d = len(lower)
    if len(upper) != d or d < 1:
        raise DimensionMismatch("lower and upper must have the same positive length")
    U = _as_expr(U, d)
    chosen = [k for k, v in (("skew", c if J is None else J), ("gamma", gamma), ("b", b)) if v is not None]
    if len(chosen) > 1:
        raise ConfigError(f"conflicting drift specifications: {chosen}")
    drift = chosen[0] if chosen else "gradient"

    grad_U = tuple(ex.gradient(U, d))
    hess_U = tuple(tuple(row) for row in ex.hessian(U, d))
    J_out = None
    cfg_drift: dict
    if drift == "gradient":
        gam = tuple(ex.ZERO for _ in range(d))
        cfg_drift = {"type": "gradient"}
    elif drift == "skew":
        if J is None:
            if d != 2:
                raise DimensionMismatch("the scalar skew parameter c needs d = 2; pass J instead")
            Jm = skew_matrix_2d(float(c))
            cfg_drift = {"type": "skew", "c": float(c)}
        else:
            Jm = np.asarray(J, dtype=float)
            cfg_drift = {"type": "skew", "J": Jm.tolist()}
        if Jm.shape != (d, d):
            raise DimensionMismatch(f"J must be {d}x{d}")
        if np.any(Jm + Jm.T != 0.0):
            raise ConfigError("J must be exactly antisymmetric")
        J_out = tuple(tuple(float(v) for v in row) for row in Jm)
        gam = []
        for i in range(d):
            acc = ex.ZERO
            for j in range(d):
                acc = ex.add(acc, ex.mul(ex.Const(Jm[i, j]), grad_U[j]))
            gam.append(acc)
        gam = tuple(gam)
    elif drift == "gamma":
        if len(gamma) != d:
            raise DimensionMismatch(f"gamma needs {d} components")
        gam = tuple(_as_expr(g, d) for g in gamma)
        cfg_drift = {"type": "gamma", "exprs": [str(g) if isinstance(g, ex.Expr) else str(g) for g in gamma]}
    else:
        if len(b) != d:
            raise DimensionMismatch(f"b needs {d} components")
        bb = tuple(_as_expr(v, d) for v in b)
        gam = tuple(ex.sub(ex.neg(grad_U[i]), bb[i]) for i in range(d))
        cfg_drift = {"type": "b", "exprs": [str(v) for v in b]}

    if drift == "b":
        b_exprs = bb
    else:
        b_exprs = tuple(ex.sub(ex.neg(grad_U[i]), gam[i]) for i in range(d))
    dgamma = tuple(tuple(ex.differentiate(gam[i], j + 1) for j in range(d)) for i in range(d))

    ncell = validation_cells or default_validation_cells(d)
    vgrid = Grid.uniform(lower, upper, ncell)
    Z = integrate(sample(ex.apply("exp", ex.neg(U)), vgrid))
    if not math.isfinite(Z) or Z <= 0.0:
        raise NonNormalizable(f"integral of exp(-U) over the domain is {Z}")

    config = {
        "domain": {"lower": list(lower), "upper": list(upper)},
        "model": {
            "U": str(U) if not isinstance(U, ex.Expr) else ex.to_string(U),
            "drift": cfg_drift,
            "validation_cells": ncell,
            "invariance_tol": invariance_tol,
        },
    }
    prob = Problem(
        dim=d, lower=lower, upper=upper, U=U, Z=Z, drift=drift, gamma=gam, b=b_exprs,
        grad_U=grad_U, hess_U=hess_U, dgamma=dgamma, J=J_out,
        invariance_tol=invariance_tol, validation_cells=ncell, config=config,
    )
    res = float(np.max(np.abs(invariance_field(prob, vgrid))))
    object.__setattr__(prob, "invariance", res)
    return prob


def build_problem(spec: dict) -> Problem:
    """Build a :class:`Problem` from a parsed configuration mapping.

    Expected layout (TOML)::

        [domain]
        lower = [-1.0, -1.0]
        upper = [1.0, 1.0]
        [model]
        U = "(x1^2 + x2^2)/2"
        drift = { type = "skew", c = 0.1 }   # or J = [[...]]
        # drift = { type = "gamma", exprs = ["...", "..."] }
        # drift = { type = "b", exprs = ["...", "..."] }
        # drift = { type = "gradient" }
        validation_cells = 256               # optional
        invariance_tol = 1e-8                # optional
    """
    try:
        dom = spec["domain"]
        mdl = spec["model"]
        lower, upper = dom["lower"], dom["upper"]
        U = mdl["U"]
    except (KeyError, TypeError) as err:
        raise ConfigError(f"missing configuration entry: {err}") from None
    if not isinstance(U, str):
        raise ConfigError("model.U must be a string expression")
    drift = mdl.get("drift", {"type": "gradient"})
    if isinstance(drift, str):
        drift = {"type": drift}
    kind = drift.get("type", "gradient")
    if kind not in DRIFT_TYPES:
        raise ConfigError(f"unknown drift type {kind!r}; expected one of {DRIFT_TYPES}")
    kwargs = {}
    if kind == "skew":
        if "J" in drift:
            kwargs["J"] = drift["J"]
        elif "c" in drift:
            kwargs["c"] = float(drift["c"])
        else:
            raise ConfigError("skew drift needs 'c' or 'J'")
    elif kind in ("gamma", "b"):
        if "exprs" not in drift:
            raise ConfigError(f"{kind} drift needs 'exprs'")
        kwargs[kind] = list(drift["exprs"])
    prob = make_problem(
        U, lower, upper,
        validation_cells=mdl.get("validation_cells"),
        invariance_tol=float(mdl.get("invariance_tol", DEFAULT_INVARIANCE_TOL)),
        **kwargs,
    )
    # keep the user's own spelling of the expressions for round trips
    cfg = prob.config
    cfg["model"]["U"] = U
    if kind in ("gamma", "b"):
        cfg["model"]["drift"]["exprs"] = list(drift["exprs"])
    return prob


def invariance_field(p: Problem, x) -> np.ndarray:
    """``div(gamma) - (grad U, gamma)``, i.e. ``div(pi gamma) / pi``."""
    pts = x.points() if isinstance(x, Grid) else np.asarray(x, dtype=float)
    div = sum(ex.evaluate(p.dgamma[i][i], pts) for i in range(p.dim))
    gu = p.eval_grad_U(pts)
    gm = p.eval_gamma(pts)
    return np.asarray(div - np.sum(gu * gm, axis=0), dtype=float)


def invariance_residual(p: Problem, g: Grid) -> ValidationReport:
    """Invariance, discrete stationarity and normalization diagnostics on ``g``."""
    from .dynamics import stationarity_defect

    inv = float(np.max(np.abs(invariance_field(p, g))))
    pi_f = sample(p.log_pi_expr, g)
    pi_vals = np.exp(pi_f.values)
    norm = abs(float(np.sum(pi_vals) * g.cell_volume) - 1.0)
    stat = stationarity_defect(p, g)
    return ValidationReport(invariance=inv, stationarity=stat, normalization=norm)
