"""Gamma operators of the information calculus and their identities as residuals.

With ``Lf = (grad log pi, grad f) + lap f``:

* ``Gamma_1(f, f) = |grad f|^2``
* ``Gamma_2(f, f) = L Gamma_1 / 2 - Gamma_1(Lf, f)``
* ``Gamma_I(f, f) = -(gamma, grad Gamma_1) / 2 + Lf (grad f, gamma)``

Each of ``Gamma_2`` and ``Gamma_I`` is computed twice: from the operator
definition (symbolically, up to third derivatives of ``f``) and from the
reduced closed form. The two must agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .errors import InternalInconsistency, NonPositiveDensity
from .grid import Grid, ScalarField, boundary_cells, boundary_faces, fd_gradient, sample
from .model import Problem
from .tensor import r_ac_matrix, r_matrix, shifted_hessian

AGREEMENT_TOL = 1e-9


class _Derivs:
    """Symbolic derivatives of a test function ``f`` with respect to a problem."""

    def __init__(self, f: ex.Expr, p: Problem):
        d = p.dim
        self.f = f
        self.p = p
        self.grad = ex.gradient(f, d)
        self.hess = ex.hessian(f, d)
        self._op = None

    def generator(self, h: ex.Expr, grad_h=None) -> ex.Expr:
        """Symbolic ``L h``."""
        d = self.p.dim
        gh = grad_h if grad_h is not None else ex.gradient(h, d)
        out = ex.ZERO
        for i in range(d):
            out = out - self.p.grad_U[i] * gh[i] + ex.differentiate(gh[i], i + 1)
        return out

    def operator_forms(self):
        """(Gamma_2, Gamma_I) built literally from their operator definitions."""
        if self._op is None:
            d = self.p.dim
            g1 = ex.ZERO
            for gi in self.grad:
                g1 = g1 + gi * gi
            grad_g1 = ex.gradient(g1, d)
            Lf = self.generator(self.f, self.grad)
            grad_Lf = ex.gradient(Lf, d)
            gamma2 = ex.Const(0.5) * self.generator(g1, grad_g1)
            gi_term = ex.ZERO
            fg = ex.ZERO
            for i in range(d):
                gamma2 = gamma2 - grad_Lf[i] * self.grad[i]
                gi_term = gi_term + self.p.gamma[i] * grad_g1[i]
                fg = fg + self.grad[i] * self.p.gamma[i]
            gamma_i = ex.Const(-0.5) * gi_term + Lf * fg
            self._op = (gamma2, gamma_i)
        return self._op

    def numeric(self, pts):
        shape = pts.shape[1:]
        grad = np.stack([np.broadcast_to(ex.evaluate(e, pts), shape) for e in self.grad])
        H = np.stack([
            np.stack([np.broadcast_to(ex.evaluate(e, pts), shape) for e in row]) for row in self.hess
        ])
        return grad, H


def _pts(x):
    return x.points() if isinstance(x, Grid) else np.asarray(x, dtype=float)


def _out(v, pts):
    v = np.broadcast_to(v, pts.shape[1:])
    return float(v) if v.ndim == 0 else np.array(v)


def _agree(a, b, what):
    diff = np.abs(a - b)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    if np.any(diff > AGREEMENT_TOL * scale):
        worst = float(np.max(diff / scale))
        raise InternalInconsistency(f"{what}: operator and reduced forms differ by {worst:.3e}")


def _reduced_parts(D: _Derivs, pts):
    p = D.p
    grad, H = D.numeric(pts)
    gu = p.eval_grad_U(pts)
    hu = p.eval_hess_U(pts)
    gam = p.eval_gamma(pts)
    Lf = np.trace(H) - np.sum(gu * grad, axis=0)
    fg = np.sum(grad * gam, axis=0)
    hess_sq = np.sum(H * H, axis=(0, 1))
    curv = np.einsum("ij...,i...,j...->...", hu, grad, grad)
    Hg = np.einsum("ij...,j...->i...", H, grad)
    gamma2 = hess_sq + curv
    gamma_i = -np.sum(Hg * gam, axis=0) + Lf * fg
    return dict(grad=grad, H=H, gam=gam, Lf=Lf, gamma2=gamma2, gamma_i=gamma_i)


def generator_L(f: ex.Expr, p: Problem, x):
    """``(grad log pi, grad f) + lap f`` with symbolic derivatives."""
    pts = _pts(x)
    D = _Derivs(f, p)
    return _out(ex.evaluate(D.generator(f, D.grad), pts), pts)


def gamma1(f: ex.Expr, x):
    """``|grad f|^2``; the dimension is taken from ``x``."""
    pts = _pts(x)
    d = pts.shape[0]
    total = 0.0
    for e in ex.gradient(f, d):
        v = ex.evaluate(e, pts)
        total = total + v * v
    return _out(total, pts)


def gamma2_tilde(f: ex.Expr, p: Problem, x, check: bool = True):
    """Reduced ``|hess f|_F^2 + hess U(grad f, grad f)``, cross-checked against
    the operator definition when ``check`` is set."""
    pts = _pts(x)
    D = _Derivs(f, p)
    red = _reduced_parts(D, pts)["gamma2"]
    if check:
        op = ex.evaluate(D.operator_forms()[0], pts)
        _agree(op, red, "Gamma_2")
    return _out(red, pts)


def gamma_info(f: ex.Expr, p: Problem, x, check: bool = True):
    """Reduced ``-(hess f grad f, gamma) + Lf (grad f, gamma)``, cross-checked
    against ``-(gamma, grad Gamma_1)/2 + Lf (grad f, gamma)``."""
    pts = _pts(x)
    D = _Derivs(f, p)
    red = _reduced_parts(D, pts)["gamma_i"]
    if check:
        op = ex.evaluate(D.operator_forms()[1], pts)
        _agree(op, red, "Gamma_I")
    return _out(red, pts)


@dataclass(frozen=True)
class GammaPointValues:
    gamma1: np.ndarray | float
    gamma2: np.ndarray | float
    gamma_info: np.ndarray | float
    Lf: np.ndarray | float
    hess_sq: np.ndarray | float  # squared Frobenius norm of the shifted Hessian
    curvature: np.ndarray | float  # R(grad f, grad f)

    @property
    def lhs(self):
        return self.gamma2 + self.gamma_info

    @property
    def rhs(self):
        return self.hess_sq + self.curvature


def gamma_point_values(f: ex.Expr, p: Problem, x, convention: str = "standard", check: bool = True):
    """All six pointwise quantities of the dissipation identity at ``x``."""
    pts = _pts(x)
    D = _Derivs(f, p)
    red = _reduced_parts(D, pts)
    if check:
        g2_op, gi_op = D.operator_forms()
        _agree(ex.evaluate(g2_op, pts), red["gamma2"], "Gamma_2")
        _agree(ex.evaluate(gi_op, pts), red["gamma_i"], "Gamma_I")
    grad = red["grad"]
    M = shifted_hessian(red["H"], grad, red["gam"])
    R = r_matrix(p, pts, convention)
    return GammaPointValues(
        gamma1=_out(np.sum(grad * grad, axis=0), pts),
        gamma2=_out(red["gamma2"], pts),
        gamma_info=_out(red["gamma_i"], pts),
        Lf=_out(red["Lf"], pts),
        hess_sq=_out(np.sum(M * M, axis=(0, 1)), pts),
        curvature=_out(np.einsum("ij...,i...,j...->...", R, grad, grad), pts),
    )


def identity_residual(f: ex.Expr, p: Problem, x, convention: str = "standard", check: bool = True):
    """``|Gamma_2 + Gamma_I - |shifted hess f|^2 - R(grad f, grad f)|`` at ``x``."""
    v = gamma_point_values(f, p, x, convention=convention, check=check)
    return np.abs(v.lhs - v.rhs) if not isinstance(v.lhs, float) else abs(v.lhs - v.rhs)


@dataclass(frozen=True)
class IdentityCheck:
    """Two quadrature sides of an integral identity and their gap."""

    lhs: float
    rhs: float
    residual: float  # |lhs - rhs| / max(|lhs|, 1)
    boundary_flux: float

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs, "rhs": self.rhs,
            "residual": self.residual, "boundary_flux": self.boundary_flux,
        }


def _relative(lhs, rhs):
    return abs(lhs - rhs) / max(abs(lhs), 1.0)


def weak_form_residual(pField: ScalarField, p: Problem, norm_tol: float = 1e-6) -> IdentityCheck:
    """Integrated identity for ``f = log(p/pi)`` with the Arnold-Carlen tensor.

    ``int (Gamma_2 + Gamma_I)(f, f) p = int (|hess f|^2 + R_AC(grad f, grad f)) p``.
    Derivatives of ``f`` come from finite differences; everything else is
    symbolic.
    """
    g = pField.grid
    vals = pField.values
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        raise NonPositiveDensity("weak form needs a strictly positive density")
    mass = float(np.sum(vals) * g.cell_volume)
    if abs(mass - 1.0) > norm_tol:
        raise ValueError(f"density integrates to {mass}, not 1")
    pts = g.points()
    log_pi = sample(p.log_pi_expr, g).values
    f = ScalarField(g, np.log(vals) - log_pi)
    grad = fd_gradient(f).values
    H = np.stack([fd_gradient(ScalarField(g, grad[i])).values for i in range(g.d)])
    H = 0.5 * (H + np.swapaxes(H, 0, 1))
    gu = p.eval_grad_U(pts)
    hu = p.eval_hess_U(pts)
    gam = p.eval_gamma(pts)
    Lf = np.trace(H) - np.sum(gu * grad, axis=0)
    fg = np.sum(grad * gam, axis=0)
    hess_sq = np.sum(H * H, axis=(0, 1))
    Hg = np.einsum("ij...,j...->i...", H, grad)
    lhs_int = hess_sq + np.einsum("ij...,i...,j...->...", hu, grad, grad) - np.sum(Hg * gam, axis=0) + Lf * fg
    rac = r_ac_matrix(p, pts)
    rhs_int = hess_sq + np.einsum("ij...,i...,j...->...", rac, grad, grad)
    w = vals * g.cell_volume
    lhs = float(np.sum(lhs_int * w))
    rhs = float(np.sum(rhs_int * w))

    flux = 0.0
    g1 = np.sum(grad * grad, axis=0)
    for k, sign, face, area in boundary_faces(g):
        gam_face = p.eval_gamma(face)
        pc = boundary_cells(vals, k, sign)
        dn = sign * boundary_cells(grad[k], k, sign)
        fgc = boundary_cells(fg, k, sign)
        g1c = boundary_cells(g1, k, sign)
        term = np.abs(dn * fgc) + 0.5 * g1c * np.abs(sign * gam_face[k])
        flux += float(np.sum(pc * term) * area)
    return IdentityCheck(lhs=lhs, rhs=rhs, residual=_relative(lhs, rhs), boundary_flux=flux)


def yano_residual(phi: ex.Expr, p: Problem, g: Grid) -> IdentityCheck:
    """``int (Gamma_2 + Gamma_I)(phi, phi) pi = int L phi (L phi + (grad phi, gamma)) pi``.

    Integrands are symbolic; only the quadrature is discrete. The identity
    drops boundary terms, whose size is reported in ``boundary_flux``.
    """
    pts = g.points()
    D = _Derivs(phi, p)
    red = _reduced_parts(D, pts)
    pi_w = np.exp(p.log_pi(pts)) * g.cell_volume
    lhs = float(np.sum((red["gamma2"] + red["gamma_i"]) * pi_w))
    fg = np.sum(red["grad"] * red["gam"], axis=0)
    rhs = float(np.sum(red["Lf"] * (red["Lf"] + fg) * pi_w))

    flux = 0.0
    for k, sign, face, area in boundary_faces(g):
        fr = _reduced_parts(D, face)
        grad = fr["grad"]
        dn_phi = sign * grad[k]
        # normal derivative of Gamma_1 is 2 (hess phi grad phi) . n
        dn_g1 = sign * 2.0 * np.einsum("j...,j...->...", fr["H"][k], grad)
        g1 = np.sum(grad * grad, axis=0)
        term = np.abs(0.5 * dn_g1 - fr["Lf"] * dn_phi) + 0.5 * g1 * np.abs(sign * fr["gam"][k])
        flux += float(np.sum(np.exp(p.log_pi(face)) * term) * area)
    return IdentityCheck(lhs=lhs, rhs=rhs, residual=_relative(lhs, rhs), boundary_flux=flux)


# -- random batteries ---------------------------------------------------------------

CATALOG_POTENTIALS = (
    "(x1^2 + x2^2)/2",
    "(x1^2 + 3*x2^2)/2",
    "(x1^4 + x2^4)/4 + (x1^2 + x2^2)/2",
)
CATALOG_SKEW = (0.0, 0.1, -0.1, 0.5, -0.5, 1.0)
BATTERY_FUNCTIONS = (
    "x1",
    "x1*x2 + x2^2",
    "sin(x1) + cos(2*x2)",
    "exp(0.3*x1 - 0.2*x2) + x1^3",
)


def catalog_problems(lower=(-1.0, -1.0), upper=(1.0, 1.0)) -> list:
    """Two-dimensional quadratic and quartic potentials with skew drifts,
    plus one three-dimensional problem with a general antisymmetric J."""
    from .model import make_problem

    out = [make_problem(U, lower, upper, c=c) for U in CATALOG_POTENTIALS for c in CATALOG_SKEW]
    J3 = [[0.0, 0.3, -0.2], [-0.3, 0.0, 0.5], [0.2, -0.5, 0.0]]
    out.append(make_problem("(x1^2 + 2*x2^2 + x3^2)/2 + x1^4/12", (-1.0,) * 3, (1.0,) * 3, J=J3))
    return out


@dataclass(frozen=True)
class BatteryResult:
    max_residual: float
    samples: int
    per_problem: list  # max residual per problem
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_residual": self.max_residual,
            "samples": self.samples,
            "per_problem": self.per_problem,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def identity_battery(problems, functions=BATTERY_FUNCTIONS, n_points: int = 1000, seed: int = 0,
                     convention: str = "standard", check: bool = True, tol: float = 1e-9) -> BatteryResult:
    """Pointwise dissipation identity at uniform random points of each box."""
    rng = np.random.default_rng(seed)
    worst = []
    total = 0
    for p in problems:
        lo = np.array(p.lower)[:, None]
        hi = np.array(p.upper)[:, None]
        pts = lo + (hi - lo) * rng.random((p.dim, n_points))
        r = 0.0
        for src in functions:
            f = ex.parse(src, p.dim)
            r = max(r, float(np.max(identity_residual(f, p, pts, convention=convention, check=check))))
            total += n_points
        worst.append(r)
    return BatteryResult(max(worst), total, worst, tol)
