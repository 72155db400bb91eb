"""Curvature tensors of the Fisher-information dissipation and their eigenvalue fields.

Notation: ``g = grad log pi = -grad U`` and ``gamma`` the non-gradient part of
the drift. The dissipation tensor is::

    R = -hess log pi + (g gamma^T + gamma g^T) / 2 - Q(gamma)
    Q_kk = (2d - 3)/8 gamma_k^2 + |gamma|^2 / 8
    Q_kl = (2d - 3)/8 gamma_k gamma_l              (k != l)

which is what completing the square in ``Gamma_2 + Gamma_I`` produces.
``convention="flipped"`` gives the variant with the opposite sign on every
gamma-dependent term; it is kept for comparison only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .errors import DimensionMismatch
from .grid import Grid, MatrixField, ScalarField
from .model import Problem

CONVENTIONS = ("standard", "flipped")


def _points(x):
    return x.points() if isinstance(x, Grid) else np.asarray(x, dtype=float)


def quadratic_gamma_matrix(gam: np.ndarray) -> np.ndarray:
    """Q(gamma) for ``gam`` of shape (d, ...); returns (d, d, ...)."""
    d = gam.shape[0]
    outer = gam[:, None] * gam[None, :]
    Q = (2 * d - 3) / 8.0 * outer
    sq = np.sum(gam * gam, axis=0) / 8.0
    for k in range(d):
        Q[k, k] = Q[k, k] + sq
    return Q


def r_matrix(p: Problem, x, convention: str = "standard") -> np.ndarray:
    """Dissipation tensor at points ``x`` of shape (d, ...) -> (d, d, ...)."""
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    pts = _points(x)
    H = p.eval_hess_U(pts)
    glp = -p.eval_grad_U(pts)
    gam = p.eval_gamma(pts)
    cross = 0.5 * (glp[:, None] * gam[None, :] + gam[:, None] * glp[None, :])
    A = cross - quadratic_gamma_matrix(gam)
    if convention == "standard":
        return H + A
    return H - A


def r_ac_matrix(p: Problem, x) -> np.ndarray:
    """Arnold-Carlen tensor ``hess U - (grad gamma + grad gamma^T) / 2``."""
    pts = _points(x)
    H = p.eval_hess_U(pts)
    D = p.eval_dgamma(pts)  # D[i, j] = d_j gamma_i
    return H - 0.5 * (D + np.swapaxes(D, 0, 1))


def R_tensor(p: Problem, g: Grid, convention: str = "standard") -> MatrixField:
    if g.d != p.dim:
        raise DimensionMismatch("grid and problem dimensions differ")
    return MatrixField(g, r_matrix(p, g, convention))


def R_AC(p: Problem, g: Grid) -> MatrixField:
    if g.d != p.dim:
        raise DimensionMismatch("grid and problem dimensions differ")
    return MatrixField(g, r_ac_matrix(p, g))


def r_closed_form_2d_matrix(U: ex.Expr, c: float, x) -> np.ndarray:
    """Two-dimensional tensor for ``b = -(I + J) grad U``, ``J = [[0, c], [-c, 0]]``.

    Written out entry by entry in terms of the derivatives of ``U`` only, so it
    shares no code path with :func:`r_matrix`.
    """
    if ex.max_index(U) > 2:
        raise DimensionMismatch("closed form is two-dimensional")
    pts = _points(x)
    if pts.shape[0] != 2:
        raise DimensionMismatch("closed form is two-dimensional")
    u1, u2 = (ex.differentiate(U, i) for i in (1, 2))
    U1 = ex.evaluate(u1, pts)
    U2 = ex.evaluate(u2, pts)
    U11 = ex.evaluate(ex.differentiate(u1, 1), pts)
    U12 = ex.evaluate(ex.differentiate(u1, 2), pts)
    U22 = ex.evaluate(ex.differentiate(u2, 2), pts)
    c2 = c * c
    m11 = U11 - c2 / 8 * U1**2 - c2 / 4 * U2**2 - c * U1 * U2
    m12 = U12 + c2 / 8 * U1 * U2 - c / 2 * (U2**2 - U1**2)
    m22 = U22 - c2 / 4 * U1**2 - c2 / 8 * U2**2 + c * U1 * U2
    shape = pts.shape[1:]
    out = np.empty((2, 2, *shape))
    out[0, 0] = m11
    out[0, 1] = m12
    out[1, 0] = m12
    out[1, 1] = m22
    return out


def R_closed_form_2d(U: ex.Expr, c: float, g: Grid) -> MatrixField:
    if g.d != 2:
        raise DimensionMismatch("closed form is two-dimensional")
    return MatrixField(g, r_closed_form_2d_matrix(U, c, g))


# -- eigenvalues -----------------------------------------------------------------

def _min_eig_2x2(a, b, d):
    half_tr = 0.5 * (a + d)
    rad = np.hypot(0.5 * (a - d), b)
    lam = half_tr - rad
    # pick the better-conditioned of the two candidate eigenvectors
    v1 = np.stack([b, lam - a])
    v2 = np.stack([lam - d, b])
    n1 = np.hypot(v1[0], v1[1])
    n2 = np.hypot(v2[0], v2[1])
    use1 = n1 >= n2
    v = np.where(use1, v1, v2)
    n = np.where(use1, n1, n2)
    degenerate = n == 0
    v = np.where(degenerate, np.stack([np.ones_like(a), np.zeros_like(a)]), v / np.where(degenerate, 1, n))
    return lam, v


def jacobi_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Cyclic Jacobi for a batch of symmetric matrices ``A`` of shape (n, d, d).

    Returns eigenvalues (n, d) and eigenvectors (n, d, d) with eigenvectors in
    columns. Iterates until the off-diagonal Frobenius norm is below
    ``tol * max(1, ||A||_F)`` for every matrix.
    """
    A = np.array(A, dtype=float, copy=True)
    n, d, _ = A.shape
    V = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    scale = np.maximum(1.0, np.sqrt(np.sum(A * A, axis=(1, 2))))
    off_mask = ~np.eye(d, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(A[:, off_mask] ** 2, axis=1))
        if np.all(off <= tol * scale):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[:, p, q]
                active = apq != 0.0
                if not np.any(active):
                    continue
                app, aqq = A[:, p, p], A[:, q, q]
                safe = np.where(active, apq, 1.0)
                tau = (aqq - app) / (2.0 * safe)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- G^T A G with G the rotation in the (p, q) plane
                Ap = A[:, :, p].copy()
                Aq = A[:, :, q].copy()
                A[:, :, p] = c[:, None] * Ap - s[:, None] * Aq
                A[:, :, q] = s[:, None] * Ap + c[:, None] * Aq
                Ap = A[:, p, :].copy()
                Aq = A[:, q, :].copy()
                A[:, p, :] = c[:, None] * Ap - s[:, None] * Aq
                A[:, q, :] = s[:, None] * Ap + c[:, None] * Aq
                Vp = V[:, :, p].copy()
                Vq = V[:, :, q].copy()
                V[:, :, p] = c[:, None] * Vp - s[:, None] * Vq
                V[:, :, q] = s[:, None] * Vp + c[:, None] * Vq
    return np.diagonal(A, axis1=1, axis2=2).copy(), V


def min_eigenpair(M: np.ndarray):
    """Smallest eigenvalue and unit eigenvector of symmetric ``M`` (d, d, ...).

    Returns ``(lam, v)`` with shapes ``(...)`` and ``(d, ...)``.
    """
    M = np.asarray(M, dtype=float)
    d = M.shape[0]
    shape = M.shape[2:]
    if d == 1:
        return M[0, 0].copy(), np.ones((1, *shape))
    if d == 2:
        return _min_eig_2x2(M[0, 0], M[0, 1], M[1, 1])
    flat = np.moveaxis(M.reshape(d, d, -1), 2, 0)
    w, V = jacobi_eigh(flat)
    k = np.argmin(w, axis=1)
    idx = np.arange(w.shape[0])
    lam = w[idx, k].reshape(shape)
    v = V[idx, :, k].T.reshape(d, *shape)
    return lam, v


def lambda_min_field(M: MatrixField) -> ScalarField:
    """Per-cell smallest eigenvalue of a symmetric matrix field."""
    if not M.symmetric:
        raise ValueError("lambda_min_field needs a symmetric matrix field")
    lam, _ = min_eigenpair(M.full())
    return ScalarField(M.grid, lam)


@dataclass(frozen=True)
class RateReport:
    field: ScalarField
    lam: float
    argmin: tuple
    positive: bool

    @property
    def argmin_point(self) -> list:
        return [float(v) for v in self.field.grid.center(self.argmin)]

    def to_dict(self) -> dict:
        g = self.field.grid
        return {
            "lambda": self.lam,
            "argmin": self.argmin_point,
            "argmin_index": list(self.argmin),
            "positive": self.positive,
            "max_lambda_min": float(np.max(self.field.values)),
            "grid": g.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def global_rate(f: ScalarField) -> RateReport:
    """Minimum of an eigenvalue field with its location and positivity flag."""
    vals = f.values
    k = int(np.argmin(vals))
    idx = tuple(int(i) for i in np.unravel_index(k, vals.shape))
    lam = float(vals[idx])
    return RateReport(field=f, lam=lam, argmin=idx, positive=lam > 0.0)


def modified_hessian(f: ex.Expr, p: Problem, x) -> np.ndarray:
    """Gamma-shifted Hessian of ``f`` at ``x`` (shape (d,) or (d, ...)).

    ``M_ii = f_ii + (1/2) sum_{k != i} f_k gamma_k`` and
    ``M_ij = f_ij - (gamma_i f_j + gamma_j f_i) / 4``.
    """
    pts = np.asarray(x, dtype=float)
    d = p.dim
    grad = np.stack([np.broadcast_to(ex.evaluate(e, pts), pts.shape[1:]) for e in ex.gradient(f, d)])
    H = np.stack([
        np.stack([np.broadcast_to(ex.evaluate(e, pts), pts.shape[1:]) for e in row])
        for row in ex.hessian(f, d)
    ])
    gam = p.eval_gamma(pts)
    return shifted_hessian(H, grad, gam)


def shifted_hessian(H: np.ndarray, grad: np.ndarray, gam: np.ndarray) -> np.ndarray:
    """The gamma-shifted Hessian from numeric ``H`` (d,d,...), ``grad`` and ``gam`` (d,...)."""
    d = grad.shape[0]
    fg = grad * gam
    total = np.sum(fg, axis=0)
    M = H - 0.25 * (gam[:, None] * grad[None, :] + grad[:, None] * gam[None, :])
    for i in range(d):
        M[i, i] = H[i, i] + 0.5 * (total - fg[i])
    return M
