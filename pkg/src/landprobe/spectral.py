"""Hessian-vector products and extreme-eigenvalue estimates of the training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .netcore import NetworkSpec, NumericError, ParamVector, loss_and_grad


@dataclass
class SpectrumEstimate:
    eigenvalue: float
    iterations: int
    residual: float
    converged: bool
    shift: float | None = None
    vector: np.ndarray | None = None

    def record(self) -> dict:
        return {
            "eigenvalue": self.eigenvalue,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "shift": self.shift,
        }


def default_step(phi: np.ndarray) -> float:
    return 1e-4 * (1.0 + float(np.linalg.norm(phi)))


def fd_hvp(grad_fn: Callable[[np.ndarray], np.ndarray], phi, v, h: float | None = None) -> np.ndarray:
    """Central difference of ``grad_fn`` along ``v``, scaled back by ``|v|``."""
    phi = np.asarray(phi, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("hvp direction must be nonzero")
    h = default_step(phi) if h is None else h
    u = v / nv
    with np.errstate(invalid="ignore", over="ignore"):
        out = (grad_fn(phi + h * u) - grad_fn(phi - h * u)) * (nv / (2.0 * h))
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite Hessian-vector product (h={h:.3e}, |phi|={np.linalg.norm(phi):.3e})")
    return out


def loss_grad_fn(spec: NetworkSpec, data, mode: str = "train", stats=None):
    """Full-dataset gradient as a function of the flat parameter values."""

    def g(values):
        return loss_and_grad(spec, values, data, mode, stats)[1]

    return g


def hvp(spec: NetworkSpec, params: ParamVector, data, v, h: float | None = None, mode: str = "train", stats=None):
    values = params.values if isinstance(params, ParamVector) else params
    return fd_hvp(loss_grad_fn(spec, data, mode, stats), values, v, h)


def make_hvp(spec: NetworkSpec, params, data, h: float | None = None, mode: str = "train", stats=None):
    """Bind ``hvp`` to one parameter point; the step ``h`` is fixed once."""
    values = np.array(params.values if isinstance(params, ParamVector) else params, dtype=np.float64)
    h = default_step(values) if h is None else h
    g = loss_grad_fn(spec, data, mode, stats)

    def apply(v):
        return fd_hvp(g, values, v, h)

    apply.h = h
    return apply


def _start(P, seed):
    v = np.random.default_rng(seed).standard_normal(P)
    return v / np.linalg.norm(v)


def _power(op, P, iters, tol, seed):
    v = _start(P, seed)
    lam, res = 0.0, np.inf
    for it in range(1, iters + 1):
        w = op(v)
        lam = float(v @ w)
        res = float(np.linalg.norm(w - lam * v))
        if res <= tol * max(abs(lam), 1e-300):
            return SpectrumEstimate(lam, it, res, True, vector=v)
        nw = np.linalg.norm(w)
        if nw == 0:
            # v is in the null space; the zero operator's spectrum is {0}
            return SpectrumEstimate(0.0, it, 0.0, True, vector=v)
        v = w / nw
    return SpectrumEstimate(lam, iters, res, False, vector=v)


def power_max(hvp_fn, P: int, iters: int = 500, tol: float = 1e-7, seed: int = 0) -> SpectrumEstimate:
    """Eigenvalue of largest magnitude, sign taken from the Rayleigh quotient.

    ``converged`` means the residual ``|Hv - lam v|`` fell below ``tol * |lam|``.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    return _power(hvp_fn, P, iters, tol, seed)


def _shifted(hvp_fn, P, iters, tol, seed, sign):
    dom = power_max(hvp_fn, P, iters, tol, seed)
    sigma = 1.01 * abs(dom.eigenvalue)
    if sigma == 0:
        return SpectrumEstimate(0.0, dom.iterations, dom.residual, dom.converged, shift=0.0, vector=dom.vector)

    # sign=-1: sigma*I - H has top eigenvalue sigma - lam_min
    # sign=+1: sigma*I + H has top eigenvalue sigma + lam_max
    def op(v):
        return sigma * v + sign * hvp_fn(v)

    top = _power(op, P, iters, tol, seed + 1)
    lam = sign * (top.eigenvalue - sigma)
    v = top.vector
    res = float(np.linalg.norm(hvp_fn(v) - lam * v))
    return SpectrumEstimate(lam, top.iterations, res, top.converged, shift=sigma, vector=v)


def power_min_shifted(hvp_fn, P: int, iters: int = 500, tol: float = 1e-7, seed: int = 0) -> SpectrumEstimate:
    """Smallest eigenvalue via power iteration on ``sigma*I - H``, ``sigma = 1.01 |lam_dom|``."""
    return _shifted(hvp_fn, P, iters, tol, seed, -1.0)


def power_max_shifted(hvp_fn, P: int, iters: int = 500, tol: float = 1e-7, seed: int = 0) -> SpectrumEstimate:
    """Largest (signed) eigenvalue via power iteration on ``sigma*I + H``."""
    return _shifted(hvp_fn, P, iters, tol, seed, 1.0)


def extreme_eigenvalues(hvp_fn, P: int, iters: int = 500, tol: float = 1e-7, seed: int = 0):
    """``(min, max)`` eigenvalue estimates.

    The dominant-magnitude eigenvalue is one of the two extremes; the other
    one comes from a shifted run.
    """
    dom = power_max(hvp_fn, P, iters, tol, seed)
    if dom.eigenvalue >= 0:
        return power_min_shifted(hvp_fn, P, iters, tol, seed), dom
    return dom, power_max_shifted(hvp_fn, P, iters, tol, seed)


@dataclass
class DenseHessian:
    matrix: np.ndarray
    asymmetry: float  # |H - H^T|_F / |H|_F before symmetrization
    h: float

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def eigh(self):
        return np.linalg.eigh(self.matrix)


def dense_hessian_from(hvp_fn, P: int, guard: int = 2000) -> DenseHessian:
    if P > guard:
        raise ValueError(f"refusing a dense {P}x{P} Hessian (guard is {guard})")
    H = np.empty((P, P))
    e = np.zeros(P)
    for j in range(P):
        e[j] = 1.0
        H[:, j] = hvp_fn(e)
        e[j] = 0.0
    fro = np.linalg.norm(H)
    asym = float(np.linalg.norm(H - H.T) / fro) if fro > 0 else 0.0
    return DenseHessian((H + H.T) / 2.0, asym, getattr(hvp_fn, "h", float("nan")))


def dense_hessian(spec: NetworkSpec, params, data, h: float | None = None, mode: str = "train", stats=None,
                  guard: int = 2000) -> DenseHessian:
    """Column-by-column Hessian from ``hvp(e_j)``; test oracle for small nets."""
    fn = make_hvp(spec, params, data, h, mode, stats)
    return dense_hessian_from(fn, len(params), guard)
