"""MLP embeddings of affine classifiers and trapping experiments.

A ReLU MLP whose smallest hidden width is at least ``s`` can reproduce any
rank-``s`` affine map ``x -> Ax + b`` on a finite input set: factor ``A`` by
SVD, route ``Sigma V x`` through identity blocks, and add a bias ``c`` large
enough that no ReLU ever sees a negative input. Training started from such a
point behaves like training the linear model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netcore as nc
from .netcore import Batch, NetworkSpec, ParamVector
from .spectral import SpectrumEstimate, extreme_eigenvalues, make_hvp

log = logging.getLogger(__name__)


class CapacityError(ValueError):
    pass


@dataclass
class AffineMap:
    A: np.ndarray
    b: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.b.shape != (self.A.shape[0],):
            raise ValueError(f"bias length {self.b.shape} does not match A {self.A.shape}")
        U, sig, Vt = np.linalg.svd(self.A, full_matrices=False)
        if sig.size == 0 or sig[0] == 0.0:
            # zero map: keep a single zero direction so the embedding has a path
            n, m = self.A.shape
            self.U, self.sigma, self.V = np.zeros((n, 1)), np.zeros(1), np.zeros((1, m))
        else:
            s = max(1, int(np.sum(sig > 1e-10 * sig[0])))
            self.U, self.sigma, self.V = U[:, :s], sig[:s], Vt[:s]

    @property
    def rank(self) -> int:
        return self.sigma.size

    @property
    def shape(self):
        return self.A.shape

    def __call__(self, x):
        return np.asarray(x) @ self.A.T + self.b

    def reconstruction_error(self) -> float:
        return float(np.linalg.norm(self.U @ np.diag(self.sigma) @ self.V - self.A))


def embed_affine(affine: AffineMap, spec: NetworkSpec, omega, safety: float = 1.0) -> ParamVector:
    """Parameters of a ReLU MLP that equals ``affine`` on every point of ``omega``.

    Every hidden pre-activation on ``omega`` is at least 1 (``c >= 1``).
    ``safety`` multiplies the bias constant; 1 reproduces the bare bound.
    """
    if not spec.is_mlp():
        raise ValueError("embed_affine needs a Dense/ReLU MLP spec")
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 2 or omega.shape[0] == 0:
        raise ValueError("omega must be a nonempty (N, m) array")
    widths = spec.widths()
    n, m = affine.shape
    if widths[0] != m or widths[-1] != n:
        raise nc.DimensionError("input", f"affine map is {n}x{m}, network maps {widths[0]} -> {widths[-1]}")
    s = affine.rank
    dense = spec.dense_layers()
    arrays = {}
    if len(dense) == 1:
        arrays[(str(dense[0]), "weight")] = affine.A
        arrays[(str(dense[0]), "bias")] = affine.b
        return ParamVector.flatten(arrays, nc.segments_of(spec))
    if min(widths[1:-1]) < s:
        raise CapacityError(f"minimum hidden width {min(widths[1:-1])} < rank {s}")

    n1 = widths[1]
    A1 = np.zeros((n1, m))
    A1[:s] = affine.sigma[:, None] * affine.V
    c = safety * (np.abs(omega @ A1.T).max() + 1.0)
    arrays[(str(dense[0]), "weight")] = A1
    arrays[(str(dense[0]), "bias")] = np.full(n1, c)
    for li in range(1, len(dense) - 1):
        rows, cols = widths[li + 1], widths[li]
        W = np.zeros((rows, cols))
        W[:s, :s] = np.eye(s)
        bias = np.full(rows, c)
        bias[:s] = 0.0
        arrays[(str(dense[li]), "weight")] = W
        arrays[(str(dense[li]), "bias")] = bias
    AL = np.zeros((n, widths[-2]))
    AL[:, :s] = affine.U
    arrays[(str(dense[-1]), "weight")] = AL
    arrays[(str(dense[-1]), "bias")] = -c * AL.sum(axis=1) + affine.b
    return ParamVector.flatten(arrays, nc.segments_of(spec))


def _project_rank(A, s):
    U, sig, Vt = np.linalg.svd(A, full_matrices=False)
    sig[s:] = 0.0
    return (U * sig) @ Vt


def _linear_objective(A, b, X, y, lam):
    logits = X @ A.T + b
    loss, d = nc._loss_grad_logits(logits, y)
    return loss + lam * float(np.sum(A * A)), d.T @ X + 2.0 * lam * A, d.sum(0), loss


def train_linear(data: Batch, weight_decay: float = 0.0, rank_cap: int | None = None, num_classes: int | None = None,
                 max_iter: int = 5000, tol: float = 1e-6, step: float = 1.0) -> AffineMap:
    """Fit ``(A, b)`` by full-batch gradient descent with backtracking.

    Minimizes mean cross-entropy plus ``weight_decay * |A|_F^2``. With
    ``rank_cap`` below ``min(n, m)`` each step is projected onto rank-``s``
    matrices by truncated SVD. Convergence is declared when the norm of the
    (projected) gradient mapping drops below ``tol``; the outcome is stored in
    ``info``.
    """
    if weight_decay < 0:
        raise ValueError("weight_decay must be >= 0")
    X = data.inputs.reshape(len(data), -1)
    y = data.labels
    n = num_classes or data.num_classes or int(y.max()) + 1
    m = X.shape[1]
    project = rank_cap is not None and rank_cap < min(n, m)
    A, b = np.zeros((n, m)), np.zeros(n)
    f, gA, gb, _ = _linear_objective(A, b, X, y, weight_decay)
    t = step
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        while True:
            A_new = A - t * gA
            if project:
                A_new = _project_rank(A_new, rank_cap)
            b_new = b - t * gb
            dA, db = A_new - A, b_new - b
            f_new, gA_new, gb_new, _ = _linear_objective(A_new, b_new, X, y, weight_decay)
            # sufficient decrease for the (projected) step
            if f_new <= f + np.sum(gA * dA) + gb @ db + (np.sum(dA * dA) + db @ db) / (2 * t) or t < 1e-12:
                break
            t *= 0.5
        gnorm = math.sqrt(float(np.sum(dA * dA) + db @ db)) / t
        A, b, f, gA, gb = A_new, b_new, f_new, gA_new, gb_new
        if gnorm < tol:
            break
        t *= 1.5
    loss = _linear_objective(A, b, X, y, weight_decay)[3]
    converged = gnorm < tol
    if not converged:
        log.warning("train_linear: no convergence after %d iterations (grad norm %.3e)", it, gnorm)
    info = {"iterations": it, "grad_norm": gnorm, "converged": converged, "objective": f, "loss": loss,
            "weight_decay": weight_decay, "rank_cap": rank_cap}
    return AffineMap(A, b, info)


def bias_shift_init(params: ParamVector, shift: float) -> ParamVector:
    out = params.copy()
    out.values[out.mask("bias")] += shift
    return out


def bias_uniform_init(params: ParamVector, half_width: float, seed: int = 0) -> ParamVector:
    if half_width < 0:
        raise ValueError("half_width must be >= 0")
    out = params.copy()
    m = out.mask("bias")
    out.values[m] = np.random.default_rng(seed).uniform(-half_width, half_width, int(m.sum()))
    return out


def rescale_hidden(spec: NetworkSpec, params: ParamVector, k: int, alpha: float) -> ParamVector:
    """Scale dense layer ``k`` (weights and bias) by ``alpha > 0`` and the next layer's weights by ``1/alpha``.

    ReLU is positively homogeneous, so the network function is unchanged.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    dense = spec.dense_layers()
    out = params.copy()
    a, nxt = str(dense[k]), str(dense[k + 1])
    out.view(a, "weight")[...] *= alpha
    out.view(a, "bias")[...] *= alpha
    out.view(nxt, "weight")[...] /= alpha
    return out


@dataclass
class StationarityReport:
    loss: float
    grad_norm: float
    min_ev: SpectrumEstimate
    max_ev: SpectrumEstimate
    min_activation: float

    def record(self) -> dict:
        return {
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "min_ev": self.min_ev.record(),
            "max_ev": self.max_ev.record(),
            "min_activation": self.min_activation,
        }


def min_preactivation(spec, params, data, stats=None) -> float:
    _, pre = nc.forward(spec, params, data, "eval", stats, return_preacts=True)
    return float(min(p.min() for p in pre)) if pre else math.inf


def measure_stationarity(spec: NetworkSpec, params, data: Batch, power_iters: int = 500, seed: int = 0,
                         h: float | None = None, mode: str = "train", stats=None, tol: float = 1e-7) -> StationarityReport:
    """Loss, gradient norm, extreme Hessian eigenvalues and smallest ReLU input on the full dataset."""
    if len(data) == 0:
        raise ValueError("dataset must be nonempty")
    loss, g = nc.loss_and_grad(spec, params, data, mode, stats)
    fn = make_hvp(spec, params, data, h, mode, stats)
    lo, hi = extreme_eigenvalues(fn, len(g), power_iters, tol, seed)
    for est in (lo, hi):
        est.vector = None
        if not est.converged:
            log.info("eigenvalue estimate %.4g not converged (residual %.2e)", est.eigenvalue, est.residual)
    return StationarityReport(loss, float(np.linalg.norm(g)), lo, hi, min_preactivation(spec, params, data, stats))


# --------------------------------------------------------------------------
# trapping experiments
# --------------------------------------------------------------------------

INIT_SCHEMES = ("default", "lemma1", "zero", "bias+shift", "bias-uniform")
OPTIMIZERS = ("gd", "sgd", "sgd_momentum")


@dataclass
class TrapConfig:
    widths: list = field(default_factory=lambda: [2, 512, 512, 512, 2])
    init: str = "default"
    optimizer: str = "gd"
    lr: float = 0.05
    schedule: dict | str = "constant"
    epochs: int = 500
    batch_size: int = 128
    momentum: float = 0.9
    shift: float = 20.0
    half_width: float = 50.0
    linear_weight_decay: float = 1e-4
    linear_max_iter: int = 20000
    power_iters: int = 500
    measure: bool = True
    seed: int = 0

    def __post_init__(self):
        errors = []
        if self.init not in INIT_SCHEMES:
            errors.append(f"init must be one of {INIT_SCHEMES}")
        if self.optimizer not in OPTIMIZERS:
            errors.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr <= 0:
            errors.append("lr must be > 0")
        if self.epochs < 0:
            errors.append("epochs must be >= 0")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass
class TrapResult:
    config: TrapConfig
    before: StationarityReport | None
    after: StationarityReport | None
    trace: list
    positive_throughout: bool
    initial_loss: float
    final_loss: float
    linear_loss: float | None = None
    params: ParamVector | None = None

    @property
    def trapped(self) -> bool | None:
        if self.linear_loss is None:
            return None
        return self.final_loss >= 0.95 * self.linear_loss

    def record(self) -> dict:
        return {
            "config": asdict(self.config),
            "before": self.before.record() if self.before else None,
            "after": self.after.record() if self.after else None,
            "positive_throughout": self.positive_throughout,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "linear_loss": self.linear_loss,
            "trapped": self.trapped,
        }


def initial_params(cfg: TrapConfig, spec: NetworkSpec, data: Batch):
    """Starting point for a trapping run; returns ``(params, linear_loss)``."""
    base = nc.init(spec, "default", cfg.seed)
    if cfg.init == "default":
        return base, None
    if cfg.init == "zero":
        return nc.init(spec, "zero"), None
    if cfg.init == "bias+shift":
        return bias_shift_init(base, cfg.shift), None
    if cfg.init == "bias-uniform":
        return bias_uniform_init(base, cfg.half_width, cfg.seed), None
    widths = spec.widths()
    s = min(widths[1:-1]) if len(widths) > 2 else None
    lin = train_linear(data, cfg.linear_weight_decay, rank_cap=s, num_classes=spec.output_dim,
                       max_iter=cfg.linear_max_iter)
    return embed_affine(lin, spec, data.inputs), lin.info["loss"]


def trapping_experiment(cfg: TrapConfig, data: Batch, callback=None) -> TrapResult:
    """Train an MLP from the configured initialization and compare before/after.

    Records a per-epoch ``(epoch, loss, grad_norm)`` trace and whether every
    ReLU input stayed positive on the training set for the entire run.
    """
    from .regtrain import SGDState, lr_schedule, sgd_step

    spec = NetworkSpec.mlp(cfg.widths)
    params, linear_loss = initial_params(cfg, spec, data)
    before = measure_stationarity(spec, params, data, cfg.power_iters, cfg.seed) if cfg.measure else None
    rng = np.random.default_rng(cfg.seed)
    momentum = cfg.momentum if cfg.optimizer == "sgd_momentum" else 0.0
    state = SGDState()
    values = params.values.copy()
    positive = min_preactivation(spec, values, data) > 0
    loss, g = nc.loss_and_grad(spec, values, data)
    initial_loss = loss
    trace = [(0, loss, float(np.linalg.norm(g)))]
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.schedule, epoch, cfg.lr)
        if cfg.optimizer == "gd":
            values = sgd_step(values, g, state, lr, momentum)
        else:
            for idx in np.array_split(rng.permutation(len(data)), max(1, len(data) // cfg.batch_size)):
                _, gb = nc.loss_and_grad(spec, values, data.subset(idx))
                values = sgd_step(values, gb, state, lr, momentum)
        _, pre = nc.forward(spec, values, data, return_preacts=True)
        positive = positive and all(p.min() > 0 for p in pre)
        loss, g = nc.loss_and_grad(spec, values, data)
        trace.append((epoch + 1, loss, float(np.linalg.norm(g))))
        if callback is not None:
            callback(epoch + 1, loss, trace[-1][2])
    final = params.with_values(values)
    after = measure_stationarity(spec, final, data, cfg.power_iters, cfg.seed) if cfg.measure else None
    return TrapResult(cfg, before, after, trace, bool(positive), initial_loss, loss, linear_loss, final)
