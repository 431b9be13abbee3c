"""SGD training with weight decay or norm-bias, PGD attacks and adversarial training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netcore as nc
from .netcore import Batch, NetworkSpec, NumericError, ParamVector

# --------------------------------------------------------------------------
# regularizers
# --------------------------------------------------------------------------

REG_KINDS = ("none", "weight_decay", "norm_bias")


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    coefficient: float = 0.0
    mu_sq: float = 0.0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"regularizer kind must be one of {REG_KINDS}")
        if self.coefficient < 0 or self.mu_sq < 0:
            raise ValueError("regularizer coefficient and mu^2 must be >= 0")

    @classmethod
    def weight_decay(cls, lam: float) -> "RegularizerSpec":
        return cls("weight_decay", lam)

    @classmethod
    def norm_bias(cls, coefficient: float, mu_sq: float) -> "RegularizerSpec":
        return cls("norm_bias", coefficient, mu_sq)

    def value(self, phi) -> float:
        phi = np.asarray(phi)
        if self.kind == "weight_decay":
            return self.coefficient * float(phi @ phi)
        if self.kind == "norm_bias":
            return self.coefficient * norm_bias_value_grad(phi, self.mu_sq)[0]
        return 0.0

    def grad(self, phi) -> np.ndarray | None:
        """Gradient of the penalty, or None when there is no penalty."""
        if self.kind == "weight_decay":
            return self.coefficient * (2.0 * phi)
        if self.kind == "norm_bias":
            return self.coefficient * norm_bias_value_grad(phi, self.mu_sq)[1]
        return None


def norm_bias_value_grad(params, mu_sq: float):
    """``| |phi|^2 - mu^2 |`` and its (sub)gradient ``2 sign(|phi|^2 - mu^2) phi``, with sign(0) = 0."""
    phi = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    gap = float(phi @ phi) - mu_sq
    s = float(np.sign(gap))
    return abs(gap), (2.0 * s) * phi


def mu_heuristic(trained_with_wd, slack: float = 1.1) -> float:
    """Target ``mu^2`` a little above the squared norm reached under weight decay."""
    if slack < 1:
        raise ValueError("slack must be >= 1")
    phi = trained_with_wd.values if isinstance(trained_with_wd, ParamVector) else np.asarray(trained_with_wd)
    return slack * float(phi @ phi)


# --------------------------------------------------------------------------
# optimizer and schedules
# --------------------------------------------------------------------------


@dataclass
class SGDState:
    velocity: np.ndarray | None = None


def sgd_step(params, grad, state: SGDState, lr: float, momentum: float = 0.9,
             reg: RegularizerSpec | None = None):
    """One heavy-ball step: ``v <- momentum v + (g + reg'(phi))``, ``phi <- phi - lr v``.

    Accepts and returns either a ParamVector or a bare array.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    wrap = isinstance(params, ParamVector)
    phi = params.values if wrap else np.asarray(params, dtype=np.float64)
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    rg = reg.grad(phi) if reg is not None else None
    if rg is not None:
        g = g + rg
    if state.velocity is None:
        state.velocity = np.zeros_like(phi)
    state.velocity = momentum * state.velocity + g
    new = phi - lr * state.velocity
    if not np.all(np.isfinite(new)):
        raise NumericError("non-finite parameter update")
    return params.with_values(new) if wrap else new


SCHEDULES = {
    # 300-epoch regularizer comparison
    "regularizer": {"base": 0.1, "milestones": [100, 175, 225, 275], "factor": 0.1},
    # 15-epoch rank fine-tuning: drop after the third and fifth epochs
    "finetune": {"base": 0.001, "milestones": [3, 5], "factor": 0.1},
    "rank_natural": {"base": 0.01, "milestones": [100, 150, 175, 190], "factor": 0.1},
    "rank_adv_c100": {"base": 0.1, "milestones": [200, 250], "factor": 0.1},
    "mlp_rank": {"base": 0.01, "milestones": [60, 80, 90], "factor": 0.1},
    "constant": {"base": 0.1, "milestones": [], "factor": 1.0},
}


def lr_schedule(kind, epoch: int, base: float | None = None) -> float:
    """Piecewise-constant learning rate at a 0-indexed ``epoch``.

    ``kind`` is a named schedule or a dict with ``base``, ``milestones`` and
    ``factor``; the rate is multiplied by ``factor`` once for each milestone
    ``<= epoch``. ``base`` overrides the table's starting rate.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if isinstance(kind, str):
        if kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {kind!r}; known: {sorted(SCHEDULES)}")
        table = SCHEDULES[kind]
    else:
        table = kind
    lr = table["base"] if base is None else base
    drops = sum(1 for m in table.get("milestones", []) if epoch >= m)
    return lr * table.get("factor", 0.1) ** drops


# --------------------------------------------------------------------------
# attacks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 7
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0 or self.step_size < 0 or self.steps < 0:
            raise ValueError("epsilon, step_size and steps must be >= 0")


def pgd_attack(spec: NetworkSpec, params, inputs, labels, cfg: AttackConfig, rng=None, stats=None):
    """L-infinity PGD: signed-gradient ascent projected onto the eps-ball and the [0, 1] box."""
    x0 = np.asarray(inputs, dtype=np.float64)
    lo = np.maximum(x0 - cfg.epsilon, 0.0)
    hi = np.minimum(x0 + cfg.epsilon, 1.0)
    x = x0.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng() if rng is None else rng
        x = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, x0.shape), lo, hi)
    for _ in range(cfg.steps):
        g, _ = nc.input_grad(spec, params, x, labels, "eval", stats)
        x = np.clip(x + cfg.step_size * np.sign(g), lo, hi)
    return x


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


def augment(inputs: np.ndarray, rng, pad: int = 4, flip_p: float = 0.5) -> np.ndarray:
    """Random crop from a zero-padded image plus random horizontal flip."""
    n, c, h, w = inputs.shape
    padded = np.pad(inputs, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < flip_p
    out = np.empty_like(inputs)
    for i in range(n):
        img = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = img[:, :, ::-1] if flip[i] else img
    return out


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    schedule: dict | str = "constant"
    batch_size: int = 128
    momentum: float = 0.9
    reg: RegularizerSpec = field(default_factory=RegularizerSpec)
    augment: bool = False
    attack: AttackConfig | None = None
    seed: int = 0


def train_epoch(spec: NetworkSpec, params, state: SGDState, data: Batch, lr: float, batch_size: int, rng,
                momentum: float = 0.9, reg: RegularizerSpec | None = None, stats=None, augment_data: bool = False,
                attack: AttackConfig | None = None, attack_rng=None):
    """One pass over ``data`` in shuffled minibatches; returns ``(params, mean loss)``.

    With ``attack`` set, each (augmented) minibatch is replaced by its PGD
    perturbation before the gradient step. Attack randomness comes from
    ``attack_rng`` so the shuffling stream is identical with and without it.
    """
    order = rng.permutation(len(data))
    losses = []
    for start in range(0, len(data), batch_size):
        idx = order[start : start + batch_size]
        x = data.inputs[idx]
        if augment_data:
            x = augment(x, rng)
        if attack is not None:
            x = pgd_attack(spec, params, x, data.labels[idx], attack, attack_rng, stats)
        loss, g = nc.loss_and_grad(spec, params, Batch(x, data.labels[idx]), "train", stats)
        losses.append(loss)
        params = sgd_step(params, g, state, lr, momentum, reg)
    return params, float(np.mean(losses))


def adversarial_train_epoch(spec, params, state, data, lr, batch_size, rng, attack: AttackConfig | None = None,
                            momentum=0.9, reg=None, stats=None, augment_data=True, attack_rng=None):
    attack = attack or AttackConfig(8 / 255, 2 / 255, 7, random_start=True)
    return train_epoch(spec, params, state, data, lr, batch_size, rng, momentum, reg, stats, augment_data, attack,
                       attack_rng)


def accuracy(spec: NetworkSpec, params, data: Batch, stats=None, attack: AttackConfig | None = None, rng=None,
             chunk: int = 1000) -> float:
    correct = 0
    for start in range(0, len(data), chunk):
        x = data.inputs[start : start + chunk]
        y = data.labels[start : start + chunk]
        if attack is not None:
            x = pgd_attack(spec, params, x, y, attack, rng, stats)
        correct += int((nc.forward(spec, params, x, "eval", stats).argmax(1) == y).sum())
    return correct / len(data)


def train(spec: NetworkSpec, params: ParamVector, data: Batch, cfg: TrainConfig, stats=None, test: Batch | None = None,
          eval_attack: AttackConfig | None = None, callback=None):
    """Train for ``cfg.epochs`` epochs; returns ``(params, trace)``.

    Trace rows: ``(epoch, lr, train loss, clean acc, robust acc, |phi|)``,
    accuracies measured on ``test`` when given.
    """
    rng = np.random.default_rng(cfg.seed)
    attack_rng = np.random.default_rng([cfg.seed, 1])
    state = SGDState()
    trace = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.schedule, epoch, cfg.lr)
        params, loss = train_epoch(spec, params, state, data, lr, cfg.batch_size, rng, cfg.momentum, cfg.reg, stats,
                                   cfg.augment, cfg.attack, attack_rng)
        clean = robust = float("nan")
        if test is not None:
            clean = accuracy(spec, params, test, stats)
            if eval_attack is not None:
                robust = accuracy(spec, params, test, stats, eval_attack)
        trace.append((epoch, lr, loss, clean, robust, params.norm()))
        if callback is not None:
            callback(trace[-1], params)
    return params, trace
