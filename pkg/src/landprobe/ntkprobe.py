"""Empirical neural tangent kernel slices and how they move during training."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import netcore as nc
from .netcore import BatchNorm, Conv2d, Dense, Flatten, MaxPool, NetworkSpec, ReLU, ResidualBlock
from .regtrain import RegularizerSpec, SGDState, accuracy, lr_schedule, train_epoch

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def fingerprint(spec: NetworkSpec, params) -> str:
    values = params.values if isinstance(params, nc.ParamVector) else np.asarray(params)
    h = hashlib.sha256(spec.to_json().encode())
    h.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class NTKSlice:
    values: np.ndarray  # (N, N, n, n)
    image_ids: np.ndarray
    param_count: int
    fingerprint: str
    mode: str = "eval"

    @property
    def gram(self) -> np.ndarray:
        """``M[(i, k), (j, l)] = Phi[i, j, k, l]`` as an ``(N n) x (N n)`` matrix."""
        N, _, n, _ = self.values.shape
        return self.values.transpose(0, 2, 1, 3).reshape(N * n, N * n)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def psd_defect(self) -> float:
        """Most negative Gram eigenvalue relative to the spectral norm (0 if PSD)."""
        ev = np.linalg.eigvalsh(self.gram)
        top = max(abs(ev[0]), abs(ev[-1]))
        return float(max(0.0, -ev[0]) / top) if top > 0 else 0.0


def sample_ntk(spec: NetworkSpec, params, images, image_ids=None, stats=None) -> NTKSlice:
    """``Phi[i, j, k, l] = sum_p J_i[k, p] J_j[l, p]`` over the given inputs.

    Computed as one stacked Jacobian times its transpose; the Gram matrix is
    symmetrized so exchange symmetry holds exactly. BatchNorm runs in eval mode.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] < 2:
        raise ValueError("need at least 2 images")
    J = nc.param_jacobians(spec, params, images, stats)
    N, n, P = J.shape
    Jf = J.reshape(N * n, P)
    M = Jf @ Jf.T
    M = (M + M.T) / 2.0
    values = M.reshape(N, n, N, n).transpose(0, 2, 1, 3).copy()
    ids = np.arange(N) if image_ids is None else np.asarray(image_ids)
    return NTKSlice(values, ids, P, fingerprint(spec, params))


def _arr(phi):
    return phi.values if isinstance(phi, NTKSlice) else np.asarray(phi, dtype=np.float64)


def relative_change(phi0, phi1) -> float:
    """``|Phi1 - Phi0|_F / |Phi0|_F``."""
    a, b = _arr(phi0), _arr(phi1)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    n0 = np.linalg.norm(a)
    if n0 == 0:
        raise UndefinedMetricError("relative change undefined for a zero reference kernel")
    return float(np.linalg.norm(b - a) / n0)


def correlation(phi0, phi1) -> float:
    """Pearson correlation of the flattened tensors (population moments)."""
    a, b = _arr(phi0).ravel(), _arr(phi1).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.mean(da * da)), np.sqrt(np.mean(db * db))
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("correlation undefined for a constant kernel")
    return float(np.clip(np.mean(da * db) / (sa * sb), -1.0, 1.0))


# --------------------------------------------------------------------------
# architecture families
# --------------------------------------------------------------------------

FAMILIES = ("mlp2", "mlp4", "convnet6", "residual")


def build_family(family: str, width: int, input_shape: tuple, num_classes: int, bn: bool = True,
                 skip: bool = True, blocks: int = 4) -> NetworkSpec:
    """Desk-scale members of each architecture family at a given width.

    ``residual`` is a conv stem followed by ``blocks`` identity-skip blocks
    (conv-BN-ReLU-conv-BN, then ReLU), a global max-pool and a linear head;
    ``bn``/``skip`` switch batch norm and the skip path off for ablations.
    """
    input_shape = tuple(input_shape)
    d = int(np.prod(input_shape))
    head = [Flatten()] if len(input_shape) > 1 else []
    if family == "mlp2":
        layers = head + [Dense(d, width), ReLU(), Dense(width, num_classes)]
    elif family == "mlp4":
        layers = head + [Dense(d, width), ReLU(), Dense(width, width), ReLU(), Dense(width, width), ReLU(),
                         Dense(width, num_classes)]
    elif family == "convnet6":
        c, h, w = input_shape
        layers = [Conv2d(c, width, 3, padding=1), ReLU(), MaxPool(2),
                  Conv2d(width, 2 * width, 3, padding=1), ReLU(), MaxPool(2),
                  Conv2d(2 * width, 4 * width, 3, padding=1), ReLU(), MaxPool(h // 4),
                  Flatten(), Dense(4 * width, num_classes)]
    elif family == "residual":
        c, h, w = input_shape
        layers = [Conv2d(c, width, 3, padding=1)] + ([BatchNorm(width)] if bn else []) + [ReLU()]
        for _ in range(blocks):
            inner = [Conv2d(width, width, 3, padding=1)] + ([BatchNorm(width)] if bn else []) + [ReLU(),
                     Conv2d(width, width, 3, padding=1)] + ([BatchNorm(width)] if bn else [])
            layers += [ResidualBlock(tuple(inner), skip=skip), ReLU()]
        layers += [MaxPool(h), Flatten(), Dense(width, num_classes)]
    else:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return NetworkSpec(tuple(layers), input_shape, num_classes)


@dataclass
class SweepTrainConfig:
    epochs: int = 20
    lr: float = 0.01
    schedule: dict | str = "constant"
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    checkpoints: bool = False


SWEEP_COLUMNS = ("family", "width", "P", "seed", "norm0", "norm1", "rel_change", "correlation", "test_acc",
                 "param_change", "bn_stats", "epochs")


def sweep_cell(family: str, width: int, dataset, cfg: SweepTrainConfig, images, image_ids, seed: int,
               bn: bool = True, skip: bool = True) -> dict:
    """Kernel before and after training one (family, width, seed) cell."""
    spec = build_family(family, width, dataset.input_shape, dataset.num_classes, bn, skip)
    params = nc.init(spec, "he_uniform", seed)
    stats = nc.init_stats(spec)
    has_bn = nc.has_batchnorm(spec)
    if has_bn:
        nc.calibrate_stats(spec, params, dataset.train.inputs, stats)
    phi0 = sample_ntk(spec, params, images, image_ids, stats)
    p0 = params.values.copy()
    reg = RegularizerSpec.weight_decay(cfg.weight_decay) if cfg.weight_decay else None
    state = SGDState()
    rng = np.random.default_rng(seed)
    evolution = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.schedule, epoch, cfg.lr)
        params, loss = train_epoch(spec, params, state, dataset.train, lr, cfg.batch_size, rng, cfg.momentum, reg,
                                   stats)
        if cfg.checkpoints:
            phi_t = sample_ntk(spec, params, images, image_ids, stats)
            evolution.append({"epoch": epoch + 1, "loss": loss, "norm": phi_t.norm(),
                              "correlation": correlation(phi0, phi_t), "param_norm": params.norm()})
    if has_bn:
        nc.calibrate_stats(spec, params, dataset.train.inputs, stats)
    phi1 = sample_ntk(spec, params, images, image_ids, stats)
    row = {
        "family": family if family != "residual" else f"residual(bn={'on' if bn else 'off'},skip={'on' if skip else 'off'})",
        "width": width,
        "P": len(params),
        "seed": seed,
        "norm0": phi0.norm(),
        "norm1": phi1.norm(),
        "rel_change": relative_change(phi0, phi1),
        "correlation": correlation(phi0, phi1),
        "test_acc": accuracy(spec, params, dataset.test, stats),
        "param_change": float(np.linalg.norm(params.values - p0) / np.linalg.norm(p0)),
        "bn_stats": "eval, calibrated on train set" if has_bn else "none",
        "epochs": cfg.epochs,
    }
    if cfg.checkpoints:
        row["evolution"] = evolution
    return row


def width_sweep(family: str, widths, dataset, cfg: SweepTrainConfig, n_images: int = 25, seeds=(0, 1, 2),
                image_seed: int = 0, bn: bool = True, skip: bool = True, on_row=None, skip_cell=None) -> list[dict]:
    """Kernel change metrics across widths and seeds on one fixed image sample.

    The same ``n_images`` training images (drawn once with ``image_seed``) are
    used before and after training in every cell. A failing cell is logged
    and recorded with an ``error`` field instead of aborting the sweep.
    """
    widths = list(widths)
    if widths != sorted(widths):
        raise ValueError("widths must be ascending")
    rng = np.random.default_rng(image_seed)
    ids = np.sort(rng.choice(len(dataset.train), n_images, replace=False))
    images = dataset.train.inputs[ids]
    rows = []
    for width in widths:
        for seed in seeds:
            if skip_cell is not None and skip_cell(width, seed):
                continue
            try:
                row = sweep_cell(family, width, dataset, cfg, images, ids, seed, bn, skip)
            except Exception as exc:  # recorded, not fatal
                log.warning("sweep cell %s width=%d seed=%d failed: %s", family, width, seed, exc)
                row = {"family": family, "width": width, "seed": seed, "error": repr(exc)}
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def mean_by_width(rows, key: str = "correlation") -> dict:
    out = {}
    for r in rows:
        if key in r:
            out.setdefault(r["width"], []).append(r[key])
    return {w: float(np.mean(v)) for w, v in sorted(out.items())}


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            if "error" not in r:
                w.writerow(r)
