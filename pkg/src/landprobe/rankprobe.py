"""Singular values of dense and convolutional layers, effective rank, and rank clipping."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import netcore as nc
from .netcore import Batch, Conv2d, Dense, NetworkSpec, ParamVector
from .regtrain import AttackConfig, RegularizerSpec, SGDState, accuracy, lr_schedule, train_epoch

log = logging.getLogger(__name__)

MODES = ("none", "RankMin", "RankMax")


class UndefinedRankError(ValueError):
    pass


def effective_rank(spectrum) -> float:
    """Nuclear norm over Frobenius norm, ``sum(s) / sqrt(sum(s^2))``.

    Accepts a SingularSpectrum, a 1-D array of singular values or a matrix.
    """
    s = spectrum.values if isinstance(spectrum, SingularSpectrum) else np.asarray(spectrum, dtype=np.float64)
    if s.ndim == 2:
        s = np.linalg.svd(s, compute_uv=False)
    s = np.abs(s.ravel())
    fro = np.sqrt(np.sum(s * s))
    if fro == 0:
        raise UndefinedRankError("effective rank is undefined for the zero operator")
    return float(np.sum(s) / fro)


def numerical_rank(values, rtol: float = 1e-10) -> int:
    s = np.asarray(values)
    return int(np.sum(s > rtol * s.max())) if s.size and s.max() > 0 else 0


@dataclass
class SingularSpectrum:
    layer: str
    values: np.ndarray  # descending
    kind: str  # "dense" or "conv"
    dims: tuple  # dense: (out, in); conv: (n, k, c_in, c_out)
    circular_approx: bool = False

    def __post_init__(self):
        self.values = np.sort(np.abs(np.asarray(self.values, dtype=np.float64).ravel()))[::-1]

    @property
    def effective_rank(self) -> float:
        return effective_rank(self.values)

    @property
    def rank(self) -> int:
        return numerical_rank(self.values)

    @property
    def top(self) -> float:
        return float(self.values[0])

    @property
    def bottom(self) -> float:
        return float(self.values[-1])


def _grid(n, k):
    n = (n, n) if np.isscalar(n) else tuple(n)
    if n[0] < k or n[1] < k:
        raise ValueError(f"input size {n} must be at least the kernel size {k}")
    return n


def _conv_transform(kernel, n):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be (k, k, c_in, c_out), got {kernel.shape}")
    return np.fft.fft2(kernel, _grid(n, kernel.shape[0]), axes=(0, 1))


def dense_singular_values(W, layer: str = "") -> SingularSpectrum:
    W = np.asarray(W, dtype=np.float64)
    return SingularSpectrum(layer, np.linalg.svd(W, compute_uv=False), "dense", W.shape)


def conv_singular_values(kernel, n, layer: str = "", circular_approx: bool = False) -> SingularSpectrum:
    """Singular values of the stride-1 circular convolution of an ``n x n`` input.

    ``kernel`` is ``(k, k, c_in, c_out)``. The operator is block diagonalized
    by the 2-D DFT, so its spectrum is the union over all ``n^2`` frequencies
    of the singular values of the ``c_in x c_out`` transfer matrices.
    """
    T = _conv_transform(kernel, n)
    s = np.linalg.svd(T, compute_uv=False)
    k, _, cin, cout = np.shape(kernel)
    return SingularSpectrum(layer, s, "conv", (n, k, cin, cout), circular_approx)


def _apply_to_spectrum(W, fn, n=None):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 2:
        U, s, Vh = np.linalg.svd(W, full_matrices=False)
        return (U * fn(s)) @ Vh
    if n is None:
        raise ValueError("a conv kernel needs the input size n")
    k = W.shape[0]
    U, s, Vh = np.linalg.svd(_conv_transform(W, n), full_matrices=False)
    T = (U * fn(s)[..., None, :]) @ Vh
    full = np.fft.ifft2(T, axes=(0, 1)).real
    # prune the filter back to its original k x k support
    return full[:k, :k].copy()


def clip_low(W, tau: float, n=None) -> np.ndarray:
    """Zero every singular value below ``tau`` (per frequency for conv kernels)."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return _apply_to_spectrum(W, lambda s: np.where(s < tau, 0.0, s), n)


def clip_high(W, cap: float, n=None) -> np.ndarray:
    """Replace every singular value by ``min(cap, s)``."""
    if cap <= 0:
        raise ValueError("cap must be > 0")
    return _apply_to_spectrum(W, lambda s: np.minimum(s, cap), n)


# --------------------------------------------------------------------------
# network layers
# --------------------------------------------------------------------------


def _to_kernel(w):
    return w.transpose(2, 3, 1, 0)  # (O, C, k, k) -> (k, k, C, O)


def _from_kernel(K):
    return K.transpose(3, 2, 0, 1)


def operator_layers(spec: NetworkSpec, include_head: bool = False) -> list[tuple]:
    """``(path, layer, n)`` for every conv layer and every hidden dense layer.

    ``n`` is the conv input's zero-padded spatial size (the grid of the
    circular model) and None for dense layers. The final dense layer is the
    classifier head and is left out by default.
    """
    shapes = nc.layer_input_shapes(spec)
    out = [(path, layer, tuple(d + 2 * layer.padding for d in shape[1:]) if isinstance(layer, Conv2d) else None)
           for path, (layer, shape) in shapes.items() if isinstance(layer, (Conv2d, Dense))]
    if not include_head and out and isinstance(out[-1][1], Dense):
        out = out[:-1]
    return out


def layer_spectra(spec: NetworkSpec, params: ParamVector, include_head: bool = False) -> list[SingularSpectrum]:
    spectra = []
    for path, layer, n in operator_layers(spec, include_head):
        w = params.view(path, "weight")
        if isinstance(layer, Conv2d):
            approx = True  # zero padding and strides are modelled as circular stride-1
            spectra.append(conv_singular_values(_to_kernel(w), n, path, approx))
        else:
            spectra.append(dense_singular_values(w, path))
    return spectra


def clip_params(spec: NetworkSpec, params: ParamVector, mode: str, quantile: float = 0.5,
                include_head: bool = False) -> ParamVector:
    """One RankMin/RankMax clipping pass over all conv and hidden dense layers.

    The threshold of each layer is the given quantile of its current spectrum.
    """
    if mode not in ("RankMin", "RankMax"):
        raise ValueError(f"clipping mode must be RankMin or RankMax, got {mode!r}")
    arrays = params.unflatten()
    for spectrum, (path, layer, n) in zip(layer_spectra(spec, params, include_head),
                                          operator_layers(spec, include_head)):
        level = float(np.quantile(spectrum.values, quantile))
        w = arrays[(path, "weight")]
        conv = isinstance(layer, Conv2d)
        target = _to_kernel(w) if conv else w
        if mode == "RankMin":
            new = clip_low(target, level, n if conv else None)
        else:
            new = clip_high(target, max(level, np.finfo(float).tiny), n if conv else None)
        arrays[(path, "weight")] = _from_kernel(new) if conv else new
    return ParamVector.flatten(arrays, params.segments)


TRACE_COLUMNS = ("epoch", "layer", "effective_rank", "top_sv", "bottom_sv")


def spectrum_rows(epoch: int, spectra) -> list[dict]:
    return [{"epoch": epoch, "layer": s.layer, "effective_rank": s.effective_rank, "top_sv": s.top,
             "bottom_sv": s.bottom} for s in spectra]


@dataclass
class RankResult:
    params: ParamVector
    trace: list
    warnings: list = field(default_factory=list)
    clean_acc: float = float("nan")
    robust_acc: float = float("nan")

    def final_ranks(self) -> dict:
        last = max(r["epoch"] for r in self.trace)
        return {r["layer"]: r["effective_rank"] for r in self.trace if r["epoch"] == last}


def _train_loss(spec, params, data, stats):
    return nc.loss_value(nc.forward(spec, params, data, "eval", stats), data.labels)


def rank_finetune(spec: NetworkSpec, params: ParamVector, data: Batch, mode: str = "RankMin", epochs: int = 15,
                  schedule="finetune", clip_epochs: int = 6, quantile: float = 0.5, batch_size: int = 128,
                  momentum: float = 0.9, reg: RegularizerSpec | None = None, stats=None, seed: int = 0,
                  attack: AttackConfig | None = None, augment_data: bool = False, test: Batch | None = None,
                  eval_attack: AttackConfig | None = None, lr: float | None = None) -> RankResult:
    """Fine-tune a trained model, clipping singular values at the start of early epochs.

    ``mode="none"`` runs the same schedule without clipping (the baseline).
    Each epoch appends one trace row per layer; epoch 0 is the model as given.
    A warning is recorded when an epoch ends with training loss above twice
    the loss measured just before that epoch's clip.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    rng = np.random.default_rng(seed)
    attack_rng = np.random.default_rng([seed, 1])
    state = SGDState()
    trace = spectrum_rows(0, layer_spectra(spec, params))
    warnings = []
    for epoch in range(epochs):
        pre = None
        if mode != "none" and epoch < clip_epochs:
            pre = _train_loss(spec, params, data, stats)
            params = clip_params(spec, params, mode, quantile)
        rate = lr_schedule(schedule, epoch, lr)
        params, _ = train_epoch(spec, params, state, data, rate, batch_size, rng, momentum, reg, stats, augment_data,
                                attack, attack_rng)
        if pre is not None:
            post = _train_loss(spec, params, data, stats)
            if post > 2 * pre:
                msg = f"epoch {epoch}: loss {post:.4g} exceeds twice the pre-clip loss {pre:.4g}"
                log.warning(msg)
                warnings.append(msg)
        trace.extend(spectrum_rows(epoch + 1, layer_spectra(spec, params)))
    result = RankResult(params, trace, warnings)
    if test is not None:
        result.clean_acc = accuracy(spec, params, test, stats)
        if eval_attack is not None:
            result.robust_acc = accuracy(spec, params, test, stats, eval_attack, np.random.default_rng([seed, 2]))
    return result


def write_rank_trace(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
