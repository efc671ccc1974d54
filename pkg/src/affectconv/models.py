"""Network builders, full-utterance training with early stopping, ensembles."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, neural
from .neural import LayerKind, LayerSpec, NetworkSpec
from .seqio import Dataset, Sequence, Utterance

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "DNET1"


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# architectures


def build_dilated_net(in_ch: int, width: int = 32, depth: int = 10, k: int = 3) -> NetworkSpec:
    """``depth`` tanh conv layers with dilation ``2**n`` followed by a 1x1 head."""
    if min(in_ch, width, depth, k) < 1:
        raise ValueError("in_ch, width, depth and k must be positive")
    layers = []
    ch = in_ch
    for n in range(depth):
        layers.append(LayerSpec(LayerKind.CONV, ch, width, k=k, dilation=2**n))
        layers.append(LayerSpec(LayerKind.TANH, width, width))
        ch = width
    layers.append(LayerSpec(LayerKind.HEAD, width, 1))
    return NetworkSpec(tuple(layers))


def build_downup_net(
    in_ch: int,
    width: int = 32,
    pool: int = 3,
    down_layers: int = 4,
    up_layers: int = 4,
    k: int = 3,
) -> NetworkSpec:
    """Conv/tanh/max-pool encoder, one bottleneck conv, transposed-conv decoder.

    Each decoder layer uses ``stride = n_w = pool`` so it exactly undoes one
    pooling stage when ``up_layers == down_layers``.
    """
    if min(in_ch, width, pool, k) < 1 or down_layers < 0 or up_layers < 0:
        raise ValueError("invalid down/up network dimensions")
    layers = []
    ch = in_ch
    for _ in range(down_layers):
        layers.append(LayerSpec(LayerKind.CONV, ch, width, k=k))
        layers.append(LayerSpec(LayerKind.TANH, width, width))
        layers.append(LayerSpec(LayerKind.MAXPOOL, width, width, stride_or_pool=pool))
        ch = width
    layers.append(LayerSpec(LayerKind.CONV, ch, width, k=k))
    layers.append(LayerSpec(LayerKind.TANH, width, width))
    for _ in range(up_layers):
        layers.append(LayerSpec(LayerKind.TCONV, width, width, k=pool, stride_or_pool=pool))
        layers.append(LayerSpec(LayerKind.TANH, width, width))
    layers.append(LayerSpec(LayerKind.HEAD, width, 1))
    return NetworkSpec(tuple(layers))


def build_single_filter_net(in_ch: int, length: int) -> NetworkSpec:
    """One conv filter of ``length`` taps, tanh, then a linear 1x1 regressor."""
    return NetworkSpec(
        (
            LayerSpec(LayerKind.CONV, in_ch, 1, k=length),
            LayerSpec(LayerKind.TANH, 1, 1),
            LayerSpec(LayerKind.HEAD, 1, 1),
        )
    )


ARCHITECTURES = {"dilated": build_dilated_net, "downup": build_downup_net}


# --------------------------------------------------------------------------
# whole-network passes


def network_forward(spec: NetworkSpec, params, x):
    """Run the layer stack on ``x``; returns the output and the backward caches."""
    caches = []
    h = x
    for i, layer in enumerate(spec.layers):
        w = params.get(f"layer{i:02d}.weight")
        b = params.get(f"layer{i:02d}.bias")
        kind = layer.kind
        if kind is LayerKind.CONV or kind is LayerKind.HEAD:
            caches.append(h)
            h = neural.conv1d_forward(w, b, h, layer.dilation)
        elif kind is LayerKind.TCONV:
            caches.append(h)
            h = neural.tconv1d_forward(w, b, h, layer.stride_or_pool)
        elif kind is LayerKind.TANH:
            h = neural.tanh_forward(h)
            caches.append(h)
        elif kind is LayerKind.MAXPOOL:
            n = h.shape[1]
            h, idx = neural.maxpool_forward(h, layer.stride_or_pool)
            caches.append((idx, n))
    return h, caches


def network_backward(spec: NetworkSpec, params, caches, dy) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate ``dy``; returns parameter gradients and the input gradient."""
    grads = {}
    g = dy
    for i in reversed(range(len(spec.layers))):
        layer, cache = spec.layers[i], caches[i]
        kind = layer.kind
        if kind is LayerKind.CONV or kind is LayerKind.HEAD:
            w = params[f"layer{i:02d}.weight"]
            g, dw, db = neural.conv1d_backward(w, cache, g, layer.dilation)
        elif kind is LayerKind.TCONV:
            w = params[f"layer{i:02d}.weight"]
            g, dw, db = neural.tconv1d_backward(w, cache, g, layer.stride_or_pool)
        elif kind is LayerKind.TANH:
            g = neural.tanh_backward(cache, g)
            continue
        else:
            idx, n = cache
            g = neural.maxpool_backward(idx, g, n)
            continue
        grads[f"layer{i:02d}.weight"] = dw
        grads[f"layer{i:02d}.bias"] = db
    return {k: grads[k] for k in params}, g


def _padded_length(spec: NetworkSpec, n: int) -> int:
    m = spec.pad_multiple
    return m * math.ceil(n / m)


def _check_input(spec: NetworkSpec, x):
    if x.shape[0] != spec.in_ch:
        raise ValueError(f"channel mismatch: network expects {spec.in_ch} input channels, features have {x.shape[0]}")


def predict_array(spec: NetworkSpec, params, x) -> np.ndarray:
    """Prediction of length ``x.shape[1]`` (right zero-pad, run, crop)."""
    _check_input(spec, x)
    n = x.shape[1]
    dtype = next(iter(params.values())).dtype
    xp = np.zeros((x.shape[0], _padded_length(spec, n)), dtype=dtype)
    xp[:, :n] = x
    y, _ = network_forward(spec, params, xp)
    if y.shape[1] < n:
        raise ValueError(f"network maps {xp.shape[1]} frames to {y.shape[1]}; cannot crop to {n}")
    return y[0, :n]


def forward_full(spec: NetworkSpec, params, features: Sequence) -> Sequence:
    return Sequence(predict_array(spec, params, features.data)[None, :], features.frame_rate_hz)


def _loss_and_grads(spec, params, x, y):
    n = x.shape[1]
    dtype = next(iter(params.values())).dtype
    xp = np.zeros((x.shape[0], _padded_length(spec, n)), dtype=dtype)
    xp[:, :n] = x
    out, caches = network_forward(spec, params, xp)
    loss, g = metrics.ccc_loss_grad(y, out[0, :n])
    dy = np.zeros_like(out)
    dy[0, :n] = g
    grads, _ = network_backward(spec, params, caches, dy)
    return loss, grads


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0


def save_checkpoint(path, spec: NetworkSpec, params, seed: int = 0, epoch: int = 0) -> None:
    """Header JSON line, then float32 little-endian arrays in canonical order (atomic)."""
    header = {"magic": CHECKPOINT_MAGIC, "spec": spec.to_dict(), "seed": int(seed), "epoch": int(epoch)}
    shapes = spec.parameter_shapes()
    if list(shapes) != list(params):
        raise CheckpointError("parameter names do not match the network spec")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise CheckpointError(f"{name}: shape {params[name].shape} != {shape}")
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
        spec = NetworkSpec.from_dict(header["spec"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint header: {exc}") from None
    shapes = spec.parameter_shapes()
    expected = 4 * sum(math.prod(s) for s in shapes.values())
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload length mismatch: expected {expected} bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f4")
    params, offset = {}, 0
    for name, shape in shapes.items():
        size = math.prod(shape)
        params[name] = flat[offset : offset + size].reshape(shape).astype(dtype)
        offset += size
    return Checkpoint(spec, params, int(header.get("seed", 0)), int(header.get("epoch", 0)))


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    l2: float = 1e-5
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    eval_mode: str = "per_utterance"
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > 0 or self.l2 < 0:
            raise ValueError("lr must be positive and l2 nonnegative")
        if self.max_epochs < 1 or self.patience < 0:
            raise ValueError("max_epochs must be >= 1 and patience >= 0")
        if self.patience >= self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be < max_epochs ({self.max_epochs})")
        if self.eval_mode not in ("per_utterance", "concatenated"):
            raise ValueError(f"unknown eval_mode {self.eval_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    dev_ccc: float
    dev_rmse: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_dev_ccc: float = -math.inf
    checkpoint_path: str | None = None
    best_params: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["epoch", "train_loss", "dev_ccc", "dev_rmse"])
        for r in self.epochs:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.dev_ccc), repr(r.dev_rmse)])
        return buf.getvalue()


def evaluate(spec: NetworkSpec, params, utts: list[Utterance], mode: str = "per_utterance") -> tuple[float, float]:
    """Dev-set CCC and RMSE, averaged per utterance or over the concatenation."""
    preds = [predict_array(spec, params, u.features.data) for u in utts]
    labels = [u.labels.data[0] for u in utts]
    return score(labels, preds, mode)


def score(labels, preds, mode: str = "per_utterance") -> tuple[float, float]:
    if mode == "concatenated":
        y, yhat = np.concatenate(labels), np.concatenate(preds)
        return metrics.ccc(y, yhat).ccc, metrics.rmse(y, yhat)
    if mode != "per_utterance":
        raise ValueError(f"unknown eval mode {mode!r}")
    cccs = [metrics.ccc(y, p).ccc for y, p in zip(labels, preds)]
    rmses = [metrics.rmse(y, p) for y, p in zip(labels, preds)]
    return float(np.mean(cccs)), float(np.mean(rmses))


def train(spec: NetworkSpec, dataset: Dataset, cfg: TrainConfig = TrainConfig(), checkpoint_path=None) -> TrainReport:
    """Train on whole utterances, one per step, minimizing ``-CCC``.

    After each epoch the dev partition is scored; the best parameters are
    kept (and written to ``checkpoint_path`` if given).  Training stops
    once ``cfg.patience`` consecutive epochs fail to improve on the best
    dev CCC.
    """
    if not dataset.train or not dataset.dev:
        raise ValueError("training needs nonempty train and dev partitions")
    for u in [*dataset.train, *dataset.dev]:
        _check_input(spec, u.features.data)
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    params = neural.init_parameters(spec, cfg.seed, dtype)
    state = neural.AdamState.zeros_like(params)
    train_x = [u.features.data.astype(dtype) for u in dataset.train]
    train_y = [u.labels.data[0].astype(np.float64) for u in dataset.train]
    report = TrainReport(checkpoint_path=str(checkpoint_path) if checkpoint_path else None)
    bad = 0
    for epoch in range(cfg.max_epochs):
        losses = []
        for i in rng.permutation(len(train_x)):
            loss, grads = _loss_and_grads(spec, params, train_x[i], train_y[i])
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch} on {dataset.train[i].id}")
            neural.adam_step(params, grads, state, cfg.lr, cfg.l2)
            losses.append(loss)
        dev_ccc, dev_rmse = evaluate(spec, params, dataset.dev, cfg.eval_mode)
        if not math.isfinite(dev_ccc):
            raise TrainingDiverged(f"non-finite dev CCC at epoch {epoch}")
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), dev_ccc, dev_rmse))
        log.debug("epoch %d loss %.4f dev ccc %.4f", epoch, np.mean(losses), dev_ccc)
        if dev_ccc > report.best_dev_ccc:
            report.best_dev_ccc = dev_ccc
            report.best_epoch = epoch
            report.best_params = {k: p.copy() for k, p in params.items()}
            if checkpoint_path:
                save_checkpoint(checkpoint_path, spec, report.best_params, cfg.seed, epoch)
            bad = 0
        else:
            bad += 1
            if bad > cfg.patience:
                break
    return report


def predict_ensemble(checkpoints: list, features: Sequence) -> Sequence:
    """Frame-wise mean of the predictions of several checkpoints of one architecture."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    loaded = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in checkpoints]
    spec = loaded[0].spec
    for c in loaded[1:]:
        if c.spec != spec:
            raise CheckpointError("checkpoints in an ensemble must share one network spec")
    total = np.zeros(features.frames, dtype=np.float64)
    for c in loaded:
        total += predict_array(spec, c.params, features.data)
    return Sequence((total / len(loaded))[None, :], features.frame_rate_hz)
