"""Runners for the three studies: receptive-field sweep, label
downsampling/spline reconstruction, and prediction smoothness."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from . import metrics, models
from .seqio import Dataset, Sequence

DEFAULT_LENGTHS = tuple(2**n for n in range(1, 12))
DEFAULT_FACTORS = tuple(2**n for n in range(1, 8))


@dataclass(frozen=True)
class SweepRow:
    setting: int
    mean_metric: float
    std_metric: float
    n_runs: int


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    # setting -> one value per run (or per sequence)
    values: dict[int, list[float]] = field(default_factory=dict)

    @classmethod
    def from_values(cls, values: dict[int, list[float]]) -> "SweepResult":
        rows = [
            SweepRow(s, float(np.mean(v)), float(np.std(v)), len(v))
            for s, v in sorted(values.items())
        ]
        return cls(rows, {s: list(v) for s, v in sorted(values.items())})

    def mean(self, setting: int) -> float:
        return next(r.mean_metric for r in self.rows if r.setting == setting)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["setting", "mean", "std", "n"])
        for r in self.rows:
            writer.writerow([r.setting, repr(r.mean_metric), repr(r.std_metric), r.n_runs])
        return buf.getvalue()


# --------------------------------------------------------------------------
# receptive-field sweep


def _sweep_cell(args) -> float:
    dataset, length, cfg = args
    spec = models.build_single_filter_net(dataset.train[0].features.channels, length)
    return models.train(spec, dataset, cfg).best_dev_ccc


def receptive_field_sweep(
    dataset: Dataset,
    lengths=DEFAULT_LENGTHS,
    runs: int = 10,
    cfg: models.TrainConfig = models.TrainConfig(),
    jobs: int = 1,
) -> SweepResult:
    """Best dev CCC of a one-filter network for each filter length.

    Run ``r`` uses seed ``cfg.seed + r``, so every length sees the same
    seed list.
    """
    lengths = [int(l) for l in lengths]
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if not dataset.train or not dataset.dev:
        raise ValueError("the sweep needs train and dev partitions")
    if any(l < 1 for l in lengths):
        raise ValueError("filter lengths must be >= 1")
    shortest = min(u.features.frames for u in [*dataset.train, *dataset.dev])
    if max(lengths) > shortest:
        raise ValueError(f"filter length {max(lengths)} exceeds the shortest utterance ({shortest} frames)")
    cells = [(length, r) for length in lengths for r in range(runs)]
    tasks = [(dataset, length, replace(cfg, seed=cfg.seed + r)) for length, r in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_sweep_cell, tasks))
    else:
        scores = [_sweep_cell(t) for t in tasks]
    values: dict[int, list[float]] = {length: [] for length in lengths}
    for (length, _), value in zip(cells, scores):
        values[length].append(value)
    return SweepResult.from_values(values)


# --------------------------------------------------------------------------
# downsampling / spline upsampling of labels


def spline_reconstruct(y, factor: int) -> np.ndarray:
    """Keep every ``factor``-th sample and rebuild the rest with a natural cubic spline.

    Frames after the last kept sample hold its value.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return y.copy()
    kept = np.arange(0, y.size, factor)
    if kept.size < 2:
        raise ValueError(f"{y.size} frames keep fewer than two samples at factor {factor}")
    out = CubicSpline(kept, y[kept], bc_type="natural")(np.arange(y.size))
    out[kept[-1] + 1 :] = y[kept[-1]]
    out[kept] = y[kept]
    return out


def downsample_upsample_oracle(labels, factors=DEFAULT_FACTORS) -> SweepResult:
    """CCC between each label sequence and its reconstruction, per factor."""
    seqs = [np.asarray(l.data[0] if isinstance(l, Sequence) else l, dtype=np.float64).ravel() for l in labels]
    factors = [int(f) for f in factors]
    if not seqs:
        raise ValueError("no label sequences")
    if any(f < 1 for f in factors):
        raise ValueError("factors must be >= 1")
    shortest = min(s.size for s in seqs)
    if shortest <= 4 * max(factors):
        raise ValueError(f"label sequences must be longer than {4 * max(factors)} frames, shortest is {shortest}")
    values = {f: [metrics.ccc(y, spline_reconstruct(y, f)).ccc for y in seqs] for f in factors}
    return SweepResult.from_values(values)


# --------------------------------------------------------------------------
# smoothness


@dataclass(frozen=True)
class SmoothnessRow:
    utterance_id: str
    series: str
    lowband_fraction: float
    diff_rms: float


def smoothness_report(
    predictions_a,
    predictions_b,
    labels,
    ids=None,
    cutoff_hz: float = 1.0,
    frame_rate_hz: float = 25.0,
    names=("model_a", "model_b", "ground_truth"),
) -> list[SmoothnessRow]:
    """Low-band power fraction and first-difference RMS for two models and the labels.

    One row per (utterance, series), then one ``ALL`` row per series with
    the means.
    """
    def flat(x):
        return np.asarray(x.data[0] if isinstance(x, Sequence) else x, dtype=np.float64).ravel()

    a, b, y = [flat(p) for p in predictions_a], [flat(p) for p in predictions_b], [flat(p) for p in labels]
    if not (len(a) == len(b) == len(y)):
        raise ValueError(f"got {len(a)}, {len(b)} and {len(y)} sequences")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(y))]
    rows = []
    for uid, *series in zip(ids, a, b, y):
        if len({s.size for s in series}) != 1:
            raise ValueError(f"{uid}: length mismatch {[s.size for s in series]}")
        for name, s in zip(names, series):
            rows.append(
                SmoothnessRow(uid, name, metrics.lowband_power_fraction(s, cutoff_hz, frame_rate_hz), metrics.first_difference_rms(s))
            )
    for name in names:
        mine = [r for r in rows if r.series == name]
        rows.append(
            SmoothnessRow(
                "ALL",
                name,
                float(np.mean([r.lowband_fraction for r in mine])),
                float(np.mean([r.diff_rms for r in mine])),
            )
        )
    return rows


def smoothness_csv(rows: list[SmoothnessRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["utterance_id", "series", "lowband_fraction", "diff_rms"])
    for r in rows:
        writer.writerow([r.utterance_id, r.series, repr(r.lowband_fraction), repr(r.diff_rms)])
    return buf.getvalue()
