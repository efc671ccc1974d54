"""Data model, on-disk formats, partitioning and the synthetic corpus.

A :class:`Sequence` is a ``channels x frames`` float32 matrix plus a frame
rate.  It is stored in the DSEQ1 format: one UTF-8 JSON header line followed
by little-endian float32 values in frame-major order.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = "DSEQ1"
LABEL_RATE_HZ = 25.0
FEATURE_RATE_HZ = 100.0


class SequenceFormatError(ValueError):
    """Raised for malformed DSEQ1 files or invalid sequence contents."""


class Partition(str, enum.Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class Sequence:
    """Channels x frames real matrix sampled at ``frame_rate_hz``.

    The array is converted to float32 and made read-only.
    """

    data: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2:
            raise SequenceFormatError(f"sequence data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise SequenceFormatError(f"sequence needs >= 1 channel and frame, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise SequenceFormatError("sequence contains non-finite values")
        rate = float(self.frame_rate_hz)
        if not rate > 0 or not math.isfinite(rate):
            raise SequenceFormatError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frame_rate_hz", rate)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Sequence):
            return NotImplemented
        return (
            self.frame_rate_hz == other.frame_rate_hz
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"Sequence(channels={self.channels}, frames={self.frames}, frame_rate_hz={self.frame_rate_hz})"


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker_id: str
    partition: Partition
    features: Sequence
    labels: Sequence

    def __post_init__(self):
        object.__setattr__(self, "partition", Partition(self.partition))
        if self.labels.channels != 1:
            raise SequenceFormatError(f"labels must have 1 channel, got {self.labels.channels}")


@dataclass(frozen=True)
class Dataset:
    train: list[Utterance] = field(default_factory=list)
    dev: list[Utterance] = field(default_factory=list)
    test: list[Utterance] = field(default_factory=list)

    def __getitem__(self, partition) -> list[Utterance]:
        return getattr(self, Partition(partition).value)

    def all(self) -> list[Utterance]:
        return [*self.train, *self.dev, *self.test]


# --------------------------------------------------------------------------
# DSEQ1 files


def write_sequence(path, seq: Sequence, meta: dict[str, str] | None = None) -> None:
    meta = {str(k): str(v) for k, v in (meta or {}).items()}
    header = {
        "magic": MAGIC,
        "channels": seq.channels,
        "frames": seq.frames,
        "frame_rate_hz": seq.frame_rate_hz,
        "meta": meta,
    }
    payload = np.ascontiguousarray(seq.data.T, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)
    os.replace(tmp, path)


def read_sequence(path) -> tuple[Sequence, dict[str, str]]:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SequenceFormatError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise SequenceFormatError(f"{path}: not a {MAGIC} file")
    try:
        channels = int(header["channels"])
        frames = int(header["frames"])
        rate = float(header["frame_rate_hz"])
        meta = dict(header.get("meta") or {})
    except (KeyError, TypeError, ValueError) as exc:
        raise SequenceFormatError(f"{path}: malformed header: {exc}") from None
    if channels < 1 or frames < 1:
        raise SequenceFormatError(f"{path}: header declares {channels} channels x {frames} frames")
    if len(payload) != 4 * channels * frames:
        raise SequenceFormatError(
            f"{path}: payload length mismatch: expected {4 * channels * frames} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(frames, channels).T
    if not np.all(np.isfinite(data)):
        raise SequenceFormatError(f"{path}: payload contains non-finite values")
    return Sequence(data, rate), meta


def read_labels_csv(path) -> Sequence:
    """Import a ``time_s,value`` CSV as a one-channel label sequence.

    The frame rate is taken from the median time step.  A header row is
    optional.
    """
    times, values = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                t, v = float(row[0]), float(row[1])
            except ValueError:
                if not times:  # header
                    continue
                raise SequenceFormatError(f"{path}: bad row {row!r}") from None
            times.append(t)
            values.append(v)
    if len(times) < 2:
        raise SequenceFormatError(f"{path}: need at least two label rows")
    step = float(np.median(np.diff(times)))
    if step <= 0:
        raise SequenceFormatError(f"{path}: time column must increase")
    return Sequence(np.asarray(values)[None, :], round(1.0 / step, 6))


# --------------------------------------------------------------------------
# dataset manifests (JSON lines)


def write_manifest(path, utts: list[Utterance], features_dir="features", labels_dir="labels") -> None:
    """Write each utterance as two DSEQ1 files plus one manifest line."""
    path = Path(path)
    root = path.parent
    (root / features_dir).mkdir(parents=True, exist_ok=True)
    (root / labels_dir).mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utts:
        fpath = f"{features_dir}/{u.id}.dseq"
        lpath = f"{labels_dir}/{u.id}.dseq"
        write_sequence(root / fpath, u.features, {"id": u.id, "speaker_id": u.speaker_id, "kind": "features"})
        write_sequence(root / lpath, u.labels, {"id": u.id, "speaker_id": u.speaker_id, "kind": "labels"})
        lines.append(
            json.dumps(
                {
                    "id": u.id,
                    "speaker_id": u.speaker_id,
                    "partition": u.partition.value,
                    "features_path": fpath,
                    "labels_path": lpath,
                },
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n")


def read_manifest_entries(path) -> list[dict]:
    entries = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            for key in ("id", "speaker_id", "partition", "features_path", "labels_path"):
                entry[key]
            Partition(entry["partition"])
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise SequenceFormatError(f"{path}:{n}: bad manifest line: {exc}") from None
        entries.append(entry)
    return entries


def load_dataset(path, align: bool = True) -> Dataset:
    """Load a manifest into a :class:`Dataset`, aligning feature/label lengths."""
    from .features import align_labels

    root = Path(path).parent
    parts: dict[Partition, list[Utterance]] = {p: [] for p in Partition}
    for entry in read_manifest_entries(path):
        feats, _ = read_sequence(root / entry["features_path"])
        labels, _ = read_sequence(root / entry["labels_path"])
        if align:
            feats, labels = align_labels(feats, labels)
        utt = Utterance(entry["id"], entry["speaker_id"], Partition(entry["partition"]), feats, labels)
        parts[utt.partition].append(utt)
    return Dataset(parts[Partition.TRAIN], parts[Partition.DEV], parts[Partition.TEST])


# --------------------------------------------------------------------------
# partitioning


def _partition_counts(n: int, ratios) -> list[int]:
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    if n < 1:
        raise ValueError("cannot partition an empty list of utterances")
    bounds = [0] + [int(round(c * n)) for c in np.cumsum(ratios)]
    bounds[-1] = n
    counts = [bounds[i + 1] - bounds[i] for i in range(3)]
    for r, c, name in zip(ratios, counts, ("train", "dev", "test")):
        if r > 0 and c < 1:
            raise ValueError(f"{n} utterances leave the {name} partition empty at ratio {r}")
    return counts


def split_partitions(utts: list[Utterance], ratios=(1 / 3, 1 / 3, 1 / 3)) -> Dataset:
    """Assign consecutive runs of ``utts`` to train, dev and test."""
    counts = _partition_counts(len(utts), ratios)
    out, start = [], 0
    for part, count in zip(Partition, counts):
        out.append([replace(u, partition=part) for u in utts[start : start + count]])
        start += count
    return Dataset(*out)


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic stand-in corpus.

    Labels are sums of ``n_components`` sinusoids with log-uniform
    frequencies in ``[1/duration, label_band_hz]`` and amplitudes
    proportional to ``f ** -spectral_exponent``.  ``feature_rule`` is
    ``"lifted"`` (delayed, nonlinear channels) or ``"identity"``.
    """

    n_utterances: int = 27
    frames: int = 7500
    label_band_hz: float = 1.0
    feature_dims: int = 16
    noise_std: float = 0.0
    seed: int = 0
    frame_rate_hz: float = LABEL_RATE_HZ
    max_delay_s: float = 2.0
    feature_rule: str = "lifted"
    n_components: int = 8
    spectral_exponent: float = 0.5
    ratios: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.n_utterances < 1 or self.frames < 1 or self.feature_dims < 1 or self.n_components < 1:
            raise ValueError("n_utterances, frames, feature_dims and n_components must be positive")
        if not self.frame_rate_hz > 0:
            raise ValueError("frame_rate_hz must be positive")
        if not 0 < self.label_band_hz < self.frame_rate_hz / 2:
            raise ValueError(
                f"label_band_hz={self.label_band_hz} must lie in (0, Nyquist={self.frame_rate_hz / 2})"
            )
        if self.noise_std < 0 or self.max_delay_s < 0:
            raise ValueError("noise_std and max_delay_s must be nonnegative")
        if self.feature_rule not in ("lifted", "identity"):
            raise ValueError(f"unknown feature_rule {self.feature_rule!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        _partition_counts(self.n_utterances, self.ratios)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _label_function(rng, spec: SyntheticSpec):
    duration = spec.frames / spec.frame_rate_hz
    lo = min(1.0 / duration, spec.label_band_hz)
    freqs = np.exp(rng.uniform(np.log(lo), np.log(spec.label_band_hz), spec.n_components))
    amps = freqs ** -spec.spectral_exponent
    amps /= amps.sum()
    phases = rng.uniform(0.0, 2 * np.pi, spec.n_components)

    def y(t):
        t = np.asarray(t, dtype=np.float64)
        return (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(0)

    t = np.arange(spec.frames) / spec.frame_rate_hz
    scale = np.abs(y(t)).max()
    return lambda t: y(t) / scale


def generate_synthetic(spec: SyntheticSpec) -> list[Utterance]:
    """Generate ``spec.n_utterances`` labelled utterances, one speaker each.

    With the ``lifted`` rule channel ``c`` is
    ``a_c * y(t - delay_c) + b_c * y(t)**2 + noise`` where the delays are
    whole frames up to ``max_delay_s``; gains, curvatures and delays are
    drawn once per corpus.  Partitions follow
    :func:`split_partitions` with ``spec.ratios``.
    """
    rng = np.random.default_rng(spec.seed)
    fs = spec.frame_rate_hz
    max_delay = int(round(spec.max_delay_s * fs))
    t = np.arange(spec.frames) / fs
    # the lifting is a property of the corpus, shared by every utterance
    gain = rng.uniform(0.5, 1.5, spec.feature_dims) * rng.choice([-1.0, 1.0], spec.feature_dims)
    curve = rng.uniform(-0.5, 0.5, spec.feature_dims)
    delays = rng.integers(0, max_delay + 1, spec.feature_dims)
    utts = []
    for i in range(spec.n_utterances):
        y = _label_function(rng, spec)
        labels = y(t)
        if spec.feature_rule == "identity":
            feats = np.repeat(labels[None, :], spec.feature_dims, axis=0)
        else:
            feats = np.stack(
                [g * y(t - d / fs) + b * labels**2 for g, b, d in zip(gain, curve, delays)]
            )
        if spec.noise_std > 0:
            feats = feats + spec.noise_std * rng.standard_normal(feats.shape)
        utts.append(
            Utterance(
                id=f"synth_{i:03d}",
                speaker_id=f"spk{i:03d}",
                partition=Partition.TRAIN,
                features=Sequence(feats, fs),
                labels=Sequence(labels[None, :], fs),
            )
        )
    return split_partitions(utts, spec.ratios).all()
