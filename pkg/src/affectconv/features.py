"""Audio front end: log mel filterbank energies, frame stacking, z-normalization."""

from __future__ import annotations

import wave
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np

from .seqio import Sequence, Utterance


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 40
    fft_size: int = 512
    mel_low_hz: float = 20.0
    mel_high_hz: float | None = None
    log_floor: float = 1e-10
    stack: int = 4
    preemphasis: float = 0.97

    def __post_init__(self):
        if self.mel_high_hz is None:
            object.__setattr__(self, "mel_high_hz", self.sample_rate_hz / 2)
        if self.window_ms < self.hop_ms:
            raise ValueError("window_ms must be >= hop_ms")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.fft_size < self.window_samples:
            raise ValueError(f"fft_size {self.fft_size} < window of {self.window_samples} samples")
        if not 0 <= self.mel_low_hz < self.mel_high_hz <= self.sample_rate_hz / 2:
            raise ValueError("need 0 <= mel_low_hz < mel_high_hz <= Nyquist")
        if self.stack < 1:
            raise ValueError("stack must be >= 1")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000))

    @property
    def frame_rate_hz(self) -> float:
        return 1000.0 / self.hop_ms


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV file as floats in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit samples")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: malformed WAV: {exc}") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    """Center frequencies (Hz) of the ``n_mels`` triangular filters."""
    mels = np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.n_mels + 2)
    return mel_to_hz(mels[1:-1])


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """HTK-style triangles with unit peak, shape ``(n_mels, fft_size // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate_hz / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def log_mfb(samples, cfg: FrontendConfig = FrontendConfig()) -> Sequence:
    """Log mel filterbank energies at the hop rate (``n_mels x frames``).

    Pre-emphasis, Hamming window, power spectrum, mel triangles, then the
    natural log of the energies floored at ``cfg.log_floor``.
    """
    x = np.asarray(samples, dtype=np.float64)
    win, hop = cfg.window_samples, cfg.hop_samples
    if x.ndim != 1 or len(x) < win:
        raise ValueError(f"need at least {win} samples, got {x.shape}")
    if cfg.preemphasis:
        x = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    n_frames = (len(x) - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    spectrum = np.abs(np.fft.rfft(frames * np.hamming(win), cfg.fft_size)) ** 2
    energies = spectrum @ mel_filterbank(cfg).T
    return Sequence(np.log(np.maximum(energies, cfg.log_floor)).T, cfg.frame_rate_hz)


def stack_frames(seq: Sequence, k: int) -> Sequence:
    """Concatenate non-overlapping groups of ``k`` frames channel-wise.

    Output channel ``j * C + c`` of frame ``i`` holds input channel ``c`` of
    frame ``i * k + j``; leftover frames are dropped.
    """
    if k < 1:
        raise ValueError(f"stack size must be >= 1, got {k}")
    if seq.frames < k:
        raise ValueError(f"cannot stack {k} frames from a {seq.frames}-frame sequence")
    c, n = seq.channels, seq.frames // k
    data = seq.data[:, : n * k].reshape(c, n, k).transpose(2, 0, 1).reshape(k * c, n)
    return Sequence(data, seq.frame_rate_hz / k)


def unstack_frames(seq: Sequence, k: int) -> Sequence:
    """Inverse of :func:`stack_frames` for the retained frames."""
    if seq.channels % k:
        raise ValueError(f"{seq.channels} channels are not divisible by {k}")
    c, n = seq.channels // k, seq.frames
    data = seq.data.reshape(k, c, n).transpose(1, 2, 0).reshape(c, n * k)
    return Sequence(data, seq.frame_rate_hz * k)


def speaker_znorm(utts: list[Utterance], min_std: float = 1e-8) -> list[Utterance]:
    """Standardize each feature channel over every frame of a speaker."""
    if not utts:
        raise ValueError("no utterances to normalize")
    by_speaker = defaultdict(list)
    for u in utts:
        by_speaker[u.speaker_id].append(u)
    stats = {}
    for spk, group in by_speaker.items():
        pooled = np.concatenate([u.features.data.astype(np.float64) for u in group], axis=1)
        mean = pooled.mean(axis=1, keepdims=True)
        std = pooled.std(axis=1, keepdims=True)
        stats[spk] = (mean, np.where(std < min_std, 1.0, std))
    out = []
    for u in utts:
        mean, std = stats[u.speaker_id]
        data = (u.features.data.astype(np.float64) - mean) / std
        out.append(replace(u, features=Sequence(data, u.features.frame_rate_hz)))
    return out


def align_labels(features: Sequence, labels: Sequence, max_mismatch: int = 2) -> tuple[Sequence, Sequence]:
    """Truncate features and labels to a common length."""
    gap = abs(features.frames - labels.frames)
    if gap > max_mismatch:
        raise ValueError(
            f"feature/label length mismatch of {gap} frames ({features.frames} vs {labels.frames})"
        )
    n = min(features.frames, labels.frames)
    if gap == 0:
        return features, labels
    return (
        Sequence(features.data[:, :n], features.frame_rate_hz),
        Sequence(labels.data[:, :n], labels.frame_rate_hz),
    )
