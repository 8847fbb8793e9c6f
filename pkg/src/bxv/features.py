"""MFCC front-end: pre-emphasis, Hamming framing, mel cepstra, sliding CMN, energy VAD."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from bxv.errors import DataError, ShapeError
from bxv.numkernel import read_bxm, write_bxm

SUPPORTED_RATES = (8000, 16000)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"features must be frames x dim, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def with_values(self, values):
        return FeatureMatrix(values, self.frame_shift_ms, self.frame_length_ms)


@dataclass(frozen=True)
class MfccConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_filters: int = 40
    num_ceps: int = 30
    low_freq: float = 20.0
    high_freq: float | None = None  # None -> Nyquist
    preemph: float = 0.97
    log_floor: float = 1e-10
    cmn_window: int = 300
    vad_offset: float = -0.5
    allowed_rates: tuple = field(default=SUPPORTED_RATES)


def pre_emphasis(w: Waveform, coeff: float = 0.97) -> Waveform:
    """``y[n] = x[n] - coeff * x[n-1]``, with ``y[0] = x[0] * (1 - coeff)``."""
    if not 0.0 <= coeff < 1.0:
        raise ValueError(f"pre-emphasis coefficient must be in [0, 1), got {coeff}")
    x = w.samples
    if x.size == 0:
        raise DataError("cannot pre-emphasize an empty waveform")
    y = np.empty_like(x)
    y[0] = x[0] * (1.0 - coeff)
    y[1:] = x[1:] - coeff * x[:-1]
    return Waveform(y, w.sample_rate)


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_filterbank(num_filters, nfft, sample_rate, low_freq=20.0, high_freq=None):
    """Triangular filters on the ``nfft // 2 + 1`` power-spectrum bins.

    Returns ``(weights, centers_hz)`` with ``weights`` of shape
    ``(num_filters, nfft // 2 + 1)``.
    """
    if high_freq is None:
        high_freq = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(low_freq), hz_to_mel(high_freq), num_filters + 2))
    bins = np.arange(nfft // 2 + 1) * sample_rate / nfft
    weights = np.zeros((num_filters, bins.size))
    for i in range(num_filters):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        weights[i] = np.maximum(0.0, np.minimum(up, down))
    return weights, edges[1:-1]


def frame_signal(w: Waveform, cfg: MfccConfig = MfccConfig()):
    """Hamming-windowed frames; the last partial window is dropped."""
    win = int(round(w.sample_rate * cfg.frame_length_ms / 1000.0))
    shift = int(round(w.sample_rate * cfg.frame_shift_ms / 1000.0))
    n = w.samples.size
    if n < win:
        raise DataError(f"waveform has {n} samples, shorter than one {win}-sample window")
    num_frames = 1 + (n - win) // shift
    idx = np.arange(win)[None, :] + shift * np.arange(num_frames)[:, None]
    return w.samples[idx] * np.hamming(win)


def mel_energies(w: Waveform, cfg: MfccConfig = MfccConfig()):
    """Mel filterbank energies (before the log), one row per frame."""
    if w.sample_rate not in cfg.allowed_rates:
        raise DataError(f"sample rate {w.sample_rate} not in {cfg.allowed_rates}")
    frames = frame_signal(w, cfg)
    nfft = 1 << (frames.shape[1] - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2
    fbank, _ = mel_filterbank(cfg.num_filters, nfft, w.sample_rate, cfg.low_freq, cfg.high_freq)
    return power @ fbank.T


def frame_mfcc(w: Waveform, cfg: MfccConfig = MfccConfig()) -> FeatureMatrix:
    if cfg.num_ceps > cfg.num_filters:
        raise ValueError(f"num_ceps {cfg.num_ceps} exceeds num_filters {cfg.num_filters}")
    logmel = np.log(np.maximum(mel_energies(w, cfg), cfg.log_floor))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.num_ceps]
    return FeatureMatrix(ceps, cfg.frame_shift_ms, cfg.frame_length_ms)


def sliding_cmn(f: FeatureMatrix, window_frames: int = 300) -> FeatureMatrix:
    """Subtract a per-frame mean over a centred window of ``window_frames``.

    Near the utterance edges the window slides inward so that it keeps its
    full width whenever the utterance is long enough; utterances no longer
    than the window are therefore normalised by their global mean.
    """
    if window_frames < 1:
        raise ValueError("window_frames must be >= 1")
    x = f.values
    t_total = x.shape[0]
    width = min(window_frames, t_total)
    t = np.arange(t_total)
    start = np.clip(t - window_frames // 2, 0, t_total - width)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    means = (csum[start + width] - csum[start]) / width
    return f.with_values(x - means)


def vad_mask(f: FeatureMatrix, offset: float = -0.5):
    if f.frames < 1:
        raise DataError("VAD needs at least one frame")
    c0 = f.values[:, 0]
    keep = c0 > c0.mean() + offset
    if not keep.any():
        raise DataError("energy VAD retained no frames; relax the threshold offset")
    return keep


def energy_vad(f: FeatureMatrix, offset: float = -0.5) -> FeatureMatrix:
    """Keep frames whose c0 exceeds the utterance mean c0 plus ``offset``."""
    return f.with_values(f.values[vad_mask(f, offset)])


def compute_features(w: Waveform, cfg: MfccConfig = MfccConfig()) -> FeatureMatrix:
    """Full front-end chain: pre-emphasis, MFCC, sliding CMN, then VAD."""
    feats = frame_mfcc(pre_emphasis(w, cfg.preemph), cfg)
    # speech decision uses raw c0; normalisation sees every frame
    keep = vad_mask(feats, cfg.vad_offset)
    normed = sliding_cmn(feats, cfg.cmn_window)
    return normed.with_values(normed.values[keep])


def read_pcm(path) -> Waveform:
    """Headerless 16-bit little-endian PCM with a ``<path>.meta`` line ``rate=<Hz>``."""
    path = Path(path)
    meta = Path(str(path) + ".meta")
    try:
        line = meta.read_text().strip()
    except FileNotFoundError as exc:
        raise DataError(f"missing sample-rate sidecar {meta}") from exc
    if not line.startswith("rate="):
        raise DataError(f"{meta}: expected 'rate=<Hz>', got {line!r}")
    rate = int(line[len("rate="):])
    samples = np.frombuffer(path.read_bytes(), dtype="<i2").astype(np.float64)
    return Waveform(samples, rate)


def write_pcm(path, w: Waveform):
    path = Path(path)
    pcm = np.clip(np.round(w.samples), -32768, 32767).astype("<i2")
    path.write_bytes(pcm.tobytes())
    Path(str(path) + ".meta").write_text(f"rate={w.sample_rate}\n")


def write_features(path, f: FeatureMatrix):
    """BXM1 matrix plus a ``<path>.meta`` sidecar describing the framing."""
    write_bxm(path, f.values)
    Path(str(path) + ".meta").write_text(
        f"dim={f.dim} shift_ms={f.frame_shift_ms:g} length_ms={f.frame_length_ms:g}\n"
    )


def read_features(path) -> FeatureMatrix:
    values = read_bxm(path)
    meta = Path(str(path) + ".meta")
    shift, length = 10.0, 25.0
    if meta.exists():
        fields = dict(tok.split("=", 1) for tok in meta.read_text().split())
        if int(fields.get("dim", values.shape[1])) != values.shape[1]:
            raise DataError(f"{meta}: dim does not match {path}")
        shift = float(fields.get("shift_ms", shift))
        length = float(fields.get("length_ms", length))
    return FeatureMatrix(values, shift, length)
