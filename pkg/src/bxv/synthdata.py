"""Seeded synthetic speaker corpora with per-domain channel distortion.

Each speaker is a mean vector drawn from ``N(0, speaker_spread**2 I)``. An
utterance is a run of frames ``mean + N(0, noise_std**2 I)`` passed through
the affine channel ``x * scale + offset`` of the profile it was recorded on.
Two domains differ only in their channel profile and in having disjoint
speakers, which is enough to reproduce a train/eval channel mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from bxv.errors import ConfigError
from bxv.numkernel import RngStream
from bxv.trainer import Corpus, Utterance


def default_profiles(feature_dim):
    signs = np.where(np.arange(feature_dim) % 2 == 0, 1.0, -1.0)
    return (
        (np.zeros(feature_dim), np.ones(feature_dim)),
        (0.75 * signs, np.full(feature_dim, 1.25)),
    )


@dataclass(frozen=True)
class SynthSpec:
    num_speakers: int = 8
    utts_per_speaker: int = 10
    min_frames: int = 200
    max_frames: int = 300
    feature_dim: int = 10
    speaker_spread: float = 1.0
    noise_std: float = 2.0
    channel_profiles: tuple = field(default=None)
    seed: int = 0

    def __post_init__(self):
        if self.channel_profiles is None:
            object.__setattr__(self, "channel_profiles", default_profiles(self.feature_dim))
        profiles = []
        for k, (offset, scale) in enumerate(self.channel_profiles):
            offset = np.broadcast_to(np.asarray(offset, dtype=np.float64), (self.feature_dim,)).copy()
            scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (self.feature_dim,)).copy()
            if np.any(scale <= 0):
                raise ConfigError(f"channel profile {k}: scale must be positive")
            profiles.append((offset, scale))
        object.__setattr__(self, "channel_profiles", tuple(profiles))
        if self.num_speakers < 1 or self.utts_per_speaker < 1:
            raise ConfigError("num_speakers and utts_per_speaker must be >= 1")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError(f"need 1 <= min_frames <= max_frames, got {self.min_frames}, {self.max_frames}")
        if self.speaker_spread <= 0:
            raise ConfigError("speaker_spread must be positive")
        if self.noise_std <= 0:
            raise ConfigError("noise_std must be positive")
        if not self.channel_profiles:
            raise ConfigError("at least one channel profile is required")

    def __eq__(self, other):
        if not isinstance(other, SynthSpec):
            return NotImplemented
        return self.describe() == other.describe()

    __hash__ = None

    def describe(self):
        """Stable text rendering, used for equality and run manifests."""
        fields = [f"{k}={getattr(self, k)}" for k in
                  ("num_speakers", "utts_per_speaker", "min_frames", "max_frames", "feature_dim",
                   "speaker_spread", "noise_std", "seed")]
        for k, (o, s) in enumerate(self.channel_profiles):
            fields.append(f"profile{k}_offset={' '.join(repr(float(v)) for v in o)}")
            fields.append(f"profile{k}_scale={' '.join(repr(float(v)) for v in s)}")
        return "\n".join(fields)


def generate_corpus(spec: SynthSpec, profiles=None, prefix="spk", stream=0) -> Corpus:
    """Corpus whose utterances are assigned uniformly to ``profiles`` (default: all).

    ``stream`` selects an independent random stream for the same spec, so
    different streams give different speakers.
    """
    if profiles is None:
        profiles = range(len(spec.channel_profiles))
    profiles = list(profiles)
    for p in profiles:
        if not 0 <= p < len(spec.channel_profiles):
            raise ConfigError(f"unknown channel profile {p}")
    rng = RngStream(spec.seed).split(stream)
    means = rng.normal((spec.num_speakers, spec.feature_dim)) * spec.speaker_spread
    speakers = [f"{prefix}-s{i:03d}" for i in range(spec.num_speakers)]
    utts = []
    for i, spk in enumerate(speakers):
        for j in range(spec.utts_per_speaker):
            frames = int(rng.integers(spec.min_frames, spec.max_frames))
            profile = profiles[int(rng.integers(0, len(profiles) - 1))]
            offset, scale = spec.channel_profiles[profile]
            x = means[i] + spec.noise_std * rng.normal((frames, spec.feature_dim))
            utts.append(Utterance(f"{spk}-u{j:03d}", x * scale + offset, i))
    return Corpus(utts, speakers)


def make_domain_pair(spec: SynthSpec, tag=""):
    """Two corpora with disjoint speakers: A on profile 0, B on profile 1."""
    if len(spec.channel_profiles) < 2:
        raise ConfigError("a domain pair needs at least two channel profiles")
    suffix = f"-{tag}" if tag else ""
    a = generate_corpus(spec, [0], prefix=f"A{suffix}", stream=1)
    b = generate_corpus(spec, [1], prefix=f"B{suffix}", stream=2)
    return a, b


def with_seed(spec: SynthSpec, seed: int) -> SynthSpec:
    return replace(spec, seed=seed)
