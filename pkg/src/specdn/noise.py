"""Low-count training data: log-weighted total counts, Poisson sampling and a
per-event Gaussian point-spread model of a phosphor-screen/CCD detector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ZeroSpectrum
from .spectrum import Spectrum

#: total-count range on a 300 x 300 grid (0.1 to 33.3 counts per pixel)
COUNT_MIN = 9e3
COUNT_MAX = 3e6
REFERENCE_PIXELS = 300 * 300

PERCENTILE = 99.0
SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseConfig:
    count_min: float = COUNT_MIN
    count_max: float = COUNT_MAX
    psf_enabled: bool = False
    psf_sigma_range: tuple = (0.8, 2.0)
    psf_amplitude_range: tuple = (0.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.count_min <= self.count_max):
            raise ConfigError("need 0 < count_min <= count_max")
        if self.psf_enabled:
            lo, hi = self.psf_sigma_range
            if not (0 < lo <= hi):
                raise ConfigError("psf_sigma_range must satisfy 0 < low <= high")
            alo, ahi = self.psf_amplitude_range
            if not (0 <= alo <= ahi):
                raise ConfigError("psf_amplitude_range must satisfy 0 <= low <= high")

    @classmethod
    def for_grid(cls, height: int, width: int, **kwargs) -> "NoiseConfig":
        """Count range rescaled so counts per pixel match the 300 x 300 defaults."""
        f = height * width / REFERENCE_PIXELS
        kwargs.setdefault("count_min", COUNT_MIN * f)
        kwargs.setdefault("count_max", COUNT_MAX * f)
        return cls(**kwargs)


@dataclass
class TrainingPair:
    """Noisy input and clean target on a common scale.

    Before normalization ``noisy`` holds counts and ``clean`` the expected
    counts ``N * P``; after :func:`normalize_pair` both are divided by
    ``scale``.
    """

    noisy: np.ndarray
    clean: np.ndarray
    total_count: float
    scale: float = 1.0

    def __post_init__(self):
        if self.noisy.shape != self.clean.shape:
            raise ValueError(f"shape mismatch {self.noisy.shape} vs {self.clean.shape}")


def sample_log_weighted_count(config: NoiseConfig, rng: np.random.Generator) -> float:
    """Draw N with ln N uniform on [ln count_min, ln count_max]."""
    if config.count_min == config.count_max:
        return float(config.count_min)
    lo, hi = math.log(config.count_min), math.log(config.count_max)
    n = math.exp(rng.uniform(lo, hi))
    # exp(log(x)) can drift one ulp outside the range
    return float(min(max(n, config.count_min), config.count_max))


def sample_poisson_counts(p, n: float, rng: np.random.Generator) -> Spectrum:
    """Independent Poisson draw per pixel with mean ``n * P_ij``."""
    if n < 0:
        raise ValueError("total count must be >= 0")
    probs = p.values if isinstance(p, Spectrum) else np.asarray(p, dtype=np.float64)
    counts = rng.poisson(n * probs).astype(np.float64)
    if isinstance(p, Spectrum):
        return Spectrum(counts, p.energy_axis, p.momentum_axis)
    return Spectrum.from_array(counts)


def _psf_radius(config: NoiseConfig) -> int:
    return int(math.ceil(4.0 * config.psf_sigma_range[1]))


def apply_detector_psf(counts, config: NoiseConfig, rng: np.random.Generator,
                       chunk: int = 65536):
    """Replace every counted event by a Gaussian blob of random width and mass.

    Each blob is sampled on a (2r+1)^2 stencil, r = ceil(4 * sigma_max), and
    renormalized so its mass is exactly the drawn amplitude before any part
    falling off the grid is discarded.  Accepts a :class:`Spectrum` (returns
    one) or a bare array.
    """
    if not config.psf_enabled:
        raise ConfigError("apply_detector_psf called with psf disabled")
    lo, hi = config.psf_sigma_range
    alo, ahi = config.psf_amplitude_range
    if not (0 < lo <= hi) or not (0 <= alo <= ahi):
        raise ConfigError("invalid psf ranges")
    arr = counts.values if isinstance(counts, Spectrum) else np.asarray(counts, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr != np.round(arr)):
        raise ValueError("detector psf expects non-negative integer counts")
    h, w = arr.shape
    r = _psf_radius(config)
    offs = np.arange(-r, r + 1, dtype=np.float64)
    canvas = np.zeros((h + 2 * r) * (w + 2 * r))
    flat_idx = np.flatnonzero(arr)
    events = np.repeat(flat_idx, arr.ravel()[flat_idx].astype(np.int64))
    stride = w + 2 * r
    # stencil offsets into the padded canvas, (2r+1)^2 of them
    stencil = (offs[:, None] * stride + offs[None, :]).astype(np.int64).ravel()
    for start in range(0, events.size, chunk):
        ev = events[start:start + chunk]
        m = ev.size
        sigma = rng.uniform(lo, hi, size=m)
        amp = rng.uniform(alo, ahi, size=m)
        g = np.exp(-0.5 * (offs[None, :] / sigma[:, None]) ** 2)
        g /= g.sum(axis=1, keepdims=True)
        blobs = (amp[:, None, None] * g[:, :, None] * g[:, None, :]).reshape(m, -1)
        centers = (ev // w + r) * stride + (ev % w + r)
        canvas += np.bincount((centers[:, None] + stencil[None, :]).ravel(),
                              weights=blobs.ravel(), minlength=canvas.size)
    out = canvas.reshape(h + 2 * r, w + 2 * r)[r:r + h, r:r + w].copy()
    if isinstance(counts, Spectrum):
        return Spectrum(out, counts.energy_axis, counts.momentum_axis)
    return out


def normalize_pair(pair: TrainingPair) -> TrainingPair:
    """Divide both members by the noisy member's 99th percentile.

    The scale is floored at 1e-12 and recorded in ``scale`` (multiplied into
    any scale already present) so :func:`denormalize_pair` can undo it.
    """
    if not pair.noisy.sum() > 0:
        raise ZeroSpectrum("noisy member has zero total count")
    s = max(float(np.percentile(pair.noisy, PERCENTILE)), SCALE_FLOOR)
    return TrainingPair(pair.noisy / s, pair.clean / s, pair.total_count, pair.scale * s)


def denormalize_pair(pair: TrainingPair) -> TrainingPair:
    s = pair.scale
    return TrainingPair(pair.noisy * s, pair.clean * s, pair.total_count, 1.0)


def input_scale(noisy: np.ndarray) -> float:
    return max(float(np.percentile(noisy, PERCENTILE)), SCALE_FLOOR)


def make_training_pair(p, config: NoiseConfig, rng: np.random.Generator,
                       normalize: bool = True, total_count: float | None = None) -> TrainingPair:
    """Low-count input and clean target drawn from probability map ``p``.

    The target is the expected count map ``N * P``; the input is a Poisson
    draw at the same ``N``, blurred by the detector model when enabled.
    """
    probs = p.values if isinstance(p, Spectrum) else np.asarray(p, dtype=np.float64)
    n = sample_log_weighted_count(config, rng) if total_count is None else float(total_count)
    noisy = sample_poisson_counts(probs, n, rng).values
    if config.psf_enabled:
        noisy = apply_detector_psf(noisy, config, rng)
    pair = TrainingPair(np.array(noisy), n * probs, n)
    return normalize_pair(pair) if normalize else pair


def pair_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for one pair, keyed by (epoch, index, ...)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))
