"""Noise-free band-structure-like probability maps.

Each band contributes ``amplitude * L(E - eps(k); gamma) * f(E)`` where ``L`` is
a peak-normalized Lorentzian in energy and ``f`` the Fermi occupation.  A
constant background is added after the Fermi cutoff, then the map is
normalized to unit sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfig
from .spectrum import AxisInfo, ProbabilityMap

DISPERSION_KINDS = ("parabolic", "cosine", "kink")


@dataclass(frozen=True)
class BandSpec:
    """One band.

    ``kind`` selects the dispersion and which entries of ``params`` are read:

    * ``parabolic``: ``k0``, ``curvature``, ``offset``;
      eps = offset + curvature * (k - k0)**2
    * ``cosine``: ``amplitude``, ``period``, ``offset``;
      eps = offset + amplitude * cos(2 pi k / period)
    * ``kink``: ``k_kink``, ``kink_energy``, ``slope_near``, ``slope_deep``;
      piecewise linear, ``slope_near`` for k >= k_kink and ``slope_deep`` below.
    """

    kind: str
    params: dict
    gamma: float
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in DISPERSION_KINDS:
            raise DegenerateConfig(f"unknown dispersion kind {self.kind!r}")
        if not self.gamma > 0:
            raise DegenerateConfig("band linewidth gamma must be > 0")
        if not self.amplitude > 0:
            raise DegenerateConfig("band amplitude must be > 0")
        required = {"parabolic": ("k0", "curvature", "offset"),
                    "cosine": ("amplitude", "period", "offset"),
                    "kink": ("k_kink", "kink_energy", "slope_near", "slope_deep")}[self.kind]
        missing = [r for r in required if r not in self.params]
        if missing:
            raise DegenerateConfig(f"{self.kind} band is missing {missing}")
        unknown = set(self.params) - set(required)
        if unknown:
            raise DegenerateConfig(f"{self.kind} band got unknown parameters {sorted(unknown)}")

    def dispersion(self, k):
        k = np.asarray(k, dtype=np.float64)
        p = self.params
        if self.kind == "parabolic":
            return p["offset"] + p["curvature"] * (k - p["k0"]) ** 2
        if self.kind == "cosine":
            return p["offset"] + p["amplitude"] * np.cos(2 * np.pi * k / p["period"])
        dk = k - p["k_kink"]
        return p["kink_energy"] + np.where(dk >= 0, p["slope_near"], p["slope_deep"]) * dk

    def velocity(self, k):
        """d eps / dk."""
        k = np.asarray(k, dtype=np.float64)
        p = self.params
        if self.kind == "parabolic":
            return 2 * p["curvature"] * (k - p["k0"])
        if self.kind == "cosine":
            w = 2 * np.pi / p["period"]
            return -p["amplitude"] * w * np.sin(w * k)
        return np.where(k - p["k_kink"] >= 0, p["slope_near"], p["slope_deep"])


@dataclass(frozen=True)
class SynthConfig:
    bands: tuple
    height: int = 64
    width: int = 64
    energy_range: tuple = (-0.3, 0.1)
    momentum_range: tuple = (-0.5, 0.5)
    temperature: float = 0.0
    fermi_level: float = 0.0
    background_level: float = 0.0
    hybridization_gap: tuple | None = None  # (band_a, band_b, gap)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(self.bands))
        if not self.bands:
            raise DegenerateConfig("at least one band is required")
        if self.background_level < 0:
            raise DegenerateConfig("background_level must be >= 0")
        if self.temperature < 0:
            raise DegenerateConfig("temperature must be >= 0")
        if self.hybridization_gap is not None:
            a, b, gap = self.hybridization_gap
            n = len(self.bands)
            if not (0 <= a < n and 0 <= b < n and a != b):
                raise DegenerateConfig("hybridization band indices out of range")
            if gap < 0:
                raise DegenerateConfig("hybridization gap must be >= 0")

    @property
    def energy_axis(self) -> AxisInfo:
        return AxisInfo("energy", self.energy_range[0], self.energy_range[1], self.height)

    @property
    def momentum_axis(self) -> AxisInfo:
        return AxisInfo("momentum", self.momentum_range[0], self.momentum_range[1], self.width)


def fermi_weight(energy, fermi_level, temperature):
    """Fermi-Dirac occupation; a step (0.5 at the edge) when ``temperature == 0``."""
    energy = np.asarray(energy, dtype=np.float64)
    x = energy - fermi_level
    if temperature == 0:
        out = np.where(x < 0, 1.0, np.where(x > 0, 0.0, 0.5))
    else:
        # 0.5 * (1 - tanh(x / 2T)) is the overflow-free form of 1 / (1 + exp(x / T))
        out = 0.5 * (1.0 - np.tanh(x / (2.0 * temperature)))
    return float(out) if out.ndim == 0 else out


def _lorentzian(x, gamma):
    return gamma ** 2 / (x ** 2 + gamma ** 2)


def band_components(config: SynthConfig, k):
    """Per-band (eps(k), gamma(k), amplitude(k)) on momentum samples ``k``.

    A hybridization gap replaces the chosen pair by the two eigen-branches of
    the 2x2 mixing problem; linewidth and amplitude are mixed by orbital weight.
    """
    comps = [(b.dispersion(k), np.full_like(k, b.gamma), np.full_like(k, b.amplitude))
             for b in config.bands]
    if config.hybridization_gap is not None:
        a, b, gap = config.hybridization_gap
        ea, ga, aa = comps[a]
        eb, gb, ab = comps[b]
        mean = 0.5 * (ea + eb)
        half = 0.5 * (ea - eb)
        root = np.sqrt(half ** 2 + (0.5 * gap) ** 2)
        # weight of band ``a`` character in the upper branch
        with np.errstate(invalid="ignore", divide="ignore"):
            wa = np.where(root > 0, 0.5 * (1 + half / np.where(root > 0, root, 1)), 0.5)
        comps[a] = (mean + root, wa * ga + (1 - wa) * gb, wa * aa + (1 - wa) * ab)
        comps[b] = (mean - root, (1 - wa) * ga + wa * gb, (1 - wa) * aa + wa * ab)
    return comps


def synth_intensity(config: SynthConfig) -> np.ndarray:
    """Un-normalized intensity grid (rows = energy, columns = momentum)."""
    e = config.energy_axis.values[:, None]
    k = config.momentum_axis.values
    occ = fermi_weight(config.energy_axis.values, config.fermi_level, config.temperature)
    occ = np.atleast_1d(occ)[:, None]
    total = np.zeros((config.height, config.width))
    for eps, gamma, amp in band_components(config, k):
        total += amp[None, :] * _lorentzian(e - eps[None, :], gamma[None, :])
    return total * occ + config.background_level


def synth_spectrum(config: SynthConfig) -> ProbabilityMap:
    intensity = synth_intensity(config)
    s = intensity.sum()
    if not s > 0:
        raise DegenerateConfig("configuration produces an all-zero spectrum")
    return ProbabilityMap(intensity / s, config.energy_axis, config.momentum_axis)


def random_synth_config(rng: np.random.Generator, height=64, width=64,
                        energy_range=(-0.3, 0.1), momentum_range=(-0.5, 0.5),
                        max_bands=3, max_background=0.05) -> SynthConfig:
    """Draw a random band structure for training-set generation.

    Linewidths span roughly 1 to 4 energy pixels; the Fermi level sits in the
    upper quarter of the energy window.
    """
    e0, e1 = energy_range
    k0, k1 = momentum_range
    de = (e1 - e0) / (height - 1)
    span_e, span_k = e1 - e0, k1 - k0
    fermi = e1 - rng.uniform(0.1, 0.3) * span_e
    bands = []
    for _ in range(int(rng.integers(1, max_bands + 1))):
        kind = DISPERSION_KINDS[int(rng.integers(0, 3))]
        gamma = float(rng.uniform(1.0, 4.0) * de)
        amp = float(rng.uniform(0.5, 1.5))
        if kind == "parabolic":
            # bottom (or top) somewhere in the window, crossing a good part of it
            sign = rng.choice([-1.0, 1.0])
            offset = fermi - sign * rng.uniform(0.3, 0.8) * span_e
            curvature = sign * rng.uniform(1.0, 4.0) * span_e / span_k ** 2
            params = {"k0": float(rng.uniform(k0 + 0.3 * span_k, k1 - 0.3 * span_k)),
                      "curvature": float(curvature), "offset": float(offset)}
        elif kind == "cosine":
            params = {"amplitude": float(rng.uniform(0.2, 0.5) * span_e),
                      "period": float(rng.uniform(0.6, 1.5) * span_k),
                      "offset": float(rng.uniform(e0 + 0.3 * span_e, fermi))}
        else:
            slope = rng.uniform(0.5, 2.0) * span_e / span_k * rng.choice([-1.0, 1.0])
            params = {"k_kink": float(rng.uniform(k0 + 0.2 * span_k, k1 - 0.2 * span_k)),
                      "kink_energy": float(rng.uniform(e0 + 0.3 * span_e, fermi - 0.05 * span_e)),
                      "slope_near": float(slope),
                      "slope_deep": float(slope * rng.uniform(1.5, 3.0))}
        bands.append(BandSpec(kind, params, gamma, amp))
    hyb = None
    if len(bands) >= 2 and rng.uniform() < 0.3:
        hyb = (0, 1, float(rng.uniform(2.0, 6.0) * de))
    return SynthConfig(
        bands=tuple(bands), height=height, width=width,
        energy_range=tuple(energy_range), momentum_range=tuple(momentum_range),
        temperature=float(rng.uniform(0.5, 2.0) * de), fermi_level=float(fermi),
        background_level=float(rng.uniform(0.0, max_background)),
        hybridization_gap=hyb, seed=int(rng.integers(0, 2 ** 63)))


def random_clean_maps(n: int, seed: int, height=64, width=64, **kwargs) -> list[ProbabilityMap]:
    """``n`` independent random ground-truth maps, one rng stream per map."""
    streams = np.random.SeedSequence(seed).spawn(n)
    return [synth_spectrum(random_synth_config(np.random.default_rng(ss), height, width, **kwargs))
            for ss in streams]


def mdc_hwhm_expected(band: BandSpec, k) -> float:
    """Momentum half-width of a band's MDC: gamma / |d eps / dk|."""
    return float(band.gamma / abs(band.velocity(k)))
