"""Scripted desk-scale workflows: training data, held-out test spectra and the
figure-by-figure studies emitted by ``specdn experiment figs``."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import gaussian_smooth, nearest_row, second_derivative, trace_dispersion, \
    trace_rms_error
from .nn import Network, save_network
from .noise import NoiseConfig, make_training_pair, pair_rng, sample_poisson_counts
from .spectrum import Spectrum, save_spectrum
from .synth import BandSpec, SynthConfig, random_clean_maps, synth_spectrum
from .train import (TrainConfig, denoise_array, depth_ablation, loss_study, psf_study,
                    train_model)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskSettings:
    """Budget of one desk-scale reproduction.

    The learning-rate schedule keeps the three-plateau shape of the full
    150-epoch run, compressed to ``epochs``.
    """

    grid: int = 64
    depth: int = 5
    train_maps: int = 8
    fan_out: int = 25
    val_maps: int = 4
    val_fan_out: int = 5
    epochs: int = 30
    lr_decay_every: int = 10
    batch_size: int = 8
    map_seed: int = 100
    val_seed: int = 200
    study_grid: int = 32
    study_epochs: int = 30
    study_decay_every: int = 10
    ablation_depths: tuple = (2, 5, 10)
    seeds: tuple = (0, 1, 2)

    @property
    def pairs_per_epoch(self) -> int:
        return self.train_maps * self.fan_out

    def train_config(self, seed=0, **kw) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr_decay_every=self.lr_decay_every,
                           batch_size=self.batch_size, fan_out=self.fan_out, seed=seed, **kw)

    def study_config(self, seed=0, **kw) -> TrainConfig:
        return TrainConfig(epochs=self.study_epochs, lr_decay_every=self.study_decay_every,
                           batch_size=self.batch_size, fan_out=self.fan_out, seed=seed, **kw)


PRESETS = {
    "desk": DeskSettings(),
    "smoke": DeskSettings(grid=32, depth=2, train_maps=2, fan_out=2, val_maps=2, val_fan_out=1,
                          epochs=2, lr_decay_every=1, study_grid=32, study_epochs=1,
                          study_decay_every=1, ablation_depths=(1, 2), seeds=(0,)),
}


def noise_for(grid: int, **kw) -> NoiseConfig:
    return NoiseConfig.for_grid(grid, grid, **kw)


def training_maps(settings: DeskSettings, grid=None):
    g = grid or settings.grid
    return random_clean_maps(settings.train_maps, settings.map_seed, g, g)


def validation_pairs(settings: DeskSettings, grid=None, psf=False, seed_offset=0):
    """Fixed held-out pairs from maps disjoint from the training maps."""
    g = grid or settings.grid
    maps = random_clean_maps(settings.val_maps, settings.val_seed, g, g)
    ncfg = noise_for(g, psf_enabled=psf)
    return [make_training_pair(m, ncfg, pair_rng(settings.val_seed + seed_offset, 7, i, j))
            for i, m in enumerate(maps) for j in range(settings.val_fan_out)]


# -- held-out test spectra --------------------------------------------------

KINK = {"k_kink": 0.0, "kink_energy": -0.15, "slope_near": 0.8, "slope_deep": 1.6}
LOW_DENSITY = 9e3 / (300 * 300)   # counts per pixel at the low end of the training range


def kink_config(grid: int = 64, gamma_px: float = 2.0, background=0.02) -> SynthConfig:
    """Single linear band with a slope change, the line-shape fiducial."""
    de = 0.4 / (grid - 1)
    band = BandSpec("kink", dict(KINK), gamma=gamma_px * de)
    return SynthConfig(bands=(band,), height=grid, width=grid, temperature=de,
                       fermi_level=0.0, background_level=background)


def kink_truth(energies):
    e = np.asarray(energies, dtype=np.float64)
    de = e - KINK["kink_energy"]
    return KINK["k_kink"] + np.where(de >= 0, de / KINK["slope_near"], de / KINK["slope_deep"])


def gap_config(grid: int = 64) -> SynthConfig:
    """Two crossing bands with a hybridization gap (the second-derivative showcase)."""
    de = 0.4 / (grid - 1)
    b1 = BandSpec("parabolic", {"k0": 0.0, "curvature": 1.2, "offset": -0.25}, gamma=2 * de)
    b2 = BandSpec("parabolic", {"k0": 0.0, "curvature": -0.6, "offset": -0.02}, gamma=2 * de,
                  amplitude=0.8)
    return SynthConfig(bands=(b1, b2), height=grid, width=grid, temperature=de,
                       fermi_level=0.0, background_level=0.01, hybridization_gap=(0, 1, 4 * de))


def trace_window(config: SynthConfig):
    """Energies below the Fermi edge for the kink trace: ``(from, to, step)``."""
    ax = config.energy_axis
    return ax.minimum + 3 * ax.step, config.fermi_level - 3 * ax.step, ax.step


def trace_errors(spectrum: Spectrum, config: SynthConfig):
    """Trace the kink band and score it against the analytic dispersion (pixels)."""
    e_from, e_to, step = trace_window(config)
    tr = trace_dispersion(spectrum, (e_from, e_to), step)
    rows = [nearest_row(spectrum, e) for e, _ in tr]
    truth = kink_truth(spectrum.energy_axis.values[rows])
    ax = spectrum.momentum_axis
    rms = trace_rms_error(tr, truth, ax.step, lost_penalty=ax.sample_count / 2,
                          window=(ax.minimum, ax.maximum))
    return rms, tr, truth


def denoise_spectrum(net: Network, s: Spectrum) -> Spectrum:
    out = denoise_array(net, s.values)
    return Spectrum(np.maximum(out, 0.0), s.energy_axis, s.momentum_axis)


# -- figure artifacts -------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def fig2_panels(net: Network, settings: DeskSettings, out_dir: Path, seed=0, plots=True):
    """LC / LC+SM / LC+NN / HC panels and their momentum second derivatives."""
    cfg = gap_config(settings.grid)
    p = synth_spectrum(cfg)
    n_lc = 4 * LOW_DENSITY * settings.grid ** 2
    rng = np.random.default_rng(seed)
    lc = sample_poisson_counts(p, n_lc, rng)
    hc = sample_poisson_counts(p, 100 * n_lc, rng)
    panels = {"LC": lc, "LC+SM": gaussian_smooth(lc, (1.5, 1.5)),
              "LC+NN": denoise_spectrum(net, lc), "HC": hc}
    d2 = {k: second_derivative(v, "momentum", 1.0) for k, v in panels.items()}
    files = []
    for name, s in panels.items():
        tag = name.replace("+", "_").lower()
        save_spectrum(s, out_dir / f"fig2_{tag}.spx")
        save_spectrum(d2[name], out_dir / f"fig2_{tag}_d2.spx")
        files += [out_dir / f"fig2_{tag}.spx", out_dir / f"fig2_{tag}_d2.spx"]
    if plots:
        from .plotting import plot_panels
        plot_panels(list(panels.values()), out_dir / "fig2_panels.png", list(panels),
                    list(d2.values()))
        files.append(out_dir / "fig2_panels.png")
    return files


def fig3_traces(net: Network, settings: DeskSettings, out_dir: Path, seed=0, plots=True):
    """MDC fits on LC / LC+NN / HC of the kink band."""
    cfg = kink_config(settings.grid)
    p = synth_spectrum(cfg)
    n_lc = LOW_DENSITY * settings.grid ** 2
    rng = np.random.default_rng(seed)
    lc = sample_poisson_counts(p, n_lc, rng)
    hc = sample_poisson_counts(p, 100 * n_lc, rng)
    specs = {"LC": lc, "LC+NN": denoise_spectrum(net, lc), "HC": hc}
    rows, traces, summary = [], {}, []
    for name, s in specs.items():
        rms, tr, truth = trace_errors(s, cfg)
        traces[name] = tr
        summary.append((name, rms))
        for (e, r), kt in zip(tr, truth):
            rows.append((name, e, r.peak_position, r.width, r.amplitude, int(r.converged), kt))
    path = out_dir / "fig3_mdc_fits.csv"
    _write_csv(path, ["method", "energy", "peak_position", "width", "amplitude", "converged",
                      "true_position"], rows)
    spath = out_dir / "fig3_summary.csv"
    _write_csv(spath, ["method", "rms_error_px"], summary)
    files = [path, spath]
    if plots:
        from .plotting import plot_traces
        e = [t[0] for t in traces["HC"]]
        plot_traces(traces, out_dir / "fig3_traces.png", truth=(e, kink_truth(e)))
        files.append(out_dir / "fig3_traces.png")
    return files


def fig4b_depth(settings: DeskSettings, out_dir: Path, plots=True):
    g = settings.study_grid
    rows = depth_ablation(settings.ablation_depths, training_maps(settings, g),
                          validation_pairs(settings, g), noise_for(g), settings.study_config(),
                          seeds=settings.seeds)
    path = out_dir / "fig4b_depth.csv"
    _write_csv(path, ["depth", "mean_val_loss"] + [f"seed{s}" for s in settings.seeds],
               [(d, m, *per) for d, m, per in rows])
    files = [path]
    if plots:
        from .plotting import plot_table
        plot_table([r[0] for r in rows], {"validation loss": [r[1] for r in rows]},
                   out_dir / "fig4b_depth.png", "depth", "validation loss")
        files.append(out_dir / "fig4b_depth.png")
    return files, rows


def fig6b_psf(settings: DeskSettings, out_dir: Path, plots=True):
    g = settings.study_grid
    rows = psf_study(training_maps(settings, g), validation_pairs(settings, g, psf=True),
                     noise_for(g), settings.study_config(), settings.depth, settings.seeds)
    path = out_dir / "fig6b_psf.csv"
    _write_csv(path, ["psf_in_training", "seed", "val_loss_on_psf_data"],
               [(int(p), s, v) for p, s, v in rows])
    files = [path]
    if plots:
        from .plotting import plot_table
        means = {("with PSF" if p else "without PSF"): np.mean([v for q, _, v in rows if q == p])
                 for p in (False, True)}
        plot_table(None, means, out_dir / "fig6b_psf.png", "training data",
                   "validation loss", kind="bar")
        files.append(out_dir / "fig6b_psf.png")
    return files, rows


def fig7_loss(settings: DeskSettings, out_dir: Path, plots=True):
    g = settings.study_grid
    rows = loss_study(training_maps(settings, g), validation_pairs(settings, g), noise_for(g),
                      settings.study_config(), settings.depth, settings.seeds)
    path = out_dir / "fig7_loss.csv"
    _write_csv(path, ["loss", "seed", "val_ms_ssim", "val_mixed_loss"], rows)
    files = [path]
    if plots:
        from .plotting import plot_table
        means = {k: np.mean([r[2] for r in rows if r[0] == k]) for k in ("mixed", "mse")}
        plot_table(None, means, out_dir / "fig7_loss.png", "training loss",
                   "validation MS-SSIM", kind="bar")
        files.append(out_dir / "fig7_loss.png")
    return files, rows


def train_reference(settings: DeskSettings, seed=0, checkpoint_path=None, progress=None):
    """The main desk-scale run: returns (report, validation pairs)."""
    val = validation_pairs(settings)
    rep = train_model(training_maps(settings), noise_for(settings.grid),
                      settings.train_config(seed), val, depth=settings.depth,
                      checkpoint_path=checkpoint_path, progress=progress)
    return rep, val


def run_figs(settings: DeskSettings, out_dir, net: Network | None = None, plots=True,
             seed=0) -> dict:
    """Run every study and write its artifacts; returns ``{figure: [paths]}``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    timings = []
    t0 = time.perf_counter()
    if net is None:
        rep, _ = train_reference(settings, seed, checkpoint_path=out_dir / "model.dnw")
        net = rep.network
        hist = out_dir / "fig8_history.csv"
        rep.write_history(hist)
        artifacts["fig8"] = [hist, out_dir / "model.dnw"]
        if plots:
            from .plotting import plot_table
            plot_table(np.arange(len(rep.train_loss)),
                       {"train": rep.train_loss, "validation": rep.val_loss},
                       out_dir / "fig8_history.png", "epoch", "loss")
            artifacts["fig8"].append(out_dir / "fig8_history.png")
    else:
        save_network(net, out_dir / "model.dnw")
        artifacts["fig8"] = [out_dir / "model.dnw"]
    timings.append(("fig8", time.perf_counter() - t0))
    steps = [("fig2", lambda: fig2_panels(net, settings, out_dir, seed, plots)),
             ("fig3", lambda: fig3_traces(net, settings, out_dir, seed, plots)),
             ("fig4b", lambda: fig4b_depth(settings, out_dir, plots)[0]),
             ("fig6b", lambda: fig6b_psf(settings, out_dir, plots)[0]),
             ("fig7", lambda: fig7_loss(settings, out_dir, plots)[0])]
    for name, step in steps:
        t0 = time.perf_counter()
        artifacts[name] = step()
        timings.append((name, time.perf_counter() - t0))
        log.info("%s done in %.1f s", name, timings[-1][1])
    tpath = out_dir / "timings.csv"
    _write_csv(tpath, ["figure", "seconds"], timings)
    artifacts["timings"] = [tpath]
    return artifacts

