"""``specdn`` command-line entry point.

Exit status: 0 success, 2 usage/config error, 3 data or format error,
4 training divergence.  Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import errors
from .analysis import (Mdc, extract_mdc, fit_mdc_lorentzian, gaussian_smooth, second_derivative,
                       trace_dispersion)
from .config import (TRAIN_KEYS, as_pair, load_synth_config, load_train_settings, parse_count,
                     read_config, train_settings_from_dict)
from .losses import LossSpec
from .nn import load_network
from .noise import (NoiseConfig, apply_detector_psf, make_training_pair, pair_rng,
                    sample_log_weighted_count, sample_poisson_counts)
from .spectrum import Spectrum, load_spectrum, normalize_to_probability, save_spectrum
from .synth import random_clean_maps, synth_spectrum
from .train import denoise_array, depth_ablation, train_model

log = logging.getLogger("specdn")

USAGE, DATA, DIVERGENCE = 2, 3, 4


class UsageError(errors.SpecdnError):
    pass


def _status_for(exc: BaseException) -> int:
    if isinstance(exc, errors.DivergenceDetected):
        return DIVERGENCE
    if isinstance(exc, (UsageError, errors.ConfigError)):
        return USAGE
    return DATA


def _common(p: argparse.ArgumentParser, out_required=False):
    p.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=out_required, help="output path")
    p.add_argument("--quiet", action="store_true")


def _pair_arg(text):
    try:
        return as_pair(text)
    except errors.ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _sigma_arg(text):
    parts = text.split(",")
    try:
        vals = [float(x) for x in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma {text!r}")
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) == 2:
        return tuple(vals)
    raise argparse.ArgumentTypeError("sigma is 's' or 'energy,momentum'")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specdn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a noise-free probability map")
    _common(p, out_required=True)

    p = sub.add_parser("corrupt", help="Poisson-sample (and optionally blur) a spectrum")
    _common(p, out_required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--count", required=True, help="N or min:max (log-uniform)")
    p.add_argument("--psf", choices=("on", "off"), default="off")
    p.add_argument("--psf-sigma", type=_pair_arg, default=(0.8, 2.0))
    p.add_argument("--psf-amplitude", type=_pair_arg, default=(0.5, 1.5))

    p = sub.add_parser("train", help="train a denoiser on synthetic maps")
    _common(p, out_required=True)
    p.add_argument("--data", nargs="*", default=(), help="SPX1 clean maps (default: synthetic)")
    p.add_argument("--history", help="loss history CSV (default: next to --out)")

    p = sub.add_parser("denoise", help="apply a checkpoint to a spectrum")
    _common(p, out_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="inp", required=True)

    p = sub.add_parser("smooth", help="Gaussian smoothing baseline")
    _common(p, out_required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--sigma", type=_sigma_arg, required=True)

    p = sub.add_parser("d2", help="second-derivative map")
    _common(p, out_required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--axis", choices=("energy", "momentum"), default="momentum")
    p.add_argument("--presmooth", type=_sigma_arg, default=(0.0, 0.0))

    p = sub.add_parser("mdcfit", help="fit one MDC with a Lorentzian")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--energy", type=float, required=True)
    p.add_argument("--window", type=_pair_arg)

    p = sub.add_parser("trace", help="MDC fits over an energy range")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--from", dest="e_from", type=float, required=True)
    p.add_argument("--to", dest="e_to", type=float, required=True)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--window", type=_pair_arg)

    p = sub.add_parser("ablate", help="depth ablation table")
    _common(p, out_required=True)
    p.add_argument("--depths", default="2,5,10")
    p.add_argument("--seeds", type=int, default=3)

    p = sub.add_parser("experiment", help="scripted desk-scale figure studies")
    _common(p, out_required=True)
    p.add_argument("what", choices=("figs",))
    p.add_argument("--scale", choices=("desk", "smoke"), default="desk")
    p.add_argument("--checkpoint", help="reuse a trained model instead of training one")
    p.add_argument("--no-plots", action="store_true", help="CSV/SPX1 only, no PNGs")
    return ap


# -- commands --------------------------------------------------------------

def _cmd_synth(args):
    if not args.config:
        raise UsageError("synth needs --config")
    cfg = load_synth_config(args.config)
    save_spectrum(synth_spectrum(cfg), args.out)


def _cmd_corrupt(args):
    s = load_spectrum(args.inp)
    rng = np.random.default_rng(args.seed)
    count = parse_count(args.count)
    psf = args.psf == "on"
    try:
        if isinstance(count, tuple):
            ncfg = NoiseConfig(count[0], count[1], psf, args.psf_sigma, args.psf_amplitude)
            n = sample_log_weighted_count(ncfg, rng)
        else:
            ncfg = NoiseConfig(1.0, 1.0, psf, args.psf_sigma, args.psf_amplitude)
            n = count
    except ValueError as exc:
        raise errors.ConfigError(str(exc)) from exc
    if n == 0:
        out = Spectrum(np.zeros(s.shape), s.energy_axis, s.momentum_axis)
    else:
        out = sample_poisson_counts(normalize_to_probability(s), n, rng)
        if psf:
            out = apply_detector_psf(out, ncfg, rng)
    save_spectrum(out, args.out)


def _cmd_train(args):
    if not args.config:
        raise UsageError("train needs --config")
    raw = read_config(args.config, TRAIN_KEYS)
    tcfg, nkw, run = train_settings_from_dict(raw)
    if "seed" not in raw:
        tcfg = replace(tcfg, seed=args.seed)
    grid = run.get("grid", 64)
    if args.data:
        maps = [normalize_to_probability(load_spectrum(p)) for p in args.data]
        grid = maps[0].shape[0]
    else:
        maps = random_clean_maps(run.get("train_maps", 8), run.get("map_seed", tcfg.seed + 100),
                                 grid, grid)
    h, w = maps[0].shape
    ncfg = NoiseConfig.for_grid(h, w, **nkw)
    vseed = run.get("val_seed", tcfg.seed + 200)
    vmaps = random_clean_maps(run.get("val_maps", 4), vseed, h, w)
    val = [make_training_pair(m, ncfg, pair_rng(vseed, 7, i, j))
           for i, m in enumerate(vmaps) for j in range(run.get("val_fan_out", 5))]
    spec = LossSpec(alpha=run.get("alpha", 0.7))
    out = Path(args.out)
    history = Path(args.history) if args.history else out.with_suffix(".csv")

    def progress(epoch, rep):
        if not args.quiet:
            print(f"epoch {epoch} train {rep.train_loss[-1]:.5f} val {rep.val_loss[-1]:.5f}",
                  file=sys.stderr)

    try:
        rep = train_model(maps, ncfg, tcfg, val, depth=run.get("depth", 20), loss_spec=spec,
                          checkpoint_path=out, init_seed=run.get("init_seed"), progress=progress)
    except errors.DivergenceDetected as exc:
        if exc.report is not None:
            exc.report.write_history(history)
        raise
    rep.write_history(history)


def _cmd_denoise(args):
    net = load_network(args.checkpoint)
    s = load_spectrum(args.inp)
    out = denoise_array(net, s.values)
    save_spectrum(s.with_values(out), args.out)


def _cmd_smooth(args):
    save_spectrum(gaussian_smooth(load_spectrum(args.inp), args.sigma), args.out)


def _cmd_d2(args):
    s = load_spectrum(args.inp)
    save_spectrum(second_derivative(s, args.axis, args.presmooth), args.out)


FIT_HEADER = ["energy", "peak_position", "width", "amplitude", "offset", "slope",
              "residual_norm", "converged"]


def _fit_row(energy, r):
    return [repr(float(energy)), repr(r.peak_position), repr(r.width), repr(r.amplitude),
            repr(r.background[0]), repr(r.background[1]), repr(r.residual_norm),
            int(r.converged)]


@contextlib.contextmanager
def _csv_out(path):
    if path:
        fh = open(path, "w", newline="")
        try:
            yield csv.writer(fh)
        finally:
            fh.close()
    else:
        yield csv.writer(sys.stdout)


def _cmd_mdcfit(args):
    s = load_spectrum(args.inp)
    mdc = extract_mdc(s, args.energy)
    if args.window:
        m = (mdc.momentum >= args.window[0]) & (mdc.momentum <= args.window[1])
        mdc = Mdc(mdc.momentum[m], mdc.intensity[m], mdc.energy, mdc.row)
    r = fit_mdc_lorentzian(mdc)
    with _csv_out(args.out) as w:
        w.writerow(FIT_HEADER)
        w.writerow(_fit_row(mdc.energy, r))


def _cmd_trace(args):
    s = load_spectrum(args.inp)
    tr = trace_dispersion(s, (args.e_from, args.e_to), args.step, momentum_window=args.window)
    with _csv_out(args.out) as w:
        w.writerow(FIT_HEADER)
        for e, r in tr:
            w.writerow(_fit_row(e, r))


def _cmd_ablate(args):
    from .experiment import PRESETS, noise_for, training_maps, validation_pairs
    try:
        depths = [int(d) for d in args.depths.split(",") if d.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --depths {args.depths!r}") from exc
    if not depths or args.seeds < 1:
        raise UsageError("need at least one depth and one seed")
    settings = PRESETS["desk"]
    tcfg = settings.study_config()
    if args.config:
        tcfg, _, run = load_train_settings(args.config)
        settings = replace(settings, study_grid=run.get("grid", settings.study_grid))
    g = settings.study_grid
    seeds = [args.seed + i for i in range(args.seeds)]
    rows = depth_ablation(depths, training_maps(settings, g), validation_pairs(settings, g),
                          noise_for(g), tcfg, seeds=seeds)
    with _csv_out(args.out) as w:
        w.writerow(["depth", "mean_val_loss"] + [f"seed{s}" for s in seeds])
        for d, m, per in rows:
            w.writerow([d, repr(m)] + [repr(v) for v in per])


def _cmd_experiment(args):
    from .experiment import PRESETS, run_figs
    settings = PRESETS[args.scale]
    net = load_network(args.checkpoint) if args.checkpoint else None
    arts = run_figs(settings, args.out, net=net, plots=not args.no_plots, seed=args.seed)
    if not args.quiet:
        for fig, paths in arts.items():
            for p in paths:
                print(f"{fig}\t{p}")


COMMANDS = {
    "synth": _cmd_synth, "corrupt": _cmd_corrupt, "train": _cmd_train,
    "denoise": _cmd_denoise, "smooth": _cmd_smooth, "d2": _cmd_d2, "mdcfit": _cmd_mdcfit,
    "trace": _cmd_trace, "ablate": _cmd_ablate, "experiment": _cmd_experiment,
}


def _thread_limit():
    raw = os.environ.get("SPECDN_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = max(int(raw), 1)
    except ValueError:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run_pipeline(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            COMMANDS[args.command](args)
    except (errors.SpecdnError, ValueError, OSError) as exc:
        status = _status_for(exc)
        print(json.dumps({"status": status, "error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return status
    return 0


def main():
    sys.exit(run_pipeline())


if __name__ == "__main__":
    main()
