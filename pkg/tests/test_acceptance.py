"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 4 to 8 share a single desk-scale ``specdn experiment figs`` run and
read its CSV/DNW1 artifacts.  Set ``SPECDN_DESK_DIR`` to a finished run's
output directory to re-check it without retraining.
"""

import csv
import math
import os
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import central_difference, rel_error
from specdn.cli import run_pipeline
from specdn.experiment import (LOW_DENSITY, PRESETS, denoise_spectrum, kink_config,
                               trace_errors, validation_pairs)
from specdn.losses import combined_loss, mae_loss, ms_ssim, mse_loss
from specdn.nn import (ConvLayer, conv2d, init_network, load_network, network_forward,
                       network_from_bytes, network_gradients, network_to_bytes, prelu,
                       receptive_field, save_network)
from specdn.noise import NoiseConfig, sample_poisson_counts
from specdn.spectrum import ProbabilityMap, Spectrum, spectrum_from_bytes, spectrum_to_bytes
from specdn.synth import random_clean_maps, synth_spectrum
from specdn.train import TrainConfig, evaluate, evaluate_ms_ssim, learning_rate, train_model

RESULTS = []


def record(number, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2} {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# -- 1: gradients ------------------------------------------------------------

def test_criterion_01_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = {}

    layer = ConvLayer(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), None)
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((1, 3, 8, 8))
    f = lambda: float((conv2d(x, layer) * w).sum())  # noqa: E731
    d_x, d_k, d_b = conv2d(x, layer, grad_out=w)
    errs["conv2d"] = max(rel_error(d_k, central_difference(f, layer.kernel, 1e-3)),
                         rel_error(d_b, central_difference(f, layer.bias, 1e-3)),
                         rel_error(d_x, central_difference(f, x, 1e-3)))

    z = rng.standard_normal((4, 6, 6))
    slopes = rng.uniform(0.1, 0.4, 4)
    wz = rng.standard_normal(z.shape)
    f = lambda: float((prelu(z, slopes) * wz).sum())  # noqa: E731
    d_z, d_a = prelu(z, slopes, grad_out=wz)
    errs["prelu"] = max(rel_error(d_z, central_difference(f, z)),
                        rel_error(d_a, central_difference(f, slopes)))

    for depth in (1, 3, 5):
        net = init_network(depth, depth, width=8, dtype=np.float64)
        xi = rng.random((1, 1, 8, 8))
        wi = rng.standard_normal(xi.shape)
        f = lambda: float((network_forward(net, xi) * wi).sum())  # noqa: E731
        grads = network_gradients(net, xi, wi)
        worst = 0.0
        for p, g in zip(net.parameters(), grads):
            idx = None if p.size <= 300 else rng.choice(p.size, 150, replace=False)
            num = central_difference(f, p, 1e-6, idx)
            sel = slice(None) if idx is None else idx
            worst = max(worst, rel_error(g.ravel()[sel], num.ravel()[sel]))
        errs[f"network d={depth}"] = worst

    for name, fn in (("mae", mae_loss), ("mse", mse_loss), ("ms_ssim", ms_ssim),
                     ("combined", combined_loss)):
        p = rng.random((32, 32)) + 0.1
        t = rng.random((32, 32)) + 0.1
        _, g = fn(p, t)
        idx = rng.choice(p.size, 100, replace=False)
        num = central_difference(lambda: fn(p, t)[0], p, 1e-6, idx)
        errs[name] = rel_error(g.ravel()[idx], num.ravel()[idx])

    elapsed = time.perf_counter() - t0
    limits = {"conv2d": 1e-5, "prelu": 1e-6, "mae": 1e-6, "mse": 1e-6}
    ok = all(v < limits.get(k, 1e-4) for k, v in errs.items()) and elapsed < 120
    worst = max(errs, key=lambda k: errs[k] / limits.get(k, 1e-4))
    record(1, "gradient checks", ok,
           f"worst {worst} rel err {errs[worst]:.1e}; {len(errs)} checks in {elapsed:.1f} s")


# -- 2: Poisson statistics ---------------------------------------------------

def test_criterion_02_poisson():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    p = ProbabilityMap.from_array(np.full((300, 300), 1 / 300 ** 2))
    draws = np.stack([sample_poisson_counts(p, 9e4, rng).values for _ in range(100)])
    mean, var = draws.mean(axis=0), draws.var(axis=0, ddof=1)
    se_mean = 1 / math.sqrt(100)
    se_var = math.sqrt((4 - 97 / 99) / 100)
    z_mean = abs(mean.mean() - 1) / (se_mean / 300)
    z_var = abs(var.mean() - 1) / (se_var / 300)
    del draws

    clean = random_clean_maps(1, 21, 300, 300)[0]
    snr = []
    for n in (1e4, 1e5, 1e6):
        s = []
        for _ in range(5):
            counts = sample_poisson_counts(clean, n, rng).values
            expected = n * clean.values
            s.append(np.linalg.norm(expected) / np.linalg.norm(counts - expected))
        snr.append(np.mean(s))
    ratios = [snr[1] / snr[0], snr[2] / snr[1]]
    elapsed = time.perf_counter() - t0
    ok = (z_mean < 5 and z_var < 5 and all(abs(r / math.sqrt(10) - 1) <= 0.1 for r in ratios)
          and elapsed < 60)
    record(2, "Poisson statistics", ok,
           f"mean z={z_mean:.2f}, var z={z_var:.2f}; SNR ratios per decade "
           f"{ratios[0]:.3f}, {ratios[1]:.3f} (sqrt10=3.162); {elapsed:.1f} s")


# -- 3: closed forms ---------------------------------------------------------

def test_criterion_03_closed_forms():
    t0 = time.perf_counter()
    a, b = np.full((176, 176), 0.5), np.full((176, 176), 0.6)
    ms = ms_ssim(a, b)[0]
    comb = combined_loss(a, b)[0]
    x = np.random.default_rng(3).random((64, 64))
    self_sim = ms_ssim(x, x)[0]
    rf = receptive_field(20, 3)
    elapsed = time.perf_counter() - t0
    ok = (abs(ms - 0.99780) <= 1e-4 and abs(comb - 0.03154) <= 1e-4 and self_sim == 1.0
          and rf == 41 and elapsed < 1.0)
    record(3, "closed-form values", ok,
           f"ms_ssim={ms:.6f}, combined={comb:.6f}, ms_ssim(x,x)={self_sim}, rf={rf}; "
           f"{elapsed * 1e3:.0f} ms")


# -- 4 to 8: the desk-scale run ----------------------------------------------

@pytest.fixture(scope="module")
def desk():
    settings = PRESETS["desk"]
    cached = os.environ.get("SPECDN_DESK_DIR")
    if cached:
        out = Path(cached)
    else:
        out = Path(tempfile.mkdtemp(prefix="specdn_desk_"))
        status = run_pipeline(["experiment", "figs", "--scale", "desk", "--quiet",
                               "--out", str(out)])
        assert status == 0
    _, rows = read_csv(out / "timings.csv")
    timings = {r[0]: float(r[1]) for r in rows}
    return settings, out, timings


@pytest.mark.slow
def test_criterion_04_desk_training(desk):
    settings, out, timings = desk
    net = load_network(out / "model.dnw")
    val = validation_pairs(settings)
    identity = evaluate(None, val)
    trained = evaluate(net, val)
    ms_noisy = evaluate_ms_ssim(None, val)
    ms_den = evaluate_ms_ssim(net, val)
    n_better = int(np.sum(ms_den > ms_noisy))

    cfg = kink_config(settings.grid)
    p = synth_spectrum(cfg)
    n_lc = LOW_DENSITY * settings.grid ** 2
    raw, den = [], []
    for seed in range(5):
        lc = sample_poisson_counts(p, n_lc, np.random.default_rng(1000 + seed))
        raw.append(trace_errors(lc, cfg)[0])
        den.append(trace_errors(denoise_spectrum(net, lc), cfg)[0])
    raw_rms, den_rms = float(np.mean(raw)), float(np.mean(den))

    minutes = timings["fig8"] / 60
    ok_a = trained <= 0.7 * identity
    ok_b = n_better == len(val)
    ok_c = raw_rms > 2 and den_rms <= 1
    record(4, "desk training", ok_a and ok_b and ok_c and minutes <= 30,
           f"(a) val {trained:.4f} vs identity {identity:.4f} (ratio {trained / identity:.2f}); "
           f"(b) MS-SSIM improved on {n_better}/{len(val)} pairs; "
           f"(c) trace RMS raw {raw_rms:.2f} px, denoised {den_rms:.2f} px at N={n_lc:.0f}; "
           f"{minutes:.1f} min")


@pytest.mark.slow
def test_criterion_05_depth_ablation(desk):
    _, out, timings = desk
    _, rows = read_csv(out / "fig4b_depth.csv")
    depths = [int(r[0]) for r in rows]
    means = [float(r[1]) for r in rows]
    minutes = timings["fig4b"] / 60
    ok = (depths == [2, 5, 10] and all(a > b for a, b in zip(means, means[1:]))
          and len(rows[0]) == 2 + 3 and minutes <= 90)
    record(5, "depth ablation", ok,
           ", ".join(f"D={d}: {m:.4f}" for d, m in zip(depths, means)) + f"; {minutes:.1f} min")


@pytest.mark.slow
def test_criterion_06_loss_study(desk):
    _, out, _ = desk
    _, rows = read_csv(out / "fig7_loss.csv")
    ms = {(r[0], int(r[1])): float(r[2]) for r in rows}
    seeds = sorted({s for _, s in ms})
    per_seed = [ms[("mixed", s)] >= ms[("mse", s)] for s in seeds]
    mixed = np.mean([ms[("mixed", s)] for s in seeds])
    mse = np.mean([ms[("mse", s)] for s in seeds])
    record(6, "mixed vs MSE loss", len(seeds) == 3 and all(per_seed),
           f"val MS-SSIM mixed {mixed:.4f} vs MSE {mse:.4f}; "
           f"mixed >= MSE on {sum(per_seed)}/{len(seeds)} seeds")


@pytest.mark.slow
def test_criterion_07_psf_study(desk):
    _, out, _ = desk
    _, rows = read_csv(out / "fig6b_psf.csv")
    without = [float(r[2]) for r in rows if r[0] == "0"]
    with_psf = [float(r[2]) for r in rows if r[0] == "1"]
    ok = len(without) == len(with_psf) == 3 and np.mean(without) > np.mean(with_psf)
    record(7, "PSF augmentation", ok,
           f"loss on blurred pairs: trained without PSF {np.mean(without):.4f}, "
           f"with PSF {np.mean(with_psf):.4f}")


@pytest.mark.slow
def test_criterion_08_convergence(desk):
    _, out, _ = desk
    _, rows = read_csv(out / "fig8_history.csv")
    val = [float(r[2]) for r in rows]
    tail = val[-max(1, int(round(0.2 * len(val)))):]
    ok = val[-1] <= 1.05 * min(tail)
    record(8, "validation convergence", ok,
           f"final {val[-1]:.5f} vs min of last {len(tail)} epochs {min(tail):.5f} "
           f"(ratio {val[-1] / min(tail):.3f})")


@pytest.mark.slow
def test_training_loss_smoothed_non_increasing(desk):
    _, out, _ = desk
    _, rows = read_csv(out / "fig8_history.csv")
    train = np.array([float(r[1]) for r in rows])
    if train.size < 7:
        pytest.skip("history too short for a 5-epoch average after epoch 5")
    smooth = np.convolve(train, np.ones(5) / 5, mode="valid")
    # smooth[i] averages epochs i..i+4; check windows ending after epoch 5
    after = smooth[2:]
    rises = np.diff(after)
    ok = bool(np.all(rises <= 0))
    record("8b", "smoothed training loss", ok,
           f"largest rise of the 5-epoch moving average after epoch 5: {rises.max():+.2e}")


# -- 9: schedule, determinism, roundtrips ------------------------------------

def test_criterion_09_schedule_determinism_roundtrips():
    cfg = TrainConfig()
    rates = [learning_rate(e, cfg) for e in range(150)]
    plateaus = sorted(set(rates), reverse=True)
    ok_sched = (len(plateaus) == 3 and np.allclose(plateaus, [5e-4, 5e-5, 5e-6], rtol=1e-12)
                and rates[49] == 5e-4 and rates[50] < 5e-4 and rates[100] < rates[99])

    maps = random_clean_maps(2, 9, 16, 16)
    ncfg = NoiseConfig.for_grid(16, 16)
    tcfg = TrainConfig(epochs=3, fan_out=3, lr_decay_every=2)
    runs = [train_model(maps, ncfg, tcfg, depth=3) for _ in range(2)]
    ok_det = (runs[0].train_loss == runs[1].train_loss
              and network_to_bytes(runs[0].network) == network_to_bytes(runs[1].network))

    rng = np.random.default_rng(9)
    s = Spectrum.from_array(rng.random((300, 300)).astype(np.float32))
    buf = spectrum_to_bytes(s)
    ok_spx = spectrum_from_bytes(buf) == s and spectrum_to_bytes(spectrum_from_bytes(buf)) == buf
    net = init_network(20, 4)
    nbuf = network_to_bytes(net)
    back = network_from_bytes(nbuf)
    ok_dnw = network_to_bytes(back) == nbuf and all(
        a.tobytes() == b.tobytes() for a, b in zip(net.parameters(), back.parameters()))
    record(9, "schedule/determinism/roundtrips", ok_sched and ok_det and ok_spx and ok_dnw,
           f"plateaus {', '.join(f'{r:.0e}' for r in plateaus)}; bit-identical rerun {ok_det}; SPX1 {ok_spx}; DNW1 {ok_dnw}")


# -- 10: latency -------------------------------------------------------------

def test_criterion_10_latency(tmp_path):
    save_network(init_network(20, 0), tmp_path / "d20.dnw")
    clean = random_clean_maps(1, 10, 300, 300)[0]
    noisy = sample_poisson_counts(clean, 9e4, np.random.default_rng(10))
    t0 = time.perf_counter()
    net = load_network(tmp_path / "d20.dnw")
    out = denoise_spectrum(net, noisy)
    elapsed = time.perf_counter() - t0
    record(10, "inference latency", out.shape == (300, 300) and elapsed < 30,
           f"depth-20 load + denoise of 300x300 in {elapsed:.2f} s (hard limit 30 s)")
