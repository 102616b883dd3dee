"""Adam training loop, step-decay schedule, augmentation and ablation harnesses."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceDetected, NonSquareInput, ShapeMismatch
from .losses import LossSpec, ms_ssim_values, training_loss
from .nn import Network, forward_backward, init_network, network_forward, save_network
from .noise import (NoiseConfig, TrainingPair, denormalize_pair, make_training_pair,
                    normalize_pair, pair_rng, sample_log_weighted_count)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "AdamState", "TrainReport", "learning_rate", "adam_step",
    "apply_dihedral", "invert_dihedral", "augment_pair", "normalize_pair",
    "denormalize_pair", "make_pairs", "train_model", "evaluate", "evaluate_ms_ssim",
    "denoise_array", "depth_ablation", "loss_study", "psf_study",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr_initial: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 50
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    augment_dihedral: bool = True
    augment_brightness: bool = True
    brightness_range: tuple = (0.5, 1.5)
    regenerate_pairs: bool = True
    # keep each pair slot's total count across epochs, redraw only the Poisson noise
    fixed_slot_counts: bool = True
    fan_out: int = 50
    loss_kind: str = "mixed"
    seed: int = 0

    def __post_init__(self):
        if not self.lr_initial > 0:
            raise ValueError("lr_initial must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_decay_every < 1 or self.fan_out < 1:
            raise ValueError("batch_size, lr_decay_every and fan_out must be >= 1")


def learning_rate(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr_initial * config.lr_decay_factor ** (epoch // config.lr_decay_every)


# -- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, config: TrainConfig) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and state disagree in length")
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {g.shape}")
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


# -- augmentation ----------------------------------------------------------

def apply_dihedral(a: np.ndarray, rotations: int, flip: bool) -> np.ndarray:
    """Left-right flip (optional) followed by ``rotations`` quarter turns."""
    if rotations % 2 and a.shape[-1] != a.shape[-2]:
        raise NonSquareInput("odd quarter turns need a square grid")
    if flip:
        a = a[..., :, ::-1]
    return np.rot90(a, rotations, axes=(-2, -1))


def invert_dihedral(a: np.ndarray, rotations: int, flip: bool) -> np.ndarray:
    a = np.rot90(a, -rotations, axes=(-2, -1))
    return a[..., :, ::-1] if flip else a


def augment_pair(pair: TrainingPair, rng: np.random.Generator,
                 config: TrainConfig | None = None):
    """Random dihedral element and brightness factor, identical on both members.

    Non-square grids only draw flips (including the half turn).  Returns the
    augmented pair and the applied ``(rotations, flip, brightness)``.
    """
    config = config or TrainConfig()
    square = pair.noisy.shape[-1] == pair.noisy.shape[-2]
    rot, flip = 0, False
    if config.augment_dihedral:
        rot = int(rng.integers(0, 4)) if square else 2 * int(rng.integers(0, 2))
        flip = bool(rng.integers(0, 2))
    b = float(rng.uniform(*config.brightness_range)) if config.augment_brightness else 1.0
    noisy = np.ascontiguousarray(apply_dihedral(pair.noisy, rot, flip)) * b
    clean = np.ascontiguousarray(apply_dihedral(pair.clean, rot, flip)) * b
    return TrainingPair(noisy, clean, pair.total_count, pair.scale / b), (rot, flip, b)


# -- data ------------------------------------------------------------------

def make_pairs(clean_maps, noise_config: NoiseConfig, fan_out: int, seed: int,
               epoch: int = 0) -> list[TrainingPair]:
    """``len(clean_maps) * fan_out`` normalized pairs, one rng stream per pair."""
    pairs = []
    for i, p in enumerate(clean_maps):
        for j in range(fan_out):
            rng = pair_rng(seed, 3, epoch, i, j)
            pairs.append(make_training_pair(p, noise_config, rng))
    return pairs


def _stack(pairs):
    x = np.stack([p.noisy for p in pairs]).astype(np.float32)[:, None]
    y = np.stack([p.clean for p in pairs]).astype(np.float32)[:, None]
    return x, y


# -- training --------------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None
    network: Network | None = None
    aborted: bool = False

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss)):
                w.writerow([e, repr(tl), repr(vl)])


def train_model(clean_maps, noise_config: NoiseConfig, train_config: TrainConfig,
                val_pairs=None, depth: int = 20, net: Network | None = None,
                loss_spec: LossSpec | None = None, checkpoint_path=None,
                init_seed: int | None = None, progress=None) -> TrainReport:
    """Train a denoiser on pairs drawn from ``clean_maps``.

    With ``regenerate_pairs`` the low-count inputs are redrawn every epoch;
    otherwise one fixed set of ``len(clean_maps) * fan_out`` pairs is reused.
    Validation loss uses the training objective on the fixed ``val_pairs``.
    """
    if not clean_maps:
        raise ValueError("training set is empty")
    cfg = train_config
    spec = loss_spec or LossSpec()
    net = net if net is not None else init_network(
        depth, cfg.seed if init_seed is None else init_seed)
    state = AdamState.for_params(net.parameters())
    report = TrainReport(network=net)
    fixed = None if cfg.regenerate_pairs else make_pairs(clean_maps, noise_config, cfg.fan_out, cfg.seed)
    n_pairs = len(clean_maps) * cfg.fan_out
    slot_counts = None
    if fixed is None and cfg.fixed_slot_counts:
        slot_counts = [sample_log_weighted_count(noise_config, pair_rng(cfg.seed, 4, k))
                       for k in range(n_pairs)]
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        order_rng = pair_rng(cfg.seed, 1, epoch)
        order = order_rng.permutation(n_pairs)
        losses, weights = [], []
        for start in range(0, n_pairs, cfg.batch_size):
            batch = []
            for idx in order[start:start + cfg.batch_size]:
                i, j = divmod(int(idx), cfg.fan_out)
                if fixed is not None:
                    pair = fixed[idx]
                else:
                    n = None if slot_counts is None else slot_counts[idx]
                    pair = make_training_pair(clean_maps[i], noise_config,
                                              pair_rng(cfg.seed, 0, epoch, i, j), total_count=n)
                aug_rng = pair_rng(cfg.seed, 2, epoch, int(idx))
                batch.append(augment_pair(pair, aug_rng, cfg)[0])
            x, y = _stack(batch)
            loss, _, grads = forward_backward(
                net, x, lambda out: training_loss(out[:, 0], y[:, 0], spec, cfg.loss_kind))
            if not np.isfinite(loss):
                report.aborted = True
                report.wall_time = time.perf_counter() - t0
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}", report)
            adam_step(net.parameters(), grads, state, lr, cfg)
            net.step += 1
            losses.append(loss)
            weights.append(len(batch))
        report.train_loss.append(float(np.average(losses, weights=weights)))
        report.learning_rates.append(lr)
        vl = evaluate(net, val_pairs, spec, cfg.loss_kind) if val_pairs else float("nan")
        report.val_loss.append(vl)
        if progress is not None:
            progress(epoch, report)
        log.info("epoch %d lr %.1e train %.5f val %.5f", epoch, lr, report.train_loss[-1], vl)
    report.wall_time = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_network(net, checkpoint_path)
        report.checkpoint = str(checkpoint_path)
    return report


def _predict(net: Network, pairs, batch_size=8):
    out = []
    for start in range(0, len(pairs), batch_size):
        x, _ = _stack(pairs[start:start + batch_size])
        out.append(network_forward(net, x)[:, 0])
    return np.concatenate(out)


def evaluate(net: Network | None, pairs, spec: LossSpec | None = None,
             kind: str = "mixed") -> float:
    """Mean loss over normalized pairs; ``net=None`` scores the identity map."""
    spec = spec or LossSpec()
    preds = (np.stack([p.noisy for p in pairs]) if net is None else _predict(net, pairs))
    return float(np.mean([training_loss(pr, p.clean, spec, kind)[0]
                          for pr, p in zip(preds, pairs)]))


def evaluate_ms_ssim(net: Network | None, pairs, spec: LossSpec | None = None) -> np.ndarray:
    """Per-pair MS-SSIM of the denoised (or, for ``net=None``, noisy) input vs clean."""
    spec = spec or LossSpec()
    preds = (np.stack([p.noisy for p in pairs]) if net is None else _predict(net, pairs))
    clean = np.stack([p.clean for p in pairs])
    return ms_ssim_values(preds, clean, spec)


def denoise_array(net: Network, counts: np.ndarray) -> np.ndarray:
    """normalize -> network -> denormalize for a raw count grid."""
    pair = normalize_pair(TrainingPair(np.asarray(counts, dtype=np.float64),
                                       np.asarray(counts, dtype=np.float64), float(np.sum(counts))))
    out = network_forward(net, pair.noisy.astype(np.float32))
    return out.astype(np.float64) * pair.scale


# -- studies ---------------------------------------------------------------

def depth_ablation(depths, clean_maps, val_pairs, noise_config: NoiseConfig,
                   train_config: TrainConfig, seeds=(0,), loss_spec=None, progress=None):
    """Train one model per (depth, seed) on identical data and budget.

    Returns rows ``(depth, mean_val_loss, [per-seed losses])`` sorted by depth.
    A given seed draws the same pairs, order and augmentation at every depth.
    """
    rows = []
    for depth in sorted(set(int(d) for d in depths)):
        per_seed = []
        for s in seeds:
            cfg = replace(train_config, seed=int(s))
            rep = train_model(clean_maps, noise_config, cfg, val_pairs, depth=depth,
                              loss_spec=loss_spec)
            per_seed.append(rep.val_loss[-1] if rep.val_loss else float("nan"))
            if progress is not None:
                progress(depth, s, rep)
        rows.append((depth, float(np.mean(per_seed)), per_seed))
    return rows


def loss_study(clean_maps, val_pairs, noise_config: NoiseConfig, train_config: TrainConfig,
               depth: int, seeds=(0, 1, 2), loss_spec=None):
    """Mixed vs MSE training; rows ``(kind, seed, val_ms_ssim, val_mixed_loss)``."""
    spec = loss_spec or LossSpec()
    rows = []
    for kind in ("mixed", "mse"):
        for s in seeds:
            cfg = replace(train_config, seed=int(s), loss_kind=kind)
            rep = train_model(clean_maps, noise_config, cfg, None, depth=depth, loss_spec=spec)
            ms = float(np.mean(evaluate_ms_ssim(rep.network, val_pairs, spec)))
            rows.append((kind, int(s), ms, evaluate(rep.network, val_pairs, spec)))
    return rows


def psf_study(clean_maps, psf_val_pairs, noise_config: NoiseConfig, train_config: TrainConfig,
              depth: int, seeds=(0, 1, 2), loss_spec=None):
    """Train with and without detector blur, score both on blurred validation pairs.

    Rows ``(psf_in_training, seed, val_loss)``.
    """
    spec = loss_spec or LossSpec()
    rows = []
    for psf in (False, True):
        ncfg = replace(noise_config, psf_enabled=psf)
        for s in seeds:
            cfg = replace(train_config, seed=int(s))
            rep = train_model(clean_maps, ncfg, cfg, None, depth=depth, loss_spec=spec)
            rows.append((psf, int(s), evaluate(rep.network, psf_val_pairs, spec)))
    return rows
