"""Training objectives with analytic gradients w.r.t. the prediction.

All functions accept a single image ``(H, W)`` or a batch ``(..., H, W)``.
For batches the returned scalar is the mean over samples and the gradient is
that of the mean.  Computation is done in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch, TooSmallForScales

_RAW_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_WEIGHTS = tuple(w / sum(_RAW_WEIGHTS) for w in _RAW_WEIGHTS)

# keeps fractional powers defined when a scale is anti-correlated
_VALUE_FLOOR = 1e-8


@dataclass(frozen=True)
class LossSpec:
    alpha: float = 0.7
    ms_ssim_scales: int = 5
    scale_weights: tuple = field(default=MS_SSIM_WEIGHTS)
    window_size: int = 11
    window_sigma: float = 1.5
    stability_c1: float = (0.01 * 1.0) ** 2
    stability_c2: float = (0.03 * 1.0) ** 2
    dynamic_range: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.ms_ssim_scales < 1 or len(self.scale_weights) < self.ms_ssim_scales:
            raise ValueError("need one weight per scale")
        if abs(sum(self.scale_weights[:self.ms_ssim_scales]) - 1.0) > 1e-9:
            raise ValueError("scale weights must sum to 1")
        if self.window_size < 1 or self.window_sigma <= 0:
            raise ValueError("invalid window")

    @classmethod
    def for_range(cls, dynamic_range: float, **kwargs) -> "LossSpec":
        return cls(stability_c1=(0.01 * dynamic_range) ** 2,
                   stability_c2=(0.03 * dynamic_range) ** 2,
                   dynamic_range=dynamic_range, **kwargs)

    def effective_scales(self, height: int, width: int) -> tuple[int, tuple]:
        """Scales that fit the window, and their weights renormalized to sum to 1."""
        m, h, w = 0, height, width
        while m < self.ms_ssim_scales and min(h, w) >= self.window_size:
            m += 1
            h, w = h // 2, w // 2
        if m == 0:
            raise TooSmallForScales(
                f"{height}x{width} input is smaller than the {self.window_size}px window")
        weights = np.asarray(self.scale_weights[:m], dtype=np.float64)
        return m, tuple(weights / weights.sum())


def _check(prediction, target):
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {t.shape}")
    if p.ndim < 2:
        raise ShapeMismatch("inputs must be at least 2D")
    return p, t


def _batch_size(shape) -> int:
    return int(np.prod(shape[:-2])) if len(shape) > 2 else 1


def mae_loss(prediction, target):
    """Mean absolute error and its subgradient (0 at ties)."""
    p, t = _check(prediction, target)
    d = p - t
    return float(np.abs(d).mean()), np.sign(d) / d.size


def mse_loss(prediction, target):
    p, t = _check(prediction, target)
    d = p - t
    return float((d * d).mean()), 2.0 * d / d.size


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' correlation over the last two axes."""
    n = g.size
    y = sliding_window_view(x, n, axis=-1) @ g
    return sliding_window_view(y, n, axis=-2) @ g


def _filter_adjoint(gy, g):
    """Adjoint of :func:`_filter_valid` (full convolution back to input size)."""
    n = g.size
    pad = [(0, 0)] * (gy.ndim - 2) + [(n - 1, n - 1), (n - 1, n - 1)]
    return _filter_valid(np.pad(gy, pad), g[::-1])


def _pool(x):
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    x = x[..., :2 * h, :2 * w]
    return x.reshape(x.shape[:-2] + (h, 2, w, 2)).mean(axis=(-3, -1))


def _unpool(g, shape):
    out = np.zeros(shape)
    h, w = g.shape[-2], g.shape[-1]
    up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0
    out[..., :2 * h, :2 * w] = up
    return out


def _ms_ssim_per_sample(p, t, spec: LossSpec, need_grad=True):
    """Per-sample MS-SSIM over the leading axes, gradient w.r.t. ``p``."""
    m, weights = spec.effective_scales(p.shape[-2], p.shape[-1])
    g = gaussian_window(spec.window_size, spec.window_sigma)
    c1, c2 = spec.stability_c1, spec.stability_c2
    xs, ys = [p], [t]
    for _ in range(m - 1):
        xs.append(_pool(xs[-1]))
        ys.append(_pool(ys[-1]))

    values, caches = [], []
    for j in range(m):
        x, y = xs[j], ys[j]
        mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
        s_xx = _filter_valid(x * x, g) - mu_x * mu_x
        s_yy = _filter_valid(y * y, g) - mu_y * mu_y
        s_xy = _filter_valid(x * y, g) - mu_x * mu_y
        num_cs = 2.0 * s_xy + c2
        den_cs = s_xx + s_yy + c2
        cs = num_cs / den_cs
        if j == m - 1:
            num_l = 2.0 * mu_x * mu_y + c1
            den_l = mu_x * mu_x + mu_y * mu_y + c1
            lum = num_l / den_l
            smap = lum * cs
        else:
            lum = num_l = den_l = None
            smap = cs
        values.append(smap.mean(axis=(-2, -1)))
        caches.append((mu_x, mu_y, num_cs, den_cs, cs, lum, num_l, den_l))

    v = np.stack(values)                                # (m, ...)
    clamped = v < _VALUE_FLOOR
    v_safe = np.where(clamped, _VALUE_FLOOR, v)
    w = np.asarray(weights).reshape((m,) + (1,) * (v.ndim - 1))
    ms = np.exp((w * np.log(v_safe)).sum(axis=0))
    if not need_grad:
        return ms, None

    grad = np.zeros_like(xs[-1])
    for j in range(m - 1, -1, -1):
        x, y = xs[j], ys[j]
        mu_x, mu_y, num_cs, den_cs, cs, lum, num_l, den_l = caches[j]
        dv = np.where(clamped[j], 0.0, ms * w[j] / v_safe[j])        # d ms / d v_j
        n_pix = cs.shape[-1] * cs.shape[-2]
        gmap = (dv / n_pix)[..., None, None] * np.ones_like(cs)     # d ms / d map
        l_fac = 1.0 if lum is None else lum
        g_sxy = gmap * l_fac * 2.0 / den_cs
        g_sxx = -gmap * l_fac * num_cs / den_cs ** 2
        g_mux = -2.0 * mu_x * g_sxx - mu_y * g_sxy
        if lum is not None:
            dl_dmux = 2.0 * mu_y / den_l - num_l * 2.0 * mu_x / den_l ** 2
            g_mux = g_mux + gmap * cs * dl_dmux
        gx = (_filter_adjoint(g_mux, g) + 2.0 * x * _filter_adjoint(g_sxx, g)
              + y * _filter_adjoint(g_sxy, g))
        if j < m - 1:
            gx = gx + _unpool(grad, x.shape)
        grad = gx
    return ms, grad


def ms_ssim(prediction, target, spec: LossSpec | None = None):
    """Multiscale structural similarity and its gradient w.r.t. ``prediction``.

    Contrast-structure terms at every scale, luminance at the coarsest,
    combined as a weighted geometric mean.  Batches return the sample mean.
    """
    spec = spec or LossSpec()
    p, t = _check(prediction, target)
    ms, grad = _ms_ssim_per_sample(p, t, spec)
    b = _batch_size(p.shape)
    return float(np.mean(ms)), grad / b


def ms_ssim_values(prediction, target, spec: LossSpec | None = None) -> np.ndarray:
    """Per-sample MS-SSIM without gradients."""
    p, t = _check(prediction, target)
    ms, _ = _ms_ssim_per_sample(p, t, spec or LossSpec(), need_grad=False)
    return np.atleast_1d(ms)


def combined_loss(prediction, target, spec: LossSpec | None = None):
    """``(1 - alpha) * MAE + alpha * (1 - MS-SSIM)`` and its gradient."""
    spec = spec or LossSpec()
    p, t = _check(prediction, target)
    a = spec.alpha
    loss, grad = 0.0, np.zeros_like(p)
    if a < 1.0:
        l_mae, g_mae = mae_loss(p, t)
        loss += (1.0 - a) * l_mae
        grad += (1.0 - a) * g_mae
    if a > 0.0:
        l_ms, g_ms = ms_ssim(p, t, spec)
        loss += a * (1.0 - l_ms)
        grad -= a * g_ms
    return loss, grad


LOSS_KINDS = ("mixed", "mse", "mae")


def training_loss(prediction, target, spec: LossSpec | None = None, kind: str = "mixed"):
    if kind == "mixed":
        return combined_loss(prediction, target, spec)
    if kind == "mse":
        return mse_loss(prediction, target)
    if kind == "mae":
        return mae_loss(prediction, target)
    raise ValueError(f"unknown loss kind {kind!r}")
