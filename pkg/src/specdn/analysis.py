"""Line-shape analysis: smoothing baseline, second derivatives, MDC fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DegenerateData, OutOfRange, TooFewSamples
from .spectrum import Spectrum

FIT_MAX_ITER = 200
FIT_XTOL = 1e-8


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at 4 sigma, normalized to unit sum."""
    if sigma < 1e-3:
        # neighbours would carry less than exp(-5e5): a delta
        return np.ones(1)
    r = max(int(math.ceil(4.0 * sigma)), 1)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def smooth_array(values: np.ndarray, sigma) -> np.ndarray:
    sig = (sigma, sigma) if np.isscalar(sigma) else tuple(sigma)
    if any(s < 0 for s in sig):
        raise ValueError("sigma must be >= 0")
    out = np.asarray(values, dtype=np.float64)
    for axis, s in enumerate(sig):
        if s > 0:
            # half-sample reflection keeps the operator mass-preserving
            out = correlate1d(out, gaussian_kernel(s), axis=axis, mode="reflect")
    return out


def gaussian_smooth(s: Spectrum, sigma_pixels) -> Spectrum:
    """Separable Gaussian blur, sigma given in pixels as ``(energy, momentum)``."""
    out = smooth_array(s.values, sigma_pixels)
    if not s.signed:
        out = np.maximum(out, 0.0)
    return Spectrum(out, s.energy_axis, s.momentum_axis, signed=s.signed)


def second_derivative(s: Spectrum, axis: str = "momentum", pre_smooth_sigma=0.0) -> Spectrum:
    """Central second difference in physical units after an optional blur.

    Band positions show up as minima.  Edge rows/columns copy their interior
    neighbour.
    """
    ax = {"energy": 0, "momentum": 1}.get(axis)
    if ax is None:
        raise ValueError("axis must be 'energy' or 'momentum'")
    n = s.shape[ax]
    if n < 3:
        raise TooFewSamples(f"second derivative needs >= 3 samples, got {n}")
    v = smooth_array(s.values, pre_smooth_sigma)
    step = (s.energy_axis if ax == 0 else s.momentum_axis).step
    v = np.moveaxis(v, ax, 0)
    d2 = np.empty_like(v)
    d2[1:-1] = (v[:-2] - 2.0 * v[1:-1] + v[2:]) / step ** 2
    d2[0] = d2[1]
    d2[-1] = d2[-2]
    return Spectrum(np.moveaxis(d2, 0, ax), s.energy_axis, s.momentum_axis, signed=True)


# -- MDCs ------------------------------------------------------------------

@dataclass(frozen=True)
class Mdc:
    momentum: np.ndarray
    intensity: np.ndarray
    energy: float
    row: int = -1

    def __post_init__(self):
        if len(self.momentum) != len(self.intensity) or len(self.momentum) < 4:
            raise ValueError("MDC needs equal-length vectors with >= 4 samples")


def nearest_row(s: Spectrum, energy: float) -> int:
    """Nearest energy row; exact midpoints go to the lower index."""
    ax = s.energy_axis
    tol = 1e-9 * ax.step
    if not (ax.minimum - tol <= energy <= ax.maximum + tol):
        raise OutOfRange(f"energy {energy} outside [{ax.minimum}, {ax.maximum}]")
    frac = (energy - ax.minimum) / ax.step
    return int(min(max(math.ceil(frac - 0.5), 0), ax.sample_count - 1))


def extract_mdc(s: Spectrum, energy: float) -> Mdc:
    i = nearest_row(s, energy)
    return Mdc(s.momentum_axis.values, s.values[i].copy(), float(s.energy_axis.values[i]), i)


@dataclass(frozen=True)
class MdcFitResult:
    peak_position: float
    width: float                  # half-width at half-maximum
    amplitude: float
    background: tuple             # (offset, slope)
    residual_norm: float
    converged: bool
    iterations: int = 0

    @property
    def params(self) -> np.ndarray:
        return np.array([self.amplitude, self.peak_position, self.width,
                         self.background[0], self.background[1]])


def lorentzian_model(k, amplitude, center, width, offset=0.0, slope=0.0):
    k = np.asarray(k, dtype=np.float64)
    return amplitude * width ** 2 / ((k - center) ** 2 + width ** 2) + offset + slope * k


def _model_and_jacobian(k, p):
    a, k0, g, c, s = p
    d = k - k0
    den = d * d + g * g
    lor = g * g / den
    f = a * lor + c + s * k
    jac = np.empty((k.size, 5))
    jac[:, 0] = lor
    jac[:, 1] = a * 2.0 * g * g * d / den ** 2
    jac[:, 2] = a * 2.0 * g * d * d / den ** 2
    jac[:, 3] = 1.0
    jac[:, 4] = k
    return f, jac


def initial_guess(k: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Peak from the lightly smoothed argmax, width from the half-maximum crossings."""
    ys = correlate1d(y, gaussian_kernel(1.0), mode="nearest") if y.size >= 5 else y
    i = int(np.argmax(ys))
    base = float(np.min(ys))
    amp = float(ys[i] - base)
    dk = abs(k[1] - k[0])
    half = base + 0.5 * amp
    lo = i
    while lo > 0 and ys[lo] > half:
        lo -= 1
    hi = i
    while hi < ys.size - 1 and ys[hi] > half:
        hi += 1
    hwhm = max(0.5 * abs(k[hi] - k[lo]), 0.5 * dk)
    return np.array([max(amp, 1e-12), float(k[i]), hwhm, base, 0.0])


def fit_mdc_lorentzian(mdc: Mdc, initial=None, max_iter: int = FIT_MAX_ITER,
                       xtol: float = FIT_XTOL) -> MdcFitResult:
    """Levenberg-Marquardt fit of a Lorentzian on a linear background.

    ``initial`` may be an :class:`MdcFitResult` or ``[amp, k0, hwhm, offset,
    slope]``.  Convergence means a relative parameter step below ``xtol``.
    Non-convergence returns the best parameters seen with ``converged=False``.
    """
    k = np.asarray(mdc.momentum, dtype=np.float64)
    y = np.asarray(mdc.intensity, dtype=np.float64)
    if k.size < 6:
        raise ValueError("MDC fit needs at least 6 samples")
    if not np.all(np.isfinite(y)) or np.ptp(y) <= 1e-14 * max(np.abs(y).max(), 1e-300):
        raise DegenerateData("MDC is flat or non-finite")
    if initial is None:
        p = initial_guess(k, y)
    elif isinstance(initial, MdcFitResult):
        p = initial.params.astype(np.float64)
    else:
        p = np.asarray(initial, dtype=np.float64).copy()
    p[2] = abs(p[2]) or abs(k[1] - k[0])

    f, jac = _model_and_jacobian(k, p)
    r = y - f
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        jtj = jac.T @ jac
        jtr = jac.T @ r
        diag = np.maximum(np.diag(jtj), 1e-30)
        improved = False
        while lam < 1e16:
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(diag), jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = p + delta
            f_t, jac_t = _model_and_jacobian(k, trial)
            r_t = y - f_t
            cost_t = float(r_t @ r_t)
            if np.isfinite(cost_t) and cost_t <= cost:
                step = np.linalg.norm(delta) / (np.linalg.norm(p) + 1e-300)
                p, f, jac, r, cost = trial, f_t, jac_t, r_t, cost_t
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved:
            # no downhill step at any damping: stationary point
            converged = True
            break
        if step < xtol:
            converged = True
            break
    width = abs(p[2])
    inside = k.min() <= p[1] <= k.max()
    return MdcFitResult(float(p[1]), float(width), float(p[0]), (float(p[3]), float(p[4])),
                        float(math.sqrt(cost)), bool(converged and inside and width > 0 and p[0] > 0),
                        it)


def trace_energies(energy_from: float, energy_to: float, step: float) -> np.ndarray:
    """Half-open ``[from, to)`` in ``step`` increments (either direction)."""
    if step == 0:
        raise ValueError("step must be non-zero")
    n = math.ceil((energy_to - energy_from) / step - 1e-9)
    return energy_from + step * np.arange(max(n, 0))


def trace_dispersion(s: Spectrum, energy_range, step: float, momentum_window=None,
                     initial=None) -> list:
    """Fit MDCs row by row, seeding each fit with the previous converged one.

    Returns ``[(energy, MdcFitResult), ...]`` in trace order; failed rows are
    kept with ``converged=False`` and the next row falls back to an automatic
    guess.  ``momentum_window=(kmin, kmax)`` restricts every fit.
    """
    energies = trace_energies(energy_range[0], energy_range[1], step)
    k = s.momentum_axis.values
    mask = np.ones(k.size, bool)
    if momentum_window is not None:
        mask = (k >= momentum_window[0]) & (k <= momentum_window[1])
    out = []
    prev = initial
    for e in energies:
        mdc = extract_mdc(s, float(e))
        sub = Mdc(mdc.momentum[mask], mdc.intensity[mask], mdc.energy, mdc.row)
        try:
            res = fit_mdc_lorentzian(sub, prev)
        except DegenerateData:
            res = MdcFitResult(float("nan"), float("nan"), 0.0, (0.0, 0.0), float("nan"), False)
        out.append((float(e), res))
        prev = res if res.converged else None
    return out


def fit_kink(energies, positions, resolution: float | None = None) -> tuple[float, np.ndarray]:
    """Continuous two-segment linear fit ``k(E)``; returns (kink energy, coefficients).

    The breakpoint is scanned on a grid of ``resolution`` (default a tenth of
    the energy spacing) and each candidate solved by linear least squares.
    """
    e = np.asarray(energies, dtype=np.float64)
    kk = np.asarray(positions, dtype=np.float64)
    ok = np.isfinite(e) & np.isfinite(kk)
    e, kk = e[ok], kk[ok]
    if e.size < 4:
        raise TooFewSamples("kink fit needs at least 4 points")
    lo, hi = np.sort(e)[1], np.sort(e)[-2]
    res = resolution or 0.1 * np.median(np.abs(np.diff(np.sort(e))))
    best = (np.inf, None, None)
    for eb in np.arange(lo, hi + res / 2, res):
        a = np.column_stack([np.ones_like(e), e, np.maximum(e - eb, 0.0)])
        coef, *_ = np.linalg.lstsq(a, kk, rcond=None)
        sse = float(np.sum((a @ coef - kk) ** 2))
        if sse < best[0]:
            best = (sse, float(eb), coef)
    return best[1], best[2]


def trace_rms_error(trace, true_positions, momentum_step: float,
                    lost_penalty: float | None = None, window=None) -> float:
    """RMS deviation of traced peak positions from ground truth, in pixels.

    Rows whose fit returned no position, or one outside ``window``, count as
    ``lost_penalty`` pixels (skipped when it is None).
    """
    est = np.array([r.peak_position for _, r in trace], dtype=np.float64)
    dev = (est - np.asarray(true_positions, dtype=np.float64)) / momentum_step
    lost = ~np.isfinite(dev)
    if window is not None:
        lost |= (est < window[0]) | (est > window[1])
    if lost_penalty is None:
        dev = dev[~lost]
    else:
        dev[lost] = lost_penalty
    return float(np.sqrt(np.mean(dev ** 2))) if dev.size else float("nan")
