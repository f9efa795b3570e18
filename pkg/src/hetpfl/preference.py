"""Dirichlet preference sampling, exact 2-D hypervolume and the NES update of alpha."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .nets import PREF_EPS

ALPHA_MIN = 0.1
ALPHA_MAX = 50.0
DEFAULT_REF = (1.0, 1.0)


def check_alpha(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if a.shape != (2,) or not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ContractError(f"Dirichlet parameters must be two positive reals, got {alpha}")
    return a


def sample_dirichlet(alpha, n: int, rng: np.random.Generator, floor: float = PREF_EPS) -> np.ndarray:
    """``n`` preferences [n, 2] from Dirichlet(alpha) via normalised Gamma draws.

    Components are floored at ``floor`` and the pair renormalised, so every
    row stays on the simplex with both entries >= ``floor``.
    """
    a = check_alpha(alpha)
    if n < 1:
        raise ContractError(f"need n >= 1 samples, got {n}")
    g = rng.standard_gamma(a, size=(n, 2))
    first = g[:, 0] / (g[:, 0] + g[:, 1])
    if floor > 0:
        # on the 2-simplex, floor-then-renormalise is a clip of the first coordinate
        first = np.clip(first, floor, 1.0 - floor)
    return np.column_stack([first, 1.0 - first])


# asymptotic-series coefficients B_2k / (2k) for k = 1..7
_DIGAMMA_SERIES = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)


def digamma(x: float) -> float:
    """Digamma function for ``x > 0``: recurrence up to x >= 6, then the asymptotic series."""
    x = float(x)
    if not x > 0 or not math.isfinite(x):
        raise ContractError(f"digamma is defined here only for finite x > 0, got {x}")
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    power = inv2
    for c in _DIGAMMA_SERIES:
        series += c * power
        power *= inv2
    return acc + math.log(x) - 0.5 / x - series


def log_density_grad(alpha, lam) -> np.ndarray:
    """Gradient of ``log Dirichlet(lam | alpha)`` w.r.t. ``alpha``; rows for batched ``lam``."""
    a = check_alpha(alpha)
    lam = np.asarray(lam, dtype=np.float64)
    shared = digamma(a[0] + a[1])
    return np.log(lam) - np.array([digamma(a[0]), digamma(a[1])]) + shared


# ---------------------------------------------------------------------------
# hypervolume


def _prepare(points, r) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (2,) or np.any(r <= 0):
        raise ContractError(f"reference point must be two positive reals, got {r}")
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(p)):
        raise ContractError("hypervolume of non-finite points")
    return np.maximum(p, 0.0), r


def _sweep(p: np.ndarray, r: np.ndarray) -> float:
    inside = p[(p[:, 0] < r[0]) & (p[:, 1] < r[1])]
    if len(inside) == 0:
        return 0.0
    order = np.lexsort((inside[:, 1], inside[:, 0]))
    area, ceiling = 0.0, r[1]
    for x, y in inside[order]:
        if y < ceiling:
            area += (r[0] - x) * (ceiling - y)
            ceiling = y
    return float(area)


def hv_2d(points, r=DEFAULT_REF) -> float:
    """Exact area dominated by ``points`` (minimisation) inside the box ``[0, r]``.

    Negative coordinates are clipped to 0; points on or beyond the
    reference point in either coordinate add nothing.
    """
    p, r = _prepare(points, r)
    return _sweep(p, r)


def hvc(i: int, points, r=DEFAULT_REF) -> float:
    """Hypervolume lost by removing point ``i`` from ``points``."""
    p, r = _prepare(points, r)
    if not 0 <= i < len(p):
        raise ContractError(f"index {i} out of range for {len(p)} points")
    rest = np.delete(p, i, axis=0)
    if np.any(np.all(rest == p[i], axis=1)):
        return 0.0
    return max(0.0, _sweep(p, r) - _sweep(rest, r))


def hvc_all(points, r=DEFAULT_REF) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.array([hvc(i, p, r) for i in range(len(p))])


# ---------------------------------------------------------------------------
# NES update of the sampling distribution


@dataclass
class PrefBatch:
    """Preferences sampled from ``alpha`` and the loss vector each one induced."""

    alpha: np.ndarray
    prefs: np.ndarray
    losses: np.ndarray

    def __post_init__(self):
        self.alpha = check_alpha(self.alpha)
        self.prefs = np.asarray(self.prefs, dtype=np.float64).reshape(-1, 2)
        self.losses = np.asarray(self.losses, dtype=np.float64).reshape(-1, 2)
        if len(self.prefs) < 2:
            raise ContractError(f"preference batch needs N >= 2 entries, got {len(self.prefs)}")
        if len(self.prefs) != len(self.losses):
            raise ContractError("preference batch: prefs and losses differ in length")
        if not np.all(np.isfinite(self.losses)):
            raise NumericError("preference batch contains non-finite loss vectors")

    def __len__(self) -> int:
        return len(self.prefs)


def score_function_gradient(alpha, prefs, values) -> np.ndarray:
    """Score-function estimate of ``grad_alpha E[value]`` with a leave-one-out baseline.

    Each sample's baseline is the mean value of the other N-1 samples, which
    keeps the estimator unbiased for independent draws. That equals
    ``N/(N-1) * (value - batch mean)``; constant batches give exactly zero.
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise ContractError("baseline needs at least two samples")
    if np.all(values == values[0]):
        return np.zeros(2)
    adv = (values - values.mean()) * (n / (n - 1))
    scores = log_density_grad(alpha, prefs)
    return (adv[:, None] * scores).mean(axis=0)


def nes_gradient(batch: PrefBatch, r=DEFAULT_REF) -> np.ndarray:
    """Estimated gradient of ``E[-HVC]`` w.r.t. alpha for one preference batch."""
    contributions = hvc_all(batch.losses, r)
    return score_function_gradient(batch.alpha, batch.prefs, -contributions)


def update_alpha(alpha, grad, lr: float) -> np.ndarray:
    """Descent step ``alpha - lr * grad`` clamped to [0.1, 50]."""
    a = check_alpha(alpha)
    g = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite alpha gradient {g}")
    if not lr > 0:
        raise ContractError(f"alpha learning rate must be positive, got {lr}")
    return np.clip(a - lr * g, ALPHA_MIN, ALPHA_MAX)
