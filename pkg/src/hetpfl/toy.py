"""Two-quadratic toy problem with a known convex Pareto front.

Objectives are ``f1(x) = |x - a|^2`` and ``f2(x) = |x - b|^2``. The Pareto set
is the segment from ``a`` to ``b`` and the front is ``sqrt(f1) + sqrt(f2) = |a - b|``.
Minimising the Tchebycheff loss for an interior preference should land on
the front point whose loss vector is parallel to the preference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objectives import tch_loss
from .tensor import AdamState, GradientTape, adam_step, gradients, leaves_of, tsum

A = np.array([0.0, 0.0])
B = np.array([1.0, 2.0])


@dataclass
class ToyResult:
    pref: np.ndarray
    x: np.ndarray
    losses: np.ndarray
    angle_deg: float


def objectives(x, a=A, b=B):
    """(f1, f2) for a tensor or array ``x`` of shape [2]."""
    d1, d2 = x - a, x - b
    return tsum(d1 * d1), tsum(d2 * d2)


def angle_to(losses, pref) -> float:
    v, w = np.asarray(losses, float), np.asarray(pref, float)
    cos = v @ w / (np.linalg.norm(v) * np.linalg.norm(w))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def front_point(pref, a=A, b=B) -> np.ndarray:
    """Closed-form loss vector on the front parallel to ``pref``."""
    l1, l2 = pref
    # f1 = t^2 d^2 and f2 = (1 - t)^2 d^2 with f1 / f2 = l1 / l2
    t = np.sqrt(l1) / (np.sqrt(l1) + np.sqrt(l2))
    d2 = float(np.sum((np.asarray(b) - np.asarray(a)) ** 2))
    return np.array([t * t * d2, (1 - t) ** 2 * d2])


def solve(pref, seed: int = 0, steps: int = 1500, lr: float = 0.05, final_lr: float = 1e-4) -> ToyResult:
    """Adam on the Tchebycheff loss from a random start, with a geometric step-size decay."""
    rng = np.random.default_rng(seed)
    params = {"x": rng.uniform(-2.0, 3.0, size=2)}
    state = AdamState.like(params)
    decay = (final_lr / lr) ** (1.0 / max(steps - 1, 1))
    for t in range(steps):
        leaves = leaves_of(params)
        with GradientTape() as tape:
            f1, f2 = objectives(leaves["x"])
            loss = tch_loss(f1, f2, pref)
        params, state = adam_step(params, gradients(loss, tape, leaves), state, lr * decay**t)
    f = np.array([float(v.data) for v in objectives(params["x"])])
    return ToyResult(np.asarray(pref, float), params["x"], f, angle_to(f, pref))


def alignment_study(n_prefs: int = 9, seeds=(0, 1, 2), **kw) -> np.ndarray:
    """Angular deviations [seed, pref] for ``n_prefs`` evenly spaced interior preferences."""
    first = np.linspace(0.1, 0.9, n_prefs)
    prefs = np.column_stack([first, 1 - first])
    return np.array([[solve(p, s, **kw).angle_deg for p in prefs] for s in seeds])
