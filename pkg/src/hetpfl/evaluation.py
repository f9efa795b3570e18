"""Test-time metrics, Pareto filtering and hypervolume reports of learned fronts."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nets
from .data import Dataset
from .errors import ContractError
from .preference import hv_2d

THRESHOLD = 0.5


def error_rate(preds, labels, threshold: float = THRESHOLD) -> float:
    """Fraction of rows with ``(pred >= threshold) != label``; works column-wise on [b, m]."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape[0] == 0:
        raise ContractError("error rate of an empty batch")
    yhat = p >= threshold
    y = y.reshape((-1,) + (1,) * (p.ndim - 1))
    out = np.mean(yhat != (y == 1), axis=0)
    return float(out) if np.ndim(out) == 0 else out


def dp_disparity(preds, sensitive, threshold: float = THRESHOLD) -> float:
    """``|P(yhat=1 | a=0) - P(yhat=1 | a=1)|``; column-wise on [b, m]."""
    p = np.asarray(preds, dtype=np.float64)
    a = np.asarray(sensitive)
    g0, g1 = a == 0, a == 1
    if not g0.any() or not g1.any():
        raise ContractError("DP disparity needs both sensitive groups")
    yhat = p >= threshold
    out = np.abs(yhat[g0].mean(axis=0) - yhat[g1].mean(axis=0))
    return float(out) if np.ndim(out) == 0 else out


def dominated_mask(points) -> np.ndarray:
    """True where some other point is <= component-wise and differs."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    le = np.all(p[None, :, :] <= p[:, None, :], axis=2)  # le[i, j]: p_j <= p_i
    ne = np.any(p[None, :, :] != p[:, None, :], axis=2)
    return np.any(le & ne, axis=1)


def pareto_filter(points) -> np.ndarray:
    """Non-dominated subset, duplicates collapsed, sorted by the first objective."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0:
        return p
    keep = np.unique(p[~dominated_mask(p)], axis=0)
    return keep[np.argsort(keep[:, 0], kind="stable")]


def preference_grid(m: int, eps: float = nets.PREF_EPS) -> np.ndarray:
    """``m`` evenly spaced preferences with first component in [eps, 1 - eps].

    The ``m``-point grid is a subset of the ``2m - 1``-point grid.
    """
    if m < 1:
        raise ContractError(f"grid needs m >= 1, got {m}")
    first = np.array([0.5]) if m == 1 else eps + np.arange(m) * (1.0 - 2.0 * eps) / (m - 1)
    return np.column_stack([first, 1.0 - first])


@dataclass
class FrontReport:
    scope: str
    prefs: np.ndarray
    error: np.ndarray
    dp: np.ndarray
    hv: float
    dominated: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.dominated is None:
            self.dominated = dominated_mask(self.points)

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.error, self.dp])

    @property
    def front(self) -> np.ndarray:
        return pareto_filter(self.points)

    @property
    def m(self) -> int:
        return len(self.prefs)

    def summary(self, **meta) -> dict:
        return {"scope": self.scope, "hv": self.hv, "m": self.m, "front_size": int(len(self.front)), **meta}


def front_report(probs: np.ndarray, data: Dataset, prefs: np.ndarray, scope: str, r=(1.0, 1.0)) -> FrontReport:
    err = np.atleast_1d(error_rate(probs, data.labels))
    dp = np.atleast_1d(dp_disparity(probs, data.sensitive))
    points = np.column_stack([err, dp])
    return FrontReport(scope, prefs, err, dp, hv_2d(points, r))


def local_hv_report(psi: Mapping, beta: Mapping, test: Dataset, m: int = 1000, scope: str = "local") -> FrontReport:
    """Front of ``m`` grid-preference models of one hypernet on one client's test data."""
    prefs = preference_grid(m)
    z = nets.comm_forward(psi, test.features).data
    probs = nets.head_predict(z, nets.hyper_forward(beta, prefs).data).data
    return front_report(probs, test, prefs, scope)


def global_hv_report(server, tests: Sequence[Dataset], m: int = 1000) -> FrontReport:
    """Front of the fused global hypernet on the union of all clients' test data."""
    prefs = preference_grid(m)
    union = Dataset.concat(tests)
    z = nets.comm_forward(server.psi, union.features).data
    theta = nets.hyper_forward(server.fused_hypernet(prefs), prefs).data
    probs = nets.head_predict(z, theta).data
    return front_report(probs, union, prefs, "global")


def generate_models(beta: Mapping, prefs) -> list[np.ndarray]:
    """One head-parameter vector per preference, each from its own hypernet call."""
    return [nets.hyper_forward(beta, lam).data for lam in np.asarray(prefs, dtype=np.float64)]


# ---------------------------------------------------------------------------
# export


def write_front_csv(report: FrontReport, path: str | Path, meta: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        w = csv.writer(f)
        w.writerow(["lambda1", "lambda2", "error_rate", "dp_disparity", "dominated"])
        for (l1, l2), e, d, dom in zip(report.prefs, report.error, report.dp, report.dominated):
            w.writerow([repr(float(l1)), repr(float(l2)), repr(float(e)), repr(float(d)), int(dom)])


def write_front_json(report: FrontReport, path: str | Path, meta: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.summary(**meta), f, indent=2, sort_keys=True)
        f.write("\n")
