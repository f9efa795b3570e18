"""Cross-entropy, covariance fairness loss and weighted Tchebycheff scalarization.

All three accept one prediction column ``[b]`` or a stack of columns
``[b, N]`` (one per preference) and reduce over the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .nets import PREF_EPS
from .tensor import Tensor, as_tensor, floor_at, log, maximum, mean, reshape, tabs

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossVector:
    ce: float
    fair: float

    def __iter__(self):
        yield self.ce
        yield self.fair


def _column(v, preds: Tensor) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != preds.shape[:1]:
        raise ContractError(f"expected {preds.shape[0]} targets, got shape {v.shape}")
    return v.reshape((-1,) + (1,) * (preds.ndim - 1))


def ce_loss(preds, labels) -> Tensor:
    """Mean binary cross-entropy with log arguments floored at 1e-12."""
    p = as_tensor(preds)
    if p.shape[0] < 1:
        raise ContractError("cross-entropy of an empty batch")
    y = _column(labels, p)
    terms = y * log(floor_at(p, LOG_FLOOR)) + (1.0 - y) * log(floor_at(1.0 - p, LOG_FLOOR))
    return -mean(terms, axis=0)


def fair_loss(preds, sensitive) -> Tensor:
    """Magnitude of the batch covariance between group membership and prediction."""
    p = as_tensor(preds)
    a = _column(sensitive, p)
    if p.shape[0] < 2 or a.min() == a.max():
        raise ContractError("fairness loss needs a batch containing both sensitive groups")
    a_c = a - a.mean(axis=0)
    p_c = p - mean(p, axis=0)
    return tabs(mean(p_c * a_c, axis=0))


def tch_loss(ce, fair, lam) -> Tensor:
    """``max(ce / lam1, fair / lam2)``; ties send the gradient to the CE branch.

    ``lam`` is one preference [2] or a batch [N, 2] matching vector-valued
    ``ce`` and ``fair`` of shape [N].
    """
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < PREF_EPS - 1e-12):
        raise ContractError(f"preference component below {PREF_EPS}: {lam}")
    l1, l2 = lam[..., 0], lam[..., 1]
    return maximum(as_tensor(ce) / l1, as_tensor(fair) / l2)


def loss_vector(preds, labels, sensitive) -> tuple[Tensor, Tensor]:
    return ce_loss(preds, labels), fair_loss(preds, sensitive)
