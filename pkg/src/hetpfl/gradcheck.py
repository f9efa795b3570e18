"""Finite-difference verification of every gradient used in training.

Each check draws random instances, differentiates a scalar function with
the tape and compares against central differences (h = 1e-5). The error
of one instance is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``
per parameter tensor; a check reports the worst instance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import nets
from . import tensor as T
from .federated import ServerState, fusion_objective, scalarized_loss
from .objectives import ce_loss, fair_loss, tch_loss
from .preference import sample_dirichlet, score_function_gradient

FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    instances: int
    seconds: float
    tolerance: float = TOLERANCE
    metric: str = "max_rel_err"

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<22} {self.metric}={self.max_rel_error:.2e}  n={self.instances}  ({self.seconds:.2f}s)"


def numeric_gradient(f: Callable[[Mapping[str, np.ndarray]], float], params: Mapping[str, np.ndarray], h: float = FD_STEP) -> dict[str, np.ndarray]:
    out = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][i] += h
            minus[name][i] -= h
            g[i] = (f(plus) - f(minus)) / (2 * h)
        out[name] = g
    return out


def analytic_gradient(f: Callable[[Mapping], T.Tensor], params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    leaves = T.leaves_of(params)
    with T.GradientTape() as tape:
        loss = f(leaves)
    return T.gradients(loss, tape, leaves)


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def compare(f: Callable[[Mapping], T.Tensor], params: Mapping[str, np.ndarray]) -> float:
    ana = analytic_gradient(f, params)
    num = numeric_gradient(lambda p: float(T.as_tensor(f({k: T.as_tensor(v) for k, v in p.items()})).data), params)
    return max(relative_error(ana[k], num[k]) for k in params)


# ---------------------------------------------------------------------------
# instance generators: each returns (scalar function of params, params) or None to redraw


def _weights(rng, shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _mlp_params(rng, sizes):
    return {
        **{f"w{i}": rng.uniform(-1, 1, (a, b)) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), 1)},
        **{f"b{i}": rng.uniform(-1, 1, b) for i, b in enumerate(sizes[1:], 1)},
    }


def _prefs(rng, n):
    return sample_dirichlet((1.0, 1.0), n, rng, floor=0.05)


def _case_matmul(rng):
    c = _weights(rng, (3, 2))
    return (lambda p: (T.matmul(p["a"], p["b"]) * c).sum()), {"a": _weights(rng, (3, 4)), "b": _weights(rng, (4, 2))}


def _case_batched_matmul(rng):
    c = _weights(rng, (2, 1, 3))
    return (lambda p: (T.matmul(p["a"], p["b"]) * c).sum()), {"a": _weights(rng, (2, 1, 4)), "b": _weights(rng, (2, 4, 3))}


def _elementwise(op):
    def case(rng):
        c = _weights(rng, (5,))
        return (lambda p: (op(p["x"]) * c).sum()), {"x": _weights(rng, (5,))}
    return case


def _case_broadcast_arith(rng):
    def f(p):
        x, y = p["x"], p["y"]
        return ((x * y + x - y) / (y * y + 1.0)).sum()
    return f, {"x": _weights(rng, (3, 4)), "y": _weights(rng, (4,))}


def _case_abs(rng):
    x = _weights(rng, (5,))
    if np.abs(x).min() < 1e-3:
        return None
    return (lambda p: (T.tabs(p["x"]) * np.arange(1, 6)).sum()), {"x": x}


def _case_maximum(rng):
    x, y = _weights(rng, (5,)), _weights(rng, (5,))
    if np.abs(x - y).min() < 1e-3:
        return None
    return (lambda p: (T.maximum(p["x"], p["y"]) * np.arange(1, 6)).sum()), {"x": x, "y": y}


def _case_softmax(rng):
    c = _weights(rng, (3, 4))
    return (lambda p: (T.softmax(p["x"]) * c).sum()), {"x": _weights(rng, (3, 4))}


def _case_shape_ops(rng):
    c = _weights(rng, (3, 2))
    return (lambda p: (T.reshape(p["x"], (2, 3)).T * c).sum() + p["x"][1:, 0].mean()), {"x": _weights(rng, (3, 2))}


def _case_comm(rng):
    x = _weights(rng, (8, 3))
    c = _weights(rng, (8, 4))
    return (lambda p: (nets.comm_forward(p, x) * c).sum()), _mlp_params(rng, (3, 4, 4))


def _case_hyper(rng):
    lam = _prefs(rng, 3)
    c = _weights(rng, (3, nets.HEAD_SIZE))
    return (lambda p: (nets.hyper_forward(p, lam) * c).sum()), _mlp_params(rng, (2, 4, 4, 5))


def _case_predict(rng):
    x = _weights(rng, (8, 3))
    y = rng.integers(0, 2, 8)
    lam = _prefs(rng, 1)[0]
    psi, beta = _mlp_params(rng, (3, 4, 4)), _mlp_params(rng, (2, 4, 4, 5))
    params = {**{f"psi_{k}": v for k, v in psi.items()}, **{f"beta_{k}": v for k, v in beta.items()}}

    def f(p):
        ps = {k[4:]: v for k, v in p.items() if k.startswith("psi_")}
        bs = {k[5:]: v for k, v in p.items() if k.startswith("beta_")}
        return ce_loss(nets.predict(ps, bs, lam, x), y)

    return f, params


def _case_fusion_weights(rng):
    lam = _prefs(rng, 4)
    c = _weights(rng, (4, 3))
    return (lambda p: (nets.fusion_weights(p, lam) * c).sum()), _mlp_params(rng, (2, 4, 4, 3))


def _case_ce(rng):
    y = rng.integers(0, 2, 6)
    return (lambda p: ce_loss(T.sigmoid(p["z"]), y)), {"z": _weights(rng, (6,))}


def _case_fair(rng):
    a = np.array([0, 1] + list(rng.integers(0, 2, 6)))
    z = _weights(rng, (8,))
    if abs(float(fair_loss(T.sigmoid(z).data, a).data)) < 1e-4:
        return None
    return (lambda p: fair_loss(T.sigmoid(p["z"]), a)), {"z": z}


def _case_tch(rng):
    lam = _prefs(rng, 1)[0]
    ce, fair = rng.uniform(0.05, 2.0), rng.uniform(0.01, 0.5)
    if abs(ce / lam[0] - fair / lam[1]) < 1e-3:
        return None
    return (lambda p: tch_loss(p["l"][0], p["l"][1], lam)), {"l": np.array([ce, fair])}


def _case_hyper_step(rng):
    z = np.abs(_weights(rng, (16, 4)))
    y = rng.integers(0, 2, 16)
    a = np.array([0, 1] + list(rng.integers(0, 2, 14)))
    prefs = _prefs(rng, 4)
    beta = _mlp_params(rng, (2, 4, 4, 5))
    theta = nets.hyper_forward(beta, prefs).data
    p = nets.head_predict(z, theta)
    gap = np.abs(ce_loss(p, y).data / prefs[:, 0] - fair_loss(p, a).data / prefs[:, 1]).min()
    if gap < 1e-3:
        return None
    return (lambda q: scalarized_loss(nets.hyper_forward(q, prefs), z, y, a, prefs)), beta


def _case_comm_step(rng):
    x = _weights(rng, (16, 3))
    y = rng.integers(0, 2, 16)
    theta = nets.hyper_forward(_mlp_params(rng, (2, 4, 4, 5)), (0.5, 0.5)).data
    return (lambda p: ce_loss(nets.head_predict(nets.comm_forward(p, x), theta), y)), _mlp_params(rng, (3, 4, 4))


def _case_fusion_chain(rng):
    k = 3
    server = ServerState(psi={}, n_clients=k)
    server.hypernets = [_mlp_params(rng, (2, 4, 4, 5)) for _ in range(k)]
    from .data import LatentDataset

    for _ in range(k):
        n = 12
        server.latents.append(
            LatentDataset(np.abs(_weights(rng, (n, 4))), rng.integers(0, 2, n), np.array([0, 1] + list(rng.integers(0, 2, n - 2))))
        )
    prefs = _prefs(rng, 3)
    phi = _mlp_params(rng, (2, 4, 4, k))
    return (lambda p: fusion_objective(server, p, prefs)), phi


CHECKS: dict[str, Callable] = {
    "matmul": _case_matmul,
    "batched_matmul": _case_batched_matmul,
    "relu": _elementwise(T.relu),
    "sigmoid": _elementwise(T.sigmoid),
    "exp": _elementwise(T.exp),
    "log": _elementwise(lambda x: T.log(x * x + 0.1)),
    "abs": _case_abs,
    "maximum": _case_maximum,
    "softmax": _case_softmax,
    "broadcast_arith": _case_broadcast_arith,
    "shape_ops": _case_shape_ops,
    "comm_forward": _case_comm,
    "hyper_forward": _case_hyper,
    "predict": _case_predict,
    "fusion_weights": _case_fusion_weights,
    "ce_loss": _case_ce,
    "fair_loss": _case_fair,
    "tch_loss": _case_tch,
    "encoder_step": _case_comm_step,
    "hypernet_step": _case_hyper_step,
    "fusion_chain": _case_fusion_chain,
}


def run_check(name: str, instances: int = 50, seed: int = 0) -> CheckResult:
    case = CHECKS[name]
    rng = np.random.default_rng(np.random.SeedSequence([seed, sum(map(ord, name))]))
    t0 = time.perf_counter()
    worst, done = 0.0, 0
    while done < instances:
        inst = case(rng)
        if inst is None:
            continue
        f, params = inst
        worst = max(worst, compare(f, params))
        done += 1
    return CheckResult(name, worst, done, time.perf_counter() - t0)


def nes_toy_check(alpha=(1.0, 1.0), batches: int = 20_000, n: int = 4, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Monte Carlo mean and standard error of the NES estimator for f(lam) = lam1.

    Returns (mean estimate, standard error, analytic gradient of E[lam1]).
    """
    rng = np.random.default_rng(seed)
    a = np.asarray(alpha, dtype=np.float64)
    lam = sample_dirichlet(a, batches * n, rng, floor=0.0).reshape(batches, n, 2)
    est = np.array([score_function_gradient(a, lam[i], lam[i, :, 0]) for i in range(batches)])
    s = a.sum()
    exact = np.array([a[1] / s**2, -a[0] / s**2])
    return est.mean(axis=0), est.std(axis=0, ddof=1) / np.sqrt(batches), exact


def run_all(instances: int = 50, seed: int = 0, nes_batches: int = 20_000) -> list[CheckResult]:
    results = [run_check(name, instances, seed) for name in CHECKS]
    for alpha in ((1.0, 1.0), (2.0, 5.0)):
        t0 = time.perf_counter()
        m, se, exact = nes_toy_check(alpha, nes_batches, seed=seed)
        z = float(np.max(np.abs(m - exact) / se))
        results.append(CheckResult(f"nes_toy{alpha}", z, nes_batches, time.perf_counter() - t0, 3.0, "max_z"))
    return results
