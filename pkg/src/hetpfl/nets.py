"""Encoder, hypernet, prediction head and FusionNet.

Parameters are plain ``dict[str, ndarray]`` records. Forward functions
accept either arrays or :class:`~hetpfl.tensor.Tensor` values so they can
run with or without a gradient tape.

Shapes:
    encoder   x[b, d_in] -> Linear(d_in, 4) -> ReLU -> Linear(4, 4) -> ReLU
    hypernet  lam[2]     -> Linear(2, 4) -> ReLU -> Linear(4, 4) -> ReLU -> Linear(4, 5)
    head      theta[5] = (w[4], bias); p = sigmoid(z @ w + bias)
    fusion    lam[2]     -> Linear(2, 4) -> ReLU -> Linear(4, 4) -> ReLU -> Linear(4, K) -> softmax
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Params, Tensor, as_tensor, matmul, relu, reshape, sigmoid, softmax

LATENT_DIM = 4
HIDDEN = 4
HEAD_SIZE = LATENT_DIM + 1
PREF_DIM = 2
PREF_EPS = 1e-3
SIMPLEX_TOL = 1e-9


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


def _init_mlp(rng: np.random.Generator, sizes: Sequence[int]) -> Params:
    params: Params = {}
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        params[f"w{i}"], params[f"b{i}"] = _init_linear(rng, fi, fo)
    return params


def init_comm(d_in: int, rng: np.random.Generator) -> Params:
    return _init_mlp(rng, (d_in, HIDDEN, LATENT_DIM))


def init_hyper(rng: np.random.Generator) -> Params:
    return _init_mlp(rng, (PREF_DIM, HIDDEN, HIDDEN, HEAD_SIZE))


def init_fusion(n_clients: int, rng: np.random.Generator) -> Params:
    return _init_mlp(rng, (PREF_DIM, HIDDEN, HIDDEN, n_clients))


def zeros_like_params(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}


def check_preferences(lam) -> np.ndarray:
    """Validate one preference (shape [2]) or a batch (shape [N, 2])."""
    arr = np.asarray(lam.data if isinstance(lam, Tensor) else lam, dtype=np.float64)
    if arr.shape[-1:] != (PREF_DIM,) or arr.ndim > 2:
        raise ContractError(f"preference must have shape [2] or [N, 2], got {arr.shape}")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > SIMPLEX_TOL) or np.any(arr < PREF_EPS - 1e-12):
        raise ContractError(f"preference off the simplex (components >= {PREF_EPS}, sum 1): {arr}")
    return arr


def _mlp(params: Mapping, x: Tensor, n_layers: int) -> Tensor:
    for i in range(1, n_layers + 1):
        x = matmul(x, params[f"w{i}"]) + params[f"b{i}"]
        if i < n_layers:
            x = relu(x)
    return x


def comm_forward(psi: Mapping, x) -> Tensor:
    """Encode features ``x[b, d_in]`` into latents ``[b, 4]``."""
    x = as_tensor(x)
    d_in = np.shape(psi["w1"].data if isinstance(psi["w1"], Tensor) else psi["w1"])[0]
    if x.ndim != 2 or x.shape[1] != d_in:
        raise DimensionError(f"encoder expects inputs of width {d_in}, got shape {x.shape}")
    return relu(_mlp(psi, x, 2))


def hyper_forward(beta: Mapping, lam) -> Tensor:
    """Map preferences to head parameters.

    ``lam`` of shape [2] gives ``theta[5]``; shape [N, 2] gives ``theta[N, 5]``.
    If the hypernet weights carry a leading axis of size N (one hypernet per
    preference, as produced by :func:`fuse` with batched weights), row ``i``
    of ``lam`` goes through hypernet ``i``.
    """
    arr = check_preferences(lam)
    x = as_tensor(arr)
    w1 = beta["w1"]
    batched_weights = np.ndim(w1.data if isinstance(w1, Tensor) else w1) == 3
    if batched_weights:
        n = arr.shape[0] if arr.ndim == 2 else 1
        layers = {}
        for k, v in beta.items():
            v = as_tensor(v)
            layers[k] = v if k.startswith("w") else reshape(v, (v.shape[0], 1, v.shape[1]))
        out = _mlp(layers, reshape(x, (n, 1, PREF_DIM)), 3)
        return reshape(out, (n, HEAD_SIZE))
    if arr.ndim == 1:
        return reshape(_mlp(beta, reshape(x, (1, PREF_DIM)), 3), (HEAD_SIZE,))
    return _mlp(beta, x, 3)


def head_logits(latents, theta) -> Tensor:
    """Logits of the linear head; ``[b]`` for one theta, ``[b, N]`` for ``theta[N, 5]``."""
    z, theta = as_tensor(latents), as_tensor(theta)
    if theta.ndim == 1:
        w = reshape(theta[:LATENT_DIM], (LATENT_DIM, 1))
        return reshape(matmul(z, w) + theta[LATENT_DIM], (z.shape[0],))
    return matmul(z, theta[:, :LATENT_DIM].T) + theta[:, LATENT_DIM]


def head_predict(latents, theta) -> Tensor:
    return sigmoid(head_logits(latents, theta))


def predict(psi: Mapping, beta: Mapping, lam, x) -> Tensor:
    """Probabilities of the preference-specific model ``(psi, h_beta(lam))``."""
    return head_predict(comm_forward(psi, x), hyper_forward(beta, lam))


def fusion_weights(phi: Mapping, lam) -> Tensor:
    """Positive fusion weights summing to 1: ``[K]`` or ``[N, K]``."""
    arr = check_preferences(lam)
    x = as_tensor(arr)
    if arr.ndim == 1:
        return reshape(softmax(_mlp(phi, reshape(x, (1, PREF_DIM)), 3)), (-1,))
    return softmax(_mlp(phi, x, 3))


def uniform_weights(n_clients: int, lam=None) -> np.ndarray:
    if lam is None or np.ndim(lam) == 1:
        return np.full(n_clients, 1.0 / n_clients)
    return np.full((np.shape(lam)[0], n_clients), 1.0 / n_clients)


def fuse(omega, hypernets: Sequence[Mapping[str, np.ndarray]]) -> dict[str, Tensor]:
    """Linear combination ``sum_k omega_k * beta_k`` of client hypernets.

    ``omega`` of shape [K] gives one hypernet; shape [N, K] gives a stack of
    N hypernets (leading axis N on every parameter). Client hypernets are
    treated as constants; gradients flow into ``omega`` only.
    """
    omega = as_tensor(omega)
    k = len(hypernets)
    if omega.shape[-1] != k:
        raise DimensionError(f"fuse: {omega.shape[-1]} weights for {k} hypernets")
    names = list(hypernets[0])
    for i, h in enumerate(hypernets[1:], start=2):
        if list(h) != names or any(np.shape(h[n]) != np.shape(hypernets[0][n]) for n in names):
            raise DimensionError(f"fuse: hypernet {i} does not match the shapes of hypernet 1")
    batched = omega.ndim == 2
    w = omega if batched else reshape(omega, (1, k))
    out: dict[str, Tensor] = {}
    for name in names:
        shape = np.shape(hypernets[0][name])
        stacked = np.stack([np.asarray(h[name], dtype=np.float64).reshape(-1) for h in hypernets])
        flat = matmul(w, stacked)
        out[name] = reshape(flat, (w.shape[0], *shape) if batched else shape)
    return out


def n_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.size(v) for v in params.values()))
