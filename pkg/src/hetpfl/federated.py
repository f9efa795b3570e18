"""Federated training loop: Phase I (encoder FedAvg, hypernets, sampling
distributions) and Phase II (FusionNet over the collected hypernets).

Every client draws randomness only from streams keyed by
``(seed, client id, round, purpose)``, so results do not depend on the
order in which clients are processed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nets
from .data import Dataset, LatentDataset, SplitSpec, minibatches, split
from .errors import ConfigError, ContractError, DimensionError, HetPFLError, NumericError, ProtocolError
from .objectives import ce_loss, fair_loss, tch_loss
from .preference import PrefBatch, nes_gradient, sample_dirichlet, update_alpha
from .tensor import AdamState, GradientTape, Params, adam_step, gradients, leaves_of, mean

log = logging.getLogger(__name__)

MODES = {
    # mode: (adapt sampling distribution, learned fusion)
    "hetpfl": (True, True),
    "ablate-psa": (False, True),
    "ablate-phf": (True, False),
    "ablate-both": (False, False),
}

# purpose codes for rng streams
_INIT, _SPLIT, _COMM, _HYPER, _EVALBATCH, _FUSION = range(1, 7)
SERVER = 10_000


class RunError(HetPFLError, RuntimeError):
    """A client or server step failed; the message carries round/client context."""


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class RoundConfig:
    rounds: int = 15
    tau_c: int = 15
    tau_p: int = 15
    n_prefs: int = 4
    fusion_epochs: int = 200
    lr: float = 0.01
    alpha_lr: float = 0.05
    batch_size: int = 128
    pref_tilde: tuple[float, float] = (0.5, 0.5)
    ref_point: tuple[float, float] = (1.0, 1.0)
    hvc_eval_size: int = 128  # 0 evaluates HVC loss vectors on the whole training split
    alpha_optimizer: str = "adam"
    lr_psi: float | None = None
    lr_beta: float | None = None
    lr_phi: float | None = None
    val_grid: int = 51
    seed: int = 0

    def __post_init__(self):
        if self.alpha_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"alpha_optimizer must be 'adam' or 'sgd', got {self.alpha_optimizer!r}")
        for name in ("rounds", "tau_c", "tau_p", "fusion_epochs", "hvc_eval_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_prefs < 1 or self.batch_size < 1:
            raise ConfigError("n_prefs and batch_size must be >= 1")

    @property
    def eta_psi(self) -> float:
        return self.lr_psi if self.lr_psi is not None else self.lr

    @property
    def eta_beta(self) -> float:
        return self.lr_beta if self.lr_beta is not None else self.lr

    @property
    def eta_phi(self) -> float:
        return self.lr_phi if self.lr_phi is not None else self.lr


@dataclass
class ClientState:
    cid: int
    train: Dataset
    val: Dataset
    test: Dataset
    psi: Params
    beta: Params
    alpha: np.ndarray
    psi_opt: AdamState
    beta_opt: AdamState
    alpha_opt: AdamState

    @classmethod
    def create(cls, cid: int, train: Dataset, val: Dataset, test: Dataset, psi: Params, beta: Params) -> "ClientState":
        alpha = np.ones(2)
        return cls(
            cid, train, val, test,
            nets.copy_params(psi), nets.copy_params(beta), alpha,
            AdamState.like(psi), AdamState.like(beta), AdamState.like({"alpha": alpha}),
        )


@dataclass
class ServerState:
    psi: Params
    n_clients: int
    phi: Params | None = None
    phi_opt: AdamState | None = None
    hypernets: list[Params] = field(default_factory=list)
    latents: list[LatentDataset] = field(default_factory=list)
    learned_fusion: bool = True

    def fused_hypernet(self, prefs: np.ndarray) -> dict:
        """Global hypernet(s) for ``prefs`` ([2] or [N, 2]) as numpy-backed tensors."""
        if len(self.hypernets) != self.n_clients:
            raise ProtocolError("hypernets have not been collected from every client")
        if self.learned_fusion and self.phi is not None:
            omega = nets.fusion_weights(self.phi, prefs).data
        else:
            omega = nets.uniform_weights(self.n_clients, prefs)
        return nets.fuse(omega, self.hypernets)


# ---------------------------------------------------------------------------
# client steps


def _finite(value, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what}")


def local_comm_update(
    client: ClientState,
    tau_c: int,
    lr: float,
    rng: np.random.Generator,
    pref: Sequence[float] = (0.5, 0.5),
    batch_size: int = 128,
    context: str = "",
) -> float | None:
    """``tau_c`` epochs of Adam on the encoder minimising CE at a fixed preference.

    The client's hypernet is frozen, so its head is evaluated once. Returns
    the mean CE over the last epoch (None if ``tau_c == 0``).
    """
    theta = nets.hyper_forward(client.beta, pref).data
    x, y, a = client.train.features, client.train.labels, client.train.sensitive
    last = None
    for epoch in range(tau_c):
        losses = []
        for b, idx in enumerate(minibatches(a, batch_size, rng)):
            leaves = leaves_of(client.psi)
            with GradientTape() as tape:
                loss = ce_loss(nets.head_predict(nets.comm_forward(leaves, x[idx]), theta), y[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"{context} encoder step: non-finite CE at epoch {epoch}, batch {b}")
            client.psi, client.psi_opt = adam_step(client.psi, gradients(loss, tape, leaves), client.psi_opt, lr)
            losses.append(float(loss.data))
        last = float(np.mean(losses))
    return last


def scalarized_loss(theta, latents, labels, sensitive, prefs):
    """Mean over preferences of the Tchebycheff loss of heads ``theta[N, 5]``."""
    p = nets.head_predict(latents, theta)
    return mean(tch_loss(ce_loss(p, labels), fair_loss(p, sensitive), prefs))


def loss_vectors(theta: np.ndarray, latents: np.ndarray, labels, sensitive) -> np.ndarray:
    """(CE, fairness) per head, shape [N, 2]."""
    p = nets.head_predict(latents, theta)
    return np.column_stack([ce_loss(p, labels).data, fair_loss(p, sensitive).data]).reshape(-1, 2)


def eval_batch_indices(ds: Dataset, size: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed evaluation subset holding both sensitive groups (whole set if ``size`` is 0)."""
    if size <= 0 or size >= len(ds):
        return np.arange(len(ds))
    return minibatches(ds.sensitive, size, rng)[0]


def local_hyper_update(
    client: ClientState,
    tau_p: int,
    n_prefs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 128,
    eval_idx: np.ndarray | None = None,
    fixed_prefs: np.ndarray | None = None,
    context: str = "",
) -> PrefBatch | None:
    """``tau_p`` hypernet steps, each with N fresh preferences from Dirichlet(alpha).

    A step is one epoch of mini-batches; each mini-batch loss is the mean
    Tchebycheff loss over the N preferences, with the encoder frozen. The
    last step's preferences and their loss vectors (on ``eval_idx``) are
    returned for the alpha update; None when ``tau_p == 0`` or ``N < 2``.
    """
    tr = client.train
    z = nets.comm_forward(client.psi, tr.features).data
    prefs = None
    for step in range(tau_p):
        prefs = sample_dirichlet(client.alpha, n_prefs, rng) if fixed_prefs is None else np.asarray(fixed_prefs, float).reshape(-1, 2)
        for b, idx in enumerate(minibatches(tr.sensitive, batch_size, rng)):
            leaves = leaves_of(client.beta)
            with GradientTape() as tape:
                theta = nets.hyper_forward(leaves, prefs)
                loss = scalarized_loss(theta, z[idx], tr.labels[idx], tr.sensitive[idx], prefs)
            if not np.isfinite(loss.data):
                raise NumericError(f"{context} hypernet step {step}: non-finite loss at batch {b}")
            client.beta, client.beta_opt = adam_step(client.beta, gradients(loss, tape, leaves), client.beta_opt, lr)
    if prefs is None or len(prefs) < 2:
        return None
    idx = np.arange(len(tr)) if eval_idx is None else eval_idx
    theta = nets.hyper_forward(client.beta, prefs).data
    return PrefBatch(client.alpha, prefs, loss_vectors(theta, z[idx], tr.labels[idx], tr.sensitive[idx]))


def _adam_direction(state: AdamState, g: np.ndarray) -> tuple[np.ndarray, AdamState]:
    zero = {"alpha": np.zeros_like(g)}
    moved, state = adam_step(zero, {"alpha": g}, state, 1.0)
    return -moved["alpha"], state


def local_alpha_update(
    client: ClientState, batch: PrefBatch, kappa: float, ref_point=(1.0, 1.0), optimizer: str = "adam"
) -> np.ndarray:
    """Move alpha along the NES estimate of grad E[-HVC]; returns the new alpha.

    With ``optimizer="adam"`` the estimate is Adam-preconditioned before the
    clamped step, otherwise it is applied directly.
    """
    g = nes_gradient(batch, ref_point)
    if optimizer == "adam":
        g, client.alpha_opt = _adam_direction(client.alpha_opt, g)
    client.alpha = update_alpha(client.alpha, g, kappa)
    return client.alpha


# ---------------------------------------------------------------------------
# server steps


def server_aggregate_psi(psis: Sequence[Params]) -> Params:
    """Unweighted parameter-wise mean of the clients' encoders."""
    if not psis:
        raise ProtocolError("no encoders to aggregate")
    ref = psis[0]
    for i, p in enumerate(psis[1:], start=2):
        if p.keys() != ref.keys() or any(np.shape(p[k]) != np.shape(ref[k]) for k in ref):
            raise DimensionError(f"encoder of client {i} does not match client 1's shapes")
    return {k: np.mean([p[k] for p in psis], axis=0) for k in ref}


def validation_metrics(client: ClientState, psi: Params, pref, grid: int = 0) -> dict:
    from .evaluation import dp_disparity, error_rate, local_hv_report

    v = client.val
    p = nets.predict(psi, client.beta, pref, v.features)
    ce, fair = ce_loss(p, v.labels), fair_loss(p, v.sensitive)
    out = {
        "val_ce": float(ce.data),
        "val_fair": float(fair.data),
        "val_tch": float(tch_loss(ce, fair, pref).data),
        "val_error": error_rate(p.data, v.labels),
        "val_dp": dp_disparity(p.data, v.sensitive),
    }
    if grid >= 2:
        out["val_hv"] = local_hv_report(psi, client.beta, v, grid).hv
    return out


def phase1_round(
    clients: Sequence[ClientState],
    server: ServerState,
    cfg: RoundConfig,
    t: int,
    adapt_alpha: bool = True,
    order: Sequence[int] | None = None,
) -> list[dict]:
    """One communication round; returns a telemetry record per client."""
    for c in clients:
        c.psi = nets.copy_params(server.psi)
    records = {}
    for i in order if order is not None else range(len(clients)):
        c = clients[i]
        ctx = f"round {t}, client {c.cid}:"
        try:
            ce = local_comm_update(
                c, cfg.tau_c, cfg.eta_psi, stream(cfg.seed, c.cid, t, _COMM), cfg.pref_tilde, cfg.batch_size, ctx
            )
            eval_idx = eval_batch_indices(c.train, cfg.hvc_eval_size, stream(cfg.seed, c.cid, t, _EVALBATCH))
            hyper_rng = stream(cfg.seed, c.cid, t, _HYPER)
            batch = None
            for _ in range(cfg.tau_p):
                batch = local_hyper_update(
                    c, 1, cfg.n_prefs, cfg.eta_beta, hyper_rng, cfg.batch_size, eval_idx, context=ctx
                )
                if adapt_alpha and batch is not None:
                    local_alpha_update(c, batch, cfg.alpha_lr, cfg.ref_point, cfg.alpha_optimizer)
        except HetPFLError as exc:
            raise RunError(f"{ctx} {exc}") from exc
        records[c.cid] = {
            "round": t,
            "client": c.cid,
            "train_ce": ce,
            "alpha": [float(v) for v in c.alpha],
            "pref_batch": None if batch is None else {"prefs": batch.prefs.tolist(), "losses": batch.losses.tolist()},
        }
    server.psi = server_aggregate_psi([c.psi for c in clients])
    for c in clients:
        records[c.cid].update(validation_metrics(c, server.psi, cfg.pref_tilde, cfg.val_grid))
    return [records[c.cid] for c in clients]


def phase2_collect(clients: Sequence[ClientState], server: ServerState) -> ServerState:
    """Copy every hypernet to the server and encode each client's training data."""
    if len(clients) != server.n_clients:
        raise ProtocolError(f"expected {server.n_clients} clients, got {len(clients)}")
    server.hypernets = [nets.copy_params(c.beta) for c in clients]
    server.latents = [
        LatentDataset(nets.comm_forward(server.psi, c.train.features).data, c.train.labels.copy(), c.train.sensitive.copy())
        for c in clients
    ]
    return server


FUSION_EVAL_GRID = np.column_stack([np.linspace(0.1, 0.9, 9), 1 - np.linspace(0.1, 0.9, 9)])


def fusion_objective(server: ServerState, phi, prefs: np.ndarray, batches: Sequence[np.ndarray] | None = None):
    """Mean over clients and preferences of the Tchebycheff loss of the fused hypernet."""
    omega = nets.fusion_weights(phi, prefs)
    theta = nets.hyper_forward(nets.fuse(omega, server.hypernets), prefs)
    total = 0.0
    for k, q in enumerate(server.latents):
        idx = slice(None) if batches is None else batches[k]
        total = total + scalarized_loss(theta, q.latents[idx], q.labels[idx], q.sensitive[idx], prefs)
    return total * (1.0 / len(server.latents))


def phase2_train_fusion(
    server: ServerState,
    epochs: int,
    lr: float,
    n_prefs: int,
    rng: np.random.Generator,
    batch_size: int = 128,
    sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None,
) -> list[dict]:
    """Train the FusionNet for ``epochs`` passes over the collected latents.

    Each step draws ``n_prefs`` preferences (uniform on the simplex by
    default), fuses the client hypernets per preference and takes an Adam
    step on the FusionNet only. Returns per-epoch training and fixed-grid
    evaluation losses.
    """
    if len(server.latents) != server.n_clients or len(server.hypernets) != server.n_clients:
        raise ProtocolError("phase 2 training needs the collection from every client")
    if server.phi is None:
        raise ProtocolError("server has no FusionNet")
    if server.phi_opt is None:
        server.phi_opt = AdamState.like(server.phi)
    draw = sampler or (lambda n, g: sample_dirichlet((1.0, 1.0), n, g))
    history = []
    for epoch in range(epochs):
        per_client = [minibatches(q.sensitive, batch_size, rng) for q in server.latents]
        steps = max(len(b) for b in per_client)
        losses = []
        for s in range(steps):
            prefs = draw(n_prefs, rng)
            batches = [b[s % len(b)] for b in per_client]
            leaves = leaves_of(server.phi)
            with GradientTape() as tape:
                loss = fusion_objective(server, leaves, prefs, batches)
            if not np.isfinite(loss.data):
                raise RunError(f"fusion epoch {epoch}, step {s}: non-finite loss")
            server.phi, server.phi_opt = adam_step(server.phi, gradients(loss, tape, leaves), server.phi_opt, lr)
            losses.append(float(loss.data))
        history.append(
            {
                "epoch": epoch + 1,
                "train_loss": float(np.mean(losses)),
                "eval_loss": float(fusion_objective(server, server.phi, FUSION_EVAL_GRID).data),
            }
        )
    return history


# ---------------------------------------------------------------------------
# full run


def build_clients(datasets: Sequence[Dataset], seed: int) -> tuple[list[ClientState], ServerState]:
    if not datasets:
        raise ContractError("need at least one client dataset")
    d_in = datasets[0].n_features
    if any(d.n_features != d_in for d in datasets):
        raise DimensionError("clients disagree on the feature width")
    psi = nets.init_comm(d_in, stream(seed, SERVER, 0, _INIT))
    clients = []
    for k, ds in enumerate(datasets):
        seed_k = int(stream(seed, k, 0, _SPLIT).integers(2**31))
        train, val, test = split(ds, SplitSpec(seed=seed_k))
        beta = nets.init_hyper(stream(seed, k, 0, _INIT))
        clients.append(ClientState.create(k, train, val, test, psi, beta))
    server = ServerState(psi=nets.copy_params(psi), n_clients=len(datasets))
    return clients, server


@dataclass
class RunArtifacts:
    mode: str
    seed: int
    clients: list[ClientState]
    server: ServerState
    telemetry: list[dict]
    fusion_history: list[dict]
    local_reports: list = field(default_factory=list)
    global_report: object = None

    @property
    def mean_local_hv(self) -> float:
        return float(np.mean([r.hv for r in self.local_reports]))

    @property
    def global_hv(self) -> float:
        return float(self.global_report.hv)

    def final_val_tch(self) -> float:
        last = max(r["round"] for r in self.telemetry)
        return float(np.mean([r["val_tch"] for r in self.telemetry if r["round"] == last]))


def run_experiment(
    datasets: Sequence[Dataset],
    cfg: RoundConfig,
    mode: str = "hetpfl",
    eval_points: int = 1000,
    on_round: Callable[[int, list[dict]], None] | None = None,
) -> RunArtifacts:
    """Phase I for ``cfg.rounds`` rounds, then Phase II, then test-set fronts.

    ``ablate-psa`` keeps every alpha at (1, 1); ``ablate-phf`` replaces the
    FusionNet by a plain average of the client hypernets.
    """
    from .evaluation import global_hv_report, local_hv_report

    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
    adapt_alpha, learned_fusion = MODES[mode]
    clients, server = build_clients(datasets, cfg.seed)
    telemetry: list[dict] = []
    for t in range(1, cfg.rounds + 1):
        recs = phase1_round(clients, server, cfg, t, adapt_alpha)
        telemetry.extend(recs)
        if on_round:
            on_round(t, recs)
    # clients end Phase I holding the final aggregate
    for c in clients:
        c.psi = nets.copy_params(server.psi)
    phase2_collect(clients, server)
    server.learned_fusion = learned_fusion
    history: list[dict] = []
    if learned_fusion:
        server.phi = nets.init_fusion(len(clients), stream(cfg.seed, SERVER, 0, _FUSION))
        server.phi_opt = AdamState.like(server.phi)
        history = phase2_train_fusion(
            server, cfg.fusion_epochs, cfg.eta_phi, cfg.n_prefs, stream(cfg.seed, SERVER, 1, _FUSION), cfg.batch_size
        )
    art = RunArtifacts(mode, cfg.seed, clients, server, telemetry, history)
    art.local_reports = [local_hv_report(server.psi, c.beta, c.test, eval_points, scope=f"local:{c.cid}") for c in clients]
    art.global_report = global_hv_report(server, [c.test for c in clients], eval_points)
    return art
