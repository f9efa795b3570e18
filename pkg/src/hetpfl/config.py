"""Experiment configuration documents: validation, defaults, hashing, dataset loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import CsvSchema, Dataset, generate_synthetic, load_csv, partition_dirichlet
from .errors import ConfigError
from .federated import MODES, RoundConfig

LOCAL_EPOCHS = 30  # tau_c + tau_p per round


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    n: int = 5000
    paths: tuple[str, ...] = ()
    schema: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    clients: int = 3
    heterogeneity: float = 5.0
    mode: str = "hetpfl"
    seeds: tuple[int, ...] = (0,)
    eval_points: int = 1000
    allow_local_epochs: bool = False
    output_dir: str | None = None
    training: RoundConfig = field(default_factory=RoundConfig)

    def round_config(self, seed: int) -> RoundConfig:
        return dataclasses.replace(self.training, seed=seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["training"].pop("seed")
        return _jsonable(d)

    def hash(self) -> str:
        """Digest of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def warnings(self) -> list[str]:
        t = self.training
        if t.tau_c + t.tau_p != LOCAL_EPOCHS and not self.allow_local_epochs:
            return [f"tau_c + tau_p = {t.tau_c + t.tau_p}, expected {LOCAL_EPOCHS} local epochs per round"]
        return []


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


# ---------------------------------------------------------------------------
# validation


_TRAINING_TYPES = {
    "rounds": int, "tau_c": int, "tau_p": int, "n_prefs": int, "fusion_epochs": int,
    "lr": float, "alpha_lr": float, "batch_size": int, "pref_tilde": "pair", "ref_point": "pair",
    "hvc_eval_size": int, "alpha_optimizer": str, "lr_psi": "optfloat", "lr_beta": "optfloat",
    "lr_phi": "optfloat", "val_grid": int,
}
_TOP_TYPES = {
    "dataset": dict, "clients": int, "heterogeneity": float, "mode": str, "seeds": "intlist",
    "eval_points": int, "allow_local_epochs": bool, "output_dir": "optstr", "training": dict,
}
_DATASET_TYPES = {"kind": str, "n": int, "paths": "strlist", "schema": "optstr"}


def _check(where: str, value: Any, kind) -> Any:
    def bad(expected: str):
        raise ConfigError(f"{where}: expected {expected}, got {value!r}")

    if kind is bool:
        return value if isinstance(value, bool) else bad("a boolean")
    if kind is int:
        return value if isinstance(value, int) and not isinstance(value, bool) else bad("an integer")
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return float(value) if ok else bad("a number")
    if kind is str:
        return value if isinstance(value, str) else bad("a string")
    if kind is dict:
        return value if isinstance(value, dict) else bad("an object")
    if kind == "optfloat":
        return None if value is None else _check(where, value, float)
    if kind == "optstr":
        return None if value is None else _check(where, value, str)
    if kind == "pair":
        if not isinstance(value, list) or len(value) != 2:
            bad("a list of two numbers")
        return tuple(_check(f"{where}[{i}]", v, float) for i, v in enumerate(value))
    if kind == "intlist":
        if not isinstance(value, list) or not value:
            bad("a non-empty list of integers")
        return tuple(_check(f"{where}[{i}]", v, int) for i, v in enumerate(value))
    if kind == "strlist":
        if not isinstance(value, list):
            bad("a list of strings")
        return tuple(_check(f"{where}[{i}]", v, str) for i, v in enumerate(value))
    raise AssertionError(kind)


def _section(where: str, doc: dict, types: dict) -> dict:
    unknown = sorted(set(doc) - set(types))
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    return {k: _check(f"{where}.{k}" if where else k, v, types[k]) for k, v in doc.items()}


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Validate a config document; raises ConfigError naming the first violation."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    top = _section("", doc, _TOP_TYPES)
    dataset = DatasetSpec(**_section("dataset", top.pop("dataset", {}), _DATASET_TYPES))
    try:
        training = RoundConfig(**_section("training", top.pop("training", {}), _TRAINING_TYPES))
    except ConfigError as exc:
        raise ConfigError(f"training: {exc}") from None
    cfg = ExperimentConfig(dataset=dataset, training=training, **top)

    if dataset.kind not in ("synthetic", "csv"):
        raise ConfigError(f"dataset.kind: expected 'synthetic' or 'csv', got {dataset.kind!r}")
    if dataset.kind == "csv" and (not dataset.paths or dataset.schema is None):
        raise ConfigError("dataset: csv datasets need 'paths' and 'schema'")
    if dataset.kind == "synthetic" and dataset.n < 100 * cfg.clients:
        raise ConfigError(f"dataset.n: need at least 100 samples per client, got {dataset.n}")
    if cfg.clients < 1 or (cfg.clients == 1 and dataset.kind == "synthetic"):
        raise ConfigError(f"clients: need at least 2 for synthetic data, got {cfg.clients}")
    if not cfg.heterogeneity > 0:
        raise ConfigError(f"heterogeneity: must be > 0, got {cfg.heterogeneity}")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode: expected one of {sorted(MODES)}, got {cfg.mode!r}")
    if cfg.eval_points < 1:
        raise ConfigError("eval_points: must be >= 1")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds: duplicate entries")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve_paths(config_from_dict(doc), Path(path).resolve().parent)


def resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    """Make relative CSV paths absolute, interpreting them against ``base``."""
    if cfg.dataset.kind != "csv":
        return cfg
    ds = dataclasses.replace(
        cfg.dataset,
        paths=tuple(str(base / p) for p in cfg.dataset.paths),
        schema=str(base / cfg.dataset.schema),
    )
    return dataclasses.replace(cfg, dataset=ds)


def load_datasets(cfg: ExperimentConfig, seed: int) -> list[Dataset]:
    """Client datasets for one seed: synthetic draws, one CSV per client, or a partitioned CSV."""
    spec = cfg.dataset
    if spec.kind == "synthetic":
        return generate_synthetic(spec.n, cfg.clients, cfg.heterogeneity, seed)
    schema = CsvSchema.load(spec.schema)
    frames = [load_csv(p, schema) for p in spec.paths]
    if len(frames) > 1 or cfg.clients == 1:
        if len(frames) != cfg.clients:
            raise ConfigError(f"clients = {cfg.clients} but {len(frames)} CSV files were given")
        return frames
    return partition_dirichlet(frames[0], cfg.clients, cfg.heterogeneity, seed)
