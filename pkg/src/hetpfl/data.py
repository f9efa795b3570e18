"""Datasets: synthetic generation, CSV ingestion, splitting and client partitioning."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, ParseError, PartitionError, SchemaError

log = logging.getLogger(__name__)

MIN_CLIENT_SAMPLES = 20
MAX_REDRAWS = 100


@dataclass(frozen=True)
class Dataset:
    """Features with binary labels and a binary sensitive attribute."""

    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        a = np.asarray(self.sensitive, dtype=np.int64)
        if x.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {x.shape}")
        n = x.shape[0]
        if n == 0:
            raise ContractError("dataset is empty")
        if len(y) != n or len(a) != n:
            raise ContractError(f"length mismatch: features {n}, labels {len(y)}, sensitive {len(a)}")
        if not np.all(np.isfinite(x)):
            raise ContractError("features contain non-finite values")
        for name, v in (("labels", y), ("sensitive", a)):
            if not np.all((v == 0) | (v == 1)):
                raise ContractError(f"{name} must be 0/1")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "sensitive", a)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.sensitive[idx])

    def has_both_groups(self) -> bool:
        return bool(self.sensitive.min() == 0 and self.sensitive.max() == 1)

    def has_both_labels(self) -> bool:
        return bool(self.labels.min() == 0 and self.labels.max() == 1)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.sensitive for p in parts]),
        )


@dataclass(frozen=True)
class LatentDataset:
    """Encoder outputs of a client's training data plus labels and groups."""

    latents: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray

    def __post_init__(self):
        if not (len(self.latents) == len(self.labels) == len(self.sensitive)):
            raise ContractError("latent dataset lengths disagree")
        if not np.all(np.isfinite(self.latents)):
            raise ContractError("latents contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.3
    train_val_ratio: tuple[float, float] = (9.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ContractError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if min(self.train_val_ratio) <= 0:
            raise ContractError(f"train:validation ratio must be positive, got {self.train_val_ratio}")


# ---------------------------------------------------------------------------
# synthetic data

# label 0 / label 1 cluster centres, before the sensitive-attribute shift
_LABEL_MEANS = np.array([[-1.0, -1.0], [1.0, 1.0]])
_SENSITIVE_SHIFT = 0.5
_SENSITIVE_CORR = 0.4
_SIGMA = 0.8


def sample_synthetic(n: int, rng: np.random.Generator, include_sensitive: bool = True) -> Dataset:
    """Draw ``n`` samples from the four-cluster generator.

    Labels are fair coin flips. The sensitive attribute equals the label
    with probability ``(1 + 0.4) / 2`` (a label correlation of 0.4) and
    shifts the cluster mean by +/-0.5 along the first axis. Both
    non-sensitive features carry isotropic noise with sigma 0.8. The model
    input is ``(b1, b2, a)`` unless ``include_sensitive`` is false.
    """
    y = rng.integers(0, 2, size=n)
    agree = rng.random(n) < (1.0 + _SENSITIVE_CORR) / 2.0
    a = np.where(agree, y, 1 - y)
    means = _LABEL_MEANS[y].copy()
    means[:, 0] += np.where(a == 1, _SENSITIVE_SHIFT, -_SENSITIVE_SHIFT)
    b = means + _SIGMA * rng.standard_normal((n, 2))
    x = np.column_stack([b, a.astype(np.float64)]) if include_sensitive else b
    return Dataset(x, y, a)


def generate_synthetic(
    n: int, clients: int, heterogeneity: float, seed: int, include_sensitive: bool = True
) -> list[Dataset]:
    """Synthetic samples split across ``clients`` by a label-wise Dirichlet partition."""
    if heterogeneity <= 0:
        raise ContractError(f"heterogeneity must be > 0, got {heterogeneity}")
    if n < 100 * clients:
        raise ContractError(f"need n >= 100*K = {100 * clients}, got {n}")
    ss = np.random.SeedSequence([seed, 0x5EED])
    data_seq, part_seq = ss.spawn(2)
    ds = sample_synthetic(n, np.random.default_rng(data_seq), include_sensitive)
    part_seed = int(part_seq.generate_state(1)[0])
    return partition_dirichlet(ds, clients, heterogeneity, part_seed)


# ---------------------------------------------------------------------------
# partitioning


def _client_ok(ds: Dataset, idx: np.ndarray) -> bool:
    if len(idx) < MIN_CLIENT_SAMPLES:
        return False
    y, a = ds.labels[idx], ds.sensitive[idx]
    return y.min() != y.max() and a.min() != a.max()


def partition_indices(ds: Dataset, clients: int, concentration: float, seed: int) -> list[np.ndarray]:
    if clients < 2:
        raise ContractError(f"partition needs K >= 2 clients, got {clients}")
    if concentration <= 0:
        raise ContractError(f"concentration must be > 0, got {concentration}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, clients, 0xD1]))
    by_class = [np.flatnonzero(ds.labels == c) for c in (0, 1)]
    for attempt in range(MAX_REDRAWS):
        parts: list[list[np.ndarray]] = [[] for _ in range(clients)]
        for members in by_class:
            shuffled = rng.permutation(members)
            props = rng.dirichlet(np.full(clients, concentration))
            cuts = (np.cumsum(props)[:-1] * len(shuffled)).round().astype(int)
            for k, chunk in enumerate(np.split(shuffled, cuts)):
                parts[k].append(chunk)
        out = [np.sort(np.concatenate(p)) for p in parts]
        if all(_client_ok(ds, idx) for idx in out):
            if attempt:
                log.debug("partition accepted after %d redraws", attempt)
            return out
    raise PartitionError(
        f"no valid {clients}-client partition after {MAX_REDRAWS} draws "
        f"(each client needs >= {MIN_CLIENT_SAMPLES} samples and both classes/groups)"
    )


def partition_dirichlet(ds: Dataset, clients: int, concentration: float, seed: int) -> list[Dataset]:
    """Split ``ds`` across clients with per-label Dirichlet(concentration) shares.

    Smaller concentrations give more heterogeneous clients. Every client is
    guaranteed at least 20 samples and both label classes and sensitive
    groups; draws violating this are repeated up to 100 times.
    """
    return [ds.subset(idx) for idx in partition_indices(ds, clients, concentration, seed)]


# ---------------------------------------------------------------------------
# splitting


def _allocate(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` over ``weights``."""
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(int)
    rem = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rem]] += 1
    return base


def split_indices(ds: Dataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(ds)
    n_test = int(round(spec.test_fraction * n))
    rest = n - n_test
    tr, va = spec.train_val_ratio
    n_val = int(round(rest * va / (tr + va)))
    n_train = rest - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise PartitionError(f"dataset of {n} rows too small for a non-empty 3-way split")
    if not ds.has_both_groups():
        raise PartitionError("training split cannot contain both sensitive groups: only one group present")

    strata_key = ds.labels * 2 + ds.sensitive
    strata = [np.flatnonzero(strata_key == s) for s in range(4)]
    strata = [s for s in strata if len(s)]
    sizes = np.array([len(s) for s in strata], dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, n, 0x5917]))
    for _ in range(MAX_REDRAWS):
        test_alloc = _allocate(n_test, sizes)
        val_alloc = _allocate(n_val, sizes - test_alloc)
        parts = ([], [], [])
        for members, nt, nv in zip(strata, test_alloc, val_alloc):
            perm = rng.permutation(members)
            parts[2].append(perm[:nt])
            parts[1].append(perm[nt : nt + nv])
            parts[0].append(perm[nt + nv :])
        train, val, test = (rng.permutation(np.concatenate(p)) for p in parts)
        a = ds.sensitive[train]
        if a.min() != a.max():
            return train, val, test
    raise PartitionError(f"no split with both sensitive groups in train after {MAX_REDRAWS} attempts")


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded stratified (train, validation, test) split.

    The test set takes ``test_fraction`` of the rows and the remainder is
    divided by ``train_val_ratio``; strata are the four (label, group)
    cells so the fairness loss stays defined on the training split.
    """
    return tuple(ds.subset(i) for i in split_indices(ds, spec))  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# mini-batching


def minibatches(sensitive: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches in which every batch holds both sensitive groups.

    Each group's shuffled indices are dealt round-robin over the batches,
    so groups are spread evenly. The batch count shrinks if the minority
    group is smaller than the nominal number of batches.
    """
    n = len(sensitive)
    groups = [rng.permutation(np.flatnonzero(sensitive == g)) for g in (0, 1)]
    n_batches = max(1, -(-n // batch_size))
    present = [g for g in groups if len(g)]
    if len(present) == 2:
        n_batches = min(n_batches, min(len(g) for g in present))
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_batches)]
    offset = 0
    for g in present:
        for b in range(n_batches):
            buckets[(b + offset) % n_batches].append(g[b::n_batches])
        offset += len(g) % n_batches
    return [rng.permutation(np.concatenate(b)) for b in buckets]


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for a CSV dataset.

    ``categorical`` maps a column name to its category list; each such
    column is one-hot encoded (one indicator per listed category).
    """

    label: str
    label_positive: str
    sensitive: str
    sensitive_positive: str
    features: tuple[str, ...]
    categorical: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        try:
            label, sens = d["label"], d["sensitive"]
            return cls(
                label=str(label["column"]),
                label_positive=str(label["positive"]),
                sensitive=str(sens["column"]),
                sensitive_positive=str(sens["positive"]),
                features=tuple(d.get("features", ())),
                categorical={k: tuple(map(str, v)) for k, v in d.get("categorical", {}).items()},
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"schema document is missing or malforms {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "CsvSchema":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def load_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    """Read a headered, comma-separated UTF-8 file into a :class:`Dataset`.

    Label and sensitive columns are binarised against the schema's positive
    values; numeric feature columns are standardised with the population
    variance. Rows with an empty cell in a used column are dropped.
    """
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        needed = [schema.label, schema.sensitive, *schema.features, *schema.categorical]
        for col in needed:
            if col not in header:
                raise SchemaError(f"column {col!r} declared in schema is missing from {path}")
        rows = list(reader)

    kept, dropped = [], 0
    for r in rows:
        if any((r.get(c) or "").strip() == "" for c in needed):
            dropped += 1
        else:
            kept.append(r)
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) with missing values", stacklevel=2)
    if not kept:
        raise SchemaError(f"{path}: no usable rows")

    cols: list[np.ndarray] = []
    for c in schema.features:
        vals = np.empty(len(kept))
        for i, r in enumerate(kept):
            try:
                vals[i] = float(r[c])
            except ValueError:
                raise ParseError(f"row {i}: non-numeric value {r[c]!r} in feature column {c!r}") from None
        cols.append(_standardize(vals, c))
    for c, cats in schema.categorical.items():
        for cat in cats:
            cols.append(np.array([1.0 if r[c].strip() == cat else 0.0 for r in kept]))

    y = np.array([1 if r[schema.label].strip() == schema.label_positive else 0 for r in kept])
    a = np.array([1 if r[schema.sensitive].strip() == schema.sensitive_positive else 0 for r in kept])
    x = np.column_stack(cols) if cols else np.zeros((len(kept), 0))
    return Dataset(x, y, a)


def _standardize(v: np.ndarray, name: str) -> np.ndarray:
    sd = v.std()
    if sd == 0.0:
        warnings.warn(f"feature column {name!r} is constant; scaled to 0", stacklevel=3)
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def write_csv(ds: Dataset, path: str | Path, feature_names: Sequence[str] | None = None) -> None:
    names = list(feature_names or [f"x{i}" for i in range(ds.n_features)])
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow([*names, "label", "sensitive"])
        for row, y, a in zip(ds.features, ds.labels, ds.sensitive):
            w.writerow([*(repr(float(v)) for v in row), int(y), int(a)])
