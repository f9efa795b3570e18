"""JSON checkpoints of trained state with an embedded SHA-256 checksum.

Arrays are stored as ``{"shape": [...], "data": [flat values]}``; Python's
float repr round-trips exactly, so a reload reproduces every parameter bit
for bit.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ChecksumError, SchemaError
from .federated import RunArtifacts, ServerState
from .tensor import Params

FORMAT = 1


def _encode(params: Mapping[str, np.ndarray]) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()} for k, v in sorted(params.items())}


def _decode(doc: Mapping) -> Params:
    out = {}
    for k, v in doc.items():
        arr = np.asarray(v["data"], dtype=np.float64)
        shape = tuple(v["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise SchemaError(f"checkpoint array {k!r}: {arr.size} values for shape {shape}")
        out[k] = arr.reshape(shape)
    return out


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def state_payload(art: RunArtifacts, config_hash: str) -> dict:
    s = art.server
    return {
        "format": FORMAT,
        "config_hash": config_hash,
        "seed": art.seed,
        "mode": art.mode,
        "psi": _encode(s.psi),
        "hypernets": [_encode(b) for b in s.hypernets],
        "alphas": [c.alpha.tolist() for c in art.clients],
        "phi": None if s.phi is None else _encode(s.phi),
        "learned_fusion": bool(s.learned_fusion),
    }


def save_checkpoint(art: RunArtifacts, path: str | Path, config_hash: str) -> None:
    payload = state_payload(art, config_hash)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"sha256": _digest(payload), "payload": payload}, f, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str | Path) -> tuple[ServerState, dict]:
    """Restore the server-side state; returns (state, metadata). Raises ChecksumError on tampering."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or "payload" not in doc or "sha256" not in doc:
        raise ChecksumError(f"{path}: not a checkpoint document")
    payload = doc["payload"]
    if _digest(payload) != doc["sha256"]:
        raise ChecksumError(f"{path}: checksum mismatch, the file was modified or truncated")
    if payload.get("format") != FORMAT:
        raise SchemaError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    hypernets = [_decode(b) for b in payload["hypernets"]]
    state = ServerState(
        psi=_decode(payload["psi"]),
        n_clients=len(hypernets),
        phi=None if payload["phi"] is None else _decode(payload["phi"]),
        hypernets=hypernets,
        learned_fusion=payload["learned_fusion"],
    )
    meta = {k: payload[k] for k in ("config_hash", "seed", "mode", "alphas")}
    return state, meta
