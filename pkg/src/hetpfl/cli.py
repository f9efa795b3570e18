"""Command-line entry point: ``hetpfl {run,eval,gradcheck,hv,gen-data}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_from_dict, load_datasets, resolve_paths
from .data import generate_synthetic, write_csv
from .errors import ConfigError, HetPFLError
from .evaluation import FrontReport, global_hv_report, local_hv_report, write_front_csv, write_front_json
from .federated import build_clients, run_experiment
from .preference import hv_2d, hvc_all

log = logging.getLogger("hetpfl")

OUTPUT_ROOT_ENV = "HETPFL_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class RunLock:
    """Exclusive lock file guarding a run directory against a second writer."""

    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise HetPFLError(f"{self.path} exists: another process is writing this run directory (remove it if stale)") from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _dump_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _stats(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0, "values": v.tolist()}


def write_reports(out: Path, local: Sequence[FrontReport], glob: FrontReport, meta: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for k, rep in enumerate(local):
        write_front_csv(rep, out / f"local-{k}.csv", {**meta, "scope": rep.scope})
        write_front_json(rep, out / f"local-{k}.json", meta)
    write_front_csv(glob, out / "global.csv", {**meta, "scope": "global"})
    write_front_json(glob, out / "global.json", meta)


# ---------------------------------------------------------------------------
# run


_RUN_FLAGS = {
    # flag: (section, key, type)
    "mode": (None, "mode", str),
    "clients": (None, "clients", int),
    "heterogeneity": (None, "heterogeneity", float),
    "eval_points": (None, "eval_points", int),
    "n": ("dataset", "n", int),
    "rounds": ("training", "rounds", int),
    "tau_c": ("training", "tau_c", int),
    "tau_p": ("training", "tau_p", int),
    "n_prefs": ("training", "n_prefs", int),
    "fusion_epochs": ("training", "fusion_epochs", int),
    "lr": ("training", "lr", float),
    "alpha_lr": ("training", "alpha_lr", float),
    "batch_size": ("training", "batch_size", int),
    "hvc_eval_size": ("training", "hvc_eval_size", int),
    "alpha_optimizer": ("training", "alpha_optimizer", str),
}


def _config_doc(args) -> dict:
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
    else:
        doc = {}
    for flag, (section, key, _) in _RUN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            (doc.setdefault(section, {}) if section else doc)[key] = value
    if args.seeds is not None:
        doc["seeds"] = args.seeds
    if args.allow_local_epochs:
        doc["allow_local_epochs"] = True
    return doc


def _resolve_config(args) -> ExperimentConfig:
    cfg = config_from_dict(_config_doc(args))
    return resolve_paths(cfg, Path(args.config).resolve().parent) if args.config else cfg


def run_directory(cfg: ExperimentConfig, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{cfg.mode}-{cfg.hash()}"


def execute(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """Run every seed of ``cfg`` into ``run_dir`` and return the cross-seed summary."""
    h = cfg.hash()
    warnings = cfg.warnings()
    for w in warnings:
        log.warning(w)
    run_dir.mkdir(parents=True, exist_ok=True)
    with RunLock(run_dir):
        _dump_json({"config_hash": h, **cfg.to_dict()}, run_dir / "config.json")
        per_seed = []
        for seed in cfg.seeds:
            seed_dir = run_dir / f"seed-{seed}"
            seed_dir.mkdir(exist_ok=True)
            meta = {"config_hash": h, "seed": seed, "mode": cfg.mode}
            datasets = load_datasets(cfg, seed)
            with open(seed_dir / "telemetry.jsonl", "w", encoding="utf-8") as tel:
                for w in warnings:
                    tel.write(json.dumps({**meta, "warning": w}, sort_keys=True) + "\n")

                def on_round(t, records):
                    for r in records:
                        tel.write(json.dumps({**meta, **r}, sort_keys=True) + "\n")
                    log.info("seed %d round %d: mean val tch %.4f", seed, t, np.mean([r["val_tch"] for r in records]))

                art = run_experiment(datasets, cfg.round_config(seed), cfg.mode, cfg.eval_points, on_round)
            with open(seed_dir / "fusion.jsonl", "w", encoding="utf-8") as f:
                for rec in art.fusion_history:
                    f.write(json.dumps({**meta, **rec}, sort_keys=True) + "\n")
            save_checkpoint(art, seed_dir / "checkpoint.json", h)
            write_reports(seed_dir / "reports", art.local_reports, art.global_report, meta)
            report = {
                **meta,
                "local_hv": [r.hv for r in art.local_reports],
                "mean_local_hv": art.mean_local_hv,
                "global_hv": art.global_hv,
                "final_val_tch": art.final_val_tch(),
                "alphas": [c.alpha.tolist() for c in art.clients],
            }
            _dump_json(report, seed_dir / "report.json")
            per_seed.append(report)
            log.info("seed %d: mean local HV %.4f, global HV %.4f", seed, art.mean_local_hv, art.global_hv)
        summary = {
            "config_hash": h,
            "mode": cfg.mode,
            "seeds": list(cfg.seeds),
            "eval_points": cfg.eval_points,
            "local_hv": _stats([r["mean_local_hv"] for r in per_seed]),
            "global_hv": _stats([r["global_hv"] for r in per_seed]),
            "final_val_tch": _stats([r["final_val_tch"] for r in per_seed]),
            "local_hv_aggregate": "mean over clients",
            "warnings": warnings,
        }
        _dump_json(summary, run_dir / "summary.json")
    return summary


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    run_dir = run_directory(cfg, args.out)
    summary = execute(cfg, run_dir)
    lh, gh = summary["local_hv"], summary["global_hv"]
    print(f"run directory: {run_dir}")
    print(f"local HV  {lh['mean']:.4f} +/- {lh['std']:.4f}")
    print(f"global HV {gh['mean']:.4f} +/- {gh['std']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def evaluate_run(run_dir: Path, m: int) -> dict:
    """Recompute local and global fronts from every seed's checkpoint at grid size ``m``."""
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise HetPFLError(f"{cfg_path} not found; is {run_dir} a run directory?")
    doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    stored_hash = doc.pop("config_hash", None)
    cfg = config_from_dict(doc)
    if stored_hash != cfg.hash():
        raise HetPFLError(f"{cfg_path}: config hash mismatch")
    out = {"config_hash": stored_hash, "m": m, "seeds": {}}
    for seed in cfg.seeds:
        ckpt = run_dir / f"seed-{seed}" / "checkpoint.json"
        if not ckpt.exists():
            raise HetPFLError(f"missing checkpoint {ckpt}")
        server, meta = load_checkpoint(ckpt)
        if meta["config_hash"] != stored_hash or meta["seed"] != seed:
            raise HetPFLError(f"{ckpt} belongs to another run (hash {meta['config_hash']}, seed {meta['seed']})")
        clients, _ = build_clients(load_datasets(cfg, seed), seed)
        local = [local_hv_report(server.psi, b, c.test, m, scope=f"local:{c.cid}") for b, c in zip(server.hypernets, clients)]
        glob = global_hv_report(server, [c.test for c in clients], m)
        info = {"config_hash": stored_hash, "seed": seed, "mode": meta["mode"]}
        write_reports(run_dir / f"seed-{seed}" / f"eval-m{m}", local, glob, info)
        out["seeds"][seed] = {"local_hv": [r.hv for r in local], "global_hv": glob.hv}
    return out


def cmd_eval(args) -> int:
    res = evaluate_run(Path(args.run_dir), args.m)
    for seed, r in res["seeds"].items():
        local = " ".join(f"{v:.4f}" for v in r["local_hv"])
        print(f"seed {seed}: local HV [{local}] mean {np.mean(r['local_hv']):.4f}  global HV {r['global_hv']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / hv / gen-data


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(args.instances, args.seed, args.nes_batches)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_RUNTIME if failed else EXIT_OK


def read_points(path: str) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        for i, row in enumerate(csv.reader(f)):
            cells = [c.strip() for c in row]
            if not cells or all(c == "" for c in cells) or cells[0].startswith("#"):
                continue
            if len(cells) != 2:
                raise UsageError(f"{path}, line {i + 1}: expected 2 columns, found {len(cells)}")
            try:
                rows.append((float(cells[0]), float(cells[1])))
            except ValueError:
                if i == 0 and not rows:
                    continue  # header line
                raise UsageError(f"{path}, line {i + 1}: non-numeric value in {row}") from None
    pts = np.array(rows, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise UsageError(f"{path}: non-finite coordinates")
    return pts


def cmd_hv(args) -> int:
    pts = read_points(args.points)
    ref = args.ref
    print(f"HV {hv_2d(pts, ref):.10g}")
    for i, c in enumerate(hvc_all(pts, ref)):
        print(f"HVC {i} {c:.10g}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = generate_synthetic(args.n, args.clients, args.heterogeneity, args.seed)
    names = ["x0", "x1", "a"]
    for k, ds in enumerate(parts):
        write_csv(ds, out / f"client-{k}.csv", names)
    schema = {
        "label": {"column": "label", "positive": "1"},
        "sensitive": {"column": "sensitive", "positive": "1"},
        "features": names,
    }
    _dump_json(schema, out / "schema.json")
    print(f"wrote {len(parts)} client files to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hetpfl", description="Federated performance-fairness Pareto front learning.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="train one or more seeds and write a run directory")
    r.add_argument("config", nargs="?", help="experiment config (JSON); defaults apply when omitted")
    r.add_argument("--out", help=f"run directory (default: ${OUTPUT_ROOT_ENV}/<mode>-<config hash>)")
    r.add_argument("--seeds", type=_int_list)
    r.add_argument("--allow-local-epochs", action="store_true", help="silence the tau_c + tau_p != 30 warning")
    for flag, (_, _, typ) in _RUN_FLAGS.items():
        r.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="recompute fronts from a run directory's checkpoints")
    e.add_argument("run_dir")
    e.add_argument("--m", type=int, default=1000, help="number of grid preferences")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    g.add_argument("--instances", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nes-batches", type=int, default=20_000)
    g.set_defaults(func=cmd_gradcheck)

    h = sub.add_parser("hv", help="exact 2-D hypervolume and per-point contributions of a CSV")
    h.add_argument("points", help="CSV with two numeric columns (optional header)")
    h.add_argument("--ref", type=_pair, default=(1.0, 1.0), help="reference point, e.g. 1,1")
    h.set_defaults(func=cmd_hv)

    d = sub.add_parser("gen-data", help="write synthetic client datasets as CSV")
    d.add_argument("--n", type=int, default=5000)
    d.add_argument("--clients", type=int, default=3)
    d.add_argument("--heterogeneity", type=float, default=5.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"hetpfl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"hetpfl: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HetPFLError, OSError) as exc:
        print(f"hetpfl: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
