"""Command-line front end: ``dimekit <subcommand> [options]``.

Exit status is 0 on success, 1 for bad input (arguments, files, configs)
and 2 for anything else.  Diagnostics go to stderr; data goes to files in
``--out`` (default: the current directory) or to stdout.

Run configs are JSON objects with optional sections ``model``, ``basis``,
``train``, ``toy`` and ``data``; ``--set section.key=value`` overrides
single entries, with the value parsed as JSON when possible.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .basis import BasisConfig
from .bench import bench_interactions
from .checkpoint import load_members, save_checkpoint, save_members
from .datakit import (
    DatasetManifest,
    ToyPotentialConfig,
    dataset_stats,
    fit_reference_energies,
    generate_collisions,
    read_extxyz_file,
    shift_energies,
    split_dataset,
    write_extxyz_file,
    write_stats_csv,
)
from .datakit.extxyz import SYMBOLS
from .errors import DimekitError, InputError
from .model import DimeNetPP, ModelConfig
from .trainer import TrainConfig, metrics_from_predictions, train
from .uncertainty import (
    Ensemble,
    calibration,
    cov_identity_check,
    ensemble_predict_many,
    ensemble_train,
    write_calibration_csv,
    write_samples_csv,
)

log = logging.getLogger("dimekit")

_SECTIONS = ("model", "basis", "train", "toy", "data")
_DATA_KEYS = {"n_snapshots", "fractions", "relabel", "bins", "k", "calib_configs", "min_triplets", "repeats"}
_LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

EVAL_COLUMNS = ("metric", "value")


class _UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# run configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def load_run_config(path: Optional[str], overrides: Sequence[str]) -> dict:
    """Merge a JSON run config with ``section.key=value`` overrides and validate keys."""
    cfg = {s: {} for s in _SECTIONS}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except ValueError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise InputError("run config must be a JSON object")
        for sec, body in raw.items():
            if sec not in cfg or not isinstance(body, dict):
                raise InputError(f"unknown run config section {sec!r}")
            cfg[sec].update(body)
    for item in overrides:
        key, eq, value = item.partition("=")
        sec, dot, name = key.partition(".")
        if not eq or not dot or sec not in cfg or not name:
            raise InputError(f"--set expects section.key=value with section in {_SECTIONS}, got {item!r}")
        cfg[sec][name] = _parse_value(value)
    allowed = {
        "model": {f.name for f in fields(ModelConfig)} - {"basis"},
        "basis": {f.name for f in fields(BasisConfig)},
        "train": {f.name for f in fields(TrainConfig)},
        "toy": {f.name for f in fields(ToyPotentialConfig)} - {"pairs"},
        "data": _DATA_KEYS,
    }
    for sec, names in allowed.items():
        bad = set(cfg[sec]) - names
        if bad:
            raise InputError(f"unknown {sec} keys: {sorted(bad)}")
    return cfg


def _build(cls, values: dict):
    try:
        return cls(**values)
    except TypeError as exc:
        raise InputError(f"bad {cls.__name__} value: {exc}") from None


def _model_cfg(rc: dict) -> ModelConfig:
    return _build(ModelConfig, {**rc["model"], "basis": _build(BasisConfig, rc["basis"])})


def _train_cfg(rc: dict, seed: Optional[int]) -> TrainConfig:
    values = dict(rc["train"])
    if seed is not None:
        values["seed"] = seed
    return _build(TrainConfig, values)


def _toy_cfg(rc: dict) -> ToyPotentialConfig:
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in rc["toy"].items()}
    return _build(ToyPotentialConfig, values)


# ---------------------------------------------------------------------------
# helpers


def _read_dataset(path: str):
    if not os.path.isfile(path):
        raise InputError(f"dataset not found: {path}")
    return read_extxyz_file(path)


def _manifest_for(path: str) -> Optional[DatasetManifest]:
    mpath = Path(path).with_suffix(".manifest.json")
    if not mpath.is_file():
        return None
    try:
        m = DatasetManifest.from_json(mpath.read_text(encoding="utf-8"))
    except (ValueError, TypeError) as exc:
        raise InputError(f"bad manifest {mpath}: {exc}") from None
    return m


def _offsets_from(manifest: Optional[DatasetManifest]) -> Optional[dict]:
    if manifest is None or not manifest.reference_energies:
        return None
    from .datakit.extxyz import symbol_to_z

    return {symbol_to_z(s): float(v) for s, v in manifest.reference_energies.items()}


def _symbols(offsets: dict) -> dict:
    return {SYMBOLS[z - 1]: v for z, v in sorted(offsets.items())}


def _offset_of(config, offsets: dict) -> float:
    try:
        return float(sum(offsets[int(z)] for z in config.atomic_numbers))
    except KeyError as exc:
        raise InputError(f"no reference energy for element Z={exc.args[0]}") from None


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "undefined"
    return repr(float(v))


def _load_model(path: str):
    cfg, members, meta = load_members(path)
    offsets = {int(k): float(v) for k, v in meta.get("reference_energies", {}).items()}
    return cfg, members, meta, offsets


def _predict(cfg, members, configs, forces=True) -> list:
    if len(members) == 1:
        return DimeNetPP(cfg, members[0]).predict_many(configs, forces=forces)
    return ensemble_predict_many(Ensemble(cfg, members), configs, forces=forces)


def _prepare_training(args, rc):
    train_set = _read_dataset(args.train)
    val_set = _read_dataset(args.val)
    offsets = _offsets_from(_manifest_for(args.train)) or fit_reference_energies(train_set)
    return shift_energies(train_set, offsets), shift_energies(val_set, offsets), offsets


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_toy(args, rc, out: Path) -> None:
    data = rc["data"]
    n = int(data.get("n_snapshots", args.n))
    fractions = tuple(data.get("fractions", (0.8, 0.1, 0.1)))
    toy = _toy_cfg(rc)
    label = toy.perturbed() if data.get("relabel", args.relabel) else None
    snaps = generate_collisions(toy, n, seed=args.seed or 0, label_cfg=label, workers=args.threads)
    splits = dict(zip(("train", "val", "test"), split_dataset(snaps, fractions, seed=args.seed or 0)))
    offsets = fit_reference_energies(splits["train"]) if splits["train"] else {}
    elements = sorted({SYMBOLS[int(z) - 1] for c in snaps for z in c.atomic_numbers})
    for name, part in splits.items():
        write_extxyz_file(part, out / f"{name}.xyz")
        manifest = DatasetManifest(name, len(part), ModelConfig().basis.cutoff, elements, _symbols(offsets))
        (out / f"{name}.manifest.json").write_text(manifest.to_json() + "\n", encoding="utf-8")
    print(f"wrote {len(snaps)} snapshots to {out}")


def cmd_train(args, rc, out: Path) -> None:
    mcfg = _model_cfg(rc)
    tcfg = _train_cfg(rc, args.seed)
    train_set, val_set, offsets = _prepare_training(args, rc)
    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        res = train(train_set, val_set, mcfg, tcfg, log_stream=fh)
    meta = {"reference_energies": {str(k): v for k, v in offsets.items()}, "train": tcfg.to_dict(),
            "best_step": res.best_step}
    save_checkpoint(out / "model.ckpt", mcfg, res.params, meta)
    print(f"best step {res.best_step}, validation metric {res.best_metric:.6g}")


def cmd_ensemble_train(args, rc, out: Path) -> None:
    mcfg = _model_cfg(rc)
    tcfg = _train_cfg(rc, args.seed)
    k = int(rc["data"].get("k", args.k))
    train_set, val_set, offsets = _prepare_training(args, rc)
    ens = ensemble_train(train_set, val_set, mcfg, tcfg, K=k)
    meta = {"reference_energies": {str(z): v for z, v in offsets.items()}, "train": tcfg.to_dict(),
            "seeds": ens.seeds}
    save_members(out / "ensemble.ckpt", mcfg, ens.members, meta)
    _write_csv(out / "ensemble_timing.csv", ("member", "seed", "wall_time_s"),
               [(n, s, repr(t)) for n, (s, t) in enumerate(zip(ens.seeds, ens.wall_times))])
    print(f"trained {k} members in {sum(ens.wall_times):.1f}s")


def _shifted_labels(configs, offsets):
    return shift_energies(configs, offsets) if offsets else list(configs)


def cmd_eval(args, rc, out: Path) -> None:
    cfg, members, meta, offsets = _load_model(args.checkpoint)
    configs = _read_dataset(args.data)
    labels = _shifted_labels(configs, offsets)
    forces = all(c.forces is not None for c in configs)
    m = metrics_from_predictions(_predict(cfg, members, labels, forces), labels)
    rows = [("n_configs", m.n_configs)] + [(k, _num(v)) for k, v in m.as_rows()]
    _write_csv(out / "eval.csv", EVAL_COLUMNS, rows)
    for k, v in rows:
        print(f"{k},{v}")


def cmd_predict(args, rc, out: Path) -> None:
    cfg, members, meta, offsets = _load_model(args.checkpoint)
    configs = _read_dataset(args.data)
    preds = _predict(cfg, members, configs, forces=True)
    results = []
    rows = []
    for n, (c, p) in enumerate(zip(configs, preds)):
        e = p.energy + (_offset_of(c, offsets) if offsets else 0.0)
        results.append(c.copy(energy=e, forces=p.forces))
        rows.append((n, c.num_atoms, repr(e), _num(p.sigma_energy)))
    write_extxyz_file(results, out / "predictions.xyz")
    _write_csv(out / "predictions.csv", ("record", "n_atoms", "energy", "sigma_E"), rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("record", "n_atoms", "energy", "sigma_E"))
    w.writerows(rows)


def cmd_calibrate(args, rc, out: Path) -> None:
    cfg, members, meta, offsets = _load_model(args.checkpoint)
    configs = _read_dataset(args.data)
    labels = _shifted_labels(configs, offsets)
    if len(members) > 1:
        ens = Ensemble(cfg, members)
        preds = ensemble_predict_many(ens, labels)
    elif cfg.mve_head:
        ens = None
        preds = DimeNetPP(cfg, members[0]).predict_many(labels)
    else:
        raise InputError("calibration needs an ensemble checkpoint or a model with an MVE head")
    report = calibration(preds, labels)
    if ens is not None:
        n_cov = min(len(labels), int(rc["data"].get("calib_configs", 10)))
        rel = max((cov_identity_check(ens, c).relative for c in labels[:n_cov]), default=math.nan)
        report.extra["cov_identity_max_relative"] = (rel, n_cov)
    with open(out / "calibration.csv", "w", encoding="utf-8", newline="") as fh:
        write_calibration_csv(report, fh)
    with open(out / "calibration_samples.csv", "w", encoding="utf-8", newline="") as fh:
        write_samples_csv(report, fh)
    sys.stdout.write(write_calibration_csv(report))


def cmd_bench(args, rc, out: Path) -> None:
    mcfg = _model_cfg(rc)
    data = rc["data"]
    rows = bench_interactions(mcfg, int(data.get("min_triplets", args.min_triplets)),
                              int(data.get("repeats", 3)), seed=args.seed or 0)
    by = {r.variant: r for r in rows}
    table = [(r.variant, r.n_triplets, repr(r.seconds), repr(r.seconds_per_triplet), r.macs_per_triplet) for r in rows]
    header = ("variant", "n_triplets", "seconds", "seconds_per_triplet", "macs_per_triplet")
    _write_csv(out / "bench.csv", header, table)
    ratio = by["bilinear"].seconds_per_triplet / by["hadamard"].seconds_per_triplet
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(table)
    print(f"# bilinear/hadamard time ratio {ratio:.2f}")


def cmd_stats(args, rc, out: Path) -> None:
    configs = _read_dataset(args.data)
    offsets = _offsets_from(_manifest_for(args.data)) or fit_reference_energies(configs)
    edges, counts, _ = dataset_stats(configs, offsets, bins=int(rc["data"].get("bins", args.bins)))
    with open(out / "stats.csv", "w", encoding="utf-8", newline="") as fh:
        write_stats_csv(edges, counts, fh)
    sys.stdout.write(write_stats_csv(edges, counts))


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override, e.g. train.max_steps=100 (repeatable)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1, help="worker and BLAS thread cap (default 1)")
    common.add_argument("--out", default=".", help="output directory")

    parser = _Parser(prog="dimekit", description="DimeNet++ potentials with uncertainty, in numpy.")
    parser.add_argument("--version", action="version", version=f"dimekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-toy", parents=[common], help="generate toy collision snapshots")
    p.add_argument("--n", type=int, default=2000, help="number of snapshots")
    p.add_argument("--relabel", action="store_true", help="label with a perturbed potential")
    p.set_defaults(func=cmd_gen_toy)

    for name, func, help_ in (("train", cmd_train, "train one model"),
                              ("ensemble-train", cmd_ensemble_train, "train K models")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--train", required=True, help="training extxyz")
        p.add_argument("--val", required=True, help="validation extxyz")
        if name == "ensemble-train":
            p.add_argument("--k", type=int, default=3)
        p.set_defaults(func=func)

    for name, func, help_ in (("eval", cmd_eval, "metrics on a labelled file"),
                              ("predict", cmd_predict, "energies and forces for a file"),
                              ("calibrate", cmd_calibrate, "error/uncertainty correlations")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="extxyz file")
        p.set_defaults(func=func)

    p = sub.add_parser("bench", parents=[common], help="hadamard vs bilinear interaction timing")
    p.add_argument("--min-triplets", type=int, default=100_000)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", parents=[common], help="histogram of atomization energy per atom")
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_stats)
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("DIMEKIT_LOG", "error").lower()
    level = _LOG_LEVELS.get(level_name, logging.ERROR)
    root = logging.getLogger("dimekit")
    root.handlers[:] = []
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    if level_name not in _LOG_LEVELS:
        root.error("ignoring unknown DIMEKIT_LOG=%s", level_name)


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        rc = load_run_config(args.config, args.set)
        out = Path(args.out)
        if out.exists() and not out.is_dir():
            raise InputError(f"--out {out} is not a directory")
        out.mkdir(parents=True, exist_ok=True)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            args.func(args, rc, out)
        return 0
    except _UsageError as exc:
        print(f"dimekit: error: {exc}", file=sys.stderr)
        return 1
    except (DimekitError, OSError) as exc:
        # TrainingDiverged and ContractViolation are not input problems
        if isinstance(exc, (InputError, OSError)):
            print(f"dimekit: error: {exc}", file=sys.stderr)
            return 1
        print(f"dimekit: internal error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        log.debug("traceback", exc_info=True)
        print(f"dimekit: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
