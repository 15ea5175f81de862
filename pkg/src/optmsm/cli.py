"""optmsm command line: gen, train, eval, gradcheck, export-reprs, compare, overhead.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.  Log
verbosity comes from the OPTMSM_LOG environment variable (default INFO).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from .data import FeatureSchema, FieldDef, GeneratorConfig
from .gradcheck import GradCheckConfigError, corrupt, grad_check, tiny_model_config, tiny_schema
from .metrics import mean_auc, per_scenario
from .model import ConfigError, ModelConfig, ModelFileError, OptMSM, load_model, save_model
from .training import (ABLATIONS, TrainConfig, TrainingDivergedError, compare,
                       measure_overhead, train, write_comparison)

logger = logging.getLogger("optmsm")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
CONFIG_NAME = "config.ini"
FIELD_PREFIX = "field."


class ValidationError(Exception):
    """Bad user input; maps to exit code 2."""


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    schema: FeatureSchema = field(default_factory=D.default_schema)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    has_schema: bool = False  # schema given explicitly rather than defaulted


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind in ("ints", "floats", "strs"):
            parts = [p.strip() for p in raw.replace(";", ",").split(",") if p.strip()]
            conv = {"ints": int, "floats": float, "strs": str}[kind]
            return tuple(conv(p) for p in parts)
    except ValueError:
        raise ValidationError(f"{key}: cannot parse {raw!r}") from None
    raise AssertionError(kind)


_TYPES = {int: int, float: float, str: str, bool: bool,
          "int": int, "float": float, "str": str, "bool": bool,
          "tuple[int, ...]": "ints", "tuple[float, ...]": "floats",
          "tuple[float, float, float]": "floats", "tuple[str, ...]": "strs"}


def _section(cls, items: dict[str, str], section: str, skip: Sequence[str] = ()) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    unknown = sorted(set(items) - set(fields))
    if unknown:
        raise ValidationError(f"[{section}] unknown keys {unknown}; allowed: {sorted(fields)}")
    out = {}
    for key, raw in items.items():
        kind = _TYPES[fields[key].type]
        out[key] = _parse_value(raw, kind, f"[{section}] {key}")
    return out


def _schema_section(items: dict[str, str]) -> FeatureSchema:
    scen = None
    fields = []
    for key, raw in items.items():
        if key == "scenarios":
            scen = _parse_value(raw, int, "[schema] scenarios")
        elif key.startswith(FIELD_PREFIX):
            parts = raw.split()
            if len(parts) != 3:
                raise ValidationError(f"[schema] {key}: expected 'category vocab_size embed_dim'")
            cat, vocab, dim = parts
            fields.append(FieldDef(key[len(FIELD_PREFIX):], cat,
                                   _parse_value(vocab, int, key), _parse_value(dim, int, key)))
        else:
            raise ValidationError(f"[schema] unknown key {key!r}; use 'scenarios' or '{FIELD_PREFIX}<name>'")
    if scen is None or not fields:
        raise ValidationError("[schema] needs 'scenarios' and at least one field.<name> entry")
    return FeatureSchema(tuple(fields), scen)


def parse_run_config(text: str) -> RunConfig:
    """Parse an INI run config; missing sections and keys take documented defaults."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config syntax: {exc}") from None
    unknown = sorted(set(cp.sections()) - {"schema", "generator", "model", "train"})
    if unknown:
        raise ValidationError(f"unknown config sections {unknown}")
    rc = RunConfig()
    try:
        if cp.has_section("schema"):
            rc.schema = _schema_section(dict(cp["schema"]))
            rc.has_schema = True
        gen = _section(GeneratorConfig, dict(cp["generator"]) if cp.has_section("generator") else {},
                       "generator", skip=("scenarios",))
        gen.setdefault("scenario_proportions", _default_proportions(rc.schema.scenario_count))
        rc.generator = GeneratorConfig(scenarios=rc.schema.scenario_count, **gen)
        model = _section(ModelConfig, dict(cp["model"]) if cp.has_section("model") else {}, "model",
                         skip=("mode", "transfer", "use_priors", "use_hypernet"))
        rc.model = ModelConfig(**model)
        tr = _section(TrainConfig, dict(cp["train"]) if cp.has_section("train") else {}, "train")
        rc.train = TrainConfig(**tr)
    except (D.SchemaError, ConfigError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    return rc


def _default_proportions(M: int) -> tuple[float, ...]:
    default = GeneratorConfig().scenario_proportions
    return default if len(default) == M else tuple([1.0 / M] * M)


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_run_config(text)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def render_run_config(rc: RunConfig) -> str:
    """Fully resolved INI text; parsing it back yields the same configuration."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["schema"] = {"scenarios": str(rc.schema.scenario_count),
                    **{f"{FIELD_PREFIX}{f.name}": f"{f.category} {f.vocab_size} {f.embed_dim}"
                       for f in rc.schema.fields}}
    cp["generator"] = {k: _fmt(v) for k, v in dataclasses.asdict(rc.generator).items()
                       if k != "scenarios"}
    skip = ("mode", "transfer", "use_priors", "use_hypernet")  # driven by [train]
    cp["model"] = {k: _fmt(getattr(rc.model, k)) for k in
                   (f.name for f in dataclasses.fields(ModelConfig)) if k not in skip}
    cp["train"] = {k: _fmt(getattr(rc.train, k)) for k in
                   (f.name for f in dataclasses.fields(TrainConfig))}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def write_resolved(out_dir: Path, rc: RunConfig, name: str = CONFIG_NAME) -> None:
    (out_dir / name).write_text(render_run_config(rc), encoding="utf-8")


def schema_diff(a: FeatureSchema, b: FeatureSchema, a_name: str = "config",
                b_name: str = "data") -> list[str]:
    """Human-readable differences between two schemas."""
    lines = []
    if a.scenario_count != b.scenario_count:
        lines.append(f"scenarios: {a_name}={a.scenario_count} {b_name}={b.scenario_count}")
    fa = {f.name: f for f in a.fields}
    fb = {f.name: f for f in b.fields}
    for name in list(fa) + [n for n in fb if n not in fa]:
        x, y = fa.get(name), fb.get(name)
        if x is None:
            lines.append(f"+ {name}: only in {b_name} ({y.category} {y.vocab_size} {y.embed_dim})")
        elif y is None:
            lines.append(f"- {name}: only in {a_name} ({x.category} {x.vocab_size} {x.embed_dim})")
        elif x != y:
            lines.append(f"~ {name}: {a_name}=({x.category} {x.vocab_size} {x.embed_dim}) "
                         f"{b_name}=({y.category} {y.vocab_size} {y.embed_dim})")
    if not lines and a.names != b.names:
        lines.append(f"field order: {a_name}={a.names} {b_name}={b.names}")
    return lines


# ---------------------------------------------------------------- overrides


def _apply_train_overrides(rc: RunConfig, args) -> RunConfig:
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "variant", None):
        kw["transfer_variant"] = args.variant
    if getattr(args, "ablate", None):
        kw["ablations"] = tuple(rc.train.ablations) + tuple(args.ablate)
    if getattr(args, "lam", None) is not None:
        kw["lam"] = args.lam
    if kw:
        try:
            rc = replace(rc, train=replace(rc.train, **kw))
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
    return rc


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_data(data_dir: str, rc: RunConfig) -> tuple[D.Splits, FeatureSchema]:
    schema_path = Path(data_dir) / "schema.txt"
    try:
        schema = FeatureSchema.from_text(schema_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read {schema_path}: {exc.strerror}") from None
    if rc.has_schema and rc.schema != schema:
        diff = "\n  ".join(schema_diff(rc.schema, schema))
        raise ValidationError(f"schema mismatch between config and data:\n  {diff}")
    splits, _ = D.read_splits(data_dir, schema)
    return splits, schema


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc = replace(rc, generator=replace(rc.generator, seed=args.seed))
    out = _out_dir(args.out)
    gen = D.generate(rc.generator, rc.schema)
    D.write_splits(out, gen.splits, rc.schema)
    gen.teacher.save(out / "teacher.npz")
    write_resolved(out, replace(rc, has_schema=True))
    counts = np.bincount(gen.full.scenario, minlength=rc.schema.scenario_count + 1)[1:]
    shares = " / ".join(f"{100.0 * c / len(gen.full):.2f}" for c in counts)
    logger.info("wrote %d rows to %s (scenario shares %% %s)", len(gen.full), out, shares)
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _apply_train_overrides(load_run_config(args.config), args)
    splits, schema = _read_data(args.data, rc)
    rc = replace(rc, schema=schema, has_schema=True)
    out = _out_dir(args.out)
    write_resolved(out, rc)
    tc = rc.train
    logger.info("variant=%s mode=%s ablations=%s lambda_effective=%g seed=%d",
                tc.transfer_variant, tc.mode, list(tc.ablations) or "none",
                tc.effective_lambda, tc.seed)
    result = train(splits, schema, tc, rc.model, metrics_path=out / "metrics.jsonl")
    save_model(out / "model.bin", result.model, result.params,
               extra={"best_epoch": result.best_epoch, "train": tc.to_dict()})
    logger.info("best epoch %d; model saved to %s", result.best_epoch, out / "model.bin")
    final = [r for r in result.history if r["epoch"] == "final" and r["split"] == "test"]
    print(_metrics_table({r["scenario"]: r for r in final}))
    return EXIT_OK


def _load_checked(model_path: str, data_dir: str):
    try:
        model, params, manifest = load_model(model_path)
    except OSError as exc:
        raise ValidationError(f"cannot read model {model_path}: {exc.strerror}") from None
    schema_path = Path(data_dir) / "schema.txt"
    try:
        data_schema = FeatureSchema.from_text(schema_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read {schema_path}: {exc.strerror}") from None
    if data_schema.hash() != model.schema.hash():
        diff = "\n  ".join(schema_diff(model.schema, data_schema, "model", "data"))
        raise ValidationError(f"schema hash mismatch: model {model.schema.hash()} vs data "
                              f"{data_schema.hash()}\n  {diff}")
    splits, _ = D.read_splits(data_dir, data_schema)
    return model, params, manifest, splits


def _metrics_table(report: dict[int, dict]) -> str:
    lines = [f"{'scenario':>8s} {'n':>7s} {'AUC':>8s} {'Logloss':>8s}"]
    for m in sorted(report):
        r = report[m]
        auc = "N/A" if r["auc"] is None else f"{r['auc']:.4f}"
        ll = "N/A" if r["logloss"] is None else f"{r['logloss']:.4f}"
        lines.append(f"{m:>8d} {r['n']:>7d} {auc:>8s} {ll:>8s}")
    return "\n".join(lines)


def _manifest_run_config(model: OptMSM, manifest: dict) -> RunConfig:
    tr = manifest.get("extra", {}).get("train")
    tc = TrainConfig(**{**tr, "ablations": tuple(tr["ablations"])}) if tr else TrainConfig()
    return RunConfig(schema=model.schema, model=model.config, train=tc, has_schema=True,
                     generator=GeneratorConfig(scenarios=model.M,
                                               scenario_proportions=_default_proportions(model.M)))


def cmd_eval(args) -> int:
    model, params, manifest, splits = _load_checked(args.model, args.data)
    split = splits[args.split]
    probs = model.predict(params, split)
    report = per_scenario(probs, split.labels, split.scenario, model.M)
    print(_metrics_table(report))
    if args.out:
        out = _out_dir(args.out)
        with open(out / f"eval_{args.split}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "n", "auc", "logloss"])
            for m in sorted(report):
                r = report[m]
                w.writerow([m, r["n"], "N/A" if r["auc"] is None else f"{r['auc']:.6f}",
                            "N/A" if r["logloss"] is None else f"{r['logloss']:.6f}"])
        write_resolved(out, _manifest_run_config(model, manifest))
    logger.info("%s split mean AUC %.4f", args.split, mean_auc(report))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        rc = load_run_config(args.config)
        if not rc.has_schema:
            rc = replace(rc, schema=tiny_schema(), has_schema=True)
    else:
        rc = RunConfig(schema=tiny_schema(), model=tiny_model_config(), has_schema=True)
    rc = _apply_train_overrides(rc, args)
    tc = rc.train
    config = tc.model_config(rc.model)
    lam = tc.effective_lambda
    try:
        report = grad_check(config, rc.schema, seed=tc.seed, lam=lam,
                            grad_hook=corrupt(args.corrupt) if args.corrupt else None)
    except GradCheckConfigError as exc:
        raise ValidationError(str(exc)) from None
    except KeyError as exc:
        raise ValidationError(f"no parameter named {exc.args[0]!r}") from None
    print(f"variant={config.transfer} lambda={lam:g} seed={tc.seed}")
    print(report.table())
    if args.out:
        out = _out_dir(args.out)
        (out / "gradcheck.txt").write_text(report.table() + "\n", encoding="utf-8")
        write_resolved(out, replace(rc, model=config))
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cosine_summary(reps: np.ndarray) -> list[tuple[int, int, float]]:
    """Mean |cosine| over samples for every scenario pair i < j; ``reps`` is (N, M, d)."""
    norms = np.linalg.norm(reps, axis=-1, keepdims=True)
    unit = np.where(norms >= 1e-12, reps / np.where(norms >= 1e-12, norms, 1.0), 0.0)
    M = reps.shape[1]
    out = []
    for i in range(M):
        for j in range(i + 1, M):
            cos = (unit[:, i] * unit[:, j]).sum(axis=-1)
            out.append((i + 1, j + 1, float(np.abs(cos).mean()) if len(cos) else float("nan")))
    return out


def cmd_export_reprs(args) -> int:
    model, params, manifest, splits = _load_checked(args.model, args.data)
    if model.config.mode != "optmsm":
        raise ValidationError(f"{model.config.mode} model has no scenario representations")
    split = splits[args.split]
    reps = model.representations(params, split)
    out = _out_dir(args.out)
    d = reps.shape[2]
    with open(out / "reprs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "scenario", "active"] + [f"r{k}" for k in range(d)])
        for n in range(reps.shape[0]):
            for m in range(model.M):
                w.writerow([n, m + 1, int(split.scenario[n] == m + 1)] +
                           [repr(float(v)) for v in reps[n, m]])
    summary = cosine_summary(reps)
    with open(out / "cosine_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_i", "scenario_j", "mean_abs_cosine"])
        for i, j, c in summary:
            w.writerow([i, j, f"{c:.6f}"])
    write_resolved(out, _manifest_run_config(model, manifest))
    overall = float(np.mean([c for _, _, c in summary])) if summary else float("nan")
    for i, j, c in summary:
        print(f"scenarios {i}-{j}: mean |cos| {c:.4f}")
    print(f"overall mean |cos| {overall:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.config) < 2:
        raise ValidationError("compare needs at least two --config files")
    rcs = [_apply_train_overrides(load_run_config(p), args) for p in args.config]
    first = rcs[0]
    for path, rc in zip(args.config[1:], rcs[1:]):
        if rc.schema != first.schema:
            diff = "\n  ".join(schema_diff(first.schema, rc.schema, args.config[0], path))
            raise ValidationError(f"configs disagree on the schema:\n  {diff}")
    splits, schema = _read_data(args.data, first)
    seeds = args.seeds
    if seeds is None:
        seeds = [0, 1, 2, 3, 4]
        logger.info("no --seeds given; using seeds %s", seeds)
    out = _out_dir(args.out)
    labels = _labels(args.config)
    for label, rc in zip(labels, rcs):
        write_resolved(out, replace(rc, schema=schema, has_schema=True), f"config_{label}.ini")
    rows = compare(splits, schema, [(label, rc.train, rc.model) for label, rc in zip(labels, rcs)],
                   seeds=seeds)
    write_comparison(out / "comparison.csv", rows)
    print(f"{'config':20s} {'scen':>4s} {'AUC':>8s} {'std':>7s} {'vs first':>9s}")
    for r in rows:
        print(f"{r.label:20s} {r.scenario:>4d} {r.auc_mean:8.4f} {r.auc_std:7.4f} "
              f"({r.decrement_pct:+.2f}%)")
    return EXIT_OK


def _labels(paths: Sequence[str]) -> list[str]:
    stems = [Path(p).stem for p in paths]
    return [s if stems.count(s) == 1 else f"{s}_{i}" for i, s in enumerate(stems)]


def cmd_overhead(args) -> int:
    rc = _apply_train_overrides(load_run_config(args.config), args)
    splits, schema = _read_data(args.data, rc)
    full = rc.train
    base = replace(full, ablations=ABLATIONS)
    res = measure_overhead(splits, schema, (base, rc.model), (full, rc.model),
                           epochs=args.epochs, repeats=args.repeats)
    print(f"base {res['base_seconds']:.3f}s/epoch  optmsm {res['optmsm_seconds']:.3f}s/epoch  "
          f"overhead {100.0 * res['ratio']:+.2f}%")
    if args.out:
        out = _out_dir(args.out)
        write_resolved(out, replace(rc, schema=schema, has_schema=True))
        with open(out / "overhead.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["base_seconds", "optmsm_seconds", "ratio"])
            w.writerow([f"{res['base_seconds']:.6f}", f"{res['optmsm_seconds']:.6f}", f"{res['ratio']:.6f}"])
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _train_flags(p: argparse.ArgumentParser, seeds: bool = False) -> None:
    if seeds:
        p.add_argument("--seeds", type=int, nargs="+", default=None,
                       help="training seeds (default 0 1 2 3 4)")
    else:
        p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=("fcn", "moe", "cgc"), default=None)
    p.add_argument("--ablate", choices=ABLATIONS, action="append", default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optmsm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-scenario dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-scenario AUC / Logloss of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--corrupt", metavar="PARAM", help=argparse.SUPPRESS)
    _train_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-reprs", help="dump contrastive representations and |cos| summary")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.set_defaults(func=cmd_export_reprs)

    p = sub.add_parser("compare", help="multi-seed comparison of two or more configs")
    p.add_argument("--config", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _train_flags(p, seeds=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("overhead", help="per-epoch wall-clock of full model vs stripped base")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    _train_flags(p)
    p.set_defaults(func=cmd_overhead)
    return ap


def _setup_logging() -> None:
    level = os.environ.get("OPTMSM_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValidationError, D.SchemaError, D.DataParseError, D.GenerationError,
            ConfigError, ModelFileError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except (TrainingDivergedError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


def main_entry() -> None:
    _setup_logging()
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
