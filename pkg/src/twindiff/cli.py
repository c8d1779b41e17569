"""Command-line interface: toy-data generation, training, sampling,
evaluation, and the discrete-vs-continuous space comparison.

Exit codes: 0 success, 2 usage/config/data error, 3 failed --assert
threshold, 4 numerical failure at runtime.

Configuration precedence (lowest to highest): built-in defaults, config
file, TWINDIFF_* environment variables, command-line flags. Config files
are flat ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__
from . import data as data_mod
from . import engine, evaluation
from .categorical import argmax_onehot
from .errors import NumericsError, TwindiffError
from .rng import substream

ENV_PREFIX = "TWINDIFF_"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSERT = 3
EXIT_NUMERIC = 4


def _parse_value(name: str, raw: str, typ):
    if typ is bool or name == "per_row_t":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if name == "hidden":
        parts = [int(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(parts)
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw.strip()


def read_config_file(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TwindiffError(f"{path}:{lineno}: expected key = value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def load_train_config(path: str | None, overrides: dict) -> engine.TrainConfig:
    """Merge defaults, config file, TWINDIFF_* env vars, and CLI overrides."""
    known = {f.name: f.type for f in fields(engine.TrainConfig)}
    typed = {f.name: type(getattr(engine.TrainConfig(), f.name)) for f in fields(engine.TrainConfig)}
    raw: dict = {}
    if path:
        for k, v in read_config_file(path).items():
            if k not in known:
                raise TwindiffError(f"unknown config key {k!r}")
            raw[k] = v
    for k in known:
        env = os.environ.get(ENV_PREFIX + k.upper())
        if env is not None:
            raw[k] = env
    cfg_kwargs = {k: _parse_value(k, v, typed[k]) for k, v in raw.items()}
    for k, v in overrides.items():
        if v is not None:
            cfg_kwargs[k] = v
    cfg = engine.TrainConfig(**cfg_kwargs)
    cfg.validate()
    return cfg


def write_manifest(path: str, seed: int, config: dict, schema_hash: str,
                   timings: dict) -> None:
    blob = {
        "tool": f"twindiff {__version__}",
        "created_unix": time.time(),
        "seed": seed,
        "config": config,
        "schema_hash": schema_hash,
        "timings": timings,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh, indent=2)


def _echo(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


# ---------------------------------------------------------------------------
# subcommands

def cmd_toy(args) -> int:
    rng = substream(args.seed, "toy")
    schema, table = data_mod.generate_toy(args.n, rng)
    data_mod.write_csv(table, args.out)
    schema_path = os.path.splitext(args.out)[0] + ".schema.json"
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
    write_manifest(args.out + ".manifest.json", args.seed,
                   {"n": args.n}, schema.hash(), {})
    _echo(wrote=args.out, schema=schema_path, rows=len(table))
    return EXIT_OK


def _load_table(path: str, schema_path: str | None):
    spec = data_mod.load_schema_spec(schema_path) if schema_path else None
    return data_mod.load_csv(path, spec)


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "timesteps": args.timesteps,
        "beta_start": args.beta_start,
        "beta_end": args.beta_end,
    }
    config = load_train_config(args.config, overrides)
    schema, table = _load_table(args.data, args.schema)
    x0_c, x0_d = data_mod.encode(table, schema)

    if args.resume:
        model = engine.load_checkpoint(args.resume)
        if model.schema.hash() != schema.hash():
            raise TwindiffError("resume checkpoint was trained on a different schema")
        config = model.config
    else:
        model = engine.build_model(schema, config)

    loss_log_path = args.out + ".losses.log"
    t0 = time.perf_counter()
    with open(loss_log_path, "w", encoding="utf-8") as log_fh:
        def log_fn(step, losses):
            line = (f"step={step} loss_diff_c={losses.diff_c:.6f} "
                    f"loss_cl_c={losses.cl_c:.6f} loss_diff_d={losses.diff_d:.6f} "
                    f"loss_cl_d={losses.cl_d:.6f}")
            log_fh.write(line + "\n")
            if step % args.log_every == 0:
                print(line)

        engine.train(model, x0_c, x0_d, log_fn=log_fn)
    train_seconds = time.perf_counter() - t0
    engine.save_checkpoint(model, args.out)
    write_manifest(args.out + ".manifest.json", config.seed, asdict(config),
                   schema.hash(), {"train_seconds": train_seconds})
    _echo(checkpoint=args.out, steps=model.steps_done,
          train_seconds=f"{train_seconds:.2f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model = engine.load_checkpoint(args.ckpt)
    rng = substream(args.seed, "sample")
    t0 = time.perf_counter()
    x_c, x_d = engine.sample(model, args.n, rng)
    sample_seconds = time.perf_counter() - t0
    table = data_mod.decode(x_c, x_d, model.schema)
    data_mod.write_csv(table, args.out)
    write_manifest(args.out + ".manifest.json", args.seed,
                   asdict(model.config), model.schema.hash(),
                   {"sample_seconds": sample_seconds, "rows": args.n})
    _echo(wrote=args.out, rows=args.n, sample_seconds=f"{sample_seconds:.3f}")
    return EXIT_OK


def _flat_metrics(report: evaluation.EvalReport) -> dict:
    flat = {"coverage": report.coverage,
            "coverage_fake_direction": report.coverage_fake_direction}
    flat.update(report.task_metrics)
    if report.sample_seconds is not None:
        flat["sample_seconds"] = report.sample_seconds
    return flat


_OPS = {">=": lambda a, b: a >= b, "<=": lambda a, b: a <= b,
        ">": lambda a, b: a > b, "<": lambda a, b: a < b,
        "==": lambda a, b: a == b}


def check_assertion(expr: str, flat: dict) -> tuple[bool, str]:
    for op in (">=", "<=", "==", ">", "<"):
        if op in expr:
            name, val = expr.split(op, 1)
            name = name.strip()
            if name not in flat:
                raise TwindiffError(f"--assert references unknown metric {name!r}; "
                                    f"have {sorted(flat)}")
            ok = _OPS[op](float(flat[name]), float(val))
            return ok, f"{name}={flat[name]} {op} {val.strip()}"
    raise TwindiffError(f"cannot parse assertion {expr!r}")


def cmd_eval(args) -> int:
    real_schema, real = _load_table(args.real, args.schema)
    spec = real_schema.to_dict()
    _, fake = data_mod.load_csv(args.fake, spec)

    sample_seconds = None
    manifest_path = args.sample_manifest or (args.fake + ".manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            sample_seconds = json.load(fh).get("timings", {}).get("sample_seconds")

    report = evaluation.evaluate(real, fake, real_schema, k=args.k,
                                 sample_seconds=sample_seconds)
    if args.coverage_direction == "fake":
        report.coverage, report.coverage_fake_direction = (
            report.coverage_fake_direction, report.coverage)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        hist_path = os.path.splitext(args.out)[0] + ".hist.csv"
        evaluation.write_histogram_csv(real, fake, real_schema, hist_path)
    flat = _flat_metrics(report)
    _echo(**{k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in flat.items()})
    for name, tv in report.column_tv.items():
        _echo(column=name, tv=f"{tv:.4f}")

    failed = []
    for expr in args.assertions or []:
        ok, desc = check_assertion(expr, flat)
        _echo(assertion=desc, passed=ok)
        if not ok:
            failed.append(desc)
    return EXIT_ASSERT if failed else EXIT_OK


def cmd_ablate_space(args) -> int:
    schema, table = _load_table(args.data, args.schema)
    if schema.n_cont > 0:
        raise TwindiffError("space comparison needs a discrete-only table; "
                            f"found {schema.n_cont} continuous column(s)")
    config = load_train_config(args.config, {"seed": args.seed,
                                             "epochs": args.epochs})
    config = replace(config, lambda_c=0.0, lambda_d=0.0)
    _, onehot = data_mod.encode(table, schema)
    sizes = schema.cat_sizes
    real_x = onehot  # the shared metric space is exactly the one-hot block
    n = onehot.shape[0]
    report: dict = {"seed": config.seed, "rows": n}

    # discrete-space model: multinomial reverse chain, no condition
    disc_model = engine.build_model(schema, config)
    t0 = time.perf_counter()
    engine.train(disc_model, np.zeros((n, 0)), onehot)
    _, fake_d = engine.sample(disc_model, n, substream(config.seed, "sample"))
    report["discrete_space"] = {
        "coverage": evaluation.coverage(fake_d, real_x, k=args.k),
        "seconds": time.perf_counter() - t0,
    }

    # continuous-space model: the same one-hot rows scaled to [-1, 1] and
    # treated as plain coordinates, decoded afterwards by per-block argmax
    cont_cols = tuple(
        data_mod.ColumnSchema(f"{col.name}={cat}", data_mod.CONTINUOUS, -1.0, 1.0)
        for col in schema.disc_columns for cat in col.categories
    )
    cont_schema = data_mod.TableSchema(cont_cols)
    cont_model = engine.build_model(cont_schema, config)
    t0 = time.perf_counter()
    engine.train(cont_model, 2.0 * onehot - 1.0, np.zeros((n, 0)))
    fake_scores, _ = engine.sample(cont_model, n, substream(config.seed, "sample"))
    fake_c = argmax_onehot(fake_scores, sizes)
    report["continuous_space"] = {
        "coverage": evaluation.coverage(fake_c, real_x, k=args.k),
        "seconds": time.perf_counter() - t0,
    }

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
    _echo(discrete_space_coverage=f"{report['discrete_space']['coverage']:.4f}",
          continuous_space_coverage=f"{report['continuous_space']['coverage']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twindiff",
                                description="mixed-type tabular data synthesis "
                                            "with paired diffusion models")
    p.add_argument("--version", action="version", version=f"twindiff {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("toy", help="generate the bundled toy table")
    toy.add_argument("--n", type=int, required=True)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--out", required=True)
    toy.set_defaults(fn=cmd_toy)

    tr = sub.add_parser("train", help="train a model pair on a CSV")
    tr.add_argument("--data", required=True)
    tr.add_argument("--schema", default=None, help="schema spec JSON")
    tr.add_argument("--config", default=None, help="key = value config file")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--resume", default=None, help="checkpoint to continue from")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--timesteps", type=int, default=None)
    tr.add_argument("--beta-start", dest="beta_start", type=float, default=None)
    tr.add_argument("--beta-end", dest="beta_end", type=float, default=None)
    tr.add_argument("--log-every", type=int, default=100)
    tr.set_defaults(fn=cmd_train)

    sa = sub.add_parser("sample", help="draw rows from a checkpoint")
    sa.add_argument("--ckpt", required=True)
    sa.add_argument("--n", type=int, required=True)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--out", required=True)
    sa.set_defaults(fn=cmd_sample)

    ev = sub.add_parser("eval", help="score fake rows against real rows")
    ev.add_argument("--real", required=True)
    ev.add_argument("--fake", required=True)
    ev.add_argument("--schema", default=None)
    ev.add_argument("--k", type=int, default=5)
    ev.add_argument("--coverage-direction", choices=("real", "fake"), default="real")
    ev.add_argument("--sample-manifest", default=None)
    ev.add_argument("--out", default=None, help="write the report JSON here")
    ev.add_argument("--assert", dest="assertions", action="append",
                    help="e.g. coverage>=0.5; exit 3 when violated")
    ev.set_defaults(fn=cmd_eval)

    ab = sub.add_parser("ablate-space",
                        help="compare discrete-space vs continuous-space "
                             "modeling of a discrete-only table")
    ab.add_argument("--data", required=True)
    ab.add_argument("--schema", default=None)
    ab.add_argument("--config", default=None)
    ab.add_argument("--seed", type=int, default=None)
    ab.add_argument("--epochs", type=int, default=None)
    ab.add_argument("--k", type=int, default=5)
    ab.add_argument("--out", default=None)
    ab.set_defaults(fn=cmd_ablate_space)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except TwindiffError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
