"""Command line surface.

Subcommands: generate, train, sweep, probe, verify, report. Configuration
comes from JSON files; any flag of the form --dotted.path=value overrides the
corresponding key (--optimizer.lr=0.05). Unknown keys are usage errors.

Every command is idempotent: an output that already exists with identical
bytes is left alone, a differing one is refused unless --force is given. All
delimited outputs carry `# config_hash=` and `# seed=` header comments.

Exit codes: 0 success, 1 verification or runtime failure, 2 usage/config
error. The MCRLAB_OUT environment variable supplies a default output root for
commands invoked without --out.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
import tempfile
import typing
from pathlib import Path

import numpy as np

from ._util import canonical_json, config_hash, fmt
from .losses import McrConfig  # noqa: F401  (part of the documented schema)
from .models import load_checkpoint, save_checkpoint
from .synthdata import SyntheticSpec, generate, load_dataset, save_dataset
from .trainer import (
    EnsembleModel,
    RunConfig,
    encode_latents,
    error_matrix,
    fused_logits_np,
    linear_probe,
    records_to_csv,
    train,
    uni_logits_np,
    validate_method,
)


class CliError(Exception):
    """Bad usage or configuration; exits with status 2."""


class OutputClash(Exception):
    """An output path holds different bytes and --force was not given."""


# configuration plumbing --------------------------------------------------------


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"invalid JSON in {path}: {e}")
    if not isinstance(doc, dict):
        raise CliError(f"{path}: top level must be a JSON object")
    return doc


_OVERRIDE = re.compile(r"^--([A-Za-z0-9_.-]+)=(.*)$", re.DOTALL)


def parse_overrides(tokens: list[str]) -> dict:
    """Turn leftover --a.b=c flags into a {dotted path: value} dict."""
    out = {}
    for tok in tokens:
        m = _OVERRIDE.match(tok)
        if not m:
            raise CliError(f"unrecognized argument: {tok}")
        key, raw = m.groups()
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw  # bare strings like greedy or permute-latent
    return out


def deep_set(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise CliError(f"override {dotted}: {p} is not an object")
        node = nxt
    node[parts[-1]] = value


def build_config(cls, doc: dict, path: str = ""):
    """Instantiate a (possibly nested) dataclass, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise CliError(f"unknown config key: {path}{key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in doc:
            continue
        hint = hints[f.name]
        val = doc[f.name]
        if dataclasses.is_dataclass(hint):
            if not isinstance(val, dict):
                raise CliError(f"{path}{f.name} must be an object")
            kwargs[f.name] = build_config(hint, val, f"{path}{f.name}.")
        elif typing.get_origin(hint) is tuple:
            kwargs[f.name] = tuple(val)
        elif hint is float and isinstance(val, (int, float)) and not isinstance(val, bool):
            kwargs[f.name] = float(val)
        else:
            kwargs[f.name] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad config for {cls.__name__}: {e}")


def config_from_args(cls, config_path: str | None, overrides: dict):
    doc = _load_json(config_path) if config_path else {}
    for key, value in overrides.items():
        deep_set(doc, key, value)
    return build_config(cls, doc)


# output handling ---------------------------------------------------------------


def resolve_out(out: str | None, default_name: str) -> Path:
    if out:
        return Path(out)
    root = os.environ.get("MCRLAB_OUT")
    if not root:
        raise CliError("no --out given and MCRLAB_OUT is not set")
    return Path(root) / default_name


def write_output(path: Path, content: bytes | str, force: bool) -> str:
    data = content.encode() if isinstance(content, str) else content
    if path.exists():
        if path.read_bytes() == data:
            return "unchanged"
        if not force:
            raise OutputClash(f"{path} exists with different content (use --force)")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return "wrote"


def _file_bytes_writer(write_fn, path: Path) -> bytes:
    """Run a file-producing function against a temp path, return the bytes."""
    tmp = path.with_name(path.name + ".tmp")
    try:
        write_fn(str(tmp))
        return tmp.read_bytes()
    finally:
        if tmp.exists():
            tmp.unlink()


def write_via(path: Path, write_fn, force: bool) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    return write_output(path, _file_bytes_writer(write_fn, path), force)


# subcommands -------------------------------------------------------------------


def cmd_generate(args, overrides: dict) -> int:
    spec = config_from_args(SyntheticSpec, args.spec, overrides)
    try:
        spec.validate()
    except ValueError as e:
        raise CliError(str(e))
    ds = generate(spec)
    out = resolve_out(args.out, f"data-{config_hash(spec)}")
    out.mkdir(parents=True, exist_ok=True)

    # save_dataset writes the container and its JSON sidecar together; stage
    # them in a scratch directory so both pass the idempotency gate.
    with tempfile.TemporaryDirectory() as tmp:
        staged = Path(tmp) / "data.npz"
        save_dataset(ds, str(staged))
        write_output(out / "data.npz", staged.read_bytes(), args.force)
        write_output(out / "data.json", staged.with_suffix(".json").read_bytes(), args.force)

    train_split, val = ds.splits["train"], ds.splits["val"]
    print(f"dataset {config_hash(spec)} -> {out}")
    print(
        f"  sizes train={len(train_split.y)} val={len(val.y)} test={len(ds.splits['test'].y)}"
        f" classes={spec.n_classes} dim={spec.dim}"
    )
    for m in range(ds.n_modalities):
        acc = linear_probe(
            train_split.xs[m], train_split.y, val.xs[m], val.y, spec.n_classes
        )
        print(f"  modality {m + 1} raw probe accuracy: {acc:.3f}")
    return 0


def _load_data_dir(path: str):
    npz = Path(path) / "data.npz"
    if not npz.exists():
        raise CliError(f"dataset not found: {npz}")
    return load_dataset(str(npz))


def run_summary_extras(res, data) -> None:
    """Attach test predictions and the own-heads error matrix to a summary.

    For fused methods the unimodal predictors are the model's own linear
    heads (untrained heads are reported as-is); for the ensemble, its
    members. Single-modality runs have no multimodal prediction to cross, so
    they carry predictions only; the sweep layer crosses them with the
    multimodal runs of the same cell and seed.
    """
    test = data.splits["test"]
    model = res.model
    if isinstance(model, EnsembleModel):
        uni = [
            np.argmax(uni_logits_np(member, m, test.xs[m]), axis=1)
            for m, member in enumerate(model.members)
        ]
        mm = np.argmax(model.predict_proba(test.xs), axis=1)
    elif res.summary["method"].startswith("unimodal-"):
        m = int(res.summary["method"].split("-")[1]) - 1
        preds = np.argmax(uni_logits_np(model, m, test.xs[m]), axis=1)
        res.summary["test_predictions"] = preds.tolist()
        res.summary["error_matrix"] = None
        return
    else:
        uni = [
            np.argmax(uni_logits_np(model, m, test.xs[m]), axis=1)
            for m in range(data.n_modalities)
        ]
        mm = np.argmax(fused_logits_np(model, test.xs), axis=1)
    res.summary["test_predictions"] = mm.tolist()
    res.summary["error_matrix"] = error_matrix(uni, mm, test.y).tolist()


def cmd_train(args, overrides: dict) -> int:
    data = _load_data_dir(args.data)
    run = config_from_args(RunConfig, args.config, overrides)
    try:
        validate_method(run.method, data.n_modalities)
    except ValueError as e:
        raise CliError(str(e))

    res = train(run, data)
    run_summary_extras(res, data)
    chash = res.summary["config_hash"]
    out = resolve_out(args.out, f"run-{chash}-s{run.seed}")
    out.mkdir(parents=True, exist_ok=True)

    meta = {"config_hash": chash, "seed": run.seed, "method": run.method}
    csv = records_to_csv(res.records, data.n_modalities, meta)
    write_output(out / "epochs.csv", csv, args.force)
    write_output(out / "summary.json", canonical_json(res.summary) + "\n", args.force)
    ckpt_meta = dict(meta, data_hash=res.summary["data_hash"])
    if isinstance(res.model, EnsembleModel):
        for m, member in enumerate(res.model.members, start=1):
            write_via(
                out / f"checkpoint-member{m}.npz",
                lambda p, mem=member: save_checkpoint(mem, p, ckpt_meta),
                args.force,
            )
    else:
        write_via(out / "checkpoint.npz", lambda p: save_checkpoint(res.model, p, ckpt_meta), args.force)

    s = res.summary
    print(
        f"{run.method} seed={run.seed} test_acc={s['test_accuracy']:.4f}"
        f" mce={s['mce_estimate']:+.4f} epochs={s['epochs_run']} -> {out}"
    )
    return 0


def cmd_probe(args, overrides: dict) -> int:
    if overrides:
        raise CliError(f"probe takes no config overrides: {sorted(overrides)[0]}")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    data = _load_data_dir(args.data)
    model, meta = load_checkpoint(str(ckpt))
    train_split, test = data.splits["train"], data.splits["test"]
    z_train = encode_latents(model, train_split.xs)
    z_test = encode_latents(model, test.xs)
    accs = [
        linear_probe(zt, train_split.y, zv, test.y, data.spec.n_classes)
        for zt, zv in zip(z_train, z_test)
    ]
    for m, acc in enumerate(accs, start=1):
        print(f"modality {m} latent probe accuracy: {acc:.4f}")
    if args.out:
        lines = [f"# {k}={v}" for k, v in sorted(meta.items())]
        lines.append("modality,probe_accuracy")
        lines += [f"{m},{fmt(a)}" for m, a in enumerate(accs, start=1)]
        write_output(Path(args.out), "\n".join(lines) + "\n", args.force)
    return 0


def cmd_sweep(args, overrides: dict) -> int:
    from .sweep import run_sweep

    if overrides:
        raise CliError(f"sweep overrides belong in the manifest: {sorted(overrides)[0]}")
    manifest = _load_json(args.manifest)
    out = resolve_out(args.out, f"sweep-{config_hash(manifest)}")
    return run_sweep(manifest, out, jobs=args.jobs, force=args.force)


def cmd_verify(args, overrides: dict) -> int:
    from .verify import run_checks

    if overrides:
        raise CliError(f"verify takes no config overrides: {sorted(overrides)[0]}")
    return run_checks(filter_substr=args.filter, seed=args.seed,
                      inject_greedy_sign_flip=args.inject_greedy_sign_flip)


def cmd_report(args, overrides: dict) -> int:
    from .report import report_run, report_sweep

    if overrides:
        raise CliError(f"report takes no config overrides: {sorted(overrides)[0]}")
    if bool(args.run) == bool(args.sweep):
        raise CliError("report needs exactly one of --run or --sweep")
    src = Path(args.run or args.sweep)
    if not src.exists():
        raise CliError(f"no such directory: {src}")
    out = Path(args.out) if args.out else src / "report"
    if args.run:
        written = report_run(src, out, args.force)
    else:
        written = report_sweep(src, out, args.force)
    for path in written:
        print(f"report: {path}")
    return 0


# argument parsing --------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcrlab",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a dataset", allow_abbrev=False)
    p.add_argument("--spec", help="JSON file with synthetic-spec fields")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite differing outputs")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one method on a dataset", allow_abbrev=False)
    p.add_argument("--data", required=True, help="directory from `mcrlab generate`")
    p.add_argument("--config", help="JSON file with run-config fields")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a manifest of runs on a grid", allow_abbrev=False)
    p.add_argument("--manifest", required=True, help="JSON sweep manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", help="linear probes on a saved checkpoint", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="optional CSV path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify", help="run the numerical property suite", allow_abbrev=False)
    p.add_argument("--filter", default="", help="run only checks whose name contains this")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-greedy-sign-flip", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="render figures and tables for a run or sweep", allow_abbrev=False)
    p.add_argument("--run", help="run directory from `mcrlab train`")
    p.add_argument("--sweep", help="sweep directory from `mcrlab sweep`")
    p.add_argument("--out", help="output directory (default: <source>/report)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = parse_overrides(extra)
        return args.func(args, overrides)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OutputClash as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
