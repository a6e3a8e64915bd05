"""Grid sweeps over (data, run) configurations.

A manifest is a JSON object:

    {
      "data": { synthetic-spec fields },
      "run": { run-config fields },
      "methods": ["joint", "mcr"],
      "seeds": [0, 1, 2],
      "grid": {
        "U1": {"key": "data.unique_frac_1", "values": [0.3, 0.4]},
        "S":  {"key": "data.shared_frac",   "values": [0.3, 0.2]}
      }
    }

`grid` takes the cartesian product of its axes; the axis name becomes a
column in runs.csv, so Fig.-1-style tables fall out directly (U1, S, method,
seed, accuracy). `cells` is the non-product alternative: an explicit list of
{"label": ..., "set": {dotted key: value}} entries, one cell each, for
ablations that are not a product. Dotted keys address either the data spec
("data.") or the run config ("run.").

Every (cell, method, seed) trains in its own task; failures are recorded in
the row's status column and the sweep continues. Workers run in a process
pool (--jobs); rows merge in manifest order no matter when tasks finish.
Datasets are regenerated in-memory per task from the cell's spec, which the
seeded generator makes reproducible.
"""

from __future__ import annotations

import copy
import itertools
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ._util import canonical_json, config_hash, fmt
from .models import save_checkpoint
from .synthdata import SyntheticSpec, generate
from .trainer import EnsembleModel, RunConfig, error_matrix, records_to_csv, train


class ManifestError(Exception):
    pass


def _expand_cells(manifest: dict) -> tuple[list[str], list[dict]]:
    """Return (axis column names, cells); each cell is
    {"tag": str, "columns": {name: value}, "set": {dotted: value}}."""
    if "grid" in manifest and "cells" in manifest:
        raise ManifestError("manifest has both 'grid' and 'cells'")
    if "grid" in manifest:
        grid = manifest["grid"]
        axes = []
        for name, axis in grid.items():
            if not isinstance(axis, dict) or "key" not in axis or "values" not in axis:
                raise ManifestError(f"grid axis '{name}' needs 'key' and 'values'")
            _check_dotted(axis["key"])
            if not axis["values"]:
                raise ManifestError(f"grid axis '{name}' has no values")
            axes.append((name, axis["key"], list(axis["values"])))
        cells = []
        for combo in itertools.product(*[vals for _, _, vals in axes]):
            columns = {name: v for (name, _, _), v in zip(axes, combo)}
            tag = "_".join(f"{name}={fmt(v)}" for name, v in columns.items())
            sets = {key: v for (_, key, _), v in zip(axes, combo)}
            cells.append({"tag": tag, "columns": columns, "set": sets})
        return [name for name, _, _ in axes], cells
    if "cells" in manifest:
        cells = []
        seen = set()
        for entry in manifest["cells"]:
            if "label" not in entry or "set" not in entry:
                raise ManifestError("each cell needs 'label' and 'set'")
            if entry["label"] in seen:
                raise ManifestError(f"duplicate cell label '{entry['label']}'")
            seen.add(entry["label"])
            for key in entry["set"]:
                _check_dotted(key)
            cells.append({"tag": entry["label"], "columns": {}, "set": dict(entry["set"])})
        return [], cells
    return [], [{"tag": "base", "columns": {}, "set": {}}]


def _check_dotted(key: str) -> None:
    if not (key.startswith("data.") or key.startswith("run.")):
        raise ManifestError(f"dotted key '{key}' must start with 'data.' or 'run.'")


def expand_manifest(manifest: dict) -> tuple[list[str], list[dict]]:
    """Flatten the manifest into one task per (cell, method, seed)."""
    methods = manifest.get("methods")
    seeds = manifest.get("seeds")
    if not methods or not isinstance(methods, list):
        raise ManifestError("manifest needs a non-empty 'methods' list")
    if not seeds or not isinstance(seeds, list):
        raise ManifestError("manifest needs a non-empty 'seeds' list")
    axis_names, cells = _expand_cells(manifest)
    tasks = []
    seen_paths = set()
    for cell in cells:
        for method in methods:
            for seed in seeds:
                rel = f"runs/{cell['tag']}/{method}-s{seed}"
                if rel in seen_paths:
                    raise ManifestError(f"duplicate run output path: {rel}")
                seen_paths.add(rel)
                tasks.append(
                    {
                        "cell": cell["tag"],
                        "columns": cell["columns"],
                        "set": cell["set"],
                        "method": method,
                        "seed": int(seed),
                        "rel": rel,
                        "data": manifest.get("data", {}),
                        "run": manifest.get("run", {}),
                    }
                )
    return axis_names, tasks


def _cell_spec(task: dict) -> SyntheticSpec:
    from .cli import build_config, deep_set  # lazily; cli imports this module lazily too

    data_doc = copy.deepcopy(task["data"])
    for dotted, value in task["set"].items():
        root, rest = dotted.split(".", 1)
        if root == "data":
            deep_set(data_doc, rest, value)
    spec = build_config(SyntheticSpec, data_doc)
    spec.validate()
    return spec


def _task_configs(task: dict) -> tuple[SyntheticSpec, RunConfig]:
    from .cli import build_config, deep_set

    run_doc = copy.deepcopy(task["run"])
    for dotted, value in task["set"].items():
        root, rest = dotted.split(".", 1)
        if root == "run":
            deep_set(run_doc, rest, value)
    run_doc["method"] = task["method"]
    run_doc["seed"] = task["seed"]
    return _cell_spec(task), build_config(RunConfig, run_doc)


def run_task(task: dict) -> dict:
    """Train one (cell, method, seed); returns a result row. Never raises."""
    from .cli import run_summary_extras, write_output

    try:
        spec, run = _task_configs(task)
        data = generate(spec)
        res = train(run, data)
        run_summary_extras(res, data)

        out = Path(task["out_root"]) / task["rel"]
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "config_hash": res.summary["config_hash"],
            "seed": run.seed,
            "method": run.method,
        }
        force = task["force"]
        write_output(
            out / "epochs.csv", records_to_csv(res.records, data.n_modalities, meta), force
        )
        write_output(out / "summary.json", canonical_json(res.summary) + "\n", force)
        ckpt_meta = dict(meta, data_hash=res.summary["data_hash"])

        def _save(model, name):
            with tempfile.TemporaryDirectory() as tmp:
                staged = Path(tmp) / name
                save_checkpoint(model, str(staged), ckpt_meta)
                write_output(out / name, staged.read_bytes(), force)

        if isinstance(res.model, EnsembleModel):
            for m, member in enumerate(res.model.members, start=1):
                _save(member, f"checkpoint-member{m}.npz")
        else:
            _save(res.model, "checkpoint.npz")

        return {"task": task, "status": "ok", "summary": res.summary}
    except Exception as e:  # recorded per-row, sweep continues
        return {"task": task, "status": f"error: {e}", "summary": None}


def _metric_columns(n_modalities: int) -> list[str]:
    cols = ["accuracy", "mce", "best_epoch", "epochs_run"]
    cols += [f"importance{m}" for m in range(1, n_modalities + 1)]
    cols += [f"probe{m}" for m in range(1, n_modalities + 1)]
    return cols


def _row_metrics(summary: dict | None, n_modalities: int) -> dict:
    empty = {c: "" for c in _metric_columns(n_modalities)}
    if summary is None:
        return empty
    out = dict(empty)
    out["accuracy"] = fmt(summary["test_accuracy"])
    out["mce"] = fmt(summary["mce_estimate"])
    out["best_epoch"] = "" if summary["best_epoch"] is None else str(summary["best_epoch"])
    out["epochs_run"] = str(summary["epochs_run"])
    if summary.get("importance_test"):
        for m, v in enumerate(summary["importance_test"], start=1):
            out[f"importance{m}"] = fmt(float(v))
    if summary.get("probe_test"):
        for m, v in enumerate(summary["probe_test"], start=1):
            out[f"probe{m}"] = fmt(float(v))
    return out


def _aggregate_rows(axis_names, results, n_modalities):
    """Mean and spread per (cell, method) over seeds, in first-seen order."""
    order = []
    by_key: dict[tuple, list] = {}
    for r in results:
        key = (r["task"]["cell"], r["task"]["method"])
        if key not in by_key:
            by_key[key] = []
            order.append((key, r["task"]["columns"]))
        if r["status"] == "ok":
            by_key[key].append(r["summary"])
    rows = []
    for (cell, method), columns in order:
        summaries = by_key[(cell, method)]
        row = {"cell": cell, **{a: fmt(columns.get(a, "")) for a in axis_names},
               "method": method, "n_seeds": str(len(summaries))}
        accs = [s["test_accuracy"] for s in summaries]
        mces = [s["mce_estimate"] for s in summaries]

        def stats(vals):
            if not vals:
                return "", ""
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            return fmt(mean), fmt(std)

        row["accuracy_mean"], row["accuracy_std"] = stats(accs)
        row["mce_mean"], row["mce_std"] = stats(mces)
        for m in range(1, n_modalities + 1):
            vals = [
                s["probe_test"][m - 1]
                for s in summaries
                if s.get("probe_test")
            ]
            row[f"probe{m}_mean"], _ = stats(vals)
            ivals = [
                s["importance_test"][m - 1]
                for s in summaries
                if s.get("importance_test")
            ]
            row[f"importance{m}_mean"], _ = stats(ivals)
        rows.append(row)
    return rows


def _error_matrix_rows(results, n_modalities):
    """Cross-model error matrices: each multimodal run crossed with the same
    cell and seed's unimodal baselines. Emitted only where the manifest
    trained unimodal-<m> for every modality. Test labels are regenerated per
    cell from its data spec."""
    uni_preds: dict[tuple, dict[int, list]] = {}
    for r in results:
        if r["status"] != "ok":
            continue
        method = r["task"]["method"]
        if method.startswith("unimodal-"):
            m = int(method.split("-")[1])
            key = (r["task"]["cell"], r["task"]["seed"])
            uni_preds.setdefault(key, {})[m] = r["summary"]["test_predictions"]
    labels: dict[str, np.ndarray] = {}
    rows = []
    for r in results:
        if r["status"] != "ok" or r["task"]["method"].startswith("unimodal-"):
            continue
        key = (r["task"]["cell"], r["task"]["seed"])
        uni = uni_preds.get(key, {})
        preds = r["summary"].get("test_predictions")
        if len(uni) != n_modalities or preds is None:
            continue
        cell = r["task"]["cell"]
        if cell not in labels:
            labels[cell] = generate(_cell_spec(r["task"])).splits["test"].y
        mat = error_matrix(
            [np.asarray(uni[m]) for m in range(1, n_modalities + 1)],
            np.asarray(preds),
            labels[cell],
        )
        row = {"cell": cell, "method": r["task"]["method"], "seed": str(r["task"]["seed"])}
        for k in range(n_modalities + 1):
            row[f"mm_correct_uni{k}"] = str(int(mat[0, k]))
        for k in range(n_modalities + 1):
            row[f"mm_wrong_uni{k}"] = str(int(mat[1, k]))
        row["total"] = str(int(mat.sum()))
        rows.append(row)
    return rows


def _csv(rows: list[dict], columns: list[str], meta: dict) -> str:
    lines = [f"# {k}={v}" for k, v in sorted(meta.items())]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(str(row.get(c, "")) for c in columns))
    return "\n".join(lines) + "\n"


def run_sweep(manifest: dict, out: Path, jobs: int = 1, force: bool = False) -> int:
    from .cli import CliError, write_output

    try:
        axis_names, tasks = expand_manifest(manifest)
    except ManifestError as e:
        raise CliError(str(e))
    out.mkdir(parents=True, exist_ok=True)
    mhash = config_hash(manifest)
    write_output(out / "manifest.json", canonical_json(manifest) + "\n", force)

    for t in tasks:
        t["out_root"] = str(out)
        t["force"] = force

    if jobs <= 1:
        results = [run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_task, tasks))

    n_mod = 2
    for r in results:
        if r["status"] == "ok":
            n_mod = r["summary"]["n_modalities"]
            break

    seeds = manifest.get("seeds", [])
    meta = {"config_hash": mhash, "seed": ";".join(str(s) for s in seeds)}

    run_cols = ["cell", *axis_names, "method", "seed", "status", *_metric_columns(n_mod)]
    run_rows = []
    for r in results:
        t = r["task"]
        row = {"cell": t["cell"], **{a: fmt(t["columns"].get(a, "")) for a in axis_names},
               "method": t["method"], "seed": str(t["seed"]), "status": r["status"]}
        row.update(_row_metrics(r["summary"], n_mod))
        run_rows.append(row)
    write_output(out / "runs.csv", _csv(run_rows, run_cols, meta), force)

    agg_rows = _aggregate_rows(axis_names, results, n_mod)
    agg_cols = ["cell", *axis_names, "method", "n_seeds", "accuracy_mean", "accuracy_std",
                "mce_mean", "mce_std"]
    agg_cols += [f"importance{m}_mean" for m in range(1, n_mod + 1)]
    agg_cols += [f"probe{m}_mean" for m in range(1, n_mod + 1)]
    write_output(out / "aggregate.csv", _csv(agg_rows, agg_cols, meta), force)

    em_rows = _error_matrix_rows(results, n_mod)
    if em_rows:
        em_cols = ["cell", "method", "seed"]
        em_cols += [f"mm_correct_uni{k}" for k in range(n_mod + 1)]
        em_cols += [f"mm_wrong_uni{k}" for k in range(n_mod + 1)]
        em_cols.append("total")
        write_output(out / "error_matrix.csv", _csv(em_rows, em_cols, meta), force)

    failed = [r for r in results if r["status"] != "ok"]
    print(f"sweep {mhash}: {len(results) - len(failed)}/{len(results)} runs ok -> {out}")
    for r in failed:
        print(f"  {r['task']['rel']}: {r['status']}", file=sys.stderr)
    return 1 if failed else 0
