"""Figure and table rendering for finished runs and sweeps.

`mcrlab report --run <dir>` reads epochs.csv + summary.json and renders
training curves (losses, accuracy, per-modality importance and probes, the
matching vs non-matching divergence split) plus an error-matrix table.
`mcrlab report --sweep <dir>` reads runs.csv/aggregate.csv and renders
accuracy heatmaps per method over the first two grid axes, method-vs-method
deltas, and accuracy-vs-competition lines.

PNG bytes go through the same idempotency gate as the CSVs; figures embed
the config hash in their PNG metadata.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read_csv(path: Path) -> tuple[dict, list[dict]]:
    """Parse a delimited file with # key=value header comments."""
    meta, header, rows = {}, None, []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append(dict(zip(header, line.split(","))))
    return meta, rows


def _num(row: dict, key: str) -> float:
    v = row.get(key, "")
    return float(v) if v not in ("", None) else float("nan")


def _save_png(fig, path: Path, meta: dict, force: bool) -> Path:
    from .cli import write_output

    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata={"Software": f"mcrlab {meta}"})
    plt.close(fig)
    write_output(path, buf.getvalue(), force)
    return path


# single-run report --------------------------------------------------------------


def report_run(run_dir: Path, out: Path, force: bool = False) -> list[Path]:
    from .cli import CliError, write_output

    epochs_path = run_dir / "epochs.csv"
    summary_path = run_dir / "summary.json"
    if not epochs_path.exists() or not summary_path.exists():
        raise CliError(f"{run_dir} is not a run directory (missing epochs.csv or summary.json)")
    meta, rows = _read_csv(epochs_path)
    summary = json.loads(summary_path.read_text())
    out.mkdir(parents=True, exist_ok=True)
    written = []

    n_mod = int(summary.get("n_modalities", 2))
    epochs = [int(r["epoch"]) for r in rows]

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for key, label in (("train_total", "train total"), ("val_total", "val total")):
        axes[0].plot(epochs, [_num(r, key) for r in rows], label=label)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[0].set_title("objective")
    for key, label in (("train_task", "train task"), ("val_task", "val task")):
        axes[1].plot(epochs, [_num(r, key) for r in rows], label=label)
    axes[1].set_xlabel("epoch")
    axes[1].legend()
    axes[1].set_title("task cross-entropy")
    fig.tight_layout()
    written.append(_save_png(fig, out / "losses.png", meta, force))

    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(epochs, [_num(r, "val_accuracy") for r in rows], label="val accuracy")
    if summary.get("test_accuracy") is not None:
        ax.axhline(summary["test_accuracy"], ls="--", c="gray", label="test accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    written.append(_save_png(fig, out / "accuracy.png", meta, force))

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for m in range(1, n_mod + 1):
        axes[0].plot(epochs, [_num(r, f"importance{m}") for r in rows], label=f"modality {m}")
        axes[1].plot(epochs, [_num(r, f"probe{m}") for r in rows], label=f"modality {m}")
    axes[0].set_title("importance")
    axes[0].set_xlabel("epoch")
    axes[0].legend()
    axes[1].set_title("latent probe accuracy")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylim(0, 1)
    axes[1].legend()
    fig.tight_layout()
    written.append(_save_png(fig, out / "modalities.png", meta, force))

    jm = [_num(r, "jsd_matching") for r in rows]
    jn = [_num(r, "jsd_nonmatching") for r in rows]
    if not all(np.isnan(jm)):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.plot(epochs, jm, label="label kept")
        ax.plot(epochs, jn, label="label changed")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean divergence")
        ax.legend()
        fig.tight_layout()
        written.append(_save_png(fig, out / "divergence.png", meta, force))

    if summary.get("error_matrix"):
        mat = np.asarray(summary["error_matrix"])
        lines = [f"# config_hash={summary['config_hash']}", f"# seed={summary['seed']}"]
        header = ["outcome"] + [f"uni_correct_{k}" for k in range(mat.shape[1])]
        lines.append(",".join(header))
        lines.append(",".join(["mm_correct"] + [str(int(v)) for v in mat[0]]))
        lines.append(",".join(["mm_wrong"] + [str(int(v)) for v in mat[1]]))
        path = out / "error_matrix.csv"
        write_output(path, "\n".join(lines) + "\n", force)
        written.append(path)

    return written


# sweep report --------------------------------------------------------------------


def _heat(ax, grid: np.ndarray, xs, ys, title: str):
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(xs)), [f"{v:g}" for v in xs])
    ax.set_yticks(range(len(ys)), [f"{v:g}" for v in ys])
    ax.set_title(title)
    return im


def report_sweep(sweep_dir: Path, out: Path, force: bool = False) -> list[Path]:
    from .cli import CliError

    agg_path = sweep_dir / "aggregate.csv"
    runs_path = sweep_dir / "runs.csv"
    if not agg_path.exists() or not runs_path.exists():
        raise CliError(f"{sweep_dir} is not a sweep directory (missing runs.csv or aggregate.csv)")
    meta, agg = _read_csv(agg_path)
    _, runs = _read_csv(runs_path)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    known = {"cell", "method", "n_seeds", "seed", "status"}
    axes_names = [
        c for c in agg[0] if c not in known and not c.endswith(("_mean", "_std"))
    ] if agg else []
    methods = sorted({r["method"] for r in agg})

    if len(axes_names) >= 2:
        ax1, ax2 = axes_names[0], axes_names[1]
        xs = sorted({float(r[ax1]) for r in agg})
        ys = sorted({float(r[ax2]) for r in agg})
        grids = {}
        for method in methods:
            grid = np.full((len(ys), len(xs)), np.nan)
            for r in agg:
                if r["method"] != method or not r["accuracy_mean"]:
                    continue
                grid[ys.index(float(r[ax2])), xs.index(float(r[ax1]))] = float(r["accuracy_mean"])
            grids[method] = grid

        fig, axs = plt.subplots(1, len(methods), figsize=(4 * len(methods), 3.6), squeeze=False)
        vmin = min(np.nanmin(g) for g in grids.values())
        vmax = max(np.nanmax(g) for g in grids.values())
        for ax, method in zip(axs[0], methods):
            im = _heat(ax, grids[method], xs, ys, method)
            im.set_clim(vmin, vmax)
            ax.set_xlabel(ax1)
            ax.set_ylabel(ax2)
        fig.colorbar(im, ax=list(axs[0]), label="mean accuracy")
        written.append(_save_png(fig, out / "accuracy_heatmaps.png", meta, force))

        if len(methods) >= 2:
            fig, axs = plt.subplots(
                1, len(methods) - 1, figsize=(4 * (len(methods) - 1), 3.6), squeeze=False
            )
            base = methods[0]
            for ax, method in zip(axs[0], methods[1:]):
                delta = grids[method] - grids[base]
                lim = np.nanmax(np.abs(delta)) or 1.0
                im = ax.imshow(delta, origin="lower", aspect="auto", cmap="RdBu_r",
                               vmin=-lim, vmax=lim)
                ax.set_xticks(range(len(xs)), [f"{v:g}" for v in xs])
                ax.set_yticks(range(len(ys)), [f"{v:g}" for v in ys])
                ax.set_title(f"{method} - {base}")
                ax.set_xlabel(ax1)
                ax.set_ylabel(ax2)
            fig.colorbar(im, ax=list(axs[0]), label="accuracy delta")
            written.append(_save_png(fig, out / "accuracy_deltas.png", meta, force))

        # accuracy against the ratio of the first two axes, the competition view
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        for method in methods:
            pts = [
                (float(r[ax1]) / float(r[ax2]), _num(r, "accuracy"))
                for r in runs
                if r["method"] == method and r["status"] == "ok" and r.get("accuracy")
                and float(r[ax2]) != 0.0
            ]
            if not pts:
                continue
            pts.sort()
            xvals = [p[0] for p in pts]
            yvals = [p[1] for p in pts]
            ax.scatter(xvals, yvals, s=12, alpha=0.5)
            coef = np.polyfit(xvals, yvals, 1)
            grid_x = np.linspace(min(xvals), max(xvals), 50)
            ax.plot(grid_x, np.polyval(coef, grid_x), label=f"{method} (slope {coef[0]:+.3f})")
        ax.set_xlabel(f"{ax1} / {ax2}")
        ax.set_ylabel("accuracy")
        ax.legend()
        fig.tight_layout()
        written.append(_save_png(fig, out / "competition.png", meta, force))
    elif axes_names:
        ax1 = axes_names[0]
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        for method in methods:
            rows = [r for r in agg if r["method"] == method and r["accuracy_mean"]]
            rows.sort(key=lambda r: float(r[ax1]))
            ax.errorbar(
                [float(r[ax1]) for r in rows],
                [float(r["accuracy_mean"]) for r in rows],
                yerr=[float(r["accuracy_std"] or 0) for r in rows],
                marker="o",
                label=method,
            )
        ax.set_xlabel(ax1)
        ax.set_ylabel("mean accuracy")
        ax.legend()
        fig.tight_layout()
        written.append(_save_png(fig, out / "accuracy_lines.png", meta, force))
    else:
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        accs = [_num(r, "accuracy_mean") for r in agg]
        labels = [f"{r['cell']}/{r['method']}" for r in agg]
        ax.barh(range(len(agg)), accs)
        ax.set_yticks(range(len(agg)), labels, fontsize=7)
        ax.set_xlabel("mean accuracy")
        fig.tight_layout()
        written.append(_save_png(fig, out / "accuracy_bars.png", meta, force))

    return written
