"""Report serialisation: delimited rows, run manifests and rendered figures.

Every subcommand writes its machine-readable report as CSV, a JSON run
manifest beside it, and (where the report has a natural picture) a PNG.
Manifests contain no timestamps or absolute paths, so identical inputs
produce byte-identical report and manifest files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import __version__

OUTDIR_ENV = "DRONEDET_OUT"
DEFAULT_OUTDIR = "reports"


def resolve_outdir(flag_value: str | None) -> Path:
    """Output directory: --out flag, else $DRONEDET_OUT, else ./reports."""
    out = Path(flag_value or os.environ.get(OUTDIR_ENV) or DEFAULT_OUTDIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def write_manifest(path: Path, command: str, *, config: dict | None = None,
                   seed: int | None = None, inputs: dict[str, str] | None = None,
                   outputs: list[str] | None = None, extra: dict | None = None) -> Path:
    manifest = {
        "tool": "dronedet",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config or {},
        "inputs": {k: file_digest(v) for k, v in (inputs or {}).items()},
        "outputs": outputs or [],
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def save_figure(fig, path: Path) -> Path:
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def print_table(headers: list[str], rows: list[list], file=None) -> None:
    cells = [[str(c) for c in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    print(line, file=file)
    print("-" * len(line), file=file)
    for row in cells:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)), file=file)


def _new_axes(title: str, xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def fig_layer_macs(rows, top: int = 25):
    """Horizontal bars of the costliest layers, coloured by section."""
    ranked = sorted(rows, key=lambda r: r.macs, reverse=True)[:top]
    colors = {"backbone": "tab:blue", "neck": "tab:purple", "head": "tab:green"}
    fig, ax = _new_axes("Costliest layers", "MACs (millions)", "")
    names = [r.name for r in ranked][::-1]
    vals = [r.macs / 1e6 for r in ranked][::-1]
    ax.barh(names, vals, color=[colors.get(r.section, "gray") for r in ranked][::-1])
    ax.tick_params(axis="y", labelsize=7)
    return fig


def fig_pr_curves(pr_curves: dict):
    fig, ax = _new_axes("Precision-recall at IoU 0.5", "recall", "precision")
    for class_id, (recall, precision) in sorted(pr_curves.items()):
        ax.plot(recall, precision, label=f"class {class_id}", linewidth=1.2)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    if pr_curves:
        ax.legend(fontsize=7, ncol=2)
    return fig


def fig_tide(penalties: dict[str, float]):
    fig, ax = _new_axes("Oracle-fix penalties", "", "mAP@0.5 penalty (pp)")
    names = list(penalties)
    ax.bar(names, [penalties[n] for n in names], color="tab:red")
    return fig


def fig_area_hist(edges, counts):
    fig, ax = _new_axes("Instance area distribution", "box area (px^2)", "instances")
    centers = [(edges[i] + edges[i + 1]) / 2 for i in range(len(counts))]
    widths = [edges[i + 1] - edges[i] for i in range(len(counts))]
    ax.bar(centers, counts, width=widths, align="center", edgecolor="black", linewidth=0.3)
    ax.set_xscale("symlog", linthresh=1.0)
    return fig


def fig_grad_errors(errors: dict[str, list[float]]):
    fig, ax = _new_axes("Gradient check", "log10 relative error", "pairs")
    for kind, errs in errors.items():
        vals = np.log10(np.maximum(np.asarray(errs), 1e-16))
        ax.hist(vals, bins=40, alpha=0.5, label=kind)
    ax.legend(fontsize=8)
    return fig


def fig_focus_curve(state, samples: list[tuple[float, float]]):
    """Focusing factor against the outlier score, with evaluated samples."""
    from .losses import focus_factor

    fig, ax = _new_axes("Focusing factor", "outlier score beta", "focus")
    betas = np.linspace(1e-3, max(3.0 * state.delta, 1.0), 300)
    ax.plot(betas, [focus_factor(b, state) for b in betas], color="tab:blue")
    if samples:
        ax.scatter([b for b, _ in samples], [f for _, f in samples],
                   color="tab:red", zorder=3, label="evaluated pairs")
        ax.legend(fontsize=8)
    return fig


def fig_tap_magnitudes(rows: list[dict], magnitudes: list[float]):
    fig, ax = _new_axes("Forward-pass taps", "", "mean |activation|")
    names = [r["tap"] for r in rows]
    ax.bar(names, magnitudes, color="tab:blue")
    ax.tick_params(axis="x", labelrotation=60, labelsize=7)
    return fig
