"""Figure rendering for pipeline outputs.  All functions write PNG files
and never open interactive windows."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ErrorReport
from .volume import Volume3D


def render_loss_curves(loss_entries: list, path) -> None:
    """Objective history from a registration run.

    Expects the entries stored in loss.json: one dict per accepted iterate
    with iteration, reg_term, and sim_term."""
    iters = [e["iter"] for e in loss_entries]
    reg = np.array([e["reg_term"] for e in loss_entries])
    sim = np.array([e["sim_term"] for e in loss_entries])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iters, reg + sim, label="total", color="black")
    ax.plot(iters, sim, label="similarity", color="tab:red", alpha=0.7)
    ax.plot(iters, reg, label="regularity", color="tab:blue", alpha=0.7)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    if ((reg + sim) > 0).any():
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_error_report(report: ErrorReport, path, title="landmark error") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ids = np.arange(report.count)
    ax.bar(ids, report.errors_mm, color="tab:blue", alpha=0.8)
    ax.axhline(report.mean_mm, color="black", linestyle="--",
               label=f"mean {report.mean_mm:.3g} mm")
    ax.set_xlabel("landmark")
    ax.set_ylabel("error (mm)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_jacobian_slice(jac: Volume3D, path, z: int | None = None) -> None:
    """Mid-slice map of the deformation Jacobian determinant, centered on 1
    so folding (values <= 0) stands out."""
    if z is None:
        z = jac.dims[2] // 2
    sl = jac.data[:, :, z].T
    span = max(abs(float(sl.min()) - 1.0), abs(float(sl.max()) - 1.0), 0.1)
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(sl, origin="lower", cmap="coolwarm",
                   vmin=1.0 - span, vmax=1.0 + span)
    fig.colorbar(im, ax=ax, label="det J")
    ax.set_title(f"Jacobian determinant, slice z={z}")
    ax.set_xlabel("x (voxels)")
    ax.set_ylabel("y (voxels)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_insertion_summary(rows: list, path) -> None:
    """Grouped bars of entry/end errors, one group per trajectory.

    rows: (name, entry_error_mm, end_error_mm) triples."""
    names = [r[0] for r in rows]
    entry = [r[1] for r in rows]
    end = [r[2] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, entry, width=0.4, label="entry", color="tab:green")
    ax.bar(x + 0.2, end, width=0.4, label="endpoint", color="tab:orange")
    ax.set_xticks(x, names)
    ax.set_ylabel("error (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
