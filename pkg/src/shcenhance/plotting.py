"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date metadata, so identical data gives identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def metric_vs_snr(rows, metric: str, path, title: str = "") -> Path:
    """One line per RT60: unprocessed (dashed) and enhanced (solid) versus SNR."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        rt60s = sorted({r["rt60"] for r in rows})
        colors = plt.cm.viridis(np.linspace(0, 0.9, max(len(rt60s), 1)))
        for color, rt in zip(colors, rt60s):
            sel = sorted((r for r in rows if r["rt60"] == rt), key=lambda r: r["snr_db"])
            snr = [r["snr_db"] for r in sel]
            ax.plot(snr, [r[f"{metric}_unprocessed"] for r in sel], "--", color=color, lw=1)
            ax.plot(snr, [r[f"{metric}_enhanced"] for r in sel], "-o", color=color, ms=3,
                    label=f"RT60 {rt:.1f} s")
        ax.set_xlabel("input SNR (dB)")
        label = {"stoi": "STOI (x100)", "si_sdr": "SI-SDR (dB)"}.get(metric, metric)
        ax.set_ylabel(label)
        ax.set_title(title or f"{label.split(' ')[0]}: enhanced (solid) vs unprocessed (dashed)")
        ax.legend(ncol=2, frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def improvement_heatmap(rows, metric: str, path) -> Path:
    snrs = sorted({r["snr_db"] for r in rows})
    rt60s = sorted({r["rt60"] for r in rows})
    grid = np.full((len(rt60s), len(snrs)), np.nan)
    for r in rows:
        grid[rt60s.index(r["rt60"]), snrs.index(r["snr_db"])] = (
            r[f"{metric}_enhanced"] - r[f"{metric}_unprocessed"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="magma")
        ax.set_xticks(range(len(snrs)), [f"{s:g}" for s in snrs])
        ax.set_yticks(range(len(rt60s)), [f"{t:.1f}" for t in rt60s])
        ax.set_xlabel("input SNR (dB)")
        ax.set_ylabel("RT60 (s)")
        ax.grid(False)
        fig.colorbar(im, ax=ax, label=f"{metric} improvement")
        fig.tight_layout()
        return _save(fig, path)


def order_mse_bars(mixed_mse, enhanced_mse, path) -> Path:
    orders = np.arange(len(mixed_mse))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.bar(orders - 0.2, mixed_mse, 0.4, label="unprocessed")
        ax.bar(orders + 0.2, enhanced_mse, 0.4, label="enhanced")
        ax.set_yscale("log")
        ax.set_xlabel("SH order n")
        ax.set_ylabel("mean SHC squared error")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def loss_curves(history, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        steps = np.arange(len(history))
        parts = np.array([h["train"]["parts"] for h in history])
        for g in range(parts.shape[1]):
            ax.semilogy(steps, parts[:, g], lw=1, label=f"group {g + 1}")
        ax.semilogy(steps, [h["train"]["total"] for h in history], "k-", lw=1.5, label="total")
        ax.semilogy(steps, [h["val_total"] for h in history], "k--", lw=1, label="monitor")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(ncol=2, frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def gram_residual(matrix, path, title: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.4))
        im = ax.imshow(np.log10(np.abs(matrix) + 1e-17), cmap="viridis", vmin=-16, vmax=1)
        ax.set_title(title)
        ax.set_xlabel("ACN index")
        ax.set_ylabel("ACN index")
        ax.grid(False)
        fig.colorbar(im, ax=ax, label="log10 |G - I|")
        fig.tight_layout()
        return _save(fig, path)


def array_layout(positions, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.4))
        ax.plot(positions[:, 0] * 100, positions[:, 1] * 100, "o", ms=4)
        for i, p in enumerate(positions):
            ax.annotate(str(i), (p[0] * 100, p[1] * 100), fontsize=6,
                        xytext=(3, 3), textcoords="offset points")
        ax.set_aspect("equal")
        ax.set_xlabel("x (cm)")
        ax.set_ylabel("y (cm)")
        fig.tight_layout()
        return _save(fig, path)
