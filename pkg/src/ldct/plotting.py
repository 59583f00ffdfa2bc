"""Figures and image files written next to the CSV outputs.

Everything goes through ``matplotlib.figure.Figure`` (no pyplot state) and
PNG metadata is pinned so reruns produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure
from PIL import Image

from .metrics import format_mean_std

PNG_METADATA = {"Software": None}


def to_uint8(image):
    """Clip to [0, 1] and quantize to 8 bits."""
    a = np.clip(np.nan_to_num(np.asarray(image, dtype=np.float64)), 0.0, 1.0)
    return np.round(a * 255.0).astype(np.uint8)


def save_png(image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="L").save(path, format="PNG")
    return path


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=PNG_METADATA)
    return path


def training_curves(histories, path, title="Validation curves"):
    """``histories`` maps a label to a TrainHistory; plots SSIM and PSNR per epoch."""
    fig = Figure(figsize=(9, 3.5))
    ax_s, ax_p = fig.subplots(1, 2)
    for label, h in histories.items():
        epochs = h.column("epoch")
        ax_s.plot(epochs, h.column("ssim"), label=label)
        ax_p.plot(epochs, h.column("psnr"), label=label)
    for ax, name in ((ax_s, "SSIM"), (ax_p, "PSNR [dB]")):
        ax.set_xlabel("epoch")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    ax_s.legend()
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(table, path, columns=("psnr", "ssim")):
    """Mean with std error bars per variant of an AblationTable."""
    stats = table.summary()
    variants = list(stats)
    fig = Figure(figsize=(4 * len(columns), 3.5))
    axes = np.atleast_1d(fig.subplots(1, len(columns)))
    x = np.arange(len(variants))
    for ax, col in zip(axes, columns):
        means = [stats[v][col][0] for v in variants]
        stds = [stats[v][col][1] for v in variants]
        ax.bar(x, means, yerr=stds, capsize=3, color="0.6")
        ax.set_xticks(x, variants, rotation=30, ha="right")
        ax.set_title(col.upper().replace("_", "-"))
        lo = min(m - s for m, s in zip(means, stds))
        hi = max(m + s for m, s in zip(means, stds))
        pad = 0.1 * (hi - lo) or 0.01 * abs(hi) or 0.01
        ax.set_ylim(lo - pad, hi + pad)
    fig.suptitle(f"{table.name} ablation")
    fig.tight_layout()
    return _save(fig, path)


def reconstruction_panel(fbp, output, gt, captions, path):
    """Side-by-side FBP input, network output and ground truth with metric captions."""
    fig = Figure(figsize=(9, 3.4))
    axes = fig.subplots(1, 3)
    for ax, img, key, title in zip(axes, (fbp, output, gt), ("fbp", "output", "ground_truth"),
                                   ("FBP", "Output", "Ground truth")):
        ax.imshow(np.clip(img, 0, 1), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_axis_off()
        cap = captions.get(key)
        ax.set_title(title if cap is None else f"{title}\n{caption_text(cap)}", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def caption_text(cap):
    if cap.get("psnr") is None:
        return ""
    p = cap["psnr"]
    p_txt = "inf" if p == float("inf") else f"{p:.2f}"
    return f"PSNR = {p_txt}, SSIM = {cap['ssim']:.4f}"


def metrics_bars(reports, path):
    """Grouped mean ± std bars for several labelled MetricsReports."""
    labels = list(reports)
    names = ("psnr", "ssim", "psnr_fr", "ssim_fr")
    fig = Figure(figsize=(12, 3.2))
    axes = fig.subplots(1, len(names))
    for ax, name in zip(axes, names):
        aggs = [reports[k].aggregates().get(name, (np.nan, np.nan)) for k in labels]
        ax.bar(np.arange(len(labels)), [a[0] for a in aggs], yerr=[a[1] for a in aggs],
               capsize=3, color="0.6")
        ax.set_xticks(np.arange(len(labels)), labels)
        ax.set_title(name.upper().replace("_", "-"))
        ax.set_xlabel("; ".join(format_mean_std(*a, digits=3) for a in aggs), fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
