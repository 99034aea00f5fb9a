"""Figures written straight to files (Agg backend, no display needed)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_p_sweep(sweep, path, protocols=None):
    """mAP against p on a log axis, the learned p as a dotted vertical line."""
    ps = [p for p, _ in sweep.rows]
    protocols = protocols or list(sweep.rows[0][1])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for proto in protocols:
        ax.plot(ps, [100 * m[proto] for _, m in sweep.rows], marker="o", label=proto)
    ax.axvline(sweep.learned_p, color="k", linestyle=":", label=f"learned p = {sweep.learned_p:.2f}")
    ax.set_xscale("log")
    ax.set_xlabel("p")
    ax.set_ylabel("mAP (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_training(report, path):
    epochs = [e.epoch for e in report.epochs]
    fig, (ax, ax_p) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax.plot(epochs, [e.loss for e in report.epochs], label="total")
    ax.plot(epochs, [e.fos for e in report.epochs], label="fos")
    ax.plot(epochs, [e.sos for e in report.epochs], label="sos")
    val = [e.val_loss for e in report.epochs]
    if not all(np.isnan(val)):
        ax.plot(epochs, val, linestyle="--", label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax_p.plot(epochs, [e.p for e in report.epochs], color="tab:purple")
    ax_p.set_xlabel("epoch")
    ax_p.set_ylabel("p")
    return _save(fig, path)


def plot_heatmap(image, heat, xy, path):
    """Source image next to the heatmap overlay, the query location starred."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    for ax in axes:
        ax.imshow(image, cmap="gray" if image.ndim == 2 else None, vmin=0, vmax=1)
        ax.plot(*xy, marker="*", color="magenta", markersize=12)
        ax.set_axis_off()
    axes[1].imshow(heat, cmap="jet", alpha=0.5, vmin=0, vmax=1)
    return _save(fig, path)
