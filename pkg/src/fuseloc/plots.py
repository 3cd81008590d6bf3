"""Figure rendering for report outputs.

Every function renders straight to a file with the Agg backend; nothing is
shown interactively.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .scene_model import GridSpec, NetParams, descriptor_to_info, net_forward, rasterize
from .simulator import Dataset, true_global_poses

__all__ = [
    "save_trajectory_plot",
    "save_segment_error_plot",
    "save_loss_curve",
    "save_information_ellipses",
]


def save_trajectory_plot(path, truth: np.ndarray, trajectories: dict[str, np.ndarray]) -> None:
    """Ground truth and estimated trajectories in the world frame."""
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(truth[:, 0], truth[:, 1], "k-", linewidth=2, label="truth")
    for name, traj in trajectories.items():
        ax.plot(traj[:, 0], traj[:, 1], linewidth=1, label=name)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_segment_error_plot(path, rows) -> None:
    """Mean segment errors per method with interquartile bars."""
    names = [row.name for row in rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for ax, which, label in (
        (axes[0], "dist", "position error [m]"),
        (axes[1], "heading", "heading error [rad]"),
    ):
        means = [getattr(row.stats, f"{which}_mean") for row in rows]
        q25 = [getattr(row.stats, f"{which}_q25") for row in rows]
        q75 = [getattr(row.stats, f"{which}_q75") for row in rows]
        pos = np.arange(len(rows))
        err = np.array([np.maximum(0, np.array(means) - q25), np.maximum(0, np.array(q75) - means)])
        ax.bar(pos, means, yerr=err, capsize=3, color="steelblue")
        ax.set_xticks(pos, names, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel(label)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_loss_curve(path, trace) -> None:
    """Per-epoch mean training loss on a log scale."""
    epochs = [row.epoch for row in trace]
    losses = [row.mean_loss for row in trace]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, losses, "o-", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean segment loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_information_ellipses(path, dataset: Dataset, params: NetParams, every: int = 50) -> None:
    """Scans with the learned measurement covariance ellipse, every N frames.

    Draws the 2-sigma ellipse of the translation block of ``Q^-1`` at the
    vehicle position, in the world frame, over the true trajectory.
    """
    spec = GridSpec(width=params.arch.grid_width, height=params.arch.grid_height)
    truth = true_global_poses(dataset)
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(truth[:, 0], truth[:, 1], "k-", linewidth=1, label="truth")
    angles = np.linspace(0.0, 2.0 * np.pi, 64)
    circle = np.vstack([np.cos(angles), np.sin(angles)])
    for t in range(0, len(dataset.frames), every):
        frame = dataset.frames[t]
        if frame.scan.shape[0] == 0:
            continue
        descriptor, _ = net_forward(params, rasterize(frame.scan, spec))
        info = descriptor_to_info(descriptor)
        cov = np.linalg.inv(info)[:2, :2]
        vals, vecs = np.linalg.eigh(cov)
        heading = truth[t, 2]
        rot = np.array([[np.cos(heading), -np.sin(heading)], [np.sin(heading), np.cos(heading)]])
        ellipse = rot @ (vecs @ (2.0 * np.sqrt(np.maximum(vals, 0.0))[:, None] * circle))
        ax.plot(truth[t, 0] + ellipse[0], truth[t, 1] + ellipse[1], "r-", linewidth=0.8)
        pts_world = (rot @ frame.scan.T).T + truth[t, :2]
        ax.plot(pts_world[:, 0], pts_world[:, 1], ".", markersize=1, color="gray")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
