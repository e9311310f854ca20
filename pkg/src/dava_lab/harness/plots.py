"""Static figures: capacity trajectories with a one-standard-deviation band."""
from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np


def capacity_bands(trajectories) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Steps, mean C and sample std of C across runs.

    Each trajectory is a sequence of (step, C) pairs; only steps present in
    every run are kept.  A single run has zero spread.
    """
    trajectories = [np.asarray(t, dtype=np.float64).reshape(-1, 2) for t in trajectories]
    if not trajectories:
        raise ValueError("need at least one trajectory")
    steps = trajectories[0][:, 0]
    for t in trajectories[1:]:
        steps = np.intersect1d(steps, t[:, 0])
    values = np.stack([t[np.isin(t[:, 0], steps), 1] for t in trajectories])
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1) if len(values) > 1 else np.zeros_like(mean)
    return steps, mean, std


def read_trajectory(path: str | os.PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return np.array([(float(r["step"]), float(r["C"])) for r in reader])


def plot_capacity(groups: dict[str, list], path: str | os.PathLike, title: str = "Capacity C during training") -> dict:
    """Mean line and +-1 std band per configuration label; returns the band data."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not groups:
        raise ValueError("need at least one trajectory")
    bands = {}
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, trajectories in sorted(groups.items()):
        steps, mean, std = capacity_bands(trajectories)
        bands[label] = (steps, mean, std)
        line, = ax.plot(steps, mean, label=f"{label} (n={len(trajectories)})")
        ax.fill_between(steps, mean - std, mean + std, color=line.get_color(), alpha=0.25, linewidth=0)
    ax.set_xlabel("training step")
    ax.set_ylabel("C [nats]")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return bands
