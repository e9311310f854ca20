"""Reference disentanglement metrics (MIG, DCI, FactorVAE score) and rank correlations."""
from __future__ import annotations

import csv
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from ._validation import as_rng, check_factors, check_latents

logger = logging.getLogger(__name__)

DEFAULT_BINS = 20


@dataclass
class RepresentationSample:
    latents: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        self.latents = check_latents(self.latents, name="latents")
        self.factors = check_factors(self.factors)
        if len(self.latents) < 2 or len(self.latents) != len(self.factors):
            raise ValueError("need n >= 2 paired latents and factors")


def discretize(latents: np.ndarray, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Equal-width binning of each column over its observed range."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    latents = np.asarray(latents, dtype=np.float64)
    out = np.zeros(latents.shape, dtype=np.int64)
    for j in range(latents.shape[1]):
        col = latents[:, j]
        lo, hi = col.min(), col.max()
        if hi > lo:
            out[:, j] = np.clip(np.floor((col - lo) / (hi - lo) * bins), 0, bins - 1)
    return out


def _codes(a: np.ndarray) -> np.ndarray:
    return np.unique(a, return_inverse=True)[1].ravel()


def discrete_entropy(a: np.ndarray) -> float:
    counts = np.bincount(_codes(a))
    p = counts[counts > 0] / len(a)
    return float(-(p * np.log(p)).sum())


def discrete_mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) of two discrete sequences."""
    ca, cb = _codes(a), _codes(b)
    joint = np.zeros((ca.max() + 1, cb.max() + 1))
    np.add.at(joint, (ca, cb), 1.0)
    joint /= len(ca)
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(max((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum(), 0.0))


def mutual_info_matrix(sample: RepresentationSample, bins: int = DEFAULT_BINS) -> np.ndarray:
    """(d x K) mutual information between binned latents and factors."""
    disc = discretize(sample.latents, bins)
    d, K = disc.shape[1], sample.factors.shape[1]
    return np.array([[discrete_mutual_info(disc[:, j], sample.factors[:, k]) for k in range(K)] for j in range(d)])


def mig(sample: RepresentationSample, bins: int = DEFAULT_BINS) -> float:
    """Mean over factors of the normalized gap between the two most informative latents."""
    m = mutual_info_matrix(sample, bins)
    entropy = np.array([discrete_entropy(sample.factors[:, k]) for k in range(m.shape[1])])
    keep = entropy > 0
    if not keep.all():
        warnings.warn(f"skipping {int((~keep).sum())} factor(s) with a single observed value")
    if not keep.any():
        raise ValueError("every factor is constant in the sample")
    top = np.sort(m[:, keep], axis=0)[::-1]
    second = top[1] if len(top) > 1 else np.zeros(top.shape[1])
    return float(np.clip(np.mean((top[0] - second) / entropy[keep]), 0.0, 1.0))


def importance_matrix(sample: RepresentationSample, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Mutual information normalized by each factor's entropy; constant factors get zero columns."""
    m = mutual_info_matrix(sample, bins)
    entropy = np.array([discrete_entropy(sample.factors[:, k]) for k in range(m.shape[1])])
    safe = np.where(entropy > 0, entropy, 1.0)
    return np.where(entropy > 0, m / safe, 0.0)


def dci_from_importance(R: np.ndarray, min_row_sum: float = 1e-6) -> float:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or np.any(R < 0):
        raise ValueError("importance matrix must be a non-negative (d x K) array")
    if not np.any(R > 0):
        raise ValueError("importance matrix is all zero")
    K = R.shape[1]
    rows = R.sum(axis=1)
    R, rows = R[rows >= min_row_sum], rows[rows >= min_row_sum]
    if K == 1:
        return 1.0
    p = R / rows[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1) / np.log(K)
    disentanglement = 1.0 - h
    rho = rows / rows.sum()
    return float(np.clip((rho * disentanglement).sum(), 0.0, 1.0))


def dci_disentanglement(sample: RepresentationSample, bins: int = DEFAULT_BINS) -> float:
    return dci_from_importance(importance_matrix(sample, bins))


def _means(model, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    return np.concatenate([np.asarray(model.encode(images[i:i + chunk])[0], np.float64)
                           for i in range(0, len(images), chunk)])


def representation_sample(model, dataset, n: int, rng) -> RepresentationSample:
    """Posterior means and factor indices of n random data samples."""
    batch = dataset.sample_random(n, as_rng(rng))
    return RepresentationSample(_means(model, batch.images), batch.factors)


def fvae_metric(model, dataset, n_votes: int = 800, batch_size: int = 64, train_fraction: float = 0.8,
                n_global: int = 10_000, rng=0, min_variance: float = 1e-6) -> float:
    """Majority-vote accuracy of predicting the fixed factor from the least-varying latent."""
    rng = as_rng(rng)
    global_latents = _means(model, dataset.sample_random(n_global, rng).images)
    global_var = global_latents.var(axis=0)
    active = global_var >= min_variance
    if not active.any():
        raise ValueError("every latent dimension is collapsed")
    scale = np.sqrt(global_var[active])

    K = dataset.num_factors
    votes = np.zeros((n_votes, 2), dtype=np.int64)
    for i in range(n_votes):
        k = int(rng.integers(K))
        batch = dataset.sample_fixed_factor(k, batch_size, rng)
        z = _means(model, batch.images)[:, active] / scale
        votes[i] = (int(np.argmin(z.var(axis=0))), k)

    n_train = int(round(train_fraction * n_votes))
    n_train = min(max(n_train, 1), n_votes)
    train, test = votes[:n_train], votes[n_train:]
    if len(test) == 0:
        test = train
    table = np.zeros((int(active.sum()), K), dtype=np.int64)
    np.add.at(table, (train[:, 0], train[:, 1]), 1)
    predict = np.argmax(table, axis=1)
    return float(np.mean(predict[test[:, 0]] == test[:, 1]))


# --------------------------------------------------------------------------
# rank correlation

def spearman(xs, ys) -> float:
    """Pearson correlation of average-tie fractional ranks."""
    xs, ys = np.asarray(xs, np.float64), np.asarray(ys, np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ValueError("spearman needs two 1-d vectors of equal length >= 2")
    rx, ry = rankdata(xs) - (len(xs) + 1) / 2, rankdata(ys) - (len(ys) + 1) / 2
    sxx, syy = (rx * rx).sum(), (ry * ry).sum()
    if sxx == 0 or syy == 0:
        raise ValueError("zero rank variance")
    # one square root of the product keeps identical and reversed rankings at exactly +-1
    return float(np.clip((rx * ry).sum() / np.sqrt(sxx * syy), -1.0, 1.0))


def correlation_matrix(table: dict[str, np.ndarray], metrics: list[str] | None = None) -> tuple[list[str], np.ndarray]:
    """Pairwise Spearman correlations between equal-length metric columns."""
    metrics = metrics or sorted(table)
    m = len(metrics)
    rho = np.full((m, m), np.nan)
    for a in range(m):
        for b in range(m):
            try:
                rho[a, b] = spearman(table[metrics[a]], table[metrics[b]])
            except ValueError:
                warnings.warn(f"no rank correlation for {metrics[a]} vs {metrics[b]}: zero rank variance")
    return metrics, rho


def correlation_report(rows, out_dir: str | os.PathLike | None = None, metrics: list[str] | None = None,
                       heatmap: bool = True) -> dict[str, tuple[list[str], np.ndarray]]:
    """Per-dataset Spearman matrices over models.

    ``rows`` are metric records with ``dataset``, ``architecture``,
    ``digest``, ``seed``, ``metric`` and ``value``.  A model missing any of
    the compared metrics is dropped with a warning.  With ``out_dir`` each
    dataset gets ``correlations_<dataset>.csv`` and a heatmap scaled by 100.
    """
    by_dataset: dict[str, dict[tuple, dict[str, float]]] = {}
    for r in rows:
        if r.value is None or not np.isfinite(r.value):
            continue
        model_key = (r.architecture, r.digest, r.seed)
        by_dataset.setdefault(r.dataset, {}).setdefault(model_key, {})[r.metric] = float(r.value)

    results = {}
    for dataset, models in sorted(by_dataset.items()):
        names = metrics or sorted({m for vals in models.values() for m in vals})
        complete = {k: v for k, v in models.items() if all(n in v for n in names)}
        dropped = len(models) - len(complete)
        if dropped:
            warnings.warn(f"{dataset}: dropped {dropped} model(s) with missing metric values")
        if len(complete) < 2:
            warnings.warn(f"{dataset}: fewer than two complete models, skipping")
            continue
        keys = sorted(complete)
        table = {n: np.array([complete[k][n] for k in keys]) for n in names}
        results[dataset] = correlation_matrix(table, names)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for dataset, (names, rho) in results.items():
            write_correlation_csv(out_dir / f"correlations_{dataset}.csv", names, rho)
            if heatmap:
                plot_correlation_heatmap(out_dir / f"correlations_{dataset}.png", names, rho, title=dataset)
    return results


def write_correlation_csv(path, names, rho):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", *names])
        for name, row in zip(names, rho):
            w.writerow([name, *(repr(float(v)) for v in row)])


def plot_correlation_heatmap(path, names, rho, title: str = ""):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scaled = np.round(100 * rho)
    fig, ax = plt.subplots(figsize=(1 + 0.7 * len(names), 0.8 + 0.6 * len(names)))
    im = ax.imshow(scaled, vmin=-100, vmax=100, cmap="RdBu_r")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    for i in range(len(names)):
        for j in range(len(names)):
            if np.isfinite(scaled[i, j]):
                ax.text(j, i, f"{int(scaled[i, j])}", ha="center", va="center", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
