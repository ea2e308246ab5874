"""2-D diagnostics for embedding sets.

Two projectors: exact PCA (top-2 principal axes, deterministic sign) and an
exact O(N^2) t-SNE for small point sets. Both are pure numpy and fully
seeded so coordinate files and plots are byte-reproducible.
"""

import numpy as np

from .checkpoint import canonical_json
from .errors import (
    ShapeMismatch,
    TooFewPoints,
    TooManyPointsForExact,
    WriteFailure,
)

MAX_EXACT_POINTS = 2000
DEFAULT_PERPLEXITY = 30.0
TSNE_ITERS = 1000
EXAGGERATION = 4.0
EXAGGERATION_ITERS = 100
TSNE_LR = 200.0
MOMENTUM_SWITCH = 250
_INIT_SCALE = 1e-4
_TSNE_TAG = 0x75E

# fixed label -> color assignment order for plots
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _as_matrix(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D point matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ShapeMismatch("point matrix contains non-finite values")
    return x


def pca_2d(vectors) -> np.ndarray:
    """Project onto the top-2 principal axes of the centered point cloud.

    Sign convention: each axis is flipped so its largest-magnitude
    coefficient is positive, making the output independent of SVD
    implementation details.
    """
    x = _as_matrix(vectors)
    n, d = x.shape
    if n < 3:
        raise TooFewPoints(f"pca needs at least 3 points, got {n}")
    if d < 2:
        raise ShapeMismatch(f"pca needs at least 2 input dimensions, got {d}")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2].copy()
    for row in axes:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0.0:
            row *= -1.0
    return centered @ axes.T


def _pairwise_sq_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.maximum(d2, 0.0)


def _calibrated_row(dist_row: np.ndarray, perplexity: float) -> np.ndarray:
    """Conditional Gaussian probabilities whose entropy matches
    log(perplexity), found by bisection over the precision beta."""
    target = np.log(perplexity)
    beta, lo, hi = 1.0, 0.0, np.inf
    probs = np.full_like(dist_row, 1.0 / len(dist_row))
    for _ in range(64):
        logits = -dist_row * beta
        logits -= logits.max()
        p = np.exp(logits)
        p /= p.sum()
        entropy = -float(np.sum(p * np.log(np.maximum(p, 1e-300))))
        probs = p
        if abs(entropy - target) < 1e-7:
            break
        if entropy > target:
            lo = beta
            beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
        else:
            hi = beta
            beta = 0.5 * (lo + beta)
    return probs


def _joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    n = x.shape[0]
    d2 = _pairwise_sq_distances(x)
    cond = np.zeros((n, n))
    others = np.arange(n)
    for i in range(n):
        mask = others != i
        cond[i, mask] = _calibrated_row(d2[i, mask], perplexity)
    joint = (cond + cond.T) / (2.0 * n)
    return np.maximum(joint, 1e-12)


def tsne_2d(vectors, perplexity: float = DEFAULT_PERPLEXITY, seed: int = 0,
            n_iter: int = TSNE_ITERS):
    """Exact t-SNE to 2 dimensions. Returns (coords, final KL divergence).

    Fixed schedule: early exaggeration x4 for the first 100 iterations,
    learning rate 200, momentum 0.5 switching to 0.8 at iteration 250.
    """
    x = _as_matrix(vectors)
    n = x.shape[0]
    if n > MAX_EXACT_POINTS:
        raise TooManyPointsForExact(
            f"exact t-sne is limited to {MAX_EXACT_POINTS} points, got {n}")
    if perplexity <= 0:
        raise ShapeMismatch(f"perplexity must be positive, got {perplexity}")
    if n < 3 * perplexity:
        raise TooFewPoints(
            f"t-sne with perplexity {perplexity} needs at least "
            f"{int(np.ceil(3 * perplexity))} points, got {n}")

    p = _joint_probabilities(x, perplexity)
    rng = np.random.default_rng([seed, _TSNE_TAG])
    y = rng.normal(scale=_INIT_SCALE, size=(n, 2))
    velocity = np.zeros_like(y)
    q = None
    for it in range(n_iter):
        p_eff = p * EXAGGERATION if it < EXAGGERATION_ITERS else p
        num = 1.0 / (1.0 + _pairwise_sq_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        w = (p_eff - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        momentum = 0.5 if it < MOMENTUM_SWITCH else 0.8
        velocity = momentum * velocity - TSNE_LR * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    kl = float(np.sum(p * np.log(p / q)))
    return y, kl


def project_2d(vectors, labels, method: str = "pca",
               perplexity: float = DEFAULT_PERPLEXITY, seed: int = 0,
               ids=None, out_prefix=None) -> np.ndarray:
    """Project a labeled point set to 2-D and optionally emit artifacts.

    With out_prefix set, writes <prefix>.json (coordinates plus metadata)
    and <prefix>.svg (scatter colored by label).
    """
    x = _as_matrix(vectors)
    labels = [str(v) for v in labels]
    if len(labels) != x.shape[0]:
        raise ShapeMismatch(
            f"{x.shape[0]} points but {len(labels)} labels")
    if ids is None:
        ids = [str(i) for i in range(x.shape[0])]
    ids = [str(v) for v in ids]
    if len(ids) != x.shape[0]:
        raise ShapeMismatch(f"{x.shape[0]} points but {len(ids)} ids")

    if method == "pca":
        coords = pca_2d(x)
        kl = None
    elif method == "tsne":
        coords, kl = tsne_2d(x, perplexity=perplexity, seed=seed)
    else:
        raise ShapeMismatch(f"unknown projection method {method!r}")

    if out_prefix is not None:
        record = {
            "method": method,
            "seed": seed,
            "perplexity": perplexity if method == "tsne" else None,
            "kl": kl,
            "points": [
                {"id": i, "label": lab, "x": float(cx), "y": float(cy)}
                for i, lab, (cx, cy) in zip(ids, labels, coords)
            ],
        }
        try:
            with open(f"{out_prefix}.json", "w") as fh:
                fh.write(canonical_json(record) + "\n")
            write_scatter_svg(f"{out_prefix}.svg", coords, labels)
        except OSError as exc:
            raise WriteFailure(f"cannot write projection artifacts: {exc}") from exc
    return coords


def write_scatter_svg(path, coords, labels) -> None:
    """Static SVG scatter, one color per label, deterministic bytes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    coords = np.asarray(coords, dtype=np.float64)
    distinct = sorted(set(labels))
    with plt.rc_context({"svg.hashsalt": "reasonembed"}):
        fig, ax = plt.subplots(figsize=(6.0, 6.0))
        try:
            for idx, lab in enumerate(distinct):
                keep = np.array([l == lab for l in labels])
                ax.scatter(coords[keep, 0], coords[keep, 1], s=14.0,
                           color=_PALETTE[idx % len(_PALETTE)], label=lab,
                           alpha=0.85, linewidths=0.0)
            ax.legend(loc="best")
            ax.set_xlabel("dim 1")
            ax.set_ylabel("dim 2")
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise WriteFailure(f"cannot write plot {path}: {exc}") from exc
        finally:
            plt.close(fig)
