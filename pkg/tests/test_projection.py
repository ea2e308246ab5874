"""PCA and exact t-SNE projection contracts."""

import numpy as np
import pytest

from reasonembed.errors import ShapeMismatch, TooFewPoints, TooManyPointsForExact
from reasonembed.projection import pca_2d, project_2d, tsne_2d


def planar_cloud(seed=0, n=40, ambient=6):
    """Points on a random 2-D affine plane inside a higher-dim space."""
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(ambient, 2)))
    flat = rng.normal(size=(n, 2)) * [3.0, 1.0]
    return flat @ basis.T + rng.normal(size=ambient)


def pairwise(x):
    d = x[:, None, :] - x[None, :, :]
    return np.sqrt((d * d).sum(axis=-1))


def test_pca_preserves_planar_distances():
    cloud = planar_cloud(seed=3)
    coords = pca_2d(cloud)
    assert coords.shape == (40, 2)
    assert np.max(np.abs(pairwise(coords) - pairwise(cloud))) <= 1e-9


def test_pca_deterministic_and_centered():
    cloud = planar_cloud(seed=5)
    a = pca_2d(cloud)
    b = pca_2d(cloud)
    assert np.array_equal(a, b)
    assert np.max(np.abs(a.mean(axis=0))) < 1e-9


def test_pca_input_validation():
    with pytest.raises(TooFewPoints):
        pca_2d(np.zeros((2, 4)))
    with pytest.raises(ShapeMismatch):
        pca_2d(np.zeros((5, 1)))
    with pytest.raises(ShapeMismatch):
        pca_2d(np.zeros(8))
    bad = np.zeros((5, 3))
    bad[0, 0] = np.nan
    with pytest.raises(ShapeMismatch):
        pca_2d(bad)


def clusters(seed=0, per=10, spread=0.3):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0] * 5, [40.0] + [0.0] * 4, [0.0, 40.0, 0.0, 0.0, 40.0]])
    pts = np.concatenate([
        c + rng.normal(scale=spread, size=(per, 5)) for c in centers])
    labels = np.repeat(np.arange(3), per)
    return pts, labels


def test_tsne_sane_and_deterministic():
    pts, labels = clusters(seed=1, per=10)
    coords, kl = tsne_2d(pts, perplexity=3.0, seed=7)
    assert coords.shape == (30, 2)
    assert np.isfinite(coords).all()
    assert np.isfinite(kl)
    again, kl2 = tsne_2d(pts, perplexity=3.0, seed=7)
    assert np.array_equal(coords, again)
    assert kl == kl2
    other, _ = tsne_2d(pts, perplexity=3.0, seed=8)
    assert not np.array_equal(coords, other)


def test_tsne_separates_well_separated_clusters():
    pts, labels = clusters(seed=2, per=10)
    coords, _ = tsne_2d(pts, perplexity=3.0, seed=0)
    d = pairwise(coords)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(30, dtype=bool)
    intra = d[same & off_diag].mean()
    inter = d[~same].mean()
    assert intra < inter


def test_tsne_point_count_limits():
    with pytest.raises(TooManyPointsForExact):
        tsne_2d(np.zeros((2001, 2)), perplexity=3.0)
    with pytest.raises(TooFewPoints):
        tsne_2d(np.zeros((8, 2)), perplexity=3.0)
    with pytest.raises(ShapeMismatch):
        tsne_2d(np.zeros((20, 2)), perplexity=0.0)


def test_project_2d_writes_deterministic_artifacts(tmp_path):
    pts, labels = clusters(seed=4, per=8)
    names = ["query" if v == 0 else "target" for v in labels]
    prefix = tmp_path / "proj"
    coords = project_2d(pts, names, method="pca", out_prefix=str(prefix))
    assert coords.shape == (24, 2)
    first_json = (tmp_path / "proj.json").read_bytes()
    first_svg = (tmp_path / "proj.svg").read_bytes()
    assert b"<svg" in first_svg
    assert b"query" in first_json

    project_2d(pts, names, method="pca", out_prefix=str(prefix))
    assert (tmp_path / "proj.json").read_bytes() == first_json
    assert (tmp_path / "proj.svg").read_bytes() == first_svg


def test_project_2d_validation():
    pts, _ = clusters(seed=4, per=4)
    with pytest.raises(ShapeMismatch):
        project_2d(pts, ["a"] * 5)
    with pytest.raises(ShapeMismatch):
        project_2d(pts, ["a"] * 12, method="umap")
    with pytest.raises(ShapeMismatch):
        project_2d(pts, ["a"] * 12, ids=["x"])
