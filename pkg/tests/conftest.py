"""Shared fixtures: seeded clouds and a tiny on-disk dataset."""

import numpy as np
import pytest

from otgeo.geometry import PointCloud, uniform_weights


def make_cloud(rng, n, dim=3, with_normals=False, tag="t"):
    pts = rng.uniform(-1.0, 1.0, size=(n, dim))
    if dim == 2:
        pts = np.column_stack([pts, np.zeros(n)])
    normals = None
    if with_normals:
        normals = rng.standard_normal((n, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points=pts, normals=normals,
                      weights=uniform_weights(n), tag=tag)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8-instance star dataset shared by pipeline smoke tests."""
    from otgeo.pipeline import synth_dataset

    root = tmp_path_factory.mktemp("tiny")
    man = synth_dataset("star-2d", 8, 3, root / "data",
                        n_points=250, test_count=2)
    return root, man
