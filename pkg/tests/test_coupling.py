"""Nearest-neighbor indices, feature assembly, encode/decode."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otgeo.errors import FormatError, InvalidInputError
from otgeo.coupling import (
    FEATURE_MODES,
    assemble_features,
    decode_solution,
    decoder_indices,
    encode_function,
    encoder_indices,
    exact_nn,
    read_indices,
    write_indices,
)
from otgeo.geometry import PointCloud, estimate_normals, uniform_weights
from otgeo.latent_mesh import generate_grid
from conftest import make_cloud


def brute_nn(query, data, k=1):
    """O(n^2) scan with (distance, index) ordering."""
    d2 = ((query[:, None, :] - data[None, :, :]) ** 2).sum(axis=2)
    if k == 1:
        return d2.argmin(axis=1)
    out = np.empty((len(query), k), dtype=np.int64)
    for i, row in enumerate(d2):
        order = sorted(range(len(row)), key=lambda j: (row[j], j))
        out[i] = order[:k]
    return out


# ---------------------------------------------------------------- exact_nn

def test_exact_nn_identity(rng):
    pts = rng.standard_normal((20, 3))
    assert np.array_equal(exact_nn(pts, pts), np.arange(20))


def test_exact_nn_matches_brute_force(rng):
    q = rng.standard_normal((200, 3))
    d = rng.standard_normal((300, 3))
    assert np.array_equal(exact_nn(q, d), brute_nn(q, d))


def test_exact_nn_k3_matches_brute_force(rng):
    q = rng.standard_normal((50, 3))
    d = rng.standard_normal((80, 3))
    assert np.array_equal(exact_nn(q, d, k=3), brute_nn(q, d, k=3))


def test_exact_nn_duplicate_points_lowest_index():
    d = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0]])
    q = np.array([[0.9, 0, 0]])
    assert exact_nn(q, d).tolist() == [1]
    assert exact_nn(q, d, k=3).tolist() == [[1, 2, 3]]


def test_exact_nn_equidistant_tie_lowest_index():
    d = np.array([[-1.0, 0, 0], [1.0, 0, 0]])
    q = np.array([[0.0, 0, 0]])
    assert exact_nn(q, d).tolist() == [0]


def test_exact_nn_k_too_large(rng):
    with pytest.raises(InvalidInputError):
        exact_nn(rng.standard_normal((3, 3)), rng.standard_normal((2, 3)), k=5)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=30),
       st.integers(min_value=1, max_value=30),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_exact_nn_property_matches_scan(nq, nd, seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((nq, 3))
    d = rng.standard_normal((nd, 3))
    assert np.array_equal(exact_nn(q, d), brute_nn(q, d))


# ------------------------------------------------------- encoder / decoder

def test_encoder_identity_when_transported_equals_cloud(rng):
    cloud = make_cloud(rng, 25)
    E = encoder_indices(cloud.points, cloud)
    assert np.array_equal(E, np.arange(25))


def test_decoder_identity_when_transported_equals_cloud(rng):
    cloud = make_cloud(rng, 25)
    D = decoder_indices(cloud.points, cloud)
    assert np.array_equal(D, np.arange(25))


def test_decoder_single_transported_point_all_zero(rng):
    cloud = make_cloud(rng, 12)
    D = decoder_indices(cloud.points[:1], cloud)
    assert np.array_equal(D, np.zeros(12, dtype=np.int64))


def test_encoder_decoder_match_brute_force(rng):
    transported = rng.standard_normal((40, 3))
    cloud = make_cloud(rng, 60)
    assert np.array_equal(encoder_indices(transported, cloud),
                          brute_nn(transported, cloud.points))
    assert np.array_equal(decoder_indices(transported, cloud),
                          brute_nn(cloud.points, transported))


def test_encoder_k2_shape(rng):
    transported = rng.standard_normal((16, 3))
    cloud = make_cloud(rng, 30)
    E = encoder_indices(transported, cloud, k=2)
    assert E.shape == (16, 2)
    assert np.array_equal(E, brute_nn(transported, cloud.points, k=2))


# ---------------------------------------------------------------- features

def test_cross_product_basis():
    assert np.allclose(np.cross([1, 0, 0], [0, 1, 0]), [0, 0, 1])


def test_feature_mode_channel_widths(rng):
    grid = generate_grid("torus", 4)
    cloud = estimate_normals(make_cloud(rng, 20), k=6)
    E = encoder_indices(grid.points, cloud)
    for mode, width in FEATURE_MODES.items():
        feats = assemble_features(grid, cloud, E, mode=mode)
        assert feats.tensor.shape == (4, 4, width), mode
    assert FEATURE_MODES == {"none": 6, "car": 9, "concat": 12, "cross": 9}


def test_feature_layout_hand_check(rng):
    grid = generate_grid("torus", 3)
    cloud = estimate_normals(make_cloud(rng, 15), k=5)
    E = encoder_indices(grid.points, cloud)
    feats = assemble_features(grid, cloud, E, mode="cross").tensor
    flat = feats.reshape(9, 9)
    assert np.array_equal(flat[:, 0:3], grid.points)
    assert np.array_equal(flat[:, 3:6], cloud.points[E])
    want = np.cross(grid.normals, cloud.normals[E])
    assert np.allclose(flat[:, 6:9], want, atol=1e-15)


def test_features_none_mode_works_without_normals(rng):
    grid = generate_grid("torus", 3)
    cloud = make_cloud(rng, 10)  # no normals
    E = encoder_indices(grid.points, cloud)
    feats = assemble_features(grid, cloud, E, mode="none")
    assert feats.tensor.shape == (3, 3, 6)
    with pytest.raises(InvalidInputError):
        assemble_features(grid, cloud, E, mode="cross")


# ----------------------------------------------------------- en-/decoding

def test_decode_constant_field_is_constant(rng):
    v = np.full((4, 4, 1), 2.5)
    D = rng.integers(0, 16, size=11)
    out = decode_solution(v, D)
    assert np.all(out == 2.5)


def test_decode_identity_indices_flatten(rng):
    v = rng.standard_normal((3, 3, 2))
    out = decode_solution(v, np.arange(9))
    assert np.array_equal(out, v.reshape(9, 2))


def test_decode_multi_mean_hand_case():
    v = np.arange(4.0).reshape(2, 2, 1)  # flat latent values [0, 1, 2, 3]
    D = np.array([[0, 1, 2], [1, 2, 3]])
    out = decode_solution(v, D, mode="multi-mean")
    assert np.allclose(out[:, 0], [1.0, 2.0])


def test_decode_index_out_of_range():
    with pytest.raises(InvalidInputError):
        decode_solution(np.zeros((2, 2, 1)), np.array([4]))


def test_encode_constant_stays_constant(rng):
    a = np.full(30, 7.0)
    E = rng.integers(0, 30, size=16)
    lat = encode_function(a, E)
    assert np.all(lat == 7.0)


def test_encode_identity_reshapes(rng):
    a = rng.standard_normal(9)
    lat = encode_function(a, np.arange(9))
    assert np.array_equal(lat.reshape(-1), a)


def test_encode_multi_mean_differs_from_single(rng):
    a = rng.standard_normal(40)
    E1 = brute_nn(rng.standard_normal((16, 3)), rng.standard_normal((40, 3)))
    E8 = np.stack([np.roll(E1, s) for s in range(8)], axis=1)
    single = encode_function(a, E1)
    multi = encode_function(a, E8, mode="multi-mean")
    assert not np.allclose(single, multi)
    # but they agree again when the field is constant
    c = np.full(40, 3.0)
    assert np.allclose(encode_function(c, E1),
                       encode_function(c, E8, mode="multi-mean"))


def test_round_trip_identity_when_grid_equals_cloud(rng):
    cloud = make_cloud(rng, 16)
    E = encoder_indices(cloud.points, cloud)
    D = decoder_indices(cloud.points, cloud)
    a = rng.standard_normal(16)
    lat = encode_function(a, E)
    back = decode_solution(lat.reshape(4, 4, 1), D)[:, 0]
    assert np.array_equal(back, a)


def test_encode_requires_square_count(rng):
    with pytest.raises(InvalidInputError):
        encode_function(rng.standard_normal(10), np.arange(5))


# --------------------------------------------------------------- index io

def test_indices_round_trip(tmp_path, rng):
    idx = rng.integers(0, 1000, size=49).astype(np.int64)
    p = tmp_path / "e.idx"
    write_indices(p, idx)
    assert np.array_equal(read_indices(p), idx)


def test_indices_2d_stored_flat(tmp_path, rng):
    idx = rng.integers(0, 1000, size=(16, 3)).astype(np.int64)
    p = tmp_path / "e.idx"
    write_indices(p, idx)
    back = read_indices(p)
    assert np.array_equal(back.reshape(16, 3), idx)


def test_indices_reject_garbage(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"not an index file")
    with pytest.raises(FormatError):
        read_indices(p)
