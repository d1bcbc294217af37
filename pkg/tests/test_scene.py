import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsocc.exceptions import InvalidGaussianError, InvalidInputError, InvalidParameterError
from gsocc.scene import (
    Gaussian,
    GaussianSet,
    GridSpec,
    Layout,
    SemanticTaxonomy,
    VoxelGrid,
    covariance,
    covariances,
    quat_to_rotmat,
    validate_set,
)


def _g(scale=(1, 1, 1), rotation=(1, 0, 0, 0), d=2, F=0):
    return Gaussian(mean=(0, 0, 0), scale=scale, rotation=rotation, opacity=0.5,
                    semantics=np.zeros(d), feature=np.zeros(F))


def test_layout_offsets():
    L = Layout(6, 32)
    assert L.offsets() == {"mean": 0, "scale": 3, "rotation": 6, "opacity": 10,
                           "semantics": 11, "feature": 17, "width": 49}
    assert L.s == 11


def test_covariance_identity():
    np.testing.assert_array_equal(covariance(_g()), np.eye(3))


def test_covariance_axis_aligned():
    np.testing.assert_allclose(covariance(_g(scale=(2, 1, 1))), np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_rotated_matches_explicit_product():
    # 90 degrees about z: q = (cos 45, 0, 0, sin 45)
    c = np.sqrt(0.5)
    R = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
    D = [4.0, 1.0, 1.0]
    # explicit R D R^T, written out entry by entry
    oracle = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            oracle[i, j] = sum(R[i][k] * D[k] * R[j][k] for k in range(3))
    np.testing.assert_allclose(oracle, np.diag([1.0, 4.0, 1.0]))
    np.testing.assert_allclose(covariance(_g(scale=(2, 1, 1), rotation=(c, 0, 0, c))), oracle, atol=1e-12)


def test_covariance_rejects_non_unit_quaternion():
    with pytest.raises(InvalidGaussianError):
        covariance(_g(rotation=(2, 0, 0, 0)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1),
       st.lists(st.floats(0.05, 5), min_size=3, max_size=3))
def test_covariance_round_trip(q, scale):
    q = np.asarray(q) / np.linalg.norm(q)
    cov = covariance(_g(scale=scale, rotation=q))
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R.T @ cov @ R, np.diag(np.square(scale)), atol=1e-9)
    np.testing.assert_allclose(cov, cov.T, atol=1e-9)
    assert np.linalg.eigvalsh(cov).min() >= min(scale) ** 2 - 1e-9


def test_quat_to_rotmat_is_orthonormal(rng):
    q = rng.normal(size=(50, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ np.swapaxes(R, 1, 2), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_batched_covariances_match_single(make_set, rng):
    G = make_set(rng, 10)
    batch = covariances(G)
    for i in range(G.N):
        np.testing.assert_allclose(batch[i], covariance(G[i]), atol=1e-12)


def test_validate_set_clean(make_set, rng):
    assert validate_set(make_set(rng, 10)) == []


def test_validate_set_reports_scale_and_rotation(make_set, rng):
    data = make_set(rng, 10).data.copy()
    data[3, 3] = 0.0
    data[7, 6:10] = (2.0, 0, 0, 0)
    G = GaussianSet(data, 6, 8)
    assert validate_set(G) == [(3, "scale>0"), (7, "unit rotation")]


def test_gaussian_set_is_read_only(make_set, rng):
    G = make_set(rng, 4)
    with pytest.raises(ValueError):
        G.data[0, 0] = 1.0


def test_gaussian_set_shape_check():
    with pytest.raises(InvalidInputError):
        GaussianSet(np.zeros((3, 10)), 6, 8)


def test_from_gaussians_round_trip(make_set, rng):
    G = make_set(rng, 5)
    H = GaussianSet.from_gaussians([G[i] for i in range(G.N)])
    assert H == G


def test_taxonomy_default_and_boundary(taxonomy):
    assert taxonomy.d == 6
    assert taxonomy.static_boundary == 3
    assert taxonomy.dynamic_classes == [0, 1, 2]
    assert taxonomy.static_classes == [3, 4]
    assert SemanticTaxonomy.from_dict(taxonomy.to_dict()) == taxonomy


def test_taxonomy_requires_dynamic_first():
    with pytest.raises(InvalidParameterError):
        SemanticTaxonomy(("road", "car", "empty"), 2, (False, True, False))
    with pytest.raises(InvalidParameterError):
        SemanticTaxonomy(("empty",), 0, (False,))


def test_voxel_grid_checks():
    spec = GridSpec((0, 0, 0), 0.5, (2, 2, 2))
    grid = VoxelGrid(spec, np.full((2, 2, 2), 3))
    grid.check_classes(6)
    with pytest.raises(InvalidInputError):
        grid.check_classes(3)
    with pytest.raises(InvalidParameterError):
        GridSpec((0, 0, 0), 0.5, (0, 2, 2))


def test_grid_centers():
    spec = GridSpec((-1.0, 0.0, 0.0), 0.5, (2, 1, 1))
    np.testing.assert_array_equal(spec.centers(), [[-0.75, 0.25, 0.25], [-0.25, 0.25, 0.25]])
