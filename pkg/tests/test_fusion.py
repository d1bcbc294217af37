import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsocc.attention import LayerParams
from gsocc.exceptions import InvalidInputError, InvalidParameterError
from gsocc.fusion import (
    GraphConfig,
    MgaConfig,
    adaptive_fuse,
    add_fuse_backward,
    add_fuse_forward,
    concat_fuse_forward,
    concat_projection_init,
    dgga_layer,
    mga,
)
from gsocc.scene import Layout, validate_set


def test_ln2_case_weights():
    _, w = adaptive_fuse([np.array([np.log(2.0)]), np.array([0.0])])
    np.testing.assert_allclose(w[:, 0], [2 / 3, 1 / 3], atol=1e-9)


def test_equal_branches_fuse_to_themselves(rng):
    g = rng.normal(size=(5, 4))
    fused, w = adaptive_fuse([g, g.copy()])
    np.testing.assert_array_equal(fused, g)
    np.testing.assert_array_equal(w, 0.5)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_simplex_and_envelope(branches):
    fused, w = adaptive_fuse(list(branches))
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-6)
    lo, hi = branches.min(axis=0), branches.max(axis=0)
    assert np.all(fused >= lo - 1e-12) and np.all(fused <= hi + 1e-12)


def test_adaptive_fuse_validation():
    with pytest.raises(InvalidInputError):
        adaptive_fuse([np.zeros(3)])
    with pytest.raises(InvalidInputError):
        adaptive_fuse([np.zeros(3), np.zeros(4)])
    with pytest.raises(InvalidInputError):
        adaptive_fuse([np.zeros(3), np.array([0, np.inf, 0])])


def test_add_fuse_is_residual_sum(rng):
    base, a, b = rng.normal(size=(3, 4, 6))
    (out,), _ = add_fuse_forward(base, a, b)
    np.testing.assert_allclose(out, a + b - base, atol=1e-14)


def test_add_fuse_log_columns(rng):
    base, a, b = rng.uniform(0.5, 2.0, size=(3, 4, 6))
    (out,), cache = add_fuse_forward(base, a, b, log_cols=slice(3, 6))
    np.testing.assert_allclose(out[:, 3:], a[:, 3:] * b[:, 3:] / base[:, 3:], rtol=1e-13)
    np.testing.assert_allclose(out[:, :3], a[:, :3] + b[:, :3] - base[:, :3], atol=1e-14)
    grads = add_fuse_backward(cache, np.ones_like(out))
    np.testing.assert_allclose(grads[1][:, 3:], b[:, 3:] / base[:, 3:], rtol=1e-13)


def test_concat_init_averages(rng):
    a, b = rng.normal(size=(2, 5, 4))
    (out,), _ = concat_fuse_forward(concat_projection_init(2, 4), a, b)
    np.testing.assert_allclose(out, (a + b) / 2, atol=1e-14)


def _params(rng, layout, d_k=4, dec=0.05):
    D = layout.width
    return LayerParams(rng.normal(0, 0.3, (D, d_k)), rng.normal(0, 0.3, (D, d_k)),
                       rng.normal(0, 0.3, (D, d_k)), rng.normal(0, dec, (d_k, D)),
                       rng.normal(0, dec, D))


def test_dgga_zero_heads_keep_geometry(make_set, rng):
    G = make_set(rng, 20, d=3, F=4)
    z = LayerParams.zeros(G.layout, 4)
    H = dgga_layer(G, 5, 5, z, z)
    np.testing.assert_array_equal(H.mean, G.mean)
    np.testing.assert_array_equal(H.scale, G.scale)
    np.testing.assert_array_equal(H.semantics, G.semantics)


def test_dgga_output_is_valid(make_set, rng):
    G = make_set(rng, 40, d=3, F=4)
    L = G.layout
    for mode in ("adaptive", "add"):
        H = dgga_layer(G, 8, 6, _params(rng, L, dec=0.5), _params(rng, L, dec=0.5), fuse_mode=mode)
        assert validate_set(H) == []


@pytest.mark.parametrize("graph", [GraphConfig(), GraphConfig(mode="adaptive", rho=2.0, K_min=2)])
def test_dgga_permutation_equivariant(make_set, rng, graph):
    G = make_set(rng, 40, d=3, F=4)
    pg, ps = _params(rng, G.layout), _params(rng, G.layout)
    perm = rng.permutation(G.N)
    H = dgga_layer(G, 7, 5, pg, ps, graph=graph)
    Hp = dgga_layer(G.subset(perm), 7, 5, pg, ps, graph=graph)
    np.testing.assert_allclose(Hp.data, H.data[perm], atol=1e-9)


def test_single_branch_variants(make_set, rng):
    G = make_set(rng, 12, d=2, F=3)
    p = _params(rng, G.layout)
    geo = dgga_layer(G, 4, 4, p, p, branches=("geo",))
    both = dgga_layer(G, 4, 4, p, p)
    assert geo.N == both.N == 12


def test_dgga_rejects_oversized_graph(make_set, rng):
    G = make_set(rng, 5, d=2, F=2)
    z = LayerParams.zeros(G.layout, 2)
    with pytest.raises(InvalidParameterError):
        dgga_layer(G, 6, 2, z, z)


def test_mga_single_scale_equals_dgga(make_set, rng):
    G = make_set(rng, 30, d=3, F=4)
    pg, ps = _params(rng, G.layout), _params(rng, G.layout)
    out = mga(G, MgaConfig([6], [5], [(pg, ps)]))
    np.testing.assert_array_equal(out.data, dgga_layer(G, 6, 5, pg, ps).data)


def test_mga_multi_scale(make_set, rng):
    G = make_set(rng, 30, d=3, F=4)
    params = [(_params(rng, G.layout), _params(rng, G.layout)) for _ in range(3)]
    out = mga(G, MgaConfig([10, 6, 3], [8, 4, 2], params))
    assert validate_set(out) == []
    with pytest.raises(InvalidParameterError):
        mga(G, MgaConfig([40, 6, 3], [8, 4, 2], params))


def test_mga_default_schedule():
    cfg = MgaConfig()
    assert cfg.topK_schedule == [100, 75, 50, 20]
    assert cfg.topM_schedule == [100, 75, 50, 20]
