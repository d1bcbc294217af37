from dataclasses import replace

import numpy as np
import pytest

from gsocc.attention import tokenize
from gsocc.exceptions import InvalidParameterError
from gsocc.pipeline import (
    BLOCKS,
    PipelineConfig,
    init_params,
    loss_and_grads,
    mlp_width,
    refine,
    run_pipeline,
)
from gsocc.scene import GridSpec, Layout, SemanticTaxonomy
from gsocc.splat import splat
from gsocc.synth import SceneSpec, gen_scene

GRID = GridSpec((-3.0, -3.0, 0.0), 0.5, (12, 12, 4))


@pytest.fixture(scope="module")
def scene():
    spec = SceneSpec(seed=11, extent_xy=3.0, extent_z=2.0, dims=(12, 12, 4),
                     counts={"pedestrian": 2, "cyclist": 1}, n_gaussians=24, F=4)
    return gen_scene(spec)


def small(**kw):
    base = dict(n_layers=2, K=6, M=6, k_schedule=[6, 4], m_schedule=[6, 4], d_k=4, grid=GRID)
    base.update(kw)
    return PipelineConfig(**base)


def test_zero_layers_is_plain_splat(scene):
    init, gt = scene
    cfg = small(n_layers=0)
    G, pred = run_pipeline(init, cfg, init_params(cfg, init.layout))
    np.testing.assert_array_equal(G.data, init.data)
    np.testing.assert_array_equal(pred.classes, splat(init, GRID).classes)


def test_baseline_has_no_parameters(scene):
    cfg = small(block="none")
    assert init_params(cfg, scene[0].layout) == {}
    G = refine(scene[0], cfg, {})
    np.testing.assert_array_equal(G.data, scene[0].data)


@pytest.mark.parametrize("block", ["gga", "sga", "dgga", "mga"])
@pytest.mark.parametrize("fuse", ["adaptive", "add"])
def test_zero_decode_heads_keep_gaussians(scene, block, fuse):
    # Fresh decode heads are zero, so every attribute except the (re-derived)
    # feature block is unchanged; rotations are renormalized.
    init, _ = scene
    cfg = small(block=block, fuse=fuse)
    G = refine(init, cfg, init_params(cfg, init.layout))
    L = init.layout
    keep = np.r_[0:7, 10:L.feature.start]
    np.testing.assert_allclose(G.data[:, keep], init.data[:, keep], rtol=0, atol=1e-12)


def test_mlp_identity_carries_features(scene):
    init, _ = scene
    cfg = small(block="mlp")
    G = refine(init, cfg, init_params(cfg, init.layout))
    np.testing.assert_allclose(G.data, init.data, atol=1e-12)


def test_mlp_budget_matches_dgga():
    layout = Layout(6, 32)
    cfg = PipelineConfig()
    mlp = init_params(replace(cfg, block="mlp"), layout)
    dgga = init_params(cfg, layout)
    n_mlp = sum(v.size for v in mlp.values())
    n_dgga = sum(v.size for v in dgga.values())
    assert abs(n_mlp - n_dgga) / n_dgga < 0.01
    D = layout.width
    h = mlp_width(layout, cfg.d_k)
    assert abs((2 * D * h + h + D) - 2 * (4 * D * cfg.d_k + D)) <= 2 * D + 1


@pytest.mark.parametrize("block", BLOCKS)
def test_every_block_refines_and_differentiates(scene, block):
    init, gt = scene
    cfg = small(block=block)
    params = init_params(cfg, init.layout)
    loss, grads = loss_and_grads(init, gt, cfg, params, SemanticTaxonomy.default())
    assert np.isfinite(loss) and loss > 0
    assert set(params) <= set(grads)
    for name, g in grads.items():
        assert np.all(np.isfinite(g)), name
    assert grads["tokens"].shape == tokenize(init).shape


def test_concat_adds_projection_parameters(scene):
    layout = scene[0].layout
    n = {f: sum(v.size for v in init_params(small(block="mga", fuse=f), layout).values())
         for f in ("adaptive", "add", "concat")}
    assert n["adaptive"] == n["add"] < n["concat"]


def test_pipeline_is_deterministic(scene):
    init, _ = scene
    cfg = small(block="mga", dsdga="full")
    params = init_params(cfg, init.layout, 5)
    params = {k: v + 0.01 for k, v in params.items()}
    a = run_pipeline(init, cfg, params)
    b = run_pipeline(init, cfg, params)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].classes, b[1].classes)


def test_init_params_seeded(scene):
    cfg = small()
    a = init_params(cfg, scene[0].layout, 3)
    b = init_params(cfg, scene[0].layout, 3)
    c = init_params(cfg, scene[0].layout, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_graph_wider_than_scene_rejected(scene):
    cfg = small(K=100)
    with pytest.raises(InvalidParameterError):
        refine(scene[0], cfg, init_params(cfg, scene[0].layout))


@pytest.mark.parametrize("kw", [dict(block="transformer"), dict(fuse="max"), dict(dsdga="half"),
                                dict(n_layers=-1), dict(k_schedule=[4], m_schedule=[4, 2])])
def test_bad_config_rejected(kw):
    with pytest.raises(InvalidParameterError):
        small(**kw)


def test_config_round_trip():
    cfg = small(block="mga", fuse="concat", dsdga="dca")
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("mode,present,absent", [("dca", "dsdga.dca", "dsdga.sca"),
                                                 ("sca", "dsdga.sca", "dsdga.dca")])
def test_single_branch_dsdga_has_only_its_params(scene, mode, present, absent):
    init, gt = scene
    cfg = small(block="none", dsdga=mode)
    params = init_params(cfg, init.layout)
    assert any(k.startswith(present) for k in params)
    assert not any(k.startswith(absent) for k in params)
    loss, grads = loss_and_grads(init, gt, cfg, params, SemanticTaxonomy.default())
    assert np.isfinite(loss) and set(params) <= set(grads)


def test_dsdga_missing_params_rejected(scene):
    init, _ = scene
    params = init_params(small(block="none", dsdga="dca"), init.layout)
    with pytest.raises(InvalidParameterError):
        refine(init, small(block="none", dsdga="full"), params, SemanticTaxonomy.default())
