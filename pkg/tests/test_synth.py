import numpy as np
import pytest

from gsocc.exceptions import DegenerateSceneError, InvalidParameterError
from gsocc.scene import SemanticTaxonomy, validate_set
from gsocc.synth import SceneSpec, class_embeddings, gen_scene, scene_labels


def test_same_spec_same_scene():
    a = gen_scene(SceneSpec(seed=3))
    b = gen_scene(SceneSpec(seed=3))
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].classes, b[1].classes)
    c = gen_scene(SceneSpec(seed=4))
    assert not np.array_equal(a[1].classes, c[1].classes)


def test_ground_only_scene(taxonomy):
    init, gt = gen_scene(SceneSpec(counts={}, n_gaussians=40))
    road = taxonomy.class_names.index("road")
    assert np.all(gt.classes[:, :, 0] == road)
    assert np.all(gt.classes[:, :, 1:] == taxonomy.empty_class)
    assert set(np.unique(gt.classes).tolist()) == {road, taxonomy.empty_class}
    labels = scene_labels(init, gt)
    inside = labels >= 0
    assert np.mean(labels[inside] == road) > 0.5
    assert init.N == 40


def test_nothing_to_place_is_degenerate():
    with pytest.raises(DegenerateSceneError):
        gen_scene(SceneSpec(counts={}, ground=False))


@pytest.mark.parametrize("kw", [dict(voxel_size=0), dict(counts={"car": -1}),
                                dict(counts={"tram": 2}), dict(n_gaussians=0)])
def test_bad_spec(kw):
    with pytest.raises(InvalidParameterError):
        SceneSpec(**kw)


def test_taxonomy_must_have_scene_classes():
    tax = SemanticTaxonomy(("car", "road", "empty"), 2, (True, False, False))
    with pytest.raises(InvalidParameterError):
        gen_scene(SceneSpec(), tax)


def test_default_scenes_are_reasonable(taxonomy):
    # over 20 seeds: occupancy between 1% and 60%, every class present in every
    # scene, and initial Gaussians valid and placed mostly inside occupied voxels
    for seed in range(20):
        init, gt = gen_scene(SceneSpec(seed=seed))
        occ = np.mean(gt.classes != taxonomy.empty_class)
        assert 0.01 < occ < 0.60, (seed, occ)
        assert set(np.unique(gt.classes).tolist()) == set(range(taxonomy.d)), seed
        assert validate_set(init) == []
        labels = scene_labels(init, gt)
        assert np.mean(labels == taxonomy.empty_class) < 0.5


def test_semantic_logits_carry_signal(taxonomy):
    init, gt = gen_scene(SceneSpec(seed=1))
    labels = scene_labels(init, gt)
    ok = (labels >= 0) & (labels != taxonomy.empty_class)
    acc = np.mean(init.semantics[ok].argmax(axis=1) == labels[ok])
    assert 1 / taxonomy.d < acc < 1.0  # informative but noisy


def test_class_embeddings_are_unit_and_fixed(taxonomy):
    E = class_embeddings(taxonomy, 16)
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0)
    np.testing.assert_array_equal(E, class_embeddings(taxonomy, 16))


def test_spec_round_trip():
    spec = SceneSpec(seed=9, counts={"car": 1})
    assert SceneSpec.from_dict(spec.to_dict()) == spec
