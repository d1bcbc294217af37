import numpy as np
import pytest

from gsocc.exceptions import InvalidInputError
from gsocc.metrics import confusion, iou_miou, per_class_iou
from gsocc.scene import GridSpec, SemanticTaxonomy, VoxelGrid

from oracles import confusion_loop


def _grid(values, dims=None):
    values = np.asarray(values)
    dims = dims or (len(values), 1, 1)
    return VoxelGrid(GridSpec((0, 0, 0), 1.0, dims), values.reshape(dims))


def test_hand_enumerated_example(taxonomy):
    # c1 = 1, c2 = 2, empty = 5
    gt = _grid([1, 1, 2, 5])
    pred = _grid([1, 2, 2, 5])
    c = confusion(pred, gt, taxonomy)
    assert (c.tp[1], c.fp[1], c.fn[1]) == (1, 0, 1)
    assert (c.tp[2], c.fp[2], c.fn[2]) == (1, 1, 0)
    iou, miou, per_class = iou_miou(c, taxonomy)
    np.testing.assert_allclose(per_class[[1, 2]], [0.5, 0.5])
    assert miou == 0.5
    assert iou == 1.0  # occupancy itself is perfect


def test_perfect_prediction(taxonomy, rng):
    g = _grid(rng.integers(0, 6, 64), (4, 4, 4))
    c = confusion(g, g, taxonomy)
    assert not c.fp.any() and not c.fn.any()
    iou, miou, _ = iou_miou(c, taxonomy)
    assert iou == 1.0 and miou == 1.0


def test_all_empty_prediction(taxonomy):
    gt = _grid([1] * 8)
    pred = _grid([5] * 8)
    c = confusion(pred, gt, taxonomy)
    assert c.fn[1] == 8 and c.tp[1] == 0
    iou, miou, _ = iou_miou(c, taxonomy)
    assert iou == 0.0 and miou == 0.0


def test_disjoint_predictions(taxonomy):
    c = confusion(_grid([0, 0, 1, 1]), _grid([1, 1, 0, 0]), taxonomy)
    np.testing.assert_array_equal(per_class_iou(c, [0, 1]), [0.0, 0.0])


def test_zero_denominator_class_excluded(taxonomy):
    c = confusion(_grid([3, 5]), _grid([3, 5]), taxonomy)
    per = per_class_iou(c, taxonomy.nonempty_classes)
    assert np.isnan(per[0]) and per[3] == 1.0
    assert iou_miou(c, taxonomy)[1] == 1.0


def test_spec_mismatch(taxonomy):
    with pytest.raises(InvalidInputError):
        confusion(_grid([1, 1]), _grid([1, 1, 1]), taxonomy)


def test_random_grids_match_loop_oracle(taxonomy):
    r = np.random.default_rng(7)
    d, c0 = taxonomy.d, taxonomy.empty_class
    for _ in range(50):
        dims = tuple(int(v) for v in r.integers(1, 6, 3))
        gt = r.integers(0, d, dims)
        pred = np.where(r.random(dims) < 0.6, gt, r.integers(0, d, dims))
        c = confusion(_grid(pred, dims), _grid(gt, dims), taxonomy)
        tp, fp, fn = confusion_loop(pred, gt, d)
        assert c.tp.tolist() == tp and c.fp.tolist() == fp and c.fn.tolist() == fn
        # counts identity: sum over non-empty of (TP + FN) plus empty GT = total
        ne = taxonomy.nonempty_classes
        assert sum(tp[k] + fn[k] for k in ne) + c.empty_gt == c.total == gt.size
        occ_p, occ_g = pred != c0, gt != c0
        o_tp, o_fp, o_fn = int(np.sum(occ_p & occ_g)), int(np.sum(occ_p & ~occ_g)), int(np.sum(~occ_p & occ_g))
        iou, miou, per = iou_miou(c, taxonomy)
        if o_tp + o_fp + o_fn:
            assert abs(iou - o_tp / (o_tp + o_fp + o_fn)) <= 1e-12
        ratios = [tp[k] / (tp[k] + fp[k] + fn[k]) for k in ne if tp[k] + fp[k] + fn[k]]
        if ratios:
            assert abs(miou - sum(ratios) / len(ratios)) <= 1e-12
            assert 0.0 <= miou <= 1.0
