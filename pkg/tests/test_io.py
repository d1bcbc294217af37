import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsocc import io
from gsocc.exceptions import InvalidGaussianError, InvalidInputError
from gsocc.pipeline import PipelineConfig, init_params
from gsocc.scene import GaussianSet, GridSpec, VoxelGrid
from gsocc.synth import SceneSpec, gen_scene
from gsocc.validation import as_list, check_gaussian_set, check_grid, check_scenes


@pytest.fixture(scope="module")
def scene():
    return gen_scene(SceneSpec(seed=2, n_gaussians=64))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 5), st.integers(0, 4)),
              elements=st.floats(allow_nan=True, allow_infinity=True, width=64)))
def test_array_round_trip_is_bit_exact(a):
    b = io.decode_array(json.loads(json.dumps(io.encode_array(a))))
    assert b.shape == a.shape and b.dtype == a.dtype
    assert a.tobytes() == b.tobytes()


def test_integer_and_big_endian_arrays():
    a = np.arange(12, dtype=">i8").reshape(3, 4)
    b = io.decode_array(io.encode_array(a))
    np.testing.assert_array_equal(a, b)
    assert b.dtype == np.dtype("<i8")


@pytest.mark.parametrize("rec", [
    {"dtype": "<f8", "shape": [2], "data": "AAAA"},
    {"dtype": "|b1", "shape": [1], "data": "AA=="},
    {"dtype": "<f8", "shape": [1]},
    {"dtype": "<f8", "shape": [1], "data": "not base64!"},
])
def test_malformed_array_records(rec):
    with pytest.raises(InvalidInputError):
        io.decode_array(rec)


def test_scene_round_trip(tmp_path, scene, taxonomy):
    init, gt = scene
    io.save_scene(tmp_path / "s.json", init, gt, taxonomy, meta={"note": 1})
    init2, gt2, tax2 = io.load_scene(tmp_path / "s.json")
    assert init2.data.tobytes() == init.data.tobytes()
    assert gt2 == gt and tax2 == taxonomy


def test_gaussians_grid_params_round_trip(tmp_path, scene):
    init, gt = scene
    io.save_gaussians(tmp_path / "g.json", init)
    assert io.load_gaussians(tmp_path / "g.json").data.tobytes() == init.data.tobytes()
    io.save_grid(tmp_path / "grid.json", gt)
    assert io.load_grid(tmp_path / "grid.json") == gt
    params = init_params(PipelineConfig(block="mga", fuse="concat"), init.layout, 1)
    io.save_params(tmp_path / "p.json", params)
    back = io.load_params(tmp_path / "p.json")
    assert sorted(back) == sorted(params)
    assert all(back[k].tobytes() == params[k].tobytes() for k in params)


def test_json_payload(tmp_path):
    io.save_json(tmp_path / "r.json", "report", {"miou": 0.5})
    assert io.load_json(tmp_path / "r.json", "report") == {"miou": 0.5}
    with pytest.raises(InvalidInputError):
        io.load_json(tmp_path / "r.json", "ablation")


def test_wrong_kind_and_schema(tmp_path, scene):
    io.save_grid(tmp_path / "grid.json", scene[1])
    with pytest.raises(InvalidInputError):
        io.load_gaussians(tmp_path / "grid.json")
    (tmp_path / "x.json").write_text(json.dumps({"schema": "other/9", "kind": "grid"}))
    with pytest.raises(InvalidInputError):
        io.load_grid(tmp_path / "x.json")
    (tmp_path / "y.json").write_text("{not json")
    with pytest.raises(InvalidInputError):
        io.load_grid(tmp_path / "y.json")


def test_no_partial_file_left(tmp_path, scene):
    io.save_grid(tmp_path / "grid.json", scene[1])
    assert sorted(p.name for p in tmp_path.iterdir()) == ["grid.json"]


def test_csv_export(tmp_path, taxonomy):
    spec = GridSpec((0.0, 0.0, 0.0), 0.5, (2, 1, 2))
    grid = VoxelGrid(spec, np.array([[[0, 5]], [[3, 5]]]))
    n = io.export_csv(tmp_path / "g.csv", grid, taxonomy.empty_class)
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert n == 2 and lines[0] == "i,j,k,x,y,z,class"
    assert lines[1:] == ["0,0,0,0.250000,0.250000,0.250000,0", "1,0,0,0.750000,0.250000,0.250000,3"]
    assert io.export_csv(tmp_path / "all.csv", grid) == 4


def test_pgm_export(tmp_path):
    spec = GridSpec((0.0, 0.0, 0.0), 1.0, (3, 2, 2))
    classes = np.arange(12).reshape(3, 2, 2) % 6
    paths = io.export_pgm(tmp_path / "pgm", VoxelGrid(spec, classes), 6)
    assert len(paths) == 2
    raw = paths[0].read_bytes()
    header = b"P5\n3 2\n255\n"
    assert raw.startswith(header)
    img = np.frombuffer(raw[len(header):], np.uint8).reshape(2, 3)
    np.testing.assert_array_equal(img, (classes[:, :, 0].T[::-1] * 51).astype(np.uint8))


# --- validation -----------------------------------------------------------------


def test_check_gaussian_set_lists_violations(scene):
    init, _ = scene
    assert check_gaussian_set(init, d=6, F=32) is init
    data = init.data.copy()
    data[3, 3] = -1.0      # negative scale
    data[5, 10] = 1.5      # opacity out of range
    with pytest.raises(InvalidGaussianError, match="2 invariant violations"):
        check_gaussian_set(GaussianSet(data, 6, 32))
    with pytest.raises(InvalidInputError):
        check_gaussian_set(init, d=5)
    with pytest.raises(InvalidInputError):
        check_gaussian_set(init.data)


def test_check_scenes(scene):
    init, gt = scene
    pairs = check_scenes(init, gt, 6)
    assert len(pairs) == 1 and pairs[0][0] is init
    with pytest.raises(InvalidInputError):
        check_scenes([init, init], [gt], 6)
    with pytest.raises(InvalidInputError):
        check_scenes([], [], 6)
    with pytest.raises(InvalidInputError):
        check_grid(gt, spec=GridSpec((0, 0, 0), 1.0, (2, 2, 2)))


def test_as_list():
    assert as_list([1, 2]) == ([1, 2], False)
    with pytest.raises(InvalidInputError):
        as_list("scene")
