import json

import numpy as np
import pytest

from mixrec.errors import ConfigMismatch, EmptyDataset
from mixrec.geometry import CameraPose, PointMap
from mixrec.io import load_checkpoint, load_dataset, load_pointmap, load_poses, load_scene, save_checkpoint, save_pointmap, save_scene
from mixrec.synth_data import make_scene


def test_pointmap_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pm = PointMap(rng.standard_normal((5, 7, 3)).astype(np.float32), rng.random((5, 7)) > 0.5)
    save_pointmap(pm, tmp_path / "pm")
    back = load_pointmap(tmp_path / "pm")
    assert np.array_equal(back.points, pm.points) and np.array_equal(back.valid, pm.valid)
    meta = json.loads((tmp_path / "pm.json").read_text())
    assert meta["height"] == 5 and meta["width"] == 7 and meta["dtype"] == "f32"
    assert (tmp_path / "pm.raw").stat().st_size == 5 * 7 * 3 * 4
    meta["dtype"] = "f16"
    (tmp_path / "pm.json").write_text(json.dumps(meta))
    with pytest.raises(ConfigMismatch):
        load_pointmap(tmp_path / "pm")


def test_scene_round_trip(tmp_path):
    scene = make_scene(3, misaligned=True)
    d = save_scene(scene, tmp_path)
    assert d.name == "scene_3"
    back = load_scene(d)
    assert back.seed == 3
    assert np.array_equal(back.shape.occupied, scene.shape.occupied) and np.array_equal(back.z0, scene.z0)
    a, b = back.gt_similarity, scene.gt_similarity
    assert a.s == pytest.approx(b.s) and np.allclose(a.R, b.R, atol=1e-12) and np.allclose(a.t, b.t, atol=1e-12)
    for (p, k), (p2, k2) in zip(scene.cameras, back.cameras):
        assert np.allclose(p.R, p2.R, atol=1e-12) and np.allclose(p.t, p2.t) and k == k2
    # point maps are stored as float32
    assert np.allclose(back.point_maps[4].points, scene.point_maps[4].points, atol=1e-6)
    assert np.array_equal(back.point_maps[4].valid, scene.point_maps[4].valid)


def test_dataset_ordering_and_empty(tmp_path):
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path)
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path / "missing")
    for s in (10, 2):
        save_scene(make_scene(s), tmp_path)
    (tmp_path / "scene_x").mkdir()
    assert [s.seed for s in load_dataset(tmp_path)] == [2, 10]


def test_load_poses_formats(tmp_path):
    poses = [CameraPose(t=[1, 2, 3]).to_json(), CameraPose([0, 1, 0, 0]).to_json()]
    (tmp_path / "a.json").write_text(json.dumps(poses))
    (tmp_path / "b.json").write_text(json.dumps({"poses": poses}))
    a, b = load_poses(tmp_path / "a.json"), load_poses(tmp_path / "b.json")
    assert len(a) == 2 and np.allclose(a[0].t, [1, 2, 3]) and np.allclose(b[1].q, [0, 1, 0, 0])


def test_checkpoint_round_trip_and_bytes(tmp_path):
    state = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.ones(4, np.float32)}
    save_checkpoint(tmp_path / "c.bin", state, {"phase": "mixed"})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"MIXRCKPT"
    back, meta = load_checkpoint(tmp_path / "c.bin")
    assert meta["phase"] == "mixed" and [m["name"] for m in meta["manifest"]] == ["a", "b"]
    assert all(np.array_equal(back[k], state[k]) for k in state)
    save_checkpoint(tmp_path / "d.bin", dict(reversed(list(state.items()))), {"phase": "mixed"})
    assert (tmp_path / "d.bin").read_bytes() == raw
    (tmp_path / "e.bin").write_bytes(raw + b"\0")
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "e.bin")
    (tmp_path / "f.bin").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "f.bin")
