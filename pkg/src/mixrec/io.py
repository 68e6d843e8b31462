"""On-disk formats: scene directories, point maps and model checkpoints.

Every binary blob is raw little-endian data described by a JSON sidecar or
header, so files are byte-identical across runs with the same inputs.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, EmptyDataset
from .geometry import CameraPose, Intrinsics, PointMap, SimilarityTransform, SparseVoxelGrid
from .synth_data import Scene

__all__ = [
    "dump_json",
    "save_pointmap",
    "load_pointmap",
    "save_scene",
    "load_scene",
    "load_poses",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"MIXRCKPT"


def dump_json(obj, path: Path | str) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_raw(path: Path, arr: np.ndarray, dtype: str) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def _read_raw(path: Path, dtype: str, shape) -> np.ndarray:
    arr = np.frombuffer(Path(path).read_bytes(), dtype=np.dtype(dtype).newbyteorder("<"))
    return arr.reshape(shape).astype(np.float64 if dtype[0] == "f" else dtype)


def save_pointmap(pm: PointMap, stem: Path | str) -> None:
    """Write ``stem.json`` (sidecar), ``stem.raw`` (float32 xyz, row-major) and ``stem.mask`` (one byte per pixel)."""
    stem = Path(stem)
    dump_json({"height": pm.height, "width": pm.width, "dtype": "f32", "order": "row-major, xyz interleaved"}, stem.with_suffix(".json"))
    _write_raw(stem.with_suffix(".raw"), pm.points, "f4")
    _write_raw(stem.with_suffix(".mask"), pm.valid, "u1")


def load_pointmap(stem: Path | str) -> PointMap:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    H, W = meta["height"], meta["width"]
    if meta.get("dtype", "f32") != "f32":
        raise ConfigMismatch(f"{stem}: unsupported dtype {meta['dtype']}")
    pts = _read_raw(stem.with_suffix(".raw"), "f4", (H, W, 3))
    valid = _read_raw(stem.with_suffix(".mask"), "u1", (H, W)).astype(bool)
    return PointMap(pts, valid)


def save_scene(scene: Scene, root: Path | str) -> Path:
    d = Path(root) / f"scene_{scene.seed}"
    d.mkdir(parents=True, exist_ok=True)
    dump_json(
        {"resolution": scene.shape.resolution, "count": len(scene.shape), "latent_shape": list(scene.z0.shape)},
        d / "shape.json",
    )
    _write_raw(d / "shape.raw", scene.shape.occupied, "i8")
    _write_raw(d / "z0.raw", scene.z0, "f8")
    dump_json(
        {
            "seed": scene.seed,
            "gt_similarity": scene.gt_similarity.to_json(),
            "cameras": [{"pose": p.to_json(), "intrinsics": k.to_json()} for p, k in scene.cameras],
        },
        d / "cams.json",
    )
    for k, pm in enumerate(scene.point_maps):
        save_pointmap(pm, d / f"pm_{k}")
    return d


def load_poses(path: Path | str) -> list[CameraPose]:
    """Poses from a JSON list of ``{q, t}`` records (or ``{"poses": [...]}``)."""
    d = json.loads(Path(path).read_text())
    if isinstance(d, dict):
        d = d["poses"]
    return [CameraPose.from_json(p) for p in d]


def load_scene(d: Path | str) -> Scene:
    d = Path(d)
    shape_meta = json.loads((d / "shape.json").read_text())
    occ = _read_raw(d / "shape.raw", "i8", (shape_meta["count"], 3))
    z0 = _read_raw(d / "z0.raw", "f8", tuple(shape_meta["latent_shape"]))
    cams_meta = json.loads((d / "cams.json").read_text())
    cams = [(CameraPose.from_json(c["pose"]), Intrinsics.from_json(c["intrinsics"])) for c in cams_meta["cameras"]]
    pms = [load_pointmap(d / f"pm_{k}") for k in range(len(cams))]
    return Scene(
        cams_meta["seed"],
        SparseVoxelGrid(shape_meta["resolution"], occ),
        z0,
        cams,
        pms,
        SimilarityTransform.from_json(cams_meta["gt_similarity"]),
    )


def load_dataset(root: Path | str) -> list[Scene]:
    """All ``scene_<seed>`` directories under ``root``, ordered by seed."""
    root = Path(root)
    dirs = sorted(
        (p for p in root.glob("scene_*") if p.is_dir() and p.name[6:].isdigit()), key=lambda p: int(p.name[6:])
    ) if root.is_dir() else []
    if not dirs:
        raise EmptyDataset(f"no scene_<seed> directories in {root}")
    return [load_scene(p) for p in dirs]


def save_checkpoint(path: Path | str, state: dict[str, np.ndarray], header: dict) -> None:
    """Magic, uint64 header length, JSON header, then float32 blobs in manifest order."""
    names = sorted(state)
    meta = dict(header)
    meta["manifest"] = [{"name": n, "shape": list(state[n].shape)} for n in names]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<Q", len(blob)) + blob)
        for n in names:
            f.write(np.ascontiguousarray(state[n], dtype="<f4").tobytes())


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ConfigMismatch(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    meta = json.loads(raw[16 : 16 + n])
    offset = 16 + n
    state = {}
    for entry in meta["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        state[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"]).astype(np.float32)
        offset += 4 * count
    if offset != len(raw):
        raise ConfigMismatch(f"{path}: {len(raw) - offset} trailing bytes")
    return state, meta
