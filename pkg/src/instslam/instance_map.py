"""Persistent 3D instance map: fused point sets, prototypes and label lookup."""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .embed_cluster import InstanceMask
from .frontend_io.types import Intrinsics
from .liegroups import SE3Pose, Sim3Transform

log = logging.getLogger(__name__)

MAP_MAGIC = "INSTMAP1"


def backproject(mask: InstanceMask, depth: np.ndarray, intr: Intrinsics
                ) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points of the mask pixels with valid depth, and their flat indices."""
    flat = mask.flat
    z = depth.ravel()[flat].astype(np.float64)
    ok = z > 0
    flat, z = flat[ok], z[ok]
    r, c = np.divmod(flat, depth.shape[1])
    pts = np.stack([(c - intr.cx) / intr.fx * z, (r - intr.cy) / intr.fy * z, z], axis=1)
    return pts, flat


def _as_sim3(pose) -> Sim3Transform:
    return pose.to_sim3() if isinstance(pose, SE3Pose) else pose


@dataclass(eq=False)
class GlobalInstance:
    id: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    # chunk id each point was observed from
    chunks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    prototype: np.ndarray | None = None
    semantic_feature: np.ndarray | None = None
    semantic_count: int = 0
    last_seen: int = -1
    # oracle ground-truth id votes, filled only when gt rasters exist
    gt_votes: Counter = field(default_factory=Counter)
    _voxels: dict = field(default_factory=dict, repr=False)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def majority_gt(self) -> int | None:
        return self.gt_votes.most_common(1)[0][0] if self.gt_votes else None


@dataclass(eq=False)
class GlobalInstanceMap:
    voxel_size: float = 0.02
    instances: dict[int, GlobalInstance] = field(default_factory=dict)
    next_id: int = 0

    def allocate_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def ensure(self, instance_id: int) -> GlobalInstance:
        inst = self.instances.get(instance_id)
        if inst is None:
            inst = self.instances[instance_id] = GlobalInstance(instance_id)
            self.next_id = max(self.next_id, instance_id + 1)
        return inst

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances.values())

    def total_points(self) -> int:
        return sum(len(i.points) for i in self.instances.values())


def _voxel_keys(points: np.ndarray, voxel: float) -> list[tuple[int, int, int]]:
    return list(map(tuple, np.floor(points / voxel).astype(np.int64).tolist()))


def fuse_observation(gmap: GlobalInstanceMap, instance_id: int, mask: InstanceMask,
                     depth: np.ndarray, pose, intrinsics: Intrinsics, chunk_id: int = 0,
                     frame_index: int | None = None, semantic_feature=None,
                     gt_ids: np.ndarray | None = None) -> GlobalInstanceMap:
    """Back-project ``mask`` to world and merge it into instance ``instance_id``.

    ``pose`` is the camera-to-world SE3Pose or Sim3Transform.  New points whose
    voxel is already occupied by the instance are dropped.
    """
    cam, flat = backproject(mask, depth, intrinsics)
    if len(cam) == 0:
        return gmap
    inst = gmap.ensure(instance_id)
    world = _as_sim3(pose).apply(cam)
    keep = []
    for k, key in enumerate(_voxel_keys(world, gmap.voxel_size)):
        if key not in inst._voxels:
            inst._voxels[key] = len(inst.points) + len(keep)
            keep.append(k)
    if keep:
        inst.points = np.concatenate([inst.points, world[keep]])
        inst.chunks = np.concatenate([inst.chunks, np.full(len(keep), chunk_id, dtype=np.int64)])
    if frame_index is not None:
        inst.last_seen = max(inst.last_seen, frame_index)
    if semantic_feature is not None:
        v = np.asarray(semantic_feature, dtype=np.float64)
        if inst.semantic_feature is None:
            inst.semantic_feature = v / np.linalg.norm(v)
            inst.semantic_count = 1
        else:
            c = inst.semantic_count
            m = (c * inst.semantic_feature + v / np.linalg.norm(v)) / (c + 1)
            inst.semantic_feature = m / np.linalg.norm(m)
            inst.semantic_count = c + 1
    if gt_ids is not None:
        ids, counts = np.unique(gt_ids.ravel()[flat], return_counts=True)
        for i, n in zip(ids.tolist(), counts.tolist()):
            if i >= 0:
                inst.gt_votes[i] += n
    return gmap


def retag_on_loop(gmap: GlobalInstanceMap, correction: dict[int, Sim3Transform]
                  ) -> GlobalInstanceMap:
    """Move every point by the corrective similarity of the chunk it came from."""
    warned = set()
    for inst in gmap.instances.values():
        if len(inst.points) == 0:
            continue
        pts = inst.points.copy()
        for c in np.unique(inst.chunks).tolist():
            s = correction.get(c)
            if s is None:
                if c not in warned:
                    log.warning("no correction for chunk %d; leaving its points in place", c)
                    warned.add(c)
                continue
            if s.is_identity():
                continue
            sel = inst.chunks == c
            pts[sel] = s.apply(inst.points[sel])
        inst.points = pts
        inst._voxels = {}
        for k, key in enumerate(_voxel_keys(pts, gmap.voxel_size)):
            inst._voxels.setdefault(key, k)
    return gmap


@dataclass(frozen=True, eq=False)
class LabelSet:
    names: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "embeddings", emb)
        if len(set(self.names)) != len(self.names):
            raise ValueError("label names must be unique")
        if emb.shape[0] != len(self.names):
            raise ValueError("one embedding per label")
        if len(emb) and np.max(np.abs(np.linalg.norm(emb, axis=1) - 1.0)) > 1e-6:
            raise ValueError("label embeddings must be unit-norm")


class LabelAssignment(NamedTuple):
    name: str
    score: float
    low_confidence: bool


def assign_labels(gmap: GlobalInstanceMap, labels: LabelSet, min_score: float = 0.1
                  ) -> dict[int, LabelAssignment]:
    """Label each instance by maximum cosine against the label embeddings.

    Ties resolve to the earliest label.  Instances without a semantic feature
    are labelled ``"unknown"``.
    """
    if not labels.names:
        raise ValueError("empty label set")
    out = {}
    for iid, inst in sorted(gmap.instances.items()):
        if inst.semantic_feature is None:
            out[iid] = LabelAssignment("unknown", float("nan"), True)
            continue
        f = inst.semantic_feature / np.linalg.norm(inst.semantic_feature)
        scores = labels.embeddings @ f
        k = int(np.argmax(scores))
        out[iid] = LabelAssignment(labels.names[k], float(scores[k]), bool(scores[k] <= min_score))
    return out


def save_map(gmap: GlobalInstanceMap, path: str | Path) -> None:
    """Text header line then one little-endian binary block per instance.

    Block layout: int64 id, int64 point count, int32 D, int32 D_lang,
    float32 xyz * count, float32 prototype * D, float32 semantic * D_lang.
    """
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"{MAP_MAGIC} {len(gmap.instances)} {gmap.voxel_size!r}\n".encode())
        for iid, inst in sorted(gmap.instances.items()):
            proto = np.zeros(0) if inst.prototype is None else inst.prototype
            sem = np.zeros(0) if inst.semantic_feature is None else inst.semantic_feature
            fh.write(struct.pack("<qqii", iid, len(inst.points), len(proto), len(sem)))
            fh.write(np.asarray(inst.points, "<f4").tobytes())
            fh.write(np.asarray(proto, "<f4").tobytes())
            fh.write(np.asarray(sem, "<f4").tobytes())


def load_map(path: str | Path) -> GlobalInstanceMap:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    magic, count, voxel = raw[:nl].decode().split()
    if magic != MAP_MAGIC:
        raise ValueError(f"not an instance map file: {magic!r}")
    gmap = GlobalInstanceMap(float(voxel))
    off = nl + 1
    for _ in range(int(count)):
        iid, n, d, dl = struct.unpack_from("<qqii", raw, off)
        off += 24
        pts = np.frombuffer(raw, "<f4", 3 * n, off).reshape(n, 3).astype(np.float64)
        off += 12 * n
        proto = np.frombuffer(raw, "<f4", d, off).astype(np.float64)
        off += 4 * d
        sem = np.frombuffer(raw, "<f4", dl, off).astype(np.float64)
        off += 4 * dl
        inst = gmap.ensure(iid)
        inst.points = pts
        inst.chunks = np.zeros(n, dtype=np.int64)
        inst.prototype = proto if d else None
        inst.semantic_feature = sem if dl else None
    return gmap


def export_ply(gmap: GlobalInstanceMap, path: str | Path) -> None:
    """ASCII PLY with x, y, z and the instance id per vertex."""
    rows = []
    for iid, inst in sorted(gmap.instances.items()):
        for p in inst.points:
            rows.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {iid}")
    header = ["ply", "format ascii 1.0", f"element vertex {len(rows)}",
              "property float x", "property float y", "property float z",
              "property int instance", "end_header"]
    Path(path).write_text("\n".join(header + rows) + "\n", encoding="utf-8")
