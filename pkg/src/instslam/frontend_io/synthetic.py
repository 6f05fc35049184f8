"""Deterministic synthetic scenes standing in for the neural front-end.

Scenes are built from spheres and axis-aligned boxes, each carrying a unit
ground-truth embedding.  Cameras follow a fixed trajectory; a chunk's output is
expressed in its own frame (first camera at identity, per-chunk scale) with a
constant per-frame tangent drift accumulated from the chunk's first frame.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ..liegroups import SE3Pose, Sim3Transform, sim3_exp
from .types import DEFAULT_EMBED_DIM, ChunkOutput, FrameOutput, GroundTruth, Intrinsics

NEAR = 1e-6


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit in front of ``origin`` (inf if none)."""
        oc = origin - np.asarray(self.center, dtype=np.float64)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > NEAR, t0, t1)
        return np.where(hit & (t > NEAR), t, np.inf)

    def sample_surface(self, n: int) -> np.ndarray:
        k = np.arange(n) + 0.5
        polar = np.arccos(1 - 2 * k / n)
        azim = np.pi * (1 + 5 ** 0.5) * k
        unit = np.stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar),
                         np.cos(polar)], axis=1)
        return np.asarray(self.center) + self.radius * unit

    @property
    def centroid(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        d = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
        inv = 1.0 / d
        t1 = (np.asarray(self.lo) - origin) * inv
        t2 = (np.asarray(self.hi) - origin) * inv
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        t = np.where(tmin > NEAR, tmin, tmax)
        return np.where((tmax >= tmin) & (t > NEAR), t, np.inf)

    def sample_surface(self, n: int) -> np.ndarray:
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        ext = hi - lo
        areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
        per_face = np.maximum(1, np.round(n * areas / (2 * areas.sum()))).astype(int)
        pts = []
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            m = int(np.ceil(np.sqrt(per_face[axis])))
            gu, gv = np.meshgrid((np.arange(m) + 0.5) / m, (np.arange(m) + 0.5) / m)
            for side in (lo[axis], hi[axis]):
                p = np.empty((m * m, 3))
                p[:, axis] = side
                p[:, u] = lo[u] + gu.ravel() * ext[u]
                p[:, v] = lo[v] + gv.ravel() * ext[v]
                pts.append(p)
        return np.concatenate(pts)

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo, float) + np.asarray(self.hi, float))


@dataclass(frozen=True, eq=False)
class SceneObject:
    instance_id: int
    primitive: Sphere | Box
    embedding: np.ndarray
    label: str = "object"
    lang: np.ndarray | None = None


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0
    embed_sigma: float = 0.0
    # per-frame tangent drift (rho, phi, sigma)
    drift_rate: tuple = (0.0,) * 7
    # spread of the random embedding-space rotation drawn once per inference;
    # frames inferred together share it, separate inferences do not
    latent_jitter: float = 0.0


@dataclass(eq=False)
class SyntheticScene:
    objects: list[SceneObject]
    trajectory: list[SE3Pose]
    intrinsics: Intrinsics
    height: int
    width: int
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    # chunk id -> scale of that chunk's output frame relative to metric
    chunk_scales: dict[int, float] = field(default_factory=dict)
    frame_dt: float = 1.0 / 30.0
    embed_dim: int = DEFAULT_EMBED_DIM

    def __post_init__(self):
        for o in self.objects:
            if abs(np.linalg.norm(o.embedding) - 1.0) > 1e-9 or len(o.embedding) != self.embed_dim:
                raise ValueError(f"object {o.instance_id} embedding must be unit-norm, dim {self.embed_dim}")

    @property
    def lang_dim(self) -> int:
        langs = [o.lang for o in self.objects if o.lang is not None]
        return len(langs[0]) if len(langs) == len(self.objects) and langs else 0

    def object_by_id(self, instance_id: int) -> SceneObject:
        for o in self.objects:
            if o.instance_id == instance_id:
                return o
        raise KeyError(instance_id)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> SE3Pose:
    """Camera-to-world pose with +z toward ``target``, +y image-down."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return SE3Pose(np.stack([x, y, z], axis=1), eye)


def separated_embeddings(n: int, dim: int, gap: float, rng: np.random.Generator,
                         max_tries: int = 20000) -> np.ndarray:
    """``n`` random unit vectors with pairwise cosine at most ``1 - gap``."""
    out: list[np.ndarray] = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {n} embeddings with gap {gap} in R^{dim}")
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(v @ u <= 1.0 - gap for u in out):
            out.append(v)
    return np.array(out)


def pixel_rays(intr: Intrinsics, height: int, width: int) -> np.ndarray:
    """Camera-frame ray directions with unit z, one per pixel (row-major)."""
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([(cols.ravel() - intr.cx) / intr.fx,
                     (rows.ravel() - intr.cy) / intr.fy,
                     np.ones(height * width)], axis=1)


def raycast(objects, pose: SE3Pose, intr: Intrinsics, height: int, width: int
            ) -> tuple[np.ndarray, np.ndarray]:
    """Z-depth and object list index of the nearest hit per pixel (-1 for none)."""
    dirs = pixel_rays(intr, height, width) @ pose.rotation.T
    best = np.full(height * width, np.inf)
    idx = np.full(height * width, -1, dtype=np.int64)
    for k, obj in enumerate(objects):
        t = obj.primitive.intersect(pose.translation, dirs)
        closer = t < best
        best[closer] = t[closer]
        idx[closer] = k
    depth = np.where(np.isfinite(best), best, 0.0)
    return depth.reshape(height, width), idx.reshape(height, width)


def latent_rotation(dim: int, jitter: float, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal map ``expm(jitter * (A - A^T) / 2)`` with Gaussian ``A``."""
    if jitter == 0.0:
        return np.eye(dim)
    a = rng.normal(size=(dim, dim))
    return expm(jitter * (a - a.T) / 2.0)


def _render_frame(scene: SyntheticScene, pose_world: SE3Pose, rng: np.random.Generator,
                  latent: np.ndarray | None = None):
    h, w = scene.height, scene.width
    depth, idx = raycast(scene.objects, pose_world, scene.intrinsics, h, w)
    hit = idx >= 0
    ids = np.full((h, w), -1, dtype=np.int32)
    emb = np.zeros((h, w, scene.embed_dim))
    table = np.array([o.embedding for o in scene.objects]) if scene.objects else np.zeros((0, scene.embed_dim))
    ids[hit] = [scene.objects[k].instance_id for k in idx[hit]]
    emb[hit] = table[idx[hit]]
    if scene.noise.embed_sigma > 0:
        emb[hit] += rng.normal(scale=scene.noise.embed_sigma, size=(int(hit.sum()), scene.embed_dim))
    norms = np.linalg.norm(emb, axis=2, keepdims=True)
    emb = np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)
    if latent is not None:
        emb = emb @ latent.T
    if scene.noise.depth_sigma > 0:
        depth[hit] += rng.normal(scale=scene.noise.depth_sigma, size=int(hit.sum()))
        depth[hit] = np.maximum(depth[hit], 1e-3)
    lang = None
    if scene.lang_dim:
        lang = np.zeros((h, w, scene.lang_dim))
        lang[hit] = np.array([o.lang for o in scene.objects])[idx[hit]]
    return depth, emb, ids, lang


def chunk_gauge(scene: SyntheticScene, start: int, chunk_id: int) -> Sim3Transform:
    """True chunk-local -> world similarity of a chunk starting at ``start``."""
    t0 = scene.trajectory[start]
    return Sim3Transform(t0.rotation, t0.translation, scene.chunk_scales.get(chunk_id, 1.0))


def render_synthetic_chunk(scene: SyntheticScene, frame_range, chunk_id: int,
                           overlap_with_prev: int = 0) -> tuple[ChunkOutput, GroundTruth]:
    """Render frames ``frame_range`` (an iterable of trajectory indices) as one chunk.

    Pose ``l`` frames into the chunk is the true relative pose perturbed by
    ``exp(l * drift_rate)``; its scale component multiplies the frame's depth
    so that back-projected geometry stays consistent with the reported pose.
    """
    indices = list(frame_range)
    if not indices:
        raise ValueError("empty frame range")
    if min(indices) < 0 or max(indices) >= len(scene.trajectory):
        raise IndexError("frame range outside the trajectory")
    start = indices[0]
    gauge = chunk_gauge(scene, start, chunk_id)
    t_start_inv = scene.trajectory[start].inverse()
    rate = np.asarray(scene.noise.drift_rate, dtype=np.float64)
    latent = latent_rotation(scene.embed_dim, scene.noise.latent_jitter,
                             np.random.default_rng([scene.seed, 3, chunk_id]))
    frames, gt_ids, world = [], [], []
    for l, i in enumerate(indices):
        rng = np.random.default_rng([scene.seed, 1, chunk_id, i])
        pose_w = scene.trajectory[i]
        depth, emb, ids, lang = _render_frame(scene, pose_w, rng, latent)
        rel = t_start_inv.compose(pose_w).to_sim3()
        local = Sim3Transform(np.eye(3), np.zeros(3), 1.0 / gauge.scale).compose(
            sim3_exp(l * rate).compose(rel))
        frames.append(FrameOutput(
            pose=SE3Pose(local.rotation, local.translation),
            depth=depth * local.scale,
            embedding=emb,
            intrinsics=scene.intrinsics,
            timestamp=i * scene.frame_dt,
            index=i,
            lang=lang,
            gt_ids=ids,
        ))
        gt_ids.append(ids)
        world.append(pose_w)
    empty = all((ids < 0).all() for ids in gt_ids)
    if empty:
        warnings.warn(f"chunk {chunk_id}: no primitive visible in any frame", stacklevel=2)
    chunk = ChunkOutput(chunk_id, frames, overlap_with_prev)
    return chunk, GroundTruth(world, gt_ids, gauge, empty, indices)


def simulate_reinference(frames, scene: SyntheticScene, scale: float = 1.0) -> ChunkOutput:
    """Joint two-frame inference on trajectory frames ``(a, b)``.

    Both frames are expressed in a fresh shared frame whose origin is camera
    ``a`` (scaled by ``1/scale``), without drift and with freshly drawn noise.
    """
    a, b = frames
    anchor_inv = scene.trajectory[a].inverse()
    latent = latent_rotation(scene.embed_dim, scene.noise.latent_jitter,
                             np.random.default_rng([scene.seed, 4, a, b]))
    out = []
    for k, i in enumerate((a, b)):
        rng = np.random.default_rng([scene.seed, 2, a, b, k])
        depth, emb, ids, lang = _render_frame(scene, scene.trajectory[i], rng, latent)
        rel = anchor_inv.compose(scene.trajectory[i])
        out.append(FrameOutput(
            pose=SE3Pose(rel.rotation, rel.translation / scale),
            depth=depth / scale,
            embedding=emb,
            intrinsics=scene.intrinsics,
            timestamp=i * scene.frame_dt,
            index=i,
            lang=lang,
            gt_ids=ids,
        ))
    return ChunkOutput(-1, out, 0)
