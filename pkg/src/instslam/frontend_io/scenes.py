"""Ready-made synthetic scenes used by tests, benchmarks and the CLI."""

from __future__ import annotations

import numpy as np

from ..liegroups import SE3Pose
from .synthetic import Box, NoiseModel, SceneObject, Sphere, SyntheticScene, look_at, separated_embeddings
from .types import Intrinsics

CLASS_NAMES = ("chair", "table", "lamp", "plant", "monitor", "box", "ball", "vase")
LANG_DIM = 16


def default_intrinsics(height: int = 48, width: int = 64, focal: float = 50.0) -> Intrinsics:
    return Intrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)


def class_embeddings(seed: int = 0, dim: int = LANG_DIM) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 77])
    vecs = separated_embeddings(len(CLASS_NAMES), dim, 0.6, rng)
    return dict(zip(CLASS_NAMES, vecs))


def orbit_trajectory(n: int, radius: float = 3.0, height: float = 1.0,
                     target=(0.0, 0.0, 0.2), start: float = 0.0, sweep: float = 2 * np.pi
                     ) -> list[SE3Pose]:
    """``n`` cameras on a horizontal circle, all looking at ``target``."""
    angles = start + sweep * np.arange(n) / n
    tx, ty, tz = target
    return [look_at((tx + radius * np.cos(a), ty + radius * np.sin(a), height), target)
            for a in angles]


def _place_objects(rng, n, extent, min_gap, radius_range):
    placed: list[tuple[np.ndarray, float]] = []
    tries = 0
    while len(placed) < n:
        tries += 1
        if tries > 20000:
            raise RuntimeError("could not place objects without overlap")
        r = rng.uniform(*radius_range)
        c = np.array([rng.uniform(-extent, extent), rng.uniform(-extent, extent), r])
        if all(np.linalg.norm(c[:2] - q[:2]) > r + s + min_gap for q, s in placed):
            placed.append((c, r))
    return placed


def make_objects(rng, centres_radii, embed_dim: int, gap: float, langs: dict | None,
                 first_id: int = 1, box_every: int = 3) -> list[SceneObject]:
    emb = separated_embeddings(len(centres_radii), embed_dim, gap, rng)
    objs = []
    for k, (c, r) in enumerate(centres_radii):
        if box_every and k % box_every == box_every - 1:
            prim = Box(tuple(c - r * 0.8), tuple(c + r * 0.8))
        else:
            prim = Sphere(tuple(c), float(r))
        label = CLASS_NAMES[k % len(CLASS_NAMES)]
        lang = None if langs is None else langs[label]
        objs.append(SceneObject(first_id + k, prim, emb[k], label, lang))
    return objs


def tabletop_scene(seed: int = 0, n_frames: int = 48, n_objects: int = 6,
                   noise: NoiseModel | None = None, sweep: float = 2 * np.pi,
                   gap: float = 0.5, chunk_scale_jitter: float = 0.0, with_lang: bool = True,
                   height: int = 48, width: int = 64, orbit_radius: float = 3.0
                   ) -> SyntheticScene:
    """Objects scattered on a 2.4 m square, viewed by an inward-looking orbit."""
    rng = np.random.default_rng([seed, 11])
    placed = _place_objects(rng, n_objects, 1.0, 0.15, (0.15, 0.3))
    langs = class_embeddings(seed) if with_lang else None
    objs = make_objects(rng, placed, 8, gap, langs)
    traj = orbit_trajectory(n_frames, orbit_radius, 1.2, (0.0, 0.0, 0.2), 0.0, sweep)
    scales = {}
    if chunk_scale_jitter:
        srng = np.random.default_rng([seed, 13])
        scales = {c: float(np.exp(srng.uniform(-chunk_scale_jitter, chunk_scale_jitter)))
                  for c in range(1, 1000)}
    return SyntheticScene(objs, traj, default_intrinsics(height, width), height, width,
                          noise or NoiseModel(), seed, scales)


def wide_baseline_pair(seed: int = 0, angle_deg: float = 60.0, n_shared: int = 5,
                       noise: NoiseModel | None = None, disjoint: bool = False,
                       height: int = 96, width: int = 128) -> tuple[SyntheticScene, tuple[int, int]]:
    """Two cameras ``angle_deg`` apart around a cluster of ``n_shared`` objects.

    The cameras look down steeply from 1.4 m so that every object stays
    visible with a footprint well above the default minimum mask size.  With
    ``disjoint`` the second camera looks at a separate object cluster.
    Returns the scene and the (place, query) frame indices.
    """
    rng = np.random.default_rng([seed, 21])
    placed = _place_objects(rng, n_shared, 0.6, 0.12, (0.15, 0.2))
    centres = list(placed)
    if disjoint:
        offset = np.array([8.0, 0.0, 0.0])
        centres += [(c + offset, r) for c, r in _place_objects(rng, n_shared, 0.6, 0.12, (0.15, 0.2))]
    objs = make_objects(rng, centres, 8, 0.5, None)
    a0 = rng.uniform(0, 2 * np.pi)
    a1 = a0 + np.deg2rad(angle_deg)
    tgt = np.array([0.0, 0.0, 0.1])
    cams = [look_at((1.4 * np.cos(a0), 1.4 * np.sin(a0), 2.0), tgt)]
    if disjoint:
        tgt = tgt + np.array([8.0, 0.0, 0.0])
    cams.append(look_at(tgt + np.array([1.4 * np.cos(a1), 1.4 * np.sin(a1), 1.9]), tgt))
    intr = default_intrinsics(height, width, 50.0 * width / 64)
    scene = SyntheticScene(objs, cams, intr, height, width, noise or NoiseModel(), seed)
    return scene, (0, 1)


def room_walls(first_id: int, rng, half: float = 4.0, height: float = 2.5, thickness: float = 0.1,
               embed_dim: int = 8, gap: float = 0.5) -> list[SceneObject]:
    """Four wall slabs and a floor enclosing a ``2*half`` square room."""
    h, t = half, thickness
    boxes = [Box((-h - t, -h, 0.0), (-h, h, height)), Box((h, -h, 0.0), (h + t, h, height)),
             Box((-h, -h - t, 0.0), (h, -h, height)), Box((-h, h, 0.0), (h, h + t, height)),
             Box((-h, -h, -t), (h, h, 0.0))]
    emb = separated_embeddings(len(boxes), embed_dim, gap, rng)
    return [SceneObject(first_id + k, b, emb[k], "wall" if k < 4 else "floor")
            for k, b in enumerate(boxes)]


def corridor_scene(seed: int = 0, length: float = 12.0, n_frames: int = 80, n_objects: int = 30,
                   yaw_deg: float = 60.0, noise: NoiseModel | None = None) -> SyntheticScene:
    """Objects lining one side of a corridor, walked out and back.

    The outbound leg looks ``yaw_deg`` left of the walking direction and the
    return leg looks ``yaw_deg`` left of the reverse direction, so revisits
    see the same objects across a wide baseline.  Default noise includes a
    per-inference latent rotation of the embedding space.
    """
    rng = np.random.default_rng([seed, 31])
    placed = []
    for x in np.linspace(0.6, length - 0.6, n_objects):
        r = rng.uniform(0.14, 0.22)
        placed.append((np.array([x + rng.uniform(-0.2, 0.2), rng.uniform(0.6, 1.6), r]), r))
    objs = make_objects(rng, placed, 8, 0.5, None)
    half = n_frames // 2
    a = np.deg2rad(yaw_deg)
    traj = []
    for i in range(n_frames):
        if i < half:
            x, d = length * i / half, np.array([np.cos(a), np.sin(a)])
        else:
            x, d = length * (n_frames - 1 - i) / half, np.array([-np.cos(a), np.sin(a)])
        eye = np.array([x, -0.6, 1.1])
        traj.append(look_at(eye, eye + np.array([2.0 * d[0], 2.0 * d[1], -0.9])))
    noise = noise or NoiseModel(0.005, 0.02, latent_jitter=0.5)
    return SyntheticScene(objs, traj, default_intrinsics(), 48, 64, noise, seed)
