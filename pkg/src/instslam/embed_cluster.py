"""Greedy peeling clustering of per-pixel embeddings into instance masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ClusterConfig",
    "DegenerateDescriptorError",
    "InstanceMask",
    "MaskDescriptor",
    "brute_force_clusters",
    "cluster_embeddings",
    "default_delta",
    "pool_and_normalize",
]

REFERENCE_AREA = 64 * 48


class DegenerateDescriptorError(ValueError):
    pass


def default_delta(height: int, width: int, base: int = 20) -> int:
    """Minimum cluster size scaled from ``base`` pixels at 64x48."""
    return max(1, int(round(base * height * width / REFERENCE_AREA)))


@dataclass(frozen=True)
class ClusterConfig:
    epsilon: float = 0.75
    delta: int = 20
    seed: int = 0
    max_iters: int = 1_000_000

    def __post_init__(self):
        if not -1.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (-1, 1)")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Pixel set stored as sorted flat (row-major) indices into an H x W frame."""

    flat: np.ndarray
    shape: tuple[int, int]
    frame_index: int = 0

    def __post_init__(self):
        flat = np.unique(np.asarray(self.flat, dtype=np.int64))
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)
        if len(flat) and (flat[0] < 0 or flat[-1] >= self.shape[0] * self.shape[1]):
            raise ValueError("mask pixels outside the frame")

    @classmethod
    def from_bool(cls, grid: np.ndarray, frame_index: int = 0) -> InstanceMask:
        return cls(np.flatnonzero(grid), grid.shape, frame_index)

    @classmethod
    def from_pixels(cls, pixels, shape, frame_index: int = 0) -> InstanceMask:
        rc = np.asarray(list(pixels), dtype=np.int64).reshape(-1, 2)
        return cls(rc[:, 0] * shape[1] + rc[:, 1], shape, frame_index)

    def __len__(self) -> int:
        return len(self.flat)

    @property
    def pixels(self) -> set[tuple[int, int]]:
        r, c = np.divmod(self.flat, self.shape[1])
        return set(zip(r.tolist(), c.tolist()))

    def to_bool(self) -> np.ndarray:
        out = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        out[self.flat] = True
        return out.reshape(self.shape)

    def rows_cols(self) -> tuple[np.ndarray, np.ndarray]:
        return np.divmod(self.flat, self.shape[1])


@dataclass(frozen=True, eq=False)
class MaskDescriptor:
    vector: np.ndarray
    source: InstanceMask


def pool_and_normalize(embedding: np.ndarray, mask: InstanceMask) -> MaskDescriptor:
    """Unit-norm sum of the mask's pixel features."""
    if len(mask) == 0:
        raise ValueError("empty mask")
    feats = embedding.reshape(-1, embedding.shape[-1])[mask.flat].astype(np.float64)
    s = feats.sum(axis=0)
    n = np.linalg.norm(s)
    if n < 1e-12 * len(mask):
        raise DegenerateDescriptorError("mask features sum to a zero vector")
    return MaskDescriptor(s / n, mask)


def cluster_embeddings(embedding: np.ndarray, valid: np.ndarray | None, cfg: ClusterConfig,
                       frame_index: int = 0, stats: dict | None = None) -> list[InstanceMask]:
    """Peel instance masks off one frame's H x W x D embedding map.

    Each round draws a seed uniformly from the remaining features, collects
    every remaining feature whose cosine to the seed exceeds ``epsilon``,
    re-centres on the normalised mean of that set, and re-collects against the
    refined centre.  The final set is kept when its size exceeds ``delta``.
    Either way its features (and the seed) leave the pool.
    """
    h, w, d = embedding.shape
    feats = embedding.reshape(-1, d).astype(np.float64)
    norms = np.linalg.norm(feats, axis=1)
    ok = norms > 0
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool).ravel()
    ok &= np.all(np.isfinite(feats), axis=1)
    pool = np.flatnonzero(ok)
    unit = feats[pool] / norms[pool, None]

    rng = np.random.default_rng(cfg.seed)
    masks: list[InstanceMask] = []
    alive = np.arange(len(pool))
    iters = 0
    while len(alive):
        iters += 1
        if iters > cfg.max_iters:
            raise RuntimeError("clustering exceeded max_iters")
        seed = alive[rng.integers(len(alive))]
        sims = unit[alive] @ unit[seed]
        init = alive[sims > cfg.epsilon]
        centre = unit[init].sum(axis=0)
        cn = np.linalg.norm(centre)
        if cn > 0:
            take = (unit[alive] @ (centre / cn)) > cfg.epsilon
        else:
            take = np.zeros(len(alive), dtype=bool)
        members = alive[take]
        if len(members) > cfg.delta:
            masks.append(InstanceMask(pool[members], (h, w), frame_index))
        take |= alive == seed
        alive = alive[~take]
    if stats is not None:
        stats["iterations"] = iters
    return masks


def brute_force_clusters(features, epsilon: float) -> list[np.ndarray]:
    """Connected components of the graph linking features with cosine > epsilon.

    Components are returned as sorted index arrays, ordered by smallest index.
    Zero-norm features become singletons.
    """
    f = np.asarray(features, dtype=np.float64)
    n = len(f)
    norms = np.linalg.norm(f, axis=1)
    u = np.divide(f, norms[:, None], out=np.zeros_like(f), where=norms[:, None] > 0)
    adj = (u @ u.T) > epsilon
    label = np.full(n, -1)
    comps = []
    for start in range(n):
        if label[start] >= 0:
            continue
        label[start] = len(comps)
        stack, members = [start], [start]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(adj[i] & (label < 0)):
                label[j] = len(comps)
                stack.append(j)
                members.append(j)
        comps.append(np.sort(np.array(members)))
    return comps
