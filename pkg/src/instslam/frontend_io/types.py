"""Front-end output records: per-frame pose, depth and embedding rasters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..liegroups import SE3Pose

DEFAULT_EMBED_DIM = 8


class Intrinsics(NamedTuple):
    fx: float
    fy: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(eq=False)
class FrameOutput:
    """One frame of a front-end inference.

    ``pose`` maps camera to chunk-local coordinates.  ``depth`` is z-depth in
    chunk units with 0 marking invalid pixels.  ``lang`` is an optional
    per-pixel vision-language feature raster and ``gt_ids`` the per-pixel
    instance ids of oracle chunks (-1 for background).
    """

    pose: SE3Pose
    depth: np.ndarray
    embedding: np.ndarray
    intrinsics: Intrinsics
    timestamp: float = 0.0
    index: int = 0
    lang: np.ndarray | None = None
    gt_ids: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.embedding = np.asarray(self.embedding, dtype=np.float32)
        if self.lang is not None:
            self.lang = np.asarray(self.lang, dtype=np.float32)
        if self.gt_ids is not None:
            self.gt_ids = np.asarray(self.gt_ids, dtype=np.int32)
        self.intrinsics = Intrinsics(*map(float, self.intrinsics))
        if self.depth.ndim != 2:
            raise ValueError("depth must be an H x W raster")
        if self.embedding.shape[:2] != self.depth.shape or self.embedding.ndim != 3:
            raise ValueError("embedding must be H x W x D matching depth")
        if self.intrinsics.fx <= 0 or self.intrinsics.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def dim(self) -> int:
        return self.embedding.shape[2]

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass(eq=False)
class ChunkOutput:
    chunk_id: int
    frames: list[FrameOutput]
    overlap_with_prev: int = 0

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a chunk needs at least one frame")
        if not 0 <= self.overlap_with_prev < len(self.frames):
            raise ValueError("overlap_with_prev must be smaller than the frame count")
        h, w = self.frames[0].shape
        d = self.frames[0].dim
        for f in self.frames:
            if f.shape != (h, w) or f.dim != d:
                raise ValueError("all frames of a chunk must share H, W and D")

    @property
    def frame_indices(self) -> list[int]:
        return [f.index for f in self.frames]


@dataclass(eq=False)
class GroundTruth:
    """Oracle side-information returned with a rendered chunk."""

    world_poses: list[SE3Pose]
    ids: list[np.ndarray]
    # true chunk-local -> world similarity (drift excluded)
    chunk_to_world: object = None
    empty: bool = False
    frame_indices: list[int] = field(default_factory=list)
