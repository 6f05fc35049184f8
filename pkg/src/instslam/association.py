"""Joint geometric/semantic association of frame masks with map instances."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .embed_cluster import InstanceMask, MaskDescriptor
from .frontend_io.types import Intrinsics
from .instance_map import GlobalInstanceMap

__all__ = [
    "AffinityConfig",
    "AffinityRow",
    "AssociationResult",
    "FeatureBank",
    "associate",
    "mask_iou",
    "project_instances",
]


@dataclass(frozen=True)
class AffinityConfig:
    alpha: float = 0.4
    beta: float = 0.6
    tau_match: float = 0.55
    # occlusion tolerance for projected points (depth units)
    z_tol: float = 0.05

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("alpha, beta must be >= 0 with a positive sum")


@dataclass(eq=False)
class FeatureBank:
    """Unit-norm prototype and observation count per instance."""

    prototypes: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    next_id: int = 0

    def allocate_id(self) -> int:
        self.next_id = max([self.next_id, *(k + 1 for k in self.prototypes)])
        i = self.next_id
        self.next_id += 1
        return i

    def add(self, instance_id: int, f: np.ndarray) -> None:
        self.prototypes[instance_id] = np.asarray(f, dtype=np.float64) / np.linalg.norm(f)
        self.counts[instance_id] = 1
        self.next_id = max(self.next_id, instance_id + 1)

    def update(self, instance_id: int, f: np.ndarray) -> None:
        """Count-weighted running mean followed by renormalisation."""
        c = self.counts[instance_id]
        m = (c * self.prototypes[instance_id] + np.asarray(f, dtype=np.float64)) / (c + 1)
        self.prototypes[instance_id] = m / np.linalg.norm(m)
        self.counts[instance_id] = c + 1


class AffinityRow(NamedTuple):
    k: int
    j: int
    s_geo: float
    s_sem: float
    a: float


@dataclass(eq=False)
class AssociationResult:
    assignments: list[int]
    new_ids: set[int]
    affinity_log: list[AffinityRow]
    # per mask: "match" or "new"
    decisions: list[str] = field(default_factory=list)


def project_instances(gmap: GlobalInstanceMap, pose, intrinsics: Intrinsics,
                      depth: np.ndarray, z_tol: float = 0.05) -> dict[int, np.ndarray]:
    """Flat pixel indices covered by each instance's points in the given view.

    ``pose`` maps camera to world (SE3Pose or Sim3Transform).  A point survives
    when it lies in front of the camera, lands inside the image and is not
    deeper than the observed depth at its pixel by more than ``z_tol``.
    Pixels without a depth reading never occlude.
    """
    h, w = depth.shape
    world_to_cam = pose.inverse()
    dflat = depth.ravel()
    out: dict[int, np.ndarray] = {}
    for iid, inst in sorted(gmap.instances.items()):
        if len(inst.points) == 0:
            continue
        p = world_to_cam.apply(inst.points)
        z = p[:, 2]
        front = z > 1e-9
        p, z = p[front], z[front]
        if len(z) == 0:
            continue
        u = np.rint(intrinsics.fx * p[:, 0] / z + intrinsics.cx)
        v = np.rint(intrinsics.fy * p[:, 1] / z + intrinsics.cy)
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        flat = (v[inside] * w + u[inside]).astype(np.int64)
        z = z[inside]
        obs = dflat[flat]
        visible = (obs <= 0) | (z <= obs + z_tol)
        pix = np.unique(flat[visible])
        if len(pix):
            out[iid] = pix
    return out


def mask_iou(a, b) -> float:
    """Intersection over union of two pixel sets (InstanceMask or flat indices)."""
    fa = a.flat if isinstance(a, InstanceMask) else np.asarray(a, dtype=np.int64)
    fb = b.flat if isinstance(b, InstanceMask) else np.asarray(b, dtype=np.int64)
    inter = len(np.intersect1d(fa, fb, assume_unique=True))
    union = len(fa) + len(fb) - inter
    return inter / union if union else 0.0


def associate(masks: list[tuple[InstanceMask, MaskDescriptor]],
              projections: dict[int, np.ndarray], bank: FeatureBank, cfg: AffinityConfig,
              allocate_id: Callable[[], int] | None = None) -> AssociationResult:
    """Assign each mask to a projected instance or a fresh id; updates ``bank``.

    Candidates are instances whose projection overlaps the mask.  Affinity is
    ``alpha * IoU + beta * <f_k, b_j>`` scored against the bank as it was on
    entry.  Masks are resolved in order of their best affinity (descending);
    an instance claimed by one mask is unavailable to later masks of the same
    frame.  Ties in affinity go to the lowest instance id.
    """
    allocate_id = allocate_id or bank.allocate_id
    snapshot = {j: v.copy() for j, v in bank.prototypes.items()}
    scored: list[dict[int, float]] = []
    rows: list[AffinityRow] = []
    for k, (mask, desc) in enumerate(masks):
        cand = {}
        for j in sorted(projections):
            if j not in snapshot:
                continue
            iou = mask_iou(mask, projections[j])
            if iou <= 0:
                continue
            s_sem = float(desc.vector @ snapshot[j])
            a = cfg.alpha * iou + cfg.beta * s_sem
            cand[j] = a
            rows.append(AffinityRow(k, j, iou, s_sem, a))
        scored.append(cand)

    best = [max(c.values()) if c else -np.inf for c in scored]
    order = sorted(range(len(masks)), key=lambda k: (-best[k], k))
    assignments: list[int] = [-1] * len(masks)
    decisions = [""] * len(masks)
    new_ids: set[int] = set()
    claimed: set[int] = set()
    for k in order:
        cand = {j: a for j, a in scored[k].items() if j not in claimed}
        f = masks[k][1].vector
        if cand:
            j_star = min(cand, key=lambda j: (-cand[j], j))
            if cand[j_star] > cfg.tau_match:
                assignments[k] = j_star
                decisions[k] = "match"
                claimed.add(j_star)
                bank.update(j_star, f)
                continue
        j_new = allocate_id()
        bank.add(j_new, f)
        claimed.add(j_new)
        new_ids.add(j_new)
        assignments[k] = j_new
        decisions[k] = "new"
    return AssociationResult(assignments, new_ids, rows, decisions)
