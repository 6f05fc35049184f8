"""Instance-guided loop closure: candidate retrieval, pair verification,
overlap ground truth and retrieval metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .embed_cluster import ClusterConfig, DegenerateDescriptorError, cluster_embeddings, pool_and_normalize
from .frontend_io.types import ChunkOutput, FrameOutput
from .instance_map import backproject
from .liegroups import DegenerateGeometryError, Sim3Transform, fit_sim3_umeyama

__all__ = [
    "LoopCandidate",
    "LoopConfig",
    "LoopVerification",
    "OverlapResult",
    "build_loop_benchmark",
    "compute_overlap",
    "evaluate_retrieval",
    "global_descriptor",
    "retrieve_candidates",
    "retrieve_global",
    "retrieve_instance",
    "verify_loop",
]


@dataclass(frozen=True)
class LoopConfig:
    radius: float = 3.0
    tau_loop: int = 3
    cos_min: float = 0.8
    r_in: float = 0.10
    # in chunks for the pipeline, in frames for retrieve_candidates callers
    min_temporal_gap: int = 2
    ransac_iters: int = 200
    seed: int = 0
    cluster: ClusterConfig = field(default_factory=ClusterConfig)


class LoopCandidate(NamedTuple):
    query_frame: int
    place_frame: int
    retrieval_distance: float


class Match(NamedTuple):
    query_mask: int
    place_mask: int
    cosine: float
    residual: float


@dataclass(eq=False)
class LoopVerification:
    matches: list[Match]
    consistent_count: int
    accepted: bool
    # query camera -> place camera
    relative_sim3: Sim3Transform | None = None
    # similarity fitted on inlier instance centroids in the shared frame
    alignment: Sim3Transform | None = None
    inliers: list[int] = field(default_factory=list)


class OverlapResult(NamedTuple):
    ratio: float
    covisible_pixels: int


def retrieve_candidates(trajectory, current: int, radius: float, min_temporal_gap: int,
                        keyframes=None) -> list[LoopCandidate]:
    """Keyframes within ``radius`` of frame ``current``'s camera centre.

    Only keyframes at least ``min_temporal_gap`` frames older than ``current``
    qualify.  Results are sorted by distance, then by index.
    """
    centre = np.asarray(trajectory[current].translation)
    pool = range(len(trajectory)) if keyframes is None else keyframes
    out = []
    for k in pool:
        if k > current - min_temporal_gap:
            continue
        d = float(np.linalg.norm(np.asarray(trajectory[k].translation) - centre))
        if d <= radius:
            out.append(LoopCandidate(current, k, d))
    out.sort(key=lambda c: (c.retrieval_distance, c.place_frame))
    return out


def _frame_instances(frame: FrameOutput, cfg: ClusterConfig):
    """Masks, unit descriptors and shared-frame 3D centroids of one frame."""
    masks = cluster_embeddings(frame.embedding, frame.valid, cfg, frame.index)
    descs, cents = [], []
    pose = frame.pose
    for m in masks:
        try:
            d = pool_and_normalize(frame.embedding, m).vector
        except DegenerateDescriptorError:
            continue
        pts, _ = backproject(m, frame.depth, frame.intrinsics)
        if len(pts) == 0:
            continue
        descs.append(d)
        cents.append(pose.apply(pts).mean(axis=0))
    return np.array(descs).reshape(-1, frame.dim), np.array(cents).reshape(-1, 3)


def _mutual_nn(dq: np.ndarray, dp: np.ndarray, cos_min: float) -> list[tuple[int, int, float]]:
    if len(dq) == 0 or len(dp) == 0:
        return []
    sim = dq @ dp.T
    best_p = np.argmax(sim, axis=1)
    best_q = np.argmax(sim, axis=0)
    return [(i, int(j), float(sim[i, j])) for i, j in enumerate(best_p)
            if best_q[j] == i and sim[i, j] > cos_min]


def _ransac_sim3(src: np.ndarray, dst: np.ndarray, r_in: float, iters: int, seed: int):
    n = len(src)
    triples = list(itertools.combinations(range(n), 3))
    if len(triples) > iters:
        rng = np.random.default_rng(seed)
        triples = [tuple(sorted(rng.choice(n, 3, replace=False))) for _ in range(iters)]
    best_inl, best_err = None, np.inf
    for tri in triples:
        try:
            s = fit_sim3_umeyama(src[list(tri)], dst[list(tri)], rank_tol=1e-6)
        except DegenerateGeometryError:
            continue
        res = np.linalg.norm(s.apply(src) - dst, axis=1)
        inl = np.flatnonzero(res < r_in)
        err = float(np.sum(np.minimum(res, r_in)))
        if best_inl is None or len(inl) > len(best_inl) or (len(inl) == len(best_inl) and err < best_err):
            best_inl, best_err = inl, err
    return best_inl


def verify_loop(pair_output: ChunkOutput, cfg: LoopConfig | None = None) -> LoopVerification:
    """Verify a jointly re-inferred ``(place, query)`` frame pair.

    Both frames are clustered, matched by mutual nearest neighbours in
    descriptor space (cosine above ``cos_min``), and the matched instance
    centroids are lifted into the pair's shared frame.  A RANSAC similarity
    over those centroids splits matches into inliers (residual below
    ``r_in``) and outliers; the loop is accepted when the inlier count
    exceeds ``tau_loop``.  The returned relative transform is the query-to-
    place camera motion in the shared frame.
    """
    cfg = cfg or LoopConfig()
    if len(pair_output.frames) != 2:
        raise ValueError("verify_loop expects a two-frame chunk")
    place, query = pair_output.frames
    dp, cp = _frame_instances(place, cfg.cluster)
    dq, cq = _frame_instances(query, cfg.cluster)
    pairs = _mutual_nn(dq, dp, cfg.cos_min)
    if len(pairs) < 3:
        matches = [Match(i, j, c, float("nan")) for i, j, c in pairs]
        return LoopVerification(matches, 0, False)
    src = np.array([cq[i] for i, _, _ in pairs])
    dst = np.array([cp[j] for _, j, _ in pairs])
    inl = _ransac_sim3(src, dst, cfg.r_in, cfg.ransac_iters, cfg.seed)
    if inl is None or len(inl) < 3:
        matches = [Match(i, j, c, float("nan")) for i, j, c in pairs]
        return LoopVerification(matches, 0, False)
    align = fit_sim3_umeyama(src[inl], dst[inl], rank_tol=1e-6)
    res = np.linalg.norm(align.apply(src) - dst, axis=1)
    inliers = [int(k) for k in np.flatnonzero(res < cfg.r_in)]
    matches = [Match(i, j, c, float(r)) for (i, j, c), r in zip(pairs, res)]
    count = len(inliers)
    accepted = count > cfg.tau_loop
    rel = None
    if accepted:
        rel = place.pose.inverse().compose(query.pose).to_sim3()
    return LoopVerification(matches, count, accepted, rel, align, inliers)


def _lift(frame: FrameOutput, pose) -> tuple[np.ndarray, int]:
    d = frame.depth
    valid = d > 0
    r, c = np.nonzero(valid)
    z = d[valid].astype(np.float64)
    k = frame.intrinsics
    cam = np.stack([(c - k.cx) / k.fx * z, (r - k.cy) / k.fy * z, z], axis=1)
    return pose.apply(cam), int(valid.sum())


def compute_overlap(source: FrameOutput, source_pose, target: FrameOutput, target_pose,
                    depth_tol: float = 0.05) -> OverlapResult:
    """Fraction of valid source pixels that re-project consistently into the target.

    Poses map camera to world.  A source pixel counts when its world point
    lies in front of the target camera, lands inside the target image on a
    valid depth reading and agrees with it within ``depth_tol``.
    """
    world, n_valid = _lift(source, source_pose)
    if n_valid == 0:
        raise ValueError("source frame has no valid depth")
    p = target_pose.inverse().apply(world)
    z = p[:, 2]
    front = z > 0
    k = target.intrinsics
    h, w = target.depth.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(k.fx * p[:, 0] / z + k.cx)
        v = np.rint(k.fy * p[:, 1] / z + k.cy)
    inside = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    td = np.zeros(len(z))
    td[inside] = target.depth[v[inside].astype(int), u[inside].astype(int)]
    ok = inside & (td > 0) & (np.abs(z - td) < depth_tol)
    kept = int(ok.sum())
    return OverlapResult(kept / n_valid, kept)


def build_loop_benchmark(frames: list[tuple[FrameOutput, object]], stride: int = 5,
                         place_threshold: float = 0.3, depth_tol: float = 0.05
                         ) -> tuple[list[int], list[int]]:
    """Greedy place/query split over every ``stride``-th frame.

    A frame becomes a place when its maximum overlap with the places chosen
    so far is below ``place_threshold``; otherwise it is a query.  Returns
    indices into ``frames``.
    """
    places: list[int] = []
    queries: list[int] = []
    for i in range(0, len(frames), stride):
        f, pose = frames[i]
        best = max((compute_overlap(f, pose, frames[p][0], frames[p][1], depth_tol).ratio
                    for p in places), default=0.0)
        (places if best < place_threshold else queries).append(i)
    return places, queries


def evaluate_retrieval(results: dict[int, int | None], gt: dict[int, dict[int, float]],
                       tau: float) -> tuple[float, float, float]:
    """Precision, recall@1 and F1 of top-1 retrievals.

    ``gt[q][p]`` is the overlap of query ``q`` with place ``p``; a pair is
    positive when the overlap exceeds ``tau``.  A returned place is a true
    positive when positive, else a false positive.  Queries that have a
    positive place but no correct return are false negatives.
    """
    tp = fp = fn = 0
    for q, overlaps in gt.items():
        ret = results.get(q)
        qualifies = any(o > tau for o in overlaps.values())
        if ret is not None:
            if overlaps.get(ret, 0.0) > tau:
                tp += 1
                continue
            fp += 1
        if qualifies:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def global_descriptor(frame: FrameOutput) -> np.ndarray:
    """Normalised mean of all valid pixel embeddings (baseline descriptor)."""
    e = frame.embedding[frame.valid].astype(np.float64)
    m = e.sum(axis=0) if len(e) else np.zeros(frame.dim)
    n = np.linalg.norm(m)
    return m / n if n > 0 else m


def retrieve_global(query: FrameOutput, places: dict[int, FrameOutput]) -> int | None:
    if not places:
        return None
    q = global_descriptor(query)
    keys = sorted(places)
    scores = [float(global_descriptor(places[k]) @ q) for k in keys]
    return keys[int(np.argmax(scores))]


def retrieve_instance(query: int, places, reinfer: Callable[[int, int], ChunkOutput],
                      cfg: LoopConfig | None = None) -> tuple[int | None, dict[int, LoopVerification]]:
    """Top-1 place by verified instance count; ``None`` when nothing verifies."""
    cfg = cfg or LoopConfig()
    best, best_key = None, None
    checks = {}
    for p in sorted(places):
        ver = verify_loop(reinfer(p, query), cfg)
        checks[p] = ver
        if not ver.accepted:
            continue
        key = (ver.consistent_count, np.mean([m.cosine for m in ver.matches]))
        if best_key is None or key > best_key:
            best, best_key = p, key
    return best, checks
