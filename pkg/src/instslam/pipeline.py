"""End-to-end runner: chunk stream -> instances -> loops -> optimized map -> metrics."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .association import FeatureBank, associate, project_instances
from .config import ConfigError, PipelineConfig, dump_config
from .embed_cluster import DegenerateDescriptorError, cluster_embeddings, pool_and_normalize
from .evaluation import (SemanticEvalInput, Trajectory, ate_rmse, format_metrics, format_table,
                         report, semantic_metrics, trajectory_alignment, write_tum)
from .frontend_io import (ChunkOutput, NoiseModel, list_chunk_dirs, load_chunk, raycast,
                          render_synthetic_chunk, save_chunk, simulate_reinference)
from .frontend_io.dump import DumpFormatError
from .frontend_io.scenes import CLASS_NAMES, class_embeddings, tabletop_scene
from .instance_map import (GlobalInstanceMap, LabelSet, assign_labels, export_ply, fuse_observation,
                           retag_on_loop, save_map)
from .liegroups import Sim3Transform
from .loop_closure import (LoopVerification, compute_overlap, evaluate_retrieval,
                           retrieve_candidates, verify_loop)
from .pose_graph import (GraphEdge, PoseGraph, align_adjacent_chunks, apply_corrections, optimize,
                         save_graph)

log = logging.getLogger(__name__)

TAU_BINS = (0.1, 0.2, 0.3, 0.4, 0.5)
MAX_LOOP_WEIGHT = 10


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and chunk/frame id."""

    def __init__(self, stage: str, where: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed at {where}: {cause}")
        self.stage = stage
        self.where = where


class DataError(RuntimeError):
    pass


@dataclass
class RunManifest:
    config: str
    timing: dict
    timing_per_chunk: dict
    timing_per_frame: dict
    outputs: dict
    seeds: dict
    metrics: dict
    n_chunks: int = 0
    n_frames: int = 0
    accepted_loops: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config, "timing": self.timing,
            "timing_per_chunk": self.timing_per_chunk, "timing_per_frame": self.timing_per_frame,
            "outputs": self.outputs, "seeds": self.seeds, "n_chunks": self.n_chunks,
            "n_frames": self.n_frames, "accepted_loops": self.accepted_loops,
        }, indent=2, sort_keys=True)


def chunk_ranges(n_frames: int, size: int, overlap: int, sample_rate: int = 1) -> list[list[int]]:
    """Frame indices of each chunk after temporal subsampling."""
    kept = list(range(0, n_frames, sample_rate))
    if not kept:
        return []
    step = size - overlap
    out, s = [], 0
    while True:
        out.append(kept[s:s + size])
        if s + size >= len(kept):
            break
        s += step
    return out


def expected_chunk_count(n_frames: int, size: int, overlap: int, sample_rate: int = 1) -> int:
    m = math.ceil(n_frames / sample_rate)
    if m <= size:
        return 1
    return math.ceil((m - overlap) / (size - overlap))


# --- input sources -----------------------------------------------------------

class SyntheticSource:
    """Chunks rendered on demand from a seeded synthetic scene."""

    def __init__(self, cfg: PipelineConfig):
        sc = cfg.scene
        if sc.kind != "tabletop":
            raise ConfigError(f"unknown scene.kind {sc.kind!r}")
        if len(sc.drift) != 7:
            raise ConfigError("scene.drift needs 7 comma-separated values")
        noise = NoiseModel(sc.depth_sigma, sc.embed_sigma, tuple(sc.drift))
        self.scene = tabletop_scene(sc.seed, sc.n_frames, sc.n_objects, noise,
                                    sweep=2 * np.pi * sc.sweep_turns,
                                    chunk_scale_jitter=sc.scale_jitter)
        self.ranges = chunk_ranges(sc.n_frames, cfg.chunk_size, cfg.chunk_overlap, cfg.sample_rate)
        self.overlap = cfg.chunk_overlap
        emb = class_embeddings(sc.seed)
        self.labels = LabelSet(list(CLASS_NAMES), np.array([emb[c] for c in CLASS_NAMES]))

    def chunks(self):
        for k, rng in enumerate(self.ranges):
            chunk, _ = render_synthetic_chunk(self.scene, rng, k, self.overlap if k else 0)
            yield chunk

    def reinfer(self, place: int, query: int) -> ChunkOutput | None:
        return simulate_reinference((place, query), self.scene)

    def reference(self, indices: list[int], stamps: np.ndarray) -> Trajectory:
        return Trajectory(stamps, [self.scene.trajectory[i] for i in indices])

    def gt_cloud(self, indices: list[int], voxel: float) -> tuple[np.ndarray, list[str]]:
        """Noise-free labelled surface seen by the processed frames, voxel-thinned."""
        s = self.scene
        pts, labs = [], []
        k = s.intrinsics
        r, c = np.mgrid[0:s.height, 0:s.width]
        for i in indices:
            depth, idx = raycast(s.objects, s.trajectory[i], k, s.height, s.width)
            hit = idx >= 0
            z = depth[hit]
            cam = np.stack([(c[hit] - k.cx) / k.fx * z, (r[hit] - k.cy) / k.fy * z, z], axis=1)
            pts.append(s.trajectory[i].apply(cam))
            labs.append(idx[hit])
        p = np.concatenate(pts)
        o = np.concatenate(labs)
        _, first = np.unique(np.floor(p / voxel).astype(np.int64), axis=0, return_index=True)
        first = np.sort(first)
        return p[first], [s.objects[j].label for j in o[first].tolist()]


class DumpSource:
    """Chunks and optional re-inferred pairs read from dump directories."""

    def __init__(self, cfg: PipelineConfig):
        root = Path(cfg.input_chunks)
        if not root.is_dir():
            raise DataError(f"input_chunks {root} is not a directory")
        self.dirs = list_chunk_dirs(root)
        if not self.dirs:
            raise DataError(f"no chunk dumps under {root}")
        self.pairs = Path(cfg.input_pairs) if cfg.input_pairs else None
        self.gt_path = Path(cfg.input_gt) if cfg.input_gt else None
        self.labels = None

    def chunks(self):
        for d in self.dirs:
            try:
                yield load_chunk(d)
            except DumpFormatError as exc:
                raise DataError(f"{d}: {exc}") from exc

    def reinfer(self, place: int, query: int) -> ChunkOutput | None:
        if self.pairs is None:
            return None
        p = self.pairs / f"{place}_{query}"
        return load_chunk(p) if p.is_dir() else None

    def reference(self, indices, stamps) -> Trajectory | None:
        if self.gt_path is None:
            return None
        from .evaluation import read_tum
        return read_tum(self.gt_path)

    def gt_cloud(self, indices, voxel):
        return None


# --- the run -----------------------------------------------------------------

@dataclass
class _Keyframe:
    index: int
    chunk: int
    frame: object


class _Timer:
    def __init__(self):
        self.total = defaultdict(float)
        self.per_chunk = defaultdict(lambda: defaultdict(float))

    def add(self, stage, chunk, dt):
        self.total[stage] += dt
        self.per_chunk[chunk][stage] += dt


def _median_depth_ratio(num, den) -> float:
    ok = (num > 0) & (den > 0)
    if not ok.any():
        raise ValueError("no common valid depth")
    return float(np.median(num[ok].astype(np.float64) / den[ok].astype(np.float64)))


def loop_edge_measurement(place_local, place_depth, query_local, query_depth,
                          pair: ChunkOutput, ver: LoopVerification) -> Sim3Transform:
    """Similarity taking place-chunk coordinates to query-chunk coordinates.

    ``*_local`` are the keyframes' chunk-local poses and ``*_depth`` their
    chunk-unit depth maps.  The pair's own units are tied to each chunk by
    the median depth ratio over commonly valid pixels.
    """
    pf, qf = pair.frames
    c_a = place_local.to_sim3().compose(
        Sim3Transform(np.eye(3), np.zeros(3), _median_depth_ratio(place_depth, pf.depth)))
    c_b = query_local.to_sim3().compose(
        Sim3Transform(np.eye(3), np.zeros(3), _median_depth_ratio(query_depth, qf.depth)))
    return c_b @ ver.relative_sim3.inverse() @ c_a.inverse()


def _stage(name, where, timer, chunk, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kw)
    except (ConfigError, DataError):
        raise
    except Exception as exc:
        raise StageError(name, where, exc) from exc
    finally:
        timer.add(name, chunk, time.perf_counter() - t0)


def run(cfg: PipelineConfig, write_dumps: bool = True) -> RunManifest:
    """Execute every stage in order and write artifacts under ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = DumpSource(cfg) if cfg.input_chunks else SyntheticSource(cfg)
    timer = _Timer()

    gmap = GlobalInstanceMap(voxel_size=cfg.voxel_size)
    bank = FeatureBank()
    graph = PoseGraph()
    odo: dict[int, Sim3Transform] = {}
    states: dict[int, Sim3Transform] = {}
    locals_: dict[int, tuple[int, object, float]] = {}
    keyframes: dict[int, _Keyframe] = {}
    assoc_rows, loop_rows = [], []
    loop_results: dict[int, int | None] = {}
    loop_gt: dict[int, dict[int, float]] = {}
    accepted = []
    prev: ChunkOutput | None = None
    n_chunks = 0

    def allocate():
        i = gmap.allocate_id()
        bank.next_id = max(bank.next_id, gmap.next_id)
        return i

    chunk_iter = source.chunks()
    while True:
        t0 = time.perf_counter()
        try:
            chunk = next(chunk_iter)
        except StopIteration:
            break
        except (ConfigError, DataError):
            raise
        except Exception as exc:
            raise StageError("inference-ingest", f"chunk {n_chunks}", exc) from exc
        cid = chunk.chunk_id
        timer.add("inference-ingest", cid, time.perf_counter() - t0)
        if write_dumps and isinstance(source, SyntheticSource):
            save_chunk(chunk, out / "chunks" / f"chunk_{cid:04d}")
        n_chunks += 1

        if prev is None:
            states[cid] = Sim3Transform.identity()
            odo[cid] = Sim3Transform.identity()
            graph.add_node(cid, states[cid])
        else:
            rel = _stage("chunk align.", f"chunk {cid}", timer, cid, align_adjacent_chunks, prev, chunk)
            states[cid] = states[prev.chunk_id] @ rel
            odo[cid] = odo[prev.chunk_id] @ rel
            graph.add_node(cid, states[cid])
            graph.add_edge(GraphEdge(prev.chunk_id, cid, rel.inverse(), kind="odometry"))

        seen_before = set(prev.frame_indices) if prev is not None else set()
        new_frames = [f for f in chunk.frames if f.index not in seen_before]
        last_index = chunk.frames[-1].index
        for f in new_frames:
            where = f"chunk {cid} frame {f.index}"
            masks = _stage("mask seg.", where, timer, cid, cluster_embeddings,
                           f.embedding, f.valid, cfg.cluster, f.index)
            t1 = time.perf_counter()
            try:
                world_pose = states[cid] @ f.pose.to_sim3()
                pairs = []
                for m in masks:
                    try:
                        pairs.append((m, pool_and_normalize(f.embedding, m)))
                    except DegenerateDescriptorError:
                        continue
                proj = project_instances(gmap, world_pose, f.intrinsics, f.depth, cfg.affinity.z_tol)
                res = associate(pairs, proj, bank, cfg.affinity, allocate)
                for (m, _), iid, dec in zip(pairs, res.assignments, res.decisions):
                    sem = None
                    if f.lang is not None:
                        try:
                            sem = pool_and_normalize(f.lang, m).vector
                        except DegenerateDescriptorError:
                            sem = None
                    fuse_observation(gmap, iid, m, f.depth, world_pose, f.intrinsics, cid,
                                     f.index, sem, f.gt_ids)
                    assoc_rows.append(f"{f.index}\t{iid}\t{dec}\t{len(m)}")
                for row in res.affinity_log:
                    assoc_rows.append(f"{f.index}\t#{row.k}\t{row.j}\t{row.s_geo:.6f}\t{row.s_sem:.6f}\t{row.a:.6f}")
            except Exception as exc:
                raise StageError("inst. assoc.", where, exc) from exc
            finally:
                timer.add("inst. assoc.", cid, time.perf_counter() - t1)
            locals_[f.index] = (cid, f.pose, f.timestamp)
            if f.index == last_index or (len(locals_) - 1) % cfg.keyframe_every == 0:
                keyframes[f.index] = _Keyframe(f.index, cid, f)

        # loop detection for this chunk's new keyframes
        t2 = time.perf_counter()
        new_loops = []
        try:
            for f in new_frames:
                if f.index not in keyframes:
                    continue
                pool = [k for k, kf in keyframes.items()
                        if kf.chunk <= cid - cfg.loop.min_temporal_gap]
                if not pool:
                    continue
                traj = {k: (states[keyframes[k].chunk] @ keyframes[k].frame.pose.to_sim3())
                        for k in pool + [f.index]}
                cands = retrieve_candidates(traj, f.index, cfg.loop.radius, 0, pool)
                cands = cands[:cfg.max_loop_candidates]
                if not cands:
                    continue
                loop_results[f.index] = None
                loop_gt[f.index] = {}
                for cand in cands:
                    pair = source.reinfer(cand.place_frame, f.index)
                    if pair is None:
                        continue
                    pf, qf = pair.frames
                    loop_gt[f.index][cand.place_frame] = compute_overlap(
                        qf, qf.pose, pf, pf.pose).ratio
                    ver = verify_loop(pair, cfg.loop)
                    loop_rows.append(f"{cand.place_frame}\t{f.index}\t{cand.retrieval_distance:.6f}\t"
                                     f"{len(ver.matches)}\t{ver.consistent_count}\t{int(ver.accepted)}")
                    if ver.accepted and loop_results[f.index] is None:
                        kp = keyframes[cand.place_frame]
                        meas = loop_edge_measurement(kp.frame.pose, kp.frame.depth, f.pose, f.depth,
                                                     pair, ver)
                        w = min(ver.consistent_count, MAX_LOOP_WEIGHT)
                        edge = GraphEdge(kp.chunk, cid, meas, w * np.eye(7), kind="loop")
                        graph.add_edge(edge)
                        loop_results[f.index] = cand.place_frame
                        new_loops.append(edge)
                        accepted.append([cand.place_frame, f.index, kp.chunk, cid, ver.consistent_count])
        except Exception as exc:
            raise StageError("loop det.", f"chunk {cid}", exc) from exc
        finally:
            timer.add("loop det.", cid, time.perf_counter() - t2)

        if new_loops and cfg.loop_mode == "per_loop":
            _stage("loop opt.", f"chunk {cid}", timer, cid, _optimize_and_retag, graph, states, gmap,
                   cfg)
        prev = chunk

    if n_chunks == 0:
        raise DataError("no chunks to process")
    if cfg.loop_mode == "batch" and accepted:
        _stage("loop opt.", "end of stream", timer, prev.chunk_id, _optimize_and_retag, graph,
               states, gmap, cfg)

    for iid, proto in bank.prototypes.items():
        if iid in gmap.instances:
            gmap.instances[iid].prototype = proto.copy()
    manifest = _evaluate_and_write(cfg, out, source, gmap, graph, odo, states, locals_, timer,
                                   assoc_rows, loop_rows, loop_results, loop_gt, accepted)
    manifest.n_chunks = n_chunks
    manifest.accepted_loops = accepted
    (out / "manifest.json").write_text(manifest.to_json() + "\n", encoding="utf-8")
    return manifest


def _optimize_and_retag(graph: PoseGraph, states: dict, gmap: GlobalInstanceMap, cfg) -> None:
    for c, s in states.items():
        graph.nodes[c] = s
    initial = dict(graph.nodes)
    res = optimize(graph, cfg.kernel)
    corr = apply_corrections(initial, res.states)
    retag_on_loop(gmap, corr)
    states.update(res.states)
    graph.nodes.update(res.states)


def _trajectory(locals_, states) -> tuple[list[int], Trajectory]:
    idx = sorted(locals_)
    poses = []
    for i in idx:
        cid, pose, _ = locals_[i]
        w = states[cid] @ pose.to_sim3()
        poses.append(w)
    stamps = np.array([locals_[i][2] for i in idx])
    return idx, Trajectory(stamps, poses)


def _centroid_error(gmap: GlobalInstanceMap, align: Sim3Transform, scene) -> float | None:
    errs = []
    for inst in gmap:
        gid = inst.majority_gt()
        if gid is None or len(inst.points) == 0:
            continue
        truth = scene.object_by_id(gid).primitive.centroid
        errs.append(float(np.linalg.norm(align.apply(inst.centroid()[None])[0] - truth)))
    return float(np.mean(errs)) if errs else None


def _evaluate_and_write(cfg, out, source, gmap, graph, odo, states, locals_, timer, assoc_rows,
                        loop_rows, loop_results, loop_gt, accepted) -> RunManifest:
    idx, est = _trajectory(locals_, states)
    _, est_odo = _trajectory(locals_, odo)
    artifacts: dict = {"ate": {}, "loops": {"candidates": len(loop_rows), "accepted": len(accepted),
                                            "edges": len(graph.edges), "instances": len(gmap)}}
    ref = source.reference(idx, est.stamps)
    if ref is not None:
        artifacts["ate"]["pre_opt"] = ate_rmse(est_odo, ref)
        artifacts["ate"]["post_opt"] = ate_rmse(est, ref)
        align_post, _, _ = trajectory_alignment(est, ref)
        align_pre, _, _ = trajectory_alignment(est_odo, ref)
        if isinstance(source, SyntheticSource):
            before = GlobalInstanceMap(gmap.voxel_size, {}, gmap.next_id)
            for inst in gmap:
                b = before.ensure(inst.id)
                b.points, b.chunks, b.gt_votes = inst.points.copy(), inst.chunks.copy(), inst.gt_votes
            retag_on_loop(before, {c: odo[c] @ states[c].inverse() for c in states})
            e_pre = _centroid_error(before, align_pre, source.scene)
            e_post = _centroid_error(gmap, align_post, source.scene)
            if e_pre is not None:
                artifacts["loops"]["centroid_err_pre"] = e_pre
                artifacts["loops"]["centroid_err_post"] = e_post
            gt = source.gt_cloud(idx, cfg.voxel_size)
            if source.labels is not None and gt is not None and len(gmap):
                labels = assign_labels(gmap, source.labels)
                pts, labs = [], []
                for inst in gmap:
                    if len(inst.points) == 0:
                        continue
                    pts.append(align_post.apply(inst.points))
                    labs += [labels[inst.id].name] * len(inst.points)
                artifacts["semantic"] = semantic_metrics(SemanticEvalInput(
                    np.concatenate(pts), labs, gt[0], gt[1], list(CLASS_NAMES), cfg.match_radius))
    loop_gt = {q: g for q, g in loop_gt.items() if g}
    if loop_gt:
        artifacts["loop"] = {t: evaluate_retrieval(loop_results, loop_gt, t) for t in TAU_BINS}
    bundle = report(artifacts)
    timing = dict(timer.total)

    (out / "metrics.txt").write_text(format_metrics(bundle), encoding="utf-8")
    (out / "report.txt").write_text(format_table(bundle), encoding="utf-8")
    tb = report({"timing": timing})["timing"]
    n_frames = len(locals_)
    n_chunks = len(states)
    per_chunk = {k: v / n_chunks for k, v in tb.items()}
    per_frame = {k: v / max(n_frames, 1) for k, v in tb.items()}
    rows = ["stage\ttotal\tper_chunk\tper_frame"]
    rows += [f"{k}\t{tb[k]:.6f}\t{per_chunk[k]:.6f}\t{per_frame[k]:.6f}" for k in tb]
    (out / "timing.txt").write_text("\n".join(rows) + "\n", encoding="utf-8")

    write_tum(_as_se3_traj(est), out / "trajectory_est.txt")
    write_tum(_as_se3_traj(est_odo), out / "trajectory_odometry.txt")
    if ref is not None:
        write_tum(ref, out / "trajectory_ref.txt")
    save_map(gmap, out / "map.bin")
    export_ply(gmap, out / "map.ply")
    save_graph(graph, out / "graph.g2o")
    (out / "associations.tsv").write_text("\n".join(assoc_rows) + "\n", encoding="utf-8")
    (out / "loops.tsv").write_text(
        "place\tquery\tdistance\tmatches\tconsistent\taccepted\n" + "\n".join(loop_rows) + "\n",
        encoding="utf-8")
    # the output location lives in the manifest so that reruns elsewhere stay byte-identical
    (out / "config.txt").write_text(dump_config(cfg, exclude=("output_dir",)), encoding="utf-8")
    outputs = {p.name: str(p) for p in sorted(out.iterdir()) if p.is_file()}
    seeds = {"scene": cfg.scene.seed, "cluster": cfg.cluster.seed, "loop": cfg.loop.seed}
    return RunManifest(dump_config(cfg), tb, per_chunk, per_frame, outputs, seeds, bundle,
                       n_frames=n_frames)


def _as_se3_traj(traj: Trajectory) -> Trajectory:
    from .liegroups import SE3Pose
    return Trajectory(traj.stamps, [SE3Pose(p.rotation, p.translation) for p in traj.poses])
