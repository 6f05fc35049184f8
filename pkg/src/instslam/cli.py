"""Command-line entry point: ``instslam <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .frontend_io.dump import DumpFormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _floats(text: str, n: int) -> tuple:
    vals = tuple(float(x) for x in text.split(","))
    if len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def cmd_gen_scene(a) -> int:
    from .evaluation import Trajectory, write_tum
    from .frontend_io import NoiseModel, render_synthetic_chunk, save_chunk
    from .frontend_io.scenes import corridor_scene, tabletop_scene
    from .pipeline import chunk_ranges

    noise = NoiseModel(a.depth_sigma, a.embed_sigma, _floats(a.drift, 7), a.latent_jitter)
    if a.scene == "tabletop":
        scene = tabletop_scene(a.seed, a.frames, a.objects, noise)
    else:
        scene = corridor_scene(a.seed, n_frames=a.frames, noise=noise)
    out = Path(a.out)
    ranges = chunk_ranges(len(scene.trajectory), a.chunk_size, a.overlap, a.sample_rate)
    for k, rng in enumerate(ranges):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            chunk, _ = render_synthetic_chunk(scene, rng, k, a.overlap if k else 0)
        save_chunk(chunk, out / f"chunk_{k:04d}")
    idx = list(range(len(scene.trajectory)))
    write_tum(Trajectory(np.array(idx) * scene.frame_dt, scene.trajectory), out / "trajectory_gt.txt")
    print(f"wrote {len(ranges)} chunks to {out}")
    return EXIT_OK


def _cluster_cfg(a):
    from .embed_cluster import ClusterConfig
    try:
        return ClusterConfig(a.epsilon, a.delta, a.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_cluster(a) -> int:
    from .embed_cluster import cluster_embeddings
    from .frontend_io import load_chunk

    cfg = _cluster_cfg(a)
    chunk = load_chunk(a.chunk)
    out = Path(a.out) if a.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    print("frame\tmasks\tsizes")
    for f in chunk.frames:
        masks = cluster_embeddings(f.embedding, f.valid, cfg, f.index)
        print(f"{f.index}\t{len(masks)}\t{','.join(str(len(m)) for m in masks)}")
        if out:
            lab = np.full(f.shape, -1, dtype=np.int32)
            for k, m in enumerate(masks):
                lab.ravel()[m.flat] = k
            np.save(out / f"masks_{f.index:06d}.npy", lab)
    return EXIT_OK


def cmd_associate(a) -> int:
    from .association import AffinityConfig, FeatureBank, associate, project_instances
    from .embed_cluster import DegenerateDescriptorError, cluster_embeddings, pool_and_normalize
    from .frontend_io import load_chunk
    from .instance_map import GlobalInstanceMap, fuse_observation
    from .liegroups import Sim3Transform
    from .pose_graph import align_adjacent_chunks

    try:
        acfg = AffinityConfig(a.alpha, a.beta, a.tau_match)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ccfg = _cluster_cfg(a)
    gmap, bank = GlobalInstanceMap(), FeatureBank()
    prev, state, seen = None, Sim3Transform.identity(), set()
    rows = []
    print("frame\tids")
    for d in a.chunks:
        chunk = load_chunk(d)
        if prev is not None:
            state = state @ align_adjacent_chunks(prev, chunk)
        for f in chunk.frames:
            if f.index in seen:
                continue
            seen.add(f.index)
            pose = state @ f.pose.to_sim3()
            pairs = []
            for m in cluster_embeddings(f.embedding, f.valid, ccfg, f.index):
                try:
                    pairs.append((m, pool_and_normalize(f.embedding, m)))
                except DegenerateDescriptorError:
                    pass
            proj = project_instances(gmap, pose, f.intrinsics, f.depth, acfg.z_tol)
            res = associate(pairs, proj, bank, acfg, gmap.allocate_id)
            for (m, _), iid in zip(pairs, res.assignments):
                fuse_observation(gmap, iid, m, f.depth, pose, f.intrinsics, chunk.chunk_id, f.index)
            rows += [f"{f.index}\t{r.k}\t{r.j}\t{r.s_geo:.6f}\t{r.s_sem:.6f}\t{r.a:.6f}"
                     for r in res.affinity_log]
            print(f"{f.index}\t{','.join(map(str, res.assignments))}")
        prev = chunk
    if a.log:
        Path(a.log).write_text("frame\tmask\tinstance\tiou\tcos\taffinity\n" + "\n".join(rows) + "\n",
                               encoding="utf-8")
    return EXIT_OK


def cmd_loopbench(a) -> int:
    from .benchmark import run_loop_benchmark
    from .embed_cluster import ClusterConfig
    from .frontend_io import NoiseModel
    from .frontend_io.scenes import corridor_scene
    from .loop_closure import LoopConfig

    noise = NoiseModel(a.depth_sigma, a.embed_sigma, latent_jitter=a.latent_jitter)
    scene = corridor_scene(a.seed, n_frames=a.frames, noise=noise)
    cfg = LoopConfig(tau_loop=a.tau_loop, cluster=ClusterConfig(delta=a.delta), seed=a.seed)
    res = run_loop_benchmark(scene, a.stride, a.place_threshold, a.min_gap, cfg)
    print(f"places={len(res.places)} queries={len(res.overlaps)}")
    print(res.table(), end="")
    return EXIT_OK


def cmd_optimize(a) -> int:
    from .pose_graph import RobustKernel, load_graph, optimize, save_graph

    delta = None if a.huber.lower() == "none" else float(a.huber)
    try:
        kernel = RobustKernel(delta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        graph = load_graph(a.graph)
    except (ValueError, IndexError) as exc:
        raise _DataError(f"{a.graph}: {exc}") from exc
    res = optimize(graph, kernel, max_iters=a.max_iters)
    print(f"initial_cost={res.initial_cost:.10g}")
    print(f"final_cost={res.cost:.10g}")
    print(f"iterations={res.iterations}")
    print(f"converged={res.converged}")
    if a.out:
        graph.nodes.update(res.states)
        save_graph(graph, a.out)
    return EXIT_OK


def cmd_eval(a) -> int:
    from .evaluation import ate_rmse, read_tum

    try:
        est, ref = read_tum(a.est), read_tum(a.ref)
    except (ValueError, IndexError) as exc:
        raise _DataError(str(exc)) from exc
    try:
        ate = ate_rmse(est, ref, a.align, a.max_diff)
    except ValueError as exc:
        raise _DataError(str(exc)) from exc
    print(f"ate_rmse={ate:.10g}")
    return EXIT_OK


def cmd_losscheck(a) -> int:
    from .contrastive import Margins, gradient_check, hinge_clearance, random_feature_set

    margins = Margins(a.m_pull, a.m_push)
    worst = {"intra_pull": 0.0, "cross_pull": 0.0, "push": 0.0}
    used = 0
    for s in range(a.seed, a.seed + a.sets):
        lfs = random_feature_set(np.random.default_rng(s))
        if hinge_clearance(lfs, margins) < a.kink_tol:
            continue
        used += 1
        for k, v in gradient_check(lfs, margins).items():
            worst[k] = max(worst[k], v)
    print(f"sets_checked={used}")
    for k, v in worst.items():
        print(f"{k}.max_rel_err={v:.3e}")
    return EXIT_OK if max(worst.values()) < a.tol else EXIT_STAGE


def cmd_run(a) -> int:
    from .evaluation import format_table
    from .pipeline import run

    overrides = list(a.set or [])
    if a.out:
        overrides.append(f"output_dir={a.out}")
    cfg = load_config(a.config, overrides)
    manifest = run(cfg)
    print(format_table(manifest.metrics), end="")
    print(f"chunks={manifest.n_chunks} frames={manifest.n_frames} output={cfg.output_dir}")
    return EXIT_OK


class _DataError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="instslam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="render a synthetic scene to chunk dumps")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--scene", choices=("tabletop", "corridor"), default="tabletop")
    g.add_argument("--frames", type=int, default=48)
    g.add_argument("--objects", type=int, default=6)
    g.add_argument("--chunk-size", type=int, default=12)
    g.add_argument("--overlap", type=int, default=6)
    g.add_argument("--sample-rate", type=int, default=1)
    g.add_argument("--depth-sigma", type=float, default=0.0)
    g.add_argument("--embed-sigma", type=float, default=0.0)
    g.add_argument("--latent-jitter", type=float, default=0.0)
    g.add_argument("--drift", default="0,0,0,0,0,0,0", help="7 comma-separated per-frame tangent values")
    g.set_defaults(func=cmd_gen_scene)

    def cluster_args(q):
        q.add_argument("--epsilon", type=float, default=0.75)
        q.add_argument("--delta", type=int, default=20)
        q.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("cluster", help="segment every frame of a chunk dump")
    c.add_argument("--chunk", required=True)
    c.add_argument("--out", help="directory for per-frame mask label rasters (.npy)")
    cluster_args(c)
    c.set_defaults(func=cmd_cluster)

    s = sub.add_parser("associate", help="track instances through one or more chunk dumps")
    s.add_argument("chunks", nargs="+")
    s.add_argument("--alpha", type=float, default=0.4)
    s.add_argument("--beta", type=float, default=0.6)
    s.add_argument("--tau-match", type=float, default=0.55)
    s.add_argument("--log", help="write the affinity log here (TSV)")
    cluster_args(s)
    s.set_defaults(func=cmd_associate)

    b = sub.add_parser("loopbench", help="overlap-graded retrieval benchmark on the corridor scene")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--frames", type=int, default=80)
    b.add_argument("--stride", type=int, default=4)
    b.add_argument("--place-threshold", type=float, default=0.3)
    b.add_argument("--min-gap", type=int, default=12)
    b.add_argument("--delta", type=int, default=8)
    b.add_argument("--tau-loop", type=int, default=3)
    b.add_argument("--depth-sigma", type=float, default=0.005)
    b.add_argument("--embed-sigma", type=float, default=0.02)
    b.add_argument("--latent-jitter", type=float, default=0.5)
    b.set_defaults(func=cmd_loopbench)

    o = sub.add_parser("optimize", help="optimize a Sim(3) pose graph file")
    o.add_argument("--graph", required=True)
    o.add_argument("--out")
    o.add_argument("--huber", default="0.05", help="Huber knee, or 'none' for plain least squares")
    o.add_argument("--max-iters", type=int, default=100)
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("eval", help="ATE RMSE between two TUM trajectories")
    e.add_argument("--est", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--align", choices=("none", "rigid", "similarity"), default="similarity")
    e.add_argument("--max-diff", type=float, default=0.02)
    e.set_defaults(func=cmd_eval)

    l = sub.add_parser("losscheck", help="finite-difference check of the contrastive losses")
    l.add_argument("--sets", type=int, default=20)
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--m-pull", type=float, default=0.9)
    l.add_argument("--m-push", type=float, default=0.2)
    l.add_argument("--kink-tol", type=float, default=1e-4)
    l.add_argument("--tol", type=float, default=1e-5)
    l.set_defaults(func=cmd_losscheck)

    r = sub.add_parser("run", help="full pipeline run")
    r.add_argument("--config", help="key=value config file")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--out", help="shortcut for --set output_dir=...")
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    from .pipeline import DataError, StageError

    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, _DataError, DumpFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
