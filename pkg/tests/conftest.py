import numpy as np
import pytest
from hypothesis import settings

from instslam.frontend_io import Box, NoiseModel, SceneObject, SyntheticScene, look_at, render_synthetic_chunk
from instslam.frontend_io.scenes import default_intrinsics
from instslam.liegroups import Sim3Transform, sim3_exp

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


def random_sim3(rng, max_angle=np.pi - 1e-3, trans=2.0, log_scale=1.0) -> Sim3Transform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * rng.uniform(0.0, max_angle)
    rho = rng.normal(scale=trans, size=3)
    sigma = rng.uniform(-log_scale, log_scale)
    return sim3_exp(np.concatenate([rho, phi, [sigma]]))


def assert_sim3_close(a, b, tol):
    np.testing.assert_allclose(a.rotation, b.rotation, atol=tol)
    np.testing.assert_allclose(a.translation, b.translation, atol=tol)
    assert abs(a.scale - b.scale) <= tol


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criterion number -> (passed, detail); filled by the acceptance suite
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = CRITERIA.get(n, (False, "not run or errored before checking"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def track_frames(frames, affinity, cluster_cfg=None, mask_order_seed=None, voxel=0.02):
    """Run mask extraction, association and fusion over ``frames`` in order.

    Frames carry world poses (chunk-local = world).  With ``cluster_cfg`` None
    the masks come from the oracle ``gt_ids`` rasters, optionally shuffled per
    frame.  Returns (gt id, assigned id) per mask, in frame order.
    """
    from instslam.association import FeatureBank, associate, project_instances
    from instslam.embed_cluster import InstanceMask, cluster_embeddings, pool_and_normalize
    from instslam.instance_map import GlobalInstanceMap, fuse_observation

    gmap = GlobalInstanceMap(voxel)
    bank = FeatureBank()
    out = []
    for f in frames:
        if cluster_cfg is None:
            ids = [i for i in np.unique(f.gt_ids).tolist() if i >= 0]
            masks = [InstanceMask.from_bool(f.gt_ids == i, f.index) for i in ids]
            if mask_order_seed is not None:
                order = np.random.default_rng([mask_order_seed, f.index]).permutation(len(masks))
                masks = [masks[k] for k in order]
        else:
            masks = cluster_embeddings(f.embedding, f.valid, cluster_cfg, f.index)
        pairs = [(m, pool_and_normalize(f.embedding, m)) for m in masks]
        proj = project_instances(gmap, f.pose, f.intrinsics, f.depth, affinity.z_tol)
        res = associate(pairs, proj, bank, affinity, gmap.allocate_id)
        for (m, _), iid in zip(pairs, res.assignments):
            fuse_observation(gmap, iid, m, f.depth, f.pose, f.intrinsics, 0, f.index)
            gt = np.bincount(f.gt_ids.ravel()[m.flat] + 1).argmax() - 1
            out.append((int(gt), iid))
    return out


def id_errors(pairs):
    """Masks whose id differs from the first id given to their gt object,
    plus masks that reuse an id already bound to another gt object."""
    first, owner, errors = {}, {}, 0
    for gt, iid in pairs:
        want = first.setdefault(gt, iid)
        bound = owner.setdefault(iid, gt)
        errors += int(iid != want or bound != gt)
    return errors


def ring_states(n, radius=3.0):
    """Ground-truth chunk states on a horizontal circle, each yawed along it."""
    return [sim3_exp([radius * np.cos(2 * np.pi * i / n), radius * np.sin(2 * np.pi * i / n), 0.0,
                      0.0, 0.0, 2 * np.pi * i / n, 0.0]) for i in range(n)]


def chain_graph(truth, odometry, odo_info=1.0):
    """Pose graph whose states are the chained ``odometry`` measurements from truth[0]."""
    from instslam.pose_graph import GraphEdge, PoseGraph

    g = PoseGraph()
    w = truth[0]
    g.add_node(0, w)
    for i, m in enumerate(odometry):
        w = w @ m.inverse()
        g.add_node(i + 1, w)
        g.add_edge(GraphEdge(i, i + 1, m, odo_info * np.eye(7)))
    return g


def exact_edge(truth, j, k, info=1.0, offset=(0.0, 0.0, 0.0)):
    from instslam.pose_graph import GraphEdge

    m = truth[k].inverse() @ truth[j]
    m = Sim3Transform(m.rotation, m.translation + np.asarray(offset), m.scale)
    return GraphEdge(j, k, m, info * np.eye(7), "loop")


def drift_chain(n=5, drift=(0.05, 0.0, 0.0, 0.0, 0.0, 0.04, 0.02)):
    """Chain with a constant per-edge drift and one exact, inlier-weighted loop 0 -> n-1."""
    truth = ring_states(n)
    d = sim3_exp(drift)
    odo = [d @ (truth[i + 1].inverse() @ truth[i]) for i in range(n - 1)]
    g = chain_graph(truth, odo)
    g.add_edge(exact_edge(truth, 0, n - 1, info=10.0))
    return g, truth


def outlier_graph(seed, with_outlier, sigma=0.02):
    """Five noisy chunks, three exact loops and optionally a loop that is 5 m off.

    Odometry information is 1/0.05^2 (trusted to about 5 cm), loops carry
    the capped inlier weight 10.
    """
    rng = np.random.default_rng(seed)
    truth = ring_states(5)
    odo = [sim3_exp(rng.normal(scale=sigma, size=7)) @ (truth[i + 1].inverse() @ truth[i])
           for i in range(4)]
    g = chain_graph(truth, odo, odo_info=400.0)
    for j, k in [(0, 2), (1, 3), (2, 4)]:
        g.add_edge(exact_edge(truth, j, k, 10.0))
    if with_outlier:
        g.add_edge(exact_edge(truth, 0, 4, 10.0, offset=(5.0, 0.0, 0.0)))
    return g, truth


def state_error(states, truth):
    return float(np.sqrt(np.mean([np.sum((states[i].translation - t.translation) ** 2)
                                  for i, t in enumerate(truth)])))


def gapped_scene(seed, h=32, w=32, d=8, eps=0.75, n_clusters=6):
    """Feature map whose within-cluster pixel cosines all exceed eps + 0.1 and
    cross-cluster cosines all stay below eps - 0.1; a tenth of pixels invalid."""
    rng = np.random.default_rng(seed)
    centres = np.linalg.qr(rng.normal(size=(d, d)))[0][:n_clusters]
    sizes = rng.integers(4, 60, size=n_clusters)
    labels = rng.permutation(np.repeat(np.arange(n_clusters), sizes).tolist()
                             + [-1] * (h * w - int(sizes.sum())))
    feats = np.zeros((h * w, d))
    for k in range(n_clusters):
        idx = np.flatnonzero(labels == k)
        v = centres[k] + rng.normal(scale=0.06, size=(len(idx), d))
        feats[idx] = v / np.linalg.norm(v, axis=1, keepdims=True)
    bg = labels == -1
    v = rng.normal(size=(int(bg.sum()), d))
    feats[bg] = v / np.linalg.norm(v, axis=1, keepdims=True)
    # background pixels are invalid; check the gap condition on valid pixels
    valid = ~bg
    u = feats[valid]
    lab = labels[valid]
    cos = u @ u.T
    same = lab[:, None] == lab[None, :]
    assert cos[same].min() > eps + 0.1 and cos[~same].max() < eps - 0.1
    return feats.reshape(h, w, d), valid.reshape(h, w)


def overlap_oracle(source, source_pose, target, target_pose, depth_tol=0.05):
    """Pixel-by-pixel re-implementation of the overlap ratio."""
    k, kt = source.intrinsics, target.intrinsics
    to_target = target_pose.inverse()
    h, w = target.depth.shape
    kept = valid = 0
    for r in range(source.depth.shape[0]):
        for c in range(source.depth.shape[1]):
            z = float(source.depth[r, c])
            if z <= 0:
                continue
            valid += 1
            cam = np.array([[(c - k.cx) / k.fx * z, (r - k.cy) / k.fy * z, z]])
            x, y, zt = to_target.apply(source_pose.apply(cam))[0]
            if zt <= 0:
                continue
            u = round(kt.fx * x / zt + kt.cx)
            v = round(kt.fy * y / zt + kt.cy)
            if not (0 <= u < w and 0 <= v < h):
                continue
            d = float(target.depth[v, u])
            if d > 0 and abs(zt - d) < depth_tol:
                kept += 1
    return kept / valid, kept


def wall_scene(cams):
    wall = SceneObject(1, Box((-20.0, 3.0, -20.0), (20.0, 3.2, 20.0)), np.eye(8)[0])
    return SyntheticScene([wall], cams, default_intrinsics(), 48, 64, NoiseModel(), 0)


def frames_with_world_poses(scene, idx):
    chunk, gt = render_synthetic_chunk(scene, idx, 0)
    return [(f, gt.world_poses[k]) for k, f in enumerate(chunk.frames)]


def adjacent_duplicates():
    e = np.eye(8)[0]
    objs = [SceneObject(1, Box((-0.3, -0.2, 0.0), (0.0, 0.2, 0.4)), e),
            SceneObject(2, Box((0.0, -0.2, 0.0), (0.3, 0.2, 0.4)), e)]
    traj = [look_at((x, -2.0, 1.0), (0.5 * x, 0.0, 0.2)) for x in np.linspace(-1.0, 1.0, 30)]
    scene = SyntheticScene(objs, traj, default_intrinsics(), 48, 64, NoiseModel(), 0)
    return render_synthetic_chunk(scene, range(30), 0)[0].frames


def brute_force_partition(feats, valid, eps, delta):
    """Connected components of the cosine > eps graph, keeping those above delta pixels."""
    from instslam.embed_cluster import brute_force_clusters

    flat_valid = np.flatnonzero(valid.ravel())
    comps = brute_force_clusters(feats.reshape(-1, feats.shape[-1])[flat_valid], eps)
    return {frozenset(flat_valid[c].tolist()) for c in comps if len(c) > delta}
