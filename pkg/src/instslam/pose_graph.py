"""Chunk-level Sim(3) pose graph with Huber-robustified Levenberg-Marquardt.

Node states map chunk-local coordinates to world.  An edge ``(j, k)`` carries
a measurement ``M`` mapping chunk-``j`` coordinates into chunk-``k``
coordinates; with ``X = W^-1`` (world to chunk) its residual is
``log(M^-1 X_k X_j^-1)``, i.e. ``log(M^-1 W_k^-1 W_j)``, which is unchanged by
a common left transform of all states.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .frontend_io.types import ChunkOutput
from .liegroups import DegenerateGeometryError, Sim3Transform, fit_sim3_umeyama, sim3_exp, sim3_log

__all__ = [
    "DisconnectedGraphError",
    "GraphEdge",
    "OptimizationResult",
    "PoseGraph",
    "RobustKernel",
    "align_adjacent_chunks",
    "apply_corrections",
    "edge_residual",
    "load_graph",
    "optimize",
    "save_graph",
]


class DisconnectedGraphError(ValueError):
    pass


@dataclass(frozen=True)
class RobustKernel:
    """Huber kernel on the squared whitened residual norm.

    ``huber_delta=None`` selects the plain quadratic loss.
    """

    huber_delta: float | None = 0.05

    def __post_init__(self):
        if self.huber_delta is not None and not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")

    def rho(self, s):
        d = self.huber_delta
        s = np.asarray(s, dtype=np.float64)
        if d is None:
            return s
        r = np.sqrt(s)
        return np.where(r <= d, s, 2.0 * d * r - d * d)

    def weight(self, s):
        """Derivative of rho with respect to s (the IRLS weight)."""
        d = self.huber_delta
        s = np.asarray(s, dtype=np.float64)
        if d is None:
            return np.ones_like(s)
        r = np.sqrt(s)
        return np.where(r <= d, 1.0, d / np.maximum(r, 1e-300))


@dataclass(eq=False)
class GraphEdge:
    j: int
    k: int
    measurement: Sim3Transform
    information: np.ndarray = field(default_factory=lambda: np.eye(7))
    kind: str = "odometry"

    def __post_init__(self):
        self.information = np.asarray(self.information, dtype=np.float64)
        if self.j == self.k:
            raise ValueError("edge endpoints must differ")
        if self.kind not in ("odometry", "loop"):
            raise ValueError(f"unknown edge kind {self.kind!r}")
        if self.information.shape != (7, 7) or not np.allclose(self.information, self.information.T):
            raise ValueError(f"edge {self.j}->{self.k}: information must be symmetric 7x7")
        try:
            self._sqrt_info = np.linalg.cholesky(self.information).T
        except np.linalg.LinAlgError:
            raise ValueError(f"edge {self.j}->{self.k}: information is not positive definite") from None

    def whiten(self, e: np.ndarray) -> np.ndarray:
        return self._sqrt_info @ e


@dataclass(eq=False)
class PoseGraph:
    nodes: dict[int, Sim3Transform] = field(default_factory=dict)
    edges: list[GraphEdge] = field(default_factory=list)
    # gauge: defaults to the smallest node id
    fixed: set[int] | None = None

    def add_node(self, chunk_id: int, state: Sim3Transform) -> None:
        self.nodes[chunk_id] = state

    def add_edge(self, edge: GraphEdge) -> None:
        for c in (edge.j, edge.k):
            if c not in self.nodes:
                raise KeyError(f"edge references unknown node {c}")
        self.edges.append(edge)

    def fixed_nodes(self) -> set[int]:
        if self.fixed is not None:
            return set(self.fixed)
        return {min(self.nodes)} if self.nodes else set()

    def copy(self) -> PoseGraph:
        return PoseGraph(dict(self.nodes), list(self.edges),
                         None if self.fixed is None else set(self.fixed))


def edge_residual(edge: GraphEdge, states: dict[int, Sim3Transform]) -> np.ndarray:
    wj, wk = states[edge.j], states[edge.k]
    return sim3_log(edge.measurement.inverse() @ wk.inverse() @ wj)


def _check_connected(graph: PoseGraph) -> None:
    adj: dict[int, set[int]] = {n: set() for n in graph.nodes}
    for e in graph.edges:
        adj[e.j].add(e.k)
        adj[e.k].add(e.j)
    seen = set(graph.fixed_nodes())
    queue = deque(seen)
    while queue:
        n = queue.popleft()
        for m in adj[n] - seen:
            seen.add(m)
            queue.append(m)
    missing = sorted(set(graph.nodes) - seen)
    if missing:
        raise DisconnectedGraphError(f"nodes not connected to the gauge node: {missing}")


@dataclass(eq=False)
class OptimizationResult:
    states: dict[int, Sim3Transform]
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    cost_history: list[float]

    def corrections(self, initial: dict[int, Sim3Transform]) -> dict[int, Sim3Transform]:
        return apply_corrections(initial, self.states)


def _robust_cost(graph, states, kernel) -> float:
    total = 0.0
    for e in graph.edges:
        r = e.whiten(edge_residual(e, states))
        total += float(kernel.rho(r @ r))
    return total


def optimize(graph: PoseGraph, kernel: RobustKernel | None = None, max_iters: int = 100,
             tol: float = 1e-9, lm_lambda: float = 1e-4, fd_step: float = 1e-6,
             step_tol: float = 1e-11) -> OptimizationResult:
    """Minimise the summed robust edge costs over all non-gauge node states.

    States are perturbed on the right, ``W <- W exp(d)``.  Jacobians are
    central finite differences in each endpoint's 7-dim tangent; the Huber
    kernel enters through IRLS weights.  Only steps that do not increase
    the robust cost are accepted.  Iteration stops on a relative cost
    decrease below ``tol`` or a tangent step below ``step_tol``.
    """
    kernel = kernel or RobustKernel()
    _check_connected(graph)
    fixed = graph.fixed_nodes()
    free = [n for n in sorted(graph.nodes) if n not in fixed]
    col = {n: 7 * i for i, n in enumerate(free)}
    dim = 7 * len(free)
    states = dict(graph.nodes)
    cost = _robust_cost(graph, states, kernel)
    history = [cost]
    initial_cost = cost
    lam = lm_lambda
    converged = False
    it = 0
    if dim == 0 or not graph.edges:
        return OptimizationResult(states, cost, cost, 0, True, history)

    eye7 = np.eye(7)
    need_linearize = True
    h = g = None
    while it < max_iters:
        if need_linearize:
            h = np.zeros((dim, dim))
            g = np.zeros(dim)
            for e in graph.edges:
                a = e.measurement.inverse()
                wj, wk = states[e.j], states[e.k]
                b = wk.inverse() @ wj
                r = e.whiten(sim3_log(a @ b))
                w = float(kernel.weight(r @ r))
                blocks = {}
                if e.j in col:
                    jac = np.empty((7, 7))
                    for i in range(7):
                        dp = sim3_log(a @ b @ sim3_exp(fd_step * eye7[i]))
                        dm = sim3_log(a @ b @ sim3_exp(-fd_step * eye7[i]))
                        jac[:, i] = (dp - dm) / (2 * fd_step)
                    blocks[e.j] = e.whiten(jac)
                if e.k in col:
                    jac = np.empty((7, 7))
                    for i in range(7):
                        dp = sim3_log(a @ sim3_exp(-fd_step * eye7[i]) @ b)
                        dm = sim3_log(a @ sim3_exp(fd_step * eye7[i]) @ b)
                        jac[:, i] = (dp - dm) / (2 * fd_step)
                    blocks[e.k] = e.whiten(jac)
                for n1, j1 in blocks.items():
                    g[col[n1]:col[n1] + 7] += w * j1.T @ r
                    for n2, j2 in blocks.items():
                        h[col[n1]:col[n1] + 7, col[n2]:col[n2] + 7] += w * j1.T @ j2
            need_linearize = False
        it += 1
        damped = h + lam * np.diag(np.diag(h) + 1e-12)
        try:
            step = -np.linalg.solve(damped, g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        if np.max(np.abs(step)) < step_tol:
            converged = True
            break
        trial = dict(states)
        for n in free:
            trial[n] = states[n] @ sim3_exp(step[col[n]:col[n] + 7])
        try:
            new_cost = _robust_cost(graph, trial, kernel)
        except ValueError:
            new_cost = math.inf
        if new_cost <= cost:
            rel = (cost - new_cost) / cost if cost > 0 else 0.0
            states, cost = trial, new_cost
            history.append(cost)
            lam = max(lam / 10.0, 1e-12)
            need_linearize = True
            if rel < tol or cost < 1e-28:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e16:
                converged = True
                break
    return OptimizationResult(states, cost, initial_cost, it, converged, history)


def apply_corrections(initial: dict[int, Sim3Transform],
                      optimized: dict[int, Sim3Transform]) -> dict[int, Sim3Transform]:
    """Per-chunk world-frame correction ``optimized_c ∘ initial_c^-1``."""
    return {c: optimized[c] @ initial[c].inverse() for c in optimized}


def _frame_anchor_points(frame) -> np.ndarray:
    """Camera centre plus forward and down axis points at the frame's median depth."""
    valid = frame.depth[frame.depth > 0]
    reach = float(np.median(valid)) if valid.size else 1.0
    c = frame.pose.translation
    r = frame.pose.rotation
    return np.stack([c, c + reach * r[:, 2], c + reach * r[:, 1]])


def align_adjacent_chunks(prev: ChunkOutput, nxt: ChunkOutput, fallback: bool = True
                          ) -> Sim3Transform:
    """Similarity mapping ``nxt`` chunk coordinates into ``prev`` chunk coordinates.

    Fitted on the camera centres of the frames both chunks contain.  If those
    centres are (near) collinear and ``fallback`` is set, each shared frame
    also contributes points along its forward and down axes at its median
    depth, which scale consistently with the chunk.
    """
    prev_by_idx = {f.index: f for f in prev.frames}
    shared = [(prev_by_idx[f.index], f) for f in nxt.frames if f.index in prev_by_idx]
    if len(shared) < 3 and not (fallback and shared):
        raise DegenerateGeometryError(
            f"chunks {prev.chunk_id}/{nxt.chunk_id} share {len(shared)} frames; need 3")
    dst = np.array([p.pose.translation for p, _ in shared])
    src = np.array([n.pose.translation for _, n in shared])
    try:
        if len(shared) < 3:
            raise DegenerateGeometryError("too few shared frames")
        return fit_sim3_umeyama(src, dst, rank_tol=1e-6)
    except DegenerateGeometryError:
        if not fallback:
            raise
    dst = np.concatenate([_frame_anchor_points(p) for p, _ in shared])
    src = np.concatenate([_frame_anchor_points(n) for _, n in shared])
    return fit_sim3_umeyama(src, dst)


# --- text graph format -------------------------------------------------------
#
#   VERTEX_SIM3 <id> tx ty tz rx ry rz log_s
#   FIX <id>
#   EDGE_SIM3 <odometry|loop> <j> <k> tx ty tz rx ry rz log_s I11 I12 .. I77
#
# (rx, ry, rz) is the rotation vector of R, log_s the natural log of the
# scale, and the information matrix is listed as its 28 upper-triangular
# entries row by row.

def _encode(s: Sim3Transform) -> list[float]:
    rv = Rotation.from_matrix(s.rotation).as_rotvec()
    return [*s.translation.tolist(), *rv.tolist(), math.log(s.scale)]


def _decode(vals) -> Sim3Transform:
    v = [float(x) for x in vals]
    return Sim3Transform(Rotation.from_rotvec(v[3:6]).as_matrix(), v[:3], math.exp(v[6]))


def save_graph(graph: PoseGraph, path: str | Path) -> None:
    lines = []
    for n in sorted(graph.nodes):
        lines.append(" ".join(["VERTEX_SIM3", str(n), *map(repr, _encode(graph.nodes[n]))]))
    for n in sorted(graph.fixed_nodes()):
        lines.append(f"FIX {n}")
    iu = np.triu_indices(7)
    for e in graph.edges:
        vals = [*_encode(e.measurement), *e.information[iu].tolist()]
        lines.append(" ".join(["EDGE_SIM3", e.kind, str(e.j), str(e.k), *map(repr, vals)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> PoseGraph:
    graph = PoseGraph()
    fixed = set()
    iu = np.triu_indices(7)
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        parts = ln.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "VERTEX_SIM3":
            graph.add_node(int(parts[1]), _decode(parts[2:9]))
        elif tag == "FIX":
            fixed.add(int(parts[1]))
        elif tag == "EDGE_SIM3":
            kind, j, k = parts[1], int(parts[2]), int(parts[3])
            info = np.zeros((7, 7))
            info[iu] = [float(x) for x in parts[11:39]]
            info = info + np.triu(info, 1).T
            graph.add_edge(GraphEdge(j, k, _decode(parts[4:11]), info, kind))
        else:
            raise ValueError(f"unknown graph record {tag!r}")
    graph.fixed = fixed or None
    return graph
