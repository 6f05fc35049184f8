"""Trajectory, semantic-mapping and report metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .liegroups import SE3Pose, Sim3Transform, fit_sim3_umeyama

__all__ = [
    "SemanticEvalInput",
    "SemanticScores",
    "Trajectory",
    "associate_stamps",
    "ate_rmse",
    "read_tum",
    "report",
    "semantic_metrics",
    "trajectory_alignment",
    "write_tum",
]

UNMATCHED = "__unmatched__"
STAGES = ("inference-ingest", "mask seg.", "inst. assoc.", "chunk align.", "loop det.", "loop opt.")


@dataclass(eq=False)
class Trajectory:
    stamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=np.float64)
        if len(self.stamps) != len(self.poses):
            raise ValueError("one pose per stamp")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("stamps must be strictly increasing")

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.stamps)


def read_tum(path: str | Path) -> Trajectory:
    stamps, poses = [], []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        v = [float(x) for x in ln.split()]
        stamps.append(v[0])
        poses.append(SE3Pose(Rotation.from_quat(v[4:8]).as_matrix(), v[1:4]))
    return Trajectory(np.array(stamps), poses)


def write_tum(traj: Trajectory, path: str | Path) -> None:
    rows = []
    for t, p in zip(traj.stamps, traj.poses):
        q = Rotation.from_matrix(p.rotation).as_quat()
        rows.append(" ".join(f"{x:.9f}" for x in [t, *p.translation, *q]))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def associate_stamps(a: np.ndarray, b: np.ndarray, max_diff: float = 0.02) -> list[tuple[int, int]]:
    """Nearest-stamp pairs (i, j) with ``|a_i - b_j| <= max_diff``, each j used once."""
    pairs, used = [], set()
    for i, t in enumerate(a):
        j = int(np.argmin(np.abs(b - t)))
        if abs(b[j] - t) <= max_diff and j not in used:
            used.add(j)
            pairs.append((i, j))
    return pairs


def trajectory_alignment(estimated: Trajectory, reference: Trajectory, alignment: str = "similarity",
                         max_diff: float = 0.02) -> tuple[Sim3Transform, np.ndarray, np.ndarray]:
    """Alignment mapping estimated onto reference, plus the associated positions."""
    pairs = associate_stamps(estimated.stamps, reference.stamps, max_diff)
    if len(pairs) < 2:
        raise ValueError(f"only {len(pairs)} associated stamps; need at least 2")
    est = estimated.positions()[[i for i, _ in pairs]]
    ref = reference.positions()[[j for _, j in pairs]]
    if alignment == "none":
        s = Sim3Transform.identity()
    elif alignment in ("rigid", "similarity"):
        s = fit_sim3_umeyama(est, ref, with_scale=alignment == "similarity")
    else:
        raise ValueError(f"unknown alignment {alignment!r}")
    return s, est, ref


def ate_rmse(estimated: Trajectory, reference: Trajectory, alignment: str = "similarity",
             max_diff: float = 0.02) -> float:
    """RMSE of translational error after optional rigid/similarity alignment."""
    s, est, ref = trajectory_alignment(estimated, reference, alignment, max_diff)
    err = s.apply(est) - ref
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


@dataclass(eq=False)
class SemanticEvalInput:
    pred_points: np.ndarray
    pred_labels: list[str]
    gt_points: np.ndarray
    gt_labels: list[str]
    classes: list[str]
    match_radius: float = 0.05


@dataclass(frozen=True)
class SemanticScores:
    miou: float
    macc: float
    f_miou: float
    f_acc: float
    per_class_iou: dict = field(default_factory=dict, compare=False)
    per_class_acc: dict = field(default_factory=dict, compare=False)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.miou, self.macc, self.f_miou, self.f_acc


def transfer_labels(inp: SemanticEvalInput) -> list[str]:
    """Predicted label for each gt point from its nearest prediction in range."""
    n = len(inp.gt_points)
    if len(inp.pred_points) == 0:
        return [UNMATCHED] * n
    tree = cKDTree(np.asarray(inp.pred_points, dtype=np.float64))
    dist, idx = tree.query(np.asarray(inp.gt_points, dtype=np.float64))
    return [inp.pred_labels[i] if d <= inp.match_radius else UNMATCHED
            for d, i in zip(dist.tolist(), idx.tolist())]


def semantic_metrics(inp: SemanticEvalInput) -> SemanticScores:
    """mIoU, mAcc and their gt-frequency-weighted variants.

    Averages run over classes present in the ground truth; gt points with no
    prediction within ``match_radius`` count as wrong for every class.
    """
    if len(inp.gt_points) == 0:
        raise ValueError("ground truth is empty")
    pred = np.array(transfer_labels(inp), dtype=object)
    gt = np.array(inp.gt_labels, dtype=object)
    present = [c for c in inp.classes if np.any(gt == c)]
    ious, accs, freqs = {}, {}, {}
    for c in present:
        tp = int(np.sum((gt == c) & (pred == c)))
        fn = int(np.sum((gt == c) & (pred != c)))
        fp = int(np.sum((gt != c) & (pred == c)))
        ious[c] = tp / (tp + fp + fn)
        accs[c] = tp / (tp + fn)
        freqs[c] = tp + fn
    w = np.array([freqs[c] for c in present], dtype=np.float64)
    w /= w.sum()
    iou_v = np.array([ious[c] for c in present])
    acc_v = np.array([accs[c] for c in present])
    return SemanticScores(float(iou_v.mean()), float(acc_v.mean()), float(w @ iou_v),
                          float(w @ acc_v), ious, accs)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def report(artifacts: dict | None) -> dict:
    """Collect run artifacts into a metrics bundle.

    Recognised keys: ``ate`` (name -> metres), ``semantic``
    (:class:`SemanticScores`), ``loop`` (tau -> (precision, recall, f1)),
    ``loops`` (summary counts) and ``timing`` (stage -> seconds).  Missing
    sections are reported empty.
    """
    artifacts = artifacts or {}
    bundle: dict = {"ate": dict(artifacts.get("ate", {})), "semantic": {}, "loop": {},
                    "loops": dict(artifacts.get("loops", {})), "timing": {}}
    sem = artifacts.get("semantic")
    if sem is not None:
        bundle["semantic"] = {"mIoU": sem.miou, "mAcc": sem.macc, "f-mIoU": sem.f_miou,
                              "f-Acc": sem.f_acc}
    for tau, (p, r, f1) in sorted(artifacts.get("loop", {}).items()):
        bundle["loop"][float(tau)] = {"precision": p, "recall@1": r, "f1": f1}
    timing = artifacts.get("timing", {})
    for stage in STAGES:
        if stage in timing:
            t = float(timing[stage])
            if t < 0:
                raise ValueError(f"negative time for stage {stage!r}")
            bundle["timing"][stage] = t
    if bundle["timing"]:
        bundle["timing"]["total"] = float(sum(bundle["timing"].values()))
    return bundle


def format_metrics(bundle: dict, include_timing: bool = False) -> str:
    """Machine-readable ``key=value`` lines, sorted within each section."""
    lines = []
    for k, v in sorted(bundle["ate"].items()):
        lines.append(f"ate.{k}={_fmt(v)}")
    for k, v in bundle["semantic"].items():
        lines.append(f"semantic.{k}={_fmt(v)}")
    for tau, vals in sorted(bundle["loop"].items()):
        for k, v in vals.items():
            lines.append(f"loop.tau{tau:.1f}.{k}={_fmt(v)}")
    for k, v in sorted(bundle["loops"].items()):
        lines.append(f"loops.{k}={_fmt(v)}")
    if include_timing:
        for k, v in bundle["timing"].items():
            lines.append(f"timing.{k}={_fmt(v)}")
    return "\n".join(lines) + ("\n" if lines else "")


def format_table(bundle: dict) -> str:
    """Human-readable summary of a metrics bundle."""
    out = []
    if bundle["ate"]:
        out.append("ATE RMSE [m]")
        out += [f"  {k:<24} {v:10.6f}" for k, v in sorted(bundle["ate"].items())]
    if bundle["semantic"]:
        out.append("Semantic")
        out += [f"  {k:<24} {v:10.4f}" for k, v in bundle["semantic"].items()]
    if bundle["loop"]:
        out.append("Loop retrieval   tau  precision  recall@1     f1")
        for tau, v in sorted(bundle["loop"].items()):
            out.append(f"               {tau:5.2f}  {v['precision']:9.3f}  {v['recall@1']:8.3f}  {v['f1']:5.3f}")
    if bundle["timing"]:
        out.append("Timing [s]")
        out += [f"  {k:<24} {v:10.4f}" for k, v in bundle["timing"].items()]
    return "\n".join(out) + "\n"
