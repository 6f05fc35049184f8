"""Pipeline configuration: a flat ``key=value`` file mapped onto dataclasses.

Recognised keys (defaults in parentheses)::

    chunk_size (120)            frames per chunk
    chunk_overlap (60)          frames shared by consecutive chunks
    sample_rate (1)             keep every k-th input frame
    keyframe_every (10)         keyframe stride (chunk-final frames are always keyframes)
    voxel_size (0.02)           map voxel pitch
    loop_mode (per_loop)        per_loop | batch
    max_loop_candidates (3)     candidates verified per query keyframe
    output_dir (run)            run directory
    input_chunks ()             directory of chunk dumps; empty selects the synthetic scene
    input_pairs ()              directory of re-inferred pair dumps named <place>_<query>
    input_gt ()                 TUM reference trajectory for dump input
    match_radius (0.05)         semantic evaluation radius
    cluster.epsilon (0.75)  cluster.delta (20)  cluster.seed (0)
    affinity.alpha (0.4)  affinity.beta (0.6)  affinity.tau_match (0.55)  affinity.z_tol (0.05)
    loop.radius (3.0)  loop.tau_loop (3)  loop.cos_min (0.8)  loop.r_in (0.1)
    loop.min_temporal_gap (2)  loop.seed (0)  loop.ransac_iters (200)
    kernel.huber_delta (0.05)
    scene.kind (tabletop)  scene.seed (0)  scene.n_frames (60)  scene.n_objects (6)
    scene.depth_sigma (0)  scene.embed_sigma (0)  scene.drift (0,0,0,0,0,0,0)
    scene.scale_jitter (0)  scene.sweep_turns (1.0)

Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .association import AffinityConfig
from .embed_cluster import ClusterConfig
from .loop_closure import LoopConfig
from .pose_graph import RobustKernel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    kind: str = "tabletop"
    seed: int = 0
    n_frames: int = 60
    n_objects: int = 6
    depth_sigma: float = 0.0
    embed_sigma: float = 0.0
    drift: tuple = (0.0,) * 7
    scale_jitter: float = 0.0
    sweep_turns: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    chunk_size: int = 120
    chunk_overlap: int = 60
    sample_rate: int = 1
    keyframe_every: int = 10
    voxel_size: float = 0.02
    loop_mode: str = "per_loop"
    max_loop_candidates: int = 3
    output_dir: str = "run"
    input_chunks: str = ""
    input_pairs: str = ""
    input_gt: str = ""
    match_radius: float = 0.05
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    kernel: RobustKernel = field(default_factory=RobustKernel)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if not 0 <= self.chunk_overlap < self.chunk_size:
            raise ConfigError("chunk_overlap must be smaller than chunk_size")
        if self.sample_rate < 1:
            raise ConfigError("sample_rate must be >= 1")
        if self.loop_mode not in ("per_loop", "batch"):
            raise ConfigError("loop_mode must be per_loop or batch")
        if self.keyframe_every < 1:
            raise ConfigError("keyframe_every must be >= 1")


_SECTIONS = {"cluster", "affinity", "loop", "kernel", "scene"}


def _coerce(current, raw: str, key: str):
    try:
        if isinstance(current, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float) or current is None:
            return None if raw.lower() == "none" else float(raw)
        if isinstance(current, tuple):
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply_overrides(cfg: PipelineConfig, pairs: dict[str, str]) -> PipelineConfig:
    top: dict = {}
    nested: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, raw in pairs.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown config section {sec!r}")
            obj = getattr(cfg, sec)
            if name not in {f.name for f in dataclasses.fields(obj)}:
                raise ConfigError(f"unknown config key {key!r}")
            nested[sec][name] = _coerce(getattr(obj, name), raw, key)
        else:
            if key in _SECTIONS or key not in {f.name for f in dataclasses.fields(cfg)}:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(getattr(cfg, key), raw, key)
    try:
        for sec, vals in nested.items():
            if vals:
                top[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
        cfg = dataclasses.replace(cfg, **top)
        if nested["cluster"] and not nested["loop"].get("cluster"):
            cfg = dataclasses.replace(cfg, loop=dataclasses.replace(cfg.loop, cluster=cfg.cluster))
        return cfg
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for n, ln in enumerate(lines, 1):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        if "=" not in ln:
            raise ConfigError(f"line {n}: expected key=value, got {ln!r}")
        k, v = ln.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> PipelineConfig:
    pairs: dict[str, str] = {}
    if path:
        pairs.update(parse_pairs(Path(path).read_text(encoding="utf-8").splitlines()))
    pairs.update(parse_pairs(overrides or []))
    return apply_overrides(PipelineConfig(), pairs)


def dump_config(cfg: PipelineConfig, exclude: tuple[str, ...] = ()) -> str:
    """Flat ``key=value`` snapshot that :func:`load_config` reads back."""
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name in exclude:
            continue
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for g in dataclasses.fields(v):
                sub = getattr(v, g.name)
                if dataclasses.is_dataclass(sub):
                    continue
                lines.append(f"{f.name}.{g.name}={_render(sub)}")
        else:
            lines.append(f"{f.name}={_render(v)}")
    return "\n".join(lines) + "\n"


def _render(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    return repr(v) if isinstance(v, float) else str(v)
