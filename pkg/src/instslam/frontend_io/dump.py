"""Chunk dump format.

One directory per chunk::

    meta        UTF-8 text, first line the magic ``IRISCHUNK1``, then
                ``key value`` lines (chunk_id, frames, height, width, dim,
                lang_dim, overlap_with_prev) and one line per frame:
                ``frame <k> <index> <fx> <fy> <cx> <cy> <timestamp>``
    poses.bin   N x 16 float64 little-endian, row-major 4x4 camera-to-chunk
    depth.bin   N x H x W float32 little-endian, row-major
    embed.bin   N x H x W x D float32 little-endian, pixel-major then channel
    lang.bin    optional N x H x W x L float32 (only when lang_dim > 0)
    gt_ids.bin  optional N x H x W int32 (oracle chunks)

Floats in ``meta`` are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..liegroups import SE3Pose
from .types import ChunkOutput, FrameOutput, Intrinsics

MAGIC = "IRISCHUNK1"

_HEADER_KEYS = ("chunk_id", "frames", "height", "width", "dim", "lang_dim",
                "overlap_with_prev")


class DumpFormatError(ValueError):
    pass


class MagicMismatchError(DumpFormatError):
    pass


class DimensionMismatchError(DumpFormatError):
    pass


class TruncatedPayloadError(DumpFormatError):
    pass


def save_chunk(chunk: ChunkOutput, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = chunk.frames
    h, w = frames[0].shape
    d = frames[0].dim
    has_lang = all(f.lang is not None for f in frames)
    lang_dim = frames[0].lang.shape[2] if has_lang else 0
    lines = [MAGIC,
             f"chunk_id {chunk.chunk_id}",
             f"frames {len(frames)}",
             f"height {h}",
             f"width {w}",
             f"dim {d}",
             f"lang_dim {lang_dim}",
             f"overlap_with_prev {chunk.overlap_with_prev}"]
    for k, f in enumerate(frames):
        k_ = f.intrinsics
        lines.append(f"frame {k} {f.index} {k_.fx!r} {k_.fy!r} {k_.cx!r} {k_.cy!r} "
                     f"{float(f.timestamp)!r}")
    (path / "meta").write_text("\n".join(lines) + "\n", encoding="utf-8")

    poses = np.stack([f.pose.matrix() for f in frames]).astype("<f8")
    (path / "poses.bin").write_bytes(poses.tobytes())
    depth = np.stack([f.depth for f in frames]).astype("<f4")
    (path / "depth.bin").write_bytes(depth.tobytes())
    embed = np.stack([f.embedding for f in frames]).astype("<f4")
    (path / "embed.bin").write_bytes(embed.tobytes())
    if has_lang:
        lang = np.stack([f.lang for f in frames]).astype("<f4")
        (path / "lang.bin").write_bytes(lang.tobytes())
    if all(f.gt_ids is not None for f in frames):
        ids = np.stack([f.gt_ids for f in frames]).astype("<i4")
        (path / "gt_ids.bin").write_bytes(ids.tobytes())
    return path


def _parse_meta(text: str) -> tuple[dict[str, int], list[list[str]]]:
    lines = text.splitlines()
    if not lines:
        raise TruncatedPayloadError("meta is empty")
    if lines[0].strip() != MAGIC:
        raise MagicMismatchError(f"expected magic {MAGIC!r}, found {lines[0][:32]!r}")
    header: dict[str, int] = {}
    frames: list[list[str]] = []
    for ln in lines[1:]:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "frame":
            if len(parts) != 8:
                raise DumpFormatError(f"malformed frame line: {ln!r}")
            frames.append(parts[1:])
        elif parts[0] in _HEADER_KEYS and len(parts) == 2:
            header[parts[0]] = int(parts[1])
        else:
            raise DumpFormatError(f"unrecognised meta line: {ln!r}")
    header.setdefault("lang_dim", 0)
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise TruncatedPayloadError(f"meta lacks {', '.join(missing)}")
    if len(frames) != header["frames"]:
        raise TruncatedPayloadError(
            f"meta declares {header['frames']} frames but lists {len(frames)}")
    return header, frames


def _read_array(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise TruncatedPayloadError(f"missing payload {path.name}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{path.name}: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise DimensionMismatchError(
            f"{path.name}: {len(raw)} bytes exceeds declared size {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def load_chunk(path: str | os.PathLike) -> ChunkOutput:
    """Read a chunk dump written by :func:`save_chunk`.

    Raises :class:`MagicMismatchError`, :class:`DimensionMismatchError` or
    :class:`TruncatedPayloadError` on malformed input.
    """
    path = Path(path)
    meta = path / "meta"
    if not meta.exists():
        raise TruncatedPayloadError(f"no meta file in {path}")
    header, frame_lines = _parse_meta(meta.read_text(encoding="utf-8"))
    n, h, w, d = header["frames"], header["height"], header["width"], header["dim"]
    if min(n, h, w, d) <= 0:
        raise DimensionMismatchError(f"non-positive dimensions in {path}")
    poses = _read_array(path / "poses.bin", "<f8", (n, 4, 4))
    depth = _read_array(path / "depth.bin", "<f4", (n, h, w))
    embed = _read_array(path / "embed.bin", "<f4", (n, h, w, d))
    lang = None
    if header["lang_dim"] > 0:
        lang = _read_array(path / "lang.bin", "<f4", (n, h, w, header["lang_dim"]))
    ids = None
    if (path / "gt_ids.bin").exists():
        ids = _read_array(path / "gt_ids.bin", "<i4", (n, h, w))

    frames = []
    for k, parts in enumerate(frame_lines):
        if int(parts[0]) != k:
            raise DumpFormatError(f"frame lines out of order at {k}")
        fx, fy, cx, cy, ts = map(float, parts[2:7])
        frames.append(FrameOutput(
            pose=SE3Pose.from_matrix(poses[k]),
            depth=depth[k].astype(np.float32),
            embedding=embed[k].astype(np.float32),
            intrinsics=Intrinsics(fx, fy, cx, cy),
            timestamp=ts,
            index=int(parts[1]),
            lang=None if lang is None else lang[k].astype(np.float32),
            gt_ids=None if ids is None else ids[k].astype(np.int32),
        ))
    return ChunkOutput(header["chunk_id"], frames, header["overlap_with_prev"])


def list_chunk_dirs(root: str | os.PathLike) -> list[Path]:
    """Chunk dump directories under ``root`` ordered by their declared chunk id."""
    root = Path(root)
    found = []
    for meta in root.glob("*/meta"):
        header, _ = _parse_meta(meta.read_text(encoding="utf-8"))
        found.append((header["chunk_id"], meta.parent))
    return [p for _, p in sorted(found)]
