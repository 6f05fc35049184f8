from .dump import (DimensionMismatchError, DumpFormatError, MagicMismatchError,
                   TruncatedPayloadError, list_chunk_dirs, load_chunk, save_chunk)
from .synthetic import (Box, NoiseModel, SceneObject, Sphere, SyntheticScene, look_at, raycast,
                        render_synthetic_chunk, separated_embeddings, simulate_reinference)
from .types import ChunkOutput, FrameOutput, GroundTruth, Intrinsics

__all__ = [
    "Box", "ChunkOutput", "DimensionMismatchError", "DumpFormatError", "FrameOutput",
    "GroundTruth", "Intrinsics", "MagicMismatchError", "NoiseModel", "SceneObject", "Sphere",
    "SyntheticScene", "TruncatedPayloadError", "list_chunk_dirs", "load_chunk", "look_at",
    "raycast", "render_synthetic_chunk", "save_chunk", "separated_embeddings",
    "simulate_reinference",
]
