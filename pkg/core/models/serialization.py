"""
SKPD Model Files

Flat little-endian binary container for fitted models:

    magic "SKPD" | version u32
    grid 3 x u32 | patch 3 x u32 | shift 3 x u32
    n_views u32 | rank u32
    per view, per r: A dims 3 x u32, A f64 payload, B dims 3 x u32, B f64 payload
    q u32 | gamma q x f64 | intercept f64
    lambda_a, lambda_b, lambda_gamma, alpha f64

Writing the same model twice yields identical bytes.
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from core.models.skpd_model import FactorSet, PenaltyConfig, SkpdModel
from core.tensors.cyclic_shift import ShiftSpec
from core.tensors.tensor_ops import ShapeConfig
from core.utils.errors import ContainerFormatError

MODEL_MAGIC = b'SKPD'
MODEL_VERSION = 1


def model_to_bytes(model: SkpdModel) -> bytes:
    """Serialize a model to the SKPD container format"""
    parts = [MODEL_MAGIC, struct.pack('<I', MODEL_VERSION)]
    parts.append(struct.pack('<3I', *model.cfg.grid))
    parts.append(struct.pack('<3I', *model.cfg.patch))
    parts.append(struct.pack('<3I', *model.shift.offsets))
    parts.append(struct.pack('<II', len(model.views), model.rank))
    for view in model.views:
        for r in range(view.rank):
            for factor in (view.A[r], view.B[r]):
                parts.append(struct.pack('<3I', *factor.shape))
                parts.append(np.ascontiguousarray(factor, dtype='<f8').tobytes())
    parts.append(struct.pack('<I', model.q))
    parts.append(np.ascontiguousarray(model.gamma, dtype='<f8').tobytes())
    parts.append(struct.pack('<d', model.intercept))
    pen = model.penalties
    parts.append(struct.pack('<4d', pen.lambda_a, pen.lambda_b, pen.lambda_gamma, pen.alpha))
    return b''.join(parts)


class _Reader:
    """Sequential reader that reports truncation as a format error"""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise ContainerFormatError("model file is truncated")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype='<f8').astype(np.float64)


def model_from_bytes(payload: bytes) -> SkpdModel:
    """
    Parse an SKPD container

    Raises:
        ContainerFormatError: On wrong magic/version, truncation or trailing bytes
    """
    reader = _Reader(payload)
    if reader.take(4) != MODEL_MAGIC:
        raise ContainerFormatError("not an SKPD model file (bad magic)")
    (version,) = reader.unpack('<I')
    if version != MODEL_VERSION:
        raise ContainerFormatError(f"unsupported model version {version}")
    grid = reader.unpack('<3I')
    patch = reader.unpack('<3I')
    offsets = reader.unpack('<3I')
    n_views, rank = reader.unpack('<II')
    cfg = ShapeConfig(grid=grid, patch=patch)

    views = []
    for _ in range(n_views):
        a_stack, b_stack = [], []
        for _ in range(rank):
            for stack in (a_stack, b_stack):
                dims = reader.unpack('<3I')
                stack.append(reader.floats(int(np.prod(dims))).reshape(dims))
        views.append(FactorSet(np.stack(a_stack), np.stack(b_stack)))

    (q,) = reader.unpack('<I')
    gamma = reader.floats(q)
    (intercept,) = reader.unpack('<d')
    lambda_a, lambda_b, lambda_gamma, alpha = reader.unpack('<4d')
    if reader.offset != len(payload):
        raise ContainerFormatError("model file has trailing bytes")

    return SkpdModel(
        cfg=cfg,
        shift=ShiftSpec(offsets),
        views=views,
        gamma=gamma,
        penalties=PenaltyConfig(lambda_a, lambda_b, lambda_gamma, alpha),
        intercept=intercept,
    )


def save_model(model: SkpdModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path: Union[str, Path]) -> SkpdModel:
    return model_from_bytes(Path(path).read_bytes())
