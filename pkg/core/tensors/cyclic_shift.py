"""
Cyclic Shifts of Tensors

Translates a tensor by fixed offsets with wrap-around. The second model
view sees every input shifted by half a patch, so signal straddling patch
borders in the original grid lands inside one patch of the shifted grid.

Shifts are index rotations (np.roll); `cyclic_shift_matrix` builds the
explicit shift matrix Q only for checking the matrix form (Q^T)^s1 X Q^s2.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from core.tensors.tensor_ops import ArrayLike, DenseTensor, ShapeConfig, as_tensor


@dataclass(frozen=True)
class ShiftSpec:
    """Offsets (s1, s2, s3) in voxels"""
    offsets: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        offsets = tuple(int(s) for s in self.offsets)
        offsets = offsets + (0,) * (3 - len(offsets))
        if len(offsets) != 3 or min(offsets) < 0:
            raise ValueError(f"offsets must be three non-negative ints, got {self.offsets}")
        object.__setattr__(self, 'offsets', offsets)

    @classmethod
    def reduced(cls, offsets: Sequence[int], dims: Sequence[int]) -> 'ShiftSpec':
        """Offsets reduced modulo the matching dims (negative offsets allowed)"""
        offsets = tuple(offsets) + (0,) * (3 - len(offsets))
        dims = tuple(dims) + (1,) * (3 - len(dims))
        return cls(tuple(int(s) % int(n) for s, n in zip(offsets, dims)))

    def for_dims(self, dims: Sequence[int]) -> 'ShiftSpec':
        return ShiftSpec.reduced(self.offsets, dims)

    def inverse(self, dims: Sequence[int]) -> 'ShiftSpec':
        """Offsets (D1 - s1, D2 - s2, D3 - s3), reduced"""
        return ShiftSpec.reduced([-s for s in self.offsets], dims)

    @property
    def is_identity(self) -> bool:
        return not any(self.offsets)


def default_shift(cfg: ShapeConfig) -> ShiftSpec:
    """
    Half-patch shift: s_k = floor(d_k / 2), 0 on singleton axes

    Example:
        default_shift(ShapeConfig.from_dims((16, 16), (4, 4))).offsets   # (2, 2, 0)
    """
    return ShiftSpec(tuple(d // 2 if d > 1 else 0 for d in cfg.patch))


def shift(x: ArrayLike, s: ShiftSpec) -> DenseTensor:
    """output[i, j, k] = x[(i - s1) mod D1, (j - s2) mod D2, (k - s3) mod D3]"""
    x = as_tensor(x)
    rolled = np.roll(x.data, s.for_dims(x.dims).offsets, axis=(0, 1, 2))
    return DenseTensor(rolled, order=x.order)


def unshift(x: ArrayLike, s: ShiftSpec) -> DenseTensor:
    """Inverse of `shift`: unshift(shift(x, s), s) == x"""
    x = as_tensor(x)
    return shift(x, s.inverse(x.dims))


def shift_batch(stack: np.ndarray, s: ShiftSpec) -> np.ndarray:
    """Shift every tensor of an (n, D1, D2, D3) stack"""
    stack = np.asarray(stack, dtype=np.float64)
    offsets = s.for_dims(stack.shape[1:]).offsets
    if not any(offsets):
        return stack
    return np.roll(stack, offsets, axis=(1, 2, 3))


def cyclic_shift_matrix(n: int, power: int = 1) -> np.ndarray:
    """
    Q^power for the n x n cyclic shift matrix Q

    Q has ones on its superdiagonal and in the bottom-left corner, so
    X @ Q moves columns one step right and Q.T @ X moves rows one step down.
    """
    q = np.roll(np.eye(n), 1, axis=1)
    return np.linalg.matrix_power(q, power % n if n else 0)
