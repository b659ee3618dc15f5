"""
Dense Tensor Operations for SKPD

Implements the tensor arithmetic the SKPD model is built on:
1. DenseTensor - a finite, row-major array of order 1 to 3
2. ShapeConfig - the grid/patch geometry of a Kronecker factorization
3. Kronecker products and Frobenius inner products
4. The rearrangement operator that turns a sum of Kronecker products
   into a low-rank p x d matrix (and its inverse)
5. Top-R left singular vectors via deflated power iteration
6. The nearest Kronecker product error (Eckart-Young on the rearranged matrix)

All vectorization is row-major (last index fastest). The rearrangement
identity rearrange(kron(A, B)) == outer(vec(A), vec(B)) only needs the
same order everywhere, so every helper here uses it.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from core.utils.errors import (
    ConvergenceError,
    DimensionOverflowError,
    NonFiniteError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int]
ArrayLike = Union["DenseTensor", np.ndarray, Sequence]


def _pad_dims(shape: Sequence[int]) -> Dims:
    """Pad a 1/2/3-element shape with trailing ones to three dims"""
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 3:
        raise ShapeMismatchError(f"tensor order must be 1, 2 or 3, got {len(shape)}")
    return shape + (1,) * (3 - len(shape))


def _checked_volume(dims: Sequence[int]) -> int:
    """Product of dims, refusing anything the platform cannot index"""
    volume = 1
    limit = np.iinfo(np.intp).max
    for dim in dims:
        volume *= int(dim)
        if volume > limit:
            raise DimensionOverflowError(
                f"dimensions {tuple(dims)} exceed the platform index limit"
            )
    return volume


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """
    Row-major tensor of 64-bit reals with explicit (D1, D2, D3) dims

    Matrices are stored with D3 = 1 and vectors with D2 = D3 = 1. The
    original order is kept so results can be handed back in the shape
    callers expect.

    Example:
        t = DenseTensor.from_array([[1.0, 2.0], [3.0, 4.0]])
        t.dims        # (2, 2, 1)
        t.as_array()  # 2x2 ndarray
    """
    data: np.ndarray
    order: int = 3

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeMismatchError(f"DenseTensor data must be 3-D, got {data.ndim}-D")
        if not np.isfinite(data).all():
            raise NonFiniteError("DenseTensor entries must be finite (no NaN/Inf)")
        if self.order not in (1, 2, 3):
            raise ShapeMismatchError(f"order must be 1, 2 or 3, got {self.order}")
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @classmethod
    def from_array(cls, values: ArrayLike) -> 'DenseTensor':
        """Build from any 1/2/3-D array-like (or return a DenseTensor unchanged)"""
        if isinstance(values, DenseTensor):
            return values
        array = np.asarray(values, dtype=np.float64)
        dims = _pad_dims(array.shape)
        return cls(array.reshape(dims), order=array.ndim)

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> 'DenseTensor':
        """All-zero tensor with the given dims"""
        return cls.from_array(np.zeros(tuple(dims)))

    @property
    def dims(self) -> Dims:
        return tuple(int(s) for s in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def as_array(self) -> np.ndarray:
        """Values in the original order (a read-only view)"""
        return self.data.reshape(self.data.shape[:self.order])

    def vec(self) -> np.ndarray:
        """Row-major vectorization"""
        return self.data.reshape(-1)

    def norm(self) -> float:
        """Frobenius norm"""
        return float(np.linalg.norm(self.vec()))

    def __array__(self, dtype=None, copy=None):
        array = self.as_array()
        return array.astype(dtype) if dtype is not None else array


def as_tensor(values: ArrayLike) -> DenseTensor:
    """Coerce array-likes to DenseTensor"""
    return DenseTensor.from_array(values)


@dataclass(frozen=True)
class ShapeConfig:
    """
    Grid and patch geometry of a Kronecker factorization

    The full tensor has dims D_k = p_k * d_k. A factors live on the grid
    (p1, p2, p3) and B factors on the patch (d1, d2, d3).

    Example:
        cfg = ShapeConfig.from_dims((128, 128), patch=(4, 4))
        cfg.grid   # (32, 32, 1)
        cfg.p, cfg.d   # 1024, 16
    """
    grid: Dims
    patch: Dims

    def __post_init__(self):
        grid = _pad_dims(self.grid)
        patch = _pad_dims(self.patch)
        if min(grid) < 1 or min(patch) < 1:
            raise ShapeMismatchError(
                f"grid and patch extents must be >= 1, got grid={grid}, patch={patch}"
            )
        _checked_volume([g * d for g, d in zip(grid, patch)])
        object.__setattr__(self, 'grid', grid)
        object.__setattr__(self, 'patch', patch)

    @classmethod
    def from_dims(cls, dims: Sequence[int], patch: Sequence[int]) -> 'ShapeConfig':
        """
        Build from the full dims and a patch size, enforcing divisibility

        Raises:
            ShapeMismatchError: If a patch extent does not divide its dim
        """
        dims = _pad_dims(dims)
        patch = _pad_dims(patch)
        for axis, (full, d) in enumerate(zip(dims, patch)):
            if d < 1 or full % d != 0:
                raise ShapeMismatchError(
                    f"patch extent {d} does not divide dim {full} on axis {axis}"
                )
        grid = tuple(full // d for full, d in zip(dims, patch))
        return cls(grid=grid, patch=patch)

    @property
    def full_dims(self) -> Dims:
        return tuple(g * d for g, d in zip(self.grid, self.patch))

    @property
    def p(self) -> int:
        return int(np.prod(self.grid))

    @property
    def d(self) -> int:
        return int(np.prod(self.patch))

    def describe(self) -> str:
        """Short label such as '32x32 / 4x4' (singleton third axes dropped)"""
        def fmt(dims):
            shown = dims if dims[2] != 1 else dims[:2]
            return 'x'.join(str(v) for v in shown)
        return f"{fmt(self.grid)} / {fmt(self.patch)}"


def kron(a: ArrayLike, b: ArrayLike) -> DenseTensor:
    """
    Kronecker product of two tensors

    Output dims are the elementwise products of the input dims; entry at
    block (k, l, m), offset (u, v, w) equals a[k, l, m] * b[u, v, w].

    Raises:
        DimensionOverflowError: If the product dims cannot be indexed
    """
    a, b = as_tensor(a), as_tensor(b)
    _checked_volume([x * y for x, y in zip(a.dims, b.dims)])
    return DenseTensor(np.kron(a.data, b.data), order=max(a.order, b.order))


def inner(a: ArrayLike, b: ArrayLike) -> float:
    """Frobenius inner product of two equally shaped tensors"""
    a, b = as_tensor(a), as_tensor(b)
    if a.dims != b.dims:
        raise ShapeMismatchError(f"inner product needs equal dims, got {a.dims} and {b.dims}")
    return float(np.dot(a.vec(), b.vec()))


def _check_full_dims(dims: Sequence[int], cfg: ShapeConfig) -> None:
    if tuple(dims) != cfg.full_dims:
        raise ShapeMismatchError(
            f"tensor dims {tuple(dims)} do not match config dims {cfg.full_dims}"
        )


def rearrange_batch(stack: np.ndarray, cfg: ShapeConfig) -> np.ndarray:
    """
    Rearrange a stack of n tensors into an (n, p, d) array

    `stack` has shape (n, D1, D2, D3). Row k of each p x d slice is the
    row-major vec of the k-th block, blocks in lexicographic grid order.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 4:
        raise ShapeMismatchError(f"expected an (n, D1, D2, D3) stack, got shape {stack.shape}")
    _check_full_dims(stack.shape[1:], cfg)
    (p1, p2, p3), (d1, d2, d3) = cfg.grid, cfg.patch
    n = stack.shape[0]
    blocks = stack.reshape(n, p1, d1, p2, d2, p3, d3).transpose(0, 1, 3, 5, 2, 4, 6)
    return np.ascontiguousarray(blocks.reshape(n, cfg.p, cfg.d))


def rearrange(c: ArrayLike, cfg: ShapeConfig) -> np.ndarray:
    """
    Rearrangement operator: blocked tensor -> p x d matrix

    Turns a rank-R Kronecker sum into a rank-R matrix:
    rearrange(kron(A, B), cfg) == outer(vec(A), vec(B)).

    Raises:
        ShapeMismatchError: If c.dims differs from cfg.full_dims
    """
    c = as_tensor(c)
    return rearrange_batch(c.data[np.newaxis], cfg)[0]


def rearrange_inverse(m: np.ndarray, cfg: ShapeConfig) -> DenseTensor:
    """
    Inverse of `rearrange`: p x d matrix -> tensor with cfg.full_dims

    Raises:
        ShapeMismatchError: If m is not (cfg.p, cfg.d)
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (cfg.p, cfg.d):
        raise ShapeMismatchError(f"expected a {(cfg.p, cfg.d)} matrix, got {m.shape}")
    (p1, p2, p3), (d1, d2, d3) = cfg.grid, cfg.patch
    blocks = m.reshape(p1, p2, p3, d1, d2, d3).transpose(0, 3, 1, 4, 2, 5)
    order = 3 if cfg.full_dims[2] > 1 else 2
    return DenseTensor(blocks.reshape(cfg.full_dims), order=order)


def _fix_sign(vector: np.ndarray) -> np.ndarray:
    """Flip so the first nonzero component (above roundoff) is positive"""
    magnitude = np.abs(vector)
    nonzero = np.flatnonzero(magnitude > 1e-12 * magnitude.max(initial=0.0))
    if nonzero.size and vector[nonzero[0]] < 0:
        return -vector
    return vector


@dataclass
class SingularVectors:
    """Result of `top_r_left_singular`"""
    vectors: np.ndarray
    """Orthonormal left singular vectors as columns (rows x r)"""

    values: np.ndarray
    """Matching singular values, non-increasing"""

    iterations: list
    """Power iterations spent per extracted vector"""

    def as_list(self) -> list:
        return [self.vectors[:, k].copy() for k in range(self.vectors.shape[1])]


def top_r_left_singular(
    m: np.ndarray,
    r: int,
    tol: float = 1e-9,
    seed: int = 0,
    max_iter: int = 10_000,
) -> SingularVectors:
    """
    Top-r left singular vectors by orthogonally deflated power iteration

    Each vector is iterated on the Gram operator M M^T while being kept
    orthogonal to the ones already extracted. A pair (u, sigma) is accepted
    once ||M v - sigma u|| <= tol * ||M||_F with v = M^T u / sigma.

    Args:
        m: Matrix (rows x cols)
        r: Number of vectors, 1 <= r <= min(rows, cols)
        tol: Relative residual tolerance (> 0)
        seed: Seed for the random start vectors
        max_iter: Iteration budget per vector

    Returns:
        SingularVectors with sign-normalized columns (first nonzero > 0)

    Raises:
        ConvergenceError: If a vector misses tol within max_iter; the
            vectors found so far are attached as `partial`
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected a matrix, got shape {m.shape}")
    rows, cols = m.shape
    if not 1 <= r <= min(rows, cols):
        raise ShapeMismatchError(f"r must be in [1, {min(rows, cols)}], got {r}")
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol}")

    rng = np.random.default_rng(seed)
    scale = float(np.linalg.norm(m))
    gram = m @ m.T if rows <= cols else None
    vectors = np.zeros((rows, r))
    values = np.zeros(r)
    iterations = []

    def apply_gram(u):
        return gram @ u if gram is not None else m @ (m.T @ u)

    def deflate(u, k):
        basis = vectors[:, :k]
        u = u - basis @ (basis.T @ u)
        return u - basis @ (basis.T @ u)

    for k in range(r):
        u = deflate(rng.standard_normal(rows), k)
        u /= np.linalg.norm(u)
        converged = False
        for it in range(1, max_iter + 1):
            if scale == 0.0:
                sigma, converged = 0.0, True
                break
            mt_u = m.T @ u
            sigma = float(np.linalg.norm(mt_u))
            if sigma <= tol * scale:
                # Remaining left subspace is (numerically) null
                converged = True
                break
            residual = np.linalg.norm(apply_gram(u) / sigma - sigma * u)
            if residual <= tol * scale:
                converged = True
                break
            nxt = deflate(apply_gram(u), k)
            nrm = np.linalg.norm(nxt)
            if nrm == 0.0:
                converged = True
                break
            u = nxt / nrm
        iterations.append(it)
        vectors[:, k] = _fix_sign(u)
        values[k] = sigma
        if not converged:
            partial = SingularVectors(vectors[:, :k + 1].copy(), values[:k + 1].copy(), iterations)
            raise ConvergenceError(
                f"power iteration for singular vector {k + 1} did not converge "
                f"within {max_iter} iterations",
                partial=partial,
            )
        logger.debug(f"singular vector {k + 1}/{r}: sigma={sigma:.6g} after {it} iterations")

    return SingularVectors(vectors=vectors, values=values, iterations=iterations)


def kron_best_rank_r_error(
    c_star: ArrayLike,
    cfg: ShapeConfig,
    r: int,
    relative: bool = False,
) -> float:
    """
    Error of the best rank-r Kronecker-sum approximation of c_star

    min ||sum_r A_r (x) B_r - c_star||_F equals the Frobenius norm of the
    singular values of rearrange(c_star) beyond the r-th (Eckart-Young).

    Args:
        c_star: Target tensor with cfg.full_dims
        cfg: Factorization geometry
        r: Number of Kronecker terms (>= 1)
        relative: Divide by ||c_star||_F (0 for a zero target)

    Raises:
        ConvergenceError: If the SVD fails to converge
    """
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    c_star = as_tensor(c_star)
    matrix = rearrange(c_star, cfg)
    try:
        singular_values = linalg.svd(matrix, compute_uv=False)
    except linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD of the rearranged matrix failed: {exc}") from exc
    error = float(np.sqrt(np.sum(singular_values[r:] ** 2)))
    if relative:
        total = c_star.norm()
        return error / total if total > 0 else 0.0
    return error
