"""
SKPD Logistic Model

Two-view sparse Kronecker product decomposition classifier:

    eta_i = <X_i, C_1> + <shift(X_i), C_2> + <z_i, gamma> + intercept
    C_v   = sum_r A_{v,r} (x) B_{v,r}
    P(y_i = 1) = sigmoid(eta_i)

View 0 sees the original tensor, view 1 (optional) the half-patch shifted
one. Inner products are evaluated in rearranged form
vec(A)^T rearrange(X) vec(B), which is also how the optimizer builds its
design matrices.

Penalty:
    lambda_a * sum |A|_1
  + lambda_b * sum [alpha |B|_1 + (1 - alpha) |B|_F^2]
  + lambda_gamma * |gamma|_1          (intercept unpenalized)
"""

import copy
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from core.tensors.cyclic_shift import ShiftSpec, default_shift, shift_batch, unshift
from core.tensors.tensor_ops import (
    DenseTensor,
    ShapeConfig,
    as_tensor,
    kron,
    rearrange_batch,
)
from core.utils.errors import NonFiniteError, ShapeMismatchError, SingleClassError


def sigmoid(eta):
    """Numerically stable logistic function"""
    return expit(eta)


def logistic_losses(eta: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample negative log-likelihood log(1 + e^eta) - y * eta"""
    return np.logaddexp(0.0, eta) - y * eta


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty strengths; alpha blends L1 and squared ridge on B"""
    lambda_a: float = 0.1
    lambda_b: float = 0.001
    lambda_gamma: float = 0.0
    alpha: float = 0.2

    def __post_init__(self):
        for name in ('lambda_a', 'lambda_b', 'lambda_gamma'):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite value >= 0, got {value}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, 'alpha', float(np.clip(float(self.alpha), 0.0, 1.0)))


@dataclass
class FactorSet:
    """
    Kronecker factors of one view

    A has shape (R, p1, p2, p3) and B has shape (R, d1, d2, d3); A[r] and
    B[r] form the r-th term A_r (x) B_r.
    """
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.float64)
        self.B = np.array(self.B, dtype=np.float64)
        if self.A.ndim != 4 or self.B.ndim != 4 or self.A.shape[0] != self.B.shape[0]:
            raise ShapeMismatchError(
                f"factor stacks must be (R, ., ., .) with equal R, got {self.A.shape} and {self.B.shape}"
            )
        if self.A.shape[0] < 1:
            raise ShapeMismatchError("rank must be >= 1")

    @classmethod
    def zeros(cls, cfg: ShapeConfig, rank: int) -> 'FactorSet':
        return cls(np.zeros((rank,) + cfg.grid), np.zeros((rank,) + cfg.patch))

    @property
    def rank(self) -> int:
        return int(self.A.shape[0])

    def check(self, cfg: ShapeConfig) -> None:
        if self.A.shape[1:] != cfg.grid or self.B.shape[1:] != cfg.patch:
            raise ShapeMismatchError(
                f"factor dims {self.A.shape[1:]} / {self.B.shape[1:]} do not match "
                f"grid {cfg.grid} / patch {cfg.patch}"
            )

    def a_matrix(self) -> np.ndarray:
        """A as an (R, p) matrix of row-major vecs"""
        return self.A.reshape(self.rank, -1)

    def b_matrix(self) -> np.ndarray:
        """B as an (R, d) matrix of row-major vecs"""
        return self.B.reshape(self.rank, -1)

    def coefficient_tensor(self) -> DenseTensor:
        """sum_r kron(A_r, B_r)"""
        total = kron(self.A[0], self.B[0]).data.copy()
        for r in range(1, self.rank):
            total += kron(self.A[r], self.B[r]).data
        return DenseTensor(total)

    def nonzero_a(self) -> List[int]:
        """||A_r||_0 for every r"""
        return [int(np.count_nonzero(a)) for a in self.A]


@dataclass
class Dataset:
    """
    n samples of (tensor x_i, covariates z_i, label y_i)

    x is stored as an (n, D1, D2, D3) stack; an (n, D1, D2) stack is read
    as n matrices. z defaults to an empty (n, 0) block.
    """
    x: np.ndarray
    y: np.ndarray
    z: Optional[np.ndarray] = None
    cfg: Optional[ShapeConfig] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 3:
            x = x[..., np.newaxis]
        if x.ndim != 4:
            raise ShapeMismatchError(f"x must be an (n, D1, D2[, D3]) stack, got shape {x.shape}")
        n = x.shape[0]
        y = np.asarray(self.y)
        if y.shape != (n,):
            raise ShapeMismatchError(f"y must have shape ({n},), got {y.shape}")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        z = np.zeros((n, 0)) if self.z is None else np.asarray(self.z, dtype=np.float64)
        if z.ndim == 1:
            z = z[:, np.newaxis]
        if z.ndim != 2 or z.shape[0] != n:
            raise ShapeMismatchError(f"z must have shape ({n}, q), got {z.shape}")
        if not (np.isfinite(x).all() and np.isfinite(z).all()):
            raise NonFiniteError("dataset tensors and covariates must be finite")
        if self.cfg is not None and self.cfg.full_dims != x.shape[1:]:
            raise ShapeMismatchError(
                f"sample dims {x.shape[1:]} do not match config dims {self.cfg.full_dims}"
            )
        self.x, self.y, self.z = x, y.astype(np.int64), z

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def q(self) -> int:
        return int(self.z.shape[1])

    @property
    def dims(self):
        return tuple(int(s) for s in self.x.shape[1:])

    def __len__(self) -> int:
        return self.n

    def tensor(self, i: int) -> DenseTensor:
        return DenseTensor(self.x[i])

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[indices], self.y[indices], self.z[indices], self.cfg)

    def class_counts(self):
        """(#y=0, #y=1)"""
        positives = int(self.y.sum())
        return self.n - positives, positives

    def require_both_classes(self) -> None:
        if min(self.class_counts()) == 0:
            raise SingleClassError("dataset must contain both classes")


@dataclass
class SkpdModel:
    """
    Fitted (or initial) cyclic-shift SKPD classifier

    `views[0]` holds the original-coordinate factors; `views[1]`, when
    present, the factors learned on shifted inputs. `gamma` has one entry
    per covariate column; `intercept` is fitted but never penalized.
    """
    cfg: ShapeConfig
    shift: ShiftSpec
    views: List[FactorSet]
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    penalties: PenaltyConfig = field(default_factory=PenaltyConfig)
    intercept: float = 0.0

    def __post_init__(self):
        if len(self.views) not in (1, 2):
            raise ValueError(f"a model has 1 or 2 views, got {len(self.views)}")
        ranks = {view.rank for view in self.views}
        if len(ranks) != 1:
            raise ShapeMismatchError(f"both views must share the rank, got {sorted(ranks)}")
        for view in self.views:
            view.check(self.cfg)
        self.gamma = np.array(self.gamma, dtype=np.float64).reshape(-1)
        self.intercept = float(self.intercept)

    @classmethod
    def zeros(
        cls,
        cfg: ShapeConfig,
        rank: int,
        q: int = 0,
        use_shift: bool = True,
        penalties: Optional[PenaltyConfig] = None,
        shift_spec: Optional[ShiftSpec] = None,
    ) -> 'SkpdModel':
        """All-zero model"""
        views = [FactorSet.zeros(cfg, rank) for _ in range(2 if use_shift else 1)]
        return cls(
            cfg=cfg,
            shift=shift_spec if shift_spec is not None else default_shift(cfg),
            views=views,
            gamma=np.zeros(q),
            penalties=penalties or PenaltyConfig(),
        )

    @property
    def rank(self) -> int:
        return self.views[0].rank

    @property
    def q(self) -> int:
        return int(self.gamma.size)

    @property
    def use_shift(self) -> bool:
        return len(self.views) == 2

    def copy(self) -> 'SkpdModel':
        return copy.deepcopy(self)

    # =========================================================================
    # COEFFICIENTS
    # =========================================================================

    def coefficient_tensor(self, view: int = 0) -> DenseTensor:
        """C_view = sum_r kron(A_{view,r}, B_{view,r}) in that view's coordinates"""
        if not 0 <= view < len(self.views):
            raise IndexError(f"view must be in [0, {len(self.views) - 1}], got {view}")
        return self.views[view].coefficient_tensor()

    def effective_coefficients(self) -> DenseTensor:
        """
        C_1 + unshift(C_2): the single original-coordinate tensor with
        <X, C> equal to the model's image contribution
        """
        total = self.coefficient_tensor(0).data.copy()
        if self.use_shift:
            total += unshift(self.coefficient_tensor(1), self.shift).data
        return DenseTensor(total)

    def magnitude_map(self) -> DenseTensor:
        """|C_1| + unshift(|C_2|), used for slice scoring and heatmaps"""
        total = np.abs(self.coefficient_tensor(0).data)
        if self.use_shift:
            total = total + unshift(np.abs(self.coefficient_tensor(1).data), self.shift).data
        return DenseTensor(total)

    # =========================================================================
    # PREDICTION
    # =========================================================================

    def view_stacks(self, x: np.ndarray) -> List[np.ndarray]:
        """Input stack as seen by each view (original, then shifted)"""
        stacks = [x]
        if self.use_shift:
            stacks.append(shift_batch(x, self.shift))
        return stacks

    def rearranged_views(self, x: np.ndarray) -> List[np.ndarray]:
        """(n, p, d) rearranged stacks, one per view"""
        return [rearrange_batch(stack, self.cfg) for stack in self.view_stacks(x)]

    def view_terms(self, rearranged: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Per-view image contributions sum_r vec(A_r)^T X~ vec(B_r), each (n,)"""
        return [
            np.einsum('npd,rp,rd->n', xt, view.a_matrix(), view.b_matrix())
            for xt, view in zip(rearranged, self.views)
        ]

    def covariate_term(self, z: np.ndarray) -> np.ndarray:
        """z gamma + intercept"""
        if z.shape[1] != self.q:
            raise ShapeMismatchError(f"model expects q={self.q} covariates, got {z.shape[1]}")
        return z @ self.gamma + self.intercept

    def decision_function(self, data: Dataset, rearranged: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
        """Linear predictor eta for every sample of `data`"""
        if rearranged is None:
            rearranged = self.rearranged_views(data.x)
        return np.sum(self.view_terms(rearranged), axis=0) + self.covariate_term(data.z)

    def linear_predictor(self, x, z=None) -> float:
        """eta for a single sample"""
        x = as_tensor(x)
        z = np.zeros((1, 0)) if z is None else np.asarray(z, dtype=np.float64).reshape(1, -1)
        sample = Dataset(x.data[np.newaxis], np.zeros(1, dtype=np.int64), z)
        return float(self.decision_function(sample)[0])

    def predict_proba(self, x, z=None) -> float:
        """sigmoid(eta) for a single sample"""
        return float(sigmoid(self.linear_predictor(x, z)))

    def classify(self, x, z=None, threshold: float = 0.5) -> int:
        """1 iff predict_proba >= threshold (0.5 exactly maps to class 1)"""
        _check_threshold(threshold)
        return int(self.predict_proba(x, z) >= threshold)

    def predict_proba_batch(self, data: Dataset) -> np.ndarray:
        return sigmoid(self.decision_function(data))

    def classify_batch(self, data: Dataset, threshold: float = 0.5) -> np.ndarray:
        _check_threshold(threshold)
        return (self.predict_proba_batch(data) >= threshold).astype(np.int64)

    # =========================================================================
    # OBJECTIVE
    # =========================================================================

    def penalty_value(self) -> float:
        pen = self.penalties
        a_l1 = sum(float(np.abs(view.A).sum()) for view in self.views)
        b_l1 = sum(float(np.abs(view.B).sum()) for view in self.views)
        b_sq = sum(float(np.sum(view.B ** 2)) for view in self.views)
        return (
            pen.lambda_a * a_l1
            + pen.lambda_b * (pen.alpha * b_l1 + (1.0 - pen.alpha) * b_sq)
            + pen.lambda_gamma * float(np.abs(self.gamma).sum())
        )

    def data_loss(self, data: Dataset, rearranged: Optional[Sequence[np.ndarray]] = None) -> float:
        """Mean negative log-likelihood"""
        if data.n == 0:
            raise ValueError("objective needs a nonempty dataset")
        eta = self.decision_function(data, rearranged)
        return float(np.mean(logistic_losses(eta, data.y)))

    def objective(self, data: Dataset, rearranged: Optional[Sequence[np.ndarray]] = None) -> float:
        """Mean negative log-likelihood plus penalty"""
        return self.data_loss(data, rearranged) + self.penalty_value()


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
