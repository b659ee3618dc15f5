"""
SKPD Estimation Service

Alternating block minimization of the penalized logistic objective:

    for t = 0 .. T-1:
        for each view v:
            B-update: L1/ridge (elastic net) logistic fit of vec(B_v)
                      with A_v, the other view and gamma held fixed
            A-update: L1 logistic fit of vec(A_v) with the new B_v fixed
        gamma-update: L1 logistic fit of (gamma, intercept) with all
                      image factors fixed

Every block is a penalized logistic regression with a per-sample offset
(the fixed part of the linear predictor), solved by proximal gradient with
backtracking. Each accepted step decreases the objective, so the whole
trace is non-increasing.

Fixed blocks always use their most recent iterate (Gauss-Seidel order).
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from core.models.skpd_model import (
    Dataset,
    FactorSet,
    PenaltyConfig,
    SkpdModel,
    logistic_losses,
    sigmoid,
)
from core.tensors.cyclic_shift import ShiftSpec, default_shift, shift_batch
from core.tensors.tensor_ops import ShapeConfig, rearrange_batch, top_r_left_singular
from core.utils.errors import (
    ConvergenceError,
    NonFiniteError,
    NonFiniteObjectiveError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

MAX_BACKTRACKS = 60
MIN_LIPSCHITZ = 1e-10


@dataclass(frozen=True)
class SolverConfig:
    """
    Iteration budgets and tolerances for a fit

    Attributes:
        max_outer: Outer (alternating) iterations T
        outer_tol: Stop when the relative objective change drops below this
        inner_max_iter: Proximal-gradient iterations per block update
        inner_tol: Stop a block once ||w - prox(w - grad/L)||_inf <= inner_tol
        line_search_beta: Backtracking factor in (0, 1)
        seed: Seed for step-size estimation and initialization fallbacks
        accelerate: Use momentum (with restart on objective increase)
        fit_intercept: Fit an unpenalized intercept with gamma
    """
    max_outer: int = 30
    outer_tol: float = 1e-5
    inner_max_iter: int = 500
    inner_tol: float = 1e-6
    line_search_beta: float = 0.5
    seed: int = 0
    accelerate: bool = False
    fit_intercept: bool = True

    def __post_init__(self):
        if self.max_outer < 1 or self.inner_max_iter < 1:
            raise ValueError("max_outer and inner_max_iter must be >= 1")
        if self.outer_tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if not 0.0 < self.line_search_beta < 1.0:
            raise ValueError(f"line_search_beta must be in (0, 1), got {self.line_search_beta}")


# =============================================================================
# PENALTIES
# =============================================================================

def soft_threshold(w: np.ndarray, threshold) -> np.ndarray:
    """Proximal operator of threshold * ||.||_1"""
    return np.sign(w) * np.maximum(np.abs(w) - threshold, 0.0)


@dataclass(frozen=True)
class L1Penalty:
    """lam * ||w||_1, skipping the coordinates listed in `unpenalized`"""
    lam: float
    unpenalized: Tuple[int, ...] = ()

    def _weights(self, size: int) -> np.ndarray:
        weights = np.ones(size)
        weights[list(self.unpenalized)] = 0.0
        return weights

    def value(self, w: np.ndarray) -> float:
        return self.lam * float(np.sum(self._weights(w.size) * np.abs(w)))

    def prox(self, w: np.ndarray, step: float) -> np.ndarray:
        return soft_threshold(w, step * self.lam * self._weights(w.size))


@dataclass(frozen=True)
class ElasticNetPenalty:
    """lam * (alpha ||w||_1 + (1 - alpha) ||w||_2^2)"""
    lam: float
    alpha: float

    def value(self, w: np.ndarray) -> float:
        return self.lam * (self.alpha * float(np.abs(w).sum()) + (1.0 - self.alpha) * float(w @ w))

    def prox(self, w: np.ndarray, step: float) -> np.ndarray:
        shrunk = soft_threshold(w, step * self.lam * self.alpha)
        return shrunk / (1.0 + 2.0 * step * self.lam * (1.0 - self.alpha))


# =============================================================================
# INNER PROBLEM
# =============================================================================

@dataclass
class PenalizedLogisticProblem:
    """
    min_w  (1/n) sum_i [log(1 + e^eta_i) - y_i eta_i] + penalty(w)
    with   eta = design @ w + offset
    """
    design: np.ndarray
    labels: np.ndarray
    offset: np.ndarray
    penalty: object
    warm_start: np.ndarray

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.warm_start = np.asarray(self.warm_start, dtype=np.float64).reshape(-1)
        n, m = self.design.shape
        if self.labels.shape != (n,) or self.offset.shape != (n,):
            raise ShapeMismatchError(
                f"labels and offset must have length {n}, got {self.labels.shape} and {self.offset.shape}"
            )
        if self.warm_start.shape != (m,):
            raise ShapeMismatchError(f"warm start must have length {m}, got {self.warm_start.size}")
        for name in ('design', 'offset', 'warm_start'):
            if not np.isfinite(getattr(self, name)).all():
                raise NonFiniteError(f"problem {name} has non-finite entries")

    @property
    def n(self) -> int:
        return int(self.design.shape[0])

    @property
    def m(self) -> int:
        return int(self.design.shape[1])

    def linear_predictor(self, w: np.ndarray) -> np.ndarray:
        return self.design @ w + self.offset

    def loss(self, w: np.ndarray) -> float:
        """Unpenalized data term"""
        return float(np.mean(logistic_losses(self.linear_predictor(w), self.labels)))

    def gradient(self, w: np.ndarray) -> np.ndarray:
        """Gradient of the data term"""
        residual = sigmoid(self.linear_predictor(w)) - self.labels
        return self.design.T @ residual / self.n

    def objective(self, w: np.ndarray) -> float:
        return self.loss(w) + self.penalty.value(w)


@dataclass
class InnerSolution:
    """Result of one penalized logistic solve"""
    coef: np.ndarray
    converged: bool
    iterations: int
    step_size: float
    objective: float
    initial_objective: float
    stalled: bool = False


def _lipschitz_estimate(design: np.ndarray, seed: int, iterations: int = 30) -> float:
    """0.25 * sigma_max(design)^2 / n by power iteration; backtracking corrects underestimates"""
    n, m = design.shape
    if m == 0 or not design.any():
        return MIN_LIPSCHITZ
    v = np.random.default_rng(seed).standard_normal(m)
    v /= np.linalg.norm(v)
    sigma_sq = 0.0
    for _ in range(iterations):
        u = design.T @ (design @ v)
        sigma_sq = float(np.linalg.norm(u))
        if sigma_sq == 0.0:
            break
        v = u / sigma_sq
    return max(0.25 * sigma_sq / n, MIN_LIPSCHITZ)


def solve_penalized_logistic(problem: PenalizedLogisticProblem, cfg: SolverConfig) -> InnerSolution:
    """
    Proximal gradient with backtracking line search

    A trial point z = prox(w - grad/L, 1/L) is accepted once the quadratic
    upper bound holds at z; L grows by 1/beta per failure. The solver stops
    when the accepted step satisfies ||z - w||_inf <= inner_tol and
    returns w, so the stationarity bound holds at the returned point.

    Args:
        problem: Design, labels, offset, penalty and warm start
        cfg: Solver settings (inner_max_iter, inner_tol, beta, seed, accelerate)

    Returns:
        InnerSolution; converged=False when the iteration budget ran out,
        in which case coef is the best iterate seen
    """
    w = problem.warm_start.copy()
    objective = problem.objective(w)
    initial_objective = objective
    if problem.m == 0:
        return InnerSolution(w, True, 0, 1.0, objective, objective)

    lipschitz = _lipschitz_estimate(problem.design, cfg.seed)
    y = w.copy()
    momentum = 1.0
    converged, stalled = False, False
    iteration = 0

    for iteration in range(1, cfg.inner_max_iter + 1):
        base = y if cfg.accelerate else w
        base_loss = problem.loss(base)
        grad = problem.gradient(base)

        for _ in range(MAX_BACKTRACKS):
            trial = problem.penalty.prox(base - grad / lipschitz, 1.0 / lipschitz)
            diff = trial - base
            trial_loss = problem.loss(trial)
            if trial_loss <= base_loss + grad @ diff + 0.5 * lipschitz * (diff @ diff):
                break
            lipschitz /= cfg.line_search_beta

        step_norm = float(np.max(np.abs(diff)))
        trial_objective = trial_loss + problem.penalty.value(trial)

        if step_norm <= cfg.inner_tol:
            if cfg.accelerate and trial_objective <= objective:
                w, objective = trial, trial_objective
            converged = True
            break

        if trial_objective <= objective:
            previous = w
            w, objective = trial, trial_objective
        elif cfg.accelerate:
            y, momentum = w.copy(), 1.0
            continue
        else:
            # Rounding stall: the bound held but the objective did not drop
            converged, stalled = True, True
            break

        if cfg.accelerate:
            next_momentum = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum ** 2))
            y = w + ((momentum - 1.0) / next_momentum) * (w - previous)
            momentum = next_momentum
        else:
            y = w

    if not converged:
        logger.debug(f"inner solver hit {cfg.inner_max_iter} iterations (m={problem.m})")

    return InnerSolution(
        coef=w,
        converged=converged,
        iterations=iteration,
        step_size=1.0 / lipschitz,
        objective=objective,
        initial_objective=initial_objective,
        stalled=stalled,
    )


# =============================================================================
# INITIALIZATION
# =============================================================================

class Initialization(NamedTuple):
    """Initial model plus, per view, whether the random fallback was used"""
    model: SkpdModel
    fallback: List[bool]


def _fallback_directions(p: int, rank: int, seed: int) -> np.ndarray:
    """Seeded random orthonormal columns (p x rank)"""
    gaussian = np.random.default_rng(seed).standard_normal((p, rank))
    q, _ = np.linalg.qr(gaussian)
    signs = np.sign(q[0])
    signs[signs == 0] = 1.0
    return q * signs


def initialize(
    data: Dataset,
    cfg: ShapeConfig,
    rank: int,
    use_shift: bool = True,
    seed: int = 0,
    penalties: Optional[PenaltyConfig] = None,
    shift_spec: Optional[ShiftSpec] = None,
    rearranged: Optional[Sequence[np.ndarray]] = None,
) -> Initialization:
    """
    Spectral initialization

    A_{v,r} starts as the r-th top left singular vector of
    sum_i y_i rearrange(X_{v,i}) reshaped to the grid; B_{v,r} = all ones;
    gamma = 0. An all-zero weighted sum (e.g. no positive labels) falls
    back to seeded random orthonormal vectors.
    """
    if data.n < 1:
        raise ValueError("initialization needs at least one sample")
    if not 1 <= rank <= min(cfg.p, cfg.d):
        raise ShapeMismatchError(f"rank must be in [1, {min(cfg.p, cfg.d)}], got {rank}")

    shift_spec = shift_spec if shift_spec is not None else default_shift(cfg)
    if rearranged is None:
        stacks = [data.x] + ([shift_batch(data.x, shift_spec)] if use_shift else [])
        rearranged = [rearrange_batch(stack, cfg) for stack in stacks]

    views, fallback = [], []
    for v, xt in enumerate(rearranged):
        weighted = np.tensordot(data.y.astype(np.float64), xt, axes=1)
        if not weighted.any():
            logger.warning(f"view {v}: weighted data sum is zero, using random initial directions")
            directions = _fallback_directions(cfg.p, rank, seed + v)
            fallback.append(True)
        else:
            try:
                directions = top_r_left_singular(weighted, rank, seed=seed + v).vectors
            except ConvergenceError as exc:
                logger.warning(f"view {v}: {exc}; using a dense SVD instead")
                directions = linalg.svd(weighted, full_matrices=False)[0][:, :rank]
            fallback.append(False)
        A = directions.T.reshape((rank,) + cfg.grid)
        B = np.ones((rank,) + cfg.patch)
        views.append(FactorSet(A, B))

    model = SkpdModel(
        cfg=cfg,
        shift=shift_spec,
        views=views,
        gamma=np.zeros(data.q),
        penalties=penalties or PenaltyConfig(),
    )
    return Initialization(model, fallback)


# =============================================================================
# BLOCK PROBLEMS
# =============================================================================

def _rearranged(data: Dataset, model: SkpdModel, rearranged):
    return model.rearranged_views(data.x) if rearranged is None else rearranged


def _other_views_term(model: SkpdModel, rearranged, view: int) -> np.ndarray:
    terms = model.view_terms(rearranged)
    total = np.zeros(rearranged[0].shape[0])
    for v, term in enumerate(terms):
        if v != view:
            total += term
    return total


def build_B_problem(
    data: Dataset,
    model: SkpdModel,
    view: int,
    rearranged: Optional[Sequence[np.ndarray]] = None,
) -> PenalizedLogisticProblem:
    """
    B-update of one view: design row i, block r = X~_{v,i}^T vec(A_{v,r})

    Offset = other view's image term + z_i gamma + intercept.
    """
    rearranged = _rearranged(data, model, rearranged)
    factors = model.views[view]
    design = np.einsum('npd,rp->nrd', rearranged[view], factors.a_matrix()).reshape(data.n, -1)
    offset = _other_views_term(model, rearranged, view) + model.covariate_term(data.z)
    penalty = ElasticNetPenalty(model.penalties.lambda_b, model.penalties.alpha)
    return PenalizedLogisticProblem(design, data.y, offset, penalty, factors.B.reshape(-1))


def build_A_problem(
    data: Dataset,
    model: SkpdModel,
    view: int,
    rearranged: Optional[Sequence[np.ndarray]] = None,
) -> PenalizedLogisticProblem:
    """
    A-update of one view: design row i, block r = X~_{v,i} vec(B_{v,r})

    Offset = other view's image term + z_i gamma + intercept.
    """
    rearranged = _rearranged(data, model, rearranged)
    factors = model.views[view]
    design = np.einsum('npd,rd->nrp', rearranged[view], factors.b_matrix()).reshape(data.n, -1)
    offset = _other_views_term(model, rearranged, view) + model.covariate_term(data.z)
    penalty = L1Penalty(model.penalties.lambda_a)
    return PenalizedLogisticProblem(design, data.y, offset, penalty, factors.A.reshape(-1))


def build_gamma_problem(
    data: Dataset,
    model: SkpdModel,
    rearranged: Optional[Sequence[np.ndarray]] = None,
    fit_intercept: bool = True,
) -> Optional[PenalizedLogisticProblem]:
    """
    gamma-update: design = [z_i | 1], offset = sum_v <X~_{v,i}, C_v>

    The trailing intercept column is unpenalized. Returns None when there
    are no covariates and no intercept to fit.
    """
    if data.q != model.q:
        raise ShapeMismatchError(f"model expects q={model.q} covariates, got {data.q}")
    if data.q == 0 and not fit_intercept:
        return None
    rearranged = _rearranged(data, model, rearranged)
    offset = np.sum(model.view_terms(rearranged), axis=0)
    design, warm = data.z, model.gamma
    unpenalized: Tuple[int, ...] = ()
    if fit_intercept:
        design = np.hstack([data.z, np.ones((data.n, 1))])
        warm = np.append(model.gamma, model.intercept)
        unpenalized = (data.q,)
    penalty = L1Penalty(model.penalties.lambda_gamma, unpenalized)
    return PenalizedLogisticProblem(design, data.y, offset, penalty, warm)


def _write_back(model: SkpdModel, block: str, view: Optional[int], coef: np.ndarray, fit_intercept: bool) -> None:
    if block == 'B':
        factors = model.views[view]
        factors.B = coef.reshape(factors.B.shape).copy()
    elif block == 'A':
        factors = model.views[view]
        factors.A = coef.reshape(factors.A.shape).copy()
    else:
        if fit_intercept:
            model.gamma, model.intercept = coef[:-1].copy(), float(coef[-1])
        else:
            model.gamma = coef.copy()


# =============================================================================
# FIT
# =============================================================================

@dataclass
class FitReport:
    """
    Trace and diagnostics of one fit

    `objective_trace[0]` is the objective at initialization; every later
    entry follows one block update, labelled in `block_labels`.
    """
    objective_trace: List[float] = field(default_factory=list)
    block_labels: List[str] = field(default_factory=list)
    outer_objectives: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    nonzero_a: List[List[int]] = field(default_factory=list)
    init_fallback: List[bool] = field(default_factory=list)
    inner_nonconverged: int = 0
    train_accuracy: float = float('nan')
    n_samples: int = 0
    rank: int = 0
    use_shift: bool = True
    fold_metrics: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> 'FitReport':
        return cls(**json.loads(text))


def _check_objective(value: float, label: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteObjectiveError(f"objective became {value} after {label}")
    return value


def fit(
    data: Dataset,
    cfg: ShapeConfig,
    rank: int = 1,
    penalties: Optional[PenaltyConfig] = None,
    use_shift: bool = True,
    solver: Optional[SolverConfig] = None,
    shift_spec: Optional[ShiftSpec] = None,
) -> Tuple[SkpdModel, FitReport]:
    """
    Fit the cyclic-shift SKPD logistic model

    Args:
        data: Training samples (both classes required)
        cfg: Grid/patch geometry; cfg.full_dims must equal data.dims
        rank: Kronecker terms R per view
        penalties: Penalty strengths (defaults to PenaltyConfig())
        use_shift: Add the shifted view
        solver: Budgets and tolerances (defaults to SolverConfig())
        shift_spec: Shift of the second view (defaults to half a patch)

    Returns:
        (model, report)

    Raises:
        SingleClassError: If only one class is present
        NonFiniteObjectiveError: If the objective stops being finite
    """
    solver = solver or SolverConfig()
    penalties = penalties or PenaltyConfig()
    if data.n < 2:
        raise ValueError(f"fit needs at least 2 samples, got {data.n}")
    data.require_both_classes()
    if data.dims != cfg.full_dims:
        raise ShapeMismatchError(f"data dims {data.dims} do not match config dims {cfg.full_dims}")

    shift_spec = shift_spec if shift_spec is not None else default_shift(cfg)
    stacks = [data.x] + ([shift_batch(data.x, shift_spec)] if use_shift else [])
    rearranged = [rearrange_batch(stack, cfg) for stack in stacks]

    model, fallback = initialize(
        data, cfg, rank, use_shift, solver.seed, penalties, shift_spec, rearranged
    )
    report = FitReport(init_fallback=fallback, n_samples=data.n, rank=rank, use_shift=use_shift)
    current = _check_objective(model.objective(data, rearranged), 'initialization')
    report.objective_trace.append(current)
    report.block_labels.append('init')
    logger.info(
        f"fitting SKPD: n={data.n}, {cfg.describe()}, R={rank}, "
        f"views={len(model.views)}, q={data.q}, initial objective={current:.6f}"
    )

    def run_block(problem, block, view, label):
        nonlocal current
        if problem is None:
            return
        solution = solve_penalized_logistic(problem, solver)
        if not solution.converged:
            report.inner_nonconverged += 1
        _write_back(model, block, view, solution.coef, solver.fit_intercept)
        current = _check_objective(model.objective(data, rearranged), label)
        report.objective_trace.append(current)
        report.block_labels.append(label)
        logger.debug(f"{label}: objective={current:.10f} ({solution.iterations} inner iterations)")

    for t in range(solver.max_outer):
        previous = current
        for v in range(len(model.views)):
            run_block(build_B_problem(data, model, v, rearranged), 'B', v, f"t={t} view={v} B")
            run_block(build_A_problem(data, model, v, rearranged), 'A', v, f"t={t} view={v} A")
        gamma_problem = build_gamma_problem(data, model, rearranged, solver.fit_intercept)
        run_block(gamma_problem, 'gamma', None, f"t={t} gamma")

        report.outer_objectives.append(current)
        report.iterations = t + 1
        change = abs(previous - current) / max(abs(previous), 1e-12)
        logger.info(f"outer iteration {t + 1}: objective={current:.6f} (relative change {change:.2e})")
        if change < solver.outer_tol:
            report.converged = True
            break

    if report.inner_nonconverged:
        logger.warning(f"{report.inner_nonconverged} block updates hit the inner iteration budget")
    report.nonzero_a = [view.nonzero_a() for view in model.views]
    eta = model.decision_function(data, rearranged)
    report.train_accuracy = float(np.mean((sigmoid(eta) >= 0.5) == data.y))
    logger.info(
        f"fit finished after {report.iterations} iterations "
        f"(converged={report.converged}, train accuracy={report.train_accuracy:.4f})"
    )
    return model, report
