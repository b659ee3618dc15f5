"""
Built-in Verification Suite

Numerical self-checks run by `skpd verify`:
1. Rearrangement identity: rearrange(kron(A, B)) == outer(vec A, vec B)
2. Bilinear identity: <X, kron(A, B)> == vec(A)^T rearrange(X) vec(B)
3. Shift laws: composition, norm preservation, shift-matrix form, exact inverse
4. Gradient checks of the B, A and gamma block problems (central differences)
5. Kronecker approximation bound for a half-cell-shifted block: the best
   rank-R error relative to ||C*||_F is sqrt((4 - R) / 4) for R = 1..4
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np
import pandas as pd

from core.models.skpd_model import Dataset, PenaltyConfig
from core.services.optimizer_service import (
    PenalizedLogisticProblem,
    build_A_problem,
    build_B_problem,
    build_gamma_problem,
    initialize,
)
from core.tensors.cyclic_shift import ShiftSpec, cyclic_shift_matrix, shift, unshift
from core.tensors.tensor_ops import ShapeConfig, inner, kron, kron_best_rank_r_error, rearrange

logger = logging.getLogger(__name__)

# central-difference step for gradient checks
GRADIENT_STEP = 1e-5


@dataclass
class CheckResult:
    """One named check: worst measured deviation against its tolerance"""
    name: str
    measured: float
    tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured) and self.measured <= self.tolerance)


@dataclass
class VerificationReport:
    checks: List[CheckResult] = field(default_factory=list)
    bound_table: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def format(self) -> str:
        lines = ["=" * 60, "SKPD VERIFICATION", "=" * 60]
        for check in self.checks:
            mark = '✅' if check.passed else '❌'
            lines.append(
                f"{mark} {check.name:<34} max dev {check.measured:.2e} (tol {check.tolerance:.0e}, {check.trials} trials)"
            )
        lines.append("")
        lines.append("Best rank-R Kronecker error / ||C*||_F (half-cell-shifted block)")
        lines.append(self.bound_table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        lines.append("=" * 60)
        return "\n".join(lines)


def _random_shape(rng: np.random.Generator) -> ShapeConfig:
    order = int(rng.integers(2, 4))
    grid = tuple(int(g) for g in rng.integers(1, 4, size=order))
    patch = tuple(int(d) for d in rng.integers(1, 4, size=order))
    return ShapeConfig(grid, patch)


def check_rearrangement_identity(trials: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        cfg = _random_shape(rng)
        a = rng.standard_normal(cfg.grid)
        b = rng.standard_normal(cfg.patch)
        deviation = np.abs(rearrange(kron(a, b), cfg) - np.outer(a.reshape(-1), b.reshape(-1))).max()
        worst = max(worst, float(deviation))
    return CheckResult('rearrangement identity', worst, 1e-12, trials)


def check_bilinear_identity(trials: int = 200, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        cfg = _random_shape(rng)
        a = rng.standard_normal(cfg.grid)
        b = rng.standard_normal(cfg.patch)
        x = rng.standard_normal(cfg.full_dims)
        direct = inner(x, kron(a, b))
        bilinear = float(a.reshape(-1) @ rearrange(x, cfg) @ b.reshape(-1))
        worst = max(worst, abs(direct - bilinear) / max(abs(direct), 1e-300))
    return CheckResult('bilinear identity (relative)', worst, 1e-10, trials)


def check_shift_laws(trials: int = 100, seed: int = 2) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    composition, norm, matrix_form, inverse = 0.0, 0.0, 0.0, 0.0
    for _ in range(trials):
        dims = tuple(int(v) for v in rng.integers(2, 7, size=3))
        x = rng.standard_normal(dims)
        s = ShiftSpec(tuple(int(rng.integers(0, n)) for n in dims))
        t = ShiftSpec(tuple(int(rng.integers(0, n)) for n in dims))
        combined = ShiftSpec.reduced([a + b for a, b in zip(s.offsets, t.offsets)], dims)
        composition = max(composition, float(np.abs(shift(shift(x, s), t).data - shift(x, combined).data).max()))
        norm = max(norm, abs(shift(x, s).norm() - float(np.linalg.norm(x))))
        inverse = max(inverse, float(np.abs(unshift(shift(x, s), s).data - x).max()))

        matrix = x[:, :, 0]
        q1 = cyclic_shift_matrix(dims[0], s.offsets[0])
        q2 = cyclic_shift_matrix(dims[1], s.offsets[1])
        expected = q1.T @ matrix @ q2
        planar = ShiftSpec((s.offsets[0], s.offsets[1], 0))
        matrix_form = max(matrix_form, float(np.abs(shift(matrix, planar).as_array() - expected).max()))
    return [
        CheckResult('shift composition', composition, 0.0, trials),
        CheckResult('shift norm preservation', norm, 1e-12, trials),
        CheckResult('shift matrix form', matrix_form, 0.0, trials),
        CheckResult('unshift(shift(x)) exact', inverse, 0.0, trials),
    ]


def gradient_check(problem: PenalizedLogisticProblem, rng: np.random.Generator, step: float = GRADIENT_STEP) -> float:
    """Worst relative deviation of the analytic gradient from central differences at a random point"""
    w = problem.warm_start + 0.1 * rng.standard_normal(problem.m)
    analytic = problem.gradient(w)
    numeric = np.zeros(problem.m)
    for j in range(problem.m):
        e = np.zeros(problem.m)
        e[j] = step
        numeric[j] = (problem.loss(w + e) - problem.loss(w - e)) / (2.0 * step)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-8))


def check_block_gradients(points: int = 10, seed: int = 3) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    cfg = ShapeConfig((2, 2), (2, 2))
    n = 30
    data = Dataset(
        rng.standard_normal((n, 4, 4)),
        np.arange(n) % 2,
        rng.standard_normal((n, 2)),
    )
    model = initialize(data, cfg, rank=1, use_shift=True, seed=seed, penalties=PenaltyConfig()).model
    builders = {
        'gradient check B-update': lambda: build_B_problem(data, model, 0),
        'gradient check A-update': lambda: build_A_problem(data, model, 1),
        'gradient check gamma-update': lambda: build_gamma_problem(data, model),
    }
    results = []
    for name, build in builders.items():
        worst = max(gradient_check(build(), rng) for _ in range(points))
        results.append(CheckResult(name, worst, 1e-6, points))
    return results


def shifted_block_target(grid: int = 4, patch: int = 4) -> np.ndarray:
    """All-ones patch-sized block offset by half a patch, straddling four grid cells"""
    target = np.zeros((grid * patch, grid * patch))
    start = patch // 2
    target[start:start + patch, start:start + patch] = 1.0
    return target


def kronecker_bound_table(grid: int = 4, patch: int = 4) -> pd.DataFrame:
    """Measured relative error next to sqrt((4 - R) / 4) for R = 1..4"""
    cfg = ShapeConfig((grid, grid), (patch, patch))
    target = shifted_block_target(grid, patch)
    rows = []
    for rank in range(1, 5):
        measured = kron_best_rank_r_error(target, cfg, rank, relative=True)
        bound = float(np.sqrt((4 - rank) / 4))
        rows.append({'R': rank, 'measured': measured, 'bound': bound, 'deviation': abs(measured - bound)})
    return pd.DataFrame(rows)


def run_verification(seed: int = 0) -> VerificationReport:
    """Run every check; nothing here raises on a failed check"""
    report = VerificationReport()
    steps: List[Callable[[], object]] = [
        lambda: check_rearrangement_identity(seed=seed),
        lambda: check_bilinear_identity(seed=seed + 1),
        lambda: check_shift_laws(seed=seed + 2),
        lambda: check_block_gradients(seed=seed + 3),
    ]
    for step in steps:
        result = step()
        report.checks.extend(result if isinstance(result, list) else [result])

    report.bound_table = kronecker_bound_table()
    report.checks.append(
        CheckResult('Kronecker approximation bound', float(report.bound_table['deviation'].max()), 1e-9, 4)
    )
    for check in report.checks:
        logger.info(f"{check.name}: {check.measured:.3e} (passed={check.passed})")
    return report
