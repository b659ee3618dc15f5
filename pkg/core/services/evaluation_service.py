"""
Evaluation Service

Metrics (accuracy, AUC), stratified k-fold cross-validation, sequential
hyperparameter tuning, and experiment sweeps over patch size, noise level,
shift on/off and penalty grids.

Sweep cells are independent: every random draw in a cell comes from seeds
derived by hashing a key with the master seed. The data seed depends only
on the data-defining part of the cell (template and sigma), so cells that
differ only in model settings (patch, shift, penalties) see the same
samples and the same folds.
"""

import hashlib
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedKFold
from tqdm import tqdm

from core.models.skpd_model import Dataset, PenaltyConfig, SkpdModel
from core.services.optimizer_service import FitReport, SolverConfig, fit
from core.services.simulation_service import SimConfig, make_template, simulate_samples
from core.tensors.cyclic_shift import ShiftSpec
from core.tensors.tensor_ops import ShapeConfig
from core.utils.errors import InsufficientClassCountError, ShapeMismatchError, SingleClassError, SkpdError

logger = logging.getLogger(__name__)


# =============================================================================
# METRICS
# =============================================================================

def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Mean of [prediction == label]"""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or labels.size == 0:
        raise ShapeMismatchError(f"need equal nonempty shapes, got {predictions.shape} and {labels.shape}")
    return float(np.mean(predictions == labels))


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """
    Area under the ROC curve (Mann-Whitney statistic, ties count 1/2)

    Raises:
        SingleClassError: If labels contain only one class
    """
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeMismatchError(f"scores {scores.shape} and labels {labels.shape} differ")
    if np.unique(labels).size < 2:
        raise SingleClassError("AUC needs both classes")
    return float(roc_auc_score(labels, scores))


@dataclass
class MetricSummary:
    """Mean and SD (ddof=1) of per-fold accuracy and AUC"""
    mean_acc: float
    sd_acc: float
    mean_auc: float
    sd_auc: float
    fold_acc: List[float] = field(default_factory=list)
    fold_auc: List[float] = field(default_factory=list)
    fold_errors: List[Optional[str]] = field(default_factory=list)
    fold_reports: List[Optional[FitReport]] = field(default_factory=list, repr=False, compare=False)

    @property
    def n_folds(self) -> int:
        return len(self.fold_errors)

    @property
    def n_failed(self) -> int:
        return sum(error is not None for error in self.fold_errors)

    @staticmethod
    def _mean_sd(values: Sequence[float]) -> Tuple[float, float]:
        values = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
        if values.size == 0:
            return float('nan'), float('nan')
        sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        return float(values.mean()), sd

    @classmethod
    def from_folds(
        cls,
        fold_acc: Sequence[float],
        fold_auc: Sequence[float],
        fold_errors: Optional[Sequence[Optional[str]]] = None,
        fold_reports: Optional[Sequence[Optional[FitReport]]] = None,
    ) -> 'MetricSummary':
        mean_acc, sd_acc = cls._mean_sd(fold_acc)
        mean_auc, sd_auc = cls._mean_sd(fold_auc)
        return cls(
            mean_acc, sd_acc, mean_auc, sd_auc,
            list(fold_acc), list(fold_auc),
            list(fold_errors) if fold_errors is not None else [None] * len(fold_acc),
            list(fold_reports) if fold_reports is not None else [],
        )

    def describe(self) -> str:
        return f"accuracy {format_mean_sd(self.mean_acc, self.sd_acc)}, AUC {format_mean_sd(self.mean_auc, self.sd_auc)}"


def format_mean_sd(mean: float, sd: float) -> str:
    """'0.9540 (0.0102)'"""
    if not np.isfinite(mean):
        return 'failed'
    return f"{mean:.4f} ({sd:.4f})"


# =============================================================================
# SPLITS AND FITTING
# =============================================================================

def stratified_kfold(data: Union[Dataset, np.ndarray], k: int, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    k stratified (train, valid) index splits

    Args:
        data: Dataset or label vector
        k: Number of folds (>= 2)
        seed: Shuffle seed

    Raises:
        InsufficientClassCountError: If a class has fewer than k members
    """
    labels = data.y if isinstance(data, Dataset) else np.asarray(data)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    counts = np.bincount(labels.astype(np.int64), minlength=2)
    if counts.min() < k:
        raise InsufficientClassCountError(
            f"each class needs at least {k} samples for {k}-fold CV, got {counts[0]} / {counts[1]}"
        )
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [(train, valid) for train, valid in splitter.split(np.zeros(labels.size), labels)]


@dataclass(frozen=True)
class FitSettings:
    """Everything `fit` needs besides the data"""
    cfg: ShapeConfig
    rank: int = 1
    penalties: PenaltyConfig = field(default_factory=PenaltyConfig)
    use_shift: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    shift_spec: Optional[ShiftSpec] = None

    def fit(self, data: Dataset) -> Tuple[SkpdModel, FitReport]:
        return fit(data, self.cfg, self.rank, self.penalties, self.use_shift, self.solver, self.shift_spec)


class HoldoutResult(NamedTuple):
    accuracy: float
    auc: float
    probabilities: np.ndarray


def evaluate_holdout(model: SkpdModel, test: Dataset) -> HoldoutResult:
    """Accuracy at threshold 0.5 and AUC of a fitted model on held-out data"""
    probabilities = model.predict_proba_batch(test)
    predictions = (probabilities >= 0.5).astype(np.int64)
    return HoldoutResult(accuracy(predictions, test.y), auc(probabilities, test.y), probabilities)


def cross_validate(
    data: Dataset,
    settings: FitSettings,
    k: int = 5,
    seed: int = 0,
    progress: bool = False,
) -> MetricSummary:
    """
    Stratified k-fold CV: fit on k-1 folds, score the held-out fold

    Fit errors are recorded per fold (NaN metrics) and the remaining folds
    still run. Each fold's FitReport gets that fold's metrics attached.
    """
    folds = stratified_kfold(data, k, seed)
    fold_acc, fold_auc, fold_errors, fold_reports = [], [], [], []
    for index, (train_idx, valid_idx) in enumerate(tqdm(folds, desc='CV folds', disable=not progress)):
        try:
            model, report = settings.fit(data.subset(train_idx))
            result = evaluate_holdout(model, data.subset(valid_idx))
        except (SkpdError, ValueError, FloatingPointError, RuntimeError) as exc:
            logger.warning(f"fold {index + 1}/{k} failed: {exc}")
            fold_acc.append(float('nan'))
            fold_auc.append(float('nan'))
            fold_errors.append(f"{type(exc).__name__}: {exc}")
            fold_reports.append(None)
            continue
        report.fold_metrics.append({'fold': index, 'accuracy': result.accuracy, 'auc': result.auc})
        fold_acc.append(result.accuracy)
        fold_auc.append(result.auc)
        fold_errors.append(None)
        fold_reports.append(report)
        logger.debug(f"fold {index + 1}/{k}: accuracy={result.accuracy:.4f}, auc={result.auc:.4f}")

    summary = MetricSummary.from_folds(fold_acc, fold_auc, fold_errors, fold_reports)
    logger.info(f"{k}-fold CV: {summary.describe()}")
    return summary


# =============================================================================
# TUNING
# =============================================================================

@dataclass
class TuningResult:
    """Selected penalties plus every evaluated grid point"""
    best: PenaltyConfig
    best_summary: MetricSummary
    table: pd.DataFrame


def tune_hyperparameters(
    data: Dataset,
    settings: FitSettings,
    alphas: Sequence[float] = (0.0, 0.2, 0.5, 0.8, 1.0),
    lambda_as: Sequence[float] = (0.01, 0.1, 1.0),
    lambda_bs: Sequence[float] = (0.001, 0.01, 0.1),
    k: int = 5,
    seed: int = 0,
    progress: bool = False,
) -> TuningResult:
    """
    Two-stage selection by mean CV AUC

    Stage 1 varies alpha with lambda_a = lambda_b = settings.penalties.lambda_a.
    Stage 2 scans the (lambda_a, lambda_b) grid at the best alpha.
    Ties keep the earlier grid point.
    """
    rows = []
    base = settings.penalties

    def evaluate(stage: str, penalties: PenaltyConfig):
        summary = cross_validate(data, replace(settings, penalties=penalties), k, seed)
        rows.append({
            'stage': stage,
            'lambda_a': penalties.lambda_a,
            'lambda_b': penalties.lambda_b,
            'alpha': penalties.alpha,
            'mean_auc': summary.mean_auc,
            'sd_auc': summary.sd_auc,
            'mean_acc': summary.mean_acc,
            'sd_acc': summary.sd_acc,
        })
        return summary

    def better(summary, incumbent):
        return incumbent is None or (np.isfinite(summary.mean_auc) and not summary.mean_auc <= incumbent.mean_auc)

    best_alpha, best_alpha_summary = None, None
    for alpha in tqdm(alphas, desc='alpha', disable=not progress):
        penalties = PenaltyConfig(base.lambda_a, base.lambda_a, base.lambda_gamma, alpha)
        summary = evaluate('alpha', penalties)
        if better(summary, best_alpha_summary):
            best_alpha, best_alpha_summary = alpha, summary

    best, best_summary = None, None
    grid = list(itertools.product(lambda_as, lambda_bs))
    for lambda_a, lambda_b in tqdm(grid, desc='lambda', disable=not progress):
        penalties = PenaltyConfig(lambda_a, lambda_b, base.lambda_gamma, best_alpha)
        summary = evaluate('lambda', penalties)
        if better(summary, best_summary):
            best, best_summary = penalties, summary

    logger.info(
        f"tuning selected lambda_a={best.lambda_a}, lambda_b={best.lambda_b}, alpha={best.alpha} "
        f"(mean AUC {best_summary.mean_auc:.4f})"
    )
    return TuningResult(best, best_summary, pd.DataFrame(rows))


# =============================================================================
# SWEEPS
# =============================================================================

def derive_seed(seed: int, key: str) -> int:
    """32-bit seed from sha256 of '<seed>:<key>'"""
    digest = hashlib.sha256(f"{seed}:{key}".encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'little')


def _patch_label(patch: Sequence[int]) -> str:
    return 'x'.join(str(int(d)) for d in patch)


@dataclass
class SweepSpec:
    """
    Grid of sweep cells

    Every combination of patches x sigmas x shifts x lambda_as x lambda_bs x
    alphas is one cell. Data per sigma is simulated once from `template`.
    """
    template: str = 'disks'
    dims: Tuple[int, ...] = (128, 128)
    n: int = 1000
    patches: List[Tuple[int, ...]] = field(default_factory=lambda: [(4, 4)])
    sigmas: List[float] = field(default_factory=lambda: [1.0])
    shifts: List[bool] = field(default_factory=lambda: [True])
    lambda_as: List[float] = field(default_factory=lambda: [0.1])
    lambda_bs: List[float] = field(default_factory=lambda: [0.001])
    alphas: List[float] = field(default_factory=lambda: [0.2])
    rank: int = 1
    folds: int = 5
    seed: int = 0
    label_noise_std: float = 1.0
    template_params: Dict = field(default_factory=dict)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def cells(self) -> List[Dict]:
        return [
            {
                'patch': tuple(patch),
                'sigma': float(sigma),
                'shift': bool(use_shift),
                'lambda_a': float(lambda_a),
                'lambda_b': float(lambda_b),
                'alpha': float(alpha),
            }
            for patch, sigma, use_shift, lambda_a, lambda_b, alpha in itertools.product(
                self.patches, self.sigmas, self.shifts, self.lambda_as, self.lambda_bs, self.alphas
            )
        ]


def cell_key(cell: Dict) -> str:
    return (
        f"patch={_patch_label(cell['patch'])}|sigma={cell['sigma']:g}|shift={int(cell['shift'])}"
        f"|lambda_a={cell['lambda_a']:g}|lambda_b={cell['lambda_b']:g}|alpha={cell['alpha']:g}"
    )


SWEEP_COLUMNS = [
    'row_type', 'cell', 'patch', 'grid', 'sigma', 'shift', 'lambda_a', 'lambda_b', 'alpha',
    'fold', 'accuracy', 'auc', 'sd_accuracy', 'sd_auc', 'error',
]


@dataclass
class SweepResult:
    """
    Per-cell summaries plus the flat CSV table

    CSV header (SWEEP_COLUMNS): row_type is 'fold' for one (cell, fold)
    pair or 'summary' for a cell's mean/SD row (fold is empty there).
    """
    summaries: Dict[str, MetricSummary]
    rows: pd.DataFrame

    def summary_rows(self) -> pd.DataFrame:
        return self.rows[self.rows['row_type'] == 'summary'].reset_index(drop=True)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(path, index=False)
        return path

    def format_table(self) -> str:
        """Aligned text table, one line per cell, 'mean (SD)' entries"""
        summary = self.summary_rows()
        table = pd.DataFrame({
            'Patch': summary['patch'],
            'Grid': summary['grid'],
            'Sigma': summary['sigma'].map(lambda s: f"{s:g}"),
            'Shift': summary['shift'].map(lambda s: 'yes' if s else 'no'),
            'lambda_a': summary['lambda_a'].map(lambda v: f"{v:g}"),
            'lambda_b': summary['lambda_b'].map(lambda v: f"{v:g}"),
            'alpha': summary['alpha'].map(lambda v: f"{v:g}"),
            'Accuracy': [format_mean_sd(m, s) for m, s in zip(summary['accuracy'], summary['sd_accuracy'])],
            'AUC': [format_mean_sd(m, s) for m, s in zip(summary['auc'], summary['sd_auc'])],
        })
        return table.to_string(index=False)


def run_sweep(spec: SweepSpec, progress: bool = True) -> SweepResult:
    """
    Run stratified CV for every cell of the grid

    A cell that fails outright (bad patch, simulation or CV error) gets an
    error summary row and the sweep moves on.
    """
    fold_seed = derive_seed(spec.seed, 'folds')
    datasets: Dict[float, Dataset] = {}
    summaries: Dict[str, MetricSummary] = {}
    rows: List[Dict] = []

    for cell in tqdm(spec.cells(), desc='sweep cells', disable=not progress):
        key = cell_key(cell)
        base_row = {
            'cell': key,
            'patch': _patch_label(cell['patch']),
            'grid': '',
            'sigma': cell['sigma'],
            'shift': cell['shift'],
            'lambda_a': cell['lambda_a'],
            'lambda_b': cell['lambda_b'],
            'alpha': cell['alpha'],
        }
        try:
            cfg = ShapeConfig.from_dims(spec.dims, cell['patch'])
            base_row['grid'] = _patch_label(cfg.grid[:len(spec.dims)])
            data = datasets.get(cell['sigma'])
            if data is None:
                template = make_template(spec.template, spec.dims, spec.template_params)
                sim = SimConfig(
                    template=template,
                    n=spec.n,
                    sigma=cell['sigma'],
                    label_noise_std=spec.label_noise_std,
                    seed=derive_seed(spec.seed, f"data|template={spec.template}|sigma={cell['sigma']:g}"),
                    train_fraction=1.0,
                )
                samples = simulate_samples(sim)
                data = datasets[cell['sigma']] = Dataset(samples.x, samples.y, samples.z)
            settings = FitSettings(
                cfg=cfg,
                rank=spec.rank,
                penalties=PenaltyConfig(cell['lambda_a'], cell['lambda_b'], 0.0, cell['alpha']),
                use_shift=cell['shift'],
                solver=spec.solver,
            )
            summary = cross_validate(data, settings, spec.folds, fold_seed)
        except (SkpdError, ValueError, FloatingPointError, RuntimeError) as exc:
            logger.warning(f"sweep cell {key} failed: {exc}")
            summary = MetricSummary.from_folds([], [], [])
            rows.append({**base_row, 'row_type': 'summary', 'fold': None,
                         'accuracy': float('nan'), 'auc': float('nan'),
                         'sd_accuracy': float('nan'), 'sd_auc': float('nan'),
                         'error': f"{type(exc).__name__}: {exc}"})
            summaries[key] = summary
            continue

        for fold, (acc, auc_value, error) in enumerate(zip(summary.fold_acc, summary.fold_auc, summary.fold_errors)):
            rows.append({**base_row, 'row_type': 'fold', 'fold': fold,
                         'accuracy': acc, 'auc': auc_value,
                         'sd_accuracy': None, 'sd_auc': None, 'error': error})
        rows.append({**base_row, 'row_type': 'summary', 'fold': None,
                     'accuracy': summary.mean_acc, 'auc': summary.mean_auc,
                     'sd_accuracy': summary.sd_acc, 'sd_auc': summary.sd_auc,
                     'error': None if not summary.n_failed else f"{summary.n_failed} folds failed"})
        summaries[key] = summary
        logger.info(f"{key}: {summary.describe()}")

    return SweepResult(summaries, pd.DataFrame(rows, columns=SWEEP_COLUMNS))
