"""
Two-Stage Slice Selection Pipeline

Stage 1 fits a 3D cyclic-shift SKPD model on whole volumes and scores every
slice of every plane by the total absolute mass of the estimated
coefficients (both views mapped back to original coordinates). Stage 2
takes the best slice per plane from every subject and fits one 2D model per
plane on those slices, with the same labels and covariates.

Planes index the volume axes:
    axial    -> axis 0
    coronal  -> axis 1
    sagittal -> axis 2
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from core.models.serialization import save_model
from core.models.skpd_model import Dataset, PenaltyConfig, SkpdModel
from core.services.evaluation_service import FitSettings, MetricSummary, cross_validate
from core.services.optimizer_service import FitReport, SolverConfig
from core.tensors.tensor_ops import ArrayLike, ShapeConfig, as_tensor
from core.utils.errors import InsufficientClassCountError, ShapeMismatchError

logger = logging.getLogger(__name__)

PLANES = ('axial', 'coronal', 'sagittal')
PLANE_AXIS = {'axial': 0, 'coronal': 1, 'sagittal': 2}


def _plane_axis(plane: str) -> int:
    if plane not in PLANE_AXIS:
        raise ValueError(f"plane must be one of {', '.join(PLANES)}, got '{plane}'")
    return PLANE_AXIS[plane]


def _volume(c_hat: ArrayLike) -> np.ndarray:
    tensor = as_tensor(c_hat)
    if tensor.order != 3:
        raise ShapeMismatchError(f"slice scoring needs a 3D tensor, got order {tensor.order}")
    return tensor.data


def take_slice(volume: np.ndarray, plane: str, index: int) -> np.ndarray:
    """2D slice `index` of a (D1, D2, D3) volume along the plane's axis"""
    axis = _plane_axis(plane)
    if not 0 <= index < volume.shape[axis]:
        raise IndexError(f"{plane} slice {index} outside [0, {volume.shape[axis] - 1}]")
    return np.take(volume, index, axis=axis)


# =============================================================================
# SLICE SELECTION
# =============================================================================

@dataclass
class SliceSelection:
    """
    Per-plane slice scores and the selected slice

    `selected[plane]` is the argmax of `scores[plane]`, lowest index on
    ties. `degenerate` is set when every score is zero.
    """
    scores: Dict[str, np.ndarray]
    selected: Dict[str, int]
    degenerate: bool = False
    method: str = 'data'

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for plane in PLANES:
            for index, score in enumerate(self.scores.get(plane, [])):
                rows.append({
                    'plane': plane,
                    'slice': index,
                    'score': float(score),
                    'selected': index == self.selected[plane],
                })
        return pd.DataFrame(rows, columns=['plane', 'slice', 'score', 'selected'])

    def describe(self) -> str:
        lines = [f"Slice selection ({self.method})"]
        for plane in PLANES:
            scores = self.scores.get(plane)
            best = f", score {scores[self.selected[plane]]:.6g}" if scores is not None and len(scores) else ''
            lines.append(f"  {plane:<9} slice {self.selected[plane]}{best}")
        if self.degenerate:
            lines.append("  warning: all slice scores are zero, selection fell back to slice 0")
        return "\n".join(lines)


def slice_scores(c_hat: ArrayLike) -> SliceSelection:
    """
    s_{p,k} = sum of |c_hat| over slice k of plane p

    Example:
        volume = np.zeros((8, 8, 8)); volume[2, 5, 7] = 1.0
        slice_scores(volume).selected   # {'axial': 2, 'coronal': 5, 'sagittal': 7}
    """
    magnitude = np.abs(_volume(c_hat))
    scores, selected = {}, {}
    for plane in PLANES:
        axis = PLANE_AXIS[plane]
        other = tuple(a for a in range(3) if a != axis)
        scores[plane] = magnitude.sum(axis=other)
        selected[plane] = int(np.argmax(scores[plane]))
    degenerate = not magnitude.any()
    if degenerate:
        logger.warning("coefficient map is all zero, every plane selects slice 0")
    return SliceSelection(scores, selected, degenerate)


def median_slice_selection(dims: Sequence[int]) -> SliceSelection:
    """Fixed middle slice D_k // 2 per plane, the data-independent baseline"""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ShapeMismatchError(f"median selection needs 3D dims, got {dims}")
    selected = {plane: dims[PLANE_AXIS[plane]] // 2 for plane in PLANES}
    scores = {plane: np.zeros(dims[PLANE_AXIS[plane]]) for plane in PLANES}
    return SliceSelection(scores, selected, method='median')


def extract_slices(data: Dataset, plane: str, index: int) -> Dataset:
    """n-sample 2D dataset of slice `index` along `plane`, same labels and covariates"""
    axis = _plane_axis(plane)
    if not 0 <= index < data.x.shape[axis + 1]:
        raise IndexError(f"{plane} slice {index} outside [0, {data.x.shape[axis + 1] - 1}]")
    slices = np.take(data.x, index, axis=axis + 1)
    return Dataset(slices, data.y.copy(), data.z.copy())


# =============================================================================
# COVARIATES
# =============================================================================

class CovariateScaler:
    """
    Standardize continuous covariate columns

    Columns whose values are all 0/1 are treated as binary and left as
    they are, as are constant columns.

    Example:
        scaler = CovariateScaler().fit(z)
        z_std = scaler.transform(z)
        np.allclose(scaler.inverse_transform(z_std), z)   # True
    """

    def __init__(self):
        self.scaled: Optional[np.ndarray] = None
        self.binary: Optional[np.ndarray] = None
        self._scaler: Optional[StandardScaler] = None

    def fit(self, z: np.ndarray) -> 'CovariateScaler':
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2:
            raise ShapeMismatchError(f"covariates must be (n, q), got shape {z.shape}")
        self.binary = np.array([np.isin(column, (0.0, 1.0)).all() for column in z.T], dtype=bool)
        spread = z.std(axis=0) if z.shape[0] else np.zeros(z.shape[1])
        self.scaled = ~self.binary & (spread > 0)
        self._scaler = StandardScaler().fit(z[:, self.scaled]) if self.scaled.any() else None
        logger.debug(f"covariate scaler: {int(self.scaled.sum())} of {z.shape[1]} columns standardized")
        return self

    def _check(self, z: np.ndarray) -> np.ndarray:
        if self.scaled is None:
            raise RuntimeError("CovariateScaler must be fitted first")
        z = np.array(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.scaled.size:
            raise ShapeMismatchError(f"expected {self.scaled.size} covariate columns, got shape {z.shape}")
        return z

    def transform(self, z: np.ndarray) -> np.ndarray:
        z = self._check(z)
        if self._scaler is not None:
            z[:, self.scaled] = self._scaler.transform(z[:, self.scaled])
        return z

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        z = self._check(z)
        if self._scaler is not None:
            z[:, self.scaled] = self._scaler.inverse_transform(z[:, self.scaled])
        return z

    def fit_transform(self, z: np.ndarray) -> np.ndarray:
        return self.fit(z).transform(z)

    @property
    def mean_(self) -> np.ndarray:
        mean = np.zeros(self.scaled.size)
        if self._scaler is not None:
            mean[self.scaled] = self._scaler.mean_
        return mean

    @property
    def scale_(self) -> np.ndarray:
        scale = np.ones(self.scaled.size)
        if self._scaler is not None:
            scale[self.scaled] = self._scaler.scale_
        return scale


# =============================================================================
# TWO-STAGE RUN
# =============================================================================

@dataclass
class TwoStageResult:
    """Stage-1 model and selection plus one Stage-2 model per plane"""
    model3d: SkpdModel
    report3d: FitReport
    selection: SliceSelection
    plane_models: Dict[str, SkpdModel] = field(default_factory=dict)
    plane_reports: Dict[str, FitReport] = field(default_factory=dict)
    plane_metrics: Dict[str, MetricSummary] = field(default_factory=dict)
    scaler: Optional[CovariateScaler] = None

    def metrics_frame(self) -> pd.DataFrame:
        rows = []
        for plane in PLANES:
            summary = self.plane_metrics.get(plane)
            rows.append({
                'plane': plane,
                'slice': self.selection.selected[plane],
                'mean_acc': summary.mean_acc if summary else float('nan'),
                'sd_acc': summary.sd_acc if summary else float('nan'),
                'mean_auc': summary.mean_auc if summary else float('nan'),
                'sd_auc': summary.sd_auc if summary else float('nan'),
            })
        return pd.DataFrame(rows)


def _plane_config(cfg2d, plane: str) -> ShapeConfig:
    if isinstance(cfg2d, ShapeConfig):
        return cfg2d
    return cfg2d[plane]


def run_two_stage(
    data3d: Dataset,
    cfg3d: ShapeConfig,
    cfg2d: Union[ShapeConfig, Mapping[str, ShapeConfig]],
    penalties: Optional[PenaltyConfig] = None,
    solver: Optional[SolverConfig] = None,
    rank: int = 1,
    use_shift: bool = True,
    folds: int = 5,
    seed: int = 0,
    selection: str = 'data',
    standardize_covariates: bool = False,
    progress: bool = False,
) -> TwoStageResult:
    """
    Data-driven slice selection followed by per-plane 2D models

    Args:
        data3d: Volumes (n, D1, D2, D3) with labels and covariates
        cfg3d: Geometry of the Stage-1 model
        cfg2d: Geometry of the Stage-2 models, shared or per plane
        penalties: Penalties for every fit
        solver: Solver settings for every fit
        rank: Kronecker rank R of every model
        use_shift: Fit cyclic-shift (two-view) models
        folds: CV folds for the per-plane metrics (skipped if a class is too small)
        seed: Fold seed
        selection: 'data' (argmax of slice scores) or 'median'
        standardize_covariates: Standardize continuous covariates first

    Returns:
        TwoStageResult
    """
    if selection not in ('data', 'median'):
        raise ValueError(f"selection must be 'data' or 'median', got '{selection}'")
    if data3d.x.shape[-1] < 2:
        raise ShapeMismatchError(f"two-stage selection needs volumes, got sample dims {data3d.dims}")
    penalties = penalties or PenaltyConfig()
    solver = solver or SolverConfig(seed=seed)
    data3d.require_both_classes()

    scaler = None
    if standardize_covariates and data3d.q:
        scaler = CovariateScaler()
        data3d = Dataset(data3d.x, data3d.y, scaler.fit_transform(data3d.z))

    stage1 = FitSettings(cfg3d, rank, penalties, use_shift, solver)
    logger.info(f"stage 1: fitting 3D model on {data3d.n} volumes")
    model3d, report3d = stage1.fit(data3d)

    if selection == 'median':
        chosen = median_slice_selection(data3d.dims)
    else:
        chosen = slice_scores(model3d.magnitude_map())
    logger.info(chosen.describe())

    result = TwoStageResult(model3d, report3d, chosen, scaler=scaler)
    for plane in PLANES:
        data2d = extract_slices(data3d, plane, chosen.selected[plane])
        settings = replace(stage1, cfg=_plane_config(cfg2d, plane))
        logger.info(f"stage 2: fitting {plane} model on slice {chosen.selected[plane]}")
        result.plane_models[plane], result.plane_reports[plane] = settings.fit(data2d)
        try:
            result.plane_metrics[plane] = cross_validate(data2d, settings, folds, seed, progress)
        except InsufficientClassCountError as exc:
            logger.warning(f"{plane}: skipping cross-validation ({exc})")
    return result


def save_two_stage(result: TwoStageResult, out_dir: Union[str, Path]) -> List[Path]:
    """Selection report (text + CSV), per-plane metrics and the four model files"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        save_model(result.model3d, out_dir / 'model_3d.skpd'),
        out_dir / 'slice_selection.txt',
        out_dir / 'slice_scores.csv',
        out_dir / 'plane_metrics.csv',
    ]
    written[1].write_text(result.selection.describe() + "\n")
    result.selection.to_frame().to_csv(written[2], index=False)
    result.metrics_frame().to_csv(written[3], index=False)
    for plane, model in result.plane_models.items():
        written.append(save_model(model, out_dir / f"model_{plane}.skpd"))
    return written


# =============================================================================
# COEFFICIENT MAPS
# =============================================================================

def _map_slice(c_hat: ArrayLike, plane: Optional[str], slice_index: Optional[int]) -> np.ndarray:
    tensor = as_tensor(c_hat)
    if tensor.order == 3 and tensor.dims[2] > 1:
        if plane is None or slice_index is None:
            raise ValueError("a 3D coefficient map needs a plane and a slice index")
        return np.abs(take_slice(tensor.data, plane, slice_index))
    return np.abs(tensor.data[:, :, 0])


def pgm_bytes(values: np.ndarray) -> bytes:
    """8-bit binary PGM (P5) of a 2D array, min-max scaled to 0..255"""
    low, high = float(values.min()), float(values.max())
    if high > low:
        pixels = np.rint((values - low) / (high - low) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(values.shape, dtype=np.uint8)
    rows, cols = values.shape
    return f"P5\n{cols} {rows}\n255\n".encode('ascii') + pixels.tobytes()


def read_coefficient_csv(path: Union[str, Path]) -> np.ndarray:
    """Values written by `export_coefficient_map(format='csv')`"""
    return pd.read_csv(path, header=None, float_precision='round_trip').to_numpy(dtype=np.float64)


def export_coefficient_map(
    c_hat: ArrayLike,
    plane: Optional[str],
    slice_index: Optional[int],
    out_dir: Union[str, Path],
    formats: Sequence[str] = ('pgm', 'csv'),
    stem: str = 'coefficients',
) -> List[Path]:
    """
    Write |coefficients| of one slice (or of a 2D map)

    pgm: 8-bit min-max scaled image plus a `<stem>.pgm.txt` sidecar with the
    scale; csv: exact values, re-readable with `read_coefficient_csv`.
    """
    values = _map_slice(c_hat, plane, slice_index)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == 'pgm':
            path = out_dir / f"{stem}.pgm"
            path.write_bytes(pgm_bytes(values))
            low, high = float(values.min()), float(values.max())
            sidecar = out_dir / f"{stem}.pgm.txt"
            lines = [f"plane={plane or 'none'}", f"slice={slice_index if slice_index is not None else 'none'}",
                     f"min={low!r}", f"max={high!r}"]
            if high > low:
                lines.append(f"scale={255.0 / (high - low)!r}")
            else:
                lines.append("zero dynamic range: all pixels written as 0")
            sidecar.write_text("\n".join(lines) + "\n")
            written.extend([path, sidecar])
        elif fmt == 'csv':
            path = out_dir / f"{stem}.csv"
            pd.DataFrame(values).to_csv(path, header=False, index=False, float_format='%.17g')
            written.append(path)
        else:
            raise ValueError(f"unknown coefficient map format '{fmt}', expected 'pgm' or 'csv'")
    logger.info(f"wrote coefficient map {stem} ({', '.join(formats)}) to {out_dir}")
    return written


def plot_coefficient_map(
    c_hat: ArrayLike,
    path: Union[str, Path],
    plane: Optional[str] = None,
    slice_index: Optional[int] = None,
    title: Optional[str] = None,
) -> Path:
    """PNG heatmap of |coefficients| of a 2D map or one slice of a 3D map"""
    values = _map_slice(c_hat, plane, slice_index)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    image = ax.imshow(values, cmap='hot', interpolation='nearest')
    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
    ax.set_title(title or (f"|C| {plane} slice {slice_index}" if plane else "|C|"))
    ax.set_xticks([])
    ax.set_yticks([])
    fig.savefig(path, dpi=100, bbox_inches='tight')
    plt.close(fig)
    return path
