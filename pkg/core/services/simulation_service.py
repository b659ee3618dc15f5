"""
Synthetic Shape Datasets

Signal-plus-noise classification data:

    group 1 (signal):  X_i = template + N(0, sigma^2) noise
    group 0:           X_i = baseline (default 0) + N(0, sigma^2) noise
    score:             t_i = <X_i, template> + eps_i,  eps_i ~ N(0, label_noise_std^2)
    label:             y_i = 1 iff sigmoid(standardized t_i) >= 0.5

Templates are rasterized procedurally: filled disks, rings (annuli),
four-lobe "butterfly" shapes, and 3D balls. Everything is reproducible from
the seed.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from core.models.skpd_model import Dataset, sigmoid
from core.utils.errors import SingleClassError, TemplateError

logger = logging.getLogger(__name__)

TEMPLATE_NAMES = ('disks', 'rings', 'lobes', 'two_balls', 'one_ball', 'custom')
MAX_LABEL_RESAMPLES = 10


@dataclass(frozen=True, eq=False)
class SignalTemplate:
    """Grayscale template with values in [0, 1], stored as a (D1, D2, D3) array"""
    name: str
    values: np.ndarray
    params: Dict = field(default_factory=dict)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.values.shape)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


# =============================================================================
# RASTERIZATION
# =============================================================================

def _grid_dims(dims: Sequence[int]) -> Tuple[int, int, int]:
    dims = tuple(int(s) for s in dims)
    if not 1 <= len(dims) <= 3 or min(dims) < 1:
        raise TemplateError(f"template dims must be 1 to 3 positive ints, got {dims}")
    return dims + (1,) * (3 - len(dims))


def _check_inside(center, extent, dims, what: str) -> None:
    """The bounding box center +/- extent must fit inside the grid"""
    for c, e, n in zip(center, extent, dims):
        if c - e < 0 or c + e > n - 1:
            raise TemplateError(f"{what} at {tuple(center)} with extent {tuple(extent)} leaves the grid {dims}")


def _squared_distance(dims, center) -> np.ndarray:
    axes = np.indices(dims, dtype=np.float64)
    center = tuple(center) + (0.0,) * (3 - len(center))
    return sum((axes[k] - center[k]) ** 2 for k in range(3))


def _planar(dims, name: str) -> None:
    if dims[2] != 1:
        raise TemplateError(f"'{name}' is a 2D template, got dims {dims}")


def _disks(dims, params) -> np.ndarray:
    _planar(dims, 'disks')
    side = min(dims[:2])
    centers = params.get('centers', [(0.35 * dims[0], 0.35 * dims[1]), (0.65 * dims[0], 0.65 * dims[1])])
    radii = params.get('radii', [0.15 * side] * len(centers))
    values = np.zeros(dims)
    for center, radius in zip(centers, radii):
        if radius < 0:
            raise TemplateError(f"disk radius must be >= 0, got {radius}")
        _check_inside(center, (radius, radius), dims, 'disk')
        values[_squared_distance(dims, center) < radius ** 2] = 1.0
    return values


def _rings(dims, params) -> np.ndarray:
    _planar(dims, 'rings')
    side = min(dims[:2])
    centers = params.get('centers', [(0.5 * dims[0], 0.5 * dims[1])])
    outer = params.get('outer_radii', [0.3 * side] * len(centers))
    inner = params.get('inner_radii', [0.18 * side] * len(centers))
    values = np.zeros(dims)
    for center, r_in, r_out in zip(centers, inner, outer):
        if not 0 <= r_in <= r_out:
            raise TemplateError(f"ring radii must satisfy 0 <= inner <= outer, got {r_in}, {r_out}")
        _check_inside(center, (r_out, r_out), dims, 'ring')
        dist = _squared_distance(dims, center)
        values[(dist >= r_in ** 2) & (dist < r_out ** 2)] = 1.0
    return values


def _lobes(dims, params) -> np.ndarray:
    """Two large upper and two small lower ellipses mirrored about the vertical axis"""
    _planar(dims, 'lobes')
    d1, d2 = dims[0], dims[1]
    center = params.get('center', (0.5 * d1, 0.5 * d2))
    offset = params.get('offset', (0.15 * d1, 0.17 * d2))
    upper = params.get('upper_axes', (0.13 * d1, 0.14 * d2))
    lower = params.get('lower_axes', (0.09 * d1, 0.1 * d2))
    axes = np.indices(dims, dtype=np.float64)
    values = np.zeros(dims)
    for row_sign, semi in ((-1, upper), (1, lower)):
        for col_sign in (-1, 1):
            c = (center[0] + row_sign * offset[0], center[1] + col_sign * offset[1])
            _check_inside(c, semi, dims, 'lobe')
            inside = ((axes[0] - c[0]) / semi[0]) ** 2 + ((axes[1] - c[1]) / semi[1]) ** 2 < 1.0
            values[inside] = 1.0
    return values


def _balls(dims, params, count: int) -> np.ndarray:
    side = min(dims)
    centers = params.get('centers', [
        (0.3 * dims[0], 0.3 * dims[1], 0.5 * dims[2]),
        (0.7 * dims[0], 0.7 * dims[1], 0.5 * dims[2]),
    ])
    radius = params.get('radius', 0.15 * side)
    if radius < 0:
        raise TemplateError(f"ball radius must be >= 0, got {radius}")
    values = np.zeros(dims)
    for center in centers[:count]:
        _check_inside(center, (radius,) * 3, dims, 'ball')
        values[_squared_distance(dims, center) < radius ** 2] = 1.0
    return values


def _custom(dims, params) -> np.ndarray:
    if 'values' not in params:
        raise TemplateError("custom template needs params['values']")
    values = np.asarray(params['values'], dtype=np.float64).reshape(dims)
    if not np.isfinite(values).all() or values.min() < 0 or values.max() > 1:
        raise TemplateError("custom template values must be finite and within [0, 1]")
    return values


def make_template(name: str, dims: Sequence[int], params: Optional[Dict] = None) -> SignalTemplate:
    """
    Rasterize a named template

    Args:
        name: One of disks, rings, lobes, two_balls, one_ball, custom
        dims: Grid dims (2D templates need D3 == 1)
        params: Shape parameters; omitted ones default to proportions of dims.
            disks: centers, radii. rings: centers, inner_radii, outer_radii.
            lobes: center, offset, upper_axes, lower_axes.
            two_balls / one_ball: centers (two), radius; one_ball keeps the first.
            custom: values.

    Returns:
        SignalTemplate with 0/1 values (custom: the given values)

    Raises:
        TemplateError: Unknown name, invalid parameters or shapes leaving the grid

    Example:
        >>> make_template('disks', (64, 64), {'centers': [(32, 32)], 'radii': [10]}).values.sum()
    """
    params = dict(params or {})
    dims = _grid_dims(dims)
    if name == 'disks':
        values = _disks(dims, params)
    elif name == 'rings':
        values = _rings(dims, params)
    elif name == 'lobes':
        values = _lobes(dims, params)
    elif name == 'two_balls':
        values = _balls(dims, params, 2)
    elif name == 'one_ball':
        values = _balls(dims, params, 1)
    elif name == 'custom':
        values = _custom(dims, params)
    else:
        raise TemplateError(f"unknown template '{name}', expected one of {', '.join(TEMPLATE_NAMES)}")
    values.setflags(write=False)
    return SignalTemplate(name, values, params)


# =============================================================================
# SAMPLING
# =============================================================================

@dataclass(frozen=True)
class SimConfig:
    """
    Simulation settings

    Attributes:
        template: Signal placed on group-1 samples
        n: Total samples (even; n/2 per group)
        sigma: Noise standard deviation
        label_noise_std: Standard deviation of the score noise eps
        seed: Master seed
        train_fraction: Share of samples in the training split, in (0, 1]
        baseline: Optional base tensor for group-0 samples
        n_covariates: Columns of z ~ N(0, I)
        covariate_effect: Weight of z[:, 0] in the standardized score
    """
    template: SignalTemplate
    n: int = 1000
    sigma: float = 1.0
    label_noise_std: float = 1.0
    seed: int = 0
    train_fraction: float = 0.8
    baseline: Optional[SignalTemplate] = None
    n_covariates: int = 0
    covariate_effect: float = 0.0

    def __post_init__(self):
        if self.n < 2 or self.n % 2:
            raise ValueError(f"n must be even and >= 2, got {self.n}")
        if self.sigma < 0 or self.label_noise_std < 0:
            raise ValueError("sigma and label_noise_std must be >= 0")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.baseline is not None and self.baseline.dims != self.template.dims:
            raise TemplateError(f"baseline dims {self.baseline.dims} differ from template dims {self.template.dims}")
        if self.n_covariates < 0:
            raise ValueError("n_covariates must be >= 0")
        if self.covariate_effect and not self.n_covariates:
            raise ValueError("covariate_effect needs n_covariates >= 1")


class SimulatedSamples(NamedTuple):
    """All samples before splitting, with their signal group and raw score"""
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    groups: np.ndarray
    scores: np.ndarray


def _labels(raw: np.ndarray, covariate_shift: np.ndarray) -> np.ndarray:
    spread = raw.std()
    standardized = (raw - raw.mean()) / spread if spread > 0 else np.zeros_like(raw)
    return (sigmoid(standardized + covariate_shift) >= 0.5).astype(np.int64)


def simulate_samples(cfg: SimConfig) -> SimulatedSamples:
    """
    Draw all n samples

    Raises:
        SingleClassError: If every label draw (the first plus
            MAX_LABEL_RESAMPLES redraws of eps) lands in one class
    """
    rng = np.random.default_rng(cfg.seed)
    template = cfg.template.values
    baseline = np.zeros_like(template) if cfg.baseline is None else cfg.baseline.values

    groups = rng.permutation(np.repeat(np.array([1, 0], dtype=np.int64), cfg.n // 2))
    noise = rng.standard_normal((cfg.n,) + template.shape) * cfg.sigma
    base = np.where(groups[:, None, None, None] == 1, template, baseline)
    x = base + noise
    z = rng.standard_normal((cfg.n, cfg.n_covariates))
    covariate_shift = cfg.covariate_effect * z[:, 0] if cfg.n_covariates else np.zeros(cfg.n)

    signal = np.tensordot(x, template, axes=3)
    for attempt in range(MAX_LABEL_RESAMPLES + 1):
        scores = signal + rng.normal(0.0, cfg.label_noise_std, cfg.n) if cfg.label_noise_std else signal
        y = _labels(scores, covariate_shift)
        if 0 < y.sum() < cfg.n:
            break
        logger.warning(f"label draw {attempt + 1} produced a single class, resampling score noise")
    else:
        raise SingleClassError(
            f"labels stayed single-class after {MAX_LABEL_RESAMPLES} resamples "
            f"(template '{cfg.template.name}', sigma={cfg.sigma})"
        )
    return SimulatedSamples(x, y, z, groups, scores)


def split(samples: SimulatedSamples, train_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified train/test split (unstratified if a class has fewer than 2 members)"""
    indices = np.arange(samples.y.size)
    if train_fraction >= 1.0:
        train_idx, test_idx = indices, indices[:0]
    else:
        stratify = samples.y if np.bincount(samples.y, minlength=2).min() >= 2 else None
        if stratify is None:
            logger.warning("a class has fewer than 2 samples, splitting without stratification")
        train_idx, test_idx = train_test_split(
            indices, train_size=train_fraction, stratify=stratify, random_state=seed
        )
        train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)

    def take(idx):
        return Dataset(samples.x[idx], samples.y[idx], samples.z[idx])

    return take(train_idx), take(test_idx)


def generate(cfg: SimConfig) -> Tuple[Dataset, Dataset]:
    """
    Simulate a dataset and split it into (train, test)

    Example:
        template = make_template('disks', (32, 32))
        train, test = generate(SimConfig(template, n=200, sigma=1.0, seed=3))
    """
    samples = simulate_samples(cfg)
    train, test = split(samples, cfg.train_fraction, cfg.seed)
    counts = np.bincount(samples.y, minlength=2)
    logger.info(
        f"simulated {cfg.n} '{cfg.template.name}' samples (sigma={cfg.sigma}, "
        f"{counts[1]} positive / {counts[0]} negative), train={train.n}, test={test.n}"
    )
    return train, test
