"""
Experiment Config Files

Plain key=value text (comments and blank lines allowed), parsed with
python-dotenv. Keys not set in the file fall back to `Config`. A run
manifest is written in the same format with every resolved value, so it
can be passed back with --config to repeat a run.

Value formats:
    shapes        128x128, 4x4x4
    lists         1,5,10,15      (shape lists: 2x2,4x4)
    booleans      true / false
    empty value   unset (optional keys only)

Example:
    # experiments/noise_sweep.cfg
    template=disks
    dims=128x128
    sweep_sigmas=1,5,10,15
"""

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import dotenv_values

from config import Config
from core.models.skpd_model import PenaltyConfig
from core.services.evaluation_service import SweepSpec
from core.services.optimizer_service import SolverConfig
from core.services.simulation_service import SimConfig, make_template
from core.tensors.tensor_ops import ShapeConfig
from core.utils.errors import ExperimentConfigError

logger = logging.getLogger(__name__)


# =============================================================================
# VALUE CODECS
# =============================================================================

def _shape(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split('x'))


def _shape_list(text: str) -> List[Tuple[int, ...]]:
    return [_shape(item) for item in text.split(',') if item.strip()]


def _float_list(text: str) -> List[float]:
    return [float(item) for item in text.split(',') if item.strip()]


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ('true', '1', 'yes', 'on'):
        return True
    if lowered in ('false', '0', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _bool_list(text: str) -> List[bool]:
    return [_bool(item) for item in text.split(',') if item.strip()]


def _format(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return 'x'.join(str(v) for v in value)
    if isinstance(value, list):
        return ','.join(_format(v) for v in value)
    return str(value)


def _opt(parse):
    return lambda text: parse(text) if text.strip() else None


def _key(default, parse, help_text: str = ''):
    return field(default=default, metadata={'parse': parse, 'help': help_text})


def _list_key(factory, parse, help_text: str = ''):
    return field(default_factory=factory, metadata={'parse': parse, 'help': help_text})


# =============================================================================
# EXPERIMENT CONFIG
# =============================================================================

@dataclass
class ExperimentConfig:
    """Every setting a CLI run can use, resolved from defaults, file and flags"""

    # Data: a dataset directory, or a simulation when empty
    data: Optional[str] = _key(None, _opt(str), 'dataset directory (simulate when empty)')
    template: str = _key('disks', str, 'simulation template')
    dims: Tuple[int, ...] = _key((32, 32), _shape, 'simulated tensor dims')
    n: int = _key(200, int, 'simulated sample count (even)')
    sigma: float = _key(1.0, float, 'noise standard deviation')
    label_noise_std: float = _key(Config.LABEL_NOISE_STD, float, 'score noise standard deviation')
    train_fraction: float = _key(Config.TRAIN_FRACTION, float, 'training share of simulated samples')
    baseline: Optional[str] = _key(None, _opt(str), 'template for class-0 samples')
    n_covariates: int = _key(0, int, 'simulated covariate columns')
    covariate_effect: float = _key(0.0, float, 'weight of the first covariate in the score')

    # Geometry and model
    patch: Optional[Tuple[int, ...]] = _key(Config.PATCH, _opt(_shape), 'patch dims d')
    grid: Optional[Tuple[int, ...]] = _key(None, _opt(_shape), 'grid dims p (overrides patch)')
    rank: int = _key(Config.RANK, int, 'Kronecker terms per view')
    shift: bool = _key(Config.USE_SHIFT, _bool, 'add the half-patch shifted view')
    lambda_a: float = _key(Config.LAMBDA_A, float, 'L1 penalty on A')
    lambda_b: float = _key(Config.LAMBDA_B, float, 'elastic-net penalty on B')
    lambda_gamma: float = _key(Config.LAMBDA_GAMMA, float, 'L1 penalty on gamma')
    alpha: float = _key(Config.ALPHA, float, 'L1 share of the B penalty')

    # Solver
    max_outer: int = _key(Config.MAX_OUTER, int, 'outer iterations')
    outer_tol: float = _key(Config.OUTER_TOL, float, 'relative objective change to stop')
    inner_max_iter: int = _key(Config.INNER_MAX_ITER, int, 'inner iterations per block')
    inner_tol: float = _key(Config.INNER_TOL, float, 'inner stationarity tolerance')
    line_search_beta: float = _key(Config.LINE_SEARCH_BETA, float, 'backtracking factor')
    accelerate: bool = _key(False, _bool, 'momentum in the inner solver')
    fit_intercept: bool = _key(True, _bool, 'fit an unpenalized intercept')

    # Evaluation
    folds: int = _key(Config.FOLDS, int, 'CV folds')
    seed: int = _key(Config.SEED, int, 'master seed')

    # Sweep grids
    sweep_patches: List[Tuple[int, ...]] = _list_key(list, _shape_list, 'patch dims per cell')
    sweep_sigmas: List[float] = _list_key(list, _float_list, 'noise levels')
    sweep_shifts: List[bool] = _list_key(list, _bool_list, 'shift on/off')
    sweep_lambda_a: List[float] = _list_key(list, _float_list, 'lambda_a grid')
    sweep_lambda_b: List[float] = _list_key(list, _float_list, 'lambda_b grid')
    sweep_alpha: List[float] = _list_key(list, _float_list, 'alpha grid')

    # Two-stage slice pipeline
    patch_2d: Optional[Tuple[int, ...]] = _key(None, _opt(_shape), 'patch dims of the per-plane models')
    selection: str = _key('data', str, 'slice selection: data or median')
    standardize_covariates: bool = _key(False, _bool, 'standardize continuous covariates')

    # Output
    out: str = _key(str(Config.OUTPUT_DIR), str, 'output directory')

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: Dict[str, Optional[str]], source: str = '<mapping>') -> 'ExperimentConfig':
        """
        Parse raw string values

        Raises:
            ExperimentConfigError: Unknown keys or unparsable values
        """
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ExperimentConfigError(f"{source}: unknown keys {', '.join(unknown)}")
        parsed = {}
        for key, raw in values.items():
            try:
                parsed[key] = known[key].metadata['parse'](raw or '')
            except (TypeError, ValueError) as exc:
                raise ExperimentConfigError(f"{source}: cannot parse {key}='{raw}': {exc}") from exc
        return cls(**parsed)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'ExperimentConfig':
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_mapping(dotenv_values(path), source=str(path))

    def merge(self, overrides: Dict[str, Any]) -> 'ExperimentConfig':
        """New config with every non-None override applied"""
        unknown = sorted(set(overrides) - set(self.keys()))
        if unknown:
            raise ExperimentConfigError(f"unknown override keys {', '.join(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_mapping(self) -> Dict[str, str]:
        return {f.name: _format(getattr(self, f.name)) for f in fields(self)}

    def write_manifest(self, path: Union[str, Path]) -> Path:
        """Write every resolved value; the result is itself a valid config file"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["# SKPD run manifest: pass back with --config to repeat this run"]
        for f in fields(self):
            lines.append(f"# {f.metadata['help']}")
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        path.write_text("\n".join(lines) + "\n")
        return path

    # =========================================================================
    # CONVERSIONS
    # =========================================================================

    def shape_config(self, dims) -> ShapeConfig:
        """Geometry for data of the given dims (grid takes precedence over patch)"""
        dims = tuple(int(d) for d in dims)
        while len(dims) > 2 and dims[-1] == 1:
            dims = dims[:-1]
        if self.grid:
            grid = tuple(self.grid) + (1,) * (len(dims) - len(self.grid))
            if len(grid) != len(dims) or any(full % g for full, g in zip(dims, grid)):
                raise ExperimentConfigError(f"grid {self.grid} does not divide dims {dims}")
            return ShapeConfig(grid, tuple(full // g for full, g in zip(dims, grid)))
        if not self.patch:
            raise ExperimentConfigError("either patch or grid must be set")
        return ShapeConfig.from_dims(dims, self.patch)

    def penalties(self) -> PenaltyConfig:
        return PenaltyConfig(self.lambda_a, self.lambda_b, self.lambda_gamma, self.alpha)

    def solver(self) -> SolverConfig:
        return SolverConfig(
            max_outer=self.max_outer,
            outer_tol=self.outer_tol,
            inner_max_iter=self.inner_max_iter,
            inner_tol=self.inner_tol,
            line_search_beta=self.line_search_beta,
            seed=self.seed,
            accelerate=self.accelerate,
            fit_intercept=self.fit_intercept,
        )

    def sim_config(self) -> SimConfig:
        template = make_template(self.template, self.dims)
        baseline = make_template(self.baseline, self.dims) if self.baseline else None
        return SimConfig(
            template=template,
            n=self.n,
            sigma=self.sigma,
            label_noise_std=self.label_noise_std,
            seed=self.seed,
            train_fraction=self.train_fraction,
            baseline=baseline,
            n_covariates=self.n_covariates,
            covariate_effect=self.covariate_effect,
        )

    def sweep_spec(self) -> SweepSpec:
        return SweepSpec(
            template=self.template,
            dims=tuple(self.dims),
            n=self.n,
            patches=self.sweep_patches or [self.shape_config(self.dims).patch[:len(self.dims)]],
            sigmas=self.sweep_sigmas or [self.sigma],
            shifts=self.sweep_shifts or [self.shift],
            lambda_as=self.sweep_lambda_a or [self.lambda_a],
            lambda_bs=self.sweep_lambda_b or [self.lambda_b],
            alphas=self.sweep_alpha or [self.alpha],
            rank=self.rank,
            folds=self.folds,
            seed=self.seed,
            label_noise_std=self.label_noise_std,
            solver=self.solver(),
        )


def load_experiment_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Defaults < config file < overrides"""
    cfg = ExperimentConfig.from_file(path) if path else ExperimentConfig()
    if overrides:
        cfg = cfg.merge(overrides)
    logger.debug(f"resolved experiment config: {cfg.to_mapping()}")
    return cfg
