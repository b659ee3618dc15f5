"""
SKPD Command Line Interface

Subcommands:
    simulate   simulate a dataset (train/ and test/ directories)
    fit        fit a model; writes model.skpd, fit_report.json, objective_trace.csv
    predict    per-sample probabilities of a saved model on a dataset
    cv         stratified k-fold cross-validation summary
    sweep      grid of CV experiments (patch, sigma, shift, penalties)
    slices     two-stage slice selection on 3D volumes
    verify     built-in numerical verification suite

Settings resolve as Config defaults < --config file < flags. Every run
writes run_manifest.cfg into its output directory.
"""

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config import Config
from core.models.serialization import load_model, save_model
from core.models.skpd_model import Dataset
from core.services.evaluation_service import (
    FitSettings,
    accuracy,
    auc,
    cross_validate,
    evaluate_holdout,
    format_mean_sd,
    run_sweep,
)
from core.services.pipeline_service import (
    PLANES,
    export_coefficient_map,
    plot_coefficient_map,
    run_two_stage,
    save_two_stage,
)
from core.services.simulation_service import generate, simulate_samples
from core.services.verification_service import run_verification
from core.tensors.tensor_ops import ShapeConfig
from core.utils.errors import SkpdError
from core.utils.experiment_config import ExperimentConfig, load_experiment_config
from core.utils.io_utils import read_dataset, write_dataset, write_probabilities

logger = logging.getLogger(__name__)

MODEL_FILE = 'model.skpd'
MANIFEST_FILE = 'run_manifest.cfg'


def _shape_arg(text: str):
    try:
        return tuple(int(v) for v in text.replace(',', 'x').split('x'))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dims like 4x4 or 4,4,4, got '{text}'")


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='experiment config file (key=value)')
    common.add_argument('--data', help='dataset directory (simulate from config when omitted)')
    common.add_argument('--rank', type=int)
    common.add_argument('--lambda-a', dest='lambda_a', type=float)
    common.add_argument('--lambda-b', dest='lambda_b', type=float)
    common.add_argument('--lambda-gamma', dest='lambda_gamma', type=float)
    common.add_argument('--alpha', type=float)
    common.add_argument('--grid', type=_shape_arg, help='grid dims p, e.g. 32x32')
    common.add_argument('--patch', type=_shape_arg, help='patch dims d, e.g. 4x4')
    common.add_argument('--shift', dest='shift', action='store_true', default=None, help='use the shifted view')
    common.add_argument('--no-shift', dest='shift', action='store_false', help='original view only')
    common.add_argument('--folds', type=int)
    common.add_argument('--seed', type=int)
    common.add_argument('--out', help=f"output directory (default {Config.OUTPUT_DIR})")
    common.add_argument('--verbose', '-v', action='store_true', help='debug logging')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog='skpd',
        description='Cyclic-shift sparse Kronecker product decomposition classifier',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', parents=[common], help='simulate a dataset')
    simulate.add_argument('--template', choices=['disks', 'rings', 'lobes', 'two_balls', 'one_ball'])
    simulate.add_argument('--dims', type=_shape_arg)
    simulate.add_argument('--n', type=int)
    simulate.add_argument('--sigma', type=float)

    sub.add_parser('fit', parents=[common], help='fit a model')

    predict = sub.add_parser('predict', parents=[common], help='predict with a saved model')
    predict.add_argument('--model', required=True, help='model file written by fit')

    sub.add_parser('cv', parents=[common], help='cross-validate')
    sub.add_parser('sweep', parents=[common], help='run a sweep of CV experiments')
    sub.add_parser('slices', parents=[common], help='two-stage slice selection on volumes')
    sub.add_parser('verify', parents=[common], help='run the verification suite')
    return parser


def _overrides(args: argparse.Namespace) -> Dict:
    keys = ExperimentConfig.keys()
    return {k: v for k, v in vars(args).items() if k in keys and v is not None}


def _banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)


def _load_data(cfg: ExperimentConfig, split: bool):
    """(train, test) from --data or a simulation; test is None for on-disk data"""
    if cfg.data:
        return read_dataset(cfg.data, cfg.standardize_covariates), None
    sim = cfg.sim_config()
    if split:
        return generate(sim)
    samples = simulate_samples(sim)
    return Dataset(samples.x, samples.y, samples.z), None


def _settings(cfg: ExperimentConfig, data: Dataset) -> FitSettings:
    return FitSettings(cfg.shape_config(data.dims), cfg.rank, cfg.penalties(), cfg.shift, cfg.solver())


# =============================================================================
# SUBCOMMANDS
# =============================================================================

def cmd_simulate(cfg: ExperimentConfig, out: Path, args) -> None:
    train, test = generate(cfg.sim_config())
    write_dataset(train, out / 'train')
    if test.n:
        write_dataset(test, out / 'test')
    print(f"✅ Simulated {train.n + test.n} '{cfg.template}' samples "
          f"(train {train.n}, test {test.n}) in {out}")


def cmd_fit(cfg: ExperimentConfig, out: Path, args) -> None:
    train, test = _load_data(cfg, split=True)
    settings = _settings(cfg, train)
    model, report = settings.fit(train)
    if test is not None and test.n and min(test.class_counts()) > 0:
        holdout = evaluate_holdout(model, test)
        report.fold_metrics.append({'fold': 'test', 'accuracy': holdout.accuracy, 'auc': holdout.auc})
        print(f"Test accuracy: {holdout.accuracy:.4f}, AUC: {holdout.auc:.4f}")

    save_model(model, out / MODEL_FILE)
    (out / 'fit_report.json').write_text(report.to_json() + "\n")
    pd.DataFrame({
        'step': np.arange(len(report.objective_trace)),
        'block': report.block_labels,
        'objective': report.objective_trace,
    }).to_csv(out / 'objective_trace.csv', index=False, float_format='%.17g')
    magnitude = model.magnitude_map()
    if magnitude.dims[2] == 1:
        plot_coefficient_map(magnitude, out / 'coefficients.png')
    print(f"✅ Fitted {settings.cfg.describe()} model (R={cfg.rank}, shift={cfg.shift}) "
          f"in {report.iterations} iterations, train accuracy {report.train_accuracy:.4f}")
    print(f"   Model: {out / MODEL_FILE}")


def cmd_predict(cfg: ExperimentConfig, out: Path, args) -> None:
    if not cfg.data:
        raise ValueError("predict needs --data")
    model = load_model(args.model)
    data = read_dataset(cfg.data, cfg.standardize_covariates)
    probabilities = model.predict_proba_batch(data)
    path = write_probabilities(out / 'predictions.csv', probabilities, data.y)
    predictions = (probabilities >= 0.5).astype(np.int64)
    print(f"✅ Wrote {data.n} predictions to {path}")
    print(f"   Accuracy: {accuracy(predictions, data.y):.4f}")
    if min(data.class_counts()) > 0:
        print(f"   AUC: {auc(probabilities, data.y):.4f}")


def cmd_cv(cfg: ExperimentConfig, out: Path, args) -> None:
    data, _ = _load_data(cfg, split=False)
    summary = cross_validate(data, _settings(cfg, data), cfg.folds, cfg.seed, progress=True)
    pd.DataFrame({
        'fold': list(range(summary.n_folds)),
        'accuracy': summary.fold_acc,
        'auc': summary.fold_auc,
        'error': summary.fold_errors,
    }).to_csv(out / 'cv_folds.csv', index=False, float_format='%.17g')
    _banner(f"{cfg.folds}-fold cross-validation")
    print(f"Accuracy: {format_mean_sd(summary.mean_acc, summary.sd_acc)}")
    print(f"AUC:      {format_mean_sd(summary.mean_auc, summary.sd_auc)}")
    if summary.n_failed:
        print(f"❌ {summary.n_failed} folds failed (see cv_folds.csv)")


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> None:
    result = run_sweep(cfg.sweep_spec())
    result.to_csv(out / 'sweep.csv')
    table = result.format_table()
    (out / 'sweep_table.txt').write_text(table + "\n")
    _banner("Sweep results: mean (SD) over folds")
    print(table)
    failed = [key for key, summary in result.summaries.items() if not np.isfinite(summary.mean_auc)]
    if failed:
        print(f"❌ {len(failed)} cells failed (see sweep.csv)")


def cmd_slices(cfg: ExperimentConfig, out: Path, args) -> None:
    data, _ = _load_data(cfg, split=False)
    if data.dims[2] < 2:
        raise ValueError(f"slices needs 3D volumes, got dims {data.dims}")
    cfg3d = cfg.shape_config(data.dims)

    def in_plane(values, plane):
        return [v for axis, v in enumerate(values) if axis != PLANES.index(plane)]

    # without patch_2d each plane keeps the 3D patch extents of its own axes
    cfg2d = {
        plane: ShapeConfig.from_dims(in_plane(data.dims, plane), cfg.patch_2d or in_plane(cfg3d.patch, plane))
        for plane in PLANES
    }
    result = run_two_stage(
        data,
        cfg3d,
        cfg2d,
        cfg.penalties(),
        cfg.solver(),
        rank=cfg.rank,
        use_shift=cfg.shift,
        folds=cfg.folds,
        seed=cfg.seed,
        selection=cfg.selection,
        standardize_covariates=cfg.standardize_covariates,
        progress=True,
    )
    save_two_stage(result, out)
    magnitude = result.model3d.magnitude_map()
    for plane in PLANES:
        index = result.selection.selected[plane]
        export_coefficient_map(magnitude, plane, index, out / 'maps', stem=f"{plane}_{index}")
        plot_coefficient_map(magnitude, out / 'maps' / f"{plane}_{index}.png", plane, index)
    print(result.selection.describe())
    _banner("Per-plane 2D models: mean (SD) over folds")
    print(result.metrics_frame().to_string(index=False))


def cmd_verify(cfg: ExperimentConfig, out: Path, args) -> bool:
    report = run_verification(cfg.seed)
    text = report.format()
    (out / 'verification.txt').write_text(text + "\n")
    print(text)
    return report.passed


COMMANDS = {
    'simulate': cmd_simulate,
    'fit': cmd_fit,
    'predict': cmd_predict,
    'cv': cmd_cv,
    'sweep': cmd_sweep,
    'slices': cmd_slices,
    'verify': cmd_verify,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit status"""
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else getattr(logging, Config.LOG_LEVEL, logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    try:
        cfg = load_experiment_config(args.config, _overrides(args))
        out = Config.ensure_output_dir(Path(cfg.out))
        cfg.write_manifest(out / MANIFEST_FILE)
        outcome = COMMANDS[args.command](cfg, out, args)
    except (SkpdError, OSError, ValueError, FloatingPointError, RuntimeError) as e:
        print(f"❌ {args.command} failed: {e}")
        logger.debug("failure details", exc_info=True)
        return 1

    if outcome is False:
        print(f"❌ {args.command}: some checks failed")
        return 1
    return 0
