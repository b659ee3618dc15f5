"""
SKPD Configuration Module

Loads default settings from environment variables (.env file)
Provides centralized access to model, solver and evaluation defaults
Validates settings on startup
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env file from project root
env_path = Path(__file__).parent / '.env'
load_dotenv(dotenv_path=env_path)


def _tuple(value: str):
    """'4x4' or '4,4' -> (4, 4)"""
    return tuple(int(v) for v in value.replace(',', 'x').split('x') if v.strip())


class Config:
    """
    Default settings

    Every value can be overridden with an SKPD_* environment variable,
    then by an experiment config file, then by command-line flags.
    """

    # =========================================================================
    # MODEL
    # =========================================================================
    RANK = int(os.getenv('SKPD_RANK', '1'))
    PATCH = _tuple(os.getenv('SKPD_PATCH', '4x4'))
    USE_SHIFT = os.getenv('SKPD_SHIFT', 'True').lower() == 'true'

    # =========================================================================
    # PENALTIES
    # =========================================================================
    LAMBDA_A = float(os.getenv('SKPD_LAMBDA_A', '0.1'))
    LAMBDA_B = float(os.getenv('SKPD_LAMBDA_B', '0.001'))
    LAMBDA_GAMMA = float(os.getenv('SKPD_LAMBDA_GAMMA', '0.0'))
    ALPHA = float(os.getenv('SKPD_ALPHA', '0.2'))

    # =========================================================================
    # SOLVER
    # =========================================================================
    MAX_OUTER = int(os.getenv('SKPD_MAX_OUTER', '30'))
    OUTER_TOL = float(os.getenv('SKPD_OUTER_TOL', '1e-5'))
    INNER_MAX_ITER = int(os.getenv('SKPD_INNER_MAX_ITER', '500'))
    INNER_TOL = float(os.getenv('SKPD_INNER_TOL', '1e-6'))
    LINE_SEARCH_BETA = float(os.getenv('SKPD_LINE_SEARCH_BETA', '0.5'))

    # =========================================================================
    # EVALUATION
    # =========================================================================
    FOLDS = int(os.getenv('SKPD_FOLDS', '5'))
    SEED = int(os.getenv('SKPD_SEED', '0'))

    # =========================================================================
    # SIMULATION
    # =========================================================================
    LABEL_NOISE_STD = float(os.getenv('SKPD_LABEL_NOISE_STD', '1.0'))
    TRAIN_FRACTION = float(os.getenv('SKPD_TRAIN_FRACTION', '0.8'))

    # =========================================================================
    # PATHS AND LOGGING
    # =========================================================================
    PROJECT_ROOT = Path(__file__).parent
    OUTPUT_DIR = Path(os.getenv('SKPD_OUTPUT_DIR', 'output'))
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

    @classmethod
    def validate(cls):
        """
        Validate the configured defaults

        Raises:
            ValueError: Listing every invalid setting
        """
        problems = []
        if cls.RANK < 1:
            problems.append(f"SKPD_RANK must be >= 1 (got {cls.RANK})")
        if not cls.PATCH or min(cls.PATCH) < 1 or len(cls.PATCH) > 3:
            problems.append(f"SKPD_PATCH must be 1 to 3 positive extents (got {cls.PATCH})")
        for name in ('LAMBDA_A', 'LAMBDA_B', 'LAMBDA_GAMMA'):
            if getattr(cls, name) < 0:
                problems.append(f"SKPD_{name} must be >= 0 (got {getattr(cls, name)})")
        if not 0.0 <= cls.ALPHA <= 1.0:
            problems.append(f"SKPD_ALPHA must be in [0, 1] (got {cls.ALPHA})")
        if cls.MAX_OUTER < 1 or cls.INNER_MAX_ITER < 1:
            problems.append("SKPD_MAX_OUTER and SKPD_INNER_MAX_ITER must be >= 1")
        if cls.OUTER_TOL <= 0 or cls.INNER_TOL <= 0:
            problems.append("SKPD_OUTER_TOL and SKPD_INNER_TOL must be > 0")
        if not 0.0 < cls.LINE_SEARCH_BETA < 1.0:
            problems.append(f"SKPD_LINE_SEARCH_BETA must be in (0, 1) (got {cls.LINE_SEARCH_BETA})")
        if cls.FOLDS < 2:
            problems.append(f"SKPD_FOLDS must be >= 2 (got {cls.FOLDS})")
        if not 0.0 < cls.TRAIN_FRACTION <= 1.0:
            problems.append(f"SKPD_TRAIN_FRACTION must be in (0, 1] (got {cls.TRAIN_FRACTION})")
        if cls.LOG_LEVEL not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            problems.append(f"LOG_LEVEL must be a logging level name (got {cls.LOG_LEVEL})")

        if problems:
            raise ValueError(
                "Invalid configuration:\n  - " + "\n  - ".join(problems) +
                "\nPlease check your .env file. See .env.example for template."
            )

    @classmethod
    def ensure_output_dir(cls, output_dir: Path = None) -> Path:
        """Create (if needed) and return the output directory"""
        path = Path(output_dir) if output_dir else cls.OUTPUT_DIR
        if not path.is_absolute():
            path = Path.cwd() / path
        path.mkdir(parents=True, exist_ok=True)
        return path

    @classmethod
    def display_config(cls):
        """Display current defaults"""
        print("=" * 60)
        print("SKPD Configuration")
        print("=" * 60)
        print(f"Rank: {cls.RANK}")
        print(f"Patch: {'x'.join(str(d) for d in cls.PATCH)}")
        print(f"Cyclic shift: {cls.USE_SHIFT}")
        print(f"\nPenalties:")
        print(f"  - lambda_a: {cls.LAMBDA_A}")
        print(f"  - lambda_b: {cls.LAMBDA_B}")
        print(f"  - lambda_gamma: {cls.LAMBDA_GAMMA}")
        print(f"  - alpha: {cls.ALPHA}")
        print(f"\nSolver:")
        print(f"  - Outer iterations: {cls.MAX_OUTER} (tol {cls.OUTER_TOL})")
        print(f"  - Inner iterations: {cls.INNER_MAX_ITER} (tol {cls.INNER_TOL})")
        print(f"  - Line search beta: {cls.LINE_SEARCH_BETA}")
        print(f"\nFolds: {cls.FOLDS}, Seed: {cls.SEED}")
        print(f"Output: {cls.OUTPUT_DIR}")
        print(f"Log level: {cls.LOG_LEVEL}")
        print("=" * 60)


# Validate configuration on import (fail fast if misconfigured)
if __name__ != '__main__':
    try:
        Config.validate()
    except ValueError as e:
        print(f"\n⚠️  Configuration Error:\n{e}\n")
        # Don't raise in import - let callers handle gracefully
        pass


if __name__ == '__main__':
    try:
        Config.validate()
        Config.display_config()
    except ValueError as e:
        print(f"\n❌ Configuration validation failed:\n{e}")
        exit(1)
