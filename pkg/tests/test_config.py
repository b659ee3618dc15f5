"""
Configuration test suite

Run with: pytest tests/test_config.py -v
"""

import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import pytest

from config import Config
from core.utils.errors import ExperimentConfigError
from core.utils.experiment_config import ExperimentConfig, load_experiment_config


class TestConfig:
    """Test environment defaults"""

    def test_defaults_valid(self):
        """Should accept the shipped defaults"""
        Config.validate()

    def test_lists_every_problem(self, monkeypatch):
        """Should report all invalid settings together"""
        monkeypatch.setattr(Config, 'RANK', 0)
        monkeypatch.setattr(Config, 'ALPHA', 1.5)
        with pytest.raises(ValueError) as exc:
            Config.validate()
        assert 'SKPD_RANK' in str(exc.value)
        assert 'SKPD_ALPHA' in str(exc.value)

    def test_folds(self, monkeypatch):
        """Should require at least two folds"""
        monkeypatch.setattr(Config, 'FOLDS', 1)
        with pytest.raises(ValueError, match='SKPD_FOLDS'):
            Config.validate()

    def test_display(self, capsys):
        """Should print the configuration banner"""
        Config.display_config()
        out = capsys.readouterr().out
        assert "SKPD Configuration" in out
        assert "lambda_a" in out

    def test_output_dir(self, tmp_path):
        """Should create the requested output directory"""
        path = Config.ensure_output_dir(tmp_path / 'a' / 'b')
        assert path.is_dir()


class TestExperimentConfig:
    """Test experiment config files"""

    def test_parse_file(self, tmp_path):
        """Should parse shapes, lists and booleans"""
        path = tmp_path / 'run.cfg'
        path.write_text(
            "# noise sweep\n"
            "template=rings\n"
            "dims=64x64\n"
            "patch=8x8\n"
            "shift=false\n"
            "sweep_sigmas=1,5,10\n"
            "sweep_patches=2x2,4x4\n"
            "sweep_shifts=true,false\n"
        )
        cfg = ExperimentConfig.from_file(path)
        assert cfg.template == 'rings'
        assert cfg.dims == (64, 64)
        assert cfg.patch == (8, 8)
        assert cfg.shift is False
        assert cfg.sweep_sigmas == [1.0, 5.0, 10.0]
        assert cfg.sweep_patches == [(2, 2), (4, 4)]
        assert cfg.sweep_shifts == [True, False]

    def test_unknown_key(self, tmp_path):
        """Should name unknown keys"""
        path = tmp_path / 'bad.cfg'
        path.write_text("lamda_a=0.1\n")
        with pytest.raises(ExperimentConfigError, match='lamda_a'):
            ExperimentConfig.from_file(path)

    def test_bad_value(self):
        """Should report unparsable values with their key"""
        with pytest.raises(ExperimentConfigError, match='rank'):
            ExperimentConfig.from_mapping({'rank': 'two'})

    def test_empty_optional(self):
        """Should read an empty optional value as unset"""
        assert ExperimentConfig.from_mapping({'data': '', 'grid': ''}).data is None

    def test_missing_file(self, tmp_path):
        """Should raise FileNotFoundError for a missing config"""
        with pytest.raises(FileNotFoundError):
            ExperimentConfig.from_file(tmp_path / 'nope.cfg')

    def test_merge_precedence(self, tmp_path):
        """Should apply overrides over the file and skip None"""
        path = tmp_path / 'run.cfg'
        path.write_text("n=100\nsigma=5\n")
        cfg = load_experiment_config(path, {'sigma': 10.0, 'n': None})
        assert cfg.n == 100
        assert cfg.sigma == 10.0

    def test_merge_unknown(self):
        """Should refuse unknown override keys"""
        with pytest.raises(ExperimentConfigError):
            ExperimentConfig().merge({'bogus': 1})

    def test_manifest_round_trip(self, tmp_path):
        """Should write a manifest that parses back to the same config"""
        cfg = ExperimentConfig(dims=(16, 16, 8), patch=(4, 4, 2), sigma=0.1, shift=False,
                               sweep_lambda_a=[0.001, 0.01], data=None, seed=7)
        path = cfg.write_manifest(tmp_path / 'manifest.cfg')
        assert ExperimentConfig.from_file(path) == cfg

    def test_shape_config_from_patch(self):
        """Should derive the grid from dims and patch"""
        shape = ExperimentConfig(patch=(4, 4)).shape_config((32, 32, 1))
        assert shape.grid == (8, 8, 1)
        assert shape.patch == (4, 4, 1)

    def test_shape_config_from_grid(self):
        """Should let an explicit grid take precedence"""
        shape = ExperimentConfig(patch=(4, 4), grid=(2, 2)).shape_config((32, 32))
        assert shape.patch == (16, 16, 1)

    def test_grid_must_divide(self):
        """Should refuse a grid that does not divide dims"""
        with pytest.raises(ExperimentConfigError):
            ExperimentConfig(grid=(3, 3)).shape_config((32, 32))

    def test_conversions(self):
        """Should carry values into penalty, solver and sweep settings"""
        cfg = ExperimentConfig(lambda_a=0.5, alpha=0.3, max_outer=7, seed=3, sigma=2.0)
        assert cfg.penalties().lambda_a == 0.5
        assert cfg.penalties().alpha == 0.3
        assert cfg.solver().max_outer == 7
        assert cfg.solver().seed == 3
        spec = cfg.sweep_spec()
        assert spec.sigmas == [2.0]
        assert spec.patches == [tuple(cfg.patch)]

    def test_sweep_patch_from_grid(self):
        """Should size the sweep patch from an explicit grid"""
        spec = ExperimentConfig(dims=(16, 16), patch=(4, 4), grid=(2, 2)).sweep_spec()
        assert spec.patches == [(8, 8)]

    def test_sweep_grid_without_patch(self):
        """Should accept a grid-only config"""
        spec = ExperimentConfig(dims=(16, 16, 8), patch=None, grid=(4, 4, 2)).sweep_spec()
        assert spec.patches == [(4, 4, 4)]

    def test_sweep_needs_geometry(self):
        """Should refuse a config with neither patch nor grid"""
        with pytest.raises(ExperimentConfigError):
            ExperimentConfig(patch=None, grid=None).sweep_spec()

    def test_shipped_experiments_parse(self):
        """Should parse every config under experiments/"""
        paths = sorted((project_root / 'experiments').glob('*.cfg'))
        assert paths
        for path in paths:
            ExperimentConfig.from_file(path)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
