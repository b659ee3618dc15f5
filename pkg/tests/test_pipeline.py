"""
Two-stage pipeline test suite

Run with: pytest tests/test_pipeline.py -v
"""

import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import numpy as np
import pytest

from core.models.serialization import load_model
from core.models.skpd_model import Dataset, PenaltyConfig
from core.services.optimizer_service import SolverConfig
from core.services.pipeline_service import (
    PLANES,
    CovariateScaler,
    export_coefficient_map,
    extract_slices,
    median_slice_selection,
    pgm_bytes,
    plot_coefficient_map,
    read_coefficient_csv,
    run_two_stage,
    save_two_stage,
    slice_scores,
)
from core.services.simulation_service import SimConfig, make_template, simulate_samples
from core.tensors.tensor_ops import ShapeConfig
from core.utils.errors import ShapeMismatchError

QUICK_SOLVER = SolverConfig(max_outer=6, inner_max_iter=200)
PENALTIES = PenaltyConfig(0.001, 0.001, 0.0, 0.2)


def slab_volumes(n=80, dims=(16, 16, 16), axial=5, seed=0):
    """Volumes whose signal lies entirely in one axial slice"""
    values = np.zeros(dims)
    values[axial, 4:12, 4:12] = 1.0
    template = make_template('custom', dims, {'values': values})
    samples = simulate_samples(SimConfig(template, n=n, sigma=1.0, seed=seed))
    return Dataset(samples.x, samples.y, samples.z)


class TestSliceScores:
    """Test per-plane slice scoring"""

    def test_single_voxel(self):
        """Should select the slices through a single nonzero voxel"""
        volume = np.zeros((8, 8, 8))
        volume[2, 5, 7] = -3.0
        selection = slice_scores(volume)
        assert selection.selected == {'axial': 2, 'coronal': 5, 'sagittal': 7}
        assert selection.scores['axial'][2] == 3.0
        assert not selection.degenerate

    def test_all_zero_is_degenerate(self, caplog):
        """Should fall back to slice 0 with a warning"""
        selection = slice_scores(np.zeros((4, 5, 6)))
        assert selection.degenerate
        assert selection.selected == {'axial': 0, 'coronal': 0, 'sagittal': 0}
        assert "all zero" in caplog.text

    def test_ties_pick_lowest_index(self):
        """Should prefer the lowest index among equal scores"""
        volume = np.zeros((6, 6, 6))
        volume[1, 1, 1] = volume[4, 4, 4] = 1.0
        assert slice_scores(volume).selected == {'axial': 1, 'coronal': 1, 'sagittal': 1}

    def test_matches_triple_loop(self):
        """Should equal brute-force sums of |c| per slice"""
        volume = np.random.default_rng(0).standard_normal((8, 8, 8))
        selection = slice_scores(volume)
        for plane, axis in zip(PLANES, range(3)):
            for k in range(8):
                total = 0.0
                for i in range(8):
                    for j in range(8):
                        index = [i, j]
                        index.insert(axis, k)
                        total += abs(volume[tuple(index)])
                assert selection.scores[plane][k] == pytest.approx(total, rel=1e-12)
            assert selection.selected[plane] == int(np.argmax(selection.scores[plane]))

    def test_needs_volume(self):
        """Should refuse 2D maps"""
        with pytest.raises(ShapeMismatchError):
            slice_scores(np.ones((4, 4)))

    def test_median(self):
        """Should pick D // 2 per plane"""
        assert median_slice_selection((16, 10, 7)).selected == {'axial': 8, 'coronal': 5, 'sagittal': 3}

    def test_frame(self):
        """Should list one row per slice with the selection flagged"""
        volume = np.zeros((3, 4, 5))
        volume[1, 2, 3] = 1.0
        frame = slice_scores(volume).to_frame()
        assert len(frame) == 3 + 4 + 5
        assert frame['selected'].sum() == 3


class TestExtractSlices:
    """Test Stage-2 dataset construction"""

    def test_shapes_and_labels(self):
        """Should keep n, labels and covariates and drop the plane axis"""
        rng = np.random.default_rng(1)
        data = Dataset(rng.standard_normal((6, 4, 5, 7)), [0, 1] * 3, rng.standard_normal((6, 2)))
        for plane, dims in zip(PLANES, [(5, 7, 1), (4, 7, 1), (4, 5, 1)]):
            sliced = extract_slices(data, plane, 2)
            assert sliced.n == 6
            assert sliced.dims == dims
            assert np.array_equal(sliced.y, data.y)
            assert np.array_equal(sliced.z, data.z)
        assert np.array_equal(extract_slices(data, 'coronal', 3).x[..., 0], data.x[:, :, 3, :])

    def test_out_of_range(self):
        """Should refuse a slice index beyond the axis"""
        data = Dataset(np.zeros((2, 3, 3, 3)), [0, 1])
        with pytest.raises(IndexError):
            extract_slices(data, 'axial', 3)

    def test_unknown_plane(self):
        """Should refuse unknown plane names"""
        data = Dataset(np.zeros((2, 3, 3, 3)), [0, 1])
        with pytest.raises(ValueError):
            extract_slices(data, 'oblique', 0)


class TestCovariateScaler:
    """Test covariate standardization"""

    def test_continuous_columns_standardized(self):
        """Should center and scale continuous columns only"""
        rng = np.random.default_rng(2)
        z = np.column_stack([
            rng.normal(5.0, 3.0, 50),
            rng.integers(0, 2, 50).astype(float),
            np.full(50, 7.0),
        ])
        scaler = CovariateScaler().fit(z)
        out = scaler.transform(z)
        assert abs(out[:, 0].mean()) < 1e-12
        assert out[:, 0].std() == pytest.approx(1.0, rel=1e-12)
        assert np.array_equal(out[:, 1], z[:, 1])
        assert np.array_equal(out[:, 2], z[:, 2])
        assert list(scaler.binary) == [False, True, False]

    def test_inverse(self):
        """Should invert to within 1e-12"""
        z = np.random.default_rng(3).normal(10.0, 4.0, (30, 3))
        scaler = CovariateScaler()
        back = scaler.inverse_transform(scaler.fit_transform(z))
        assert np.max(np.abs(back - z)) <= 1e-12 * np.max(np.abs(z))

    def test_input_not_modified(self):
        """Should leave the caller's array untouched"""
        z = np.random.default_rng(4).standard_normal((10, 2)) + 3.0
        copy = z.copy()
        CovariateScaler().fit_transform(z)
        assert np.array_equal(z, copy)

    def test_unfitted(self):
        """Should refuse to transform before fitting"""
        with pytest.raises(RuntimeError):
            CovariateScaler().transform(np.zeros((2, 2)))


class TestCoefficientMaps:
    """Test PGM, CSV and PNG exports"""

    def test_constant_slice(self, tmp_path):
        """Should write a uniform image and note the zero dynamic range"""
        paths = export_coefficient_map(np.zeros((4, 6)), None, None, tmp_path, formats=('pgm',))
        blob = paths[0].read_bytes()
        header = b"P5\n6 4\n255\n"
        assert blob.startswith(header)
        assert blob[len(header):] == bytes(24)
        assert "zero dynamic range" in paths[1].read_text()

    def test_hot_voxel(self):
        """Should map a single hot voxel to the only 255 pixel"""
        values = np.zeros((4, 4))
        values[1, 2] = 2.0
        pixels = np.frombuffer(pgm_bytes(values)[len(b"P5\n4 4\n255\n"):], dtype=np.uint8).reshape(4, 4)
        assert pixels[1, 2] == 255
        assert pixels.sum() == 255

    def test_csv_bit_exact(self, tmp_path):
        """Should read back exactly the written magnitudes"""
        volume = np.random.default_rng(5).standard_normal((5, 6, 7))
        paths = export_coefficient_map(volume, 'sagittal', 4, tmp_path, formats=('csv',), stem='map')
        assert np.array_equal(read_coefficient_csv(paths[0]), np.abs(volume[:, :, 4]))

    def test_volume_needs_plane(self, tmp_path):
        """Should refuse a 3D map without plane and index"""
        with pytest.raises(ValueError):
            export_coefficient_map(np.ones((3, 3, 3)), None, None, tmp_path)

    def test_unknown_format(self, tmp_path):
        """Should refuse formats other than pgm and csv"""
        with pytest.raises(ValueError):
            export_coefficient_map(np.ones((3, 3)), None, None, tmp_path, formats=('tiff',))

    def test_png(self, tmp_path):
        """Should write a PNG heatmap"""
        path = plot_coefficient_map(np.random.default_rng(6).random((8, 8)), tmp_path / 'map.png')
        assert path.read_bytes()[:8] == b'\x89PNG\r\n\x1a\n'


class TestTwoStage:
    """Test the full two-stage run on small volumes"""

    def test_finds_signal_slice(self, tmp_path):
        """Should select the axial slice holding the signal and save every output"""
        data = slab_volumes()
        result = run_two_stage(
            data,
            ShapeConfig.from_dims((16, 16, 16), (4, 4, 4)),
            ShapeConfig.from_dims((16, 16), (4, 4)),
            PENALTIES, QUICK_SOLVER, folds=2,
        )
        assert result.selection.selected['axial'] == 5
        assert set(result.plane_models) == set(PLANES)
        assert result.plane_metrics['axial'].mean_auc >= 0.9

        written = save_two_stage(result, tmp_path)
        assert len(written) == 4 + 3
        assert (tmp_path / 'slice_selection.txt').read_text().startswith("Slice selection")
        axial = load_model(tmp_path / 'model_axial.skpd')
        assert axial.cfg.full_dims == (16, 16, 1)
        frame = result.metrics_frame()
        assert list(frame['plane']) == list(PLANES)

    def test_median_selection(self):
        """Should use the middle slices when asked"""
        data = slab_volumes(n=40, dims=(8, 8, 8), axial=2)
        result = run_two_stage(
            data,
            ShapeConfig.from_dims((8, 8, 8), (2, 2, 2)),
            ShapeConfig.from_dims((8, 8), (2, 2)),
            PENALTIES, QUICK_SOLVER, folds=2, selection='median',
        )
        assert result.selection.method == 'median'
        assert result.selection.selected == {'axial': 4, 'coronal': 4, 'sagittal': 4}

    def test_zero_signal_is_chance(self):
        """Should complete with chance-level AUC when images carry no signal"""
        rng = np.random.default_rng(7)
        data = Dataset(rng.standard_normal((120, 8, 8, 8)), np.arange(120) % 2)
        result = run_two_stage(
            data,
            ShapeConfig.from_dims((8, 8, 8), (2, 2, 2)),
            ShapeConfig.from_dims((8, 8), (2, 2)),
            PENALTIES, QUICK_SOLVER, folds=3,
        )
        for plane in PLANES:
            assert abs(result.plane_metrics[plane].mean_auc - 0.5) < 0.25

    def test_covariate_only_signal(self):
        """Should carry a predictive covariate through both stages"""
        rng = np.random.default_rng(8)
        n = 120
        z = np.column_stack([rng.normal(50.0, 10.0, n), rng.integers(0, 2, n)])
        y = ((z[:, 0] - 50.0) / 10.0 + 0.3 * rng.standard_normal(n) > 0).astype(int)
        data = Dataset(rng.standard_normal((n, 8, 8, 8)), y, z)
        result = run_two_stage(
            data,
            ShapeConfig.from_dims((8, 8, 8), (2, 2, 2)),
            ShapeConfig.from_dims((8, 8), (2, 2)),
            PenaltyConfig(0.05, 0.05, 0.0, 0.2), QUICK_SOLVER, folds=3,
            standardize_covariates=True,
        )
        assert result.scaler is not None
        assert list(result.scaler.binary) == [False, True]
        assert result.model3d.gamma[0] > 0.5
        assert result.plane_metrics['axial'].mean_auc > 0.75

    def test_needs_volumes(self):
        """Should refuse 2D samples"""
        data = Dataset(np.zeros((4, 8, 8)), [0, 1, 0, 1])
        with pytest.raises(ShapeMismatchError):
            run_two_stage(data, ShapeConfig.from_dims((8, 8), (2, 2)), ShapeConfig.from_dims((8, 8), (2, 2)))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
