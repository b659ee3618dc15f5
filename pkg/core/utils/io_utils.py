"""
Tensor and Dataset Files

KTEN tensor container (little-endian):

    magic "KTEN" | version u32 | order u8 | has_checksum u8
    dims 3 x u32 | crc32 u32 (0 when has_checksum == 0)
    payload: D1*D2*D3 f64 values, row-major

A dataset on disk is a directory with one KTEN file per sample under
`tensors/` and a `manifest.csv` with columns tensor, y, z_0 .. z_{q-1}.
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.models.skpd_model import Dataset
from core.services.pipeline_service import CovariateScaler
from core.tensors.tensor_ops import ArrayLike, DenseTensor, as_tensor
from core.utils.errors import ChecksumError, ContainerFormatError, CsvFormatError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b'KTEN'
TENSOR_VERSION = 1
HEADER = struct.Struct('<4sIBB3II')

PathLike = Union[str, Path]


# =============================================================================
# KTEN CONTAINER
# =============================================================================

def tensor_to_bytes(tensor: ArrayLike, checksum: bool = True) -> bytes:
    tensor = as_tensor(tensor)
    payload = np.ascontiguousarray(tensor.data, dtype='<f8').tobytes()
    crc = zlib.crc32(payload) if checksum else 0
    header = HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, tensor.order, int(checksum), *tensor.dims, crc)
    return header + payload


def tensor_from_bytes(blob: bytes) -> DenseTensor:
    """
    Parse a KTEN container

    Raises:
        ContainerFormatError: Bad magic, version or header
        ChecksumError: Payload truncated, oversized or failing its CRC32
    """
    if len(blob) < HEADER.size:
        raise ContainerFormatError("tensor file is shorter than its header")
    magic, version, order, has_checksum, d1, d2, d3, crc = HEADER.unpack_from(blob)
    if magic != TENSOR_MAGIC:
        raise ContainerFormatError("not a KTEN tensor file (bad magic)")
    if version != TENSOR_VERSION:
        raise ContainerFormatError(f"unsupported tensor version {version}")
    if order not in (1, 2, 3):
        raise ContainerFormatError(f"invalid tensor order {order}")
    payload = blob[HEADER.size:]
    expected = d1 * d2 * d3 * 8
    if len(payload) != expected:
        raise ChecksumError(f"tensor payload has {len(payload)} bytes, header promises {expected}")
    if has_checksum and zlib.crc32(payload) != crc:
        raise ChecksumError("tensor payload fails its CRC32 check")
    values = np.frombuffer(payload, dtype='<f8').astype(np.float64).reshape(d1, d2, d3)
    return DenseTensor(values, order=order)


def write_tensor(path: PathLike, tensor: ArrayLike, checksum: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_to_bytes(tensor, checksum))
    return path


def read_tensor(path: PathLike) -> DenseTensor:
    return tensor_from_bytes(Path(path).read_bytes())


# =============================================================================
# CSV
# =============================================================================

def _read_frame(path: PathLike) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, float_precision='round_trip')
    except pd.errors.EmptyDataError as exc:
        raise CsvFormatError(f"{path} is empty") from exc
    except pd.errors.ParserError as exc:
        raise CsvFormatError(f"{path} is ragged: {exc}") from exc
    if frame.isna().any().any():
        rows = sorted(set(np.nonzero(frame.isna().to_numpy())[0] + 2))
        raise CsvFormatError(f"{path} has missing fields on lines {rows[:5]}")
    return frame


def _labels(frame: pd.DataFrame, column: str, path: PathLike) -> np.ndarray:
    if column not in frame.columns:
        raise CsvFormatError(f"{path} has no label column '{column}'")
    labels = pd.to_numeric(frame[column], errors='coerce').to_numpy()
    if np.isnan(labels).any() or not np.isin(labels, (0, 1)).all():
        raise CsvFormatError(f"{path}: labels in column '{column}' must be 0 or 1")
    return labels.astype(np.int64)


def read_covariates_csv(
    path: PathLike,
    label_column: str = 'y',
    covariate_columns: Optional[Sequence[str]] = None,
) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """
    Labels and covariates from a CSV with a header row

    Args:
        path: CSV file
        label_column: Column holding 0/1 labels
        covariate_columns: Explicit covariate columns; defaults to every
            other numeric column except 'tensor'

    Returns:
        (z (n, q), y (n,), covariate column names)

    Raises:
        CsvFormatError: Ragged rows, missing columns or invalid labels
    """
    frame = _read_frame(path)
    y = _labels(frame, label_column, path)
    if covariate_columns is None:
        covariate_columns = [c for c in frame.columns if c not in (label_column, 'tensor')]
    missing = [c for c in covariate_columns if c not in frame.columns]
    if missing:
        raise CsvFormatError(f"{path} is missing covariate columns {missing}")
    try:
        z = frame[list(covariate_columns)].to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise CsvFormatError(f"{path}: covariates must be numeric ({exc})") from exc
    return z.reshape(len(frame), len(covariate_columns)), y, list(covariate_columns)


# =============================================================================
# DATASET DIRECTORIES
# =============================================================================

def write_dataset(data: Dataset, directory: PathLike) -> Path:
    """Write one KTEN file per sample plus manifest.csv; returns the manifest path"""
    directory = Path(directory)
    (directory / 'tensors').mkdir(parents=True, exist_ok=True)
    order = 3 if data.dims[2] > 1 else 2
    names = []
    for i in range(data.n):
        name = f"tensors/sample_{i:05d}.kten"
        write_tensor(directory / name, DenseTensor(data.x[i], order=order))
        names.append(name)
    manifest = pd.DataFrame({'tensor': names, 'y': data.y})
    for j in range(data.q):
        manifest[f"z_{j}"] = data.z[:, j]
    path = directory / 'manifest.csv'
    manifest.to_csv(path, index=False, float_format='%.17g')
    logger.info(f"wrote {data.n} samples to {directory}")
    return path


def read_dataset(directory: PathLike, standardize_covariates: bool = False) -> Dataset:
    """
    Load a dataset directory written by `write_dataset`

    Any unreadable tensor aborts the whole read.
    """
    directory = Path(directory)
    manifest_path = directory / 'manifest.csv'
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.csv in {directory}")
    frame = _read_frame(manifest_path)
    if 'tensor' not in frame.columns:
        raise CsvFormatError(f"{manifest_path} has no 'tensor' column")
    covariate_columns = sorted(
        (c for c in frame.columns if c.startswith('z_')), key=lambda c: int(c[2:])
    )
    z, y, _ = read_covariates_csv(manifest_path, 'y', covariate_columns)

    tensors = [read_tensor(directory / name) for name in frame['tensor']]
    dims = {t.dims for t in tensors}
    if len(dims) > 1:
        raise ContainerFormatError(f"dataset tensors have differing dims {sorted(dims)}")
    x = np.stack([t.data for t in tensors]) if tensors else np.zeros((0, 1, 1, 1))

    if standardize_covariates and z.shape[1]:
        z = CovariateScaler().fit_transform(z)
    logger.info(f"read {len(tensors)} samples from {directory}")
    return Dataset(x, y, z)


def write_probabilities(path: PathLike, probabilities: np.ndarray, labels: Optional[np.ndarray] = None,
                        threshold: float = 0.5) -> Path:
    """Per-sample probability CSV: sample, probability, prediction[, y]"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        'sample': np.arange(len(probabilities)),
        'probability': probabilities,
        'prediction': (np.asarray(probabilities) >= threshold).astype(np.int64),
    })
    if labels is not None:
        frame['y'] = labels
    frame.to_csv(path, index=False, float_format='%.17g')
    return path
