"""Hyperspectral cube and label raster I/O, band standardization and PCA reduction.

File formats are deliberately minimal: a one-line JSON header followed by a
little-endian binary payload (32-bit floats for cubes, 16-bit unsigned ints
for label rasters). All in-memory arithmetic is 64-bit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class MalformedHeader(ValueError):
    pass


class SizeMismatch(ValueError):
    pass


class NonFiniteValue(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class RankDeficient(ValueError):
    pass


@dataclass(frozen=True)
class HsiCube:
    """Raw hyperspectral image: (height, width, bands) reflectance values."""

    height: int
    width: int
    bands: int
    data: np.ndarray  # (height, width, bands) float64

    def __post_init__(self):
        if self.data.shape != (self.height, self.width, self.bands):
            raise SizeMismatch(f"cube data shape {self.data.shape} vs header "
                               f"({self.height},{self.width},{self.bands})")
        if not np.isfinite(self.data).all():
            raise NonFiniteValue("cube contains non-finite values")

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixels(self) -> np.ndarray:
        """Flattened (N, bands) pixel matrix in row-major (y, x) order."""
        return self.data.reshape(self.n_pixels, self.bands)


@dataclass(frozen=True)
class LabelRaster:
    """Per-pixel class ids; 0 marks unlabeled pixels, classes run 1..K."""

    height: int
    width: int
    classes: int
    labels: np.ndarray  # (height, width) int32

    def __post_init__(self):
        if self.labels.shape != (self.height, self.width):
            raise SizeMismatch(f"label shape {self.labels.shape} vs header "
                               f"({self.height},{self.width})")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        present = np.unique(self.labels)
        present = present[present > 0]
        if present.size and (present.max() > self.classes
                             or not np.array_equal(present, np.arange(1, present.size + 1))):
            raise ValueError(f"class ids must be contiguous from 1, got {present.tolist()}")


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray                 # (bands,)
    components: np.ndarray           # (bands, d), orthonormal columns
    explained_variance: np.ndarray   # (d,), non-increasing

    def __post_init__(self):
        d = self.components.shape[1]
        gram = self.components.T @ self.components
        if np.max(np.abs(gram - np.eye(d))) > 1e-8:
            raise ValueError("PCA components not orthonormal")


def _read_header(fh, required: tuple[str, ...]) -> dict:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise MalformedHeader("missing newline-terminated header")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"bad JSON header: {exc}") from exc
    for key in required:
        if key not in header:
            raise MalformedHeader(f"header missing field {key!r}")
    return header


def load_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        header = _read_header(fh, ("height", "width", "bands", "dtype"))
        if header["dtype"] != "f32":
            raise MalformedHeader(f"unsupported dtype {header['dtype']!r}")
        h, w, b = int(header["height"]), int(header["width"]), int(header["bands"])
        payload = fh.read()
    expected = h * w * b * 4
    if len(payload) != expected:
        raise SizeMismatch(f"payload {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, b)
    if not np.isfinite(data).all():
        raise NonFiniteValue("cube payload contains non-finite values")
    return HsiCube(h, w, b, data)


def write_cube(path, cube: HsiCube) -> None:
    header = json.dumps({"height": cube.height, "width": cube.width,
                         "bands": cube.bands, "dtype": "f32"}) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())


def load_labels(path) -> LabelRaster:
    with open(path, "rb") as fh:
        header = _read_header(fh, ("height", "width", "classes"))
        h, w, k = int(header["height"]), int(header["width"]), int(header["classes"])
        payload = fh.read()
    expected = h * w * 2
    if len(payload) != expected:
        raise SizeMismatch(f"payload {len(payload)} bytes, expected {expected}")
    labels = np.frombuffer(payload, dtype="<u2").astype(np.int32).reshape(h, w)
    return LabelRaster(h, w, k, labels)


def write_labels(path, raster: LabelRaster) -> None:
    header = json.dumps({"height": raster.height, "width": raster.width,
                         "classes": raster.classes}) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(raster.labels, dtype="<u2").tobytes())


def standardize_bands(cube: HsiCube) -> HsiCube:
    """Zero-mean, unit population-std per band; constant bands map to zeros."""
    flat = cube.pixels()
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    out = (flat - mean) / safe
    out[:, std == 0] = 0.0
    return HsiCube(cube.height, cube.width, cube.bands,
                   out.reshape(cube.data.shape))


def fit_pca(pixels: np.ndarray, d: int) -> PcaModel:
    """Top-d covariance eigenvectors, eigenvalue-descending, sign-normalized.

    Sign convention: the largest-magnitude entry of each component is positive,
    which makes the decomposition deterministic across eigensolvers.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    n, bands = pixels.shape
    if not 1 <= d <= bands:
        raise DimensionMismatch(f"d={d} outside [1, {bands}]")
    if n < d:
        raise DimensionMismatch(f"need at least d={d} samples, got {n}")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / n
    if np.max(np.abs(cov)) == 0.0:
        raise RankDeficient("covariance matrix is identically zero")
    eigval, eigvec = np.linalg.eigh(cov)
    order = np.argsort(eigval)[::-1][:d]
    components = eigvec[:, order]
    variances = np.maximum(eigval[order], 0.0)
    for j in range(d):
        col = components[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            components[:, j] = -col
    return PcaModel(mean, components, variances)


def project(model: PcaModel, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape[1] != model.mean.size:
        raise DimensionMismatch(f"pixel width {pixels.shape[1]} vs bands {model.mean.size}")
    return (pixels - model.mean) @ model.components


def _minmax01(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0,1]; a degenerate range maps to constant 0.5."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo == 0.0:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def first_principal_gray(cube: HsiCube) -> np.ndarray:
    """Per-pixel first-principal-component score, min-max rescaled to [0,1]."""
    try:
        model = fit_pca(cube.pixels(), 1)
    except RankDeficient:
        return np.full((cube.height, cube.width), 0.5)
    scores = project(model, cube.pixels())[:, 0]
    return _minmax01(scores).reshape(cube.height, cube.width)
