"""Hyperspectral cube and label-map types, file formats, and basic transforms.

A cube is stored in memory as a float64 array of shape (height, width, bands).
On disk a cube is a pair of files sharing a stem: ``<stem>.json`` (header) and
``<stem>.raw`` (little-endian IEEE-754 float32, band-sequential: band-major,
then row-major). Label maps and 8-bit visualizations use binary PGM (P5).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_HEADER_KEYS = {"height", "width", "bands", "dtype", "layout"}


class CubeFormatError(ValueError):
    """Malformed cube header or payload."""


@dataclass(frozen=True)
class HsiCube:
    """A hyperspectral image: float64 values of shape (height, width, bands).

    Values must be finite. Spatial sizes down to 1x1 are allowed in memory
    (pooling pyramids produce them); operations that need a 3x3 support and
    the file loader enforce height, width >= 3 themselves.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"cube values must be 3-d (H, W, B), got shape {v.shape}")
        if min(v.shape) < 1:
            raise ValueError(f"cube axes must be non-empty, got shape {v.shape}")
        bad = ~np.isfinite(v)
        if bad.any():
            r, c, b = (int(i) for i in np.argwhere(bad)[0])
            raise ValueError(
                f"cube contains a non-finite value at (row={r}, col={c}, band={b})"
            )
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class GroundTruthMap:
    """Binary anomaly labels, shape (height, width), values in {0, 1}.

    Anomalies are rare by construction: the map must contain at least one
    background pixel and strictly less than half target pixels.
    """

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"labels must be 2-d, got shape {lab.shape}")
        if not np.isin(lab, (0, 1)).all():
            raise ValueError("labels must contain only 0 and 1")
        lab = lab.astype(np.uint8)
        frac = lab.mean()
        if frac >= 0.5:
            raise ValueError(f"target fraction {frac:.3f} >= 0.5; anomalies must be rare")
        object.__setattr__(self, "labels", lab)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def target_count(self) -> int:
        return int(self.labels.sum())


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_cube(cube: HsiCube, stem: str | Path) -> None:
    """Write ``<stem>.json`` + ``<stem>.raw`` (f32le, band-sequential)."""
    stem = Path(stem)
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "dtype": "f32le",
        "layout": "bsq",
    }
    stem.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    payload = np.ascontiguousarray(cube.values.transpose(2, 0, 1)).astype("<f4")
    stem.with_suffix(".raw").write_bytes(payload.tobytes())


def load_cube(stem: str | Path) -> HsiCube:
    """Load a cube pair written by :func:`save_cube`; values widen to float64."""
    stem = Path(stem)
    header_path = stem.with_suffix(".json")
    raw_path = stem.with_suffix(".raw")
    if not header_path.exists():
        raise FileNotFoundError(f"missing cube header {header_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing cube payload {raw_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise CubeFormatError(f"malformed cube header {header_path}: {exc}") from exc
    if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
        raise CubeFormatError(
            f"malformed cube header {header_path}: keys {sorted(header)} "
            f"!= {sorted(_HEADER_KEYS)}"
        )
    if header["dtype"] != "f32le" or header["layout"] != "bsq":
        raise CubeFormatError(
            f"unsupported cube encoding {header['dtype']}/{header['layout']}"
        )
    h, w, b = header["height"], header["width"], header["bands"]
    for name, n in (("height", h), ("width", w), ("bands", b)):
        if not isinstance(n, int) or n < 1:
            raise CubeFormatError(f"malformed cube header: bad {name} {n!r}")
    if h < 3 or w < 3:
        raise CubeFormatError(f"cube files must be at least 3x3 spatially, got {h}x{w}")
    raw = raw_path.read_bytes()
    expected = h * w * b * 4
    if len(raw) != expected:
        raise CubeFormatError(
            f"cube payload size mismatch for {raw_path}: "
            f"expected {expected} bytes, found {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    values = flat.reshape(b, h, w).transpose(1, 2, 0)
    return HsiCube(values)  # finiteness checked by the constructor


def save_pgm(raster: np.ndarray, path: str | Path) -> None:
    """Write a 2-d uint8 array as binary PGM (P5, maxval 255)."""
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.dtype != np.uint8:
        raise ValueError("PGM raster must be 2-d uint8")
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())


def load_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM written by :func:`save_pgm`; returns uint8 (H, W)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise CubeFormatError(f"{path}: not a binary PGM (P5) file")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # possibly with '#' comment lines
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise CubeFormatError(f"{path}: unsupported PGM maxval {maxval}")
    raster = np.frombuffer(data[pos : pos + h * w], dtype=np.uint8)
    if raster.size != h * w:
        raise CubeFormatError(f"{path}: PGM payload truncated")
    return raster.reshape(h, w).copy()


def save_truth(gt: GroundTruthMap, path: str | Path) -> None:
    """Write a label map as PGM with 0 = background, 255 = target."""
    save_pgm((gt.labels * np.uint8(255)), path)


def load_truth(path: str | Path) -> GroundTruthMap:
    raster = load_pgm(path)
    return GroundTruthMap((raster > 127).astype(np.uint8))


# ---------------------------------------------------------------------------
# spectral / spatial transforms
# ---------------------------------------------------------------------------


def select_bands(cube: HsiCube, count: int) -> HsiCube:
    """Keep the first ``count`` bands."""
    if not 1 <= count <= cube.bands:
        raise ValueError(f"band count {count} outside [1, {cube.bands}]")
    return HsiCube(cube.values[:, :, :count].copy())


def normalize_unit(cube: HsiCube) -> tuple[HsiCube, bool]:
    """Affine rescale to [0, 1] over the whole cube.

    Returns (normalized cube, degenerate flag); a constant cube maps to all
    zeros with the flag set.
    """
    lo = cube.values.min()
    hi = cube.values.max()
    if hi == lo:
        return HsiCube(np.zeros_like(cube.values)), True
    return HsiCube((cube.values - lo) / (hi - lo)), False


def normalize_symmetric(cube: HsiCube) -> tuple[HsiCube, bool]:
    """Affine rescale to [-0.1, 0.1] (the network input range).

    Returns (normalized cube, degenerate flag); a constant cube maps to all
    zeros with the flag set.
    """
    lo = cube.values.min()
    hi = cube.values.max()
    if hi == lo:
        return HsiCube(np.zeros_like(cube.values)), True
    return HsiCube(0.2 * (cube.values - lo) / (hi - lo) - 0.1), False


def crop_four(cube: HsiCube, size: int) -> list[HsiCube]:
    """The four ``size`` x ``size`` corner crops (TL, TR, BL, BR order)."""
    h, w = cube.height, cube.width
    if not 1 <= size <= min(h, w):
        raise ValueError(f"crop size {size} outside [1, {min(h, w)}]")
    v = cube.values
    return [
        HsiCube(v[:size, :size].copy()),
        HsiCube(v[:size, w - size :].copy()),
        HsiCube(v[h - size :, :size].copy()),
        HsiCube(v[h - size :, w - size :].copy()),
    ]


def random_rotate_flip(cube: HsiCube, rng: np.random.Generator) -> HsiCube:
    """One of the 16 rigid transforms, drawn from ``rng``.

    Draw order (fixed contract): quarter-turn count k in {0,1,2,3}, then a
    horizontal flip with probability 1/2, then a vertical flip with
    probability 1/2. Requires a square cube so rotations keep the shape.
    """
    if cube.height != cube.width:
        raise ValueError("rotate/flip augmentation requires a square cube")
    v = cube.values
    k = int(rng.integers(0, 4))
    if k:
        v = np.rot90(v, k, axes=(0, 1))
    if rng.random() < 0.5:
        v = v[:, ::-1, :]  # horizontal flip (mirror columns)
    if rng.random() < 0.5:
        v = v[::-1, :, :]  # vertical flip (mirror rows)
    return HsiCube(v.copy())
