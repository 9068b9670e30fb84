"""Mahalanobis anomaly detectors: global RX, dual-window local RX, and the
reconstruct-then-detect pipeline around the enhancement network.

Scores are squared Mahalanobis distances d(y) = (y-μ)ᵀ Λ⁻¹ (y-μ) with an
unbiased sample covariance (divisor n-1) and a relative diagonal ridge
(ridge_eps · mean diag Λ; absolute ridge_eps when the covariance vanishes).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .cube import HsiCube, normalize_symmetric, save_cube, load_cube, save_pgm, select_bands
from .network import NetParams, body_output, forward

DEFAULT_RIDGE_EPS = 1e-10
LRX_DEFAULT_WINDOWS = (13, 29)


class SingularCovarianceError(RuntimeError):
    """Covariance not positive definite even after the ridge."""


@dataclass(frozen=True)
class GaussianStats:
    """Background model: mean spectrum, inverse covariance, applied ridge."""

    mean: np.ndarray
    inv_cov: np.ndarray
    ridge_used: float


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel anomaly scores: finite, non-negative, shape (height, width)."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError(f"scores must be 2-d, got shape {s.shape}")
        if not np.isfinite(s).all():
            raise ValueError("scores contain non-finite values")
        if (s < 0).any():
            raise ValueError("scores must be non-negative")
        object.__setattr__(self, "scores", s)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class DualWindow:
    """Concentric odd-sized windows; background = ring between them."""

    inner: int
    outer: int

    def __post_init__(self):
        if not 3 <= self.inner < self.outer:
            raise ValueError(f"need 3 <= inner < outer, got {self}")
        if self.inner % 2 == 0 or self.outer % 2 == 0:
            raise ValueError(f"window sizes must be odd, got {self}")


def _ridged_cholesky(cov: np.ndarray, ridge_eps: float, what: str):
    """Cholesky of cov + ridge·I; the ridge scales with mean diag (absolute
    ridge_eps for an all-zero covariance)."""
    b = cov.shape[0]
    scale = float(np.trace(cov)) / b
    ridge = ridge_eps * (scale if scale > 0 else 1.0)
    ridged = cov + ridge * np.eye(b)
    try:
        chol = cho_factor(ridged, lower=True)
    except LinAlgError as exc:
        cond = float(np.linalg.cond(ridged))
        raise SingularCovarianceError(
            f"{what}: covariance singular after ridge {ridge:.3e} (cond~{cond:.3e})"
        ) from exc
    return chol, ridge


def global_stats(cube: HsiCube, ridge_eps: float = DEFAULT_RIDGE_EPS) -> GaussianStats:
    """Mean and ridged inverse covariance over all H·W spectra."""
    b = cube.bands
    x = cube.values.reshape(-1, b)
    n = x.shape[0]
    if n < 2:
        raise ValueError("global statistics need at least two pixels")
    mean = x.mean(axis=0)
    d = x - mean
    cov = d.T @ d / (n - 1)
    chol, ridge = _ridged_cholesky(cov, ridge_eps, "global stats")
    inv = cho_solve(chol, np.eye(b))
    inv = 0.5 * (inv + inv.T)
    return GaussianStats(mean, inv, ridge)


def _mahalanobis(spectra: np.ndarray, stats: GaussianStats) -> np.ndarray:
    d = spectra - stats.mean
    scores = np.einsum("ij,jk,ik->i", d, stats.inv_cov, d)
    # PD inverse => non-negative up to roundoff; clamp the roundoff
    return np.maximum(scores, 0.0)


def grx(cube: HsiCube, ridge_eps: float = DEFAULT_RIDGE_EPS) -> ScoreMap:
    """Global RX: Mahalanobis distance of every spectrum to the global stats."""
    stats = global_stats(cube, ridge_eps)
    scores = _mahalanobis(cube.values.reshape(-1, cube.bands), stats)
    return ScoreMap(scores.reshape(cube.height, cube.width))


def lrx(
    cube: HsiCube,
    dw: DualWindow = DualWindow(*LRX_DEFAULT_WINDOWS),
    ridge_eps: float = DEFAULT_RIDGE_EPS,
    return_fallback_mask: bool = False,
):
    """Local RX with a dual rectangular window.

    Per pixel, statistics come from the ring between the (border-clipped)
    inner and outer windows. Rings with fewer than B+1 pixels fall back to
    the global statistics for that pixel; fallbacks are flagged with a
    warning and, if requested, a boolean mask.
    """
    h, w, b = cube.height, cube.width, cube.bands
    if dw.outer > min(h, w):
        raise ValueError(f"outer window {dw.outer} exceeds image side {min(h, w)}")
    hi, ho = dw.inner // 2, dw.outer // 2
    v = cube.values
    scores = np.empty((h, w))
    fallback = np.zeros((h, w), dtype=bool)
    glob: GaussianStats | None = None
    for r in range(h):
        for c in range(w):
            r0, r1 = max(0, r - ho), min(h, r + ho + 1)
            c0, c1 = max(0, c - ho), min(w, c + ho + 1)
            box = v[r0:r1, c0:c1]
            keep = np.ones(box.shape[:2], dtype=bool)
            ir0, ir1 = max(0, r - hi) - r0, min(h, r + hi + 1) - r0
            ic0, ic1 = max(0, c - hi) - c0, min(w, c + hi + 1) - c0
            keep[ir0:ir1, ic0:ic1] = False
            ring = box[keep]
            if ring.shape[0] < b + 1:
                if glob is None:
                    glob = global_stats(cube, ridge_eps)
                scores[r, c] = _mahalanobis(v[r, c][None], glob)[0]
                fallback[r, c] = True
                continue
            mean = ring.mean(axis=0)
            d = ring - mean
            cov = d.T @ d / (ring.shape[0] - 1)
            chol, _ = _ridged_cholesky(cov, ridge_eps, f"lrx ring at ({r}, {c})")
            dc = v[r, c] - mean
            scores[r, c] = max(float(dc @ cho_solve(chol, dc)), 0.0)
    if fallback.any():
        warnings.warn(
            f"lrx fell back to global statistics on {int(fallback.sum())} pixels "
            f"(ring smaller than B+1={b + 1})",
            stacklevel=2,
        )
    result = ScoreMap(scores)
    if return_fallback_mask:
        return result, fallback
    return result


def _preprocess(cube: HsiCube, params: NetParams) -> HsiCube:
    """Band-select to the network's spectral size and scale to its input range."""
    h, w, b = params.config.input_size
    if (cube.height, cube.width) != (h, w):
        raise ValueError(
            f"cube {cube.height}x{cube.width} != network input {h}x{w}"
        )
    if cube.bands < b:
        raise ValueError(f"cube has {cube.bands} bands, network needs {b}")
    sel = select_bands(cube, b) if cube.bands > b else cube
    return normalize_symmetric(sel)[0]


def enhance_and_detect(
    cube: HsiCube, params: NetParams, ridge_eps: float = DEFAULT_RIDGE_EPS
) -> ScoreMap:
    """Reconstruct through the network, then global RX on the reconstruction."""
    return grx(forward(_preprocess(cube, params), params), ridge_eps)


def residual_map(cube: HsiCube, params: NetParams) -> HsiCube:
    """Per-band network residual: forward(Y) - Y on the preprocessed cube.

    Computed as the network's residual branch directly, so
    forward(Y).values == Y.values + residual_map(...).values bit-for-bit.
    """
    return body_output(_preprocess(cube, params), params)


# ---------------------------------------------------------------------------
# score-map files
# ---------------------------------------------------------------------------


def save_score_map(score: ScoreMap, stem) -> None:
    """Score raster in the cube format (bands=1)."""
    save_cube(HsiCube(score.scores[:, :, None]), stem)


def load_score_map(stem) -> ScoreMap:
    cube = load_cube(stem)
    if cube.bands != 1:
        raise ValueError(f"score map {stem} must have exactly 1 band, got {cube.bands}")
    return ScoreMap(cube.values[:, :, 0])


def score_visualization(score: ScoreMap) -> np.ndarray:
    """Maxmin-scaled 8-bit rendering of a score map (constant map -> zeros)."""
    s = score.scores
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.zeros(s.shape, dtype=np.uint8)
    return np.round(255.0 * (s - lo) / (hi - lo)).astype(np.uint8)


def save_score_pgm(score: ScoreMap, path) -> None:
    save_pgm(score_visualization(score), path)
