"""Synthetic hyperspectral scenes with planted anomalies.

Backgrounds are convex mixtures of a few random smooth spectra weighted by
smooth spatial abundance fields plus white Gaussian noise; anomalies are
4-connected blobs (grown with the same procedure as the training masks)
carrying an extra spectrum offset by a fixed contrast. Serves as an offline
stand-in for flight-line data at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .cube import GroundTruthMap, HsiCube
from .masking import GrowthError, grow_region


@dataclass(frozen=True)
class SynthParams:
    endmember_count: int = 5
    anomaly_count: int = 3
    anomaly_area_range: tuple[int, int] = (6, 25)
    contrast: float = 0.9
    noise_sigma: float = 0.03
    size: tuple[int, int, int] = (64, 64, 30)

    def __post_init__(self):
        h, w, b = self.size
        if h < 3 or w < 3 or b < 1:
            raise ValueError(f"scene size {self.size} too small (need >=3x3x1)")
        if self.endmember_count < 1:
            raise ValueError("endmember_count must be >= 1")
        if self.anomaly_count < 0:
            raise ValueError("anomaly_count must be >= 0")
        lo, hi = self.anomaly_area_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad anomaly area range {self.anomaly_area_range}")
        if hi > h * w:
            raise ValueError("anomaly area range exceeds the image")
        if self.contrast <= 0:
            raise ValueError("contrast must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _smooth_spectra(rng: np.random.Generator, count: int, bands: int) -> np.ndarray:
    """Random-walk spectra, low-pass filtered and rescaled into [0.3, 0.8]."""
    walks = np.cumsum(rng.normal(size=(count, bands)), axis=1)
    smooth = gaussian_filter1d(walks, sigma=max(1.0, bands / 10.0), axis=1, mode="nearest")
    lo = smooth.min(axis=1, keepdims=True)
    hi = smooth.max(axis=1, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return 0.3 + 0.5 * (smooth - lo) / span


def _abundance_fields(rng: np.random.Generator, count: int, h: int, w: int) -> np.ndarray:
    """Smooth non-negative fields summing to 1 over the endmember axis."""
    noise = rng.normal(size=(count, h, w))
    fields = gaussian_filter(noise, sigma=(0, min(h, w) / 8.0, min(h, w) / 8.0), mode="reflect")
    std = fields.std(axis=(1, 2), keepdims=True)
    fields = (fields - fields.mean(axis=(1, 2), keepdims=True)) / np.where(std > 0, std, 1.0)
    logits = 3.0 * fields
    logits -= logits.max(axis=0, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=0, keepdims=True)


def synth_scene(
    params: SynthParams, seed: int | tuple[int, ...]
) -> tuple[HsiCube, GroundTruthMap]:
    """Generate one scene deterministically from (params, seed).

    Draw order: endmember+anomaly spectra, abundance fields, then per blob its
    area followed by up to 8 (start pixel, growth) attempts, then the noise
    field. Blob pixels carry the extra spectrum plus ``contrast``; the ground
    truth marks exactly the blob pixels.
    """
    h, w, b = params.size
    rng = np.random.default_rng(seed)
    spectra = _smooth_spectra(rng, params.endmember_count + 1, b)
    weights = _abundance_fields(rng, params.endmember_count, h, w)
    values = np.einsum("khw,kb->hwb", weights, spectra[: params.endmember_count])

    anomaly_spectrum = spectra[params.endmember_count] + params.contrast
    occupied = np.zeros((h, w), dtype=bool)
    for _blob in range(params.anomaly_count):
        lo, hi = params.anomaly_area_range
        area = int(rng.integers(lo, hi + 1))
        for _attempt in range(8):
            r = int(rng.integers(0, h))
            c = int(rng.integers(0, w))
            if occupied[r, c]:
                continue
            try:
                blob = grow_region((r, c), area, (h, w), occupied, rng)
            except GrowthError:
                continue
            break
        else:
            raise RuntimeError(
                f"anomaly blob of area {area} failed to fit after 8 attempts"
            )
        for pixel in blob:
            occupied[pixel] = True
            values[pixel] = anomaly_spectrum

    if params.noise_sigma > 0:
        values = values + rng.normal(0.0, params.noise_sigma, size=(h, w, b))

    # quantize to float32-representable doubles so file round-trips are bit-exact
    values = values.astype(np.float32).astype(np.float64)
    return HsiCube(values), GroundTruthMap(occupied.astype(np.uint8))
