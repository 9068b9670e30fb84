"""Random irregular-region masks for self-supervised reconstruction training.

A mask map partitions the image into a K x K patch grid, picks N patches at
random, and grows one 4-connected region of random area from a random start
cell in each chosen patch (regions may spill across patch borders but never
overlap each other). Masked pixels are filled either with zeros (CutOut) or
with another cube's pixels (CutMix).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cube import HsiCube

CUTOUT = "cutout"
CUTMIX = "cutmix"


class GrowthError(RuntimeError):
    """Region growth could not reach the target area."""


class MaskGenerationError(RuntimeError):
    """Mask generation ran out of start-pixel retries."""


@dataclass(frozen=True)
class MaskParams:
    """Mask sampling parameters.

    grid_k: patches per side (the image is split into grid_k² patches).
    n_range: inclusive [lo, hi] for the number of masked regions.
    area_range: inclusive [lo, hi] for each region's pixel area.
    merge_prob: probability that a frontier pixel joins the region per sweep.
    """

    grid_k: int = 8
    n_range: tuple[int, int] = (1, 32)
    area_range: tuple[int, int] = (3, 20)
    merge_prob: float = 0.5

    def __post_init__(self):
        if self.grid_k < 1:
            raise ValueError(f"grid_k must be >= 1, got {self.grid_k}")
        n_lo, n_hi = self.n_range
        a_lo, a_hi = self.area_range
        if not 1 <= n_lo <= n_hi:
            raise ValueError(f"bad region-count range {self.n_range}")
        if n_hi > self.grid_k**2:
            raise ValueError(
                f"n_range upper bound {n_hi} exceeds patch count {self.grid_k ** 2}"
            )
        if n_hi == self.grid_k**2:
            warnings.warn(
                "n_range upper bound equals the patch count; every patch may be masked",
                stacklevel=2,
            )
        if not 1 <= a_lo <= a_hi:
            raise ValueError(f"bad area range {self.area_range}")
        if not 0.0 < self.merge_prob <= 1.0:
            raise ValueError(f"merge_prob must be in (0, 1], got {self.merge_prob}")


@dataclass(frozen=True)
class MaskMap:
    """Binary mask: bits[r, c] == 0 on masked pixels, 1 on kept pixels.

    ``regions`` optionally records the grown regions (one frozenset of (row,
    col) pixels per region) for provenance checks; when present the union of
    the regions must equal the masked support and regions must be disjoint.
    """

    bits: np.ndarray
    regions: tuple[frozenset, ...] | None = None

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask bits must be 2-d, got shape {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("mask bits must contain only 0 and 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))
        if self.regions is not None:
            seen: set = set()
            for region in self.regions:
                if seen & region:
                    raise ValueError("mask regions overlap")
                seen |= region
            masked = {(int(r), int(c)) for r, c in zip(*np.nonzero(self.bits == 0))}
            if seen != masked:
                raise ValueError("mask regions do not cover the masked support")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def masked_fraction(self) -> float:
        return float(1.0 - self.bits.mean())


@dataclass(frozen=True)
class FillSpec:
    """What masked pixels are filled with: zeros (CutOut) or a donor cube."""

    mode: str
    donor: HsiCube | None = None

    def __post_init__(self):
        if self.mode not in (CUTOUT, CUTMIX):
            raise ValueError(f"fill mode must be {CUTOUT!r} or {CUTMIX!r}, got {self.mode!r}")
        if self.mode == CUTMIX and self.donor is None:
            raise ValueError("CutMix fill requires a donor cube")


def grow_region(
    start: tuple[int, int],
    area: int,
    bounds: tuple[int, int],
    occupied: np.ndarray | None,
    rng: np.random.Generator,
    merge_prob: float = 0.5,
) -> set:
    """Grow a 4-connected region of exactly ``area`` pixels from ``start``.

    Each sweep enumerates the region's free 4-connected frontier in row-major
    order and draws one uniform per frontier pixel; pixels with draw <
    ``merge_prob`` join the region, in order, until the area is reached
    (leftover accepted candidates of the final sweep are discarded). Rejected
    pixels stay eligible on later sweeps. Raises :class:`GrowthError` when the
    frontier empties first (the free component is smaller than ``area``).
    """
    h, w = bounds
    r0, c0 = int(start[0]), int(start[1])
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise ValueError(f"start {start} outside bounds {bounds}")
    if occupied is not None and occupied[r0, c0]:
        raise ValueError(f"start {start} lies in an occupied pixel")
    if area < 1:
        raise ValueError(f"area must be >= 1, got {area}")
    region = {(r0, c0)}
    while len(region) < area:
        frontier = sorted(
            (nr, nc)
            for r, c in region
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
            if 0 <= nr < h
            and 0 <= nc < w
            and (nr, nc) not in region
            and (occupied is None or not occupied[nr, nc])
        )
        if not frontier:
            raise GrowthError(
                f"region from {start} exhausted its free component at "
                f"{len(region)} < {area} pixels"
            )
        draws = rng.random(len(frontier))
        for pixel, d in zip(frontier, draws):
            if d < merge_prob:
                region.add(pixel)
                if len(region) == area:
                    break
    return region


def generate_mask_map(
    h: int, w: int, params: MaskParams, rng: np.random.Generator
) -> MaskMap:
    """Sample a mask map: N regions grown from N distinct grid patches.

    Draw order (fixed contract): region count N; N patch indices without
    replacement; then per region its area, followed by up to 8 (start pixel,
    growth) attempts — a start landing on an occupied pixel or a failed
    growth consumes one attempt. Regions never overlap: earlier regions are
    occupied space for later ones.
    """
    k = params.grid_k
    if h % k or w % k:
        raise ValueError(f"image size {h}x{w} not divisible by grid_k={k}")
    ph, pw = h // k, w // k
    n = int(rng.integers(params.n_range[0], params.n_range[1] + 1))
    patches = rng.choice(k * k, size=n, replace=False)
    occupied = np.zeros((h, w), dtype=bool)
    regions = []
    for patch in patches:
        pr, pc = divmod(int(patch), k)
        area = int(rng.integers(params.area_range[0], params.area_range[1] + 1))
        for _attempt in range(8):
            r = int(rng.integers(pr * ph, (pr + 1) * ph))
            c = int(rng.integers(pc * pw, (pc + 1) * pw))
            if occupied[r, c]:
                continue
            try:
                region = grow_region((r, c), area, (h, w), occupied, rng, params.merge_prob)
            except GrowthError:
                continue
            break
        else:
            raise MaskGenerationError(
                f"no viable start pixel in patch ({pr}, {pc}) after 8 attempts"
            )
        for pixel in region:
            occupied[pixel] = True
        regions.append(frozenset(region))
    bits = np.ones((h, w), dtype=np.uint8)
    bits[occupied] = 0
    return MaskMap(bits, tuple(regions))


def apply_mask(cube: HsiCube, mask: MaskMap, fill: FillSpec) -> HsiCube:
    """Elementwise masking: out = cube ⊗ M + fill ⊗ (1 − M), full spectrum per pixel."""
    if (mask.height, mask.width) != (cube.height, cube.width):
        raise ValueError(
            f"mask shape {(mask.height, mask.width)} != cube shape "
            f"{(cube.height, cube.width)}"
        )
    if fill.mode == CUTMIX:
        donor = fill.donor
        if donor.values.shape != cube.values.shape:
            raise ValueError(
                f"donor shape {donor.values.shape} != cube shape {cube.values.shape}"
            )
        fill_values = donor.values
    else:
        fill_values = np.zeros_like(cube.values)
    m = mask.bits[:, :, None].astype(np.float64)
    return HsiCube(cube.values * m + fill_values * (1.0 - m))
