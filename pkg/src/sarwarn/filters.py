"""Spatial speckle filters, the Quegan-Yu multitemporal filter, and the
temporal x spatial combination grid used for filter benchmarking.

All filters work on linear-power images and mirror-pad borders
(``d c b | a b c d | c b a``), so output grids keep the input shape.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .stack_io import LINEAR, RasterStack, StackError

log = logging.getLogger(__name__)

FROST_DAMPING = 1.0
# Sentinel-1 IW GRD nominal multilook
LEE_LOOKS = 4.7

_KINDS = ("none", "median", "frost", "lee")


def _check_window(window: int) -> int:
    window = int(window)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    return window


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    return image


def _local_moments(image: np.ndarray, window: int):
    """Window mean and population standard deviation."""
    mean = ndimage.uniform_filter(image, window, mode="mirror")
    mean_sq = ndimage.uniform_filter(image * image, window, mode="mirror")
    var = np.maximum(mean_sq - mean * mean, 0.0)
    return mean, np.sqrt(var)


def _coefficient_of_variation_sq(mean, std):
    with np.errstate(divide="ignore", invalid="ignore"):
        ci2 = np.where(mean > 0, (std / mean) ** 2, 0.0)
    return ci2


def median_filter(image, window: int) -> np.ndarray:
    window = _check_window(window)
    image = _check_image(image)
    return ndimage.median_filter(image, size=window, mode="mirror")


def lee_filter(image, window: int, nominal_looks: float = LEE_LOOKS) -> np.ndarray:
    """Lee MMSE filter: ``m + W (I - m)``, ``W = max(0, 1 - Cu^2 / CI^2)``."""
    if nominal_looks <= 0:
        raise ValueError("nominal_looks must be positive")
    window = _check_window(window)
    image = _check_image(image)
    mean, std = _local_moments(image, window)
    ci2 = _coefficient_of_variation_sq(mean, std)
    cu2 = 1.0 / nominal_looks
    with np.errstate(divide="ignore"):
        weight = np.where(ci2 > 0, np.maximum(0.0, 1.0 - cu2 / ci2), 0.0)
    return mean + weight * (image - mean)


def frost_filter(image, window: int, damping: float = FROST_DAMPING) -> np.ndarray:
    """Frost filter with weights ``exp(-damping * CI^2 * d)`` over the window.

    ``d`` is the Euclidean pixel distance to the window centre and ``CI``
    the local coefficient of variation.
    """
    if damping <= 0:
        raise ValueError("damping must be positive")
    window = _check_window(window)
    image = _check_image(image)
    half = window // 2
    mean, std = _local_moments(image, window)
    k = damping * _coefficient_of_variation_sq(mean, std)
    padded = np.pad(image, half, mode="reflect")
    h, w = image.shape
    num = np.zeros_like(image)
    den = np.zeros_like(image)
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            wgt = np.exp(-k * np.hypot(dy, dx))
            num += wgt * padded[half + dy : half + dy + h, half + dx : half + dx + w]
            den += wgt
    return num / den


@dataclass(frozen=True)
class SpatialFilterSpec:
    kind: str = "none"
    window: int = 0
    damping: float = FROST_DAMPING
    nominal_looks: float = LEE_LOOKS

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.kind != "none":
            if self.window < 3 or self.window % 2 == 0:
                raise ValueError(f"{self.kind} window must be odd and >= 3")
            if self.damping <= 0 or self.nominal_looks <= 0:
                raise ValueError("damping and nominal_looks must be positive")

    @property
    def name(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}{self.window}"

    @classmethod
    def parse(cls, text: str, **params) -> "SpatialFilterSpec":
        """``"none"``, ``"median9"``, ``"frost5"``, ``"lee3"`` ..."""
        text = text.strip().lower()
        if text == "none":
            return cls()
        for kind in _KINDS[1:]:
            if text.startswith(kind):
                try:
                    window = int(text[len(kind):])
                except ValueError:
                    break
                keep = {k: v for k, v in params.items()
                        if (k == "damping" and kind == "frost") or (k == "nominal_looks" and kind == "lee")}
                return cls(kind, window, **keep)
        raise ValueError(f"cannot parse filter spec {text!r}")

    def apply(self, image) -> np.ndarray:
        if self.kind == "none":
            return np.array(image, dtype=np.float64)
        if self.kind == "median":
            return median_filter(image, self.window)
        if self.kind == "frost":
            return frost_filter(image, self.window, self.damping)
        return lee_filter(image, self.window, self.nominal_looks)


# the bench grid: rows of the score table are post-spatial, columns temporal-inner
BENCH_FILTERS = ("none", "median9", "frost5", "frost9", "lee3")


@dataclass(frozen=True)
class FilterCombination:
    temporal_inner: SpatialFilterSpec
    post_spatial: SpatialFilterSpec

    @property
    def name(self) -> str:
        t = self.temporal_inner
        temporal = "none" if t.kind == "none" else f"QY({t.name})"
        return f"{temporal}+{self.post_spatial.name}"

    @classmethod
    def parse(cls, text: str, **params) -> "FilterCombination":
        """Inverse of ``name``: ``"QY(median9)+frost9"`` or ``"none+lee3"``."""
        try:
            temporal, spatial = text.strip().split("+")
        except ValueError:
            raise ValueError(f"cannot parse filter combination {text!r}") from None
        temporal = temporal.strip()
        if temporal.upper().startswith("QY(") and temporal.endswith(")"):
            temporal = temporal[3:-1]
        elif temporal.lower() != "none":
            raise ValueError(f"temporal part must be 'none' or 'QY(<filter>)', got {temporal!r}")
        return cls(SpatialFilterSpec.parse(temporal, **params), SpatialFilterSpec.parse(spatial, **params))


def bench_grid(damping: float = FROST_DAMPING, nominal_looks: float = LEE_LOOKS) -> list:
    """The 5 x 5 temporal-inner x post-spatial combinations."""
    specs = [SpatialFilterSpec.parse(s, damping=damping, nominal_looks=nominal_looks)
             for s in BENCH_FILTERS]
    return [FilterCombination(t, s) for t in specs for s in specs]


def _map(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _fill_nodata(image: np.ndarray):
    """Replace NaN by the image median so spatial windows stay finite."""
    mask = np.isnan(image)
    if not mask.any():
        return image, None
    if mask.all():
        return np.zeros_like(image), mask
    filled = image.copy()
    filled[mask] = np.median(image[~mask])
    return filled, mask


def _filter_date(spec: SpatialFilterSpec, image: np.ndarray) -> np.ndarray:
    filled, mask = _fill_nodata(np.asarray(image, dtype=np.float64))
    out = spec.apply(filled)
    if mask is not None:
        out[mask] = np.nan
    return out


def quegan_yu_cube(cube: np.ndarray, estimator: SpatialFilterSpec, threads: int = 1) -> np.ndarray:
    """Quegan-Yu filter on a ``(date, row, col)`` linear-power cube.

    ``J_k = <I_k>/N * sum_i I_i/<I_i>`` where ``<I_i>`` is ``estimator``
    applied to date ``i``.  Pixels where any ``<I_i>`` is not positive
    are returned as NaN.
    """
    if estimator.kind == "none":
        raise ValueError("Quegan-Yu needs a local-mean estimator")
    cube = np.asarray(cube, dtype=np.float64)
    n = cube.shape[0]
    if n < 1:
        raise ValueError("empty stack")
    local = np.stack(_map(lambda img: _filter_date(estimator, img), list(cube), threads))
    bad = ~(local > 0).all(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_mean = (cube / local).mean(axis=0)
        out = local * ratio_mean[None] if n > 1 else cube.copy()
    if bad.any():
        out[:, bad] = np.nan
    return out


def quegan_yu(stack: RasterStack, estimator: SpatialFilterSpec, band: str,
              threads: int = 1) -> RasterStack:
    if stack.unit_domain != LINEAR:
        raise StackError("Quegan-Yu filtering needs a linear-power stack")
    out = quegan_yu_cube(stack.band_cube(band), estimator, threads)
    return stack.with_pixels(out[:, None], bands=(band,))


def filter_dates(cube: np.ndarray, spec: SpatialFilterSpec, threads: int = 1) -> np.ndarray:
    """Apply a spatial filter to every date of a ``(date, row, col)`` cube."""
    if spec.kind == "none":
        return np.array(cube, dtype=np.float64)
    return np.stack(_map(lambda img: _filter_date(spec, img), list(cube), threads))


def apply_combination_cube(cube: np.ndarray, combo: FilterCombination, threads: int = 1) -> np.ndarray:
    cube = np.asarray(cube, dtype=np.float64)
    if combo.temporal_inner.kind != "none":
        cube = quegan_yu_cube(cube, combo.temporal_inner, threads)
    return filter_dates(cube, combo.post_spatial, threads)


def apply_combination(stack: RasterStack, combo: FilterCombination, band: str,
                      threads: int = 1) -> RasterStack:
    """Optional Quegan-Yu pass, then a per-date spatial filter; one band out."""
    if stack.unit_domain != LINEAR:
        raise StackError("filtering needs a linear-power stack")
    out = apply_combination_cube(stack.band_cube(band), combo, threads)
    return stack.with_pixels(out[:, None], bands=(band,))


def filter_stack(stack: RasterStack, combo: FilterCombination, threads: int = 1) -> RasterStack:
    """``apply_combination`` over every band of the stack."""
    if stack.unit_domain != LINEAR:
        raise StackError("filtering needs a linear-power stack")
    cubes = [apply_combination_cube(stack.band_cube(b), combo, threads) for b in stack.bands]
    return stack.with_pixels(np.stack(cubes, axis=1))
