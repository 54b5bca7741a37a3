"""Despeckling quality indexes (ENL, Range) and the filter-bench scoring."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .filters import FilterCombination, apply_combination_cube, filter_dates, quegan_yu_cube
from .stack_io import LINEAR, RasterStack, SampleSet, StackError

log = logging.getLogger(__name__)

ENL_WINDOW = 7


class DegenerateSampleError(ValueError):
    pass


def enl(values) -> float:
    """Equivalent number of looks: mean^2 over unbiased sample variance."""
    values = np.asarray(values, dtype=np.float64).ravel()
    values = values[~np.isnan(values)]
    if values.size < 2:
        raise ValueError("ENL needs at least two values")
    var = values.var(ddof=1)
    # a constant sample can leave rounding residue in the variance
    if var == 0 or values.min() == values.max():
        raise DegenerateSampleError("degenerate homogeneous sample (zero variance)")
    return float(values.mean() ** 2 / var)


def range_index(series) -> float:
    """``10 log10(P90 / P10)`` of a linear-power series, in dB.

    Percentiles interpolate linearly between order statistics.  Accepts a
    ``TimeSeries`` or any array.
    """
    values = np.asarray(getattr(series, "values", series), dtype=np.float64).ravel()
    values = values[~np.isnan(values)]
    if values.size < 2:
        raise ValueError("range index needs at least two values")
    if (values <= 0).any():
        raise ValueError("range index needs strictly positive linear-power values")
    p10, p90 = np.percentile(values, [10.0, 90.0], method="linear")
    return float(10.0 * np.log10(p90 / p10))


def normalize_scores(raw) -> list:
    """Min-max scale to [0, 1]; an all-equal input maps to 0.5 everywhere."""
    raw = [float(x) for x in raw]
    if not raw:
        raise ValueError("cannot normalize an empty list")
    lo, hi = min(raw), max(raw)
    if hi == lo:
        return [0.5] * len(raw)
    return [(x - lo) / (hi - lo) for x in raw]


def scale_to_max(raw) -> list:
    """Divide by the largest value, keeping each index's natural zero.

    Both bench indexes are ratio-scale (ENL >= 0, Range >= 0 dB), so a
    combination keeping half the best Range gets 0.5 rather than 0.
    Degenerate input (maximum 0) maps to 0.5 everywhere.
    """
    raw = [float(x) for x in raw]
    if not raw:
        raise ValueError("cannot normalize an empty list")
    if min(raw) < 0:
        raise ValueError("scale_to_max needs non-negative values")
    hi = max(raw)
    if hi == 0:
        return [0.5] * len(raw)
    return [x / hi for x in raw]


NORMALIZERS = {"max": scale_to_max, "minmax": normalize_scores}


@dataclass(frozen=True)
class CombinationScore:
    combo: FilterCombination
    mean_enl: float
    mean_range: float
    normalized_enl: float = math.nan
    normalized_range: float = math.nan
    score: float = math.nan
    absent: bool = False

    @property
    def name(self) -> str:
        return self.combo.name


def _window(cube: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    half = size // 2
    r0, c0 = max(row - half, 0), max(col - half, 0)
    return cube[:, r0 : row + half + 1, c0 : col + half + 1]


def location_enl(cube: np.ndarray, row: int, col: int, size: int = ENL_WINDOW) -> float:
    """Mean over dates of the ENL of the window around ``(row, col)``."""
    block = _window(cube, row, col, size)
    return float(np.mean([enl(img) for img in block]))


def _mean_or_absent(values: list, n_total: int, what: str, name: str):
    if n_total and len(values) * 2 < n_total:
        log.warning("%s: %s failed on %d of %d samples", name, what, n_total - len(values), n_total)
        return None
    return float(np.mean(values)) if values else None


def evaluate_combination(cube: np.ndarray, combo: FilterCombination, forest: SampleSet,
                         cleared: SampleSet, threads: int = 1,
                         enl_window: int = ENL_WINDOW, temporal: np.ndarray | None = None
                         ) -> CombinationScore:
    """Raw (un-normalized) ENL and Range for one combination.

    ``temporal`` may carry a precomputed Quegan-Yu cube for
    ``combo.temporal_inner``; only the spatial pass is then run.
    """
    if temporal is None:
        filtered = apply_combination_cube(cube, combo, threads)
    else:
        filtered = filter_dates(temporal, combo.post_spatial, threads)
    enls, ranges = [], []
    for (r, c), _ in forest:
        try:
            value = location_enl(filtered, r, c, enl_window)
        except ValueError:
            continue
        if np.isfinite(value):
            enls.append(value)
    for (r, c), _ in cleared:
        try:
            value = range_index(filtered[:, r, c])
        except ValueError:
            continue
        if np.isfinite(value):
            ranges.append(value)
    mean_enl = _mean_or_absent(enls, len(forest), "ENL", combo.name)
    mean_rng = _mean_or_absent(ranges, len(cleared), "Range", combo.name)
    if mean_enl is None or mean_rng is None:
        return CombinationScore(combo, mean_enl or math.nan, mean_rng or math.nan, absent=True)
    return CombinationScore(combo, mean_enl, mean_rng)


def rank_scores(raw: list, normalization: str = "max") -> list:
    """Normalize each index across the present combinations and sort.

    ``normalization`` is ``"max"`` (ratio to the best combination) or
    ``"minmax"``.  With min-max the unfiltered combination, which holds
    both the lowest ENL and the speckle-inflated highest Range, is pinned
    at exactly 0.5.  Sorting is by descending score, ties broken by
    combination name; absent combinations go last in name order.
    """
    present = [s for s in raw if not s.absent]
    absent = sorted((s for s in raw if s.absent), key=lambda s: s.name)
    if not present:
        return absent
    norm = NORMALIZERS[normalization]
    n_enl = norm([s.mean_enl for s in present])
    n_rng = norm([s.mean_range for s in present])
    scored = [
        CombinationScore(s.combo, s.mean_enl, s.mean_range, e, g, (e + g) / 2.0)
        for s, e, g in zip(present, n_enl, n_rng)
    ]
    scored.sort(key=lambda s: (-s.score, s.name))
    return scored + absent


def score_combinations(stack: RasterStack, forest: SampleSet, cleared: SampleSet,
                       combos: list, band: str, threads: int = 1,
                       enl_window: int = ENL_WINDOW, normalization: str = "max") -> list:
    """Filter the stack with every combination and rank them.

    ENL is taken on a window around each forest location (per date, then
    averaged); Range on the filtered series at each cleared location.
    """
    if not combos:
        raise ValueError("no filter combinations to score")
    if normalization not in NORMALIZERS:
        raise ValueError(f"unknown normalization {normalization!r}")
    if not len(forest) or not len(cleared):
        raise ValueError("both sample sets must be non-empty")
    if stack.unit_domain != LINEAR:
        raise StackError("scoring needs a linear-power stack")
    forest.check_bounds(stack.height, stack.width)
    cleared.check_bounds(stack.height, stack.width)
    cube = stack.band_cube(band)
    qy_cache = {}
    raw = []
    for combo in combos:
        log.info("scoring %s", combo.name)
        inner = combo.temporal_inner
        temporal = None
        if inner.kind != "none":
            if inner not in qy_cache:
                qy_cache[inner] = quegan_yu_cube(cube, inner, threads)
            temporal = qy_cache[inner]
        raw.append(evaluate_combination(cube, combo, forest, cleared, threads, enl_window,
                                        temporal))
    return rank_scores(raw, normalization)


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def write_scores_csv(scores: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["combo", "mean_enl", "mean_range", "norm_enl", "norm_range", "score"])
        for s in scores:
            w.writerow([s.name, _fmt(s.mean_enl), _fmt(s.mean_range), _fmt(s.normalized_enl),
                        _fmt(s.normalized_range), _fmt(s.score)])
