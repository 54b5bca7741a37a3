"""Forest backscatter statistics: normality / equal-variance tests, the
per-pixel baseline model, and one-sided z-test thresholds.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .stack_io import (CLEARED, DB, RasterStack, SampleSet, StackError, date_indices,
                       read_raster, write_raster)

MIN_CALIBRATION_DATES = 8


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n: int
    test: str

    __test__ = False  # keep pytest from collecting this class


# --------------------------------------------------------------------------
# standard normal


def normal_cdf(z):
    """Phi(z) through the complementary error function."""
    if np.ndim(z) == 0:
        return 0.5 * math.erfc(-float(z) / math.sqrt(2.0))
    return 0.5 * special.erfc(-np.asarray(z, dtype=np.float64) / np.sqrt(2.0))


def normal_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


# Acklam's rational approximation (relative error < 1.2e-9 before refinement)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: np.ndarray) -> np.ndarray:
    z = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1.0 - _P_LOW
    mid = ~(lo | hi)
    if mid.any():
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        z[mid] = num / den
    for mask, sign, tail in ((lo, 1.0, p), (hi, -1.0, 1.0 - p)):
        if mask.any():
            q = np.sqrt(-2.0 * np.log(tail[mask]))
            num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
            den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
            z[mask] = sign * num / den
    return z


def z_quantile(alpha):
    """Inverse standard normal CDF.

    Rational approximation followed by one Newton step on the erfc-based
    CDF; absolute error is far below 1e-8 on (0, 1).
    """
    p = np.asarray(alpha, dtype=np.float64)
    if ((p <= 0) | (p >= 1) | np.isnan(p)).any():
        raise ValueError("alpha must lie strictly between 0 and 1")
    z = _acklam(np.atleast_1d(p))
    z = z - (normal_cdf(z) - np.atleast_1d(p)) / normal_pdf(z)
    z[np.atleast_1d(p) == 0.5] = 0.0
    return float(z[0]) if p.ndim == 0 else z


# --------------------------------------------------------------------------
# Shapiro-Wilk, Royston's AS R94


def _poly(coeffs, x):
    result = 0.0
    for c in reversed(coeffs):
        result = result * x + c
    return result


_SW_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_SW_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_SW_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_SW_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_SW_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_SW_C6 = (-0.4803, -0.082676, 0.0030302)
_SW_G = (-2.273, 0.459)


def shapiro_weights(n: int) -> np.ndarray:
    """Antisymmetric Shapiro-Wilk coefficients for ordered samples of size n."""
    if n < 3:
        raise ValueError("Shapiro-Wilk needs n >= 3")
    half = n // 2
    a = np.zeros(n)
    if n == 3:
        a[0], a[2] = -math.sqrt(0.5), math.sqrt(0.5)
        return a
    m = z_quantile((np.arange(1, half + 1) - 0.375) / (n + 0.25))
    summ2 = 2.0 * float(np.sum(m * m))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a1 = _poly(_SW_C1, rsn) - m[0] / ssumm2
    low = np.empty(half)
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly(_SW_C2, rsn)
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2)
                        / (1.0 - 2.0 * a1 ** 2 - 2.0 * a2 ** 2))
        low[0], low[1] = a1, a2
        low[2:] = -m[2:] / fac
    else:
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1 ** 2))
        low[0] = a1
        low[1:] = -m[1:] / fac
    a[:half] = -low
    a[n - half:] = low[::-1]
    return a


def _shapiro_pvalue(w: float, n: int) -> float:
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(min(w, 1.0))) - math.pi / 3.0)
        return min(max(p, 0.0), 1.0)
    w1 = 1.0 - w
    if w1 <= 0:
        return 1.0
    y = math.log(w1)
    if n <= 11:
        gamma = _poly(_SW_G, n)
        if y >= gamma:
            return 1e-99
        y = -math.log(gamma - y)
        mu = _poly(_SW_C3, n)
        sigma = math.exp(_poly(_SW_C4, n))
    else:
        ln_n = math.log(n)
        mu = _poly(_SW_C5, ln_n)
        sigma = math.exp(_poly(_SW_C6, ln_n))
    return float(min(max(1.0 - normal_cdf((y - mu) / sigma), 0.0), 1.0))


def shapiro_wilk(sample) -> TestResult:
    x = np.sort(np.asarray(sample, dtype=np.float64).ravel())
    n = x.size
    if not 3 <= n <= 5000:
        raise ValueError(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    if x[0] == x[-1]:
        raise ValueError("zero-variance sample")
    a = shapiro_weights(n)
    # centre and scale first; W is affine invariant and this keeps it exact
    xc = (x - x.mean()) / (x[-1] - x[0])
    w = float(np.dot(a, xc) ** 2 / np.dot(xc, xc))
    w = min(w, 1.0)
    return TestResult(w, _shapiro_pvalue(w, n), n, "shapiro-wilk")


# --------------------------------------------------------------------------
# Kolmogorov-Smirnov


def kolmogorov_sf(lam: float) -> float:
    """P(K > lam) for the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # theta-function form converges fast for small arguments
        k = np.arange(1, 21)
        cdf = math.sqrt(2 * math.pi) / lam * float(
            np.sum(np.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam))))
        return min(max(1.0 - cdf, 0.0), 1.0)
    k = np.arange(1, 101)
    sf = 2.0 * float(np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k * k * lam * lam)))
    return min(max(sf, 0.0), 1.0)


def ks_statistic(sample, cdf) -> float:
    x = np.sort(np.asarray(sample, dtype=np.float64).ravel())
    n = x.size
    f = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def ks_normality(sample, loc: float | None = None, scale: float | None = None) -> TestResult:
    """KS distance to a normal with mean/sd estimated from the sample.

    Passing ``loc`` and ``scale`` tests against that fixed normal instead.
    The p-value is the asymptotic Kolmogorov one; with estimated
    parameters it is conservative.
    """
    x = np.asarray(sample, dtype=np.float64).ravel()
    n = x.size
    if n < 1:
        raise ValueError("empty sample")
    if loc is None:
        loc = float(x.mean())
    if scale is None:
        if n < 2 or x.min() == x.max():
            raise ValueError("zero-variance sample")
        scale = float(x.std(ddof=1))
    if scale <= 0:
        raise ValueError("scale must be positive")
    d = ks_statistic(x, lambda v: normal_cdf((v - loc) / scale))
    return TestResult(d, kolmogorov_sf(math.sqrt(n) * d), n, "ks")


# --------------------------------------------------------------------------
# Bartlett


def bartlett(groups) -> TestResult:
    """Bartlett's test for equal variances across groups."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    k = len(groups)
    if k < 2:
        raise ValueError("Bartlett needs at least two groups")
    ns = np.array([g.size for g in groups], dtype=np.float64)
    if (ns < 2).any():
        raise ValueError("every group needs at least two values")
    variances = np.array([g.var(ddof=1) for g in groups])
    if (variances <= 0).any():
        raise ValueError("degenerate group with zero variance")
    total = ns.sum()
    pooled = float(np.sum((ns - 1) * variances) / (total - k))
    num = (total - k) * math.log(pooled) - float(np.sum((ns - 1) * np.log(variances)))
    den = 1.0 + (float(np.sum(1.0 / (ns - 1))) - 1.0 / (total - k)) / (3.0 * (k - 1))
    stat = max(num / den, 0.0)
    p = float(special.chdtrc(k - 1, stat))
    return TestResult(stat, min(max(p, 0.0), 1.0), int(total), "bartlett")


# --------------------------------------------------------------------------
# baseline model and thresholds


@dataclass(frozen=True)
class ForestModel:
    baseline_mean: np.ndarray
    pooled_sigma: float
    calibration_window: tuple
    band: str

    def __post_init__(self):
        if not self.pooled_sigma > 0:
            raise ValueError("pooled_sigma must be positive")
        start, end = (d if isinstance(d, dt.date) else dt.date.fromisoformat(d)
                      for d in self.calibration_window)
        if end < start:
            raise ValueError("empty calibration window")
        object.__setattr__(self, "calibration_window", (start, end))

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        h, w = self.baseline_mean.shape
        write_raster(path / "baseline.raw", self.baseline_mean)
        meta = {
            "height": h,
            "width": w,
            "band": self.band,
            "pooled_sigma": self.pooled_sigma,
            "calibration_window": [d.isoformat() for d in self.calibration_window],
        }
        with open(path / "model.json", "w") as fh:
            json.dump(meta, fh, indent=2)
        return path

    @classmethod
    def load(cls, path) -> "ForestModel":
        path = Path(path)
        try:
            with open(path / "model.json") as fh:
                meta = json.load(fh)
            h, w = int(meta["height"]), int(meta["width"])
            baseline = read_raster(path / "baseline.raw", h, w).astype(np.float64)
            return cls(baseline, float(meta["pooled_sigma"]), tuple(meta["calibration_window"]),
                       meta["band"])
        except (OSError, KeyError, ValueError) as exc:
            raise StackError(f"bad forest model in {path}: {exc}") from None


@dataclass(frozen=True)
class ThresholdSpec:
    alpha: float
    z_crit: float
    offset_db: float
    band: str


def default_calibration_window(dates, cleared: SampleSet | None = None, years: int = 2) -> tuple:
    """The first ``years`` of the stack, ending before any cleared reference date."""
    start = dates[0]
    try:
        limit = start.replace(year=start.year + years)
    except ValueError:  # 29 February
        limit = start.replace(year=start.year + years, day=28)
    end = limit - dt.timedelta(days=1)
    if cleared is not None and cleared.sample_class == CLEARED and len(cleared):
        first_ref = min(cleared.reference_dates)
        end = min(end, first_ref - dt.timedelta(days=1))
    inside = [d for d in dates if start <= d <= end]
    if not inside:
        raise ValueError("calibration window contains no dates")
    return start, inside[-1]


def fit_baseline(stack: RasterStack, window: tuple, forest: SampleSet, band: str) -> ForestModel:
    """Per-pixel temporal mean over ``window`` and a single pooled sigma.

    ``pooled_sigma`` is the root of the mean per-location sample variance
    over the forest locations.  Pixels with no valid value in the window
    get a NaN baseline.
    """
    if stack.unit_domain != DB:
        raise StackError("fit_baseline expects a dB stack")
    if not len(forest):
        raise ValueError("empty forest sample set")
    forest.check_bounds(stack.height, stack.width)
    idx = date_indices(stack.dates, *window)
    if idx.size < MIN_CALIBRATION_DATES:
        raise ValueError(
            f"calibration window holds {idx.size} dates; at least {MIN_CALIBRATION_DATES} needed")
    cube = np.asarray(stack.band_cube(band)[idx], dtype=np.float64)
    valid = (~np.isnan(cube)).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        baseline = np.where(valid > 0, np.nansum(cube, axis=0) / valid, np.nan)
    variances = []
    for (r, c), _ in forest:
        series = cube[:, r, c]
        series = series[~np.isnan(series)]
        if series.size >= 2:
            variances.append(series.var(ddof=1))
    if not variances:
        raise ValueError("no forest location has two valid observations")
    sigma = math.sqrt(float(np.mean(variances)))
    if sigma == 0:
        raise ValueError("zero forest variance; pooled sigma undefined")
    window = (stack.dates[idx[0]], stack.dates[idx[-1]])
    return ForestModel(baseline, sigma, window, band)


def derive_threshold(model: ForestModel, alpha: float) -> ThresholdSpec:
    """One-sided z-test cut: ``offset_db = z_alpha * sigma`` below the baseline."""
    z = z_quantile(alpha)
    return ThresholdSpec(float(alpha), z, z * model.pooled_sigma, model.band)


def forest_tests(stack: RasterStack, window: tuple, forest: SampleSet, band: str) -> list:
    """SW and KS per forest location plus one Bartlett across locations.

    Returns ``(location, TestResult)`` pairs; Bartlett's location is ``None``.
    """
    idx = date_indices(stack.dates, *window)
    cube = stack.band_cube(band)[idx]
    rows, groups = [], []
    for (r, c), _ in forest:
        series = np.asarray(cube[:, r, c], dtype=np.float64)
        series = series[~np.isnan(series)]
        for test in (shapiro_wilk, ks_normality):
            try:
                rows.append(((r, c), test(series)))
            except ValueError:
                continue
        if series.size >= 2 and series.var() > 0:
            groups.append(series)
    if len(groups) >= 2:
        rows.append((None, bartlett(groups)))
    return rows


def write_tests_csv(rows: list, band: str, path, mode: str = "w") -> None:
    new = mode == "w" or not Path(path).exists()
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["band", "row", "col", "test", "n", "statistic", "p_value"])
        for loc, res in rows:
            r, c = loc if loc is not None else ("", "")
            w.writerow([band, r, c, res.test, res.n, f"{res.statistic:.6g}", f"{res.p_value:.6g}"])
