"""Raster time-series stacks, sample-location sets and per-pixel series.

On disk a stack is a directory holding ``meta.json`` plus one flat
float32 little-endian row-major raster per (date, band), named
``<date>_<band>.raw``.  Sample sets are CSV files with the header
``row,col,class,reference_date``.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

LINEAR = "linear-power"
DB = "dB"
UNIT_DOMAINS = (LINEAR, DB)

FOREST = "invariant-forest"
CLEARED = "cleared-forest"
SAMPLE_CLASSES = (FOREST, CLEARED)

RAW_DTYPE = np.dtype("<f4")


class StackError(ValueError):
    """Malformed stack, sample set or out-of-range request."""


def _as_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[D]").item()
    return dt.date.fromisoformat(str(value))


@dataclass(frozen=True)
class RasterStack:
    """Co-registered image cube indexed ``(date, band, row, col)``.

    The pixel array is made read-only on construction.
    """

    dates: tuple
    bands: tuple
    pixels: np.ndarray
    unit_domain: str = LINEAR
    geotransform: tuple | None = None

    def __post_init__(self):
        dates = tuple(_as_date(d) for d in self.dates)
        bands = tuple(str(b) for b in self.bands)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "bands", bands)
        if self.unit_domain not in UNIT_DOMAINS:
            raise StackError(f"unknown unit_domain {self.unit_domain!r}")
        if len(set(dates)) != len(dates):
            raise StackError("duplicate dates")
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise StackError("dates must be strictly increasing")
        if len(set(bands)) != len(bands) or not bands:
            raise StackError("bands must be non-empty and unique")
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 4 or pixels.shape[:2] != (len(dates), len(bands)):
            raise StackError(
                f"pixel cube shape {pixels.shape} does not match "
                f"{len(dates)} dates x {len(bands)} bands"
            )
        if not np.issubdtype(pixels.dtype, np.floating):
            pixels = pixels.astype(np.float64)
        if np.isinf(pixels).any():
            raise StackError("infinite pixel values")
        if self.unit_domain == LINEAR and (pixels < 0).any():
            raise StackError("negative values in a linear-power stack")
        if self.geotransform is not None:
            gt = tuple(float(v) for v in self.geotransform)
            if len(gt) != 6:
                raise StackError("geotransform must have 6 values")
            object.__setattr__(self, "geotransform", gt)
        if pixels.flags.writeable:
            pixels = pixels.view()
            pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[2]

    @property
    def width(self) -> int:
        return self.pixels.shape[3]

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    def band_index(self, band: str) -> int:
        try:
            return self.bands.index(band)
        except ValueError:
            raise StackError(f"unknown band {band!r}; stack has {self.bands}") from None

    def band_cube(self, band: str) -> np.ndarray:
        """Read-only ``(date, row, col)`` view of one band."""
        return self.pixels[:, self.band_index(band)]

    def select_band(self, band: str) -> "RasterStack":
        i = self.band_index(band)
        return replace(self, bands=(band,), pixels=self.pixels[:, i : i + 1])

    def with_pixels(self, pixels: np.ndarray, unit_domain: str | None = None,
                    bands: Sequence[str] | None = None) -> "RasterStack":
        return replace(
            self,
            pixels=pixels,
            unit_domain=unit_domain or self.unit_domain,
            bands=tuple(bands) if bands is not None else self.bands,
        )

    def date_slice(self, start=None, end=None) -> "RasterStack":
        """Dates within ``[start, end]`` (either bound may be ``None``)."""
        idx = date_indices(self.dates, start, end)
        return replace(self, dates=tuple(self.dates[i] for i in idx), pixels=self.pixels[idx])

    def contains(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width


def date_indices(dates: Sequence[dt.date], start=None, end=None) -> np.ndarray:
    start = _as_date(start) if start is not None else None
    end = _as_date(end) if end is not None else None
    return np.array(
        [i for i, d in enumerate(dates)
         if (start is None or d >= start) and (end is None or d <= end)],
        dtype=int,
    )


@dataclass(frozen=True)
class SampleSet:
    """Sample locations of one class; cleared samples carry a reference date."""

    locations: tuple
    sample_class: str
    reference_dates: tuple = field(default=())

    def __post_init__(self):
        if self.sample_class not in SAMPLE_CLASSES:
            raise StackError(f"unknown sample class {self.sample_class!r}")
        locs = tuple((int(r), int(c)) for r, c in self.locations)
        refs = tuple(None if d is None else _as_date(d) for d in self.reference_dates)
        if not refs:
            refs = (None,) * len(locs)
        if len(refs) != len(locs):
            raise StackError("reference_dates length differs from locations")
        if self.sample_class == CLEARED and any(d is None for d in refs):
            raise StackError("cleared-forest sample without reference_date")
        if self.sample_class == FOREST and any(d is not None for d in refs):
            raise StackError("invariant-forest sample must not carry a reference_date")
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "reference_dates", refs)

    def __len__(self) -> int:
        return len(self.locations)

    def __iter__(self):
        return iter(zip(self.locations, self.reference_dates))

    def check_bounds(self, height: int, width: int) -> None:
        for r, c in self.locations:
            if not (0 <= r < height and 0 <= c < width):
                raise StackError(f"sample location ({r}, {c}) outside {height}x{width} extent")


@dataclass(frozen=True)
class TimeSeries:
    dates: tuple
    values: np.ndarray
    band: str
    location: tuple
    unit_domain: str = LINEAR

    def __post_init__(self):
        if len(self.dates) != len(self.values):
            raise StackError("dates and values differ in length")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise StackError("dates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)


# --------------------------------------------------------------------------
# stacks on disk


def _raster_name(date: dt.date, band: str) -> str:
    return f"{date.isoformat()}_{band}.raw"


def write_raster(path, grid: np.ndarray) -> None:
    np.ascontiguousarray(grid, dtype=RAW_DTYPE).tofile(path)


def read_raster(path, height: int, width: int) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise StackError(f"missing raster {path.name}")
    data = np.fromfile(path, dtype=RAW_DTYPE)
    if data.size != height * width:
        raise StackError(
            f"raster size mismatch in {path.name}: {data.size} values, expected {height * width}"
        )
    return data.reshape(height, width)


def write_stack(stack: RasterStack, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "width": stack.width,
        "height": stack.height,
        "bands": list(stack.bands),
        "dates": [d.isoformat() for d in stack.dates],
        "unit_domain": stack.unit_domain,
    }
    if stack.geotransform is not None:
        meta["geotransform"] = list(stack.geotransform)
    for t, date in enumerate(stack.dates):
        for b, band in enumerate(stack.bands):
            write_raster(path / _raster_name(date, band), stack.pixels[t, b])
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return path


def read_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise StackError(f"no meta.json in {path}")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise StackError(f"malformed meta.json: {exc}") from None
    missing = {"width", "height", "bands", "dates", "unit_domain"} - set(meta)
    if missing:
        raise StackError(f"meta.json missing keys: {sorted(missing)}")
    return meta


def load_stack(path) -> RasterStack:
    """Load and validate a stack directory.

    Raises ``StackError`` on missing/malformed metadata, a raster count or
    size that disagrees with the metadata, duplicate dates, and non-finite
    values in dB mode.
    """
    path = Path(path)
    meta = read_meta(path)
    height, width = int(meta["height"]), int(meta["width"])
    bands = [str(b) for b in meta["bands"]]
    try:
        dates = [dt.date.fromisoformat(d) for d in meta["dates"]]
    except (TypeError, ValueError) as exc:
        raise StackError(f"bad date in meta.json: {exc}") from None
    if len(set(dates)) != len(dates):
        raise StackError("duplicate dates")

    present = {p.name for p in path.glob("*.raw")}
    expected = {_raster_name(d, b) for d in dates for b in bands}
    if present != expected:
        raise StackError(
            f"slice count mismatch: metadata declares {len(expected)} slices, "
            f"{len(present)} rasters present ({len(expected - present)} missing)"
        )

    order = sorted(range(len(dates)), key=lambda i: dates[i])
    dates = [dates[i] for i in order]
    cube = np.empty((len(dates), len(bands), height, width), dtype=RAW_DTYPE)
    for t, date in enumerate(dates):
        for b, band in enumerate(bands):
            cube[t, b] = read_raster(path / _raster_name(date, band), height, width)

    unit = meta["unit_domain"]
    if unit == DB and not np.isfinite(cube[~np.isnan(cube)]).all():
        raise StackError("non-finite values in dB stack")
    return RasterStack(
        dates=dates, bands=bands, pixels=cube, unit_domain=unit,
        geotransform=meta.get("geotransform"),
    )


# --------------------------------------------------------------------------
# sample sets


def load_sample_set(path, bounds: tuple | None = None) -> SampleSet:
    """Read a sample CSV. ``bounds`` is ``(height, width)`` when known."""
    locations, refs, classes = [], [], set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"row", "col", "class"} <= set(reader.fieldnames):
            raise StackError(f"{path}: expected header row,col,class,reference_date")
        for lineno, rec in enumerate(reader, start=2):
            try:
                r, c = int(rec["row"]), int(rec["col"])
            except (TypeError, ValueError):
                raise StackError(f"{path}:{lineno}: bad coordinates") from None
            cls = (rec.get("class") or "").strip()
            ref = (rec.get("reference_date") or "").strip()
            if cls == CLEARED and not ref:
                raise StackError(f"{path}:{lineno}: cleared-forest row missing reference_date")
            classes.add(cls)
            locations.append((r, c))
            refs.append(dt.date.fromisoformat(ref) if ref else None)
    if len(classes) > 1:
        raise StackError(f"{path}: mixed sample classes {sorted(classes)}")
    if not classes:
        raise StackError(f"{path}: empty sample set")
    samples = SampleSet(tuple(locations), classes.pop(), tuple(refs))
    if bounds is not None:
        samples.check_bounds(*bounds)
    return samples


def write_sample_set(samples: SampleSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "class", "reference_date"])
        for (r, c), ref in samples:
            w.writerow([r, c, samples.sample_class, ref.isoformat() if ref else ""])


def extract_series(stack: RasterStack, location: tuple, band: str) -> TimeSeries:
    row, col = (int(v) for v in location)
    if not stack.contains(row, col):
        raise StackError(f"location ({row}, {col}) outside {stack.height}x{stack.width} stack")
    values = np.array(stack.band_cube(band)[:, row, col])
    return TimeSeries(stack.dates, values, band, (row, col), stack.unit_domain)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
