"""Terrain flattening (sigma0 -> gamma0) and dB conversions."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .stack_io import DB, LINEAR, RasterStack, StackError, read_raster, write_raster

# beyond this the 1/cos factor blows up noise; such pixels become no-data
LIA_MAX = np.deg2rad(78.0)
_HALF_PI_OPEN = np.nextafter(np.pi / 2, 0.0)


@dataclass(frozen=True)
class TerrainGrid:
    """Slope and aspect in radians; aspect is clockwise from north."""

    slope: np.ndarray
    aspect: np.ndarray

    def __post_init__(self):
        slope = np.asarray(self.slope, dtype=np.float64)
        aspect = np.asarray(self.aspect, dtype=np.float64)
        if slope.shape != aspect.shape:
            raise ValueError(f"slope {slope.shape} and aspect {aspect.shape} differ in shape")
        if ((slope < 0) | (slope >= np.pi / 2)).any():
            raise ValueError("slope must lie in [0, pi/2)")
        object.__setattr__(self, "slope", slope)
        object.__setattr__(self, "aspect", np.mod(aspect, 2 * np.pi))


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Ellipsoid incidence angle and ground-projected look azimuth (radians).

    ``look_azimuth`` points from the sensor towards the target, clockwise
    from north.  Either field may be a scalar or a per-pixel grid.
    """

    incidence_angle: np.ndarray | float
    look_azimuth: np.ndarray | float

    def __post_init__(self):
        theta = np.asarray(self.incidence_angle, dtype=np.float64)
        if ((theta <= 0) | (theta >= np.pi / 2)).any():
            raise ValueError("incidence angle must lie in (0, pi/2)")
        object.__setattr__(self, "incidence_angle", theta)
        object.__setattr__(self, "look_azimuth", np.asarray(self.look_azimuth, dtype=np.float64))


def surface_normal(terrain: TerrainGrid) -> np.ndarray:
    """Unit normals as (..., 3) east/north/up vectors."""
    s, a = terrain.slope, terrain.aspect
    return np.stack([np.sin(s) * np.sin(a), np.sin(s) * np.cos(a), np.cos(s)], axis=-1)


def sensor_direction(geom: AcquisitionGeometry) -> np.ndarray:
    """Unit vectors from the target towards the sensor (east/north/up)."""
    theta, phi = geom.incidence_angle, geom.look_azimuth
    theta, phi = np.broadcast_arrays(theta, phi)
    return np.stack([-np.sin(theta) * np.sin(phi), -np.sin(theta) * np.cos(phi), np.cos(theta)],
                    axis=-1)


def local_incidence_angle(terrain: TerrainGrid, geom: AcquisitionGeometry) -> np.ndarray:
    """Angle between the terrain normal and the direction to the sensor.

    Flat pixels (slope 0) use the vertical normal whatever their aspect, so
    they return the ellipsoid incidence angle.  The result is clamped to
    ``[0, pi/2)``.
    """
    shape = terrain.slope.shape
    for name, arr in (("incidence_angle", geom.incidence_angle), ("look_azimuth", geom.look_azimuth)):
        if arr.ndim and arr.shape != shape:
            raise ValueError(f"{name} grid {arr.shape} not co-registered with terrain {shape}")
    theta, phi = geom.incidence_angle, geom.look_azimuth
    s, a = terrain.slope, terrain.aspect
    # closed form of n . r, avoids building the 3-vectors
    cos_lia = np.cos(s) * np.cos(theta) - np.sin(s) * np.sin(theta) * np.cos(a - phi)
    lia = np.arccos(np.clip(cos_lia, -1.0, 1.0))
    flat = s == 0
    if flat.any():
        lia = np.where(flat, np.broadcast_to(theta, shape), lia)
    return np.clip(lia, 0.0, _HALF_PI_OPEN)


def sigma0_to_gamma0(sigma0: np.ndarray, lia: np.ndarray, lia_max: float = LIA_MAX) -> np.ndarray:
    """gamma0 = sigma0 / cos(lia), with lia >= lia_max masked to NaN."""
    sigma0 = np.asarray(sigma0, dtype=np.float64)
    lia = np.asarray(lia, dtype=np.float64)
    if (sigma0 < 0).any():
        raise ValueError("sigma0 must be linear power (non-negative)")
    if (lia < 0).any():
        raise ValueError("local incidence angle must be non-negative")
    masked = lia >= lia_max
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma0 = sigma0 / np.cos(lia)
    return np.where(masked, np.nan, gamma0)


def to_db(values):
    values = np.asarray(values, dtype=np.float64)
    finite = values[~np.isnan(values)]
    if (finite <= 0).any():
        raise ValueError("dB conversion needs strictly positive values")
    return 10.0 * np.log10(values)


def to_linear(values):
    return np.power(10.0, np.asarray(values, dtype=np.float64) / 10.0)


def db_convert(values, direction: str):
    """Convert arrays or stacks between linear power and dB.

    ``direction`` is ``"to_dB"`` or ``"to_linear"``.  NaN (no-data) passes
    through.  A ``RasterStack`` comes back with its ``unit_domain`` updated.
    """
    if direction not in ("to_dB", "to_linear"):
        raise ValueError(f"unknown direction {direction!r}")
    if isinstance(values, RasterStack):
        target = DB if direction == "to_dB" else LINEAR
        if values.unit_domain == target:
            return values
        fn = to_db if direction == "to_dB" else to_linear
        return values.with_pixels(fn(values.pixels), unit_domain=target)
    return to_db(values) if direction == "to_dB" else to_linear(values)


def calibrate_stack(stack: RasterStack, terrain: TerrainGrid, geom: AcquisitionGeometry,
                    lia_max: float = LIA_MAX) -> RasterStack:
    """Terrain-flatten every slice of a linear sigma0 stack."""
    if stack.unit_domain != LINEAR:
        raise StackError("calibration expects a linear-power sigma0 stack")
    if terrain.slope.shape != (stack.height, stack.width):
        raise StackError("terrain grid does not match stack extent")
    lia = local_incidence_angle(terrain, geom)
    gamma0 = sigma0_to_gamma0(stack.pixels, lia[None, None], lia_max)
    return stack.with_pixels(gamma0)


def load_terrain(path) -> TerrainGrid:
    """Read ``slope.raw`` / ``aspect.raw`` (radians) described by ``meta.json``."""
    path = Path(path)
    try:
        with open(path / "meta.json") as fh:
            meta = json.load(fh)
        h, w = int(meta["height"]), int(meta["width"])
    except (OSError, KeyError, ValueError) as exc:
        raise StackError(f"bad terrain metadata in {path}: {exc}") from None
    return TerrainGrid(read_raster(path / "slope.raw", h, w), read_raster(path / "aspect.raw", h, w))


def write_terrain(terrain: TerrainGrid, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = terrain.slope.shape
    write_raster(path / "slope.raw", terrain.slope)
    write_raster(path / "aspect.raw", terrain.aspect)
    with open(path / "meta.json", "w") as fh:
        json.dump({"height": h, "width": w, "units": "radians"}, fh, indent=2)
    return path
