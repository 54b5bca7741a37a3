"""Synthetic SAR scenes with known clear-cut truth.

Each pixel/date gets a dB level ``forest_mean + N(0, forest_sigma)``,
lowered by ``drop_db`` from the event date onward inside event
rectangles, and is emitted as linear power ``10**(level/10) * G`` with
``G ~ Gamma(looks, 1/looks)``.

Randomness comes from Philox (counter-based) streams: one child
``SeedSequence`` per acquisition date and one for sample selection, so
output is identical whatever the order or parallelism of generation.
"""
from __future__ import annotations

import csv
import datetime as dt
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .stack_io import CLEARED, FOREST, LINEAR, RAW_DTYPE, RasterStack, SampleSet

DEFAULT_MEAN_DB = {"VV": -7.0, "VH": -12.0}
# temporal spread of undisturbed forest backscatter, dB
DEFAULT_SIGMA_DB = {"VV": 0.51, "VH": 0.75}
REVISIT_DAYS = 12


def regular_dates(start, count: int, step_days: int = REVISIT_DAYS) -> tuple:
    start = dt.date.fromisoformat(start) if isinstance(start, str) else start
    return tuple(start + dt.timedelta(days=step_days * i) for i in range(count))


@dataclass(frozen=True)
class ClearCut:
    """Rectangle ``[row0, row1) x [col0, col1)`` cleared on ``event_date``."""

    row0: int
    col0: int
    row1: int
    col1: int
    event_date: dt.date
    drop_db: float = 3.0

    def __post_init__(self):
        if isinstance(self.event_date, str):
            object.__setattr__(self, "event_date", dt.date.fromisoformat(self.event_date))
        if self.drop_db <= 0:
            raise ValueError("drop_db must be positive")
        if self.row1 <= self.row0 or self.col1 <= self.col0:
            raise ValueError("empty event rectangle")

    def overlaps(self, other: "ClearCut") -> bool:
        return (self.row0 < other.row1 and other.row0 < self.row1
                and self.col0 < other.col1 and other.col0 < self.col1)


@dataclass(frozen=True)
class SceneConfig:
    width: int
    height: int
    dates: tuple
    bands: tuple = ("VV",)
    forest_mean_db: dict = field(default_factory=lambda: dict(DEFAULT_MEAN_DB))
    forest_sigma_db: dict = field(default_factory=lambda: dict(DEFAULT_SIGMA_DB))
    looks: float = 5.0
    events: tuple = ()
    seed: int = 0
    n_forest: int = 50
    n_cleared: int = 50
    sample_margin: int = 8

    def __post_init__(self):
        dates = tuple(dt.date.fromisoformat(d) if isinstance(d, str) else d for d in self.dates)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "bands", tuple(self.bands))
        events = tuple(e if isinstance(e, ClearCut) else ClearCut(**e) for e in self.events)
        object.__setattr__(self, "events", events)
        if self.looks <= 0:
            raise ValueError("looks must be positive")
        if not dates:
            raise ValueError("scene needs at least one date")
        for b in self.bands:
            if b not in self.forest_mean_db or b not in self.forest_sigma_db:
                raise ValueError(f"no forest mean/sigma configured for band {b}")
            if self.forest_sigma_db[b] < 0:
                raise ValueError("forest_sigma_db must be non-negative")
        for i, ev in enumerate(events):
            if ev.row0 < 0 or ev.col0 < 0 or ev.row1 > self.height or ev.col1 > self.width:
                raise ValueError(f"event {i} rectangle outside the {self.height}x{self.width} scene")
            if not dates[0] <= ev.event_date <= dates[-1]:
                raise ValueError(f"event {i} date {ev.event_date} outside the scene dates")
            if any(ev.overlaps(o) for o in events[:i]):
                raise ValueError(f"event {i} overlaps an earlier event")

    @classmethod
    def from_dict(cls, cfg: dict) -> "SceneConfig":
        cfg = dict(cfg)
        if "dates" not in cfg:
            cfg["dates"] = regular_dates(cfg.pop("start_date"), cfg.pop("n_dates"),
                                         cfg.pop("step_days", REVISIT_DAYS))
        return cls(**cfg)


@dataclass(frozen=True)
class SceneTruth:
    """Per-pixel event date (NaT where none), and pre/post mean dB per band."""

    event_date: np.ndarray
    drop_db: np.ndarray
    pre_db: dict
    post_db: dict

    def write_csv(self, path, band: str) -> None:
        h, w = self.drop_db.shape
        pre, post = self.pre_db[band], self.post_db[band]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["row", "col", "event_date", "pre_db", "post_db"])
            for r in range(h):
                for c in range(w):
                    ev = self.event_date[r, c]
                    out.writerow([r, c, "" if np.isnat(ev) else str(ev),
                                  f"{pre[r, c]:.6g}", f"{post[r, c]:.6g}"])


def _rng(seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seq))


def _event_grids(cfg: SceneConfig):
    event_date = np.full((cfg.height, cfg.width), np.datetime64("NaT"), dtype="datetime64[D]")
    drop = np.zeros((cfg.height, cfg.width))
    for ev in cfg.events:
        event_date[ev.row0 : ev.row1, ev.col0 : ev.col1] = np.datetime64(ev.event_date, "D")
        drop[ev.row0 : ev.row1, ev.col0 : ev.col1] = ev.drop_db
    return event_date, drop


def _date_slices(cfg: SceneConfig, t: int, seq, event_date, drop) -> np.ndarray:
    rng = _rng(seq)
    shape = (cfg.height, cfg.width)
    today = np.datetime64(cfg.dates[t], "D")
    cleared = ~np.isnat(event_date) & (event_date <= today)
    out = np.empty((len(cfg.bands),) + shape, dtype=RAW_DTYPE)
    for b, band in enumerate(cfg.bands):
        level = cfg.forest_mean_db[band] + rng.normal(0.0, cfg.forest_sigma_db[band], shape)
        level -= np.where(cleared, drop, 0.0)
        speckle = rng.gamma(cfg.looks, 1.0 / cfg.looks, shape)
        out[b] = np.power(10.0, level / 10.0) * speckle
    return out


def _pick(rng, mask: np.ndarray, n: int, what: str) -> list:
    rows, cols = np.nonzero(mask)
    if n > rows.size:
        raise ValueError(f"only {rows.size} eligible {what} pixels for {n} samples")
    idx = np.sort(rng.choice(rows.size, size=n, replace=False))
    return [(int(rows[i]), int(cols[i])) for i in idx]


def _samples(cfg: SceneConfig, seq, event_date) -> tuple:
    rng = _rng(seq)
    m = cfg.sample_margin
    h, w = cfg.height, cfg.width
    interior = np.zeros((h, w), dtype=bool)
    interior[m : h - m, m : w - m] = True
    near_event = np.zeros((h, w), dtype=bool)
    inside = np.zeros((h, w), dtype=bool)
    for ev in cfg.events:
        near_event[max(ev.row0 - m, 0) : ev.row1 + m, max(ev.col0 - m, 0) : ev.col1 + m] = True
        inside[ev.row0 + m : ev.row1 - m, ev.col0 + m : ev.col1 - m] = True
    forest_locs = _pick(rng, interior & ~near_event, cfg.n_forest, "forest") if cfg.n_forest else []
    cleared_locs = _pick(rng, inside, cfg.n_cleared, "cleared") if cfg.n_cleared else []
    refs = [event_date[r, c].item() for r, c in cleared_locs]
    forest = SampleSet(tuple(forest_locs), FOREST)
    cleared = SampleSet(tuple(cleared_locs), CLEARED, tuple(refs))
    return forest, cleared


def generate_scene(cfg: SceneConfig, threads: int = 1):
    """Return ``(stack, truth, (forest_samples, cleared_samples))``."""
    event_date, drop = _event_grids(cfg)
    root = np.random.SeedSequence(cfg.seed)
    date_seqs = root.spawn(len(cfg.dates))
    sample_seq = root.spawn(1)[0]

    def one(t):
        return _date_slices(cfg, t, date_seqs[t], event_date, drop)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            slices = list(pool.map(one, range(len(cfg.dates))))
    else:
        slices = [one(t) for t in range(len(cfg.dates))]
    stack = RasterStack(cfg.dates, cfg.bands, np.stack(slices), LINEAR)

    pre = {b: np.full((cfg.height, cfg.width), float(cfg.forest_mean_db[b])) for b in cfg.bands}
    post = {b: pre[b] - drop for b in cfg.bands}
    truth = SceneTruth(event_date, drop, pre, post)
    return stack, truth, _samples(cfg, sample_seq, event_date)
