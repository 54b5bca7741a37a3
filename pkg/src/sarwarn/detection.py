"""Confirmed-alert detection on filtered dB series and evaluation against
reference dates (commission/omission error, median delay).
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .forest_stats import ForestModel, ThresholdSpec
from .stack_io import CLEARED, DB, FOREST, RasterStack, SampleSet, StackError, TimeSeries


@dataclass(frozen=True)
class AlertRecord:
    location: tuple
    band: str
    first_breach_date: dt.date
    confirmation_date: dt.date
    breach_values: tuple
    threshold_used: float
    alpha: float | None = None

    @property
    def alert_date(self) -> dt.date:
        # the earliest evidence of change, not the confirming observation
        return self.first_breach_date


def detect(series: TimeSeries, threshold: float, confirmation: int = 2,
           skip_nodata: bool = False, start: dt.date | None = None) -> AlertRecord | None:
    """First run of ``confirmation`` consecutive values strictly below ``threshold``.

    A NaN observation resets the run unless ``skip_nodata`` is set, in
    which case it is ignored.  Dates before ``start`` are not monitored.
    ``threshold`` may be a scalar or one value per date.
    """
    if confirmation < 1:
        raise ValueError("confirmation must be a positive integer")
    values = np.asarray(series.values, dtype=np.float64)
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), values.shape)
    run = []
    for i, (date, v) in enumerate(zip(series.dates, values)):
        if start is not None and date < start:
            continue
        if math.isnan(v) or math.isnan(thr[i]):
            if not skip_nodata:
                run = []
            continue
        if v < thr[i]:
            run.append(i)
            if len(run) == confirmation:
                first, last = run[0], run[-1]
                return AlertRecord(
                    series.location, series.band, series.dates[first], series.dates[last],
                    tuple(float(values[j]) for j in run), float(thr[first]),
                )
        else:
            run = []
    return None


def detect_stack(stack: RasterStack, model: ForestModel, spec: ThresholdSpec,
                 samples: SampleSet, confirmation: int = 2,
                 skip_nodata: bool = False) -> tuple:
    """Run ``detect`` at every sample location after the calibration window.

    The per-pixel threshold is ``baseline_mean + offset_db``.  Returns
    ``(alerts, unevaluable)`` where ``unevaluable`` lists locations with no
    valid monitoring observation or no baseline; they are left out of the
    evaluation denominators.
    """
    if stack.unit_domain != DB:
        raise StackError("detection expects a dB stack")
    if model.baseline_mean.shape != (stack.height, stack.width):
        raise StackError("forest model is not co-registered with the stack")
    band = model.band
    cube = stack.band_cube(band)
    samples.check_bounds(stack.height, stack.width)
    start = model.calibration_window[1] + dt.timedelta(days=1)
    monitor = np.array([d >= start for d in stack.dates])
    alerts, unevaluable = [], []
    for (r, c), _ in samples:
        values = np.asarray(cube[:, r, c], dtype=np.float64)
        base = model.baseline_mean[r, c]
        if math.isnan(base) or np.isnan(values[monitor]).all():
            unevaluable.append((r, c))
            continue
        series = TimeSeries(stack.dates, values, band, (r, c), DB)
        rec = detect(series, base + spec.offset_db, confirmation, skip_nodata, start)
        if rec is not None:
            alerts.append(AlertRecord(rec.location, rec.band, rec.first_breach_date,
                                      rec.confirmation_date, rec.breach_values,
                                      rec.threshold_used, spec.alpha))
    return alerts, unevaluable


@dataclass
class EvaluationReport:
    commission_error: float
    omission_error: float
    median_delay_days: int | None
    tp: int
    fp: int
    fn: int
    tn: int
    outcomes: list = field(default_factory=list)

    @property
    def users_accuracy(self) -> float:
        return 1.0 - self.commission_error

    @property
    def producers_accuracy(self) -> float:
        return 1.0 - self.omission_error

    def to_dict(self) -> dict:
        d = asdict(self)
        d["users_accuracy"] = self.users_accuracy
        d["producers_accuracy"] = self.producers_accuracy
        return d


def evaluate(alerts: list, samples, unevaluable=()) -> EvaluationReport:
    """Confusion counts with commission and omission errors.

    ``samples`` is a SampleSet or an iterable of them (typically the forest
    and cleared sets).  A cleared location with an alert is a true
    positive whatever the sign of its delay; delays are alert date minus
    reference date in days, negative when the alert came first.
    """
    if isinstance(samples, SampleSet):
        samples = [samples]
    truth = {}
    for s in samples:
        for loc, ref in s:
            truth[loc] = (s.sample_class, ref)
    skip = {tuple(u) for u in unevaluable}
    by_loc = {}
    for a in alerts:
        loc = tuple(a.location)
        if loc not in truth:
            raise ValueError(f"alert at {loc} is not a sample location")
        if loc not in by_loc or a.alert_date < by_loc[loc].alert_date:
            by_loc[loc] = a
    tp = fp = fn = tn = 0
    delays, outcomes = [], []
    for loc, (cls, ref) in sorted(truth.items()):
        if loc in skip:
            outcomes.append({"row": loc[0], "col": loc[1], "class": cls, "outcome": "unevaluable"})
            continue
        alert = by_loc.get(loc)
        rec = {"row": loc[0], "col": loc[1], "class": cls,
               "alert_date": alert.alert_date.isoformat() if alert else None,
               "reference_date": ref.isoformat() if ref else None}
        if cls == CLEARED:
            if alert:
                tp += 1
                delay = (alert.alert_date - ref).days
                delays.append(delay)
                rec.update(outcome="TP", delay_days=delay)
            else:
                fn += 1
                rec["outcome"] = "FN"
        elif cls == FOREST:
            if alert:
                fp += 1
                rec["outcome"] = "FP"
            else:
                tn += 1
                rec["outcome"] = "TN"
        outcomes.append(rec)
    ce = fp / (tp + fp) if tp + fp else 0.0
    oe = fn / (tp + fn) if tp + fn else 0.0
    md = int(round(float(np.median(delays)))) if delays else None
    return EvaluationReport(ce, oe, md, tp, fp, fn, tn, outcomes)


# --------------------------------------------------------------------------
# exports


def write_alerts_csv(alerts: list, path, confirmation: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "band", "alpha", "first_breach", "confirmation",
                    "alert_date", "threshold_db"])
        for a in sorted(alerts, key=lambda a: (a.band, -(a.alpha or 0), a.location)):
            w.writerow([a.location[0], a.location[1], a.band,
                        "" if a.alpha is None else f"{a.alpha:.6g}",
                        a.first_breach_date.isoformat(), a.confirmation_date.isoformat(),
                        a.alert_date.isoformat(), f"{a.threshold_used:.6g}"])


def read_alerts_csv(path) -> list:
    alerts = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            alerts.append(AlertRecord(
                (int(rec["row"]), int(rec["col"])), rec["band"],
                dt.date.fromisoformat(rec["first_breach"]),
                dt.date.fromisoformat(rec["confirmation"]),
                (), float(rec["threshold_db"]),
                float(rec["alpha"]) if rec["alpha"] else None,
            ))
    return alerts


def write_series_csv(path, dates, raw_db, filtered_db, threshold_db) -> None:
    """Per-date dump for plotting one location: raw, filtered, threshold, breach."""
    raw_db = np.broadcast_to(np.asarray(raw_db, dtype=np.float64), (len(dates),))
    filtered_db = np.asarray(filtered_db, dtype=np.float64)
    threshold_db = np.broadcast_to(np.asarray(threshold_db, dtype=np.float64), (len(dates),))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "raw_db", "filtered_db", "threshold_db", "breach_flag"])
        for d, raw, flt, thr in zip(dates, raw_db, filtered_db, threshold_db):
            breach = int(bool(flt < thr)) if not (math.isnan(flt) or math.isnan(thr)) else 0
            w.writerow([d.isoformat(), _fmt(raw), _fmt(flt), _fmt(thr), breach])


def write_report_json(reports: list, path) -> None:
    """``reports`` holds ``(band, alpha, EvaluationReport)`` triples."""
    doc = {"reports": []}
    for band, alpha, rep in reports:
        d = rep.to_dict()
        d = {"band": band, "alpha": alpha, **{k: _round(v) for k, v in d.items()}}
        doc["reports"].append(d)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.6g}"


def _round(v):
    if isinstance(v, float):
        return float(f"{v:.6g}")
    return v
