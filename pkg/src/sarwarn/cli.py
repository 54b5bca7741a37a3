"""Command line front end.

    sarwarn synth     --config cfg.json --out run/
    sarwarn calibrate --config cfg.json --out run/
    sarwarn bench     --config cfg.json --out run/
    sarwarn fit       --config cfg.json --out run/
    sarwarn detect    --config cfg.json --out run/
    sarwarn evaluate  --config cfg.json --out run/
    sarwarn pipeline  --config synthetic --out run/

The config is one JSON document; command-line flags override its keys.
Relative paths inside a config file resolve against the file's directory.
Exit codes: 0 ok, 1 usage error, 2 data error, 3 internal error.  On
failure a JSON error record goes to stderr and to ``<out>/error.json``.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import math
import sys
import traceback
from importlib import resources
from pathlib import Path

import numpy as np

from . import calibration, detection, filters, forest_stats, quality, synth
from .stack_io import (CLEARED, FOREST, LINEAR, StackError, ensure_dir, load_sample_set,
                       load_stack, read_meta, write_sample_set, write_stack)

log = logging.getLogger("sarwarn")

COMMANDS = ("synth", "calibrate", "bench", "fit", "detect", "evaluate", "pipeline")

DEFAULTS = {
    "bands": None,
    "combination": "QY(median9)+frost9",
    "calibration_window": None,
    "alphas": [0.05, 0.01],
    "confirmation": 2,
    "seed": 0,
    "threads": 1,
    "frost_damping": filters.FROST_DAMPING,
    "lee_looks": filters.LEE_LOOKS,
    "normalization": "max",
    "skip_nodata": False,
    "series_locations": None,
    "lia_max_deg": 78.0,
}
PATH_KEYS = ("stack", "terrain", "forest_samples", "cleared_samples", "filtered_stack", "out")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sarwarn", description="SAR deforestation early-warning pipeline")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file, or the name of a bundled config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--stack", help="linear-power input stack directory")
    p.add_argument("--terrain", help="terrain directory (slope.raw, aspect.raw)")
    p.add_argument("--band", dest="bands", action="append", help="band to process (repeatable)")
    p.add_argument("--combination", help="e.g. 'QY(median9)+frost9', or 'bench'")
    p.add_argument("--alpha", dest="alphas", type=float, action="append")
    p.add_argument("--confirmation", type=int)
    p.add_argument("--forest-samples", dest="forest_samples")
    p.add_argument("--cleared-samples", dest="cleared_samples")
    p.add_argument("--window", dest="calibration_window", nargs=2, metavar=("START", "END"))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def bundled_configs() -> list:
    return sorted(p.name[:-5] for p in resources.files("sarwarn.configs").iterdir()
                  if p.name.endswith(".json"))


def load_config(name_or_path: str | None) -> dict:
    if name_or_path is None:
        return {}
    path = Path(name_or_path)
    if not path.is_file():
        if name_or_path in bundled_configs():
            text = resources.files("sarwarn.configs").joinpath(name_or_path + ".json").read_text()
            return json.loads(text)
        raise UsageError(f"config {name_or_path!r} not found")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    base = path.resolve().parent
    for key in PATH_KEYS:
        if cfg.get(key) and not Path(cfg[key]).is_absolute():
            cfg[key] = str(base / cfg[key])
    return cfg


def build_config(args) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(load_config(args.config))
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose") or value is None:
            continue
        cfg[key] = value
    if not cfg.get("out"):
        raise UsageError("an output directory is required (--out or 'out' in the config)")
    for a in cfg["alphas"]:
        if not 0 < a <= 0.5:
            raise UsageError(f"alpha must lie in (0, 0.5], got {a}")
    if int(cfg["confirmation"]) < 1:
        raise UsageError("confirmation must be a positive integer")
    if int(cfg["threads"]) < 1:
        raise UsageError("threads must be >= 1")
    return cfg


# --------------------------------------------------------------------------
# helpers


def _out(cfg) -> Path:
    return ensure_dir(cfg["out"])


def _require(cfg, key, default: Path | None = None) -> str:
    value = cfg.get(key)
    if value:
        return value
    if default is not None and default.exists():
        return str(default)
    raise UsageError(f"missing required setting {key!r}")


def _samples(cfg, stack=None):
    out = Path(cfg["out"])
    bounds = (stack.height, stack.width) if stack is not None else None
    forest = load_sample_set(_require(cfg, "forest_samples", out / "forest.csv"), bounds)
    cleared = load_sample_set(_require(cfg, "cleared_samples", out / "cleared.csv"), bounds)
    if forest.sample_class != FOREST or cleared.sample_class != CLEARED:
        raise StackError("forest/cleared sample files hold the wrong class")
    return forest, cleared


def _input_stack(cfg):
    out = Path(cfg["out"])
    default = out / "gamma0" if (out / "gamma0").exists() else out / "scene"
    stack = load_stack(_require(cfg, "stack", default))
    if stack.unit_domain != LINEAR:
        raise StackError("input stack must be linear power")
    return stack


def _bands(cfg, stack) -> list:
    bands = cfg.get("bands") or list(stack.bands)
    for b in bands:
        stack.band_index(b)
    return list(bands)


def _combination(cfg) -> filters.FilterCombination:
    name = cfg["combination"]
    if name == "bench":
        best = Path(cfg["out"]) / "best_combination.txt"
        if not best.exists():
            raise UsageError("combination 'bench' needs a prior bench run (best_combination.txt)")
        name = best.read_text().strip()
    return filters.FilterCombination.parse(
        name, damping=cfg["frost_damping"], nominal_looks=cfg["lee_looks"])


def _window(cfg, stack, cleared):
    if cfg.get("calibration_window"):
        start, end = (dt.date.fromisoformat(str(d)) for d in cfg["calibration_window"])
        return start, end
    return forest_stats.default_calibration_window(stack.dates, cleared)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg) -> None:
    if "synth" not in cfg:
        raise UsageError("config has no 'synth' section")
    scene_cfg = dict(cfg["synth"])
    scene_cfg["seed"] = int(cfg["seed"])
    scene = synth.SceneConfig.from_dict(scene_cfg)
    stack, truth, (forest, cleared) = synth.generate_scene(scene, threads=int(cfg["threads"]))
    out = _out(cfg)
    write_stack(stack, out / "scene")
    write_sample_set(forest, out / "forest.csv")
    write_sample_set(cleared, out / "cleared.csv")
    for band in stack.bands:
        truth.write_csv(out / f"truth_{band}.csv", band)
    log.info("synthetic scene: %d dates, %s, %dx%d", len(stack.dates), stack.bands,
             stack.height, stack.width)


def cmd_calibrate(cfg) -> None:
    out = _out(cfg)
    stack = load_stack(_require(cfg, "stack", out / "scene"))
    terrain = calibration.load_terrain(_require(cfg, "terrain"))
    if "incidence_angle_deg" not in cfg or "look_azimuth_deg" not in cfg:
        raise UsageError("calibrate needs incidence_angle_deg and look_azimuth_deg")
    geom = calibration.AcquisitionGeometry(np.deg2rad(cfg["incidence_angle_deg"]),
                                           np.deg2rad(cfg["look_azimuth_deg"]))
    gamma0 = calibration.calibrate_stack(stack, terrain, geom, np.deg2rad(cfg["lia_max_deg"]))
    write_stack(gamma0, out / "gamma0")


def cmd_bench(cfg) -> None:
    out = _out(cfg)
    stack = _input_stack(cfg)
    forest, cleared = _samples(cfg, stack)
    if cfg["combination"] == "bench":
        combos = filters.bench_grid(cfg["frost_damping"], cfg["lee_looks"])
    else:
        combos = [_combination(cfg)]
    bands = _bands(cfg, stack)
    for i, band in enumerate(bands):
        scores = quality.score_combinations(stack, forest, cleared, combos, band,
                                            threads=int(cfg["threads"]),
                                            normalization=cfg["normalization"])
        quality.write_scores_csv(scores, out / f"scores_{band}.csv")
        if i == 0:
            quality.write_scores_csv(scores, out / "scores.csv")
            (out / "best_combination.txt").write_text(scores[0].name + "\n")


def cmd_fit(cfg) -> None:
    out = _out(cfg)
    stack = _input_stack(cfg)
    forest, cleared = _samples(cfg, stack)
    bands = _bands(cfg, stack)
    combo = _combination(cfg)
    stack = stack if bands == list(stack.bands) else _select(stack, bands)
    filtered = filters.filter_stack(stack, combo, threads=int(cfg["threads"]))
    filtered_db = calibration.db_convert(filtered, "to_dB")
    write_stack(filtered_db, out / "filtered")
    (out / "combination.txt").write_text(combo.name + "\n")
    window = _window(cfg, filtered_db, cleared)
    normality = out / "normality.csv"
    normality.unlink(missing_ok=True)
    for band in bands:
        model = forest_stats.fit_baseline(filtered_db, window, forest, band)
        model.save(out / f"model_{band}")
        rows = forest_stats.forest_tests(filtered_db, model.calibration_window, forest, band)
        forest_stats.write_tests_csv(rows, band, normality, mode="a")
        log.info("%s: pooled sigma %.4f dB over %s..%s", band, model.pooled_sigma,
                 *model.calibration_window)


def _select(stack, bands):
    idx = [stack.band_index(b) for b in bands]
    return stack.with_pixels(stack.pixels[:, idx], bands=bands)


def _series_locations(cfg, forest, cleared) -> list:
    if cfg.get("series_locations") is not None:
        return [tuple(int(v) for v in loc) for loc in cfg["series_locations"]]
    return list(cleared.locations[:3]) + list(forest.locations[:1])


def cmd_detect(cfg) -> None:
    out = _out(cfg)
    filtered = load_stack(_require(cfg, "filtered_stack", out / "filtered"))
    forest, cleared = _samples(cfg, filtered)
    bands = _bands(cfg, filtered)
    raw = None
    raw_path = cfg.get("stack") or next(
        (str(p) for p in (out / "gamma0", out / "scene") if p.exists()), None)
    if raw_path:
        raw = load_stack(raw_path)
    confirmation = int(cfg["confirmation"])
    alerts, unevaluable = [], []
    for band in bands:
        model = forest_stats.ForestModel.load(out / f"model_{band}")
        for alpha in cfg["alphas"]:
            spec = forest_stats.derive_threshold(model, alpha)
            for samples in (cleared, forest):
                found, skipped = detection.detect_stack(
                    filtered, model, spec, samples, confirmation, bool(cfg["skip_nodata"]))
                alerts.extend(found)
                unevaluable.extend((band, alpha, r, c) for r, c in skipped)
        spec = forest_stats.derive_threshold(model, cfg["alphas"][0])
        cube = filtered.band_cube(band)
        for r, c in _series_locations(cfg, forest, cleared):
            if not filtered.contains(r, c):
                raise StackError(f"series location ({r}, {c}) outside the stack")
            raw_db = (calibration.to_db(raw.band_cube(band)[:, r, c])
                      if raw is not None and band in raw.bands else math.nan)
            name = f"series_{r}_{c}.csv" if len(bands) == 1 else f"series_{band}_{r}_{c}.csv"
            detection.write_series_csv(out / name, filtered.dates, raw_db, cube[:, r, c],
                                       model.baseline_mean[r, c] + spec.offset_db)
    detection.write_alerts_csv(alerts, out / "alerts.csv", confirmation)
    with open(out / "unevaluable.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["band", "alpha", "row", "col"])
        w.writerows(sorted(unevaluable))


def cmd_evaluate(cfg) -> None:
    out = _out(cfg)
    forest, cleared = _samples(cfg)
    alerts = detection.read_alerts_csv(out / "alerts.csv")
    skipped = {}
    if (out / "unevaluable.csv").exists():
        with open(out / "unevaluable.csv", newline="") as fh:
            for rec in csv.DictReader(fh):
                key = (rec["band"], float(rec["alpha"]))
                skipped.setdefault(key, []).append((int(rec["row"]), int(rec["col"])))
    bands = cfg.get("bands")
    if not bands and (out / "filtered" / "meta.json").exists():
        bands = list(read_meta(out / "filtered")["bands"])
    if not bands:
        bands = sorted({a.band for a in alerts}) or sorted(p.name[6:] for p in out.glob("model_*"))
    reports = []
    for band in bands:
        for alpha in cfg["alphas"]:
            subset = [a for a in alerts if a.band == band and a.alpha is not None
                      and math.isclose(a.alpha, alpha, rel_tol=1e-6)]
            rep = detection.evaluate(subset, [forest, cleared], skipped.get((band, alpha), ()))
            reports.append((band, alpha, rep))
    detection.write_report_json(reports, out / "evaluation.json")


def cmd_pipeline(cfg) -> None:
    out = _out(cfg)
    if not cfg.get("stack") and "synth" in cfg:
        cmd_synth(cfg)
    if cfg.get("terrain"):
        cmd_calibrate(cfg)
        cfg = dict(cfg, stack=str(out / "gamma0"))
    cmd_bench(cfg)
    cmd_fit(cfg)
    cmd_detect(cfg)
    cmd_evaluate(cfg)


HANDLERS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "bench": cmd_bench,
    "fit": cmd_fit,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def _fail(code: int, kind: str, message: str, command: str | None, out: str | None) -> int:
    record = {"error": {"code": code, "type": kind, "message": message, "command": command}}
    print(json.dumps(record), file=sys.stderr)
    if out and Path(out).is_dir():
        with open(Path(out) / "error.json", "w") as fh:
            json.dump(record, fh, indent=2)
    return code


def main(argv=None) -> int:
    command, out = None, None
    try:
        args = _parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = build_config(args)
        out = cfg["out"]
        err = Path(out) / "error.json"
        err.unlink(missing_ok=True)
        HANDLERS[command](cfg)
        return 0
    except UsageError as exc:
        return _fail(1, "usage", str(exc), command, out)
    except (StackError, ValueError, OSError) as exc:
        return _fail(2, "data", f"{type(exc).__name__}: {exc}", command, out)
    except Exception as exc:  # noqa: BLE001
        log.debug(traceback.format_exc())
        return _fail(3, "internal", f"{type(exc).__name__}: {exc}", command, out)


if __name__ == "__main__":
    sys.exit(main())
