"""Sentinel-1 style SAR change detection for early deforestation warnings.

Terrain flattening, speckle-filter benchmarking (Quegan-Yu temporal filter
combined with median/Frost/Lee spatial filters), forest-baseline z-test
thresholds and a two-breach confirmed alert detector with CE/OE/delay
evaluation.  ``sarwarn.synth`` generates scenes with known truth.
"""
from .calibration import db_convert, local_incidence_angle, sigma0_to_gamma0
from .detection import AlertRecord, EvaluationReport, detect, detect_stack, evaluate
from .filters import (FilterCombination, SpatialFilterSpec, apply_combination, bench_grid,
                      frost_filter, lee_filter, median_filter, quegan_yu)
from .forest_stats import (ForestModel, ThresholdSpec, bartlett, derive_threshold, fit_baseline,
                           ks_normality, shapiro_wilk, z_quantile)
from .quality import enl, normalize_scores, range_index, score_combinations
from .stack_io import (RasterStack, SampleSet, TimeSeries, extract_series, load_sample_set,
                       load_stack, write_stack)
from .synth import SceneConfig, generate_scene

__version__ = "0.1.0"
