"""Quantitative and figure-data evaluation: error tables, histograms,
tone growth and bandwidth-summation curves, and throughput benchmarks.

Predictions are clamped at 0 phon here (the reference model's floor
convention) so the raw network stays unconstrained.  All figure data is
emitted as CSV with a JSON manifest; there is no plotting dependency.
"""

from __future__ import annotations

import json
import math
import os
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mlp, synth
from .oracle import LoudnessOracle
from .synth import CATEGORY_NAMES, Dataset, NoiseSpec

PREDICT_CHUNK = 8192
DEFAULT_BANDWIDTHS_HZ = (100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0)
PINK_GRADIENT_DB_PER_OCTAVE = -10.0 * math.log10(2.0)  # density ~ 1/f


@dataclass
class ErrorReport:
    """Per-category and overall deviation statistics, in phon."""

    overall: dict
    per_category: dict[str, dict]

    def to_dict(self) -> dict:
        return {"overall": self.overall, "per_category": self.per_category}


@dataclass
class CurveSeries:
    """One labeled curve: strictly increasing x against phon values."""

    x: np.ndarray
    y: np.ndarray
    label: str

    def __post_init__(self):
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("curve x values must be strictly increasing")
        if len(self.x) != len(self.y):
            raise ValueError("curve x/y length mismatch")


@dataclass
class BenchReport:
    batched_rate: float  # inferences/second, batch 1024
    single_rate: float  # inferences/second, batch 1
    oracle_rate: float  # reference-model evaluations/second
    speedup: float  # batched_rate / oracle_rate
    batch_size: int
    duration_s: float
    hardware_note: str

    def to_dict(self) -> dict:
        return {"batched_rate_per_s": self.batched_rate,
                "single_rate_per_s": self.single_rate,
                "oracle_rate_per_s": self.oracle_rate,
                "speedup": self.speedup,
                "batch_size": self.batch_size,
                "duration_s": self.duration_s,
                "hardware_note": self.hardware_note}


def predict_phons(model: mlp.MlpModel, spectra: np.ndarray) -> np.ndarray:
    """Clamped (>= 0 phon) model predictions, chunked for large inputs."""
    spectra = np.asarray(spectra, dtype=np.float32)
    out = np.empty(len(spectra), dtype=np.float64)
    run = mlp.compiled_forward(model, min(len(spectra), PREDICT_CHUNK) or 1)
    for lo in range(0, len(spectra), PREDICT_CHUNK):
        chunk = spectra[lo:lo + PREDICT_CHUNK]
        out[lo:lo + len(chunk)] = run(np.ascontiguousarray(chunk))
    return np.maximum(out, 0.0)


def _error_stats(errors: np.ndarray) -> dict:
    return {"rms": float(np.sqrt(np.mean(errors ** 2))),
            "mean_signed": float(np.mean(errors)),
            "max_abs": float(np.max(np.abs(errors))),
            "count": int(len(errors))}


def rms_error(model: mlp.MlpModel, dataset: Dataset) -> ErrorReport:
    """RMS phon error of clamped predictions against the dataset labels."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    errors = predict_phons(model, dataset.spectra) - dataset.labels.astype(np.float64)
    per_category = {}
    for code in np.unique(dataset.categories):
        sel = dataset.categories == code
        per_category[CATEGORY_NAMES[int(code)]] = _error_stats(errors[sel])
    return ErrorReport(overall=_error_stats(errors), per_category=per_category)


def loudness_histogram(model: mlp.MlpModel, dataset: Dataset,
                       bin_width: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(bin_edges, proportions) of clamped predictions over [0, 130] phon."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    preds = predict_phons(model, dataset.spectra)
    edges = np.arange(0.0, 130.0 + bin_width, bin_width)
    counts, _ = np.histogram(preds, bins=edges)
    return edges, counts / max(len(preds), 1)


def tone_growth_curves(predict, plan, freqs=(100.0, 1000.0, 3000.0),
                       levels=None, floor_spl: float = -10.0) -> list[CurveSeries]:
    """Phon vs. input level for pure tones in quiet.

    `predict` maps a (n, 61) band-level matrix to n phon values, so the
    same sweep runs against either the reference model or the network.
    """
    if levels is None:
        levels = np.arange(0.0, 101.0, 5.0)
    levels = np.asarray(levels, dtype=np.float64)
    series = []
    for freq in freqs:
        spectra = np.stack([synth.tone_band_levels(freq, lv, plan, floor_spl)
                            for lv in levels])
        series.append(CurveSeries(x=levels, y=np.asarray(predict(spectra), dtype=np.float64),
                                  label=f"{freq:g}Hz"))
    return series


def bandwidth_curves(model: mlp.MlpModel, oracle: LoudnessOracle,
                     center_hz: float = 1000.0, overall_spl: float = 60.0,
                     bandwidths=DEFAULT_BANDWIDTHS_HZ) -> list[CurveSeries]:
    """Pink-noise loudness vs. bandwidth at fixed overall level, model and oracle."""
    plan = oracle.plan
    spectra = np.stack([
        synth.noise_band_levels(
            NoiseSpec(center_hz=center_hz, bandwidth_hz=bw, notch_width_hz=0.0,
                      level_db=overall_spl,
                      gradient_db_per_octave=PINK_GRADIENT_DB_PER_OCTAVE),
            plan, oracle.floor_spl)
        for bw in bandwidths])
    x = np.asarray(bandwidths, dtype=np.float64)
    oracle_phons = np.array([oracle.loudness_level_of_bands(s).phon for s in spectra])
    dnn_phons = predict_phons(model, spectra)
    return [CurveSeries(x=x, y=oracle_phons, label="oracle"),
            CurveSeries(x=x, y=dnn_phons, label="dnn")]


def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def hardware_note() -> str:
    threads = os.environ.get("OPENBLAS_NUM_THREADS", "unset")
    return (f"{_cpu_model()}; {os.cpu_count()} logical cores; "
            f"OPENBLAS_NUM_THREADS={threads}; numpy {np.__version__}")


def bench_throughput(model: mlp.MlpModel, oracle: LoudnessOracle,
                     duration: float = 10.0, batch_size: int = 1024) -> BenchReport:
    """Wall-clock inference rates for the network (batched and single-frame)
    and per-frame evaluations of the reference model, plus the speedup.

    The workload is a fixed seeded batch of plausible band-level rows; the
    three measurements split the duration budget.
    """
    rng = np.random.default_rng(1234)
    batch = rng.uniform(-10.0, 100.0, (batch_size, 61)).astype(np.float32)
    single = np.ascontiguousarray(batch[:1])
    run_batched = mlp.compiled_forward(model, batch_size)
    run_single = mlp.compiled_forward(model, 1)
    rows = [np.asarray(row, dtype=np.float64) for row in batch[:256]]

    def measure(fn, per_call: int, budget: float) -> float:
        fn()  # warmup
        n = 0
        t0 = time.perf_counter()
        while True:
            fn()
            n += per_call
            elapsed = time.perf_counter() - t0
            if elapsed >= budget:
                return n / elapsed

    batched_rate = measure(lambda: run_batched(batch), batch_size, duration * 0.4)
    single_rate = measure(lambda: run_single(single), 1, duration * 0.2)
    i = iter(range(10 ** 12))
    oracle_rate = measure(
        lambda: oracle.loudness_level_of_bands(rows[next(i) % 256]), 1, duration * 0.4)
    return BenchReport(batched_rate=batched_rate, single_rate=single_rate,
                       oracle_rate=oracle_rate, speedup=batched_rate / oracle_rate,
                       batch_size=batch_size, duration_s=duration,
                       hardware_note=hardware_note())


# -- report writers ----------------------------------------------------------


def write_json(path: str | Path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def write_histogram_csv(path: str | Path, edges: np.ndarray,
                        proportions: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("bin_lo_phon,bin_hi_phon,proportion\n")
        for lo, hi, p in zip(edges[:-1], edges[1:], proportions):
            f.write(f"{lo!r},{hi!r},{p!r}\n")


def write_curves_csv(path: str | Path, x_name: str,
                     series: list[CurveSeries]) -> None:
    x = series[0].x
    for s in series:
        if not np.array_equal(s.x, x):
            raise ValueError("all series must share the same x grid")
    with open(path, "w") as f:
        f.write(x_name + "," + ",".join(s.label for s in series) + "\n")
        for i, xv in enumerate(x):
            f.write(f"{xv!r}," + ",".join(f"{s.y[i]!r}" for s in series) + "\n")
