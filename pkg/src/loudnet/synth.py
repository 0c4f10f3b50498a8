"""Labeled-dataset synthesis: tones in noise, shaped noises, and WAV ingestion.

Tones and noises are built directly in the 61-band domain (the network
and the reference model both consume band levels, so time-domain
synthesis would only add cost); WAV ingestion covers the time-domain
path.  Generation is seed-reproducible and partitions work across
deterministic per-worker substreams.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .frontend import (DEFAULT_DFT_SIZE, DEFAULT_HOP, N_BANDS, BinningPlan,
                       CalibrationSpec, calibrate_rms, frame_matrix,
                       read_spectra, read_wav, reduce_block)
from .oracle import MAX_PHON, LoudnessOracle

DATASET_MAGIC = b"LDS1"

CATEGORY_CODES = {"speech": 0, "tone": 1, "noise": 2, "music": 3, "external": 4}
CATEGORY_NAMES = {v: k for k, v in CATEGORY_CODES.items()}

TONE_FREQ_RANGE_HZ = (50.0, 8000.0)
TONE_LEVEL_RANGE_DB = (-15.0, 110.0)
TONE_NOISE_GAP_DB = 10.0
NOISE_LEVEL_RANGE_DB = (0.0, 100.0)
NOISE_GRADIENT_RANGE = (-12.0, 12.0)

_RECORD_DTYPE = np.dtype([("spectrum", "<f4", (N_BANDS,)),
                          ("label", "<f4"),
                          ("category", "u1")])


@dataclass(frozen=True)
class ToneSpec:
    """A pure tone plus a per-band background bed at least 10 dB below it."""

    frequency_hz: float
    level_db: float
    background_db: np.ndarray  # (61,)

    def __post_init__(self):
        if not (20.0 <= self.frequency_hz <= 8000.0):
            raise ValueError("tone frequency outside [20, 8000] Hz")
        if np.any(np.asarray(self.background_db) > self.level_db - TONE_NOISE_GAP_DB):
            raise ValueError("background bands must sit >= 10 dB below the tone")


@dataclass(frozen=True)
class NoiseSpec:
    """Band-limited noise, optionally notched, with a spectral slope."""

    center_hz: float
    bandwidth_hz: float
    notch_width_hz: float
    level_db: float
    gradient_db_per_octave: float

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if not (0.0 <= self.notch_width_hz < self.bandwidth_hz):
            raise ValueError("notch width must lie in [0, bandwidth)")


@dataclass
class Dataset:
    """Column-oriented record store: spectra, phon labels, category codes."""

    spectra: np.ndarray  # (n, 61) float32
    labels: np.ndarray  # (n,) float32
    categories: np.ndarray  # (n,) uint8
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def category_counts(self) -> dict[str, int]:
        codes, counts = np.unique(self.categories, return_counts=True)
        return {CATEGORY_NAMES[int(c)]: int(n) for c, n in zip(codes, counts)}


def tone_band_levels(freq_hz: float, level_db: float, plan: BinningPlan,
                     floor_spl: float = -10.0,
                     background_db: np.ndarray | None = None) -> np.ndarray:
    """Band levels for a tone on an optional background bed."""
    levels = np.full(N_BANDS, floor_spl) if background_db is None \
        else np.maximum(np.asarray(background_db, dtype=np.float64), floor_spl)
    levels[plan.band_of(freq_hz)] = max(level_db, floor_spl)
    return levels


def _powlaw_band_powers(edges_lo, edges_hi, beta: float) -> np.ndarray:
    """Integral of f^beta over each [lo, hi) interval; zero where hi <= lo."""
    lo = np.maximum(edges_lo, 1.0)
    hi = np.maximum(edges_hi, lo)
    if abs(beta + 1.0) < 1e-12:
        vals = np.log(hi / lo)
    else:
        b1 = beta + 1.0
        vals = (hi ** b1 - lo ** b1) / b1
    vals[edges_hi <= np.maximum(edges_lo, 1.0)] = 0.0
    return vals


def noise_band_levels(spec: NoiseSpec, plan: BinningPlan,
                      floor_spl: float = -10.0) -> np.ndarray:
    """Band levels for band-limited (optionally notched) sloped noise.

    The spectral density follows f^beta where beta realizes
    `gradient_db_per_octave` per octave of frequency; band powers are the
    exact density integrals over each band's overlap with the passband,
    normalized so the total power matches `level_db`.
    """
    lo = max(spec.center_hz - spec.bandwidth_hz / 2.0, 1.0)
    hi = min(spec.center_hz + spec.bandwidth_hz / 2.0, float(plan.edges[-1]))
    if hi <= lo:
        raise ValueError("noise passband lies outside the analysis range")
    beta = spec.gradient_db_per_octave / (10.0 * np.log10(2.0))
    a = np.maximum(plan.edges[:-1], lo)
    b = np.minimum(plan.edges[1:], hi)
    powers = _powlaw_band_powers(a, b, beta)
    if spec.notch_width_hz > 0.0:
        nlo = max(spec.center_hz - spec.notch_width_hz / 2.0, lo)
        nhi = min(spec.center_hz + spec.notch_width_hz / 2.0, hi)
        na = np.maximum(plan.edges[:-1], nlo)
        nb = np.minimum(plan.edges[1:], nhi)
        powers = powers - _powlaw_band_powers(na, nb, beta)
    total = powers.sum()
    if total <= 0.0:
        raise ValueError("noise spectrum has no in-band power")
    powers *= 10.0 ** (spec.level_db / 10.0) / total
    levels = np.full(N_BANDS, floor_spl)
    active = powers > 0.0
    levels[active] = np.maximum(10.0 * np.log10(powers[active]), floor_spl)
    return levels


def _worker_counts(count: int, workers: int) -> list[int]:
    base, extra = divmod(count, workers)
    return [base + (1 if w < extra else 0) for w in range(workers)]


def _label_many(oracle: LoudnessOracle, spectra: np.ndarray) -> np.ndarray:
    return np.array([oracle.loudness_level_of_bands(row).phon for row in spectra],
                    dtype=np.float32)


def _base_header(oracle: LoudnessOracle, seed: int) -> dict:
    return {"oracle_version": oracle.calibration_dict()["version"],
            "calibration_hash": oracle.calibration_hash,
            "seed": seed}


def _sample_tone_background(rng: np.random.Generator, plan: BinningPlan,
                            floor: float, bed_top: float) -> np.ndarray:
    """Background bed with every band at or below `bed_top`.

    Mixes three shapes so composite spectra (disjoint spectral objects at
    arbitrary levels) are represented: quiet, independent per-band levels,
    and a band-limited shaped noise scaled so its loudest band hits a
    random peak below `bed_top`.
    """
    mode = rng.random()
    if bed_top <= floor or mode < 0.1:
        return np.full(N_BANDS, floor)
    if mode < 0.55:
        return rng.uniform(floor, bed_top, N_BANDS)
    spec = NoiseSpec(
        center_hz=10.0 ** rng.uniform(np.log10(100.0), np.log10(6000.0)),
        bandwidth_hz=10.0 ** rng.uniform(np.log10(30.0), np.log10(8000.0)),
        notch_width_hz=0.0,
        level_db=60.0,
        gradient_db_per_octave=rng.uniform(*NOISE_GRADIENT_RANGE))
    shape = noise_band_levels(spec, plan, -200.0)
    peak = rng.uniform(floor, bed_top)
    return np.maximum(shape + (peak - shape.max()), floor)


def gen_tone_records(count: int, rng_seed: int, oracle: LoudnessOracle,
                     workers: int = 1) -> Dataset:
    """Tones at log-uniform frequencies and uniform levels over a random bed.

    Every background band sits at least 10 dB below the tone (an empty
    range collapses to the floor).  Reproducible from (rng_seed, worker
    index).
    """
    if count <= 0:
        raise ValueError("count must be positive")
    plan = oracle.plan
    floor = oracle.floor_spl
    lf_lo, lf_hi = np.log10(TONE_FREQ_RANGE_HZ[0]), np.log10(TONE_FREQ_RANGE_HZ[1])
    spectra = np.empty((count, N_BANDS), dtype=np.float32)
    row = 0
    for w, n in enumerate(_worker_counts(count, workers)):
        rng = np.random.default_rng((rng_seed, w))
        for _ in range(n):
            freq = 10.0 ** rng.uniform(lf_lo, lf_hi)
            level = rng.uniform(*TONE_LEVEL_RANGE_DB)
            bed = _sample_tone_background(rng, plan, floor,
                                          level - TONE_NOISE_GAP_DB)
            spectra[row] = tone_band_levels(freq, level, plan, floor, bed)
            row += 1
    labels = _label_many(oracle, spectra)
    header = _base_header(oracle, rng_seed)
    header["generator"] = {"kind": "tones", "count": count, "workers": workers}
    return Dataset(spectra=spectra, labels=labels,
                   categories=np.full(count, CATEGORY_CODES["tone"], np.uint8),
                   header=header)


def sample_noise_spec(rng: np.random.Generator, plan: BinningPlan,
                      notch: str = "mixed") -> NoiseSpec:
    """Draw one NoiseSpec; `notch` is one of mixed/none/only."""
    center = 10.0 ** rng.uniform(np.log10(100.0), np.log10(6000.0))
    min_bw = float(np.diff(plan.edges)[plan.band_of(center)])
    bandwidth = 10.0 ** rng.uniform(np.log10(min_bw), np.log10(8000.0))
    if notch == "none":
        notch_width = 0.0
    elif notch == "only":
        notch_width = rng.uniform(0.1, 0.5) * bandwidth
    elif notch == "mixed":
        notch_width = rng.uniform(0.0, 0.5) * bandwidth if rng.random() < 0.5 else 0.0
    else:
        raise ValueError(f"unknown notch mode {notch!r}")
    return NoiseSpec(center_hz=center, bandwidth_hz=bandwidth,
                     notch_width_hz=notch_width,
                     level_db=rng.uniform(*NOISE_LEVEL_RANGE_DB),
                     gradient_db_per_octave=rng.uniform(*NOISE_GRADIENT_RANGE))


def gen_noise_records(count: int, rng_seed: int, oracle: LoudnessOracle,
                      notch: str = "mixed", workers: int = 1) -> Dataset:
    """Band-limited / notched / sloped noise spectra with oracle labels."""
    if count <= 0:
        raise ValueError("count must be positive")
    plan = oracle.plan
    spectra = np.empty((count, N_BANDS), dtype=np.float32)
    row = 0
    for w, n in enumerate(_worker_counts(count, workers)):
        rng = np.random.default_rng((rng_seed, w))
        for _ in range(n):
            spec = sample_noise_spec(rng, plan, notch)
            spectra[row] = noise_band_levels(spec, plan, oracle.floor_spl)
            row += 1
    labels = _label_many(oracle, spectra)
    header = _base_header(oracle, rng_seed)
    header["generator"] = {"kind": "noises", "count": count, "notch": notch,
                           "workers": workers}
    return Dataset(spectra=spectra, labels=labels,
                   categories=np.full(count, CATEGORY_CODES["noise"], np.uint8),
                   header=header)


def ingest_wav(paths, target_spl: float, oracle: LoudnessOracle,
               cal: CalibrationSpec | None = None, hop: int = DEFAULT_HOP,
               dft_size: int = DEFAULT_DFT_SIZE,
               category: str = "speech") -> tuple[Dataset, list[tuple[str, str]]]:
    """Frame and reduce WAV files at `target_spl`, labeling with the oracle.

    Unreadable files and files whose sample rate cannot reach the 8-kHz
    analysis range are skipped and reported in the second return value.
    """
    cal = cal or CalibrationSpec(floor_spl=oracle.floor_spl)
    plan = oracle.plan
    blocks = []
    skipped: list[tuple[str, str]] = []
    for path in paths:
        try:
            samples, rate = read_wav(path)
            if rate < 16000:
                raise FormatError(f"sample rate {rate} Hz below the 16-kHz minimum")
            scaled = calibrate_rms(samples, target_spl, cal)
            frames = frame_matrix(scaled, hop, dft_size)
            if len(frames):
                blocks.append(reduce_block(frames, rate, plan, cal))
        except Exception as exc:  # per-file isolation: report and continue
            skipped.append((str(path), str(exc)))
    spectra = np.concatenate(blocks).astype(np.float32) if blocks \
        else np.empty((0, N_BANDS), dtype=np.float32)
    labels = _label_many(oracle, spectra)
    header = _base_header(oracle, 0)
    header["generator"] = {"kind": "wav", "target_spl": target_spl,
                           "files": len(list(paths)), "skipped": len(skipped),
                           "hop": hop, "dft_size": dft_size}
    return Dataset(spectra=spectra, labels=labels,
                   categories=np.full(len(spectra), CATEGORY_CODES[category], np.uint8),
                   header=header), skipped


def import_labels(spectra_path, labels_path) -> Dataset:
    """Pair an SPF1 spectra file with externally computed phon labels.

    Labels are one float per line; only range validation (0-130 phon) is
    applied, no oracle involvement.  Counts must match.
    """
    spectra, _ = read_spectra(spectra_path)
    labels = np.loadtxt(labels_path, dtype=np.float64, ndmin=1)
    if len(labels) != len(spectra):
        raise ValueError(
            f"{len(spectra)} spectra but {len(labels)} labels; counts must match")
    if np.any(labels < 0.0) or np.any(labels > MAX_PHON):
        raise ValueError(f"imported labels must lie in [0, {MAX_PHON}] phon")
    return Dataset(spectra=spectra.astype(np.float32),
                   labels=labels.astype(np.float32),
                   categories=np.full(len(labels), CATEGORY_CODES["external"], np.uint8),
                   header={"oracle_version": "external", "calibration_hash": "",
                           "seed": 0})


def concat_datasets(datasets: list[Dataset]) -> Dataset:
    """Merge datasets; headers are kept as a provenance list."""
    if not datasets:
        raise ValueError("nothing to concatenate")
    return Dataset(
        spectra=np.concatenate([d.spectra for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        categories=np.concatenate([d.categories for d in datasets]),
        header={"merged_from": [d.header for d in datasets]})


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    """Serialize to the LDS1 container (header JSON + packed records)."""
    header = dict(dataset.header)
    header["category_counts"] = dataset.category_counts()
    blob = json.dumps(header, sort_keys=True).encode()
    records = np.empty(len(dataset), dtype=_RECORD_DTYPE)
    records["spectrum"] = dataset.spectra
    records["label"] = dataset.labels
    records["category"] = dataset.categories
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(dataset)))
        f.write(records.tobytes())


def read_dataset(path: str | Path) -> Dataset:
    """Read an LDS1 container."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        (count,) = struct.unpack("<I", f.read(4))
        raw = f.read(count * _RECORD_DTYPE.itemsize)
        if len(raw) != count * _RECORD_DTYPE.itemsize:
            raise FormatError(f"{path}: truncated record section")
        records = np.frombuffer(raw, dtype=_RECORD_DTYPE)
    return Dataset(spectra=records["spectrum"].copy(),
                   labels=records["label"].copy(),
                   categories=records["category"].copy(),
                   header=header)
