"""Reference loudness model: 61-band spectrum in, loudness level in phon out.

Four fixed stages: combined outer/middle-ear gain, a roex-filter
excitation pattern sampled on the ERB-number (Cam) scale, a compressive
specific-loudness transform, and integration across the Cam axis.  The
phon value is read off a precomputed 1-kHz-tone reference curve produced
by the same pipeline, which anchors the scale: a 1-kHz tone at L dB SPL
comes out at L phon by construction.

Calibration fixes the free constants once: excitation is normalized so a
1-kHz tone at the 2-dB detection threshold peaks at 1.0, and the
specific-loudness scale is set so that the 40-dB 1-kHz tone totals one
sone.  Below 500 Hz the internal noise floor and the compression knee
rise and the compressive exponent steepens, which elevates pure-tone
thresholds there by roughly another 5 dB on top of the ear transfer and
makes low-frequency equal-loudness offsets shrink as level grows.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError
from .frontend import (MAX_BAND_SPL, N_BANDS, BinningPlan, SpectrumFrame,
                       default_plan)

ORACLE_VERSION = "roex-ep-1"

CAM_STEP = 0.25
CAM_LO = 1.75
CAM_HI = 33.5

THRESHOLD_SPL_1KHZ = 2.0
SONE_ANCHOR_SPL = 40.0
ALPHA_BASE = 0.2
KNEE_RATIO = 4.0
MAX_PHON = 130.0

# low-frequency internal noise / compression adjustments (below this corner
# the noise floor rises and compression weakens, per octave)
NOISE_CORNER_HZ = 500.0
NOISE_DB_PER_OCTAVE = 2.0
ALPHA_RISE_PER_OCTAVE = 0.08

REFERENCE_LEVELS_DB = np.arange(0.0, 111.0, 1.0)

# Combined free-field-frontal outer-ear + middle-ear gain, dB re 1 kHz.
# Anchored at 0 dB around 1 kHz, peaks near the 3-kHz canal resonance,
# rolls off steeply below 200 Hz.
DEFAULT_EAR_TABLE: tuple[tuple[float, float], ...] = (
    (20.0, -39.0),
    (50.0, -24.0),
    (80.0, -18.0),
    (100.0, -16.0),
    (125.0, -13.5),
    (160.0, -11.0),
    (200.0, -9.0),
    (250.0, -7.2),
    (315.0, -5.8),
    (400.0, -4.4),
    (500.0, -3.2),
    (630.0, -1.8),
    (800.0, -0.7),
    (900.0, 0.0),
    (1000.0, 0.0),
    (1120.0, 0.0),
    (1400.0, 1.2),
    (1800.0, 2.6),
    (2240.0, 4.4),
    (2800.0, 6.0),
    (3000.0, 6.5),
    (3150.0, 6.5),
    (3550.0, 6.1),
    (4000.0, 5.2),
    (4500.0, 3.8),
    (5000.0, 2.6),
    (5600.0, 1.2),
    (6300.0, -0.2),
    (7100.0, -1.8),
    (8000.0, -3.6),
)


def hz_to_cam(f_hz):
    """Frequency to ERB-number (Cam)."""
    return 21.4 * np.log10(4.37 * np.asarray(f_hz) / 1000.0 + 1.0)


def cam_to_hz(cam):
    """ERB-number (Cam) to frequency."""
    return (10.0 ** (np.asarray(cam) / 21.4) - 1.0) * 1000.0 / 4.37


def erb_hz(f_hz):
    """Equivalent rectangular bandwidth of the auditory filter at f_hz."""
    return 24.7 * (4.37 * np.asarray(f_hz) / 1000.0 + 1.0)


@dataclass(frozen=True)
class EarTransfer:
    """Outer+middle-ear gain table, interpolated piecewise-linearly in log frequency."""

    freqs_hz: np.ndarray
    gains_db: np.ndarray
    interpolation: str = "log-linear"

    def __post_init__(self):
        f = np.asarray(self.freqs_hz, dtype=np.float64)
        g = np.asarray(self.gains_db, dtype=np.float64)
        if f.shape != g.shape or f.ndim != 1 or len(f) < 2:
            raise ValueError("ear table needs matching 1-D frequency/gain arrays")
        if np.any(np.diff(f) <= 0):
            raise ValueError("ear table frequencies must be strictly increasing")
        if f[0] > 20.0 or f[-1] < 8000.0:
            raise ValueError("ear table must cover 20 Hz to 8 kHz")
        object.__setattr__(self, "freqs_hz", f)
        object.__setattr__(self, "gains_db", g)
        if abs(self.gain_at(1000.0)) > 1e-9:
            raise ValueError("ear gain at 1 kHz must be 0 dB (anchor)")
        if self.gain_at(3000.0) <= self.gain_at(1000.0):
            raise ValueError("ear gain near 3 kHz must exceed the 1-kHz gain")
        if self.gain_at(100.0) > -15.0:
            raise ValueError("ear gain at 100 Hz must be <= -15 dB")

    def gain_at(self, f_hz):
        """Interpolated gain in dB; clamps to the table ends."""
        return np.interp(np.log10(np.maximum(np.asarray(f_hz, dtype=np.float64), 1.0)),
                         np.log10(self.freqs_hz), self.gains_db)

    def to_pairs(self) -> list[list[float]]:
        return [[float(f), float(g)] for f, g in zip(self.freqs_hz, self.gains_db)]

    @classmethod
    def from_pairs(cls, pairs) -> "EarTransfer":
        arr = np.asarray(pairs, dtype=np.float64)
        return cls(freqs_hz=arr[:, 0], gains_db=arr[:, 1])

    @classmethod
    def default(cls) -> "EarTransfer":
        return cls.from_pairs(DEFAULT_EAR_TABLE)


@dataclass(frozen=True)
class ExcitationPattern:
    """Threshold-normalized excitation (linear power) on the Cam grid."""

    cams: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.cams.shape != self.values.shape:
            raise ValueError("cams/values shape mismatch")
        if np.any(self.values < 0):
            raise ValueError("excitation must be non-negative")


@dataclass(frozen=True)
class LoudnessLabel:
    """Loudness level in phon plus the intermediate total loudness in sone."""

    phon: float
    sone: float


def _low_freq_noise_db(f_hz: np.ndarray) -> np.ndarray:
    octaves_below = np.log2(NOISE_CORNER_HZ / np.minimum(f_hz, NOISE_CORNER_HZ))
    return NOISE_DB_PER_OCTAVE * octaves_below


class LoudnessOracle:
    """Calibrated loudness model over a fixed band plan and ear transfer.

    Build once with `LoudnessOracle.build()`; instances are immutable and
    safe for concurrent use.
    """

    def __init__(self, plan: BinningPlan, ear: EarTransfer, floor_spl: float,
                 excitation_norm: float, sone_scale: float,
                 reference_sones: np.ndarray):
        self.plan = plan
        self.ear = ear
        self.floor_spl = floor_spl
        self.cams = np.arange(CAM_LO, CAM_HI + CAM_STEP / 2, CAM_STEP)
        self.grid_hz = cam_to_hz(self.cams)
        centers = plan.centers
        self._ear_gains = self.ear.gain_at(centers)
        # roex weights: W(g) = (1 + p g) exp(-p g), g = |f_band - f_c| / f_c
        p = 4.0 * self.grid_hz / erb_hz(self.grid_hz)
        g = np.abs(centers[None, :] - self.grid_hz[:, None]) / self.grid_hz[:, None]
        pg = p[:, None] * g
        self._weights = (1.0 + pg) * np.exp(-pg)
        noise_db = _low_freq_noise_db(self.grid_hz)
        self.noise_floor = 10.0 ** (noise_db / 10.0)
        self.knee = KNEE_RATIO * self.noise_floor
        octaves_below = np.log2(NOISE_CORNER_HZ / np.minimum(self.grid_hz, NOISE_CORNER_HZ))
        self.alpha = ALPHA_BASE * (1.0 + ALPHA_RISE_PER_OCTAVE * octaves_below)
        self._knee_pow = self.knee ** self.alpha
        self.excitation_norm = excitation_norm
        self.sone_scale = sone_scale
        self.reference_levels = REFERENCE_LEVELS_DB.copy()
        self.reference_sones = np.asarray(reference_sones, dtype=np.float64)
        self._lookup_sones = None
        if np.any(self.reference_sones > 0.0):
            self._prepare_phon_lookup()

    # -- construction ----------------------------------------------------

    @classmethod
    def build(cls, plan: BinningPlan | None = None, ear: EarTransfer | None = None,
              floor_spl: float = -10.0) -> "LoudnessOracle":
        """Calibrate the free constants and return a ready oracle.

        Fixes the excitation normalization from the 1-kHz threshold tone,
        the sone scale from the 40-dB 1-kHz tone, tabulates the 1-kHz
        reference curve, and verifies the realized detection threshold.
        """
        plan = plan or default_plan()
        ear = ear or EarTransfer.default()
        oracle = cls(plan, ear, floor_spl, excitation_norm=1.0, sone_scale=1.0,
                     reference_sones=np.zeros_like(REFERENCE_LEVELS_DB))
        tone_at = lambda level: oracle._tone_levels(1000.0, level)
        e0 = float(np.max(oracle._excitation_from_levels(tone_at(THRESHOLD_SPL_1KHZ))))
        if not e0 > 0.0:
            raise CalibrationError("threshold tone produced no excitation")
        oracle.excitation_norm = e0
        anchor = oracle.total_loudness(
            oracle.specific_loudness(oracle._excitation_from_levels(tone_at(SONE_ANCHOR_SPL))))
        if not anchor > 0.0:
            raise CalibrationError("40-dB anchor tone is below the internal noise floor")
        oracle.sone_scale = 1.0 / anchor
        sones = np.array([
            oracle.total_loudness(oracle.specific_loudness(
                oracle._excitation_from_levels(tone_at(level))))
            for level in REFERENCE_LEVELS_DB
        ])
        oracle.reference_sones = sones
        oracle._prepare_phon_lookup()
        oracle._verify_threshold()
        return oracle

    def _verify_threshold(self) -> None:
        levels = np.arange(0.0, 6.0, 0.0625)
        phons = [self.loudness_level_of_bands(self._tone_levels(1000.0, lv)).phon
                 for lv in levels]
        positive = np.nonzero(np.asarray(phons) > 0.0)[0]
        if len(positive) == 0:
            raise CalibrationError("no audible 1-kHz level found below 6 dB SPL")
        threshold = levels[positive[0]]
        if not (1.0 <= threshold <= 3.0):
            raise CalibrationError(
                f"1-kHz threshold calibrated to {threshold:.2f} dB SPL, expected ~2")

    def _tone_levels(self, freq_hz: float, level_db: float) -> np.ndarray:
        levels = np.full(N_BANDS, self.floor_spl)
        levels[self.plan.band_of(freq_hz)] = max(level_db, self.floor_spl)
        return levels

    # -- pipeline stages --------------------------------------------------

    def apply_ear_transfer(self, spectrum: SpectrumFrame) -> SpectrumFrame:
        """Shift each band by the ear gain at its center; keep the floor clamp."""
        shifted = np.clip(spectrum.band_levels + self._ear_gains,
                          self.floor_spl, MAX_BAND_SPL)
        return SpectrumFrame(band_levels=shifted, band_edges=spectrum.band_edges)

    def _excite_raw(self, ear_applied_levels: np.ndarray) -> np.ndarray:
        powers = 10.0 ** (np.asarray(ear_applied_levels, dtype=np.float64) / 10.0)
        return self._weights @ powers

    def _excitation_from_levels(self, band_levels: np.ndarray) -> np.ndarray:
        shifted = np.clip(band_levels + self._ear_gains, self.floor_spl, MAX_BAND_SPL)
        return self._excite_raw(shifted) / self.excitation_norm

    def excitation_pattern(self, spectrum: SpectrumFrame) -> ExcitationPattern:
        """Excitation on the Cam grid for an ear-transferred spectrum.

        Threshold-normalized: a just-audible 1-kHz tone peaks at 1.0.
        """
        values = self._excite_raw(spectrum.band_levels) / self.excitation_norm
        return ExcitationPattern(cams=self.cams, values=values)

    def specific_loudness(self, excitation) -> np.ndarray:
        """Compressive transform to loudness density (sone/Cam) per grid point."""
        e = excitation.values if isinstance(excitation, ExcitationPattern) else \
            np.asarray(excitation, dtype=np.float64)
        if np.any(~np.isfinite(e)) or np.any(e < 0):
            raise ValueError("excitation must be finite and non-negative")
        density = self.sone_scale * ((e + self.knee) ** self.alpha - self._knee_pow)
        return np.where(e > self.noise_floor, density, 0.0)

    def total_loudness(self, pattern: np.ndarray) -> float:
        """Trapezoidal integral of loudness density over the Cam axis."""
        return float(np.trapezoid(np.asarray(pattern, dtype=np.float64), dx=CAM_STEP))

    def sones_to_phons(self, sones: float) -> float:
        """Invert the 1-kHz reference curve; clamped to [0, 130] phon."""
        if sones < 0:
            raise ValueError("total loudness cannot be negative")
        if self._lookup_sones is None:
            raise CalibrationError("oracle is not calibrated; use LoudnessOracle.build()")
        if sones <= 0.0:
            return 0.0
        if sones >= self._lookup_sones[-1]:
            extra = math.log10(sones / self._lookup_sones[-1])
            return min(float(self._lookup_levels[-1] + self._top_slope * extra), MAX_PHON)
        return float(np.interp(sones, self._lookup_sones, self._lookup_levels))

    def loudness_level(self, spectrum: SpectrumFrame) -> LoudnessLabel:
        """Full pipeline: ear transfer, excitation, compression, integration, phon."""
        return self.loudness_level_of_bands(spectrum.band_levels)

    def loudness_level_of_bands(self, band_levels: np.ndarray) -> LoudnessLabel:
        """Same as loudness_level, for a bare (61,) band-level vector."""
        e = self._excitation_from_levels(band_levels)
        density = self.sone_scale * ((e + self.knee) ** self.alpha - self._knee_pow)
        density = np.where(e > self.noise_floor, density, 0.0)
        sones = float(np.trapezoid(density, dx=CAM_STEP))
        return LoudnessLabel(phon=self.sones_to_phons(sones), sone=sones)

    # -- phon lookup -------------------------------------------------------

    def _prepare_phon_lookup(self) -> None:
        sones = self.reference_sones
        zero_run = np.nonzero(sones > 0.0)[0]
        start = max(int(zero_run[0]) - 1, 0) if len(zero_run) else len(sones) - 2
        self._lookup_sones = sones[start:]
        self._lookup_levels = self.reference_levels[start:]
        if np.any(np.diff(self._lookup_sones) <= 0):
            raise CalibrationError("reference loudness curve is not strictly increasing")
        # extrapolation above the table: constant phon-per-decade-of-sones slope
        s_hi, s_lo = self._lookup_sones[-1], self._lookup_sones[-11]
        self._top_slope = (self._lookup_levels[-1] - self._lookup_levels[-11]) / \
            math.log10(s_hi / s_lo)

    # -- persistence -------------------------------------------------------

    def calibration_dict(self) -> dict:
        return {
            "version": ORACLE_VERSION,
            "floor_spl": self.floor_spl,
            "excitation_norm": self.excitation_norm,
            "sone_scale": self.sone_scale,
            "cam_step": CAM_STEP,
            "ear_table": self.ear.to_pairs(),
            "reference_levels_db": [float(x) for x in self.reference_levels],
            "reference_sones": [float(x) for x in self.reference_sones],
        }

    @property
    def calibration_hash(self) -> str:
        blob = json.dumps(self.calibration_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save_calibration(self, path: str | Path) -> None:
        cache = self.calibration_dict()
        cache["hash"] = self.calibration_hash
        with open(path, "w") as f:
            json.dump(cache, f, sort_keys=True, indent=1)

    @classmethod
    def from_calibration(cls, path: str | Path,
                         plan: BinningPlan | None = None) -> "LoudnessOracle":
        """Rebuild from a calibration cache; constants are taken as stored."""
        with open(path) as f:
            cache = json.load(f)
        if cache.get("version") != ORACLE_VERSION:
            raise CalibrationError(
                f"calibration cache version {cache.get('version')!r} != {ORACLE_VERSION!r}")
        ear = EarTransfer.from_pairs(cache["ear_table"])
        oracle = cls(plan or default_plan(), ear, float(cache["floor_spl"]),
                     excitation_norm=float(cache["excitation_norm"]),
                     sone_scale=float(cache["sone_scale"]),
                     reference_sones=np.asarray(cache["reference_sones"]))
        anchor = oracle.loudness_level_of_bands(
            oracle._tone_levels(1000.0, SONE_ANCHOR_SPL))
        if abs(anchor.sone - 1.0) > 1e-6:
            raise CalibrationError(
                "calibration cache does not match this band plan "
                f"(40-dB anchor reads {anchor.sone:.6f} sone, expected 1.0)")
        return oracle
