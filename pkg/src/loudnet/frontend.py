"""Spectral frontend: calibrated audio in, 61-band spectra out.

The band layout is 13 equal-width bins from 0 to 200 Hz plus 48
ninth-octave bins from 200 Hz upward, covering the analysis range up to
8 kHz.  Band values are band SPL in dB (total power per band, not
spectrum level), derived from a Hann-windowed DFT with window-energy
normalization so that both a full-scale sinusoid and broadband noise
read their true level after power summation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

N_BANDS = 61
LINEAR_CUTOFF_HZ = 200.0
LOG_BINS_PER_OCTAVE = 9
ANALYSIS_LIMIT_HZ = 8000.0
MAX_BAND_SPL = 140.0

DEFAULT_HOP = 560
DEFAULT_DFT_SIZE = 1024
MIN_SAMPLE_RATE = 16000

SPECTRA_MAGIC = b"SPF1"


@dataclass(frozen=True)
class CalibrationSpec:
    """Digital-to-SPL mapping: a full-scale sinusoid is assigned `full_scale_spl`."""

    full_scale_spl: float = 100.0
    floor_spl: float = -10.0

    def __post_init__(self):
        if not self.full_scale_spl > self.floor_spl:
            raise ValueError("full_scale_spl must exceed floor_spl")
        if self.floor_spl > 0.0:
            raise ValueError("floor_spl must be <= 0 dB SPL")


@dataclass(frozen=True)
class BinningPlan:
    """Band partition: `n_linear` equal bins below 200 Hz, `n_log` ninth-octave bins above."""

    n_linear: int
    n_log: int
    edges: np.ndarray  # (n_linear + n_log + 1,) Hz, strictly increasing, edges[0] == 0

    @property
    def n_bands(self) -> int:
        return self.n_linear + self.n_log

    @property
    def centers(self) -> np.ndarray:
        """Band centers: arithmetic midpoints below 200 Hz, geometric means above."""
        lo = self.edges[:-1]
        hi = self.edges[1:]
        c = np.sqrt(lo * hi)
        c[: self.n_linear] = 0.5 * (lo[: self.n_linear] + hi[: self.n_linear])
        return c

    def band_of(self, freq_hz: float) -> int:
        """Index of the band containing `freq_hz` (top edge maps to the last band)."""
        if freq_hz < self.edges[0] or freq_hz > self.edges[-1]:
            raise ValueError(f"{freq_hz} Hz outside the analysis range")
        i = int(np.searchsorted(self.edges, freq_hz, side="right")) - 1
        return min(i, self.n_bands - 1)


@dataclass(frozen=True)
class AudioFrame:
    """One analysis frame of calibrated audio (full-scale +-1.0)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate < MIN_SAMPLE_RATE:
            raise ValueError(
                f"sample_rate {self.sample_rate} < {MIN_SAMPLE_RATE} Hz: "
                "the 8-kHz analysis limit would exceed Nyquist"
            )


@dataclass(frozen=True)
class SpectrumFrame:
    """61 band levels in dB SPL plus the shared band edges."""

    band_levels: np.ndarray  # (61,)
    band_edges: np.ndarray  # (62,) Hz

    def __post_init__(self):
        if self.band_levels.shape != (N_BANDS,):
            raise ValueError(f"expected {N_BANDS} band levels, got {self.band_levels.shape}")
        if self.band_edges.shape != (N_BANDS + 1,):
            raise ValueError(f"expected {N_BANDS + 1} band edges")


def build_binning_plan(limit_hz: float = ANALYSIS_LIMIT_HZ,
                       nyquist_hz: float | None = None) -> BinningPlan:
    """Construct the 61-band partition reaching `limit_hz`.

    The number of ninth-octave bins is the smallest count whose top edge
    reaches `limit_hz`; the remaining bins tile 0-200 Hz with equal
    widths.  If `nyquist_hz` is given, the top edge is clamped to it.
    Raises ValueError when the split cannot yield 61 positive-width bins.
    """
    if limit_hz <= LINEAR_CUTOFF_HZ:
        raise ValueError(f"limit_hz must exceed {LINEAR_CUTOFF_HZ} Hz to allow log bins")
    n_log = math.ceil(LOG_BINS_PER_OCTAVE * math.log2(limit_hz / LINEAR_CUTOFF_HZ))
    n_linear = N_BANDS - n_log
    if n_linear < 1:
        raise ValueError(f"limit_hz={limit_hz} needs {n_log} log bins, leaving no linear bins")
    linear_edges = np.linspace(0.0, LINEAR_CUTOFF_HZ, n_linear + 1)
    log_edges = LINEAR_CUTOFF_HZ * 2.0 ** (np.arange(1, n_log + 1) / LOG_BINS_PER_OCTAVE)
    edges = np.concatenate([linear_edges, log_edges])
    if nyquist_hz is not None and edges[-1] > nyquist_hz:
        if nyquist_hz <= edges[-2]:
            raise ValueError(f"nyquist {nyquist_hz} Hz leaves the last band empty")
        edges[-1] = nyquist_hz
    edges.flags.writeable = False
    return BinningPlan(n_linear=n_linear, n_log=n_log, edges=edges)


def default_plan() -> BinningPlan:
    """Canonical plan used throughout: 8-kHz limit, top edge clamped to 8 kHz."""
    return build_binning_plan(ANALYSIS_LIMIT_HZ, nyquist_hz=ANALYSIS_LIMIT_HZ)


def frame_matrix(signal: np.ndarray, hop: int, dft_size: int) -> np.ndarray:
    """Slice `signal` into zero-padded rows of `dft_size`, one per hop position.

    A frame starts at every multiple of `hop` below len(signal), so a
    nonempty signal yields ceil(len/hop) frames and trailing frames are
    zero-padded.  An empty signal yields an empty (0, dft_size) matrix.
    """
    if hop <= 0:
        raise ValueError("hop must be > 0")
    if dft_size <= 0 or dft_size & (dft_size - 1):
        raise ValueError("dft_size must be a positive power of two")
    signal = np.asarray(signal, dtype=np.float64)
    n = len(signal)
    if n == 0:
        return np.empty((0, dft_size))
    n_frames = -(-n // hop)
    padded = np.zeros((max(n, (n_frames - 1) * hop + dft_size),))
    padded[:n] = signal
    stride = padded.strides[0]
    view = np.lib.stride_tricks.as_strided(
        padded, shape=(n_frames, dft_size), strides=(hop * stride, stride))
    return view.copy()


def frame_audio(signal: np.ndarray, sample_rate: int,
                hop: int = DEFAULT_HOP, dft_size: int = DEFAULT_DFT_SIZE) -> list[AudioFrame]:
    """Split a signal into AudioFrames advancing by `hop` samples."""
    rows = frame_matrix(signal, hop, dft_size)
    return [AudioFrame(samples=row, sample_rate=sample_rate) for row in rows]


def _hann(n: int) -> np.ndarray:
    # Periodic form: exact three-term DFT, so an on-bin tone leaks only +-1 bin.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _band_slices(plan: BinningPlan, sample_rate: int, dft_size: int) -> np.ndarray:
    """First-bin index per band edge; band i owns rfft bins [idx[i], idx[i+1]).

    The top edge is inclusive so a bin sitting exactly on it (e.g. Nyquist
    when the plan is clamped to it) still belongs to the last band.
    """
    bin_freqs = np.arange(dft_size // 2 + 1) * (sample_rate / dft_size)
    idx = np.searchsorted(bin_freqs, plan.edges, side="left")
    idx[-1] = np.searchsorted(bin_freqs, plan.edges[-1], side="right")
    return idx


def reduce_block(samples: np.ndarray, sample_rate: int, plan: BinningPlan,
                 cal: CalibrationSpec) -> np.ndarray:
    """Reduce a (n_frames, dft_size) block to (n_frames, 61) band levels in dB SPL.

    Per-band power is the sum of one-sided DFT bin powers whose center
    frequency falls inside the band.  The window-energy normalization
    makes the summed powers Parseval-consistent, so a full-scale sine
    reads `cal.full_scale_spl` in its band and total band power matches
    the time-domain mean square.
    """
    if sample_rate / 2 < plan.edges[-2]:
        raise ValueError(f"sample rate {sample_rate} Hz cannot reach the analysis range")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    dft_size = samples.shape[1]
    w = _hann(dft_size)
    spec = np.fft.rfft(samples * w, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    power[:, 1:] *= 2.0
    if dft_size % 2 == 0:
        power[:, -1] *= 0.5  # Nyquist bin is not mirrored
    power /= dft_size * np.sum(w * w)
    # cumulative-sum differencing keeps empty bands at exactly zero power
    csum = np.concatenate([np.zeros((power.shape[0], 1)), np.cumsum(power, axis=1)], axis=1)
    idx = _band_slices(plan, sample_rate, dft_size)
    band_power = csum[:, idx[1:]] - csum[:, idx[:-1]]
    # reference: full-scale sine has mean-square 0.5
    with np.errstate(divide="ignore"):
        levels = 10.0 * np.log10(band_power / 0.5) + cal.full_scale_spl
    return np.clip(levels, cal.floor_spl, MAX_BAND_SPL)


def reduce_spectrum(frame: AudioFrame, plan: BinningPlan, cal: CalibrationSpec) -> SpectrumFrame:
    """Reduce one AudioFrame to a SpectrumFrame."""
    levels = reduce_block(frame.samples[None, :], frame.sample_rate, plan, cal)[0]
    return SpectrumFrame(band_levels=levels, band_edges=plan.edges)


def signal_spl(signal: np.ndarray, cal: CalibrationSpec) -> float:
    """Overall RMS level of a signal in dB SPL under the calibration."""
    rms = float(np.sqrt(np.mean(np.square(np.asarray(signal, dtype=np.float64)))))
    if rms == 0.0:
        raise ValueError("signal is all zeros; level undefined")
    return cal.full_scale_spl + 20.0 * math.log10(rms * math.sqrt(2.0))


def calibrate_rms(signal: np.ndarray, target_spl: float, cal: CalibrationSpec) -> np.ndarray:
    """Scale a signal so its overall RMS level equals `target_spl` dB SPL."""
    signal = np.asarray(signal, dtype=np.float64)
    rms = float(np.sqrt(np.mean(np.square(signal))))
    if rms == 0.0:
        raise ValueError("cannot calibrate an all-zero signal")
    target_rms = 10.0 ** ((target_spl - cal.full_scale_spl) / 20.0) / math.sqrt(2.0)
    return signal * (target_rms / rms)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a WAV file as mono float64 in +-1.0 full scale.

    Accepts 16/24/32-bit PCM and 32/64-bit float; multichannel input is
    averaged to mono.
    """
    from scipy.io import wavfile

    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported WAV sample format {data.dtype}")
    if samples.ndim > 1:
        samples = samples.mean(axis=1)
    return np.asarray(samples, dtype=np.float64), int(rate)


def write_spectra(path: str | Path, levels: np.ndarray, plan: BinningPlan,
                  cal: CalibrationSpec) -> None:
    """Write a batch of band-level rows as an SPF1 file plus a JSON sidecar."""
    levels = np.asarray(levels, dtype=np.float32)
    if levels.ndim != 2 or levels.shape[1] != N_BANDS:
        raise ValueError(f"levels must be (n, {N_BANDS})")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(SPECTRA_MAGIC)
        f.write(struct.pack("<I", levels.shape[0]))
        f.write(levels.astype("<f4").tobytes())
    sidecar = {
        "band_edges": [float(e) for e in plan.edges],
        "calibration": {"full_scale_spl": cal.full_scale_spl, "floor_spl": cal.floor_spl},
    }
    with open(path.with_name(path.name + ".json"), "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)


def read_spectra(path: str | Path) -> tuple[np.ndarray, dict | None]:
    """Read an SPF1 file; returns (levels (n, 61) float32, sidecar dict or None)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SPECTRA_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        raw = f.read(count * N_BANDS * 4)
        if len(raw) != count * N_BANDS * 4:
            raise FormatError(f"{path}: truncated ({len(raw)} bytes for {count} frames)")
        levels = np.frombuffer(raw, dtype="<f4").reshape(count, N_BANDS)
    sidecar_path = path.with_name(path.name + ".json")
    sidecar = None
    if sidecar_path.exists():
        with open(sidecar_path) as f:
            sidecar = json.load(f)
    return levels, sidecar
