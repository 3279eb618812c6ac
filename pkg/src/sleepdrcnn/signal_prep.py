"""PSG preprocessing: anti-alias FIR, decimation to 50 Hz, moving-window
normalization, SaO2 scaling, 7 h padding and 1 Hz label reduction."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.signal import fftconvolve

from . import label_remap
from .errors import FormatError, NumericalError, ValidationError
from .record_io import (FORMAT_NAME, FORMAT_VERSION, SAMPLE_RATE, STANDARD_CHANNELS,
                        RawRecord, read_manifest, read_record)

OUTPUT_RATE = 50
DECIMATION = SAMPLE_RATE // OUTPUT_RATE
NIGHT_S = 7 * 3600
NIGHT_SAMPLES = NIGHT_S * OUTPUT_RATE  # 1,260,000
NORM_WINDOW_S = 18 * 60
NORM_EPS = 1e-6
CUTOFF_3DB_HZ = 28.29
DEFAULT_TAPS = 241

INPUT_CHANNELS = tuple(c for c in STANDARD_CHANNELS if c != "ECG")


@dataclass(frozen=True)
class FilterKernel:
    taps: np.ndarray
    sample_rate: float
    nominal_cutoff: float

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response at arbitrary frequencies (direct DTFT)."""
        f = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        k = np.arange(self.taps.size) - (self.taps.size - 1) / 2
        w = 2 * np.pi * f[:, None] / self.sample_rate
        return np.exp(-1j * w * k[None, :]) @ self.taps

    def gain_db(self, freqs_hz) -> np.ndarray:
        return 20 * np.log10(np.abs(self.response(freqs_hz)))


def windowed_sinc(sample_rate: float, cutoff: float, num_taps: int) -> np.ndarray:
    """Hamming-windowed sinc low-pass, normalized to unit DC gain."""
    m = np.arange(num_taps) - (num_taps - 1) / 2
    h = 2 * cutoff / sample_rate * np.sinc(2 * cutoff / sample_rate * m)
    h *= np.hamming(num_taps)
    return h / h.sum()


def design_antialias_fir(sample_rate: float = SAMPLE_RATE, cutoff: float = CUTOFF_3DB_HZ,
                         num_taps: int = DEFAULT_TAPS) -> FilterKernel:
    """Windowed-sinc kernel whose measured -3 dB point lands on ``cutoff``.

    A windowed sinc is about -6 dB at its design frequency, so the design
    frequency is solved for numerically.
    """
    if not 0 < cutoff < sample_rate / 2:
        raise ValidationError(f"cutoff {cutoff} Hz outside (0, {sample_rate / 2})")
    if num_taps % 2 == 0 or num_taps < 31:
        raise ValidationError("num_taps must be odd and >= 31")
    target = 1 / math.sqrt(2)

    def excess(fc):
        k = FilterKernel(windowed_sinc(sample_rate, fc, num_taps), sample_rate, cutoff)
        return abs(k.response(cutoff)[0]) - target

    hi = sample_rate / 2 * 0.999
    if excess(hi) < 0:
        raise ValidationError(f"{num_taps} taps cannot place -3 dB at {cutoff} Hz")
    fc = optimize.brentq(excess, cutoff * 0.5, hi, xtol=1e-10)
    return FilterKernel(windowed_sinc(sample_rate, fc, num_taps), float(sample_rate), float(cutoff))


def filter_decimate(x: np.ndarray, kernel: FilterKernel, factor: int = DECIMATION,
                    remove_dc: bool = True) -> np.ndarray:
    """Zero-phase FIR filtering, keep every ``factor``-th sample, subtract the mean."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("empty signal")
    # reflected edges let a constant pass unchanged all the way to the ends
    h = kernel.taps.size // 2
    xp = np.pad(x, h, mode="reflect") if x.size > 1 else np.repeat(x, 2 * h + 1)
    y = fftconvolve(xp, kernel.taps, mode="valid")[::factor]
    if remove_dc:
        y = y - y.mean()
    return y


def _boxcar_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Mean over [t - window//2, t - window//2 + window) using reflect padding."""
    h = window // 2
    xp = np.pad(x, (h, window - 1 - h), mode="reflect")
    s = fftconvolve(xp, np.ones(window), mode="valid")
    return s / window


def moving_normalize(x: np.ndarray, window_s: float = NORM_WINDOW_S, rate: int = OUTPUT_RATE,
                     eps: float = NORM_EPS) -> np.ndarray:
    """Subtract the moving mean and divide by the moving RMS of the residual.

    Both moving statistics use a centred boxcar of ``window_s`` seconds with
    reflective edges and are computed by FFT convolution.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("empty signal")
    if not np.isfinite(x).all():
        raise NumericalError("non-finite samples in signal")
    window = int(round(window_s * rate))
    x = x - x[0]  # shift invariant; keeps a constant signal exactly zero through the FFT
    resid = x - _boxcar_mean(x, window)
    ms = np.maximum(_boxcar_mean(resid * resid, window), 0.0)
    return resid / np.maximum(np.sqrt(ms), eps)


def moving_normalize_direct(x: np.ndarray, window_s: float = NORM_WINDOW_S,
                            rate: int = OUTPUT_RATE, eps: float = NORM_EPS,
                            positions: np.ndarray | None = None) -> np.ndarray:
    """Reference O(N*W) sliding-window version of :func:`moving_normalize`.

    ``positions`` restricts the output to a subset of indices (the mean is
    still evaluated wherever the RMS windows need it).
    """
    x = np.asarray(x, dtype=np.float64)
    window = int(round(window_s * rate))
    h = window // 2
    n = x.size
    xp = np.pad(x, (h, window - 1 - h), mode="reflect")
    mu = np.array([xp[t:t + window].sum() for t in range(n)]) / window
    r = x - mu
    rp = np.pad(r * r, (h, window - 1 - h), mode="reflect")
    idx = np.arange(n) if positions is None else np.asarray(positions)
    rms = np.sqrt(np.array([rp[t:t + window].sum() for t in idx]) / window)
    return r[idx] / np.maximum(rms, eps)


def scale_sao2(x: np.ndarray) -> np.ndarray:
    """Per-record min-max map onto [-0.5, 0.5]; a constant channel maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("empty signal")
    if not np.isfinite(x).all():
        raise NumericalError("non-finite samples in SaO2")
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo) - 0.5


def downsample_labels(arousal: np.ndarray, apnea: np.ndarray, sleep: np.ndarray,
                      rate: int = SAMPLE_RATE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reduce per-sample label triples to one triple per second.

    Each second takes the triple at its centre sample, except that a second
    containing any target-arousal sample takes the triple of its first
    target-arousal sample.
    """
    n = arousal.shape[0]
    n_sec = -(-n // rate)
    starts = np.arange(n_sec) * rate
    pick = np.minimum(starts + rate // 2, n - 1)
    pad = n_sec * rate - n
    ar = np.concatenate((arousal, np.zeros(pad, dtype=arousal.dtype))).reshape(n_sec, rate) == 1
    has = ar.any(axis=1)
    pick[has] = starts[has] + ar[has].argmax(axis=1)
    return arousal[pick], apnea[pick], sleep[pick]


@dataclass
class PreparedRecord:
    signals: np.ndarray          # (12, T) float32 at 50 Hz
    bin_labels_1hz: np.ndarray   # (T / 50,) int8 output codes
    valid_length_s: float
    source_id: str
    channel_names: tuple[str, ...] = INPUT_CHANNELS

    @property
    def n_seconds(self) -> int:
        return self.bin_labels_1hz.shape[0]

    def validate(self) -> None:
        c, t = self.signals.shape
        if t != self.n_seconds * OUTPUT_RATE:
            raise ValidationError("signal length does not match label length")
        if not np.isfinite(self.signals).all():
            raise NumericalError("prepared signals contain non-finite values")
        if "SaO2" in self.channel_names:
            i = self.channel_names.index("SaO2")
            if np.abs(self.signals[i]).max() > 0.5 + 1e-6:
                raise ValidationError("SaO2 outside [-0.5, 0.5]")


def prepare_record(record: RawRecord, pad_to_s: int = NIGHT_S, normalize: bool = True,
                   kernel: FilterKernel | None = None) -> PreparedRecord:
    """Run the full preprocessing chain on one record.

    ``pad_to_s`` is the fixed network input duration (7 h by default); shorter
    records are zero padded with ignore labels, longer ones are rejected.
    ``normalize=False`` skips the moving-window normalization.
    """
    record.validate(require_standard=True)
    if record.sample_rate != SAMPLE_RATE:
        raise ValidationError(f"expected {SAMPLE_RATE} Hz input, got {record.sample_rate}")
    if record.duration_samples > pad_to_s * SAMPLE_RATE:
        raise ValidationError(
            f"record {record.record_id} lasts {record.duration_s:.0f} s, longer than {pad_to_s} s")
    kernel = kernel or design_antialias_fir()
    t_out = pad_to_s * OUTPUT_RATE
    signals = np.zeros((len(INPUT_CHANNELS), t_out), dtype=np.float32)
    for i, name in enumerate(INPUT_CHANNELS):
        y = filter_decimate(record.channels[name], kernel)
        if name == "SaO2":
            y = scale_sao2(y)
        elif normalize:
            y = moving_normalize(y)
        signals[i, :y.size] = y

    ar, ap, sl = downsample_labels(record.arousal_labels, record.apnea_labels, record.sleep_labels)
    bins = np.zeros(pad_to_s, dtype=np.int8)
    bins[:ar.size] = label_remap.triples_to_bins(ar, ap, sl)
    prep = PreparedRecord(signals, bins, record.duration_s, record.record_id)
    prep.validate()
    return prep


def write_prepared(prep: PreparedRecord, path: str | os.PathLike, overwrite: bool = False) -> None:
    path = Path(path)
    if (path / "manifest").exists() and not overwrite:
        raise FileExistsError(f"{path} already holds a record")
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "prepared": True,
        "record_id": prep.source_id,
        "sample_rate": OUTPUT_RATE,
        "duration_samples": int(prep.signals.shape[1]),
        "valid_length_s": prep.valid_length_s,
        "channels": list(prep.channel_names),
        "dtype": "<f4",
    }
    for name, x in zip(prep.channel_names, prep.signals):
        x.astype("<f4").tofile(path / f"{name}.f32")
    prep.bin_labels_1hz.astype(np.int8).tofile(path / "bins.i8")
    (path / "manifest").write_text(json.dumps(manifest, indent=2) + "\n")


def read_prepared(path: str | os.PathLike) -> PreparedRecord:
    path = Path(path)
    manifest = read_manifest(path)
    if not manifest.get("prepared"):
        raise FormatError(f"{path} is not a prepared record")
    t = int(manifest["duration_samples"])
    names = tuple(manifest["channels"])
    signals = np.empty((len(names), t), dtype=np.float32)
    for i, name in enumerate(names):
        fpath = path / f"{name}.f32"
        if not fpath.is_file():
            raise FormatError(f"{path}: missing channel file for {name}")
        x = np.fromfile(fpath, dtype="<f4")
        if x.size != t:
            raise ValidationError(f"{fpath}: {x.size} samples, manifest says {t}")
        signals[i] = x
    bpath = path / "bins.i8"
    if not bpath.is_file():
        raise FormatError(f"{path}: missing bins.i8")
    bins = np.fromfile(bpath, dtype=np.int8)
    prep = PreparedRecord(signals, bins, float(manifest["valid_length_s"]),
                          manifest["record_id"], names)
    prep.validate()
    return prep


def _prepare_one(args) -> str:
    src, dst, pad_to_s, normalize, overwrite = args
    prep = prepare_record(read_record(src), pad_to_s=pad_to_s, normalize=normalize)
    write_prepared(prep, dst, overwrite=overwrite)
    return prep.source_id


def prepare_directory(src_root: str | os.PathLike, dst_root: str | os.PathLike,
                      pad_to_s: int = NIGHT_S, normalize: bool = True,
                      workers: int = 1, overwrite: bool = False) -> list[str]:
    """Prepare every record directory under ``src_root`` into ``dst_root``."""
    src_root, dst_root = Path(src_root), Path(dst_root)
    srcs = sorted(p for p in src_root.iterdir() if (p / "manifest").is_file())
    if not srcs:
        raise FormatError(f"no records found under {src_root}")
    jobs = [(s, dst_root / s.name, pad_to_s, normalize, overwrite) for s in srcs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_prepare_one, jobs))
    return [_prepare_one(j) for j in jobs]
