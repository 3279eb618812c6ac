"""Record container, label I/O and the synthetic PSG generator.

On disk a record is a directory::

    manifest          JSON (human readable): id, rate, length, channel list
    <channel>.f32     raw little-endian float32 samples, one file per channel
    arousal.txt       run-length intervals, one ``start end value`` per line
    apnea.txt
    sleep.txt

Interval files only hold runs that differ from the task default
(arousal 0, apnea 0, sleep -1). Samples covered by no interval take the
default when the record is read back.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

from .errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 200
FORMAT_NAME = "sleepdrcnn-record"
FORMAT_VERSION = 1

# Channel names of the standard 13-channel PSG montage.
STANDARD_CHANNELS = (
    "F3-M2", "F4-M1", "C3-M2", "C4-M1", "O1-M2", "O2-M1",
    "E1-M2", "Chin1-Chin2", "ABD", "CHEST", "AIRFLOW", "SaO2", "ECG",
)
EEG_CHANNELS = STANDARD_CHANNELS[:6]

TASKS = ("arousal", "apnea", "sleep")
TASK_VALUES = {"arousal": (-1, 0, 1), "apnea": (0, 1), "sleep": (-1, 0, 1)}
TASK_DEFAULTS = {"arousal": 0, "apnea": 0, "sleep": -1}


@dataclass(frozen=True)
class AnnotationInterval:
    task: str
    start_sample: int
    end_sample: int  # exclusive
    value: int

    def validate(self, duration_samples: int | None = None) -> None:
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}")
        if self.value not in TASK_VALUES[self.task]:
            raise ValidationError(f"{self.task} value {self.value} not in {TASK_VALUES[self.task]}")
        if not 0 <= self.start_sample < self.end_sample:
            raise ValidationError(f"bad interval [{self.start_sample}, {self.end_sample})")
        if duration_samples is not None and self.end_sample > duration_samples:
            raise ValidationError(
                f"{self.task} interval [{self.start_sample}, {self.end_sample}) "
                f"exceeds record length {duration_samples}"
            )


@dataclass
class RawRecord:
    record_id: str
    channels: dict[str, np.ndarray]
    arousal_labels: np.ndarray
    apnea_labels: np.ndarray
    sleep_labels: np.ndarray
    sample_rate: int = SAMPLE_RATE
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.channels = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.channels.items()}
        self.arousal_labels = np.asarray(self.arousal_labels, dtype=np.int8)
        self.apnea_labels = np.asarray(self.apnea_labels, dtype=np.int8)
        self.sleep_labels = np.asarray(self.sleep_labels, dtype=np.int8)

    @property
    def duration_samples(self) -> int:
        return int(self.arousal_labels.shape[0])

    @property
    def duration_s(self) -> float:
        return self.duration_samples / self.sample_rate

    def labels(self, task: str) -> np.ndarray:
        return getattr(self, f"{task}_labels")

    def validate(self, require_standard: bool = False) -> None:
        n = self.duration_samples
        for task in TASKS:
            lab = self.labels(task)
            if lab.ndim != 1 or lab.shape[0] != n:
                raise ValidationError(f"{task} labels have length {lab.shape}, expected {n}")
            bad = ~np.isin(lab, TASK_VALUES[task])
            if bad.any():
                raise ValidationError(f"{task} labels contain values outside {TASK_VALUES[task]}")
        for name, x in self.channels.items():
            if x.ndim != 1 or x.shape[0] != n:
                raise ValidationError(f"channel {name} has shape {x.shape}, expected ({n},)")
            if not np.isfinite(x).all():
                raise ValidationError(f"channel {name} contains non-finite samples")
        if require_standard:
            missing = set(STANDARD_CHANNELS) - set(self.channels)
            if missing:
                raise ValidationError(f"missing standard channels: {sorted(missing)}")

    def intervals(self) -> list[AnnotationInterval]:
        out = []
        for task in TASKS:
            out.extend(labels_to_intervals(task, self.labels(task)))
        return out


def labels_to_intervals(task: str, labels: np.ndarray) -> list[AnnotationInterval]:
    """Run-length encode the non-default stretches of a per-sample label vector."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [labels.size]))
    default = TASK_DEFAULTS[task]
    return [
        AnnotationInterval(task, int(s), int(e), int(labels[s]))
        for s, e in zip(starts, ends)
        if labels[s] != default
    ]


def expand_intervals(task: str, intervals: Iterable[AnnotationInterval], n: int) -> np.ndarray:
    out = np.full(n, TASK_DEFAULTS[task], dtype=np.int8)
    prev_end = 0
    for iv in sorted(intervals, key=lambda i: i.start_sample):
        iv.validate(n)
        if iv.task != task:
            raise ValidationError(f"interval for {iv.task} passed as {task}")
        if iv.start_sample < prev_end:
            raise ValidationError(f"overlapping {task} intervals at sample {iv.start_sample}")
        out[iv.start_sample:iv.end_sample] = iv.value
        prev_end = iv.end_sample
    return out


def _channel_filename(name: str) -> str:
    return name.replace(os.sep, "_") + ".f32"


def write_record(record: RawRecord, path: str | os.PathLike, overwrite: bool = False) -> None:
    record.validate()
    path = Path(path)
    if (path / "manifest").exists() and not overwrite:
        raise FileExistsError(f"{path} already holds a record")
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "record_id": record.record_id,
        "sample_rate": record.sample_rate,
        "duration_samples": record.duration_samples,
        "channels": list(record.channels),
        "dtype": "<f4",
        "prepared": False,
        "metadata": record.metadata,
    }
    for name, x in record.channels.items():
        x.astype("<f4").tofile(path / _channel_filename(name))
    for task in TASKS:
        write_intervals(path / f"{task}.txt", labels_to_intervals(task, record.labels(task)))
    (path / "manifest").write_text(json.dumps(manifest, indent=2) + "\n")


def write_intervals(path: Path, intervals: Sequence[AnnotationInterval]) -> None:
    with open(path, "w") as fh:
        for iv in intervals:
            fh.write(f"{iv.start_sample} {iv.end_sample} {iv.value}\n")


def read_intervals(path: Path, task: str) -> list[AnnotationInterval]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'start end value'")
            try:
                s, e, v = (int(p) for p in parts)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            out.append(AnnotationInterval(task, s, e, v))
    return out


def read_manifest(path: str | os.PathLike) -> dict:
    mpath = Path(path) / "manifest"
    if not mpath.is_file():
        raise FormatError(f"{path}: no manifest")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: {exc}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{mpath}: not a {FORMAT_NAME} manifest")
    return manifest


def read_record(path: str | os.PathLike) -> RawRecord:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("prepared"):
        raise FormatError(f"{path} holds a prepared record; use signal_prep.read_prepared")
    n = int(manifest["duration_samples"])
    channels = {}
    for name in manifest["channels"]:
        fpath = path / _channel_filename(name)
        if not fpath.is_file():
            raise FormatError(f"{path}: missing channel file for {name}")
        x = np.fromfile(fpath, dtype="<f4")
        if x.shape[0] != n:
            raise ValidationError(f"channel {name} has {x.shape[0]} samples, manifest says {n}")
        channels[name] = x.astype(np.float32)
    labels = {}
    for task in TASKS:
        ipath = path / f"{task}.txt"
        ivs = read_intervals(ipath, task) if ipath.is_file() else []
        labels[task] = expand_intervals(task, ivs, n)
    rec = RawRecord(
        record_id=manifest["record_id"],
        channels=channels,
        arousal_labels=labels["arousal"],
        apnea_labels=labels["apnea"],
        sleep_labels=labels["sleep"],
        sample_rate=int(manifest["sample_rate"]),
        metadata=manifest.get("metadata", {}),
    )
    rec.validate()
    return rec


def record_size_bytes(n_channels: int, duration_samples: int) -> int:
    """Signal payload of a record on disk (labels and manifest excluded)."""
    return 4 * n_channels * duration_samples


def read_plan(path: str | os.PathLike) -> list[AnnotationInterval]:
    """Parse an event-plan file: ``task start_sample end_sample value`` per line."""
    plan = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'task start end value'")
            try:
                plan.append(AnnotationInterval(parts[0], int(parts[1]), int(parts[2]), int(parts[3])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return plan


# --------------------------------------------------------------------------
# Synthetic records
# --------------------------------------------------------------------------

def random_event_plan(rng: np.random.Generator, duration_s: int) -> list[AnnotationInterval]:
    """Draw a plausible night: undefined prefix, 30 s sleep/wake epochs, events inside sleep.

    All boundaries fall on whole seconds. Every apnea is optionally followed by a
    3 s non-target (respiratory) arousal labelled -1.
    """
    fs = SAMPLE_RATE
    prefix = int(min(rng.integers(30, 91), max(duration_s // 4, 1)))
    plan: list[AnnotationInterval] = []

    # sleep/wake hypnogram in 30 s epochs, merged into runs
    runs: list[tuple[int, int, int]] = []
    state = 1 if rng.random() < 0.5 else 0
    t = prefix
    while t < duration_s:
        end = min(t + 30, duration_s)
        if runs and runs[-1][2] == state:
            runs[-1] = (runs[-1][0], end, state)
        else:
            runs.append((t, end, state))
        t = end
        p_switch = 0.08 if state == 1 else 0.4
        if rng.random() < p_switch:
            state = 1 - state

    for a, b, state in runs:
        plan.append(AnnotationInterval("sleep", a * fs, b * fs, state))
        if state != 1:
            continue
        cursor = a + int(rng.integers(5, 20))
        while cursor < b:
            kind = rng.random()
            if kind < 0.35:
                dur = int(rng.integers(10, 41))
                post = 3 if rng.random() < 0.5 else 0
                if cursor + dur + post + 2 > b:
                    break
                plan.append(AnnotationInterval("apnea", cursor * fs, (cursor + dur) * fs, 1))
                if post:
                    plan.append(AnnotationInterval(
                        "arousal", (cursor + dur) * fs, (cursor + dur + post) * fs, -1))
                cursor += dur + post
            elif kind < 0.8:
                dur = int(rng.integers(3, 16))
                if cursor + dur + 2 > b:
                    break
                plan.append(AnnotationInterval("arousal", cursor * fs, (cursor + dur) * fs, 1))
                cursor += dur
            cursor += int(rng.integers(10, 60))
    return plan


def labels_from_plan(plan: Sequence[AnnotationInterval], n: int) -> dict[str, np.ndarray]:
    """Expand an event plan into consistent per-sample labels.

    Wake and apnea samples carry arousal -1 by definition; a plan that puts
    apnea or a scored (0/1) arousal outside sleep is rejected.
    """
    by_task = {t: [iv for iv in plan if iv.task == t] for t in TASKS}
    for iv in plan:
        iv.validate(n)
    sleep = expand_intervals("sleep", by_task["sleep"], n)
    apnea = expand_intervals("apnea", by_task["apnea"], n)
    arousal = expand_intervals("arousal", by_task["arousal"], n)

    if (apnea == 1).any() and (sleep[apnea == 1] != 1).any():
        raise ValidationError("apnea planned while awake or before sleep onset")
    explicit = np.zeros(n, dtype=bool)
    for iv in by_task["arousal"]:
        if iv.value != -1:
            explicit[iv.start_sample:iv.end_sample] = True
    if (explicit & ((sleep != 1) | (apnea == 1))).any():
        raise ValidationError("scored arousal planned outside sleep or during apnea")

    arousal[sleep == 0] = -1
    arousal[apnea == 1] = -1
    return {"arousal": arousal, "apnea": apnea, "sleep": sleep}


def _bandnoise(rng: np.random.Generator, n: int, lo: float, hi: float, fs: int = SAMPLE_RATE) -> np.ndarray:
    sos = sps.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    x = sps.sosfilt(sos, rng.standard_normal(n + fs))[fs:]
    return x / (x.std() + 1e-12)


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    return np.convolve(x, np.ones(width) / width, mode="same")


def generate_synthetic(record_seed: int, duration_s: int,
                       event_plan: Sequence[AnnotationInterval] | None = None,
                       record_id: str | None = None, strength: float = 1.0) -> RawRecord:
    """Deterministic synthetic 13-channel PSG with event-locked signatures.

    Signatures (all switched on sample-exactly at the label boundaries):

    * target arousal: strong 16-25 Hz EEG burst, chin EMG burst, fast deep breathing
    * wake (and non-target arousal): 8-12 Hz alpha EEG, eye movements, raised EMG
    * sleep: 0.5-2 Hz delta EEG, low EMG
    * apnea: airflow suppressed to 8 %, effort belts keep moving, SaO2 dip
      lagging the event by 10 s

    ``strength`` scales how far the target-arousal signature departs from the
    sleep baseline (1 = as listed, 0 = indistinguishable from sleep).
    """
    if strength < 0:
        raise ValidationError("strength must be non-negative")
    rng = np.random.default_rng(record_seed)
    fs = SAMPLE_RATE
    n = int(duration_s) * fs
    if n <= 0:
        raise ValidationError("duration must be positive")
    if event_plan is None:
        event_plan = random_event_plan(rng, int(duration_s))
    labels = labels_from_plan(event_plan, n)
    sleep, apnea, arousal = labels["sleep"], labels["apnea"], labels["arousal"]

    target = arousal == 1
    wake_like = (sleep != 1) | ((arousal == -1) & (apnea == 0))

    def env(sleep_v, wake_v, arousal_v):
        arousal_v = sleep_v + strength * (arousal_v - sleep_v)
        return np.where(target, arousal_v, np.where(wake_like, wake_v, sleep_v)).astype(np.float64)

    delta_amp = env(1.5, 0.3, 0.3)
    alpha_amp = env(0.1, 1.0, 0.5)
    beta_amp = env(0.1, 0.3, 1.8)
    chans: dict[str, np.ndarray] = {}
    for name in EEG_CHANNELS:
        x = (delta_amp * _bandnoise(rng, n, 0.5, 2.0)
             + alpha_amp * _bandnoise(rng, n, 8.0, 12.0)
             + beta_amp * _bandnoise(rng, n, 16.0, 25.0)
             + 0.2 * _bandnoise(rng, n, 0.3, 30.0))
        chans[name] = x
    chans["E1-M2"] = env(0.2, 1.0, 0.5) * _bandnoise(rng, n, 0.2, 0.6) + 0.1 * _bandnoise(rng, n, 0.3, 30.0)
    chans["Chin1-Chin2"] = env(0.2, 0.8, 2.0) * _bandnoise(rng, n, 10.0, 25.0)

    rate = np.where(target, 0.25 + 0.1 * strength, 0.25)
    phase = 2 * np.pi * np.cumsum(rate) / fs + rng.uniform(0, 2 * np.pi)
    breath = np.sin(phase)
    effort_amp = np.where(apnea == 1, 1.3, env(1.0, 1.0, 1.8))
    flow_amp = np.where(apnea == 1, 0.08, env(1.0, 1.0, 1.8))
    chans["ABD"] = effort_amp * breath + 0.05 * rng.standard_normal(n)
    chans["CHEST"] = effort_amp * np.sin(phase + 0.3) + 0.05 * rng.standard_normal(n)
    chans["AIRFLOW"] = flow_amp * breath + 0.05 * rng.standard_normal(n)

    lag = 10 * fs
    dip = np.zeros(n)
    dip[lag:] = (apnea[:-lag] == 1) if n > lag else 0
    dip = _smooth(dip, 5 * fs)
    chans["SaO2"] = 96.0 - 5.0 * dip + 0.2 * _bandnoise(rng, n, 0.01, 0.5)

    hr = env(1.1, 1.2, 1.4)
    hphase = np.cumsum(hr) / fs + rng.uniform()
    chans["ECG"] = np.exp(-((hphase % 1.0) - 0.5) ** 2 / 0.0005) + 0.02 * rng.standard_normal(n)

    for name in STANDARD_CHANNELS:
        if name == "SaO2":
            continue
        chans[name] = rng.uniform(0.5, 2.0) * chans[name] + rng.normal(0.0, 1.0)

    rec = RawRecord(
        record_id=record_id or f"synth{record_seed:05d}",
        channels={k: chans[k] for k in STANDARD_CHANNELS},
        arousal_labels=arousal,
        apnea_labels=apnea,
        sleep_labels=sleep,
        metadata={"synthetic": True, "seed": int(record_seed), "strength": float(strength)},
    )
    rec.validate(require_standard=True)
    return rec
