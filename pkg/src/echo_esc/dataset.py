"""Dataset manifests, official cross-validation folds and waveform standardization.

Supports the UrbanSound8K metadata file (``UrbanSound8K.csv``) and the
ESC-50 metadata file (``esc50.csv``), from which the ESC-10 subset is
selected through its ``esc10`` flag.  Audio is decoded from PCM WAV only;
other containers must be converted beforehand (see README).
"""
from __future__ import annotations

import csv
import enum
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import _io
from .errors import (
    DecodeFailure,
    EmptyManifest,
    MissingColumn,
    UnknownLabel,
    UnsupportedEncoding,
)

log = logging.getLogger(__name__)

TARGET_SR = 16000
VALIDATION_FRACTION = 0.1

# bump when standardize() changes numerically; part of the cache key
PREPROC_VERSION = 1
RESAMPLER = ("polyphase", "kaiser", 8.6)


ESC50_LABELS = (
    "dog", "rooster", "pig", "cow", "frog", "cat", "hen", "insects", "sheep", "crow",
    "rain", "sea_waves", "crackling_fire", "crickets", "chirping_birds", "water_drops", "wind",
    "pouring_water", "toilet_flush", "thunderstorm",
    "crying_baby", "sneezing", "clapping", "breathing", "coughing", "footsteps", "laughing",
    "brushing_teeth", "snoring", "drinking_sipping",
    "door_wood_knock", "mouse_click", "keyboard_typing", "door_wood_creaks", "can_opening",
    "washing_machine", "vacuum_cleaner", "clock_alarm", "clock_tick", "glass_breaking",
    "helicopter", "chainsaw", "siren", "car_horn", "engine", "train", "church_bells", "airplane",
    "fireworks", "hand_saw",
)  # index == official ``target`` id

ESC10_LABELS = ("dog", "rooster", "rain", "sea_waves", "crackling_fire", "crying_baby",
                "sneezing", "clock_tick", "helicopter", "chainsaw")

US8K_LABELS = ("air_conditioner", "car_horn", "children_playing", "dog_bark", "drilling",
               "engine_idling", "gun_shot", "jackhammer", "siren", "street_music")  # == classID


class DatasetKind(str, enum.Enum):
    US8K = "US8K"
    ESC10 = "ESC10"
    ESC50 = "ESC50"
    CUSTOM = "CUSTOM"

    @property
    def num_folds(self) -> int:
        return {"US8K": 10, "ESC10": 5, "ESC50": 5}[self.value]

    @property
    def num_classes(self) -> int:
        return {"US8K": 10, "ESC10": 10, "ESC50": 50}[self.value]

    @property
    def official_labels(self) -> tuple[str, ...]:
        return {"US8K": US8K_LABELS, "ESC10": ESC10_LABELS, "ESC50": ESC50_LABELS}[self.value]

    @property
    def clip_length_s(self) -> float:
        return 4.0 if self is DatasetKind.US8K else 5.0

    @classmethod
    def parse(cls, value) -> "DatasetKind":
        if isinstance(value, cls):
            return value
        key = str(value).upper().replace("-", "").replace("_", "")
        aliases = {"URBANSOUND8K": "US8K", "US8K": "US8K", "ESC10": "ESC10", "ESC50": "ESC50",
                   "CUSTOM": "CUSTOM"}
        try:
            return cls(aliases[key])
        except KeyError:
            raise ValueError(f"unknown dataset kind {value!r}") from None


@dataclass(frozen=True)
class ClipRecord:
    """One clip.  ``label`` holds the fine label, or the coarse label after relabeling."""

    clip_id: str
    file_path: str
    label: str
    fold_index: int
    duration_s: float


@dataclass(frozen=True)
class Manifest:
    dataset_kind: DatasetKind
    records: tuple[ClipRecord, ...]
    label_set: tuple[str, ...]
    num_folds: int
    clip_length_s: float
    level: str = "fine"

    def __post_init__(self):
        if not self.records:
            raise EmptyManifest(f"{self.dataset_kind.value} manifest has no records")
        if len(set(self.label_set)) != len(self.label_set):
            raise ValueError("label_set contains duplicates")
        known = set(self.label_set)
        for rec in self.records:
            if rec.label not in known:
                raise UnknownLabel(f"{rec.clip_id}: label {rec.label!r} not in label set")
            if not 1 <= rec.fold_index <= self.num_folds:
                raise ValueError(f"{rec.clip_id}: fold {rec.fold_index} outside 1..{self.num_folds}")

    @property
    def n(self) -> int:
        return len(self.label_set)

    def label_index(self, label: str) -> int:
        return self.label_set.index(label)

    def by_fold(self, fold: int) -> list[ClipRecord]:
        return [r for r in self.records if r.fold_index == fold]

    def fold_counts(self) -> dict[int, int]:
        counts = dict.fromkeys(range(1, self.num_folds + 1), 0)
        for r in self.records:
            counts[r.fold_index] += 1
        return counts


_US8K_COLUMNS = ("slice_file_name", "fold", "class")
_ESC_COLUMNS = ("filename", "fold", "category", "esc10")


def _truthy(value: str) -> bool:
    return value.strip().lower() in ("true", "1", "yes")


def load_manifest(path, kind, audio_root=None) -> Manifest:
    """Read an official metadata CSV into a :class:`Manifest`.

    ``audio_root`` defaults to ``<csv dir>/../audio``, the layout both
    datasets ship with.
    """
    kind = DatasetKind.parse(kind)
    if kind is DatasetKind.CUSTOM:
        raise ValueError("CUSTOM manifests are built in code, not loaded from CSV")
    path = Path(path)
    audio_root = Path(audio_root) if audio_root else path.parent.parent / "audio"
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        rows = list(reader)

    required = _US8K_COLUMNS if kind is DatasetKind.US8K else _ESC_COLUMNS
    missing = [c for c in required if c not in columns]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")

    if kind is DatasetKind.ESC10:
        rows = [r for r in rows if _truthy(r["esc10"])]
    if not rows:
        raise EmptyManifest(f"{path}: no {kind.value} rows")

    label_col, id_col = ("class", "classID") if kind is DatasetKind.US8K else ("category", "target")
    # order labels by the official numeric class id where available
    order = {}
    for r in rows:
        key = int(r[id_col]) if id_col in columns and r.get(id_col, "").strip() else None
        order.setdefault(r[label_col], key)
    if all(v is not None for v in order.values()):
        label_set = tuple(sorted(order, key=lambda lab: (order[lab], lab)))
    else:
        label_set = tuple(sorted(order))
    if len(label_set) != kind.num_classes:
        raise UnknownLabel(
            f"{path}: expected {kind.num_classes} {kind.value} labels, found {len(label_set)}"
        )

    records = []
    for r in rows:
        fold = int(r["fold"])
        if kind is DatasetKind.US8K:
            name = r["slice_file_name"]
            file_path = audio_root / f"fold{fold}" / name
            try:
                duration = float(r["end"]) - float(r["start"])
            except (KeyError, ValueError):
                duration = kind.clip_length_s
        else:
            name = r["filename"]
            file_path = audio_root / name
            duration = kind.clip_length_s
        records.append(
            ClipRecord(
                clip_id=Path(name).stem,
                file_path=str(file_path),
                label=r[label_col],
                fold_index=fold,
                duration_s=min(duration, kind.clip_length_s),
            )
        )
    return Manifest(
        dataset_kind=kind,
        records=tuple(records),
        label_set=label_set,
        num_folds=kind.num_folds,
        clip_length_s=kind.clip_length_s,
    )


@dataclass(frozen=True)
class FoldSplit:
    """Leave-one-fold-out split with a seeded, label-stratified validation hold-out."""

    test_fold: int
    train_folds: frozenset[int]
    seed: int = 0
    validation_fraction: float = VALIDATION_FRACTION

    def partition(self, manifest: Manifest):
        """Return ``(train, validation, test)`` record lists.

        Stratification uses the manifest's own labels, so partition the fine
        manifest and map the resulting lists when a coarse view is needed.
        """
        test = [r for r in manifest.records if r.fold_index == self.test_fold]
        pool = [r for r in manifest.records if r.fold_index in self.train_folds]
        by_label: dict[str, list[ClipRecord]] = {}
        for r in pool:
            by_label.setdefault(r.label, []).append(r)
        held = set()
        # iterate labels in sorted order so the rng stream is layout-independent
        rng = np.random.default_rng([self.seed, self.test_fold])
        for label in sorted(by_label):
            group = sorted(by_label[label], key=lambda r: r.clip_id)
            k = len(group)
            take = 0 if k < 2 else max(1, int(math.floor(self.validation_fraction * k + 0.5)))
            take = min(take, k - 1)
            for i in rng.permutation(k)[:take]:
                held.add(group[i].clip_id)
        train = [r for r in pool if r.clip_id not in held]
        val = [r for r in pool if r.clip_id in held]
        return train, val, test


def resolve_folds(manifest: Manifest, seed: int = 0,
                  validation_fraction: float = VALIDATION_FRACTION) -> list[FoldSplit]:
    folds = range(1, manifest.num_folds + 1)
    return [
        FoldSplit(k, frozenset(f for f in folds if f != k), seed, validation_fraction)
        for k in folds
    ]


def relabel_records(manifest: Manifest, mapping: dict[str, str], label_set, level="coarse"):
    """Manifest with every record's label mapped through ``mapping``."""
    records = tuple(replace(r, label=mapping[r.label]) for r in manifest.records)
    return replace(manifest, records=records, label_set=tuple(label_set), level=level)


# --- waveform standardization ------------------------------------------------

@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int
    source_clip_id: str


def preproc_hash(clip_length_s: float) -> str:
    return _io.digest({
        "version": PREPROC_VERSION,
        "sample_rate": TARGET_SR,
        "resampler": list(RESAMPLER),
        "clip_length_s": clip_length_s,
        "downmix": "mean",
        "fit": "tail-pad-or-truncate",
    })[:16]


def read_wav(path) -> tuple[np.ndarray, int]:
    """Decode a PCM WAV file to float64 samples in [-1, 1], shape (frames, channels)."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            sr, data = wavfile.read(str(path))
    except FileNotFoundError as exc:
        raise DecodeFailure(f"{path}: file not found") from exc
    except ValueError as exc:
        msg = str(exc)
        if "format" in msg.lower() or "not understood" in msg.lower() or "bit depth" in msg.lower():
            raise UnsupportedEncoding(f"{path}: {msg}") from exc
        raise DecodeFailure(f"{path}: {msg}") from exc
    except Exception as exc:  # scipy raises assorted errors on truncated RIFF data
        raise DecodeFailure(f"{path}: {exc}") from exc

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise UnsupportedEncoding(f"{path}: sample type {data.dtype} not supported")
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise DecodeFailure(f"{path}: no samples")
    return x, int(sr)


def standardize_array(x: np.ndarray, sr: int, clip_length_s: float) -> np.ndarray:
    """Downmix, resample to 16 kHz and fit to exactly ``clip_length_s`` seconds."""
    mono = x.mean(axis=1) if x.ndim == 2 else np.asarray(x, dtype=np.float64)
    if sr != TARGET_SR:
        ratio = Fraction(TARGET_SR, sr)
        mono = resample_poly(mono, ratio.numerator, ratio.denominator,
                             window=RESAMPLER[1:])
    length = int(round(clip_length_s * TARGET_SR))
    out = np.zeros(length, dtype=np.float32)
    n = min(length, mono.shape[0])
    out[:n] = mono[:n]
    return out


@dataclass
class WaveformCache:
    root: Path
    enabled: bool = True
    hits: int = field(default=0, init=False)
    misses: int = field(default=0, init=False)

    def __post_init__(self):
        self.root = Path(self.root)


def standardize(record: ClipRecord, manifest: Manifest, cache: WaveformCache | None = None) -> Waveform:
    """Mono 16 kHz waveform of exactly ``clip_length_s * 16000`` samples.

    Cached as ``<cache>/<preproc-hash>/<clip_id>.f32`` plus a JSON sidecar;
    hits and misses return identical float32 arrays.
    """
    key = preproc_hash(manifest.clip_length_s)
    stem = None
    if cache is not None and cache.enabled:
        stem = cache.root / key / record.clip_id
        cached = _io.read_f32_blob(stem, {"sample_rate": TARGET_SR, "preproc_hash": key})
        if cached is not None:
            cache.hits += 1
            return Waveform(cached, TARGET_SR, record.clip_id)
        cache.misses += 1
    x, sr = read_wav(record.file_path)
    samples = standardize_array(x, sr, manifest.clip_length_s)
    if stem is not None:
        _io.write_f32_blob(stem, samples, {
            "sample_rate": TARGET_SR,
            "preproc_hash": key,
            "source_rate": sr,
            "clip_id": record.clip_id,
        })
    return Waveform(samples, TARGET_SR, record.clip_id)
