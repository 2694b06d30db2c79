"""Synthetic datasets for desk-scale checks.

``clustered_spectrograms`` builds in-memory spectrogram-like images with a
two-level class structure.  ``write_esc_dataset`` / ``write_us8k_dataset``
lay out tiny WAV corpora in the official directory/CSV formats so the whole
ingest -> features -> training path can run without the real data.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from .dataset import ESC10_LABELS, ESC50_LABELS, US8K_LABELS, ClipRecord, DatasetKind, Manifest
from .ontology import Ontology, OntologySource

TOY_LABELS = ("low_a", "low_b", "high_a", "high_b")
TOY_ONTOLOGY = {"low": ("low_a", "low_b"), "high": ("high_a", "high_b")}


def clustered_spectrograms(samples_per_class=200, size=32, num_folds=5, seed=0, noise=0.8):
    """Four classes in two super-clusters.

    Each image carries one bright horizontal band.  The super-cluster sets
    the band's half of the frequency axis (far apart); the sub-class shifts
    it by a few rows inside that half.  Returns ``(manifest, features, ontology)``.
    """
    rng = np.random.default_rng(seed)
    rows = np.arange(size)[:, None]
    centers = {"low_a": 0.18, "low_b": 0.36, "high_a": 0.64, "high_b": 0.82}
    records, features = [], {}
    for label in TOY_LABELS:
        for i in range(samples_per_class):
            c = centers[label] * size + rng.normal(0.0, 0.6)
            width = 1.2 + 0.3 * rng.random()
            band = np.exp(-0.5 * ((rows - c) / width) ** 2)
            envelope = 0.6 + 0.4 * rng.random(size)[None, :]
            img = band * envelope + noise * rng.standard_normal((size, size))
            img = (img - img.min()) / (img.max() - img.min())
            clip_id = f"{label}-{i:04d}"
            features[clip_id] = torch.from_numpy(np.repeat(img[None].astype(np.float32), 3, axis=0))
            records.append(ClipRecord(clip_id, "", label, i % num_folds + 1, 1.0))
    manifest = Manifest(DatasetKind.CUSTOM, tuple(records), TOY_LABELS, num_folds, 1.0)
    ontology = Ontology(dict(TOY_ONTOLOGY), 2, OntologySource.MANUAL, dataset="CUSTOM")
    return manifest, features, ontology


def _tone(label_index: int, sr: int, seconds: float, rng) -> np.ndarray:
    t = np.arange(int(round(seconds * sr))) / sr
    f0 = 300.0 + 350.0 * label_index
    x = 0.4 * np.sin(2 * np.pi * f0 * t) + 0.2 * np.sin(2 * np.pi * 2 * f0 * t)
    return x + 0.05 * rng.standard_normal(t.shape)


def _write_wav(path: Path, x: np.ndarray, sr: int, stereo: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(x * 32767, -32768, 32767).astype(np.int16)
    if stereo:
        pcm = np.stack([pcm, pcm], axis=1)
    wavfile.write(str(path), sr, pcm)


def write_esc_dataset(root, clips_per_class_per_fold=2, sample_rates=(16000, 44100),
                      durations=(1.0, 2.5, 5.0), seed=0, extra_labels=("pig", "cow")) -> Path:
    """ESC-50 layout with the ten ESC-10 classes plus a few non-ESC-10 ones.

    Returns the path of ``meta/esc50.csv``.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows = []
    labels = list(ESC10_LABELS) + list(extra_labels)
    n = 0
    for li, label in enumerate(labels):
        for fold in range(1, 6):
            for k in range(clips_per_class_per_fold):
                sr = sample_rates[n % len(sample_rates)]
                dur = durations[n % len(durations)]
                name = f"{fold}-{100000 + n}-A-{li}.wav"
                _write_wav(root / "audio" / name, _tone(li, sr, dur, rng), sr, stereo=n % 3 == 0)
                rows.append({"filename": name, "fold": fold, "target": ESC50_LABELS.index(label),
                             "category": label, "esc10": str(label in ESC10_LABELS),
                             "src_file": 100000 + n, "take": "A"})
                n += 1
    meta = root / "meta" / "esc50.csv"
    meta.parent.mkdir(parents=True, exist_ok=True)
    with meta.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return meta


def write_us8k_dataset(root, clips_per_class_per_fold=1, sample_rates=(44100, 22050, 16000),
                       durations=(4.0, 2.5, 1.0), seed=0) -> Path:
    """UrbanSound8K layout (``audio/fold<k>/``); returns ``metadata/UrbanSound8K.csv``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows = []
    n = 0
    for li, label in enumerate(US8K_LABELS):
        for fold in range(1, 11):
            for k in range(clips_per_class_per_fold):
                sr = sample_rates[n % len(sample_rates)]
                dur = durations[n % len(durations)]
                name = f"{200000 + n}-{li}-0-{k}.wav"
                _write_wav(root / "audio" / f"fold{fold}" / name, _tone(li, sr, dur, rng), sr,
                           stereo=n % 4 == 0)
                rows.append({"slice_file_name": name, "fsID": 200000 + n, "start": 0.0, "end": dur,
                             "salience": 1, "fold": fold, "classID": li, "class": label})
                n += 1
    meta = root / "metadata" / "UrbanSound8K.csv"
    meta.parent.mkdir(parents=True, exist_ok=True)
    with meta.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return meta


def main(argv=None) -> int:
    import argparse

    ap = argparse.ArgumentParser(description="Write a tiny synthetic corpus in an official layout.")
    ap.add_argument("--out", default="data/synthetic")
    ap.add_argument("--layout", choices=["esc", "us8k"], default="esc")
    ap.add_argument("--clips", type=int, default=2, help="clips per class per fold")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    writer = write_esc_dataset if args.layout == "esc" else write_us8k_dataset
    print(writer(args.out, clips_per_class_per_fold=args.clips, seed=args.seed))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
