"""Accuracy, cross-validation aggregation, report comparison, ablation grids and embedding export."""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DuplicateFold, IncomparableReports, LengthMismatch, MissingFold

_CENT = Decimal("0.01")


def pct2(value: float) -> Decimal:
    """Round a percentage half-up to 2 decimals (via its shortest repr, so 84.355 -> 84.36)."""
    return Decimal(repr(float(value))).quantize(_CENT, rounding=ROUND_HALF_UP)


def argmax_lowest(probs) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def accuracy(predictions, targets) -> float:
    pred = np.asarray(predictions).ravel()
    tgt = np.asarray(targets).ravel()
    if pred.shape != tgt.shape:
        raise LengthMismatch(f"{pred.size} predictions vs {tgt.size} targets")
    if pred.size == 0:
        raise LengthMismatch("accuracy of an empty set is undefined")
    return int((pred == tgt).sum()) / pred.size


@dataclass
class FoldResult:
    fold_index: int
    test_accuracy: float
    histories: dict = field(default_factory=dict)  # stage -> TrainHistory.to_dict()
    checkpoint_refs: dict = field(default_factory=dict)
    seed: int = 0
    num_test: int = 0

    def to_dict(self) -> dict:
        return {"fold": self.fold_index, "seed": self.seed, "test_accuracy": self.test_accuracy,
                "num_test": self.num_test, "histories": self.histories,
                "checkpoints": self.checkpoint_refs}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(d["fold"], d["test_accuracy"], d.get("histories", {}), d.get("checkpoints", {}),
                   d.get("seed", 0), d.get("num_test", 0))


_REPORT_CORE = {"dataset", "mode", "backbone", "p", "folds", "mean_accuracy_pct"}


class Mode(str, enum.Enum):
    BASELINE = "BASELINE"
    ECHO = "ECHO"


@dataclass
class MetricsReport:
    dataset: str
    mode: Mode
    backbone: str
    p: int | None
    fold_results: list[FoldResult]
    mean_accuracy_pct: Decimal
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "mode": Mode(self.mode).value, "backbone": self.backbone,
                "p": self.p, "folds": [f.to_dict() for f in self.fold_results],
                "mean_accuracy_pct": float(self.mean_accuracy_pct),
                **{k: v for k, v in self.extra.items() if k not in _REPORT_CORE}}

    def save(self, path) -> None:
        from ._io import atomic_write_json
        atomic_write_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["dataset"], Mode(d["mode"]), d["backbone"], d.get("p"),
                   [FoldResult.from_dict(f) for f in d.get("folds", [])],
                   pct2(d["mean_accuracy_pct"]), {k: v for k, v in d.items() if k not in _REPORT_CORE})

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def render(self) -> str:
        p = "" if self.p is None else f", p={self.p}"
        rows = [f"| {f.fold_index} | {f.seed} | {pct2(100 * f.test_accuracy)} |" for f in self.fold_results]
        return "\n".join([
            f"### {self.dataset} / {self.backbone} / {Mode(self.mode).value}{p}",
            "",
            "| fold | seed | accuracy (%) |",
            "|---:|---:|---:|",
            *rows,
            "",
            f"**mean: {self.mean_accuracy_pct}**",
        ])


def check_folds(results: Sequence[FoldResult], expected_folds) -> None:
    seen = [r.fold_index for r in results]
    dupes = sorted({f for f in seen if seen.count(f) > 1})
    if dupes:
        raise DuplicateFold(f"fold(s) {dupes} reported more than once")
    missing = sorted(set(expected_folds) - set(seen))
    if missing:
        raise MissingFold(f"fold(s) {missing} missing")
    extra = sorted(set(seen) - set(expected_folds))
    if extra:
        raise DuplicateFold(f"unexpected fold(s) {extra}")


def aggregate(results: Sequence[FoldResult], num_folds: int | None = None, *, expected_folds=None,
              dataset: str = "", mode: Mode | str = Mode.BASELINE, backbone: str = "",
              p: int | None = None) -> MetricsReport:
    """Unweighted mean over folds, as a percentage rounded half-up to 2 decimals.

    The fold set must be complete: ``1..num_folds`` or ``expected_folds``.
    """
    if expected_folds is None:
        expected_folds = range(1, (num_folds or len(results)) + 1)
    check_folds(results, expected_folds)
    mean = math.fsum(r.test_accuracy for r in results) / len(results)
    return MetricsReport(dataset, Mode(mode), backbone, p, sorted(results, key=lambda r: r.fold_index),
                         pct2(100.0 * mean))


@dataclass(frozen=True)
class Delta:
    dataset: str
    backbone: str
    baseline_pct: Decimal
    echo_pct: Decimal

    @property
    def delta(self) -> Decimal:
        return self.echo_pct - self.baseline_pct

    @property
    def negative(self) -> bool:
        return self.delta < 0

    def render(self) -> str:
        return f"{self.delta:+.2f}"


def compare(baseline: MetricsReport, echo: MetricsReport) -> Delta:
    if baseline.dataset != echo.dataset or baseline.backbone != echo.backbone:
        raise IncomparableReports(
            f"{baseline.dataset}/{baseline.backbone} vs {echo.dataset}/{echo.backbone}")
    return Delta(baseline.dataset, baseline.backbone, pct2(baseline.mean_accuracy_pct),
                 pct2(echo.mean_accuracy_pct))


def render_deltas(deltas: Sequence[Delta]) -> str:
    lines = ["| dataset | backbone | baseline | ECHO | delta |", "|---|---|---:|---:|---:|"]
    for d in deltas:
        flag = " (worse)" if d.negative else ""
        lines.append(f"| {d.dataset} | {d.backbone} | {d.baseline_pct} | {d.echo_pct} | {d.render()}{flag} |")
    return "\n".join(lines)


_NUM_CLASSES = {"US8K": 10, "ESC10": 10, "ESC50": 50}


@dataclass
class AblationGrid:
    """Rows are backbones; each dataset contributes a block of p columns."""

    cells: dict  # (backbone, dataset, p) -> Decimal | None (None marks a failed cell)
    num_classes: dict = field(default_factory=dict)

    @property
    def backbones(self) -> list[str]:
        return sorted({b for b, _, _ in self.cells})

    @property
    def datasets(self) -> list[str]:
        return sorted({d for _, d, _ in self.cells})

    def p_values(self, dataset: str) -> list[int]:
        return sorted({p for _, d, p in self.cells if d == dataset})

    def best_p(self, backbone: str, dataset: str) -> int | None:
        row = {p: v for (b, d, p), v in self.cells.items() if b == backbone and d == dataset and v is not None}
        if not row:
            return None
        return max(sorted(row), key=lambda p: row[p])

    def is_sqrt_column(self, dataset: str, p: int) -> bool:
        n = self.num_classes.get(dataset, _NUM_CLASSES.get(dataset))
        return n is not None and math.isqrt(n) == p

    def render(self) -> str:
        header, rule = ["model"], ["---"]
        for ds in self.datasets:
            for p in self.p_values(ds):
                label = f"{p}(√n)" if self.is_sqrt_column(ds, p) else str(p)
                header.append(f"{ds} {label}")
                rule.append("---:")
        lines = ["| " + " | ".join(header) + " |", "| " + " | ".join(rule) + " |"]
        for bb in self.backbones:
            row = [bb]
            for ds in self.datasets:
                best = self.best_p(bb, ds)
                for p in self.p_values(ds):
                    key = (bb, ds, p)
                    if key not in self.cells:
                        row.append("")
                    elif self.cells[key] is None:
                        row.append("FAILED")
                    else:
                        text = f"{self.cells[key]}"
                        row.append(f"**{text}**" if p == best else text)
            lines.append("| " + " | ".join(row) + " |")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"cells": [{"backbone": b, "dataset": d, "p": p,
                           "mean_accuracy_pct": None if v is None else float(v)}
                          for (b, d, p), v in sorted(self.cells.items())]}


def ablation_grid(results: Mapping, num_classes: Mapping | None = None) -> AblationGrid:
    """Build the grid from ``(backbone, dataset, p) -> MetricsReport | number | None``."""
    if not results:
        raise ValueError("ablation grid needs at least one cell")
    cells = {}
    for key, value in results.items():
        if value is None:
            cells[key] = None
        elif isinstance(value, MetricsReport):
            cells[key] = pct2(value.mean_accuracy_pct)
        else:
            cells[key] = pct2(value)
    return AblationGrid(cells, dict(num_classes or {}))


# --- embeddings ---

class Tap(str, enum.Enum):
    HEAD_256 = "HEAD_256"
    BACKBONE = "BACKBONE"


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: list[str]
    tap: Tap

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.labels):
            raise LengthMismatch(f"{self.vectors.shape[0]} vectors for {len(self.labels)} labels")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors contain non-finite values")


def export_embeddings(model, records, tap: Tap | str, features, batch_size=64) -> EmbeddingSet:
    import torch

    tap = Tap(tap)
    model.eval()
    chunks = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            batch = torch.stack([features[r.clip_id] for r in records[i:i + batch_size]])
            out = model(batch)
            chunks.append((out.hidden if tap is Tap.HEAD_256 else out.embedding).double().numpy())
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, 0))
    return EmbeddingSet(vectors, [r.label for r in records], tap)


def write_embeddings_csv(e: EmbeddingSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"v{i}" for i in range(e.vectors.shape[1]))])
        for label, row in zip(e.labels, e.vectors):
            w.writerow([label, *(repr(float(v)) for v in row)])


def read_embeddings_csv(path, tap: Tap | str = Tap.HEAD_256) -> EmbeddingSet:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "label":
        raise ValueError(f"{path}: expected a 'label,v0,...' header")
    labels = [r[0] for r in body]
    vectors = np.array([[float(x) for x in r[1:]] for r in body], dtype=np.float64).reshape(len(body), -1)
    return EmbeddingSet(vectors, labels, Tap(tap))


def write_tsne_csv(coords: np.ndarray, labels, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "x", "y"])
        for label, (x, y) in zip(labels, coords):
            w.writerow([label, repr(float(x)), repr(float(y))])
