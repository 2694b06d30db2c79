"""Loss, the epoch loop with best-validation model selection, and the fold-level run modes.

A fold run is either a baseline (fine labels only) or the two-stage
coarse-to-fine run: train a ``p``-class head on parent labels, swap the head
for an ``n``-class one keeping the backbone, train again on fine labels.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import _io
from .dataset import ClipRecord, FoldSplit, Manifest
from .errors import EmptySplit, NonFiniteLoss, ShapeMismatch
from .evaluation import FoldResult, accuracy, argmax_lowest
from .model import BackboneSpec, CheckpointMeta, EchoNet, HeadSpec, Stage, build_model, save_checkpoint, swap_head
from .ontology import Ontology, check_matches, relabel

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 32
    learning_rate: float = 1e-4
    epochs: int = 50
    seed: int = 0
    # early stop for the coarse stage only; None disables
    coarse_patience: int | None = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or not self.learning_rate > 0:
            raise ValueError(f"invalid hyperparameters {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(predicted, target) -> float:
    """Mean over rows of -sum_j y_ij log(max(yhat_ij, 1e-12)); ``target`` is one-hot."""
    yhat = np.asarray(predicted, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if yhat.shape != y.shape or yhat.ndim != 2 or yhat.shape[0] == 0:
        raise ShapeMismatch(f"predicted {yhat.shape} vs target {y.shape}")
    return float(-(y * np.log(np.maximum(yhat, PROB_FLOOR))).sum() / yhat.shape[0])


def cross_entropy_torch(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Same loss on a probability batch and integer class targets."""
    if probs.ndim != 2 or targets.shape != probs.shape[:1]:
        raise ShapeMismatch(f"probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    picked = probs.gather(1, targets[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def best_epoch_of(val_losses: Sequence[float]) -> int:
    """1-based epoch of the first minimum."""
    best = min(range(len(val_losses)), key=lambda i: (val_losses[i], i))
    return best + 1


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def epochs_to_reach(self, val_acc: float) -> int | None:
        for i, a in enumerate(self.val_acc, start=1):
            if a >= val_acc:
                return i
        return None

    def to_dict(self) -> dict:
        return {
            "epochs": [{"train_loss": t, "val_loss": v, "val_acc": a}
                       for t, v, a in zip(self.train_loss, self.val_loss, self.val_acc)],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        ep = d["epochs"]
        return cls([e["train_loss"] for e in ep], [e["val_loss"] for e in ep],
                   [e["val_acc"] for e in ep], d["best_epoch"], d.get("stopped_early", False))


def _batch(features: Mapping[str, torch.Tensor], records: Sequence[ClipRecord]) -> torch.Tensor:
    return torch.stack([features[r.clip_id] for r in records])


def predict(model: EchoNet, records: Sequence[ClipRecord], features, batch_size=64) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            out.append(model(_batch(features, records[i:i + batch_size])).probs.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model: EchoNet, records: Sequence[ClipRecord], label_space: Sequence[str],
             features, batch_size=64) -> tuple[float, float]:
    """(mean loss, accuracy) over ``records``."""
    index = {lab: i for i, lab in enumerate(label_space)}
    probs = predict(model, records, features, batch_size)
    targets = np.array([index[r.label] for r in records])
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(targets)), targets] = 1.0
    return cross_entropy(probs, onehot), accuracy(argmax_lowest(probs), targets)


def train_stage(model: EchoNet, train: Sequence[ClipRecord], val: Sequence[ClipRecord],
                label_space: Sequence[str], hp: Hyperparams, features, *,
                patience: int | None = None, audit=None, stage: str = "") -> tuple[EchoNet, TrainHistory]:
    """Mini-batch Adam for ``hp.epochs`` epochs; returns the best-validation-loss snapshot.

    Epoch ``e`` (0-based) shuffles with seed ``hp.seed + e``.  ``audit``, if
    given, receives one line per batch listing its clip ids.
    """
    if not train:
        raise EmptySplit(f"{stage or 'stage'}: no training records")
    if not val:
        raise EmptySplit(f"{stage or 'stage'}: no validation records")
    if model.num_classes != len(label_space):
        raise ShapeMismatch(f"head has {model.num_classes} outputs for {len(label_space)} labels")
    index = {lab: i for i, lab in enumerate(label_space)}
    unknown = {r.label for r in (*train, *val)} - set(index)
    if unknown:
        raise ValueError(f"labels outside label space: {sorted(unknown)}")
    targets = torch.tensor([index[r.label] for r in train])

    opt = torch.optim.Adam(model.parameters(), lr=hp.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    hist = TrainHistory()
    best_state, best_loss, since_best = None, math.inf, 0
    for epoch in range(hp.epochs):
        model.train()
        order = np.random.default_rng(hp.seed + epoch).permutation(len(train))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), hp.batch_size)):
            idx = order[start:start + hp.batch_size]
            recs = [train[i] for i in idx]
            if audit is not None:
                audit.write(f"{stage}\t{epoch + 1}\t{b}\t{','.join(r.clip_id for r in recs)}\n")
            loss = cross_entropy_torch(model(_batch(features, recs)).probs, targets[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"{stage}: loss {loss.item()} at epoch {epoch + 1}, batch {b} "
                                    f"(clips {[r.clip_id for r in recs][:8]})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        val_loss, val_acc = evaluate(model, val, label_space, features, hp.batch_size)
        hist.train_loss.append(total / seen)
        hist.val_loss.append(val_loss)
        hist.val_acc.append(val_acc)
        log.debug("%s epoch %d train %.4f val %.4f acc %.3f", stage, epoch + 1, total / seen, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, since_best = val_loss, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if patience is not None and since_best >= patience:
                hist.stopped_early = True
                break
    hist.best_epoch = best_epoch_of(hist.val_loss)
    model.load_state_dict(best_state)
    model.eval()
    return model, hist


@dataclass
class RunContext:
    """What a fold run needs besides the split: model spec, hyperparameters, features, output dir."""

    backbone: BackboneSpec
    hp: Hyperparams
    features: Mapping[str, torch.Tensor]
    run_dir: Path | None = None
    config_hash: str = ""


class _Audit:
    def __init__(self, path: Path | None):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, line):
        if self._fh:
            self._fh.write(line)

    def close(self):
        if self._fh:
            self._fh.close()


def _prepare(split: FoldSplit, manifest: Manifest):
    train, val, test = split.partition(manifest)
    for name, recs in (("train", train), ("validation", val), ("test", test)):
        if not recs:
            raise EmptySplit(f"fold {split.test_fold}: empty {name} split")
    return train, val, test


def _test_accuracy(model, test, label_space, features, batch_size):
    index = {lab: i for i, lab in enumerate(label_space)}
    probs = predict(model, test, features, batch_size)
    return accuracy(argmax_lowest(probs), [index[r.label] for r in test])


def _write_history(run_dir: Path | None, histories: dict[str, TrainHistory]) -> None:
    if run_dir is not None:
        _io.atomic_write_json(run_dir / "history.json", {k: h.to_dict() for k, h in histories.items()})


def run_baseline(split: FoldSplit, manifest: Manifest, ctx: RunContext) -> FoldResult:
    train, val, test = _prepare(split, manifest)
    run_dir = Path(ctx.run_dir) if ctx.run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(ctx.backbone, HeadSpec(manifest.n), ctx.hp.seed)
    audit = _Audit(run_dir / "batches.log" if run_dir else None)
    try:
        model, hist = train_stage(model, train, val, manifest.label_set, ctx.hp, ctx.features,
                                  audit=audit, stage="baseline")
    finally:
        audit.close()
    refs = {}
    if run_dir:
        refs["baseline"] = str(save_checkpoint(model, run_dir / "baseline.ckpt", CheckpointMeta(
            Stage.BASELINE, ctx.backbone.to_dict(), manifest.n, ctx.config_hash,
            list(manifest.label_set), None, hist.best_epoch, hist.best_val_loss, ctx.hp.seed)))
    _write_history(run_dir, {"baseline": hist})
    acc = _test_accuracy(model, test, manifest.label_set, ctx.features, ctx.hp.batch_size)
    return FoldResult(split.test_fold, acc, {"baseline": hist.to_dict()}, refs,
                      seed=ctx.hp.seed, num_test=len(test))


def run_echo(split: FoldSplit, manifest: Manifest, ontology: Ontology, ctx: RunContext,
             on_transition: Callable[[EchoNet, EchoNet], None] | None = None) -> FoldResult:
    """Coarse pretext stage, head swap, fine stage, test-fold evaluation.

    ``on_transition(coarse_model, fine_model)`` is called right after the
    head swap, before any fine-stage update.
    """
    check_matches(ontology, manifest.label_set)
    coarse_manifest = relabel(manifest, ontology)
    train, val, test = _prepare(split, manifest)
    to_coarse = {r.clip_id: r for r in coarse_manifest.records}
    c_train = [to_coarse[r.clip_id] for r in train]
    c_val = [to_coarse[r.clip_id] for r in val]

    run_dir = Path(ctx.run_dir) if ctx.run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
    audit = _Audit(run_dir / "batches.log" if run_dir else None)
    refs = {}
    try:
        coarse = build_model(ctx.backbone, HeadSpec(ontology.p), ctx.hp.seed)
        coarse, c_hist = train_stage(coarse, c_train, c_val, coarse_manifest.label_set, ctx.hp,
                                     ctx.features, patience=ctx.hp.coarse_patience, audit=audit,
                                     stage="coarse")
        if run_dir:
            refs["coarse"] = str(save_checkpoint(coarse, run_dir / "coarse.ckpt", CheckpointMeta(
                Stage.COARSE, ctx.backbone.to_dict(), ontology.p, ctx.config_hash,
                list(coarse_manifest.label_set), ontology.hash, c_hist.best_epoch,
                c_hist.best_val_loss, ctx.hp.seed)))
        fine = swap_head(coarse, manifest.n, ctx.hp.seed)
        if on_transition is not None:
            on_transition(coarse, fine)
        fine, f_hist = train_stage(fine, train, val, manifest.label_set, ctx.hp, ctx.features,
                                   audit=audit, stage="fine")
    finally:
        audit.close()
    if run_dir:
        refs["fine"] = str(save_checkpoint(fine, run_dir / "fine.ckpt", CheckpointMeta(
            Stage.FINE, ctx.backbone.to_dict(), manifest.n, ctx.config_hash,
            list(manifest.label_set), ontology.hash, f_hist.best_epoch, f_hist.best_val_loss,
            ctx.hp.seed)))
    _write_history(run_dir, {"coarse": c_hist, "fine": f_hist})
    acc = _test_accuracy(fine, test, manifest.label_set, ctx.features, ctx.hp.batch_size)
    return FoldResult(split.test_fold, acc, {"coarse": c_hist.to_dict(), "fine": f_hist.to_dict()},
                      refs, seed=ctx.hp.seed, num_test=len(test))
