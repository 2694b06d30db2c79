"""Experiment orchestration: fold x seed cells, the run ledger, reports and ablation grids.

Layout under ``<run_dir>/<experiment_id>/``::

    config.json  ledger.json  ontology.json  report.json  report.md
    fold-<k>/seed-<s>/{result.json, history.json, batches.log, *.ckpt}
"""
from __future__ import annotations

import enum
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Mapping

from filelock import FileLock

from . import _io
from .config import ExperimentConfig
from .dataset import Manifest, load_manifest, resolve_folds
from .errors import ConfigHashMismatch, ConfigInvalid, EchoError, OntologyError
from .evaluation import FoldResult, MetricsReport, Mode, ablation_grid, aggregate, pct2
from .features import FeaturePipeline
from .model import read_checkpoint
from .ontology import (
    API_KEY_ENV,
    ChatCompletionClient,
    Ontology,
    check_matches,
    generate_ontology,
    load_ontology_file,
    save_ontology_file,
    validate_ontology,
)
from .training import RunContext, run_baseline, run_echo

log = logging.getLogger(__name__)


class CellStatus(str, enum.Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"


_NEXT = {
    CellStatus.PENDING: {CellStatus.RUNNING},
    CellStatus.RUNNING: {CellStatus.DONE, CellStatus.FAILED},
    CellStatus.DONE: set(),
    CellStatus.FAILED: set(),
}


def cell_key(fold: int, seed: int) -> str:
    return f"fold-{fold}/seed-{seed}"


class RunLedger:
    """Per-(fold, seed) status, persisted as JSON and updated under a file lock.

    Each cell keeps a list of attempts.  Within one attempt the status only
    moves PENDING -> RUNNING -> DONE/FAILED.  Starting a cell whose latest
    attempt FAILED, or was left RUNNING by a killed process, opens a new
    attempt; a DONE cell is never restarted.
    """

    def __init__(self, path, experiment_id: str):
        self.path = Path(path)
        self.experiment_id = experiment_id
        self._lock = FileLock(str(self.path) + ".lock")

    def _read(self) -> dict:
        if self.path.exists():
            return json.loads(self.path.read_text(encoding="utf-8"))
        return {"experiment_id": self.experiment_id, "cells": {}}

    def _update(self, fn):
        with self._lock:
            doc = self._read()
            out = fn(doc)
            _io.atomic_write_json(self.path, doc)
            return out

    def snapshot(self) -> dict:
        with self._lock:
            return self._read()

    def status(self, fold: int, seed: int) -> CellStatus:
        cell = self.snapshot()["cells"].get(cell_key(fold, seed))
        if not cell:
            return CellStatus.PENDING
        return CellStatus(cell["attempts"][-1]["status"])

    def register(self, cells) -> None:
        def fn(doc):
            for fold, seed in cells:
                doc["cells"].setdefault(cell_key(fold, seed), {
                    "fold": fold, "seed": seed,
                    "attempts": [{"status": CellStatus.PENDING.value}], "artifacts": {}})
        self._update(fn)

    def _move(self, fold, seed, new: CellStatus, **info):
        def fn(doc):
            cell = doc["cells"].setdefault(cell_key(fold, seed), {
                "fold": fold, "seed": seed, "attempts": [{"status": "PENDING"}], "artifacts": {}})
            current = CellStatus(cell["attempts"][-1]["status"])
            if new is CellStatus.RUNNING and current in (CellStatus.FAILED, CellStatus.RUNNING):
                cell["attempts"].append({"status": CellStatus.PENDING.value})
                current = CellStatus.PENDING
            if new not in _NEXT[current]:
                raise ValueError(f"ledger: {cell_key(fold, seed)} cannot go {current.value} -> {new.value}")
            cell["attempts"][-1]["status"] = new.value
            if "error" in info:
                cell["attempts"][-1]["error"] = info["error"]
            if "artifacts" in info:
                cell["artifacts"] = info["artifacts"]
        self._update(fn)

    def start(self, fold, seed):
        self._move(fold, seed, CellStatus.RUNNING)

    def done(self, fold, seed, artifacts: dict):
        self._move(fold, seed, CellStatus.DONE, artifacts=artifacts)

    def failed(self, fold, seed, error: str):
        self._move(fold, seed, CellStatus.FAILED, error=error)


def experiment_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.run_dir) / cfg.experiment_id


def load_dataset(cfg: ExperimentConfig) -> Manifest:
    meta = cfg.data.get("metadata")
    if not meta:
        raise ConfigInvalid("config needs data.metadata (path to the dataset's metadata CSV)")
    return load_manifest(meta, cfg.dataset, cfg.data.get("audio_root"))


def resolve_ontology(cfg: ExperimentConfig, labels, *, fixture_only=False, provider=None,
                     log_dir=None) -> Ontology:
    """Ontology for an ECHO config: explicit file, frozen fixture, or a live LLM request."""
    if cfg.ontology_file:
        o = load_ontology_file(cfg.ontology_file)
        check_matches(o, labels)
        report = validate_ontology(o, labels)
        if not report.ok or o.p != cfg.p:
            raise OntologyError(f"{cfg.ontology_file}: not a valid {cfg.p}-way grouping "
                                f"({'; '.join(map(str, report.violations)) or f'p={o.p}'})")
        return o
    if cfg.ontology_source == "FIXTURE" or fixture_only:
        return generate_ontology(None, labels, cfg.p, dataset=cfg.dataset, fixture_only=True)
    client = provider
    if client is None:
        client = ChatCompletionClient(cfg.llm["url"], cfg.llm["model"], os.environ.get(API_KEY_ENV),
                                      log_dir=log_dir, timeout=cfg.llm.get("timeout", 60.0))
    return generate_ontology(client, labels, cfg.p, cfg.llm.get("max_retries", 3), dataset=cfg.dataset)


def _relativize(refs: Mapping[str, str], root: Path) -> dict:
    return {k: os.path.relpath(v, root) for k, v in refs.items()}


def _check_resumed(res: FoldResult, exp: Path, config_hash: str, strict: bool) -> None:
    """A reused cell's checkpoints must come from this exact config."""
    for ref in res.checkpoint_refs.values():
        actual = read_checkpoint(exp / ref).meta.config_hash
        if actual != config_hash:
            msg = f"{exp / ref}: trained under config {actual[:12]}, resuming {config_hash[:12]}"
            if strict:
                raise ConfigHashMismatch(msg)
            warnings.warn(msg, stacklevel=3)


def combine_seeds(cfg: ExperimentConfig, per_seed: Mapping[int, MetricsReport]) -> MetricsReport:
    """One report over all seeds: mean of the per-seed means, plus their spread."""
    seeds = sorted(per_seed)
    means = {s: per_seed[s].mean_accuracy_pct for s in seeds}
    fold_results = [f for s in seeds for f in per_seed[s].fold_results]
    mean = math.fsum(float(m) for m in means.values()) / len(means)
    extra = {
        "experiment_id": cfg.experiment_id,
        "config_hash": cfg.config_hash,
        "seeds": seeds,
        "fold_indices": cfg.fold_list,
        "per_seed_mean_pct": {str(s): float(m) for s, m in means.items()},
        "spread_pct": {"min": float(min(means.values())), "max": float(max(means.values()))},
    }
    return MetricsReport(cfg.dataset.value, cfg.mode, cfg.backbone.name.value, cfg.p, fold_results,
                         pct2(mean), extra)


def render_report(report: MetricsReport) -> str:
    text = report.render()
    spread = report.extra.get("spread_pct")
    if spread and len(report.extra.get("seeds", [])) > 1:
        text += f" (per-seed min {pct2(spread['min'])}, max {pct2(spread['max'])})"
    return text + "\n"


def run_experiment(cfg: ExperimentConfig, *, jobs: int = 1, fixture_only: bool = False,
                   strict: bool = False, provider=None, manifest: Manifest | None = None,
                   features=None, ontology: Ontology | None = None) -> MetricsReport:
    """Run every requested (fold, seed) cell, skipping ones the ledger has as DONE.

    ``manifest``, ``features`` and ``ontology`` may be injected (tests and
    synthetic data); otherwise they come from the config.  A failing cell is
    marked FAILED and its exception re-raised once the other cells finish.
    With ``strict``, a reused cell whose checkpoints carry another config
    hash raises ConfigHashMismatch instead of warning.
    """
    exp = experiment_dir(cfg)
    exp.mkdir(parents=True, exist_ok=True)
    _io.atomic_write_json(exp / "config.json", cfg.to_dict())
    manifest = manifest if manifest is not None else load_dataset(cfg)
    if features is None:
        features = FeaturePipeline(manifest, cfg.mel, cfg.image_size, cfg.normalization,
                                   Path(cfg.cache_dir))

    if cfg.mode is Mode.ECHO and ontology is None:
        saved = exp / "ontology.json"
        if saved.exists():
            # a resumed run keeps the grouping the earlier cells were trained with
            ontology = load_ontology_file(saved)
        else:
            ontology = resolve_ontology(cfg, manifest.label_set, fixture_only=fixture_only,
                                        provider=provider, log_dir=exp / "llm")
    if ontology is not None:
        save_ontology_file(ontology, exp / "ontology.json")

    ledger = RunLedger(exp / "ledger.json", cfg.experiment_id)
    folds = cfg.fold_list
    cells = [(f, s) for s in cfg.seeds for f in folds]
    ledger.register(cells)
    splits = {s: {sp.test_fold: sp for sp in resolve_folds(manifest, s, cfg.validation_fraction)}
              for s in cfg.seeds}

    def run_cell(fold: int, seed: int) -> FoldResult:
        cell_dir = exp / cell_key(fold, seed)
        result_path = cell_dir / "result.json"
        if ledger.status(fold, seed) is CellStatus.DONE and result_path.exists():
            log.info("%s: already done, skipping", cell_key(fold, seed))
            res = FoldResult.from_dict(json.loads(result_path.read_text(encoding="utf-8")))
            _check_resumed(res, exp, cfg.config_hash, strict)
            return res
        ledger.start(fold, seed)
        try:
            ctx = RunContext(cfg.backbone, replace(cfg.hyperparams, seed=seed), features, cell_dir,
                             cfg.config_hash)
            split = splits[seed][fold]
            if cfg.mode is Mode.ECHO:
                res = run_echo(split, manifest, ontology, ctx)
            else:
                res = run_baseline(split, manifest, ctx)
            res.checkpoint_refs = _relativize(res.checkpoint_refs, exp)
            _io.atomic_write_json(result_path, res.to_dict())
        except BaseException as exc:
            ledger.failed(fold, seed, f"{type(exc).__name__}: {exc}")
            raise
        ledger.done(fold, seed, {"result": os.path.relpath(result_path, exp), **res.checkpoint_refs})
        log.info("%s: test accuracy %.4f", cell_key(fold, seed), res.test_accuracy)
        return res

    results: dict[tuple[int, int], FoldResult] = {}
    errors: list[BaseException] = []
    if jobs <= 1:
        for f, s in cells:
            results[(f, s)] = run_cell(f, s)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_cell, f, s): (f, s) for f, s in cells}
            for fut, key in futures.items():
                try:
                    results[key] = fut.result()
                except BaseException as exc:
                    errors.append(exc)
        if errors:
            raise errors[0]

    per_seed = {
        s: aggregate([results[(f, s)] for f in folds], expected_folds=folds, dataset=cfg.dataset.value,
                     mode=cfg.mode, backbone=cfg.backbone.name.value, p=cfg.p)
        for s in cfg.seeds
    }
    report = combine_seeds(cfg, per_seed)
    report.save(exp / "report.json")
    _io.atomic_write_bytes(exp / "report.md", render_report(report).encode("utf-8"))
    return report


def check_p_values(cfg: ExperimentConfig, p_values) -> list[int]:
    """Resolve ``"sqrt"`` entries and enforce 2 <= p < n for every value, before any training."""
    from .config import resolve_p

    n = cfg.dataset.num_classes
    resolved = [resolve_p(p, cfg.dataset) for p in p_values]
    bad = [p for p in resolved if not 2 <= p < n]
    if not resolved or bad:
        raise ConfigInvalid(f"ablation p values must satisfy 2 <= p < {n}; offending: {bad or 'none given'}")
    return sorted(set(resolved))


def run_ablation(base_cfg: ExperimentConfig, p_values, **kwargs):
    """One ECHO experiment per ``p``; failed cells show up as FAILED in the grid.

    Returns ``(grid, reports)`` where ``reports`` maps p to its MetricsReport
    (or to the exception that stopped it).
    """
    ps = check_p_values(base_cfg, p_values)
    cells, reports = {}, {}
    for p in ps:
        cfg = base_cfg.with_p(p)
        key = (cfg.backbone.name.value, cfg.dataset.value, p)
        try:
            reports[p] = run_experiment(cfg, **kwargs)
            cells[key] = reports[p]
        except EchoError as exc:
            log.error("ablation p=%d failed: %s", p, exc)
            reports[p] = exc
            cells[key] = None
    grid = ablation_grid(cells, {base_cfg.dataset.value: base_cfg.dataset.num_classes})
    return grid, reports
