"""Experiment configuration: JSON in, validated dataclass out, canonical hash."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import _io
from .dataset import VALIDATION_FRACTION, DatasetKind
from .errors import ConfigInvalid, SchemaViolation
from .evaluation import Mode
from .features import IMAGE_SIZE, MelConfig, Normalization
from .model import BackboneSpec
from .ontology import sqrt_heuristic
from .training import Hyperparams

CACHE_ENV = "ECHO_CACHE_DIR"

_TOP_KEYS = {"dataset", "mode", "backbone", "p", "mel", "features", "hyperparams", "ontology_source",
             "ontology_file", "llm", "seeds", "folds", "validation_fraction", "data", "cache_dir", "run_dir"}
_BACKBONE_KEYS = {"name", "pretrained", "embedding_dim", "weights_path", "weights_sha256"}
_MEL_KEYS = set(MelConfig.__dataclass_fields__)
_FEATURE_KEYS = {"image_size", "normalization"}
_HP_KEYS = {"batch_size", "learning_rate", "epochs", "coarse_patience"}
_LLM_KEYS = {"url", "model", "max_retries", "timeout"}
_DATA_KEYS = {"metadata", "audio_root"}
# locations only; they never change results, so they stay out of the hash
_UNHASHED = ("data", "cache_dir", "run_dir")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetKind
    backbone: BackboneSpec
    mode: Mode
    p: int | None
    mel: MelConfig = MelConfig()
    image_size: int = IMAGE_SIZE
    normalization: Normalization = Normalization.MINMAX
    hyperparams: Hyperparams = Hyperparams()
    ontology_source: str = "FIXTURE"
    ontology_file: str | None = None
    llm: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)
    folds: tuple[int, ...] | None = None  # None means all
    validation_fraction: float = VALIDATION_FRACTION
    data: dict = field(default_factory=dict)
    cache_dir: str = "cache"
    run_dir: str = "runs"

    @property
    def fold_list(self) -> list[int]:
        return list(self.folds) if self.folds else list(range(1, self.dataset.num_folds + 1))

    def to_dict(self) -> dict:
        hp = self.hyperparams.to_dict()
        hp.pop("seed")
        return {
            "dataset": self.dataset.value,
            "mode": self.mode.value,
            "backbone": self.backbone.to_dict(),
            "p": self.p,
            "mel": self.mel.to_dict(),
            "features": {"image_size": self.image_size, "normalization": self.normalization.value},
            "hyperparams": hp,
            "ontology_source": self.ontology_source,
            "ontology_file": self.ontology_file,
            "llm": dict(self.llm),
            "seeds": list(self.seeds),
            "folds": list(self.folds) if self.folds else "all",
            "validation_fraction": self.validation_fraction,
            "data": dict(self.data),
            "cache_dir": self.cache_dir,
            "run_dir": self.run_dir,
        }

    @property
    def config_hash(self) -> str:
        d = self.to_dict()
        for k in _UNHASHED:
            d.pop(k)
        return _io.digest(d)

    @property
    def experiment_id(self) -> str:
        p = f"-p{self.p}" if self.p is not None else ""
        return f"{self.dataset.value}-{self.mode.value}-{self.backbone.name.value}{p}-{self.config_hash[:10]}"

    def with_p(self, p) -> "ExperimentConfig":
        return replace(self, p=resolve_p(p, self.dataset), mode=Mode.ECHO)


def resolve_p(p, dataset: DatasetKind) -> int:
    if isinstance(p, str):
        if p.strip().lower() != "sqrt":
            raise ConfigInvalid(f"p must be an integer or 'sqrt', got {p!r}")
        return sqrt_heuristic(dataset.num_classes)
    if isinstance(p, bool) or not isinstance(p, int):
        raise ConfigInvalid(f"p must be an integer or 'sqrt', got {p!r}")
    return p


def _unknown(section: str, given: dict, allowed: set, problems: list) -> None:
    for key in sorted(set(given) - allowed):
        problems.append(f"unknown key {section}{key!r}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate ``raw`` and fill defaults; every problem is reported in one SchemaViolation."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise SchemaViolation(["config must be a JSON object"])
    _unknown("", raw, _TOP_KEYS, problems)

    dataset = None
    if "dataset" not in raw:
        problems.append("missing required key 'dataset'")
    else:
        try:
            dataset = DatasetKind.parse(raw["dataset"])
            if dataset is DatasetKind.CUSTOM:
                raise ValueError("CUSTOM datasets cannot be configured from JSON")
        except ValueError as exc:
            problems.append(f"dataset: {exc}")

    backbone = None
    bb = raw.get("backbone", "TINY_CNN")
    if isinstance(bb, str):
        bb = {"name": bb}
    if not isinstance(bb, dict):
        problems.append("backbone must be a name or an object")
    else:
        _unknown("backbone.", bb, _BACKBONE_KEYS, problems)
        try:
            backbone = BackboneSpec(**{k: v for k, v in bb.items() if k in _BACKBONE_KEYS})
        except Exception as exc:
            problems.append(f"backbone: {exc}")

    p_raw = raw.get("p")
    mode_raw = raw.get("mode", "ECHO" if p_raw is not None else "BASELINE")
    mode = None
    try:
        mode = Mode(str(mode_raw).upper())
    except ValueError:
        problems.append(f"mode must be BASELINE or ECHO, got {mode_raw!r}")
    p = None
    if mode is Mode.BASELINE and p_raw is not None:
        problems.append("p must be absent when mode is BASELINE")
    elif mode is Mode.ECHO:
        if p_raw is None:
            problems.append("mode ECHO needs p (an integer or 'sqrt')")
        elif dataset is not None:
            try:
                p = resolve_p(p_raw, dataset)
                if not 2 <= p < dataset.num_classes:
                    problems.append(f"p={p} outside 2 <= p < {dataset.num_classes}")
            except Exception as exc:
                problems.append(f"p: {exc}")

    mel = MelConfig()
    if "mel" in raw:
        _unknown("mel.", raw["mel"], _MEL_KEYS, problems)
        try:
            mel = MelConfig(**{k: v for k, v in raw["mel"].items() if k in _MEL_KEYS})
        except (ConfigInvalid, TypeError) as exc:
            problems.append(f"mel: {exc}")

    feats = raw.get("features", {})
    _unknown("features.", feats, _FEATURE_KEYS, problems)
    image_size = feats.get("image_size", IMAGE_SIZE)
    if not isinstance(image_size, int) or image_size < 8:
        problems.append("features.image_size must be an integer >= 8")
    normalization = Normalization.MINMAX
    try:
        normalization = Normalization(str(feats.get("normalization", "MINMAX")).upper())
    except ValueError:
        problems.append("features.normalization must be MINMAX or ZSCORE")

    hp = Hyperparams()
    if "hyperparams" in raw:
        _unknown("hyperparams.", raw["hyperparams"], _HP_KEYS, problems)
        try:
            hp = Hyperparams(**{k: v for k, v in raw["hyperparams"].items() if k in _HP_KEYS})
        except (ValueError, TypeError) as exc:
            problems.append(f"hyperparams: {exc}")

    source = str(raw.get("ontology_source", "FIXTURE")).upper()
    if source not in ("FIXTURE", "LLM"):
        problems.append("ontology_source must be FIXTURE or LLM")
    llm = raw.get("llm", {})
    _unknown("llm.", llm, _LLM_KEYS, problems)
    if source == "LLM" and not raw.get("ontology_file") and not {"url", "model"} <= set(llm):
        problems.append("ontology_source LLM needs llm.url and llm.model")

    seeds = raw.get("seeds", [0])
    if not (isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds)):
        problems.append("seeds must be a non-empty list of integers")
        seeds = [0]
    folds_raw = raw.get("folds", "all")
    folds = None
    if folds_raw != "all":
        if not (isinstance(folds_raw, list) and folds_raw and all(isinstance(f, int) for f in folds_raw)):
            problems.append("folds must be 'all' or a list of fold numbers")
        elif dataset is not None and not all(1 <= f <= dataset.num_folds for f in folds_raw):
            problems.append(f"folds must lie in 1..{dataset.num_folds}")
        else:
            folds = tuple(sorted(set(folds_raw)))

    vf = raw.get("validation_fraction", VALIDATION_FRACTION)
    if not isinstance(vf, (int, float)) or not 0 < vf < 1:
        problems.append("validation_fraction must lie in (0, 1)")
    data = raw.get("data", {})
    _unknown("data.", data, _DATA_KEYS, problems)

    if problems:
        raise SchemaViolation(problems)
    return ExperimentConfig(
        dataset=dataset, backbone=backbone, mode=mode, p=p, mel=mel, image_size=image_size,
        normalization=normalization, hyperparams=hp, ontology_source=source,
        ontology_file=raw.get("ontology_file"), llm=dict(llm), seeds=tuple(seeds), folds=folds,
        validation_fraction=float(vf), data=dict(data),
        cache_dir=os.environ.get(CACHE_ENV) or raw.get("cache_dir", "cache"),
        run_dir=raw.get("run_dir", "runs"),
    )


def parse_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise SchemaViolation([f"{path}: not valid JSON ({exc})"]) from exc
    except OSError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc
    return config_from_dict(raw)
