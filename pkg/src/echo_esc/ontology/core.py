"""Ontology value type, validation and relabeling."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .. import _io
from ..dataset import DatasetKind, Manifest, relabel_records
from ..errors import ClassCountTooSmall, OntologyGenerationFailed, OntologyMismatch, UnassignedLabel

MIN_CLASSES = 4


class OntologySource(str, enum.Enum):
    LLM = "LLM"
    FIXTURE = "FIXTURE"
    MANUAL = "MANUAL"


class ViolationCode(str, enum.Enum):
    PARTITION = "a"        # every fine label assigned to exactly one parent, nothing unknown
    PARENT_COUNT = "b"     # number of parents equals p
    EMPTY_PARENT = "c"
    PARENT_BOUNDS = "d"    # 2 <= p < n
    TOO_FEW_CLASSES = "e"  # n >= 4


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    detail: str

    def __str__(self):
        return f"({self.code.value}) {self.detail}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def codes(self) -> set[ViolationCode]:
        return {v.code for v in self.violations}

    def __bool__(self):
        return self.ok


@dataclass(frozen=True)
class Ontology:
    """Grouping of fine labels under ``p`` named parents.

    Construction does not validate, so malformed groupings can be
    represented and reported on; use :func:`validate_ontology`.
    """

    parents: dict[str, tuple[str, ...]]
    p: int
    source: OntologySource = OntologySource.MANUAL
    dataset: str | None = None
    provenance: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def parent_labels(self) -> tuple[str, ...]:
        return tuple(self.parents)

    @property
    def assignment(self) -> dict[str, str]:
        out = {}
        for parent, children in self.parents.items():
            for child in children:
                out.setdefault(child, parent)
        return out

    @property
    def n(self) -> int:
        return len({c for children in self.parents.values() for c in children})

    @property
    def hash(self) -> str:
        return _io.digest({
            "parent_labels": list(self.parents),
            "parents": {k: sorted(v) for k, v in self.parents.items()},
        })

    def to_dict(self) -> dict:
        doc = {"dataset": self.dataset, "p": self.p, "source": self.source.value,
               "parents": {k: list(v) for k, v in self.parents.items()}}
        if self.provenance:
            doc["provenance"] = self.provenance
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Ontology":
        parents = {str(k): tuple(v) for k, v in doc["parents"].items()}
        return cls(parents=parents, p=int(doc.get("p", len(parents))),
                   source=OntologySource(doc.get("source", "MANUAL")),
                   dataset=doc.get("dataset"), provenance=doc.get("provenance", ""))


def sqrt_heuristic(n: int) -> int:
    """Number of parents to use for ``n`` fine classes: floor(sqrt(n))."""
    if n < MIN_CLASSES:
        raise ClassCountTooSmall(f"{n} classes: coarse grouping needs at least {MIN_CLASSES}")
    return math.isqrt(n)


def validate_ontology(o: Ontology, labels) -> ValidationReport:
    labels = list(labels)
    n = len(labels)
    known = set(labels)
    found: list[Violation] = []

    seen: dict[str, str] = {}
    for parent, children in o.parents.items():
        for child in children:
            if child not in known:
                found.append(Violation(ViolationCode.PARTITION, f"{child!r} under {parent!r} is not a dataset label"))
            elif child in seen:
                found.append(Violation(ViolationCode.PARTITION,
                                       f"{child!r} assigned to both {seen[child]!r} and {parent!r}"))
            else:
                seen[child] = parent
    for label in labels:
        if label not in seen:
            found.append(Violation(ViolationCode.PARTITION, f"{label!r} has no parent"))

    if len(o.parents) != o.p:
        found.append(Violation(ViolationCode.PARENT_COUNT, f"{len(o.parents)} parents listed, p={o.p}"))
    for parent, children in o.parents.items():
        if not children:
            found.append(Violation(ViolationCode.EMPTY_PARENT, f"{parent!r} has no children"))
    if not 2 <= o.p < n:
        found.append(Violation(ViolationCode.PARENT_BOUNDS, f"p={o.p} outside 2 <= p < n={n}"))
    if n < MIN_CLASSES:
        found.append(Violation(ViolationCode.TOO_FEW_CLASSES, f"n={n} < {MIN_CLASSES}"))
    return ValidationReport(tuple(found))


def relabel(manifest: Manifest, o: Ontology) -> Manifest:
    """Coarse view of ``manifest``: same records and folds, labels mapped to parents."""
    assignment = o.assignment
    missing = [lab for lab in manifest.label_set if lab not in assignment]
    if missing:
        raise UnassignedLabel(f"labels without a parent: {', '.join(missing)}")
    return relabel_records(manifest, assignment, o.parent_labels)


def check_matches(o: Ontology, labels) -> None:
    if set(o.assignment) != set(labels):
        raise OntologyMismatch(
            f"ontology covers {sorted(o.assignment)} but dataset labels are {sorted(labels)}")


# --- files and fixtures ---

def load_ontology_file(path) -> Ontology:
    return Ontology.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_ontology_file(o: Ontology, path) -> None:
    _io.atomic_write_json(path, o.to_dict())


def fixture_name(dataset, p: int) -> str:
    return f"{DatasetKind.parse(dataset).value.lower()}_p{p}.json"


def available_fixtures() -> list[str]:
    root = resources.files("echo_esc.ontology") / "fixtures"
    return sorted(f.name for f in root.iterdir() if f.name.endswith(".json"))


def load_fixture(dataset, p: int) -> Ontology:
    name = fixture_name(dataset, p)
    res = resources.files("echo_esc.ontology") / "fixtures" / name
    if not res.is_file():
        raise OntologyGenerationFailed(
            f"no frozen ontology fixture {name}; available: {', '.join(available_fixtures())}")
    o = Ontology.from_dict(json.loads(res.read_text(encoding="utf-8")))
    return o
