"""Prompt rendering and reply parsing for LLM-derived label groupings."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .. import _io
from ..errors import InvalidParentCount, UnparseableReply
from .core import Ontology, OntologySource, validate_ontology

JSON_INSTRUCTION = (
    "Answer with a single JSON object and nothing else. Each key is the name of one "
    "parent class; each value is the list of dataset classes it contains. Use every "
    "dataset class exactly once and spell it exactly as listed above."
)


@dataclass(frozen=True)
class PromptText:
    text: str
    n: int
    p: int
    label_list_hash: str


def build_prompt(labels, p: int, feedback=()) -> PromptText:
    """Render the grouping prompt for ``labels`` and ``p`` parents.

    ``feedback`` lines (validator complaints about a previous answer) are
    appended after the output instruction.
    """
    labels = list(labels)
    n = len(labels)
    if n == 0:
        raise InvalidParentCount("no labels to group")
    if not 2 <= p < n:
        raise InvalidParentCount(f"p={p} must satisfy 2 <= p < {n}")
    lines = ["Dataset Classes:"]
    lines += [f"- {lab}" for lab in labels]
    lines += [
        f"Number of Classes in Dataset = {n}",
        f"Number of Parent Classes to Generate = {p}",
        f"The task is to create {p} parent classes by identifying and leveraging the "
        f"similarities across the {n} classes in the dataset.",
        "",
        JSON_INSTRUCTION,
    ]
    if feedback:
        lines += ["", "Your previous answer was rejected for these reasons:"]
        lines += [f"- {f}" for f in feedback]
    return PromptText("\n".join(lines), n, p, _io.digest(labels)[:16])


def normalize_label(text: str) -> str:
    return re.sub(r"[\s_\-]+", " ", text.strip().strip("`'\"*").lower()).strip()


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.S)
_BULLET = re.compile(r"^\s*(?:[-*•+]|\d+[.)])\s+(.*)$")


def _json_candidates(raw: str):
    yield from _FENCE.findall(raw)
    start, end = raw.find("{"), raw.rfind("}")
    if 0 <= start < end:
        yield raw[start:end + 1]


def _from_json(raw: str):
    for chunk in _json_candidates(raw):
        try:
            doc = json.loads(chunk)
        except ValueError:
            continue
        if isinstance(doc, dict) and isinstance(doc.get("parents"), dict):
            doc = doc["parents"]
        if isinstance(doc, dict) and doc and all(
            isinstance(v, list) and all(isinstance(c, str) for c in v) for v in doc.values()
        ):
            return {str(k).strip(): list(v) for k, v in doc.items()}
    return None


def _clean_header(line: str) -> str:
    line = re.sub(r"^\s*(?:#+|\d+[.)])\s*", "", line)
    return line.strip().strip("*").strip().rstrip(":").strip().strip("*").strip()


def _from_bullets(raw: str):
    """Parse ``Parent:`` headers followed by ``- child`` bullets, or ``Parent: a, b``."""
    groups: dict[str, list[str]] = {}
    current = None
    for line in raw.splitlines():
        if not line.strip():
            continue
        bullet = _BULLET.match(line)
        indented = line[:1].isspace()
        if bullet and (indented or current is not None) and ":" not in bullet.group(1):
            if current is None:
                continue
            groups[current].append(bullet.group(1).strip())
            continue
        body = bullet.group(1) if bullet else line
        if ":" in body:
            head, _, tail = body.partition(":")
            current = _clean_header(head)
            groups.setdefault(current, [])
            groups[current] += [c.strip() for c in tail.split(",") if c.strip()]
        else:
            current = _clean_header(body)
            groups.setdefault(current, [])
    groups = {k: v for k, v in groups.items() if k}
    return groups or None


def parse_reply(raw: str, labels, p: int) -> Ontology:
    """Turn a model reply into a validated :class:`Ontology` or raise UnparseableReply."""
    if not raw or not raw.strip():
        raise UnparseableReply("empty reply", ["empty reply"])
    labels = list(labels)
    groups = _from_json(raw) or _from_bullets(raw)
    if not groups:
        raise UnparseableReply("no parent/children structure found", ["no parent/children structure found"])

    lookup = {normalize_label(lab): lab for lab in labels}
    parents: dict[str, tuple[str, ...]] = {}
    unknown = []
    for parent, children in groups.items():
        mapped = []
        for child in children:
            canon = lookup.get(normalize_label(child))
            if canon is None:
                unknown.append(f"{child!r} under {parent!r} is not a dataset class")
            else:
                mapped.append(canon)
        parents[parent] = tuple(mapped)
    o = Ontology(parents=parents, p=p, source=OntologySource.LLM)
    problems = unknown + [str(v) for v in validate_ontology(o, labels).violations]
    if problems:
        raise UnparseableReply(f"reply is not a valid {p}-way grouping", problems)
    return o
