"""Part-level contact detection, contact configurations and contact accuracy."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Mapping, Sequence

from .body import ALL_PARTS, PartName
from .mesh import MeshError, SpatialIndex, TriMesh

CONTACT_THRESHOLD = 0.04

P = PartName


class Configuration(str, Enum):
    ON_BACK = "on_back"
    RIGHT_HAND = "right_hand"
    LEFT_HAND = "left_hand"
    RIGHT_LEG = "right_leg"
    LEFT_LEG = "left_leg"
    BOTH_HANDS = "both_hands"
    NO_CONTACT = "no_contact"
    OTHER = "other"

    def __str__(self) -> str:
        return self.value


RIGHT_ARM_PARTS = frozenset({P.RIGHT_HAND, P.RIGHT_FOREARM})
LEFT_ARM_PARTS = frozenset({P.LEFT_HAND, P.LEFT_FOREARM})
RIGHT_LEG_PARTS = frozenset({P.RIGHT_UPPER_LEG, P.RIGHT_LOWER_LEG, P.RIGHT_FOOT})
LEFT_LEG_PARTS = frozenset({P.LEFT_UPPER_LEG, P.LEFT_LOWER_LEG, P.LEFT_FOOT})
BACK_PARTS = frozenset({P.BACK})


def _parts(parts: Iterable) -> FrozenSet[PartName]:
    return frozenset(PartName(p) for p in parts)


def classify_configuration(parts: Iterable) -> Configuration:
    """Map a set of contacting parts to one of the eight configurations."""
    s = _parts(parts)
    if not s:
        return Configuration.NO_CONTACT
    if s <= RIGHT_ARM_PARTS:
        return Configuration.RIGHT_HAND
    if s <= LEFT_ARM_PARTS:
        return Configuration.LEFT_HAND
    if s <= RIGHT_ARM_PARTS | LEFT_ARM_PARTS and s & RIGHT_ARM_PARTS and s & LEFT_ARM_PARTS:
        return Configuration.BOTH_HANDS
    if s <= RIGHT_LEG_PARTS:
        return Configuration.RIGHT_LEG
    if s <= LEFT_LEG_PARTS:
        return Configuration.LEFT_LEG
    if s <= BACK_PARTS:
        return Configuration.ON_BACK
    return Configuration.OTHER


def part_min_distances(body_mesh: TriMesh, part_labels: Sequence, obj: TriMesh) -> Dict[PartName, float]:
    """Per part, the smallest vertex-to-vertex distance to the object (+inf for unused parts)."""
    if obj.is_empty():
        raise MeshError("contact needs a nonempty object")
    labels = [PartName(p) for p in part_labels]
    if len(labels) != body_mesh.n_vertices:
        raise ValueError(f"{len(labels)} part labels for {body_mesh.n_vertices} body vertices")
    out = {p: math.inf for p in ALL_PARTS}
    if body_mesh.is_empty():
        return out
    _, dist = SpatialIndex(obj.vertices).query(body_mesh.vertices)
    for p, d in zip(labels, dist):
        if d < out[p]:
            out[p] = float(d)
    return out


def contacting_parts(distances: Mapping, threshold: float = CONTACT_THRESHOLD) -> FrozenSet[PartName]:
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return frozenset(PartName(p) for p, d in distances.items() if d < threshold)


@dataclass(frozen=True)
class ContactReport:
    distances: Mapping[PartName, float]
    contacting_parts: FrozenSet[PartName]
    configuration: Configuration

    @classmethod
    def from_distances(cls, distances: Mapping, threshold: float = CONTACT_THRESHOLD) -> "ContactReport":
        dist = {PartName(p): float(d) for p, d in distances.items()}
        parts = contacting_parts(dist, threshold)
        return cls(dist, parts, classify_configuration(parts))

    def to_dict(self) -> dict:
        return {
            "distances": {p.value: (None if math.isinf(d) else d) for p, d in sorted(
                self.distances.items(), key=lambda kv: kv[0].value)},
            "contacting_parts": sorted(p.value for p in self.contacting_parts),
            "configuration": self.configuration.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContactReport":
        dist = {PartName(p): (math.inf if v is None else float(v)) for p, v in d.get("distances", {}).items()}
        parts = _parts(d["contacting_parts"])
        config = Configuration(d["configuration"]) if "configuration" in d else classify_configuration(parts)
        return cls(dist, parts, config)


def contact_report(body_mesh: TriMesh, part_labels: Sequence, obj: TriMesh,
                   threshold: float = CONTACT_THRESHOLD) -> ContactReport:
    return ContactReport.from_distances(part_min_distances(body_mesh, part_labels, obj), threshold)


@dataclass(frozen=True)
class ContactSpec:
    category: str
    parts: FrozenSet[PartName]

    def __post_init__(self):
        if not self.category:
            raise ValueError("contact spec needs a nonempty object category")
        object.__setattr__(self, "parts", _parts(self.parts))

    def satisfied_by(self, report: ContactReport) -> bool:
        return self.parts <= report.contacting_parts

    def hits(self, report: ContactReport) -> int:
        return len(self.parts & report.contacting_parts)

    def to_dict(self) -> dict:
        return {"category": self.category, "parts": sorted(p.value for p in self.parts)}

    @classmethod
    def from_dict(cls, d: dict) -> "ContactSpec":
        if set(d) - {"category", "parts"}:
            raise ValueError(f"unknown contact spec keys: {sorted(set(d) - {'category', 'parts'})}")
        return cls(d["category"], d.get("parts", []))


def contact_accuracy(reports: Sequence[ContactReport], specs: Sequence[ContactSpec]) -> float:
    """Fraction of (report, spec) pairs where every required part is in contact."""
    if len(reports) != len(specs):
        raise ValueError(f"{len(reports)} reports but {len(specs)} specs")
    if not reports:
        raise ValueError("contact accuracy of an empty evaluation set")
    return sum(s.satisfied_by(r) for r, s in zip(reports, specs)) / len(reports)


@dataclass(frozen=True)
class Candidate:
    human: TriMesh
    object: TriMesh
    body_mesh: TriMesh
    part_labels: Sequence


def select_from_reports(reports: Sequence[ContactReport], spec: ContactSpec) -> int:
    """First report that satisfies the contact spec with a matching configuration, else the
    one covering the most required parts (lowest index on ties)."""
    if not reports:
        raise ValueError("no candidates to select from")
    wanted = classify_configuration(spec.parts)
    for i, r in enumerate(reports):
        if spec.satisfied_by(r) and r.configuration == wanted:
            return i
    hits = [spec.hits(r) for r in reports]
    return hits.index(max(hits))


def select_best_candidate(candidates: Sequence[Candidate], spec: ContactSpec,
                          threshold: float = CONTACT_THRESHOLD) -> int:
    if not candidates:
        raise ValueError("no candidates to select from")
    reports = [contact_report(c.body_mesh, c.part_labels, c.object, threshold) for c in candidates]
    return select_from_reports(reports, spec)


@dataclass(frozen=True)
class CaptionRecord:
    human: str
    object: str
    category: str
    action: str
    parts: tuple

    def to_dict(self) -> dict:
        return {"action": self.action, "category": self.category, "human": self.human,
                "object": self.object, "parts": list(self.parts)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "CaptionRecord":
        d = json.loads(text)
        return compose_caption_fields(d["human"], d["object"], d["category"], d["action"], d["parts"])


def compose_caption_fields(human_desc: str, object_desc: str, category: str, action: str,
                           parts: Iterable) -> CaptionRecord:
    """Canonical record of the caption ingredients (parts sorted by name)."""
    if not category or not category.strip():
        raise ValueError("caption needs a nonempty object category")
    if not action or not action.strip():
        raise ValueError("caption needs a nonempty action")
    return CaptionRecord(human_desc, object_desc, category, action,
                         tuple(sorted(p.value for p in _parts(parts))))
