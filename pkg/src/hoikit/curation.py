"""Dataset filtering and partitioning by contact configuration."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .contact import Configuration, ContactReport
from .mesh import MeshError, PathLike, TriMesh, load_mesh, nearest_distances

logger = logging.getLogger(__name__)

PENETRATION_THRESHOLD = 0.30
FLOAT_HUMAN_DISTANCE = 0.30
FLOAT_GROUND_HEIGHT = 0.15
N_PER_SUBSET = 50

REJECT_PENETRATION = "PENETRATION"
REJECT_FLOATING = "FLOATING"
REJECT_ACTION = "ACTION_MISMATCH"
REJECTION_CODES = (REJECT_PENETRATION, REJECT_FLOATING, REJECT_ACTION)

_PAIR_BUDGET = 2_000_000


class RulesFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def winding_numbers(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Generalized winding number of each point w.r.t. the mesh surface.

    Sum of signed solid angles of all triangles over 4*pi: ~1 inside a closed
    outward-oriented surface, ~0 outside, and degrades gracefully with holes.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    out = np.zeros(len(pts))
    if len(tri) == 0 or len(pts) == 0:
        return out
    step = max(1, _PAIR_BUDGET // len(tri))
    for start in range(0, len(pts), step):
        p = pts[start:start + step, None, :]
        a, b, c = tri[None, :, 0] - p, tri[None, :, 1] - p, tri[None, :, 2] - p
        la, lb, lc = (np.linalg.norm(x, axis=2) for x in (a, b, c))
        det = np.einsum("pfi,pfi->pf", a, np.cross(b, c))
        denom = (la * lb * lc + np.einsum("pfi,pfi->pf", a, b) * lc
                 + np.einsum("pfi,pfi->pf", b, c) * la + np.einsum("pfi,pfi->pf", c, a) * lb)
        out[start:start + step] = 2 * np.arctan2(det, denom).sum(axis=1)
    return out / (4 * math.pi)


def penetration_fraction(human: TriMesh, obj: TriMesh) -> float:
    """Share of object vertices strictly inside the human surface (winding number > 0.5)."""
    if human.is_empty() or obj.is_empty():
        raise MeshError("penetration test needs nonempty meshes")
    return float(np.mean(winding_numbers(obj.vertices, human) > 0.5))


def floating_object_check(obj: TriMesh, human: TriMesh, ground_y: Optional[float] = None,
                          d_h: float = FLOAT_HUMAN_DISTANCE, d_g: float = FLOAT_GROUND_HEIGHT,
                          up_axis: int = 1) -> bool:
    """True to keep.  Rejects objects both far from the human and lifted off the ground."""
    if ground_y is None:
        ground_y = float(human.vertices[:, up_axis].min())
    to_human = float(nearest_distances(obj.vertices, human.vertices).min())
    height = float(obj.vertices[:, up_axis].min()) - ground_y
    return not (to_human > d_h and height > d_g)


# ---------------------------------------------------------------------------
# Samples and subsets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSample:
    id: str
    caption: str
    action: str
    renderings: Tuple[str, ...]
    human_mesh: str
    object_mesh: str
    report: ContactReport

    def to_dict(self) -> dict:
        return {
            "id": self.id, "caption": self.caption, "action": self.action,
            "renderings": list(self.renderings), "human_mesh": self.human_mesh,
            "object_mesh": self.object_mesh, "report": self.report.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSample":
        try:
            return cls(str(d["id"]), d.get("caption", ""), d["action"], tuple(d.get("renderings", [])),
                       d["human_mesh"], d["object_mesh"], ContactReport.from_dict(d["report"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ManifestError(f"bad sample record: {exc!r}") from exc


def read_manifest(path: PathLike) -> List[DatasetSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(DatasetSample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, ManifestError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate sample ids")
    return samples


@dataclass
class SubsetPartition:
    subsets: Dict[Configuration, List[str]] = field(
        default_factory=lambda: {c: [] for c in Configuration})

    def __getitem__(self, config) -> List[str]:
        return self.subsets[Configuration(config)]


def partition_by_config(samples: Sequence[DatasetSample]) -> SubsetPartition:
    part = SubsetPartition()
    for s in sorted(samples, key=lambda s: s.id):
        part.subsets[s.report.configuration].append(s.id)
    return part


def load_rules(path: PathLike) -> Dict[str, frozenset]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RulesFormatError(f"cannot read rules {path}: {exc}") from exc
    return parse_rules(raw)


def parse_rules(raw) -> Dict[str, frozenset]:
    if not isinstance(raw, dict):
        raise RulesFormatError("rules must map action -> list of configurations")
    rules = {}
    for action, allowed in raw.items():
        if not isinstance(allowed, list):
            raise RulesFormatError(f"rules[{action!r}] must be a list")
        try:
            rules[action] = frozenset(Configuration(c) for c in allowed)
        except ValueError as exc:
            raise RulesFormatError(f"rules[{action!r}]: {exc}") from exc
    return rules


def action_matches(sample: DatasetSample, rules: Mapping[str, frozenset]) -> bool:
    allowed = rules.get(sample.action)
    if allowed is None:
        logger.warning("action %r of sample %s has no rule; keeping it", sample.action, sample.id)
        return True
    return sample.report.configuration in allowed


def action_contact_filter(samples: Sequence[DatasetSample], rules: Mapping[str, frozenset]) -> List[DatasetSample]:
    return [s for s in samples if action_matches(s, rules)]


def select_subset(partition: SubsetPartition, n_per_subset: int, seed: int) -> List[str]:
    """Seeded uniform sample without replacement from every subset.

    Each subset draws from its own stream keyed by (seed, subset position), so
    one subset's size never shifts another's selection.
    """
    if n_per_subset < 0:
        raise ValueError("n_per_subset must be >= 0")
    chosen = []
    for k, config in enumerate(Configuration):
        ids = sorted(partition.subsets[config])
        if len(ids) <= n_per_subset:
            chosen += ids
            continue
        rng = np.random.default_rng([seed, k])
        pick = np.sort(rng.choice(len(ids), size=n_per_subset, replace=False))
        chosen += [ids[i] for i in pick]
    return chosen


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class Rejection:
    id: str
    reason: str
    detail: str


@dataclass
class CurationResult:
    kept: List[DatasetSample]
    rejections: List[Rejection]
    partition: SubsetPartition
    selected: List[str]


def curate(samples: Sequence[DatasetSample], rules: Mapping[str, frozenset], seed: int,
           n_per_subset: int = N_PER_SUBSET, penetration_threshold: float = PENETRATION_THRESHOLD,
           d_h: float = FLOAT_HUMAN_DISTANCE, d_g: float = FLOAT_GROUND_HEIGHT, up_axis: int = 1,
           base_dir: Optional[PathLike] = None,
           loader: Callable[[PathLike], TriMesh] = load_mesh) -> CurationResult:
    """Penetration and floating filters, action-contact filter, partition, selection."""
    base = Path(base_dir) if base_dir is not None else None

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() or base is None else base / q

    kept, rejections = [], []
    for s in sorted(samples, key=lambda s: s.id):
        human = loader(resolve(s.human_mesh))
        obj = loader(resolve(s.object_mesh))
        frac = penetration_fraction(human, obj)
        if frac > penetration_threshold:
            rejections.append(Rejection(s.id, REJECT_PENETRATION, f"penetration={frac:.4f}"))
            continue
        if not floating_object_check(obj, human, None, d_h, d_g, up_axis):
            rejections.append(Rejection(s.id, REJECT_FLOATING, "far from human and ground"))
            continue
        if not action_matches(s, rules):
            rejections.append(Rejection(s.id, REJECT_ACTION,
                                        f"{s.action} vs {s.report.configuration.value}"))
            continue
        kept.append(s)
    partition = partition_by_config(kept)
    return CurationResult(kept, rejections, partition, select_subset(partition, n_per_subset, seed))


def write_curation_outputs(result: CurationResult, out_dir: PathLike) -> None:
    out = Path(out_dir)
    (out / "subsets").mkdir(parents=True, exist_ok=True)
    (out / "kept_ids.txt").write_text("".join(f"{s.id}\n" for s in result.kept), encoding="utf-8")
    (out / "selected_ids.txt").write_text("".join(f"{i}\n" for i in result.selected), encoding="utf-8")
    by_id = {s.id: s for s in result.kept}
    selected = set(result.selected)
    for config in Configuration:
        lines = [json.dumps(by_id[i].to_dict(), sort_keys=True)
                 for i in result.partition.subsets[config] if i in selected]
        (out / "subsets" / f"{config.value}.jsonl").write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8")
    with open(out / "rejections.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "reason", "detail"])
        for r in result.rejections:
            w.writerow([r.id, r.reason, r.detail])
