import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple, Union

import numpy as np
import pydantic
from pydantic import BaseModel, Field

from .. import utils
from ..models import GenerationError, InvalidArgumentError, ValidationError
from .geometry import Quaternion

BASE_DIR = Path(__file__).resolve().parent.parent
DEFAULT_CATALOG_PATH = BASE_DIR / "catalog_default.json"

MAX_PAIR_RETRIES = 100_000

# --- Catalog document (JSON) ---

class BoxDocument(BaseModel):
    center: Tuple[float, float, float]
    half_extents: Tuple[float, float, float]

class TransformDocument(BaseModel):
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

class PartDocument(BaseModel):
    id: int
    name: str
    color: Tuple[int, int, int]
    boxes: List[BoxDocument] = Field(min_length=1)
    transform: TransformDocument = TransformDocument()

class CatalogDocument(BaseModel):
    name: str = "catalog"
    base_part: str
    parts: List[PartDocument]
    adjacency: List[Tuple[str, str]]

class StateConstraints(BaseModel):
    always_present: List[str] = []
    never_present: List[str] = []

# --- Domain types ---

@dataclass(frozen=True)
class PartDef:
    id: int
    name: str
    boxes: Tuple[Tuple[Tuple[float, float, float], Tuple[float, float, float]], ...]
    rotation: Quaternion
    translation: Tuple[float, float, float]
    color: Tuple[int, int, int]

    def world_corners(self) -> List[np.ndarray]:
        """Eight corners per box in the assembly frame, one (8, 3) array per box."""
        rot = self.rotation.to_matrix()
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        corners = []
        for center, half in self.boxes:
            local = np.asarray(center) + signs * np.asarray(half)
            corners.append(local @ rot.T + np.asarray(self.translation))
        return corners


@dataclass(frozen=True)
class PartCatalog:
    name: str
    parts: Tuple[PartDef, ...]
    adjacency: Dict[int, FrozenSet[int]]
    base_part: int
    key: str

    @property
    def size(self) -> int:
        return len(self.parts)

    def part(self, part_id: int) -> PartDef:
        return self.parts[part_id - 1]

    def id_of(self, name: str) -> int:
        for p in self.parts:
            if p.name == name:
                return p.id
        raise InvalidArgumentError(f"unknown part name '{name}' in catalog '{self.name}'")

    def ids_of(self, names: Iterable[str]) -> FrozenSet[int]:
        return frozenset(self.id_of(n) for n in names)

    def all_ids(self) -> FrozenSet[int]:
        return frozenset(p.id for p in self.parts)

    def full_state(self) -> "AssemblyState":
        return AssemblyState(self.all_ids(), self.key)

    def is_connected(self, present: Iterable[int]) -> bool:
        present = set(present)
        if not present:
            return False
        start = self.base_part if self.base_part in present else min(present)
        seen = {start}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nxt in self.adjacency[node]:
                if nxt in present and nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return len(seen) == len(present)

    def bounding_radius(self) -> float:
        corners = np.concatenate([c for p in self.parts for c in p.world_corners()])
        return float(np.linalg.norm(corners, axis=1).max())

    def state_from_names(self, names: Iterable[str]) -> "AssemblyState":
        return AssemblyState(self.ids_of(names), self.key)


@dataclass(frozen=True)
class AssemblyState:
    present: FrozenSet[int]
    catalog_key: str

    def to_bitmask(self) -> int:
        return utils.bitmask(self.present)

    @classmethod
    def from_bitmask(cls, mask: int, catalog: PartCatalog) -> "AssemblyState":
        return cls(utils.from_bitmask(mask), catalog.key)


@dataclass(frozen=True)
class PartDiff:
    only_in_a: FrozenSet[int]
    only_in_b: FrozenSet[int]

    @property
    def count(self) -> int:
        return len(self.only_in_a) + len(self.only_in_b)

    def all_parts(self) -> FrozenSet[int]:
        return self.only_in_a | self.only_in_b

# --- Operations ---

def load_catalog(source: Union[str, Path, dict, None] = None) -> PartCatalog:
    """
    Load and validate a catalog document. Accepts a path, a JSON string, a parsed
    dict, or None for the bundled default.
    """
    if source is None:
        source = DEFAULT_CATALOG_PATH
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"catalog not found: {path}")
        raw_text = path.read_text(encoding="utf-8")
    elif isinstance(source, str):
        raw_text = source
    else:
        raw_text = json.dumps(source, sort_keys=True)

    try:
        raw = json.loads(raw_text)
    except json.JSONDecodeError as e:
        raise ValidationError("catalog document parses", str(e)) from e
    try:
        doc = CatalogDocument.model_validate(raw)
    except pydantic.ValidationError as e:
        raise ValidationError("catalog schema", str(e).splitlines()[0]) from e

    # 1. Dense ids 1..P, unique names, distinct colors, positive extents
    ids = sorted(p.id for p in doc.parts)
    if ids != list(range(1, len(doc.parts) + 1)):
        raise ValidationError("part ids are dense integers 1..P", f"got {ids}")
    names = [p.name for p in doc.parts]
    if len(set(names)) != len(names):
        raise ValidationError("part names are unique")
    colors = [tuple(p.color) for p in doc.parts]
    if len(set(colors)) != len(colors):
        raise ValidationError("colors distinct per part")
    for p in doc.parts:
        for box in p.boxes:
            if min(box.half_extents) <= 0:
                raise ValidationError("boxes have strictly positive extents", f"part '{p.name}'")
        if any(c < 0 or c > 255 for c in p.color):
            raise ValidationError("colors are 8-bit RGB", f"part '{p.name}'")

    # 2. Base part and adjacency references
    by_name = {p.name: p.id for p in doc.parts}
    if doc.base_part not in by_name:
        raise ValidationError("base_part exists", f"'{doc.base_part}' is not a part")
    adjacency: Dict[int, Set[int]] = {pid: set() for pid in ids}
    for a, b in doc.adjacency:
        if a not in by_name or b not in by_name:
            raise ValidationError("adjacency references existing parts", f"({a}, {b})")
        if a == b:
            raise ValidationError("adjacency has no self loops", a)
        adjacency[by_name[a]].add(by_name[b])
        adjacency[by_name[b]].add(by_name[a])

    parts = tuple(
        PartDef(
            id=p.id,
            name=p.name,
            boxes=tuple((tuple(b.center), tuple(b.half_extents)) for b in p.boxes),
            rotation=Quaternion.from_array(p.transform.rotation).normalized(),
            translation=tuple(p.transform.translation),
            color=tuple(p.color),
        )
        for p in sorted(doc.parts, key=lambda p: p.id)
    )
    key = utils.calculate_file_hash(json.dumps(raw, sort_keys=True).encode("utf-8"))[:16]
    catalog = PartCatalog(
        name=doc.name,
        parts=parts,
        adjacency={pid: frozenset(n) for pid, n in adjacency.items()},
        base_part=by_name[doc.base_part],
        key=key,
    )

    # 3. Connectivity over all parts
    if not catalog.is_connected(catalog.all_ids()):
        isolated = [catalog.part(pid).name for pid, n in catalog.adjacency.items() if not n]
        detail = f"isolated parts: {isolated}" if isolated else "graph has several components"
        raise ValidationError("adjacency graph over all parts is connected", detail)
    return catalog


def validate_state(catalog: PartCatalog, state: AssemblyState):
    if state.catalog_key != catalog.key:
        raise InvalidArgumentError("state belongs to a different catalog")
    if catalog.base_part not in state.present:
        raise ValidationError("base_part in present")
    if not catalog.is_connected(state.present):
        raise ValidationError("present parts are connected")


def _resolve_constraints(catalog: PartCatalog, constraints: Optional[StateConstraints]):
    if constraints is None:
        return frozenset(), frozenset()
    always = catalog.ids_of(constraints.always_present)
    never = catalog.ids_of(constraints.never_present)
    if always & never:
        raise GenerationError("a part cannot be both always-present and never-present")
    if catalog.base_part in never:
        raise GenerationError("the base part cannot be never-present")
    return always, never


def _removable(catalog: PartCatalog, present: Set[int], locked: FrozenSet[int]) -> List[int]:
    return sorted(
        p for p in present
        if p != catalog.base_part and p not in locked and catalog.is_connected(present - {p})
    )


def _addable(catalog: PartCatalog, present: Set[int], forbidden: FrozenSet[int]) -> List[int]:
    return sorted(
        p for p in catalog.all_ids()
        if p not in present and p not in forbidden and catalog.adjacency[p] & present
    )


def sample_state(catalog: PartCatalog, rng: np.random.Generator, constraints: Optional[StateConstraints] = None) -> AssemblyState:
    """
    Start from the full assembly and remove uniformly chosen removable parts for a
    number of steps drawn uniformly from 0..P-1. A part is removable when the rest
    stays connected and it is neither the base part nor always-present.
    """
    always, never = _resolve_constraints(catalog, constraints)
    present = set(catalog.all_ids() - never)
    if not catalog.is_connected(present):
        raise GenerationError("removing the never-present parts disconnects the assembly")

    steps = int(rng.integers(0, catalog.size))
    for _ in range(steps):
        candidates = _removable(catalog, present, always)
        if not candidates:
            break
        present.discard(candidates[int(rng.integers(len(candidates)))])
    return AssemblyState(frozenset(present), catalog.key)


def part_diff(a: AssemblyState, b: AssemblyState) -> PartDiff:
    if a.catalog_key != b.catalog_key:
        raise InvalidArgumentError("part_diff needs two states of the same catalog")
    return PartDiff(only_in_a=a.present - b.present, only_in_b=b.present - a.present)


def pair_key(a: AssemblyState, b: AssemblyState) -> Tuple[int, int]:
    """Unordered identity of a state pair."""
    ma, mb = a.to_bitmask(), b.to_bitmask()
    return (ma, mb) if ma <= mb else (mb, ma)


def _walk(catalog, start: AssemblyState, steps: int, always, never, rng) -> Optional[AssemblyState]:
    # each step toggles a part not toggled before, so the walk ends exactly `steps` parts away
    present = set(start.present)
    touched: Set[int] = set()
    for _ in range(steps):
        candidates = sorted(
            set(_removable(catalog, present, always | frozenset(touched)))
            | set(_addable(catalog, present, never | frozenset(touched)))
        )
        if not candidates:
            return None
        part = candidates[int(rng.integers(len(candidates)))]
        touched.add(part)
        if part in present:
            present.discard(part)
        else:
            present.add(part)
    return AssemblyState(frozenset(present), catalog.key)


def sample_state_pair(
    catalog: PartCatalog,
    d_min: int,
    d_max: int,
    constraints: Optional[StateConstraints],
    rng: np.random.Generator,
    exclude: Optional[Set[Tuple[int, int]]] = None,
    max_retries: int = MAX_PAIR_RETRIES,
) -> Tuple[AssemblyState, AssemblyState]:
    """
    Draw (a, b) with part-diff count in [d_min, d_max], both satisfying the
    constraints. a comes from sample_state, b from a random walk of d toggles
    away from a; candidates are rejected until one fits, up to max_retries.
    """
    if not (0 <= d_min <= d_max <= catalog.size):
        raise InvalidArgumentError(f"need 0 <= d_min <= d_max <= {catalog.size}, got [{d_min}, {d_max}]")
    always, never = _resolve_constraints(catalog, constraints)

    for _ in range(max_retries):
        a = sample_state(catalog, rng, constraints)
        d = int(rng.integers(d_min, d_max + 1))
        b = _walk(catalog, a, d, always, never, rng)
        if b is None:
            continue
        if rng.random() < 0.5:
            a, b = b, a
        if exclude and pair_key(a, b) in exclude:
            continue
        if d_min <= part_diff(a, b).count <= d_max:
            return a, b
    raise GenerationError(f"no state pair with {d_min}..{d_max} differences after {max_retries} attempts")


def enumerate_states(catalog: PartCatalog, constraints: Optional[StateConstraints] = None) -> Set[FrozenSet[int]]:
    """Every valid state reachable by removals, by breadth-first search."""
    always, never = _resolve_constraints(catalog, constraints)
    start = frozenset(catalog.all_ids() - never)
    seen = {start}
    queue = deque([start])
    while queue:
        present = queue.popleft()
        for p in _removable(catalog, set(present), always):
            nxt = present - {p}
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen
