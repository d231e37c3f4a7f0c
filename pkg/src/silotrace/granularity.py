"""Granularity adaptation: place forest, expansion, unitization, grid cells."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from decimal import ROUND_FLOOR, Decimal
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from . import kernels
from .errors import ConfigInvalid, ForestViolation, OutOfRange, UnknownPlace
from .unified_format import (
    MINUTES_PER_DAY,
    ContactRecord,
    OpaqueId,
    PlaceStructure,
    SubjectKind,
    SubjectRef,
    VisitRecord,
    make_opaque_id,
)

GRID_TIER_FACTOR = 10
GRID_TIERS = 3  # the cell itself plus two coarser ancestors


class PlaceTree:
    """Containment forest over place digests.

    Nodes never mentioned by an edge are treated as standalone leaves.
    """

    def __init__(self, edges: Iterable[PlaceStructure] = ()):
        self._parent: dict = {}
        self._children: dict = {}
        for e in edges:
            self.add(e)

    def add(self, edge: PlaceStructure) -> bool:
        """Insert an edge; returns False if it was already present."""
        child, parent = edge.child.digest, edge.parent.digest
        existing = self._parent.get(child)
        if existing == parent:
            return False
        if existing is not None:
            raise ForestViolation(f"{edge.child!r} already has a parent")
        node = parent
        while node is not None:
            if node == child:
                raise ForestViolation(f"edge {edge.child!r} -> {edge.parent!r} would close a cycle")
            node = self._parent.get(node)
        self._parent[child] = parent
        self._children.setdefault(parent, []).append(child)
        return True

    def __contains__(self, node: bytes) -> bool:
        return node in self._parent or node in self._children

    def __len__(self) -> int:
        return len(set(self._parent) | set(self._children))

    @property
    def nodes(self) -> frozenset:
        return frozenset(self._parent) | frozenset(self._children)

    @property
    def edges(self) -> list:
        return [PlaceStructure(OpaqueId(c), OpaqueId(p)) for c, p in sorted(self._parent.items())]

    def parent(self, node: bytes) -> Optional[bytes]:
        return self._parent.get(node)

    def children(self, node: bytes) -> tuple:
        return tuple(self._children.get(node, ()))

    def ancestors(self, node: bytes) -> Iterator[bytes]:
        node = self._parent.get(node)
        while node is not None:
            yield node
            node = self._parent.get(node)

    def is_leaf(self, node: bytes) -> bool:
        return not self._children.get(node)

    def leaves(self, node: bytes) -> frozenset:
        """Smallest-granularity places under ``node`` (``{node}`` for a leaf)."""
        out = set()
        stack = [node]
        while stack:
            n = stack.pop()
            kids = self._children.get(n)
            if kids:
                stack.extend(kids)
            else:
                out.add(n)
        return frozenset(out)

    def copy(self) -> "PlaceTree":
        t = PlaceTree()
        t._parent = dict(self._parent)
        t._children = {k: list(v) for k, v in self._children.items()}
        return t

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PlaceTree":
        """Read ``child_hex parent_hex`` lines (comma or whitespace separated)."""
        tree = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            cols = line.replace(",", " ").split()
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected two columns, got {len(cols)}")
            tree.add(PlaceStructure(OpaqueId.from_hex(cols[0]), OpaqueId.from_hex(cols[1])))
        return tree

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text("".join(f"{e.child.hex} {e.parent.hex}\n" for e in self.edges))


def expand(record: VisitRecord, tree: PlaceTree, strict: bool = False) -> list:
    """Split a visit into one visit per leaf under its place."""
    if record.place.kind is not SubjectKind.PLACE:
        return [record]
    node = record.place.digest
    if node not in tree:
        if strict:
            raise UnknownPlace(node.hex())
        return [record]
    leaves = tree.leaves(node)
    if leaves == {node}:
        return [record]
    return [dataclasses.replace(record, place=SubjectRef(SubjectKind.PLACE, leaf)) for leaf in sorted(leaves)]


@dataclass(frozen=True)
class UnitizationConfig:
    segment_minutes: int = 15

    def __post_init__(self):
        segment_count(self.segment_minutes)

    @property
    def segments_per_day(self) -> int:
        return MINUTES_PER_DAY // self.segment_minutes


def segment_count(cfg: Union[UnitizationConfig, int]) -> int:
    minutes = cfg.segment_minutes if isinstance(cfg, UnitizationConfig) else cfg
    if not isinstance(minutes, (int, np.integer)) or minutes <= 0 or MINUTES_PER_DAY % minutes:
        raise ConfigInvalid(f"segment length {minutes!r} does not divide a day")
    return MINUTES_PER_DAY // int(minutes)


def _split(start: int, end: int, seg: int, first: int, last: int):
    for g in range(first, last + 1):
        lo = max(start, g * seg)
        hi = min(end, (g + 1) * seg)
        yield g, lo, hi


def unitize(record: Union[VisitRecord, ContactRecord], cfg: UnitizationConfig = UnitizationConfig()) -> list:
    """One record per time segment the interval overlaps, clipped to it.

    Intervals are end-exclusive; a point interval lands in one segment.
    """
    seg = cfg.segment_minutes
    per_day = cfg.segments_per_day
    first = record.start // seg
    last = (record.end - 1) // seg if record.end > record.start else first
    return [
        dataclasses.replace(record, start=lo, end=hi, segment=g % per_day, day=g // per_day)
        for g, lo, hi in _split(record.start, record.end, seg, first, last)
    ]


def unitize_many(records, cfg: UnitizationConfig = UnitizationConfig()) -> list:
    """Batch :func:`unitize` that computes segment ranges in one kernel call."""
    records = list(records)
    if not records:
        return []
    seg = cfg.segment_minutes
    per_day = cfg.segments_per_day
    starts = np.fromiter((r.start for r in records), dtype=np.int64, count=len(records))
    ends = np.fromiter((r.end for r in records), dtype=np.int64, count=len(records))
    firsts, lasts = kernels.segment_bounds(starts, ends, seg)
    out = []
    for r, f, l in zip(records, firsts.tolist(), lasts.tolist()):
        out.extend(
            dataclasses.replace(r, start=lo, end=hi, segment=g % per_day, day=g // per_day)
            for g, lo, hi in _split(r.start, r.end, seg, f, l)
        )
    return out


@dataclass(frozen=True)
class GridConfig:
    cell_degrees: float = 0.001
    origin: tuple = (-90.0, -180.0)

    def __post_init__(self):
        if not self.cell_degrees > 0:
            raise ConfigInvalid("cell_degrees must be positive")


def _dec(x) -> Decimal:
    return Decimal(repr(float(x))) if not isinstance(x, Decimal) else x


def grid_index(lat: float, lon: float, cfg: GridConfig = GridConfig()) -> tuple:
    """Floor cell indices; a point on a boundary belongs to the higher cell."""
    if not (-90 <= lat <= 90) or not (-180 <= lon <= 180):
        raise OutOfRange(f"coordinate ({lat}, {lon}) outside the globe")
    cell = _dec(cfg.cell_degrees)
    i = ((_dec(lat) - _dec(cfg.origin[0])) / cell).to_integral_value(rounding=ROUND_FLOOR)
    j = ((_dec(lon) - _dec(cfg.origin[1])) / cell).to_integral_value(rounding=ROUND_FLOOR)
    return int(i), int(j)


def _cell_id(salt: bytes, tier: int, i: int, j: int) -> OpaqueId:
    return make_opaque_id(salt, "grid", f"{tier}:{i}:{j}")


def grid_cell(lat: float, lon: float, cfg: GridConfig, salt: bytes) -> OpaqueId:
    i, j = grid_index(lat, lon, cfg)
    return _cell_id(salt, 0, i, j)


def grid_edges(lat: float, lon: float, cfg: GridConfig, salt: bytes) -> list:
    """Containment edges from the cell up through its coarser ancestors."""
    i, j = grid_index(lat, lon, cfg)
    ids = []
    for tier in range(GRID_TIERS):
        ids.append(_cell_id(salt, tier, i, j))
        i, j = i // GRID_TIER_FACTOR, j // GRID_TIER_FACTOR
    return [PlaceStructure(ids[k], ids[k + 1]) for k in range(GRID_TIERS - 1)]


def grid_indices(lats, lons, cfg: GridConfig = GridConfig()) -> np.ndarray:
    """Vectorized cell indices, shape ``(n, 2)``.

    Float arithmetic with a tiny boundary nudge; agrees with :func:`grid_index`
    except for points within ~1e-9 cells of a boundary that are not decimal.
    """
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    if np.any((lats < -90) | (lats > 90) | (lons < -180) | (lons > 180)):
        raise OutOfRange("coordinate outside the globe")
    i = kernels.grid_indices(lats, cfg.origin[0], cfg.cell_degrees)
    j = kernels.grid_indices(lons, cfg.origin[1], cfg.cell_degrees)
    return np.stack([i, j], axis=1)
