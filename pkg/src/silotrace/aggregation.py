"""High-risk place discovery: two-server secure sum and LDP heavy hitters."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DuplicatePlace, InvalidEpsilon, LengthMismatch, TooFewUsers
from .unified_format import OpaqueId, SubjectKind

MODULUS_BITS = 64
MIN_USERS = 3
DEFAULT_THRESHOLD = 3


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class PlaceIndexMap:
    """Bijection between place digests and indices ``1..ell``, ordered by digest."""

    def __init__(self, places: Iterable):
        digests = [p.digest if isinstance(p, OpaqueId) else bytes(p) for p in places]
        if len(set(digests)) != len(digests):
            seen = set()
            dup = next(d for d in digests if d in seen or seen.add(d))
            raise DuplicatePlace(dup.hex())
        self._places = tuple(sorted(digests))
        self._index = {d: i + 1 for i, d in enumerate(self._places)}

    @property
    def ell(self) -> int:
        return len(self._places)

    def __len__(self):
        return self.ell

    def __contains__(self, place) -> bool:
        return self._key(place) in self._index

    @staticmethod
    def _key(place) -> bytes:
        return place.digest if isinstance(place, OpaqueId) else bytes(place)

    def index(self, place) -> int:
        return self._index[self._key(place)]

    def get(self, place) -> Optional[int]:
        return self._index.get(self._key(place))

    def place(self, index: int) -> bytes:
        if not 1 <= index <= self.ell:
            raise IndexError(index)
        return self._places[index - 1]

    @property
    def places(self) -> tuple:
        return self._places


def build_index_map(places: Sequence) -> PlaceIndexMap:
    return PlaceIndexMap(places)


@dataclass
class VisitVector:
    counts: np.ndarray
    owner: str = ""

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.uint64)

    @property
    def ell(self) -> int:
        return self.counts.shape[0]

    @classmethod
    def from_visits(cls, visits, index_map: PlaceIndexMap, owner: str = "") -> "VisitVector":
        """Count unitized visits per mapped place; unmapped places are dropped."""
        counts = np.zeros(index_map.ell, dtype=np.uint64)
        for v in visits:
            if v.place.kind is not SubjectKind.PLACE:
                continue
            i = index_map.get(v.place.digest)
            if i is not None:
                counts[i - 1] += np.uint64(1)
        return cls(counts, owner)

    def presence(self) -> np.ndarray:
        return (self.counts > 0).astype(np.uint8)


@dataclass
class ShareVector:
    values: np.ndarray
    aggregator_id: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint64)
        if self.aggregator_id not in (1, 2):
            raise ValueError("aggregator_id must be 1 or 2")

    def to_bytes(self) -> bytes:
        return bytes([self.aggregator_id]) + self.values.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ShareVector":
        if (len(buf) - 1) % 8:
            raise LengthMismatch("share payload is not a whole number of u64 words")
        return cls(np.frombuffer(buf[1:], dtype="<u8").astype(np.uint64), buf[0])


def share_vector(v: VisitVector, seed=None):
    """Split counts into two additive shares modulo 2**64."""
    rng = _rng(seed)
    mask = rng.integers(0, 2**64, size=v.ell, dtype=np.uint64, endpoint=False)
    return ShareVector(mask, 1), ShareVector(kernels.sub_u64(v.counts, mask), 2)


def aggregate(shares: Sequence[ShareVector]) -> np.ndarray:
    """One aggregator's partial sum over every user's share it holds."""
    shares = list(shares)
    if len(shares) < MIN_USERS:
        raise TooFewUsers(f"secure sum needs more than two users, got {len(shares)}")
    ell = shares[0].values.shape[0]
    agg_ids = {s.aggregator_id for s in shares}
    if len(agg_ids) != 1:
        raise ValueError("shares from both aggregators mixed in one fold")
    for s in shares:
        if s.values.shape[0] != ell:
            raise LengthMismatch(f"share length {s.values.shape[0]} != {ell}")
    return kernels.column_sum_u64(np.stack([s.values for s in shares]))


def combine(partial1: np.ndarray, partial2: np.ndarray) -> np.ndarray:
    if partial1.shape != partial2.shape:
        raise LengthMismatch("partial sums differ in length")
    return kernels.add_u64(partial1, partial2)


@dataclass(frozen=True)
class HeatMap:
    totals: np.ndarray
    threshold: int
    high_risk: frozenset = field(default_factory=frozenset)  # 1-based indices

    def to_csv(self, index_map: Optional[PlaceIndexMap] = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["place_opaque_id_hex", "index", "total", "high_risk_flag"])
        for i, total in enumerate(self.totals.tolist(), 1):
            pid = index_map.place(i).hex() if index_map is not None else ""
            w.writerow([pid, i, int(total), int(i in self.high_risk)])
        return buf.getvalue()


def heatmap(totals, threshold: int = DEFAULT_THRESHOLD) -> HeatMap:
    if threshold < 1:
        raise ValueError("threshold must be at least 1")
    totals = np.asarray(totals)
    hot = frozenset(int(i) + 1 for i in np.flatnonzero(totals >= threshold))
    return HeatMap(totals, threshold, hot)


def read_heatmap_csv(text: str):
    """Parse an exported heat map back into ``(place hex list, totals)``."""
    rows = list(csv.DictReader(io.StringIO(text)))
    rows.sort(key=lambda r: int(r["index"]))
    return [r["place_opaque_id_hex"] for r in rows], np.array([int(r["total"]) for r in rows], dtype=np.uint64)


# -- LDP heavy hitters ------------------------------------------------------------


def keep_probability(epsilon: float) -> float:
    if not (epsilon > 0) or math.isnan(epsilon):
        raise InvalidEpsilon(f"epsilon must be positive, got {epsilon}")
    if math.isinf(epsilon):
        return 1.0
    return 1.0 / (1.0 + math.exp(-epsilon))


@dataclass(frozen=True)
class LdpReport:
    bits: np.ndarray
    epsilon: float


def ldp_report(presence: np.ndarray, epsilon: float, seed=None) -> LdpReport:
    """Per-bit randomized response on one user's presence vector."""
    p = keep_probability(epsilon)
    presence = np.asarray(presence, dtype=np.uint8)
    u = _rng(seed).random(presence.shape[0])
    return LdpReport(kernels.rr_perturb(presence[None, :], u[None, :], p)[0], epsilon)


def ldp_report_batch(presence: np.ndarray, epsilon: float, seed=None) -> np.ndarray:
    """Randomized response for a ``(n, ell)`` matrix of users at once."""
    p = keep_probability(epsilon)
    presence = np.asarray(presence, dtype=np.uint8)
    u = _rng(seed).random(presence.shape)
    return kernels.rr_perturb(presence, u, p)


def ldp_estimate(reports, epsilon: float) -> np.ndarray:
    """Unbiased frequency estimate ``(c - n q) / (p - q)`` per index."""
    p = keep_probability(epsilon)
    q = 1.0 - p
    if isinstance(reports, np.ndarray):
        mat = reports
    else:
        reports = list(reports)
        if not reports:
            return np.zeros(0)
        mat = np.stack([r.bits for r in reports])
    n = mat.shape[0]
    c = kernels.column_count(mat)
    return (c - n * q) / (p - q)


def ldp_std_error(n: int, epsilon: float) -> float:
    """Standard deviation of one estimate: ``sqrt(n p q) / (p - q)``."""
    p = keep_probability(epsilon)
    q = 1.0 - p
    return math.sqrt(n * p * q) / (p - q)


def heavy_hitters(estimates: np.ndarray, threshold: float) -> frozenset:
    return frozenset(int(i) + 1 for i in np.flatnonzero(np.asarray(estimates) >= threshold))
