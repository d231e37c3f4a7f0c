"""Unified data objects and opaque-ID generation.

Every object here is an immutable value.  Timestamps are integer simulated
minutes (one tick per minute).  PII never appears in an object: individuals and
places are referenced by :class:`OpaqueId`, generated tokens by their digest.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .errors import EmptyValue, SchemaMismatch

DIGEST_SIZE = 32
SALT_SIZE = 16
TOKEN_SIZE = 16

MINUTES_PER_DAY = 1440
DEFAULT_RETENTION_MINUTES = 14 * MINUTES_PER_DAY

_WS = re.compile(r"\s+")


class InfectionStatus(str, enum.Enum):
    UNKNOWN = "unknown"
    DIAGNOSED = "diagnosed"
    RECOVERED = "recovered"


class RiskStatus(str, enum.Enum):
    NOT_AT_RISK = "not_at_risk"
    AT_RISK = "at_risk"
    NOTIFIED = "notified"


_RISK_ORDER = {RiskStatus.NOT_AT_RISK: 0, RiskStatus.AT_RISK: 1, RiskStatus.NOTIFIED: 2}


def advance_risk(current: RiskStatus, target: RiskStatus) -> RiskStatus:
    """Monotone risk update; moving backwards needs an explicit clearance."""
    return target if _RISK_ORDER[target] > _RISK_ORDER[current] else current


class PlaceKind(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


def canonicalize(field_kind: str, raw: str) -> str:
    """Normalize a raw PII value so independently collected copies match.

    Phone numbers keep a leading ``+`` and their digits only; every other
    kind is trimmed, case-folded and has whitespace runs collapsed.
    """
    if field_kind == "phone":
        text = raw.strip()
        digits = "".join(ch for ch in text if ch.isdigit())
        if not digits:
            return ""
        return ("+" if text.startswith("+") else "") + digits
    return _WS.sub(" ", raw.strip()).casefold()


def _digest(salt: bytes, field_kind: str, value: bytes) -> bytes:
    if len(salt) != SALT_SIZE:
        raise ValueError(f"salt must be {SALT_SIZE} bytes, got {len(salt)}")
    kind = field_kind.encode("utf-8")
    h = hashlib.sha256()
    h.update(salt)
    h.update(len(kind).to_bytes(2, "big"))
    h.update(kind)
    h.update(value)
    return h.digest()


@dataclass(frozen=True, order=True)
class OpaqueId:
    digest: bytes

    def __post_init__(self):
        if not isinstance(self.digest, bytes) or len(self.digest) != DIGEST_SIZE:
            raise ValueError("OpaqueId digest must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, text: str) -> "OpaqueId":
        return cls(bytes.fromhex(text))

    def __repr__(self):
        return f"OpaqueId({self.digest[:6].hex()}..)"


def make_opaque_id(salt: bytes, field_kind: str, value: str) -> OpaqueId:
    """SHA-256 over ``salt || u16be(len(kind)) || kind || canonical value``."""
    canon = canonicalize(field_kind, value)
    if not canon:
        raise EmptyValue(f"{field_kind!r} value is empty after canonicalization")
    return OpaqueId(_digest(salt, field_kind, canon.encode("utf-8")))


def canonical_token(raw: bytes) -> bytes:
    """Bring a generated token to the 16-byte canonical form."""
    if len(raw) == TOKEN_SIZE:
        return bytes(raw)
    if not raw:
        raise EmptyValue("empty token")
    return hashlib.sha256(raw).digest()[:TOKEN_SIZE]


def token_digest(salt: bytes, token: bytes) -> bytes:
    return _digest(salt, "token", canonical_token(token))


class SubjectKind(str, enum.Enum):
    INDIVIDUAL = "individual"
    PLACE = "place"
    GENERATED = "generated"


@dataclass(frozen=True, order=True)
class SubjectRef:
    kind: SubjectKind
    digest: bytes

    def __post_init__(self):
        object.__setattr__(self, "kind", SubjectKind(self.kind))
        if len(self.digest) != DIGEST_SIZE:
            raise ValueError("subject digest must be 32 bytes")

    @classmethod
    def individual(cls, oid: OpaqueId) -> "SubjectRef":
        return cls(SubjectKind.INDIVIDUAL, oid.digest)

    @classmethod
    def place(cls, oid: OpaqueId) -> "SubjectRef":
        return cls(SubjectKind.PLACE, oid.digest)

    @classmethod
    def generated(cls, digest: bytes) -> "SubjectRef":
        return cls(SubjectKind.GENERATED, digest)


# Stand-in for "the device owner" when a user-side record is converted without
# an explicit identity; parties always pass their own reference instead.
LOCAL_SELF = SubjectRef(SubjectKind.INDIVIDUAL, bytes(DIGEST_SIZE))


@dataclass(frozen=True)
class TracedIndividual:
    descriptors: tuple  # sorted ((field_kind, OpaqueId), ...)
    infection_status: InfectionStatus = InfectionStatus.UNKNOWN
    risk_status: RiskStatus = RiskStatus.NOT_AT_RISK

    def __post_init__(self):
        if not self.descriptors:
            raise ValueError("TracedIndividual needs at least one descriptor")
        object.__setattr__(self, "descriptors", tuple(sorted(self.descriptors)))

    @property
    def ids(self) -> frozenset:
        return frozenset(oid.digest for _, oid in self.descriptors)


@dataclass(frozen=True)
class TracedPlace:
    place_id: OpaqueId
    kind: PlaceKind = PlaceKind.STATIC
    contaminated_since: Optional[int] = None

    @property
    def contaminated(self) -> bool:
        return self.contaminated_since is not None


@dataclass(frozen=True)
class GeneratedIdentifier:
    token: bytes
    digest: bytes
    created_at: int
    expires_at: int
    risk_status: RiskStatus = RiskStatus.NOT_AT_RISK

    def __post_init__(self):
        if len(self.token) != TOKEN_SIZE:
            raise ValueError("generated token must be in 16-byte canonical form")
        if self.expires_at <= self.created_at:
            raise ValueError("expires_at must be after created_at")


@dataclass(frozen=True)
class VisitRecord:
    subject: SubjectRef
    place: SubjectRef
    start: int
    end: int
    segment: Optional[int] = None
    day: Optional[int] = None

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError("visit interval start > end")
        if self.subject.kind is SubjectKind.PLACE:
            raise ValueError("visit subject must be an individual or generated token")
        if self.place.kind is SubjectKind.INDIVIDUAL:
            raise ValueError("visit place must be a place or generated token")

    @property
    def unitized(self) -> bool:
        return self.segment is not None


@dataclass(frozen=True)
class ContactRecord:
    subject_a: SubjectRef
    subject_b: SubjectRef
    start: int
    end: int
    segment: Optional[int] = None
    day: Optional[int] = None

    def __post_init__(self):
        if self.subject_a == self.subject_b:
            raise ValueError("contact record needs two distinct subjects")
        if self.start > self.end:
            raise ValueError("contact interval start > end")
        for s in (self.subject_a, self.subject_b):
            if s.kind is SubjectKind.PLACE:
                raise ValueError("contact subjects must be individuals or tokens")


@dataclass(frozen=True)
class PlaceStructure:
    child: OpaqueId
    parent: OpaqueId

    def __post_init__(self):
        if self.child == self.parent:
            raise ValueError("place cannot contain itself")


class SourceKind(str, enum.Enum):
    HOTEL_CHECKIN = "HotelCheckin"
    RIDE_TRIP = "RideTrip"
    RESTAURANT_SEATING = "RestaurantSeating"
    SUBWAY_TAP = "SubwayTap"
    GPS_SAMPLE = "GpsSample"
    BLE_TOKEN_EXCHANGE = "BleTokenExchange"
    QR_SCAN = "QrScan"


@dataclass(frozen=True)
class SourceRecord:
    source_kind: SourceKind
    payload: Mapping = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "source_kind", SourceKind(self.source_kind))
        except ValueError:
            raise SchemaMismatch(f"unknown source_kind {self.source_kind!r}") from None


UnifiedObject = Union[
    TracedIndividual, TracedPlace, GeneratedIdentifier, VisitRecord, ContactRecord, PlaceStructure
]


def references(obj) -> frozenset:
    """All 32-byte digests an object points at (used by forget and scans)."""
    if isinstance(obj, TracedIndividual):
        return obj.ids
    if isinstance(obj, TracedPlace):
        return frozenset([obj.place_id.digest])
    if isinstance(obj, GeneratedIdentifier):
        return frozenset([obj.digest])
    if isinstance(obj, VisitRecord):
        return frozenset([obj.subject.digest, obj.place.digest])
    if isinstance(obj, ContactRecord):
        return frozenset([obj.subject_a.digest, obj.subject_b.digest])
    if isinstance(obj, PlaceStructure):
        return frozenset([obj.child.digest, obj.parent.digest])
    raise TypeError(f"not a unified object: {type(obj).__name__}")


# -- serialization ----------------------------------------------------------------


def _ref(s: SubjectRef) -> dict:
    return {"kind": s.kind.value, "id": s.digest.hex()}


def _unref(d: Mapping) -> SubjectRef:
    return SubjectRef(SubjectKind(d["kind"]), bytes.fromhex(d["id"]))


def to_dict(obj) -> dict:
    """Plain-JSON form of a unified object; the dump format of ``convert``."""
    if isinstance(obj, TracedIndividual):
        return {
            "type": "TracedIndividual",
            "descriptors": [[k, oid.hex] for k, oid in obj.descriptors],
            "infection_status": obj.infection_status.value,
            "risk_status": obj.risk_status.value,
        }
    if isinstance(obj, TracedPlace):
        return {
            "type": "TracedPlace",
            "place_id": obj.place_id.hex,
            "kind": obj.kind.value,
            "contaminated_since": obj.contaminated_since,
        }
    if isinstance(obj, GeneratedIdentifier):
        return {
            "type": "GeneratedIdentifier",
            "token": obj.token.hex(),
            "digest": obj.digest.hex(),
            "created_at": obj.created_at,
            "expires_at": obj.expires_at,
            "risk_status": obj.risk_status.value,
        }
    if isinstance(obj, (VisitRecord, ContactRecord)):
        d = {"type": type(obj).__name__, "start": obj.start, "end": obj.end}
        if isinstance(obj, VisitRecord):
            d["subject"] = _ref(obj.subject)
            d["place"] = _ref(obj.place)
        else:
            d["subject_a"] = _ref(obj.subject_a)
            d["subject_b"] = _ref(obj.subject_b)
        if obj.segment is not None:
            d["segment"] = obj.segment
            d["day"] = obj.day
        return d
    if isinstance(obj, PlaceStructure):
        return {"type": "PlaceStructure", "child": obj.child.hex, "parent": obj.parent.hex}
    raise TypeError(f"not a unified object: {type(obj).__name__}")


def from_dict(d: Mapping):
    t = d["type"]
    if t == "TracedIndividual":
        return TracedIndividual(
            tuple((k, OpaqueId.from_hex(h)) for k, h in d["descriptors"]),
            InfectionStatus(d["infection_status"]),
            RiskStatus(d["risk_status"]),
        )
    if t == "TracedPlace":
        return TracedPlace(OpaqueId.from_hex(d["place_id"]), PlaceKind(d["kind"]), d["contaminated_since"])
    if t == "GeneratedIdentifier":
        return GeneratedIdentifier(
            bytes.fromhex(d["token"]),
            bytes.fromhex(d["digest"]),
            d["created_at"],
            d["expires_at"],
            RiskStatus(d["risk_status"]),
        )
    if t == "VisitRecord":
        return VisitRecord(
            _unref(d["subject"]), _unref(d["place"]), d["start"], d["end"], d.get("segment"), d.get("day")
        )
    if t == "ContactRecord":
        return ContactRecord(
            _unref(d["subject_a"]), _unref(d["subject_b"]), d["start"], d["end"], d.get("segment"), d.get("day")
        )
    if t == "PlaceStructure":
        return PlaceStructure(OpaqueId.from_hex(d["child"]), OpaqueId.from_hex(d["parent"]))
    raise ValueError(f"unknown object type {t!r}")
