"""Converters from heterogeneous source records into unified objects."""

from __future__ import annotations

import json
from typing import Iterable, Optional

from .errors import SchemaMismatch
from .granularity import GridConfig, grid_cell, grid_edges
from .unified_format import (
    DEFAULT_RETENTION_MINUTES,
    LOCAL_SELF,
    ContactRecord,
    GeneratedIdentifier,
    PlaceKind,
    PlaceStructure,
    SourceKind,
    SourceRecord,
    SubjectRef,
    TracedIndividual,
    TracedPlace,
    VisitRecord,
    canonical_token,
    canonicalize,
    make_opaque_id,
    to_dict,
    token_digest,
)

SCHEMAS = {
    SourceKind.HOTEL_CHECKIN: ("guest_email", "room_id", "hotel_id", "checkin_ts", "checkout_ts"),
    SourceKind.RIDE_TRIP: (
        "driver_id", "customer_id", "car_id", "start_ts", "end_ts",
        "start_lat", "start_lon", "end_lat", "end_lon",
    ),
    SourceKind.RESTAURANT_SEATING: ("customer_email", "table_id", "restaurant_id", "start_ts", "end_ts"),
    SourceKind.SUBWAY_TAP: ("card_id", "station_id", "ts"),
    SourceKind.GPS_SAMPLE: ("lat", "lon", "ts"),
    SourceKind.BLE_TOKEN_EXCHANGE: ("token_hex", "ts"),
    SourceKind.QR_SCAN: ("place_id", "ts"),
}

# Payload fields holding PII, with the descriptor kind used to hash them.
PII_FIELDS = {
    SourceKind.HOTEL_CHECKIN: {"guest_email": "email"},
    SourceKind.RIDE_TRIP: {"driver_id": "app-username", "customer_id": "app-username"},
    SourceKind.RESTAURANT_SEATING: {"customer_email": "email"},
    SourceKind.SUBWAY_TAP: {"card_id": "card"},
}

USER_SIDE_KINDS = frozenset({SourceKind.GPS_SAMPLE, SourceKind.BLE_TOKEN_EXCHANGE, SourceKind.QR_SCAN})


def place_id(salt: bytes, name: str):
    """Platform-wide opaque ID for a named place (``hotel/room``, plate, ...)."""
    return make_opaque_id(salt, "place", name)


def _check_schema(record: SourceRecord) -> dict:
    expected = SCHEMAS[record.source_kind]
    keys = set(record.payload)
    missing = [k for k in expected if k not in keys]
    extra = sorted(keys - set(expected))
    if extra:
        raise SchemaMismatch(f"{record.source_kind.value}: unexpected key {extra[0]!r}", key=extra[0])
    if missing:
        raise SchemaMismatch(f"{record.source_kind.value}: missing key {missing[0]!r}", key=missing[0])
    return dict(record.payload)


def _ts(p: dict, key: str) -> int:
    v = p[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaMismatch(f"{key!r} must be an integer minute timestamp", key=key)
    return v


def _num(p: dict, key: str) -> float:
    v = p[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaMismatch(f"{key!r} must be numeric", key=key)
    return float(v)


def _person(salt, kind, value):
    oid = make_opaque_id(salt, kind, str(value))
    return TracedIndividual(((kind, oid),)), SubjectRef.individual(oid)


def convert(
    record: SourceRecord,
    salt: bytes,
    owner: Optional[SubjectRef] = None,
    *,
    grid: GridConfig = GridConfig(),
    retention_minutes: int = DEFAULT_RETENTION_MINUTES,
) -> list:
    """Turn one source record into domain and relation objects.

    ``owner`` is the device owner for user-side kinds (GPS, BLE, QR); it
    defaults to :data:`LOCAL_SELF`.
    """
    p = _check_schema(record)
    kind = record.source_kind
    me = owner if owner is not None else LOCAL_SELF

    if kind is SourceKind.HOTEL_CHECKIN:
        guest, gref = _person(salt, "email", p["guest_email"])
        hotel = place_id(salt, str(p["hotel_id"]))
        room = place_id(salt, f"{p['hotel_id']}/{p['room_id']}")
        return [
            guest,
            TracedPlace(hotel),
            TracedPlace(room),
            PlaceStructure(room, hotel),
            VisitRecord(gref, SubjectRef.place(room), _ts(p, "checkin_ts"), _ts(p, "checkout_ts")),
        ]

    if kind is SourceKind.RIDE_TRIP:
        for k in ("start_lat", "start_lon", "end_lat", "end_lon"):
            _num(p, k)
        driver, dref = _person(salt, "app-username", p["driver_id"])
        customer, cref = _person(salt, "app-username", p["customer_id"])
        if dref == cref:
            raise SchemaMismatch("driver and customer are the same person", key="customer_id")
        car = place_id(salt, str(p["car_id"]))
        start, end = _ts(p, "start_ts"), _ts(p, "end_ts")
        carref = SubjectRef.place(car)
        return [
            driver,
            customer,
            TracedPlace(car, PlaceKind.DYNAMIC),
            ContactRecord(dref, cref, start, end),
            VisitRecord(dref, carref, start, end),
            VisitRecord(cref, carref, start, end),
        ]

    if kind is SourceKind.RESTAURANT_SEATING:
        guest, gref = _person(salt, "email", p["customer_email"])
        rest = place_id(salt, str(p["restaurant_id"]))
        table = place_id(salt, f"{p['restaurant_id']}/{p['table_id']}")
        return [
            guest,
            TracedPlace(rest),
            TracedPlace(table),
            PlaceStructure(table, rest),
            VisitRecord(gref, SubjectRef.place(table), _ts(p, "start_ts"), _ts(p, "end_ts")),
        ]

    if kind is SourceKind.SUBWAY_TAP:
        rider, rref = _person(salt, "card", p["card_id"])
        station = place_id(salt, str(p["station_id"]))
        ts = _ts(p, "ts")
        return [rider, TracedPlace(station), VisitRecord(rref, SubjectRef.place(station), ts, ts)]

    if kind is SourceKind.GPS_SAMPLE:
        lat, lon, ts = _num(p, "lat"), _num(p, "lon"), _ts(p, "ts")
        cell = grid_cell(lat, lon, grid, salt)
        return [
            TracedPlace(cell),
            *grid_edges(lat, lon, grid, salt),
            VisitRecord(me, SubjectRef.place(cell), ts, ts),
        ]

    if kind is SourceKind.BLE_TOKEN_EXCHANGE:
        try:
            raw = bytes.fromhex(str(p["token_hex"]))
        except ValueError:
            raise SchemaMismatch("'token_hex' is not hex", key="token_hex") from None
        ts = _ts(p, "ts")
        token = canonical_token(raw)
        digest = token_digest(salt, token)
        return [
            GeneratedIdentifier(token, digest, ts, ts + retention_minutes),
            ContactRecord(me, SubjectRef.generated(digest), ts, ts),
        ]

    if kind is SourceKind.QR_SCAN:
        place = place_id(salt, str(p["place_id"]))
        ts = _ts(p, "ts")
        return [TracedPlace(place), VisitRecord(me, SubjectRef.place(place), ts, ts)]

    raise SchemaMismatch(f"unhandled source kind {kind!r}")  # pragma: no cover


def pii_values(record: SourceRecord) -> list:
    """Canonical raw PII strings carried by a record (for egress checks)."""
    fields = PII_FIELDS.get(record.source_kind, {})
    return [canonicalize(kind, str(record.payload[k])) for k, kind in fields.items()]


def convert_lines(lines: Iterable[str], salt: bytes, owner: Optional[SubjectRef] = None, **kw) -> list:
    """Convert JSON-lines source records; errors carry the 1-based record number."""
    out = []
    n = 0
    for line in lines:
        if not line.strip():
            continue
        n += 1
        try:
            d = json.loads(line)
            if not isinstance(d, dict) or set(d) - {"source_kind", "payload"} or "source_kind" not in d:
                raise SchemaMismatch("record must be {source_kind, payload}")
            rec = SourceRecord(d["source_kind"], d.get("payload", {}))
            out.extend(convert(rec, salt, owner, **kw))
        except SchemaMismatch as exc:
            raise SchemaMismatch(str(exc), key=exc.key, record_number=n) from None
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"invalid JSON: {exc.msg}", record_number=n) from None
    return out


def dump_objects(objs: Iterable) -> str:
    return "".join(json.dumps(to_dict(o), sort_keys=True, separators=(",", ":")) + "\n" for o in objs)
