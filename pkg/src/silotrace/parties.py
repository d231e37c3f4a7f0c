"""Party state machines and the closed tracing loop.

Three party types share one :class:`World`: a single medical authority (MA),
businesses, and users.  Parties only exchange bytes through ``world.bus``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import aggregation as agg
from .bus import EventLog, MessageBus
from .convert import USER_SIDE_KINDS, convert
from .errors import (
    EmptySet,
    InvariantViolation,
    MissingProof,
    ModeUnavailable,
    NoChannel,
    NoConsent,
    NotListed,
    SilotraceError,
)
from .granularity import GridConfig, PlaceTree, UnitizationConfig, expand, unitize_many
from .psi import (
    PsiCardinality,
    PsiIntersection,
    PsiMode,
    PsiSecretKey,
    decode_round1,
    decode_round2,
    encode_round1,
    encode_round2,
    psi_receiver_finish,
    psi_receiver_round1,
    psi_sender_respond,
)
from .unified_format import (
    MINUTES_PER_DAY,
    ContactRecord,
    GeneratedIdentifier,
    InfectionStatus,
    OpaqueId,
    PlaceKind,
    PlaceStructure,
    RiskStatus,
    SourceRecord,
    SubjectKind,
    SubjectRef,
    TracedIndividual,
    TracedPlace,
    VisitRecord,
    advance_risk,
    canonical_token,
    make_opaque_id,
    token_digest,
)

logger = logging.getLogger(__name__)

MA_NAME = "ma"
AGGREGATOR2_NAME = "aggregator2"


@dataclass
class TraceConfig:
    salt: bytes = bytes(16)
    segment_minutes: int = 15
    cell_degrees: float = 0.001
    retention_minutes: int = 14 * MINUTES_PER_DAY
    decontamination_minutes: int = 3 * MINUTES_PER_DAY
    query_window_minutes: int = 14 * MINUTES_PER_DAY
    psi_mode: PsiMode = PsiMode.PSI
    threshold: int = agg.DEFAULT_THRESHOLD
    epsilon: float = math.log(3)
    heatmap_method: str = "secure-sum"
    seed: int = 0

    def __post_init__(self):
        self.psi_mode = PsiMode(self.psi_mode)
        if self.heatmap_method not in ("secure-sum", "ldp"):
            raise ValueError(f"unknown heatmap method {self.heatmap_method!r}")

    @property
    def unitization(self) -> UnitizationConfig:
        return UnitizationConfig(self.segment_minutes)

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.cell_degrees)


class Store:
    """A party's local objects in unified format."""

    def __init__(self):
        self.individuals: dict = {}
        self.places: dict = {}
        self.generated: dict = {}
        self.visits: list = []
        self.contacts: list = []
        self.structure: list = []

    def add(self, obj) -> None:
        if isinstance(obj, TracedIndividual):
            self.individuals.setdefault(obj.ids, obj)
        elif isinstance(obj, TracedPlace):
            self.places.setdefault(obj.place_id.digest, obj)
        elif isinstance(obj, GeneratedIdentifier):
            self.generated.setdefault(obj.digest, obj)
        elif isinstance(obj, VisitRecord):
            self.visits.append(obj)
        elif isinstance(obj, ContactRecord):
            self.contacts.append(obj)
        elif isinstance(obj, PlaceStructure):
            if obj not in self.structure:
                self.structure.append(obj)
        else:
            raise TypeError(f"cannot store {type(obj).__name__}")

    def extend(self, objs) -> None:
        for o in objs:
            self.add(o)

    def objects(self):
        yield from self.individuals.values()
        yield from self.places.values()
        yield from self.generated.values()
        yield from self.visits
        yield from self.contacts
        yield from self.structure

    def __len__(self):
        return sum(1 for _ in self.objects())

    def expire(self, now: int, retention: int) -> int:
        before = len(self)
        self.visits = [v for v in self.visits if now - v.end <= retention]
        self.contacts = [c for c in self.contacts if now - c.end <= retention]
        self.generated = {
            d: g for d, g in self.generated.items() if g.expires_at > now and now - g.created_at <= retention
        }
        return before - len(self)

    def forget(self, digest: bytes) -> int:
        before = len(self)
        self.individuals = {k: v for k, v in self.individuals.items() if digest not in k}
        self.places.pop(digest, None)
        self.generated.pop(digest, None)
        self.visits = [v for v in self.visits if digest not in (v.subject.digest, v.place.digest)]
        self.contacts = [c for c in self.contacts if digest not in (c.subject_a.digest, c.subject_b.digest)]
        self.structure = [s for s in self.structure if digest not in (s.child.digest, s.parent.digest)]
        return before - len(self)


@dataclass
class StartingPoint:
    kind: str  # "individual", "token" or "place"
    proof: str
    registered_at: int
    source: str


@dataclass
class MaState:
    name: str = MA_NAME
    starting_points: dict = field(default_factory=dict)
    heatmap: Optional[agg.HeatMap] = None
    index_map: Optional[agg.PlaceIndexMap] = None

    def of_kind(self, kind: str) -> frozenset:
        return frozenset(d for d, sp in self.starting_points.items() if sp.kind == kind)

    @property
    def places(self) -> frozenset:
        return self.of_kind("place")

    def elements(self) -> list:
        return sorted(self.starting_points)


@dataclass(frozen=True)
class DiagnosisReport:
    descriptors: frozenset = frozenset()
    tokens: frozenset = frozenset()
    places: frozenset = frozenset()
    proof: str = ""

    def to_bytes(self) -> bytes:
        return json.dumps(
            {
                "descriptors": sorted(d.hex() for d in self.descriptors),
                "tokens": sorted(t.hex() for t in self.tokens),
                "places": sorted(p.hex() for p in self.places),
                "proof": self.proof,
            },
            sort_keys=True,
        ).encode()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DiagnosisReport":
        d = json.loads(buf)
        return cls(
            frozenset(bytes.fromhex(x) for x in d["descriptors"]),
            frozenset(bytes.fromhex(x) for x in d["tokens"]),
            frozenset(bytes.fromhex(x) for x in d["places"]),
            d["proof"],
        )


class NotificationCause(str, enum.Enum):
    DIRECT_CONTACT = "DirectContact"
    INDIRECT_CONTACT_PLACE = "IndirectContactPlace"
    BUSINESS_CONTAMINATION = "BusinessContamination"


@dataclass(frozen=True)
class Notification:
    recipient: str
    cause: NotificationCause
    evidence: tuple  # hex digests of the recipient's own objects
    issued_at: int


@dataclass
class UserState:
    name: str
    identity: TracedIndividual
    store: Store = field(default_factory=Store)
    emitted: list = field(default_factory=list)  # own broadcast GeneratedIdentifiers
    query_window: int = 14 * MINUTES_PER_DAY
    infection_status: InfectionStatus = InfectionStatus.UNKNOWN
    risk_status: RiskStatus = RiskStatus.NOT_AT_RISK
    notifications: list = field(default_factory=list)
    seen_evidence: set = field(default_factory=set)

    @property
    def owner(self) -> SubjectRef:
        return SubjectRef.individual(self.identity.descriptors[0][1])

    def query_elements(self, now: int) -> dict:
        """Own descriptors, collected tokens and visited places inside the window."""
        since = now - self.query_window
        out = {d: "descriptor" for d in self.identity.ids}
        for g in self.store.generated.values():
            if g.expires_at > now and g.created_at >= since:
                out[g.digest] = "token"
        for c in self.store.contacts:
            if c.end >= since:
                for s in (c.subject_a, c.subject_b):
                    if s.kind is SubjectKind.GENERATED and s.digest not in out:
                        out[s.digest] = "token"
        for v in self.store.visits:
            if v.end >= since and v.place.digest not in out:
                out[v.place.digest] = "place"
        return out


@dataclass
class BusinessState:
    name: str
    store: Store = field(default_factory=Store)
    tree: PlaceTree = field(default_factory=PlaceTree)
    owned: set = field(default_factory=set)
    staff: set = field(default_factory=set)
    psi_mode: PsiMode = PsiMode.PSI
    query_window: int = 14 * MINUTES_PER_DAY
    contaminated: dict = field(default_factory=dict)  # place digest -> since
    channels: dict = field(default_factory=dict)  # customer digest -> handle
    consent: set = field(default_factory=set)
    matched_customers: set = field(default_factory=set)  # PSI mode only
    exposed: set = field(default_factory=set)  # PSI mode only
    place_counts: dict = field(default_factory=dict)  # PSI-CA mode only
    auto_notify: bool = False

    def add_place(self, oid: OpaqueId, kind: PlaceKind = PlaceKind.STATIC) -> None:
        self.owned.add(oid.digest)
        self.store.add(TracedPlace(oid, kind))

    def ingest(self, objs) -> None:
        for o in objs:
            self.store.add(o)
            if isinstance(o, TracedPlace):
                self.owned.add(o.place_id.digest)
            elif isinstance(o, PlaceStructure):
                self.tree.add(o)
                self.owned.update((o.child.digest, o.parent.digest))

    def mark_contaminated(self, digest: bytes, since: int) -> None:
        self.contaminated.setdefault(digest, since)
        old = self.store.places.get(digest)
        kind = old.kind if old else PlaceKind.STATIC
        self.store.places[digest] = TracedPlace(OpaqueId(digest), kind, self.contaminated[digest])

    def clear_contamination(self, digest: bytes) -> None:
        self.contaminated.pop(digest, None)
        old = self.store.places.get(digest)
        if old is not None:
            self.store.places[digest] = dataclasses.replace(old, contaminated_since=None)

    def exposure_set(self) -> list:
        """What users are matched against: contaminated leaves, their
        ancestors (so coarse visits match), and direct contacts of carriers."""
        out = set(self.contaminated)
        for d in self.contaminated:
            out.update(self.tree.ancestors(d))
        out |= self.exposed
        return sorted(out)

    def recent_visits(self, now: int) -> list:
        since = now - self.query_window
        return [v for v in self.store.visits if v.end >= since]

    def recent_contacts(self, now: int) -> list:
        since = now - self.query_window
        return [c for c in self.store.contacts if c.end >= since]


@dataclass
class BusinessCheckResult:
    business: str
    matched_places: frozenset = frozenset()
    matched_customers: Optional[frozenset] = None  # None in PSI-CA mode
    customer_count: int = 0
    place_counts: dict = field(default_factory=dict)
    contaminated: tuple = ()  # newly contaminated from direct matches
    staff_rotation: tuple = ()  # newly contaminated through employee visits
    reported: tuple = ()

    @property
    def newly_contaminated(self) -> tuple:
        return tuple(sorted(set(self.contaminated) | set(self.staff_rotation)))


class World:
    """Every party plus the bus, clock and seeded randomness of one run."""

    def __init__(self, config: TraceConfig):
        self.config = config
        self.ma = MaState()
        self.businesses: dict = {}
        self.users: dict = {}
        self.log = EventLog()
        self.bus = MessageBus(self.log)
        self.now = 0
        self.cycle = 0
        self.pending: list = []
        self._draws = 0
        self.directory: dict = {}  # place digest -> set of business names
        self.heatmap_csv: str = ""

    # -- setup --------------------------------------------------------------------

    def rng(self) -> np.random.Generator:
        self._draws += 1
        return np.random.default_rng(np.random.SeedSequence(self.config.seed, spawn_key=(self._draws,)))

    def add_business(self, name: str, **kw) -> BusinessState:
        kw.setdefault("psi_mode", self.config.psi_mode)
        kw.setdefault("query_window", self.config.query_window_minutes)
        b = BusinessState(name, **kw)
        self.businesses[name] = b
        return b

    def add_user(self, name: str, descriptors: dict, emitted_tokens=(), query_window=None) -> UserState:
        salt = self.config.salt
        desc = tuple((k, make_opaque_id(salt, k, v)) for k, v in sorted(descriptors.items()))
        u = UserState(name, TracedIndividual(desc))
        u.query_window = query_window if query_window is not None else self.config.query_window_minutes
        for token, created in emitted_tokens:
            tok = canonical_token(token)
            u.emitted.append(
                GeneratedIdentifier(tok, token_digest(salt, tok), created, created + self.config.retention_minutes)
            )
        self.users[name] = u
        return u

    def refresh_directory(self) -> None:
        self.directory = {}
        for name, b in self.businesses.items():
            for d in b.owned:
                self.directory.setdefault(d, set()).add(name)

    def party_names(self) -> set:
        return {MA_NAME, *self.businesses, *self.users}

    # -- timeline events ----------------------------------------------------------

    def ingest(self, party: str, record: SourceRecord) -> list:
        cfg = self.config
        if party in self.users:
            u = self.users[party]
            objs = convert(record, cfg.salt, u.owner, grid=cfg.grid, retention_minutes=cfg.retention_minutes)
            u.store.extend(objs)
        elif party in self.businesses:
            if record.source_kind in USER_SIDE_KINDS:
                raise SilotraceError(f"{record.source_kind.value} records belong to users, not {party}")
            objs = convert(record, cfg.salt, grid=cfg.grid, retention_minutes=cfg.retention_minutes)
            self.businesses[party].ingest(objs)
            self.refresh_directory()
        else:
            raise SilotraceError(f"unknown party {party!r}")
        self.log.emit(self.now, party, "record_ingested", {"source_kind": record.source_kind.value, "objects": len(objs)})
        return objs

    def diagnose(self, user_name: str, proof: str) -> list:
        """The user's client files a diagnosis report with the MA."""
        u = self.users[user_name]
        since = self.now - u.query_window
        report = DiagnosisReport(
            descriptors=u.identity.ids,
            tokens=frozenset(g.digest for g in u.emitted if g.created_at >= since and g.expires_at > since),
            places=frozenset(v.place.digest for v in u.store.visits if v.end >= since and v.place.kind is SubjectKind.PLACE),
            proof=proof,
        )
        session = self.bus.new_session()
        self.bus.send(self.now, user_name, MA_NAME, "report.diagnosis", report.to_bytes(), session)
        env = self.bus.deliver(MA_NAME, user_name)
        added = ma_register_diagnosis(self.ma, DiagnosisReport.from_bytes(env.payload), self.now, source=user_name)
        u.infection_status = InfectionStatus.DIAGNOSED
        self.log.emit(self.now, MA_NAME, "registration", {"reporter": user_name, "added": len(added)})
        self.pending.append(user_name)
        return added

    def medical_test(self, user_name: str, positive: bool, proof: str = "") -> None:
        u = self.users[user_name]
        self.log.emit(self.now, user_name, "medical_test", {"positive": positive})
        if positive:
            self.diagnose(user_name, proof)
        else:
            u.risk_status = RiskStatus.NOT_AT_RISK  # explicit clearance

    def advance_clock(self, tick: int) -> None:
        """Periodic maintenance: retention, decontamination, then user queries."""
        self.now = tick
        removed = sum(expire_records(p, tick, self.config.retention_minutes) for p in self._all_parties())
        period = self.config.decontamination_minutes
        cleared = []
        for d in sorted(self.ma.places):
            if decontaminate(self.ma, d, tick, period):
                cleared.append(d.hex())
        for b in self.businesses.values():
            for d, since in sorted(b.contaminated.items()):
                if tick - since >= period:
                    b.clear_contamination(d)
        self.log.emit(tick, MA_NAME, "maintenance", {"expired": removed, "decontaminated": cleared})
        trace_cycle(self)

    def _all_parties(self):
        yield self.ma
        yield from self.businesses.values()
        yield from self.users.values()

    # -- protocol plumbing ----------------------------------------------------------

    def psi_session(self, receiver: str, receiver_set, sender: str, sender_set, mode: PsiMode):
        """Run one PSI / PSI-CA instance over the bus; receiver gets the result."""
        receiver_set = sorted(set(receiver_set))
        if not receiver_set:
            return PsiIntersection(()) if mode is PsiMode.PSI else PsiCardinality(0)
        session = self.bus.new_session()
        m1, state = psi_receiver_round1(receiver_set, self.rng())
        self.bus.send(self.now, receiver, sender, "psi.round1", encode_round1(m1), session)
        msg = decode_round1(self.bus.deliver(sender, receiver).payload)
        key = PsiSecretKey.generate(self.rng())
        m2 = psi_sender_respond(msg, sorted(set(sender_set)), key, mode, self.rng())
        self.bus.send(self.now, sender, receiver, "psi.round2", encode_round2(m2), session)
        resp = decode_round2(self.bus.deliver(receiver, sender).payload)
        return psi_receiver_finish(state, resp)

    def check_invariants(self) -> None:
        for b in self.businesses.values():
            stray = set(b.contaminated) - b.owned
            if stray:
                raise InvariantViolation(f"{b.name} marked places it does not own")
            if b.psi_mode is PsiMode.PSI_CA and b.matched_customers:
                raise InvariantViolation(f"{b.name} holds customer matches in PSI-CA mode")
        for sp in self.ma.starting_points.values():
            if not sp.proof:
                raise InvariantViolation("starting point without proof stub")
            if sp.registered_at > self.now:
                raise InvariantViolation("starting point registered in the future")

    def ma_inbound_leaks(self) -> list:
        """Descriptors of never-reported users that reached the MA in clear."""
        reported = {n for n, u in self.users.items() if u.infection_status is InfectionStatus.DIAGNOSED}
        inbound = [e.payload for e in self.bus.inbound(MA_NAME)]
        leaks = []
        for name, u in self.users.items():
            if name in reported:
                continue
            for d in u.identity.ids:
                if any(d in p or d.hex().encode() in p for p in inbound):
                    leaks.append((name, d.hex()))
        return leaks


# -- MA operations --------------------------------------------------------------------


def ma_register_diagnosis(ma: MaState, report: DiagnosisReport, now: int, source: str = "") -> list:
    """Add a verified carrier's pseudonyms, tokens and places to the starting points."""
    if not report.proof or not report.proof.strip():
        raise MissingProof("diagnosis report carries no proof record")
    added = []
    for kind, items in (("individual", report.descriptors), ("token", report.tokens), ("place", report.places)):
        for d in sorted(items):
            if d not in ma.starting_points:
                ma.starting_points[d] = StartingPoint(kind, report.proof, now, source)
                added.append(d)
    return added


def ma_register_places(ma: MaState, places, now: int, source: str) -> list:
    added = []
    for d in sorted(places):
        if d not in ma.starting_points:
            ma.starting_points[d] = StartingPoint("place", f"business-report:{source}", now, source)
            added.append(d)
    return added


def decontaminate(ma: MaState, place: bytes, now: int, period: int = 3 * MINUTES_PER_DAY) -> bool:
    """Drop a listed place once it has been listed for ``period`` minutes."""
    sp = ma.starting_points.get(place)
    if sp is None or sp.kind != "place":
        raise NotListed(place.hex())
    if now - sp.registered_at >= period:
        del ma.starting_points[place]
        return True
    return False


def expire_records(party, now: int, retention: int = 14 * MINUTES_PER_DAY) -> int:
    """Delete everything older than ``retention``; tokens also honor their own expiry."""
    if isinstance(party, MaState):
        stale = [
            d for d, sp in party.starting_points.items()
            if sp.kind != "place" and now - sp.registered_at > retention
        ]
        for d in stale:
            del party.starting_points[d]
        return len(stale)
    removed = party.store.expire(now, retention)
    if isinstance(party, UserState):
        keep = [g for g in party.emitted if g.expires_at > now and now - g.created_at <= retention]
        removed += len(party.emitted) - len(keep)
        party.emitted = keep
    return removed


def forget(party, subject: bytes) -> int:
    """Remove every object referencing ``subject``; returns how many went."""
    if isinstance(subject, OpaqueId):
        subject = subject.digest
    if isinstance(party, MaState):
        return 1 if party.starting_points.pop(subject, None) is not None else 0
    removed = party.store.forget(subject)
    if isinstance(party, UserState):
        keep = [g for g in party.emitted if g.digest != subject]
        removed += len(party.emitted) - len(keep)
        party.emitted = keep
    elif isinstance(party, BusinessState):
        for coll in (party.consent, party.matched_customers, party.exposed, party.staff):
            coll.discard(subject)
        party.channels.pop(subject, None)
    return removed


# -- business operations --------------------------------------------------------------


def _leaves(tree: PlaceTree, places) -> set:
    out = set()
    for p in places:
        out |= tree.leaves(p)
    return out


def business_check(world: World, name: str) -> BusinessCheckResult:
    """Business (PSI receiver) against the MA's starting points."""
    b = world.businesses[name]
    ma_set = world.ma.elements()
    visits = b.recent_visits(world.now)
    customer_visits = [v for v in visits if v.subject.digest not in b.staff]
    staff_visits = [v for v in visits if v.subject.digest in b.staff]
    contacts = b.recent_contacts(world.now)
    customers = {v.subject.digest for v in customer_visits}
    for c in contacts:
        customers.update(s.digest for s in (c.subject_a, c.subject_b))
    customers -= b.staff
    places = set(b.owned)

    result = BusinessCheckResult(name)
    seeds = set()
    if b.psi_mode is PsiMode.PSI:
        res = world.psi_session(name, customers | places, MA_NAME, ma_set, PsiMode.PSI)
        matched = set(res.elements)
        result.matched_places = frozenset(matched & places)
        matched_customers = frozenset(matched - places)
        result.matched_customers = matched_customers
        result.customer_count = len(matched_customers)
        b.matched_customers |= matched_customers
        seeds = {v.place.digest for v in customer_visits if v.subject.digest in matched_customers}
        for c in contacts:
            a, z = c.subject_a.digest, c.subject_b.digest
            if a in matched_customers and z not in matched_customers:
                b.exposed.add(z)
            if z in matched_customers and a not in matched_customers:
                b.exposed.add(a)
    else:
        res = world.psi_session(name, places, MA_NAME, ma_set, PsiMode.PSI)
        result.matched_places = frozenset(res.elements)
        by_place: dict = {}
        for v in customer_visits:
            by_place.setdefault(v.place.digest, set()).add(v.subject.digest)
        for p in sorted(by_place):
            ca = world.psi_session(name, by_place[p], MA_NAME, ma_set, PsiMode.PSI_CA)
            if ca.count:
                result.place_counts[p] = ca.count
                b.place_counts[p] = max(b.place_counts.get(p, 0), ca.count)
        result.customer_count = sum(result.place_counts.values())
        seeds = set(result.place_counts)

    before = set(b.contaminated)
    direct = _leaves(b.tree, set(result.matched_places) | seeds)
    closure = before | direct
    staff_sets: dict = {}
    for v in staff_visits:
        staff_sets.setdefault(v.subject.digest, set()).update(_leaves(b.tree, [v.place.digest]))
    changed = True
    while changed:
        changed = False
        for leaves in staff_sets.values():
            if leaves & closure and not leaves <= closure:
                closure |= leaves
                changed = True
    result.contaminated = tuple(sorted(direct - before))
    result.staff_rotation = tuple(sorted(closure - before - direct))
    for d in result.newly_contaminated:
        b.mark_contaminated(d, world.now)
        world.log.emit(world.now, name, "place_contaminated", {
            "place": d.hex(),
            "via": "staff-rotation" if d in result.staff_rotation else "match",
        })

    new = result.newly_contaminated
    if new:
        session = world.bus.new_session()
        payload = json.dumps({"places": [d.hex() for d in new]}).encode()
        world.bus.send(world.now, name, MA_NAME, "report.places", payload, session)
        env = world.bus.deliver(MA_NAME, name)
        places_in = [bytes.fromhex(h) for h in json.loads(env.payload)["places"]]
        result.reported = tuple(ma_register_places(world.ma, places_in, world.now, name))

    world.log.emit(world.now, name, "business_check", {
        "mode": b.psi_mode.value,
        "matched_places": sorted(d.hex() for d in result.matched_places),
        "customer_count": result.customer_count,
        "contaminated": [d.hex() for d in result.contaminated],
        "staff_rotation": [d.hex() for d in result.staff_rotation],
    })
    if b.auto_notify and b.psi_mode is PsiMode.PSI:
        targets = [c for c in at_risk_customers(world, name) if c in b.consent and c in b.channels]
        if targets:
            business_notify(world, name, targets)
    return result


def at_risk_customers(world: World, name: str) -> list:
    """Customers a PSI-mode business can identify as exposed from its own data."""
    b = world.businesses[name]
    if b.psi_mode is not PsiMode.PSI:
        raise ModeUnavailable("customer identities are unknown in PSI-CA mode")
    out = set(b.exposed)
    for v in b.recent_visits(world.now):
        d = v.subject.digest
        if d in b.staff or d in b.matched_customers:
            continue
        if b.tree.leaves(v.place.digest) & set(b.contaminated):
            out.add(d)
    return sorted(out)


def business_notify(world: World, name: str, customers) -> list:
    """Contact consenting customers over the business's own channel."""
    b = world.businesses[name]
    if b.psi_mode is not PsiMode.PSI:
        raise ModeUnavailable("customer identities are unknown in PSI-CA mode")
    customers = sorted(set(customers))
    for c in customers:
        if c not in b.consent:
            raise NoConsent(f"customer {c.hex()[:12]} has not consented")
        if c not in b.channels:
            raise NoChannel(f"no contact channel for customer {c.hex()[:12]}")
    out = []
    for c in customers:
        handle = b.channels[c]
        note = Notification(handle, NotificationCause.BUSINESS_CONTAMINATION, (c.hex(),), world.now)
        session = world.bus.new_session()
        world.bus.send(world.now, name, handle, "notify.business", json.dumps({
            "cause": note.cause.value, "evidence": list(note.evidence),
        }).encode(), session)
        world.bus.deliver(handle, name)
        target = handle.split(":", 1)[-1]
        if target in world.users:
            u = world.users[target]
            u.notifications.append(note)
            u.risk_status = advance_risk(u.risk_status, RiskStatus.NOTIFIED)
        world.log.emit(world.now, name, "business_notification", {"channel": handle})
        out.append(note)
    return out


# -- user operations ------------------------------------------------------------------


def visited_businesses(world: World, user: UserState) -> list:
    since = world.now - user.query_window
    names = set()
    for v in user.store.visits:
        if v.end >= since:
            names |= world.directory.get(v.place.digest, set())
    return sorted(names)


def user_query(world: World, name: str) -> Optional[Notification]:
    """User (PSI receiver) against the MA and every business visited in the window."""
    u = world.users[name]
    if u.infection_status is InfectionStatus.DIAGNOSED:
        return None
    elements = u.query_elements(world.now)
    evidence = set()
    res = world.psi_session(name, elements, MA_NAME, world.ma.elements(), PsiMode.PSI)
    evidence |= res.elements
    for bname in visited_businesses(world, u):
        b = world.businesses[bname]
        res = world.psi_session(name, elements, bname, b.exposure_set(), PsiMode.PSI)
        evidence |= res.elements
    if not evidence <= set(elements):
        raise InvariantViolation("PSI returned an element the user never supplied")
    world.log.emit(world.now, name, "user_query", {"matches": len(evidence)})
    new = evidence - u.seen_evidence
    if not new:
        return None
    u.seen_evidence |= evidence
    direct = any(elements[d] in ("token", "descriptor") for d in evidence)
    cause = NotificationCause.DIRECT_CONTACT if direct else NotificationCause.INDIRECT_CONTACT_PLACE
    u.risk_status = advance_risk(u.risk_status, RiskStatus.AT_RISK)
    note = Notification(name, cause, tuple(sorted(d.hex() for d in evidence)), world.now)
    u.notifications.append(note)
    u.risk_status = advance_risk(u.risk_status, RiskStatus.NOTIFIED)
    world.log.emit(world.now, name, "notification", {"cause": cause.value, "evidence": list(note.evidence)})
    return note


# -- heat map -------------------------------------------------------------------------


def compute_heatmap(world: World) -> Optional[agg.HeatMap]:
    """Carriers secret-share unitized visit counts to the two aggregators."""
    cfg = world.config
    carriers = sorted(n for n, u in world.users.items() if u.infection_status is InfectionStatus.DIAGNOSED)
    index_map = agg.build_index_map(sorted(world.directory))
    world.ma.index_map = index_map
    if len(carriers) < agg.MIN_USERS or index_map.ell == 0:
        world.log.emit(world.now, MA_NAME, "heatmap_skipped", {"carriers": len(carriers)})
        return None
    vectors = []
    for n in carriers:
        u = world.users[n]
        since = world.now - u.query_window
        visits = [v for v in u.store.visits if v.end >= since and v.place.kind is SubjectKind.PLACE]
        vectors.append(agg.VisitVector.from_visits(unitize_many(visits, cfg.unitization), index_map, n))

    if cfg.heatmap_method == "ldp":
        reports = []
        for n, v in zip(carriers, vectors):
            rep = agg.ldp_report(v.presence(), cfg.epsilon, world.rng())
            s = world.bus.new_session()
            world.bus.send(world.now, n, MA_NAME, "ldp.report", rep.bits.tobytes(), s)
            bits = np.frombuffer(world.bus.deliver(MA_NAME, n).payload, dtype=np.uint8)
            reports.append(agg.LdpReport(bits, cfg.epsilon))
        est = agg.ldp_estimate(reports, cfg.epsilon)
        totals = np.clip(np.rint(est), 0, None).astype(np.int64)
        hm = agg.HeatMap(totals, cfg.threshold, agg.heavy_hitters(est, cfg.threshold))
    else:
        held = {MA_NAME: [], AGGREGATOR2_NAME: []}
        for n, v in zip(carriers, vectors):
            s1, s2 = agg.share_vector(v, world.rng())
            s = world.bus.new_session()
            for dest, share in ((MA_NAME, s1), (AGGREGATOR2_NAME, s2)):
                world.bus.send(world.now, n, dest, "agg.share", share.to_bytes(), s)
                held[dest].append(agg.ShareVector.from_bytes(world.bus.deliver(dest, n).payload))
        partial_ma = agg.aggregate(held[MA_NAME])
        partial_2 = agg.aggregate(held[AGGREGATOR2_NAME])
        s = world.bus.new_session()
        world.bus.send(world.now, AGGREGATOR2_NAME, MA_NAME, "agg.partial",
                       agg.ShareVector(partial_2, 2).to_bytes(), s)
        partial_2 = agg.ShareVector.from_bytes(world.bus.deliver(MA_NAME, AGGREGATOR2_NAME).payload).values
        hm = agg.heatmap(agg.combine(partial_ma, partial_2), cfg.threshold)
    world.ma.heatmap = hm
    world.heatmap_csv = hm.to_csv(index_map)
    world.log.emit(world.now, MA_NAME, "heatmap", {
        "method": cfg.heatmap_method,
        "carriers": len(carriers),
        "high_risk": sorted(index_map.place(i).hex() for i in hm.high_risk),
    })
    return hm


# -- the loop -------------------------------------------------------------------------


def trace_cycle(world: World) -> list:
    """One pass of the closed loop; returns the events it emitted."""
    start = len(world.log.events)
    world.cycle += 1
    triggers, world.pending = world.pending, []
    world.log.emit(world.now, MA_NAME, "cycle_start", {"cycle": world.cycle, "triggers": triggers})
    if triggers:
        while True:
            before = world.ma.places
            for name in sorted(world.businesses):
                try:
                    business_check(world, name)
                except (SilotraceError, EmptySet) as exc:
                    if isinstance(exc, InvariantViolation):
                        raise
                    world.log.emit(world.now, name, "error", {"op": "business_check", "error": str(exc)})
            if world.ma.places == before:
                break
        logger.debug("business checks settled with %d listed places", len(world.ma.places))
    for name in sorted(world.users):
        try:
            user_query(world, name)
        except InvariantViolation:
            raise
        except SilotraceError as exc:
            world.log.emit(world.now, name, "error", {"op": "user_query", "error": str(exc)})
    try:
        compute_heatmap(world)
    except SilotraceError as exc:
        world.log.emit(world.now, MA_NAME, "error", {"op": "heatmap", "error": str(exc)})
    world.check_invariants()
    world.log.emit(world.now, MA_NAME, "cycle_end", {"cycle": world.cycle})
    return world.log.events[start:]
