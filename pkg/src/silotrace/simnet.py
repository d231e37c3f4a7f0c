"""Scenario files and the deterministic scheduler that drives a :class:`World`.

Scenario files are YAML, schema version 1.  See ``scenarios/`` for examples
and the README for the full field list.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml

from .convert import place_id
from .errors import InvariantViolation, ParseError, SchemaMismatch, SilotraceError, ValidationError
from .parties import MA_NAME, TraceConfig, World, trace_cycle
from .psi import PsiMode
from .unified_format import (
    MINUTES_PER_DAY,
    PlaceKind,
    PlaceStructure,
    SourceRecord,
    SubjectRef,
    VisitRecord,
    make_opaque_id,
)

logger = logging.getLogger(__name__)

SCENARIO_VERSION = 1
EVENT_KINDS = ("SourceRecordArrival", "DiagnosisReport", "MedicalTestResult", "AdvanceClock")
BUNDLED_DIR = Path(__file__).parent / "scenarios"

_EVENT_FIELDS = {
    "SourceRecordArrival": ({"party", "source_kind", "payload"}, set()),
    "DiagnosisReport": ({"user"}, {"proof"}),
    "MedicalTestResult": ({"user", "positive"}, {"proof"}),
    "AdvanceClock": (set(), set()),
}


@dataclass
class TimelineEvent:
    tick: int
    kind: str
    fields: dict
    line: int = 0
    index: int = 0

    def where(self) -> str:
        return f"timeline[{self.index}] ({self.kind}, line {self.line})"


@dataclass
class Scenario:
    name: str
    config: TraceConfig
    businesses: list = field(default_factory=list)
    users: list = field(default_factory=list)
    timeline: list = field(default_factory=list)


def bundled_scenarios() -> dict:
    return {p.stem: p for p in sorted(BUNDLED_DIR.glob("*.yaml"))}


def _timeline_lines(text: str) -> list:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return []
    if not isinstance(root, yaml.MappingNode):
        return []
    for k, v in root.value:
        if k.value == "timeline" and isinstance(v, yaml.SequenceNode):
            return [item.start_mark.line + 1 for item in v.value]
    return []


def _require(d: dict, key: str, where: str, typ=None):
    if key not in d:
        raise ParseError(f"{where}: missing field {key!r}")
    v = d[key]
    if typ is not None and not isinstance(v, typ):
        raise ParseError(f"{where}: field {key!r} has the wrong type")
    return v


def _config(raw: dict) -> TraceConfig:
    raw = dict(raw or {})
    known = {
        "salt", "seed", "segment_minutes", "cell_degrees", "retention_days", "decontamination_days",
        "query_window_days", "psi_mode", "threshold", "epsilon", "heatmap",
    }
    unknown = set(raw) - known
    if unknown:
        raise ParseError(f"config: unknown field {sorted(unknown)[0]!r}")
    try:
        salt = bytes.fromhex(raw.get("salt", "00" * 16))
    except ValueError:
        raise ParseError("config: field 'salt' is not hex") from None
    if len(salt) != 16:
        raise ParseError("config: field 'salt' must be 16 bytes")
    try:
        return TraceConfig(
            salt=salt,
            segment_minutes=int(raw.get("segment_minutes", 15)),
            cell_degrees=float(raw.get("cell_degrees", 0.001)),
            retention_minutes=int(round(float(raw.get("retention_days", 14)) * MINUTES_PER_DAY)),
            decontamination_minutes=int(round(float(raw.get("decontamination_days", 3)) * MINUTES_PER_DAY)),
            query_window_minutes=int(round(float(raw.get("query_window_days", 14)) * MINUTES_PER_DAY)),
            psi_mode=PsiMode(raw.get("psi_mode", "psi")),
            threshold=int(raw.get("threshold", 3)),
            epsilon=float(raw.get("epsilon", math.log(3))),
            heatmap_method=raw.get("heatmap", "secure-sum"),
            seed=int(raw.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"config: {exc}") from None


def parse_scenario(data: dict, lines: Optional[list] = None, name: str = "scenario") -> Scenario:
    if not isinstance(data, dict):
        raise ParseError("scenario must be a mapping")
    version = data.get("version")
    if version != SCENARIO_VERSION:
        raise ParseError(f"version: expected {SCENARIO_VERSION}, got {version!r}")
    scenario = Scenario(
        name=str(data.get("name", name)),
        config=_config(data.get("config")),
        businesses=list(data.get("businesses") or []),
        users=list(data.get("users") or []),
    )
    for i, b in enumerate(scenario.businesses):
        _require(b, "name", f"businesses[{i}]", str)
    for i, u in enumerate(scenario.users):
        _require(u, "name", f"users[{i}]", str)
        _require(u, "descriptors", f"users[{i}]", dict)
    lines = lines or []
    prev = None
    for i, raw in enumerate(data.get("timeline") or []):
        line = lines[i] if i < len(lines) else 0
        where = f"timeline[{i}] (line {line})"
        if not isinstance(raw, dict):
            raise ParseError(f"{where}: event must be a mapping")
        tick = _require(raw, "tick", where)
        if isinstance(tick, bool) or not isinstance(tick, int) or tick < 0:
            raise ParseError(f"{where}: field 'tick' must be a non-negative integer")
        kind = _require(raw, "kind", where, str)
        if kind not in _EVENT_FIELDS:
            raise ParseError(f"{where}: unknown event kind {kind!r}")
        if prev is not None and tick < prev:
            raise ParseError(f"{where}: {kind} at tick {tick} precedes the previous event at tick {prev}")
        required, optional = _EVENT_FIELDS[kind]
        fields = {k: v for k, v in raw.items() if k not in ("tick", "kind")}
        for k in sorted(required - set(fields)):
            raise ParseError(f"{where}: {kind} missing field {k!r}")
        for k in sorted(set(fields) - required - optional):
            raise ParseError(f"{where}: {kind} has unknown field {k!r}")
        scenario.timeline.append(TimelineEvent(tick, kind, fields, line, i))
        prev = tick
    _validate_refs(scenario)
    return scenario


def _validate_refs(s: Scenario) -> None:
    names = [b["name"] for b in s.businesses] + [u["name"] for u in s.users]
    if len(set(names)) != len(names) or MA_NAME in names:
        raise ValidationError("party names must be unique and must not shadow the MA")
    users = {u["name"] for u in s.users}
    for ev in s.timeline:
        who = ev.fields.get("party", ev.fields.get("user"))
        if ev.kind == "SourceRecordArrival" and who not in names:
            raise ValidationError(f"{ev.where()}: undeclared party {who!r}")
        if ev.kind in ("DiagnosisReport", "MedicalTestResult") and who not in users:
            raise ValidationError(f"{ev.where()}: undeclared user {who!r}")


def load_scenario(source: Union[str, Path]) -> Scenario:
    path = Path(source)
    if not path.exists() and str(source) in bundled_scenarios():
        path = bundled_scenarios()[str(source)]
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return parse_scenario(data, _timeline_lines(text), path.stem)


def build_world(s: Scenario, seed: Optional[int] = None) -> World:
    cfg = s.config
    if seed is not None:
        cfg.seed = seed
    world = World(cfg)
    salt = cfg.salt
    for bd in s.businesses:
        where = f"business {bd['name']!r}"
        try:
            b = world.add_business(bd["name"], psi_mode=PsiMode(bd.get("psi_mode", cfg.psi_mode)))
            b.auto_notify = bool(bd.get("auto_notify", False))
            for p in bd.get("places", []):
                p = {"name": p} if isinstance(p, str) else p
                b.add_place(place_id(salt, str(p["name"])), PlaceKind(p.get("kind", "static")))
            for child, parent in bd.get("structure", []):
                b.ingest([PlaceStructure(place_id(salt, str(child)), place_id(salt, str(parent)))])
            for name in bd.get("staff", []):
                b.staff.add(make_opaque_id(salt, "name", str(name)).digest)
            for sv in bd.get("staff_visits", []):
                emp = make_opaque_id(salt, "name", str(sv["staff"]))
                b.staff.add(emp.digest)
                pl = place_id(salt, str(sv["place"]))
                b.owned.add(pl.digest)
                b.store.add(VisitRecord(SubjectRef.individual(emp), SubjectRef.place(pl), int(sv["start"]), int(sv["end"])))
            for c in bd.get("customers", []):
                (kind, value), = c["descriptor"].items()
                d = make_opaque_id(salt, kind, str(value)).digest
                if "channel" in c:
                    b.channels[d] = str(c["channel"])
                if c.get("consent"):
                    b.consent.add(d)
        except (KeyError, TypeError, ValueError, SilotraceError) as exc:
            raise ValidationError(f"{where}: {exc}") from None
    for ud in s.users:
        try:
            tokens = [(bytes.fromhex(t["token_hex"]), int(t["created_at"])) for t in ud.get("emitted_tokens", [])]
            qw = ud.get("query_window_days")
            world.add_user(
                ud["name"],
                {str(k): str(v) for k, v in ud["descriptors"].items()},
                tokens,
                None if qw is None else int(round(float(qw) * MINUTES_PER_DAY)),
            )
        except (KeyError, TypeError, ValueError, SilotraceError) as exc:
            raise ValidationError(f"user {ud['name']!r}: {exc}") from None
    world.refresh_directory()
    return world


def apply_event(world: World, ev: TimelineEvent) -> None:
    world.now = ev.tick
    f = ev.fields
    if ev.kind == "SourceRecordArrival":
        try:
            rec = SourceRecord(f["source_kind"], dict(f["payload"] or {}))
            world.ingest(f["party"], rec)
        except (SchemaMismatch, SilotraceError, TypeError, ValueError) as exc:
            if isinstance(exc, InvariantViolation):
                raise
            raise ValidationError(f"{ev.where()}: {exc}") from None
    elif ev.kind == "DiagnosisReport":
        _report(world, ev, lambda: world.diagnose(f["user"], str(f.get("proof", ""))))
    elif ev.kind == "MedicalTestResult":
        _report(world, ev, lambda: world.medical_test(f["user"], bool(f["positive"]), str(f.get("proof", ""))))
    elif ev.kind == "AdvanceClock":
        world.advance_clock(ev.tick)


def _report(world, ev, fn):
    try:
        fn()
    except InvariantViolation:
        raise
    except SilotraceError as exc:
        world.log.emit(world.now, MA_NAME, "error", {"op": ev.kind, "error": str(exc)})


def run_world(world: World, timeline, on_cycle=None) -> World:
    """Process events tick by tick; a tick with new diagnoses ends in a trace cycle.

    ``on_cycle(world, i)`` is called after every cycle, where ``i`` is the
    index of the last timeline event applied.
    """
    timeline = list(timeline)
    for i, ev in enumerate(timeline):
        cycles = world.cycle
        apply_event(world, ev)
        last_of_tick = i + 1 == len(timeline) or timeline[i + 1].tick != ev.tick
        if last_of_tick and world.pending:
            trace_cycle(world)
            logger.debug("cycle %d done at tick %d", world.cycle, world.now)
        if on_cycle is not None and world.cycle != cycles:
            on_cycle(world, i)
    if world.bus.pending():
        raise InvariantViolation(f"{world.bus.pending()} messages left undelivered")
    leaks = world.ma_inbound_leaks()
    if leaks:
        raise InvariantViolation(f"MA received descriptors of unreported users: {leaks[:3]}")
    return world


@dataclass
class RunResult:
    exit_status: int
    log: str = ""
    heatmap_csv: str = ""
    world: Optional[World] = None
    error: str = ""


HEATMAP_HEADER = "place_opaque_id_hex,index,total,high_risk_flag\n"


def run_scenario(path, seed: Optional[int] = None, out_dir=None) -> RunResult:
    """Run a scenario file end to end.  Exit status 0 ok, 1 invalid, 2 invariant broken."""
    world = None
    try:
        scenario = load_scenario(path)
        world = build_world(scenario, seed)
        run_world(world, scenario.timeline)
        result = RunResult(0, world.log.lines(), world.heatmap_csv or HEATMAP_HEADER, world)
    except (ParseError, ValidationError) as exc:
        result = RunResult(1, world.log.lines() if world else "", HEATMAP_HEADER, world, str(exc))
    except InvariantViolation as exc:
        result = RunResult(2, world.log.lines() if world else "", HEATMAP_HEADER, world, str(exc))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "events.jsonl").write_text(result.log)
        (out / "heatmap.csv").write_text(result.heatmap_csv)
    return result
