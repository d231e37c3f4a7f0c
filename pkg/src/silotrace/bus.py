"""In-process message bus and structured event log for the simulation."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass


@dataclass(frozen=True)
class Envelope:
    seq: int
    tick: int
    sender: str
    recipient: str
    round: str
    session: int
    payload: bytes


class EventLog:
    """Ordered ``{tick, actor, event_kind, payload}`` records."""

    def __init__(self):
        self.events: list = []

    def emit(self, tick: int, actor: str, kind: str, payload=None) -> dict:
        ev = {"tick": tick, "actor": actor, "event_kind": kind, "payload": payload or {}}
        self.events.append(ev)
        return ev

    def of_kind(self, kind: str) -> list:
        return [e for e in self.events if e["event_kind"] == kind]

    def lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.events)


class MessageBus:
    """FIFO per (sender, recipient) pair; every byte sent is kept in the transcript.

    Parties hold no other channel to each other, so the transcript is the
    complete record of cross-party traffic.
    """

    def __init__(self, log: EventLog):
        self.log = log
        self._queues: dict = {}
        self.transcript: list = []
        self._seq = 0
        self._session = 0

    def new_session(self) -> int:
        self._session += 1
        return self._session

    def send(self, tick: int, sender: str, recipient: str, round_tag: str, payload: bytes, session: int = 0):
        self._seq += 1
        env = Envelope(self._seq, tick, sender, recipient, round_tag, session, bytes(payload))
        self._queues.setdefault((sender, recipient), deque()).append(env)
        self.transcript.append(env)
        self.log.emit(
            tick,
            sender,
            "message",
            {"to": recipient, "round": round_tag, "session": session, "bytes": env.payload.hex()},
        )
        return env

    def deliver(self, recipient: str, sender: str) -> Envelope:
        q = self._queues.get((sender, recipient))
        if not q:
            raise LookupError(f"no message queued from {sender} to {recipient}")
        return q.popleft()

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def traffic(self, party: str) -> list:
        """Every envelope ``party`` sent or received."""
        return [e for e in self.transcript if party in (e.sender, e.recipient)]

    def inbound(self, party: str) -> list:
        return [e for e in self.transcript if e.recipient == party]
