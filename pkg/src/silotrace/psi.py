"""Two-round semi-honest DH-PSI and its cardinality variant over ristretto255.

Receiver sends ``H(x)^r`` in a shuffled order.  Sender answers with
``H(x)^(r*s)`` (order kept for PSI, shuffled for PSI-CA) plus 16-byte tags
``T(H(y)^s)`` of its own set.  Receiver strips ``r`` and compares tags.
"""

from __future__ import annotations

import ctypes
import enum
import hashlib
import struct
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import pysodium

from .errors import EmptySet, LengthMismatch, MalformedPoint

ELEMENT_SIZE = 32
POINT_SIZE = 32
SCALAR_SIZE = 32
TAG_SIZE = 16

_H2G_DST = b"silotrace/psi/hash-to-group/v1"
_TAG_DST = b"silotrace/psi/tag/v1"

_sodium = pysodium.sodium


class PsiMode(str, enum.Enum):
    PSI = "psi"
    PSI_CA = "psi-ca"


# -- group primitives -------------------------------------------------------------


def hash_to_group(element: bytes) -> bytes:
    """Map bytes to a ristretto255 point (Elligator over 64 hashed bytes)."""
    h = hashlib.sha512(_H2G_DST + element).digest()
    out = ctypes.create_string_buffer(POINT_SIZE)
    _sodium.crypto_core_ristretto255_from_hash(out, h)
    return out.raw


def is_valid_point(p: bytes) -> bool:
    return len(p) == POINT_SIZE and _sodium.crypto_core_ristretto255_is_valid_point(p) == 1


def scalar_mult(k: bytes, p: bytes) -> bytes:
    out = ctypes.create_string_buffer(POINT_SIZE)
    if len(p) != POINT_SIZE or _sodium.crypto_scalarmult_ristretto255(out, k, p) != 0:
        raise MalformedPoint("point failed ristretto255 decoding")
    return out.raw


def scalar_invert(k: bytes) -> bytes:
    return pysodium.crypto_core_ristretto255_scalar_invert(k)


def tag(point: bytes) -> bytes:
    return hashlib.sha256(_TAG_DST + point).digest()[:TAG_SIZE]


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class PsiSecretKey:
    """Nonzero scalar mod the group order.  Never leaves the owning party."""

    __slots__ = ("_scalar",)

    def __init__(self, scalar: bytes):
        if len(scalar) != SCALAR_SIZE or not any(scalar):
            raise ValueError("PSI key must be a nonzero 32-byte scalar")
        self._scalar = bytes(scalar)

    @classmethod
    def generate(cls, seed=None) -> "PsiSecretKey":
        rng = _rng(seed)
        while True:
            s = pysodium.crypto_core_ristretto255_scalar_reduce(rng.bytes(64))
            if any(s):
                return cls(s)

    @property
    def scalar(self) -> bytes:
        return self._scalar

    def inverse(self) -> "PsiSecretKey":
        return PsiSecretKey(scalar_invert(self._scalar))

    def __repr__(self):
        return "PsiSecretKey(<hidden>)"

    def __reduce__(self):
        raise TypeError("PSI keys are not serializable")


# -- messages ---------------------------------------------------------------------


@dataclass(frozen=True)
class Round1Message:
    elements: tuple


@dataclass(frozen=True)
class Round2Message:
    mode: PsiMode
    evaluated: tuple
    tags: tuple


@dataclass(frozen=True)
class ReceiverState:
    key: PsiSecretKey
    inputs: tuple  # inputs[i] is the element blinded at message position i


class PsiIntersection:
    """PSI output: the receiver's own elements that the sender also holds."""

    __slots__ = ("elements",)

    def __init__(self, elements):
        self.elements = frozenset(elements)

    @property
    def count(self) -> int:
        return len(self.elements)

    def __repr__(self):
        return f"PsiIntersection(count={self.count})"


class PsiCardinality:
    """PSI-CA output.  Carries only the count by construction."""

    __slots__ = ("count",)

    def __init__(self, count: int):
        self.count = count

    def __repr__(self):
        return f"PsiCardinality(count={self.count})"


IntersectionResult = Union[PsiIntersection, PsiCardinality]


def _check_elements(items: Sequence[bytes]) -> list:
    items = [bytes(x) for x in items]
    for x in items:
        if len(x) != ELEMENT_SIZE:
            raise ValueError(f"PSI elements must be {ELEMENT_SIZE} bytes, got {len(x)}")
    return items


def psi_receiver_round1(elements: Sequence[bytes], seed=None):
    """Blind the receiver set; returns ``(Round1Message, ReceiverState)``."""
    items = _check_elements(elements)
    if not items:
        raise EmptySet("receiver set is empty")
    rng = _rng(seed)
    key = PsiSecretKey.generate(rng)
    order = rng.permutation(len(items))
    inputs = tuple(items[i] for i in order)
    k = key.scalar
    blinded = tuple(scalar_mult(k, hash_to_group(x)) for x in inputs)
    return Round1Message(blinded), ReceiverState(key, inputs)


def psi_sender_respond(
    msg: Round1Message,
    sender_elements: Sequence[bytes],
    key: PsiSecretKey,
    mode: PsiMode = PsiMode.PSI,
    seed=None,
) -> Round2Message:
    mode = PsiMode(mode)
    items = _check_elements(sender_elements)
    rng = _rng(seed)
    k = key.scalar
    evaluated = []
    for p in msg.elements:
        if not is_valid_point(p):
            raise MalformedPoint("round-1 element is not a valid group element")
        evaluated.append(scalar_mult(k, p))
    if mode is PsiMode.PSI_CA:
        evaluated = [evaluated[i] for i in rng.permutation(len(evaluated))]
    tags = [tag(scalar_mult(k, hash_to_group(y))) for y in items]
    tags = [tags[i] for i in rng.permutation(len(tags))]
    return Round2Message(mode, tuple(evaluated), tuple(tags))


def psi_receiver_finish(state: ReceiverState, resp: Round2Message) -> IntersectionResult:
    if len(resp.evaluated) != len(state.inputs):
        raise LengthMismatch(
            f"round-2 carries {len(resp.evaluated)} elements, round 1 sent {len(state.inputs)}"
        )
    inv = state.key.inverse().scalar
    sender_tags = set(resp.tags)
    hits = [tag(scalar_mult(inv, e)) in sender_tags for e in resp.evaluated]
    if resp.mode is PsiMode.PSI_CA:
        return PsiCardinality(sum(hits))
    return PsiIntersection(x for x, hit in zip(state.inputs, hits) if hit)


def run_psi(receiver_elements, sender_elements, mode=PsiMode.PSI, seed=None) -> IntersectionResult:
    """Both roles in one process, passing messages through the wire encoding."""
    ss = np.random.SeedSequence(seed)
    r_seed, k_seed, s_seed = ss.spawn(3)
    m1, state = psi_receiver_round1(receiver_elements, np.random.default_rng(r_seed))
    m1 = decode_round1(encode_round1(m1))
    key = PsiSecretKey.generate(np.random.default_rng(k_seed))
    m2 = psi_sender_respond(m1, sender_elements, key, mode, np.random.default_rng(s_seed))
    m2 = decode_round2(encode_round2(m2))
    return psi_receiver_finish(state, m2)


# -- wire format ------------------------------------------------------------------
# round 1: b"ST" 0x01 | u32be n | n x 32-byte points
# round 2: b"ST" 0x02 | mode u8 (0 psi, 1 psi-ca) | u32be n | n x 32-byte points
#          | u32be m | m x 16-byte tags

MAGIC = b"ST"
_MODE_BYTE = {PsiMode.PSI: 0, PsiMode.PSI_CA: 1}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}


def encode_round1(msg: Round1Message) -> bytes:
    return MAGIC + b"\x01" + struct.pack(">I", len(msg.elements)) + b"".join(msg.elements)


def _take_list(buf: bytes, off: int, size: int):
    if off + 4 > len(buf):
        raise LengthMismatch("truncated length prefix")
    (n,) = struct.unpack_from(">I", buf, off)
    off += 4
    end = off + n * size
    if end > len(buf):
        raise LengthMismatch("truncated element list")
    return tuple(buf[off + i * size: off + (i + 1) * size] for i in range(n)), end


def decode_round1(buf: bytes) -> Round1Message:
    if buf[:3] != MAGIC + b"\x01":
        raise LengthMismatch("not a round-1 message")
    elements, end = _take_list(buf, 3, POINT_SIZE)
    if end != len(buf):
        raise LengthMismatch("trailing bytes after round-1 message")
    return Round1Message(elements)


def encode_round2(msg: Round2Message) -> bytes:
    return b"".join(
        [
            MAGIC,
            b"\x02",
            bytes([_MODE_BYTE[msg.mode]]),
            struct.pack(">I", len(msg.evaluated)),
            *msg.evaluated,
            struct.pack(">I", len(msg.tags)),
            *msg.tags,
        ]
    )


def decode_round2(buf: bytes) -> Round2Message:
    if buf[:3] != MAGIC + b"\x02" or len(buf) < 4:
        raise LengthMismatch("not a round-2 message")
    try:
        mode = _BYTE_MODE[buf[3]]
    except KeyError:
        raise LengthMismatch(f"unknown mode byte {buf[3]}") from None
    evaluated, off = _take_list(buf, 4, POINT_SIZE)
    tags, end = _take_list(buf, off, TAG_SIZE)
    if end != len(buf):
        raise LengthMismatch("trailing bytes after round-2 message")
    return Round2Message(mode, evaluated, tags)
