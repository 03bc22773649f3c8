"""Per-node key store with consume-once accounting.

Finished QKD keys are stored in blocks indexed only by a network-wide
unique ID. A block deliberately carries no record of which peer holds
the other copy: if a node cannot find an ID locally it simply cannot
decrypt, and nothing in the store says who could.

One-time-pad material is handed out through two disjoint lanes:

* the forward lane (``consume``) allocates sequentially from bit 0 and
  is used by the key's initiator when encrypting;
* the return lane (``consume_back``) allocates downward from the end of
  the block and is used by the responding holder, so the two encrypting
  parties can never collide on a pad range.

Decryption reads the exact range named in the message header via
``consume_at``; releasing the same range twice raises ReuseViolation,
turning any pad reuse into a loud failure instead of a silent leak.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitops import BitArray, bits_to_hex
from .errors import KeyExhausted, KeyTooShort, ReuseViolation, UnknownKey

BLOCK_BITS = 256


@dataclass(frozen=True, order=True)
class KeyId:
    """Network-wide unique key identifier, serialized as 128 bits."""

    value: int

    def __post_init__(self):
        if not 0 <= self.value < (1 << 128):
            raise ValueError("key id must fit in 128 bits")

    def hex(self) -> str:
        return f"{self.value:032x}"

    def __str__(self) -> str:
        return self.hex()


class KeyIdGenerator:
    """Deterministic scenario-global allocator; collisions are impossible."""

    def __init__(self, start: int = 1):
        self._next = start

    def fresh(self) -> KeyId:
        kid = KeyId(self._next)
        self._next += 1
        return kid


@dataclass
class KeyBlock:
    """A finished symmetric key block plus its metadata.

    There is intentionally no peer-identity field in this type.
    """

    key_id: KeyId
    bits: BitArray
    epsilon: float
    created_at: float
    consumed_up_to: int = 0

    def __post_init__(self):
        if len(self.bits) == 0 or len(self.bits) % BLOCK_BITS:
            raise ValueError(f"block length must be a positive multiple of {BLOCK_BITS}")

    @property
    def length(self) -> int:
        return int(len(self.bits))


def truncate_to_blocks(bits: BitArray) -> BitArray:
    """Round key material down to a whole number of 256-bit blocks."""
    keep = (len(bits) // BLOCK_BITS) * BLOCK_BITS
    if keep == 0:
        raise KeyTooShort(f"{len(bits)} bits is less than one {BLOCK_BITS}-bit block")
    return bits[:keep]


@dataclass
class _Entry:
    block: KeyBlock
    back_consumed: int = 0
    released: list = field(default_factory=list)  # consume_at ranges, (start, end)


class Kms:
    """Key store owned by exactly one node."""

    def __init__(self, owner: str, id_generator: KeyIdGenerator, recorder=None):
        self.owner = owner
        self._ids = id_generator
        self._entries: dict[KeyId, _Entry] = {}
        # recorder(kind, data) hook lets the simulation trace mutations.
        self._recorder = recorder

    # -- storage -----------------------------------------------------------

    def store(self, bits: BitArray, epsilon: float, now: float) -> KeyId:
        """Store fresh material under a new ID, rounded down to whole blocks."""
        if len(bits) == 0:
            raise KeyTooShort("cannot store an empty key")
        kept = truncate_to_blocks(bits)
        block = KeyBlock(self._ids.fresh(), kept.copy(), epsilon, now)
        self._entries[block.key_id] = _Entry(block)
        self._record_store(block, now)
        return block.key_id

    def insert(self, block: KeyBlock, now: float) -> None:
        """Ingest a block whose ID was allocated elsewhere (QKD peer copy)."""
        if block.key_id in self._entries:
            raise ReuseViolation(f"key {block.key_id} already stored at {self.owner}")
        self._entries[block.key_id] = _Entry(block)
        self._record_store(block, now)

    def holds(self, key_id: KeyId) -> bool:
        return key_id in self._entries

    def key_ids(self) -> list[KeyId]:
        return list(self._entries)

    def block(self, key_id: KeyId) -> KeyBlock:
        return self._entry(key_id).block

    # -- consumption -------------------------------------------------------

    def consume(self, key_id: KeyId, n_bits: int) -> BitArray:
        """Take the next n_bits from the forward lane."""
        return self.take_forward(key_id, n_bits)[1]

    def take_forward(self, key_id: KeyId, n_bits: int) -> tuple[int, BitArray]:
        """Forward-lane allocation returning (offset, bits) for token headers."""
        entry = self._entry(key_id)
        block = entry.block
        if n_bits < 1:
            raise ValueError("must consume at least one bit")
        start = block.consumed_up_to
        end = start + n_bits
        if end > block.length - entry.back_consumed:
            raise KeyExhausted(
                f"key {key_id}: forward lane needs {n_bits} bits, "
                f"{block.length - entry.back_consumed - start} remain"
            )
        block.consumed_up_to = end
        self._record_consume(key_id, "forward", start, n_bits)
        return start, block.bits[start:end]

    def take_backward(self, key_id: KeyId, n_bits: int) -> tuple[int, BitArray]:
        """Return-lane allocation, growing downward from the end of the block."""
        entry = self._entry(key_id)
        block = entry.block
        if n_bits < 1:
            raise ValueError("must consume at least one bit")
        end = block.length - entry.back_consumed
        start = end - n_bits
        if start < block.consumed_up_to:
            raise KeyExhausted(
                f"key {key_id}: return lane needs {n_bits} bits, "
                f"{end - block.consumed_up_to} remain"
            )
        entry.back_consumed += n_bits
        self._record_consume(key_id, "return", start, n_bits)
        return start, block.bits[start:end]

    def consume_at(self, key_id: KeyId, offset: int, n_bits: int) -> BitArray:
        """Read the exact range a message header names, once and only once."""
        entry = self._entry(key_id)
        block = entry.block
        if n_bits < 1 or offset < 0:
            raise ValueError("range must be non-empty and non-negative")
        end = offset + n_bits
        if end > block.length:
            raise KeyExhausted(f"key {key_id}: range [{offset}, {end}) runs past the block")
        for s, e in entry.released:
            if offset < e and s < end:
                raise ReuseViolation(
                    f"key {key_id}: range [{offset}, {end}) overlaps released [{s}, {e})"
                )
        entry.released.append((offset, end))
        self._record_consume(key_id, "release", offset, n_bits)
        return block.bits[offset:end]

    def available(self, key_id: KeyId) -> int:
        """Bits not yet claimed by either encrypting lane."""
        entry = self._entry(key_id)
        return entry.block.length - entry.block.consumed_up_to - entry.back_consumed

    # -- serialization -----------------------------------------------------

    def snapshot(self, include_bits: bool = False) -> dict:
        """State summary for traces; raw bits only behind the debug flag."""
        keys = {}
        for kid, entry in self._entries.items():
            info = {
                "length": entry.block.length,
                "consumed_up_to": entry.block.consumed_up_to,
                "back_consumed": entry.back_consumed,
                "epsilon": entry.block.epsilon,
                "created_at": entry.block.created_at,
            }
            if include_bits:
                info["bits"] = bits_to_hex(entry.block.bits)
            keys[kid.hex()] = info
        return {"owner": self.owner, "keys": keys}

    # -- internals ---------------------------------------------------------

    def _entry(self, key_id: KeyId) -> _Entry:
        try:
            return self._entries[key_id]
        except KeyError:
            raise UnknownKey(f"{self.owner} does not store key {key_id}") from None

    def _record_store(self, block: KeyBlock, now: float) -> None:
        if self._recorder is not None:
            self._recorder(
                "kms_store",
                {
                    "owner": self.owner,
                    "key_id": block.key_id.hex(),
                    "length": block.length,
                    "epsilon": block.epsilon,
                },
            )

    def _record_consume(self, key_id: KeyId, lane: str, offset: int, n_bits: int) -> None:
        if self._recorder is not None:
            self._recorder(
                "kms_consume",
                {
                    "owner": self.owner,
                    "key_id": key_id.hex(),
                    "lane": lane,
                    "offset": offset,
                    "n_bits": n_bits,
                },
            )


def blocks_equal(a: KeyBlock, b: KeyBlock) -> bool:
    return a.key_id == b.key_id and a.length == b.length and bool(np.all(a.bits == b.bits))
