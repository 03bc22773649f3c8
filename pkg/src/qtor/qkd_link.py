"""Simulated BB84 link between two endpoints.

Covers the full pipeline: pulse preparation, lossy/noisy channel
transmission with an optional intercept-resend tap, measurement,
basis sifting, sampled error estimation, Cascade reconciliation, a
64-bit equality check, and Toeplitz privacy amplification. The
orchestrator ``run_bb84`` either yields a matching pair of key blocks
or aborts, discarding everything.

All randomness is drawn from a single session stream so that a run is
reproducible bit for bit from its seed.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction

import numpy as np

from .bitops import BitArray, as_bits, random_bits, toeplitz_hash
from .errors import (
    EmptySession,
    InsufficientKey,
    KeyTooShort,
    ProtocolViolation,
    ReconciliationFailed,
)
from .kms import KeyBlock, KeyId, truncate_to_blocks

DEFAULT_ABORT_THRESHOLD = 0.11
DEFAULT_SAMPLE_FRACTION = 0.1
VERIFY_DIGEST_BITS = 64

ABORT_EMPTY = "empty_session"
ABORT_QBER = "qber_threshold"
ABORT_INSUFFICIENT = "insufficient_key"
ABORT_VERIFY = "verify_failed"


class Basis(IntEnum):
    """Preparation/measurement basis: 0/1 states or their superpositions."""

    RECTILINEAR = 0
    DIAGONAL = 1


class Role(IntEnum):
    SENDER = 0
    RECEIVER = 1


@dataclass(frozen=True)
class PhotonPulse:
    """One quantum signal in flight. Basis and bit are fixed at preparation."""

    frequency_channel: int
    basis: Basis
    bit: int
    lost: bool = False

    def __post_init__(self):
        if self.frequency_channel < 0:
            raise ValueError("frequency channel must be non-negative")
        if self.bit not in (0, 1):
            raise ValueError("bit must be 0 or 1")


@dataclass
class RawKeyRecord:
    """Pre-sifting key material as seen by one side."""

    role: Role
    bases: BitArray
    bits: BitArray
    detected: BitArray | None = None  # receiver only

    def __post_init__(self):
        if len(self.bases) != len(self.bits):
            raise ValueError("bases and bits must have equal length")
        if self.detected is not None and len(self.detected) != len(self.bits):
            raise ValueError("detected flags must match record length")

    def __len__(self) -> int:
        return int(len(self.bits))


@dataclass
class SiftedKey:
    bits: BitArray
    source_positions: np.ndarray

    def __post_init__(self):
        if len(self.bits) != len(self.source_positions):
            raise ValueError("bits and positions must have equal length")
        if len(self.source_positions) > 1 and not np.all(np.diff(self.source_positions) > 0):
            raise ValueError("positions must be strictly increasing")

    def __len__(self) -> int:
        return int(len(self.bits))


@dataclass
class QberEstimate:
    sampled_positions: np.ndarray
    estimate: Fraction
    sample_size: int


@dataclass(frozen=True)
class ChannelModel:
    """Fiber segment: loss from attenuation and detection, plus bit flips."""

    length_km: float = 0.0
    attenuation_db_per_km: float = 0.2
    flip_probability: float = 0.0
    detector_efficiency: float = 1.0

    def __post_init__(self):
        if self.length_km < 0 or self.attenuation_db_per_km < 0:
            raise ValueError("length and attenuation must be non-negative")
        for p in (self.flip_probability, self.detector_efficiency):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    @property
    def survival_probability(self) -> float:
        p = self.detector_efficiency * 10.0 ** (
            -self.attenuation_db_per_km * self.length_km / 10.0
        )
        return min(1.0, max(0.0, p))

    def compose(self, other: "ChannelModel") -> "ChannelModel":
        """End-to-end model for two segments in series (same total survival)."""
        total_km = self.length_km + other.length_km
        total_db = (
            self.attenuation_db_per_km * self.length_km
            + other.attenuation_db_per_km * other.length_km
        )
        flip = (
            self.flip_probability
            + other.flip_probability
            - 2.0 * self.flip_probability * other.flip_probability
        )
        return ChannelModel(
            length_km=total_km,
            attenuation_db_per_km=(total_db / total_km) if total_km > 0 else 0.0,
            flip_probability=flip,
            detector_efficiency=self.detector_efficiency * other.detector_efficiency,
        )


class InterceptResendTap:
    """Eavesdropper that measures each surviving pulse in a random basis
    and re-prepares it with the measured outcome."""

    def apply(self, pulses: list[PhotonPulse], rng: np.random.Generator) -> list[PhotonPulse]:
        n = len(pulses)
        eve_bases = random_bits(rng, n).tolist()
        eve_rand = random_bits(rng, n).tolist()
        out = []
        for pulse, basis, rand in zip(pulses, eve_bases, eve_rand):
            if pulse.lost:
                out.append(pulse)
                continue
            measured = pulse.bit if basis == pulse.basis else rand
            out.append(PhotonPulse(pulse.frequency_channel, Basis(basis), measured, False))
        return out


# -- pipeline stages --------------------------------------------------------


def prepare_pulses(
    n: int, frequency_channel: int, rng: np.random.Generator
) -> tuple[list[PhotonPulse], RawKeyRecord]:
    """Draw n random (basis, bit) pairs and emit them on one frequency.

    Draw order is pinned: bases first, then bits, so a run can be
    reproduced by replaying the same stream.
    """
    if n < 1:
        raise EmptySession("a session needs at least one pulse")
    bases = random_bits(rng, n)
    bits = random_bits(rng, n)
    pulses = [
        PhotonPulse(frequency_channel, Basis(ba), bi, False)
        for ba, bi in zip(bases.tolist(), bits.tolist())
    ]
    return pulses, RawKeyRecord(Role.SENDER, bases, bits)


def transmit(
    pulses: list[PhotonPulse],
    channel: ChannelModel,
    eavesdropper: InterceptResendTap | None = None,
    rng: np.random.Generator | None = None,
) -> list[PhotonPulse]:
    """Push pulses through a channel: loss, optional tap, then flip noise."""
    n = len(pulses)
    survival = channel.survival_probability
    lost = (rng.random(n) >= survival).tolist()
    out = [
        p if p.lost or not was_lost else PhotonPulse(p.frequency_channel, p.basis, p.bit, True)
        for p, was_lost in zip(pulses, lost)
    ]
    if eavesdropper is not None:
        out = eavesdropper.apply(out, rng)
    if channel.flip_probability > 0.0:
        flips = (rng.random(n) < channel.flip_probability).tolist()
        out = [
            PhotonPulse(p.frequency_channel, p.basis, p.bit ^ 1, False)
            if flip and not p.lost
            else p
            for p, flip in zip(out, flips)
        ]
    return out


def measure(pulses: list[PhotonPulse], rng: np.random.Generator) -> RawKeyRecord:
    """Measure each pulse in a uniformly random basis.

    A matched basis reproduces the carried bit; a mismatch yields a
    uniform random outcome; lost pulses are marked undetected and their
    bit positions are never read.
    """
    n = len(pulses)
    bases = random_bits(rng, n)
    rand = random_bits(rng, n)
    sent_bases = np.fromiter((p.basis for p in pulses), dtype=np.uint8, count=n)
    sent_bits = np.fromiter((p.bit for p in pulses), dtype=np.uint8, count=n)
    detected = np.fromiter((not p.lost for p in pulses), dtype=np.uint8, count=n)
    outcome = np.where(bases == sent_bases, sent_bits, rand).astype(np.uint8)
    outcome[detected == 0] = 0
    return RawKeyRecord(Role.RECEIVER, bases, outcome, detected)


def sift(sender: RawKeyRecord, receiver: RawKeyRecord) -> tuple[SiftedKey, SiftedKey]:
    """Keep the positions that were detected in a matching basis."""
    if len(sender) != len(receiver):
        raise ProtocolViolation("raw key records differ in length")
    if receiver.detected is None:
        raise ProtocolViolation("receiver record is missing detection flags")
    mask = (sender.bases == receiver.bases) & (receiver.detected == 1)
    positions = np.nonzero(mask)[0]
    return (
        SiftedKey(sender.bits[mask], positions),
        SiftedKey(receiver.bits[mask], positions.copy()),
    )


def estimate_qber(
    a: SiftedKey,
    b: SiftedKey,
    sample_fraction: float,
    rng: np.random.Generator,
) -> tuple[QberEstimate, tuple[SiftedKey, SiftedKey]]:
    """Publicly compare a random sample and strike it from both keys."""
    if len(a) != len(b):
        raise ProtocolViolation("sifted keys differ in length")
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError("sample fraction must be in (0, 1]")
    n = len(a)
    k = int(math.ceil(sample_fraction * n))
    sample = np.sort(rng.choice(n, size=k, replace=False))
    mismatches = int(np.count_nonzero(a.bits[sample] != b.bits[sample]))
    estimate = QberEstimate(sample, Fraction(mismatches, k), k)
    keep = np.ones(n, dtype=bool)
    keep[sample] = False
    if not keep.any():
        raise InsufficientKey("error estimation consumed the entire sifted key")
    shortened = (
        SiftedKey(a.bits[keep], a.source_positions[keep]),
        SiftedKey(b.bits[keep], b.source_positions[keep]),
    )
    return estimate, shortened


def _parity(bits: BitArray, positions: np.ndarray) -> int:
    return int(bits[positions].sum() & 1)


def _locate_error(a: BitArray, b: BitArray, positions: np.ndarray) -> tuple[int, int]:
    """Binary-search one erroneous bit inside an odd-parity block.

    Returns (position, parities disclosed). Each halving step discloses
    the parity of the first half of the current range.
    """
    disclosed = 0
    lo, hi = 0, len(positions)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        disclosed += 1
        part = positions[lo:mid]
        if _parity(a, part) != _parity(b, part):
            hi = mid
        else:
            lo = mid
    return int(positions[lo]), disclosed


def reconcile(
    a: BitArray,
    b: BitArray,
    qber_hint: float,
    rng: np.random.Generator,
) -> tuple[BitArray, int]:
    """Cascade error correction of b against a.

    Four passes with doubling block size starting at 0.73/QBER; passes
    after the first shuffle positions using the session stream. Every
    disclosed parity (top-level block parities and each binary-search
    step) counts toward the returned leakage. Corrections cascade back
    into earlier passes until no inspected block has odd parity.
    """
    a = as_bits(a)
    corrected = as_bits(b).copy()
    n = a.size
    if n < 1 or corrected.size != n:
        raise ProtocolViolation("reconcile needs equal non-empty bit strings")
    if qber_hint > 0:
        first_block = min(n, max(1, round(0.73 / qber_hint)))
    else:
        first_block = n
    leaked = 0
    pass_blocks: list[list[np.ndarray]] = []
    pos_to_block: list[np.ndarray] = []
    queue: deque[tuple[int, int]] = deque()

    for p in range(4):
        size = min(n, first_block * (2**p))
        perm = np.arange(n) if p == 0 else rng.permutation(n)
        blocks = [perm[i : i + size] for i in range(0, n, size)]
        pass_blocks.append(blocks)
        lookup = np.empty(n, dtype=np.int64)
        for bi, blk in enumerate(blocks):
            lookup[blk] = bi
        pos_to_block.append(lookup)

        for bi, blk in enumerate(blocks):
            leaked += 1
            if _parity(a, blk) != _parity(corrected, blk):
                queue.append((p, bi))

        while queue:
            pp, bb = queue.popleft()
            blk = pass_blocks[pp][bb]
            if _parity(a, blk) == _parity(corrected, blk):
                continue
            pos, disclosed = _locate_error(a, corrected, blk)
            leaked += disclosed
            corrected[pos] ^= 1
            for q in range(p + 1):
                qb = int(pos_to_block[q][pos])
                if (q, qb) != (pp, bb):
                    queue.append((q, qb))

    return corrected, leaked


def verify_equal(
    a: BitArray, b: BitArray, rng: np.random.Generator
) -> tuple[bool, int]:
    """Compare 64-bit Toeplitz digests under a shared public seed."""
    a = as_bits(a)
    b = as_bits(b)
    if a.size == 0 or b.size == 0:
        raise ReconciliationFailed("cannot verify empty keys")
    if a.size != b.size:
        raise ReconciliationFailed("cannot verify keys of different length")
    seed = random_bits(rng, a.size + VERIFY_DIGEST_BITS - 1)
    da = toeplitz_hash(seed, a, VERIFY_DIGEST_BITS)
    db = toeplitz_hash(seed, b, VERIFY_DIGEST_BITS)
    return bool(np.all(da == db)), VERIFY_DIGEST_BITS


def binary_entropy(q: float) -> float:
    if q <= 0.0 or q >= 1.0:
        return 0.0
    return -q * math.log2(q) - (1.0 - q) * math.log2(1.0 - q)


def amplified_length(n: int, total_leakage: int, qber: float, epsilon: float) -> int:
    """Final key length under the simplified finite-size bound."""
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must be in (0, 1]")
    return (
        math.floor(n * (1.0 - binary_entropy(qber)))
        - total_leakage
        - math.ceil(2.0 * math.log2(1.0 / epsilon))
    )


def privacy_amplify(
    key: BitArray,
    total_leakage: int,
    qber: float,
    epsilon: float,
    rng: np.random.Generator | None = None,
    seed_bits: BitArray | None = None,
) -> BitArray:
    """Compress the key through a random binary Toeplitz matrix.

    The diagonal seed is exchanged publicly; both sides applying the same
    seed to the same key obtain identical output. Raises InsufficientKey
    when the bound leaves nothing to extract.
    """
    key = as_bits(key)
    n = key.size
    if n < 1:
        raise InsufficientKey("cannot amplify an empty key")
    m = amplified_length(n, total_leakage, qber, epsilon)
    if m <= 0:
        raise InsufficientKey(
            f"no extractable key: n={n}, leakage={total_leakage}, qber={qber:.4f}"
        )
    if seed_bits is None:
        seed_bits = random_bits(rng, n + m - 1)
    return toeplitz_hash(as_bits(seed_bits), key, m)


# -- session orchestration --------------------------------------------------


@dataclass
class Bb84Session:
    pulse_count: int
    frequency_channel: int
    channel: ChannelModel
    epsilon: float = 1e-6
    abort_threshold: float = DEFAULT_ABORT_THRESHOLD
    sample_fraction: float = DEFAULT_SAMPLE_FRACTION
    eavesdropper: InterceptResendTap | None = None
    sender: str = "alice"
    receiver: str = "bob"


@dataclass
class Bb84Stats:
    pulse_count: int = 0
    detected: int = 0
    sifted: int = 0
    qber: Fraction | None = None
    leaked_bits: int = 0
    pa_length: int = 0
    stored_length: int = 0


@dataclass
class Bb84Success:
    sender_block: KeyBlock
    receiver_block: KeyBlock
    stats: Bb84Stats


@dataclass
class Bb84Abort:
    reason: str
    qber: Fraction | None = None
    stats: Bb84Stats = field(default_factory=Bb84Stats)


def run_bb84(
    session: Bb84Session,
    rng: np.random.Generator,
    key_id: KeyId,
    now: float = 0.0,
) -> Bb84Success | Bb84Abort:
    """Run the whole pipeline; abort on high QBER or any stage failure.

    On success both returned blocks carry identical bits under the same
    fresh key ID. On abort no key material is retained anywhere.
    """
    stats = Bb84Stats(pulse_count=session.pulse_count)
    try:
        pulses, sender_rec = prepare_pulses(
            session.pulse_count, session.frequency_channel, rng
        )
    except EmptySession:
        return Bb84Abort(ABORT_EMPTY, stats=stats)

    arrived = transmit(pulses, session.channel, session.eavesdropper, rng)
    receiver_rec = measure(arrived, rng)
    stats.detected = int(receiver_rec.detected.sum())

    sifted_a, sifted_b = sift(sender_rec, receiver_rec)
    stats.sifted = len(sifted_a)
    if stats.sifted == 0:
        return Bb84Abort(ABORT_INSUFFICIENT, stats=stats)

    try:
        estimate, (short_a, short_b) = estimate_qber(
            sifted_a, sifted_b, session.sample_fraction, rng
        )
    except InsufficientKey:
        return Bb84Abort(ABORT_INSUFFICIENT, stats=stats)
    stats.qber = estimate.estimate
    if estimate.estimate > session.abort_threshold:
        return Bb84Abort(ABORT_QBER, qber=estimate.estimate, stats=stats)

    corrected, leaked = reconcile(short_a.bits, short_b.bits, float(estimate.estimate), rng)
    ok, disclosed = verify_equal(short_a.bits, corrected, rng)
    leaked += disclosed
    stats.leaked_bits = leaked
    if not ok:
        return Bb84Abort(ABORT_VERIFY, qber=estimate.estimate, stats=stats)

    try:
        final = privacy_amplify(
            short_a.bits, leaked, float(estimate.estimate), session.epsilon, rng
        )
        stats.pa_length = int(final.size)
        stored = truncate_to_blocks(final)
    except (InsufficientKey, KeyTooShort):
        return Bb84Abort(ABORT_INSUFFICIENT, qber=estimate.estimate, stats=stats)
    stats.stored_length = int(stored.size)

    return Bb84Success(
        KeyBlock(key_id, stored.copy(), session.epsilon, now),
        KeyBlock(key_id, stored.copy(), session.epsilon, now),
        stats,
    )
