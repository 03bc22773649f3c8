"""Data-phase onion transport.

The client triple-encrypts a payload, innermost layer under the exit
key, outermost under the entry key; each hop peels exactly one layer
using the key named in clear by the layer header. Two cipher modes:

* ``otp``: one-time pad plus a polynomial universal-hash tag; pad and
  tag key are consumed from the shared block, so every byte sent costs
  fresh key material;
* ``aes``: AES-256-GCM keyed from one 256-bit block per key per
  circuit, with a per-packet counter nonce.

Either way a flipped ciphertext bit is caught by the layer tag before
anything is forwarded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .bitops import bits_to_bytes, xor_bytes
from .errors import CannotDecrypt, IntegrityFailure, ProtocolViolation, UnknownKey
from .kms import KeyId, Kms

MODE_OTP = "otp"
MODE_AES = "aes"

TAG_BYTES = 16
TAG_KEY_BITS = 256  # 128-bit multiplier + 128-bit mask for the poly tag
AES_KEY_BITS = 256
NONCE_BYTES = 12

_FLAG_FINAL = 0x00
_FLAG_NESTED = 0x01
_MODE_BYTE = {MODE_OTP: 0x00, MODE_AES: 0x01}
_MODE_NAME = {v: k for k, v in _MODE_BYTE.items()}

# GF(2^128) with the GHASH reduction polynomial x^128 + x^7 + x^2 + x + 1.
_POLY = (1 << 128) | 0x87


def _gf128_mul(a: int, b: int) -> int:
    r = 0
    while b:
        if b & 1:
            r ^= a
        a <<= 1
        b >>= 1
    for i in range(r.bit_length() - 1, 127, -1):
        if (r >> i) & 1:
            r ^= _POLY << (i - 128)
    return r


def _poly_tag(r_key: int, mask: int, data: bytes) -> bytes:
    """Polynomial evaluation MAC over 16-byte blocks, masked output."""
    acc = 0
    for i in range(0, len(data), 16):
        block = int.from_bytes(data[i : i + 16].ljust(16, b"\x00"), "big")
        acc = _gf128_mul(acc ^ block, r_key)
    acc = _gf128_mul(acc ^ len(data), r_key)
    return (acc ^ mask).to_bytes(16, "big")


@dataclass(frozen=True)
class OnionPacket:
    """One visible encryption layer; inner layers are ciphertext bytes."""

    mode: str
    key_id: KeyId
    offset: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def header(self) -> bytes:
        return (
            bytes([_MODE_BYTE[self.mode]])
            + self.key_id.value.to_bytes(16, "big")
            + struct.pack(">Q", self.offset)
            + self.nonce
        )

    def serialize(self) -> bytes:
        return (
            self.header() + struct.pack(">I", len(self.ciphertext)) + self.ciphertext + self.tag
        )

    @property
    def size(self) -> int:
        return len(self.serialize())


def parse_packet(data: bytes) -> OnionPacket:
    if len(data) < 1 + 16 + 8 + NONCE_BYTES + 4 + TAG_BYTES:
        raise ProtocolViolation("onion packet too short")
    mode = _MODE_NAME.get(data[0])
    if mode is None:
        raise ProtocolViolation("unknown onion cipher mode byte")
    key_id = KeyId(int.from_bytes(data[1:17], "big"))
    offset = struct.unpack(">Q", data[17:25])[0]
    nonce = data[25 : 25 + NONCE_BYTES]
    (ct_len,) = struct.unpack(">I", data[37:41])
    ct = data[41 : 41 + ct_len]
    tag = data[41 + ct_len : 41 + ct_len + TAG_BYTES]
    if len(ct) != ct_len or len(tag) != TAG_BYTES:
        raise ProtocolViolation("onion packet truncated")
    return OnionPacket(mode, key_id, offset, nonce, ct, tag)


class CipherState:
    """Per-principal cache: derived AES keys and packet nonce counters."""

    def __init__(self):
        self.aes_keys: dict[tuple[KeyId, int], bytes] = {}
        self.sender_offsets: dict[KeyId, int] = {}
        self.nonces: dict[KeyId, int] = {}

    def next_nonce(self, key_id: KeyId) -> bytes:
        count = self.nonces.get(key_id, 0)
        self.nonces[key_id] = count + 1
        return count.to_bytes(NONCE_BYTES, "big")


def _encrypt_layer(
    plaintext: bytes, key_id: KeyId, kms: Kms, mode: str, state: CipherState
) -> OnionPacket:
    if mode == MODE_OTP:
        n = len(plaintext) * 8
        offset, bits = kms.take_forward(key_id, n + TAG_KEY_BITS)
        pad, tag_bits = bits[:n], bits[n:]
        ciphertext = xor_bytes(plaintext, bits_to_bytes(pad)) if n else b""
        r_key = int.from_bytes(bits_to_bytes(tag_bits[:128]), "big")
        mask = int.from_bytes(bits_to_bytes(tag_bits[128:]), "big")
        packet = OnionPacket(mode, key_id, offset, b"\x00" * NONCE_BYTES, ciphertext, b"")
        tag = _poly_tag(r_key, mask, packet.header() + ciphertext)
        return OnionPacket(mode, key_id, offset, packet.nonce, ciphertext, tag)
    if mode == MODE_AES:
        if key_id not in state.sender_offsets:
            offset, bits = kms.take_forward(key_id, AES_KEY_BITS)
            state.sender_offsets[key_id] = offset
            state.aes_keys[(key_id, offset)] = bits_to_bytes(bits)
        offset = state.sender_offsets[key_id]
        key = state.aes_keys[(key_id, offset)]
        nonce = state.next_nonce(key_id)
        header = bytes([_MODE_BYTE[mode]]) + key_id.value.to_bytes(16, "big")
        header += struct.pack(">Q", offset) + nonce
        sealed = AESGCM(key).encrypt(nonce, plaintext, header)
        return OnionPacket(mode, key_id, offset, nonce, sealed[:-TAG_BYTES], sealed[-TAG_BYTES:])
    raise ProtocolViolation(f"unknown cipher mode {mode!r}")


def _decrypt_layer(packet: OnionPacket, kms: Kms, state: CipherState) -> bytes:
    if packet.mode == MODE_OTP:
        try:
            bits = kms.consume_at(
                packet.key_id, packet.offset, len(packet.ciphertext) * 8 + TAG_KEY_BITS
            )
        except UnknownKey as exc:
            raise CannotDecrypt(str(exc)) from None
        n = len(packet.ciphertext) * 8
        pad, tag_bits = bits[:n], bits[n:]
        r_key = int.from_bytes(bits_to_bytes(tag_bits[:128]), "big")
        mask = int.from_bytes(bits_to_bytes(tag_bits[128:]), "big")
        expected = _poly_tag(r_key, mask, packet.header() + packet.ciphertext)
        if expected != packet.tag:
            raise IntegrityFailure("onion layer tag mismatch")
        return xor_bytes(packet.ciphertext, bits_to_bytes(pad)) if n else b""
    if packet.mode == MODE_AES:
        cache_key = (packet.key_id, packet.offset)
        if cache_key not in state.aes_keys:
            try:
                bits = kms.consume_at(packet.key_id, packet.offset, AES_KEY_BITS)
            except UnknownKey as exc:
                raise CannotDecrypt(str(exc)) from None
            state.aes_keys[cache_key] = bits_to_bytes(bits)
        key = state.aes_keys[cache_key]
        try:
            return AESGCM(key).decrypt(
                packet.nonce, packet.ciphertext + packet.tag, packet.header()
            )
        except InvalidTag:
            raise IntegrityFailure("onion layer tag mismatch") from None
    raise ProtocolViolation(f"unknown cipher mode {packet.mode!r}")


def wrap(
    payload: bytes,
    k3_id: KeyId,
    k2_id: KeyId,
    k1_id: KeyId,
    kms_client: Kms,
    mode: str = MODE_OTP,
    state: CipherState | None = None,
) -> OnionPacket:
    """Build the three-layer packet: exit key innermost, entry key outermost."""
    state = state if state is not None else CipherState()
    inner = bytes([_FLAG_FINAL]) + payload
    packet = None
    for key_id in (k3_id, k2_id, k1_id):
        packet = _encrypt_layer(inner, key_id, kms_client, mode, state)
        inner = bytes([_FLAG_NESTED]) + packet.serialize()
    return packet


def peel(
    packet: OnionPacket, kms_node: Kms, state: CipherState | None = None
) -> tuple[str, OnionPacket | bytes]:
    """Remove one layer. Returns ("packet", inner) or ("payload", bytes).

    Raises CannotDecrypt when this node does not hold the layer key and
    IntegrityFailure when the tag does not verify; nothing is forwarded
    in either case.
    """
    state = state if state is not None else CipherState()
    plaintext = _decrypt_layer(packet, kms_node, state)
    if not plaintext:
        raise ProtocolViolation("onion layer decrypted to nothing")
    flag, content = plaintext[0], plaintext[1:]
    if flag == _FLAG_NESTED:
        return "packet", parse_packet(content)
    if flag == _FLAG_FINAL:
        return "payload", content
    raise ProtocolViolation("unknown onion layer flag")
