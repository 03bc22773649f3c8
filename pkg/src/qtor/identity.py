"""Fixed-width node identity encoding.

Node identities travel inside one-time-pad locked fields as exactly 128
bits, so ciphertext length reveals nothing about which identity is
inside. Decoding goes through the scenario registry; bytes that name no
registered node raise MalformedIdentity.
"""

from __future__ import annotations

import hashlib

from .errors import MalformedIdentity

NODE_CODE_BYTES = 16


def node_code(node_id: str) -> bytes:
    return hashlib.sha256(b"qtor-node:" + node_id.encode()).digest()[:NODE_CODE_BYTES]


class IdentityRegistry:
    """Maps 128-bit identity codes back to scenario node IDs."""

    def __init__(self, node_ids=()):
        self._by_code: dict[bytes, str] = {}
        self._ids: set[str] = set()
        for node_id in node_ids:
            self.register(node_id)

    def register(self, node_id: str) -> None:
        self._by_code[node_code(node_id)] = node_id
        self._ids.add(node_id)

    def decode(self, code: bytes) -> str:
        try:
            return self._by_code[bytes(code)]
        except KeyError:
            raise MalformedIdentity("identity bytes match no registered node") from None

    def try_decode(self, code: bytes) -> str | None:
        return self._by_code.get(bytes(code))

    def knows(self, node_id: str) -> bool:
        return node_id in self._ids

    def node_ids(self) -> set[str]:
        return set(self._ids)
