"""Encrypted partition container: AES-128-CTR with encrypt-then-MAC.

Layout, integers little-endian:

    magic          4 bytes  "CDLP"
    version        u16      1
    partition_id   u16
    nonce          16 bytes
    plaintext_len  u64
    ciphertext     plaintext_len bytes
    mac            32 bytes HMAC-SHA256 over everything above

The MAC key is HMAC-SHA256(key, b"mac"); verification happens before any
plaintext is produced. Nonces are random per container, so re-encrypting
the same blob yields different bytes.
"""

from __future__ import annotations

import hmac
import os
import struct
from hashlib import sha256

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import FormatError, IntegrityError

MAGIC = b"CDLP"
VERSION = 1
KEY_BYTES = 16
NONCE_BYTES = 16
MAC_BYTES = 32

_HEADER = struct.Struct("<4sHH16sQ")
HEADER_BYTES = _HEADER.size
MIN_CONTAINER_BYTES = HEADER_BYTES + MAC_BYTES


def _check_key(key: bytes) -> None:
    if not isinstance(key, (bytes, bytearray)) or len(key) != KEY_BYTES:
        raise ValueError(f"key must be {KEY_BYTES} bytes, got {len(key)}")


def _mac_key(key: bytes) -> bytes:
    return hmac.new(key, b"mac", sha256).digest()


def _keystream_xor(key: bytes, nonce: bytes, data: bytes) -> bytes:
    cipher = Cipher(algorithms.AES(bytes(key)), modes.CTR(nonce))
    return cipher.encryptor().update(data)


def encrypt_partition(
    blob: bytes, key: bytes, partition_id: int, nonce: bytes | None = None
) -> bytes:
    _check_key(key)
    if not 0 <= partition_id <= 0xFFFF:
        raise ValueError(f"partition id {partition_id} outside u16 range")
    if nonce is None:
        nonce = os.urandom(NONCE_BYTES)
    if len(nonce) != NONCE_BYTES:
        raise ValueError(f"nonce must be {NONCE_BYTES} bytes")
    body = _HEADER.pack(MAGIC, VERSION, partition_id, nonce, len(blob))
    body += _keystream_xor(key, nonce, bytes(blob))
    return body + hmac.new(_mac_key(key), body, sha256).digest()


def read_header(container: bytes) -> tuple[int, int]:
    """Validate framing and return (partition_id, plaintext_len).

    Framing problems raise FormatError; nothing here checks the MAC.
    """
    if len(container) < MIN_CONTAINER_BYTES:
        raise FormatError(f"container of {len(container)} bytes is too short")
    magic, version, partition_id, _nonce, plaintext_len = _HEADER.unpack_from(container)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    expected = HEADER_BYTES + plaintext_len + MAC_BYTES
    if len(container) != expected:
        raise FormatError(
            f"container of {len(container)} bytes, header promises {expected}"
        )
    return partition_id, plaintext_len


def decrypt_partition(
    container: bytes, key: bytes, expected_partition_id: int | None = None
) -> bytes:
    """Verify and decrypt; MAC failure raises IntegrityError, framing FormatError."""
    _check_key(key)
    partition_id, plaintext_len = read_header(container)
    body, mac = container[:-MAC_BYTES], container[-MAC_BYTES:]
    if not hmac.compare_digest(mac, hmac.new(_mac_key(key), body, sha256).digest()):
        raise IntegrityError("container MAC mismatch")
    if expected_partition_id is not None and partition_id != expected_partition_id:
        raise IntegrityError(
            f"container is for partition {partition_id}, expected {expected_partition_id}"
        )
    _magic, _version, _pid, nonce, _len = _HEADER.unpack_from(container)
    return _keystream_xor(key, nonce, container[HEADER_BYTES : HEADER_BYTES + plaintext_len])
