"""Simulated trusted execution environment.

Models the pieces of a TrustZone/GlobalPlatform setup that the rest of
the package needs to reason about confidentiality and cost:

* SecureArena: a capped secure-world allocator with peak tracking;
* SharedBuffer: normal-world memory whose writes are taint-tagged, with
  no way to write confidential plaintext through the interface;
* Session: the client <-> trusted-application call protocol, charging two
  one-way context switches per invocation;
* CostLedger / CostConstants: counters and the overhead formula
  2 * invocations * t_switch + decrypted_bytes * t_byte.

Execution is in-process and time is derived from counters, never from
sleeps, so runs are deterministic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

from . import container
from .errors import SecureMemoryError, SessionStateError

DEFAULT_SECURE_CAPACITY = 7 * 2**20  # secure-world budget for one trusted app

DEFAULT_SWITCH_SECONDS = 75.1e-6
DEFAULT_DECRYPT_BYTE_SECONDS = 163.7e-9


@dataclass
class CostConstants:
    """Measured unit costs: one-way world switch, one decrypted byte."""

    switch_seconds: float = DEFAULT_SWITCH_SECONDS
    decrypt_byte_seconds: float = DEFAULT_DECRYPT_BYTE_SECONDS

    def __post_init__(self):
        if self.switch_seconds <= 0 or self.decrypt_byte_seconds <= 0:
            raise ValueError("cost constants must be positive")


@dataclass
class PartitionRecord:
    partition_id: int
    decrypted_bytes: int
    arena_peak: int


@dataclass
class CostLedger:
    """Monotone counters of confidentiality-relevant events."""

    context_switches: int = 0
    decrypted_bytes: int = 0
    partition_records: list[PartitionRecord] = field(default_factory=list)


def estimate_overhead(
    invocations: float, decrypted_bytes: float, constants: CostConstants | None = None
) -> float:
    """Predicted added seconds for a partitioned run.

    Each invocation enters and leaves the secure world (two one-way
    switches); every decrypted byte pays the per-byte cost.
    """
    if invocations < 0 or decrypted_bytes < 0:
        raise ValueError("invocations and decrypted_bytes must be >= 0")
    c = constants or CostConstants()
    return 2.0 * invocations * c.switch_seconds + decrypted_bytes * c.decrypt_byte_seconds


def ledger_overhead(ledger: CostLedger, constants: CostConstants | None = None) -> float:
    """Overhead implied by a ledger's own counters."""
    return estimate_overhead(ledger.context_switches / 2, ledger.decrypted_bytes, constants)


class Allocation:
    """Handle for one live arena allocation."""

    __slots__ = ("size", "freed")

    def __init__(self, size: int):
        self.size = size
        self.freed = False

    def __repr__(self):
        state = "freed" if self.freed else "live"
        return f"Allocation({self.size} bytes, {state})"


class SecureArena:
    """Capped secure-world memory; refuses any allocation past capacity."""

    def __init__(self, capacity: int = DEFAULT_SECURE_CAPACITY):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._current = 0
        self._peak = 0
        self._window_peak = 0

    @property
    def current_usage(self) -> int:
        return self._current

    @property
    def peak_usage(self) -> int:
        return self._peak

    def alloc(self, size: int) -> Allocation:
        if size <= 0:
            raise ValueError(f"allocation size must be positive, got {size}")
        if self._current + size > self.capacity:
            raise SecureMemoryError(
                f"allocating {size} bytes over {self._current} in use "
                f"exceeds the {self.capacity}-byte secure arena"
            )
        self._current += size
        self._peak = max(self._peak, self._current)
        self._window_peak = max(self._window_peak, self._current)
        return Allocation(size)

    def free(self, allocation: Allocation) -> None:
        if allocation.freed:
            raise ValueError("allocation already freed")
        allocation.freed = True
        self._current -= allocation.size

    def begin_window(self) -> None:
        """Start a peak-tracking window (used for per-partition records)."""
        self._window_peak = self._current

    @property
    def window_peak(self) -> int:
        return self._window_peak


class TaintTag(str, Enum):
    """The only tags a shared-buffer write can carry.

    There is deliberately no tag for confidential plaintext; such data
    must be encrypted (becoming CIPHERTEXT) before it can leave the
    secure world.
    """

    PUBLIC = "public"
    CIPHERTEXT = "ciphertext"


@dataclass
class WriteRecord:
    offset: int
    length: int
    tag: TaintTag
    data: bytes


class SharedBuffer:
    """Normal-world memory registered with the trusted app.

    Anyone can read it; every write is logged with its taint tag so tests
    can prove no confidential plaintext ever landed here.
    """

    def __init__(self):
        self._data = bytearray()
        self.writes: list[WriteRecord] = []

    def __len__(self) -> int:
        return len(self._data)

    def append(self, data: bytes, tag: TaintTag) -> int:
        offset = len(self._data)
        self.write(offset, data, tag)
        return offset

    def write(self, offset: int, data: bytes, tag: TaintTag) -> None:
        if not isinstance(tag, TaintTag):
            raise TypeError(f"tag must be a TaintTag, got {tag!r}")
        if offset < 0:
            raise ValueError("negative offset")
        data = bytes(data)
        end = offset + len(data)
        if end > len(self._data):
            self._data.extend(b"\x00" * (end - len(self._data)))
        self._data[offset:end] = data
        self.writes.append(WriteRecord(offset, len(data), tag, data))

    def read(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > len(self._data):
            raise ValueError(f"read [{offset}, {offset + length}) outside buffer")
        return bytes(self._data[offset : offset + length])


def find_plaintext_leak(
    buffers: Sequence[SharedBuffer] | SharedBuffer,
    secrets: Iterable[bytes],
    window: int = 8,
) -> bytes | None:
    """Return the first ``window``-byte slice of any secret found in any
    buffer's write log, or None if nothing leaked.

    Secrets shorter than the window cannot be detected and are skipped.
    """
    if isinstance(buffers, SharedBuffer):
        buffers = [buffers]
    logged: set[bytes] = set()
    for buf in buffers:
        for record in buf.writes:
            data = record.data
            for i in range(len(data) - window + 1):
                logged.add(data[i : i + window])
    for secret in secrets:
        for i in range(len(secret) - window + 1):
            piece = secret[i : i + window]
            if piece in logged:
                return piece
    return None


@dataclass
class TrustedApp:
    """One trusted application: its identity, arena, and ledger."""

    arena: SecureArena
    ledger: CostLedger = field(default_factory=CostLedger)
    app_id: str = "cdlp-runner"


_session_ids = itertools.count(1)


class Session:
    """Connection from a client application to one trusted application."""

    def __init__(self, app: TrustedApp):
        self.app = app
        self.session_id = next(_session_ids)
        self._open = True

    @property
    def state(self) -> str:
        return "open" if self._open else "closed"

    def invoke(
        self,
        command_id: int,
        buffers: Sequence[SharedBuffer],
        trusted_fn: Callable[[TrustedApp, Sequence[SharedBuffer]], object],
    ):
        """Run ``trusted_fn`` inside the secure world.

        Costs exactly two one-way context switches (entry and exit),
        charged even if the function raises.
        """
        if not self._open:
            raise SessionStateError(f"invoke on closed session {self.session_id}")
        self.app.ledger.context_switches += 2
        return trusted_fn(self.app, buffers)

    def close(self) -> None:
        self._open = False


class SecureBlob:
    """Decrypted bytes living in the arena; free via ``release``."""

    __slots__ = ("data", "allocation")

    def __init__(self, data: bytes, allocation: Allocation | None):
        self.data = data
        self.allocation = allocation

    def release(self, arena: SecureArena) -> None:
        if self.allocation is not None:
            arena.free(self.allocation)
            self.allocation = None


def ledger_decrypt(
    arena: SecureArena,
    ledger: CostLedger,
    container_bytes: bytes,
    key: bytes,
    expected_partition_id: int | None = None,
) -> SecureBlob:
    """Decrypt a container into the arena, counting the plaintext bytes.

    The plaintext is charged to the arena before decryption; on any
    failure (no room, bad framing, MAC mismatch) the counter stays
    untouched and the arena is left as it was.
    """
    _pid, plaintext_len = container.read_header(container_bytes)
    allocation = arena.alloc(plaintext_len) if plaintext_len else None
    try:
        blob = container.decrypt_partition(container_bytes, key, expected_partition_id)
    except Exception:
        if allocation is not None:
            arena.free(allocation)
        raise
    ledger.decrypted_bytes += plaintext_len
    return SecureBlob(blob, allocation)
