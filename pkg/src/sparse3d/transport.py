"""Deterministic in-process message passing.

A :class:`World` runs one thread per rank. Point-to-point sends are eager:
the payload is copied at the send boundary into a FIFO mailbox keyed by
(context, tag, source, destination), and receives block until a matching
message arrives or the deadlock timeout expires. Collectives are built from
the same point-to-point layer with linear algorithms and fixed summation
order, so every delivered payload is independent of thread scheduling.

Each rank carries a ``phase`` label; received words, message counts and
staging-copy words are accumulated per (rank, phase).
"""

from __future__ import annotations

import struct
import threading
import time
import zlib
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

DEFAULT_TIMEOUT = 30.0

# Collectives use tags below this value so they never match user traffic.
_COLL_TAG = -1000

PHASES = ("init", "setup", "precomm", "compute", "postcomm", "update")

# One trace record: phase code, source, destination, context, words.
TRACE_RECORD = struct.Struct("<B3xiiiq")


class TransportError(RuntimeError):
    pass


class DeadlockError(TransportError):
    pass


class WorldAborted(TransportError):
    """Raised in surviving ranks after another rank failed."""


class RankFailure(RuntimeError):
    """A rank worker raised; carries the rank and phase it was in."""

    def __init__(self, rank, phase, exc):
        self.rank = rank
        self.phase = phase
        self.original = exc
        super().__init__(f"rank {rank} failed during {phase}: {type(exc).__name__}: {exc}")


@dataclass
class PhaseCounters:
    recv_words: int = 0
    recv_msgs: int = 0
    send_words: int = 0
    send_msgs: int = 0
    copy_words: int = 0


class _RankState:
    def __init__(self, rank):
        self.rank = rank
        self.phase = "init"
        self.cond = threading.Condition(threading.Lock())
        self.counters = defaultdict(PhaseCounters)


class World:
    """The set of simulated ranks and their mailboxes."""

    def __init__(self, size: int, timeout: float = DEFAULT_TIMEOUT, trace: bool = False):
        if size < 1:
            raise ValueError("world size must be >= 1")
        self.size = size
        self.timeout = timeout
        self._ranks = [_RankState(r) for r in range(size)]
        self._boxes = defaultdict(deque)
        self._aborted = False
        self._ctx_lock = threading.Lock()
        self._contexts = {0: "world"}
        self.trace = [] if trace else None
        self._trace_lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    def comm_world(self, rank: int) -> "Communicator":
        return Communicator(self, list(range(self.size)), rank, 0)

    def run(self, fn, *args):
        """Run ``fn(comm_world, *args)`` on every rank; return results by rank."""
        self._aborted = False
        results = [None] * self.size
        errors = [None] * self.size

        def work(r):
            comm = self.comm_world(r)
            try:
                results[r] = fn(comm, *args)
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                errors[r] = exc
                self.abort()

        if self.size == 1:
            work(0)
        else:
            threads = [threading.Thread(target=work, args=(r,), daemon=True) for r in range(self.size)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        primary = [(r, e) for r, e in enumerate(errors) if e is not None and not isinstance(e, WorldAborted)]
        if primary or any(errors):
            r, exc = primary[0] if primary else next((r, e) for r, e in enumerate(errors) if e)
            self._boxes.clear()
            if isinstance(exc, RankFailure):
                raise exc
            raise RankFailure(r, self._ranks[r].phase, exc) from exc
        leftover = [k for k, q in self._boxes.items() if q]
        if leftover:
            raise TransportError(f"unreceived messages after run: {leftover[:4]}")
        return results

    def abort(self):
        self._aborted = True
        for st in self._ranks:
            with st.cond:
                st.cond.notify_all()

    # -- accounting --------------------------------------------------------

    def set_phase(self, rank, phase):
        self._ranks[rank].phase = phase

    def phase(self, rank):
        return self._ranks[rank].phase

    def counters(self, rank, phase=None):
        c = self._ranks[rank].counters
        return c[phase] if phase is not None else c

    def reset_counters(self):
        for st in self._ranks:
            st.counters.clear()
        if self.trace is not None:
            self.trace.clear()

    def count_copy(self, rank, words):
        st = self._ranks[rank]
        st.counters[st.phase].copy_words += int(words)

    def write_trace(self, path):
        """Dump the trace as fixed-width records sorted for diffing."""
        phases = {p: i for i, p in enumerate(PHASES)}
        with open(path, "wb") as fh:
            for phase, src, dst, ctx, words in sorted(self.trace, key=lambda t: (phases.get(t[0], 255),) + t[1:]):
                fh.write(TRACE_RECORD.pack(phases.get(phase, 255), src, dst, ctx, words))

    # -- point-to-point core -----------------------------------------------

    def _context_for(self, key):
        # Derived from the key, not allocation order, so ids are schedule independent.
        ctx = zlib.crc32(repr(key).encode()) & 0x7FFFFFFF
        with self._ctx_lock:
            owner = self._contexts.setdefault(ctx, key)
        if owner != key:
            raise TransportError(f"context id collision between {owner} and {key}")
        return ctx

    def _post(self, ctx, tag, src, dst, payload):
        st = self._ranks[src]
        c = st.counters[st.phase]
        c.send_words += payload.size
        c.send_msgs += 1
        target = self._ranks[dst]
        with target.cond:
            self._boxes[(ctx, tag, src, dst)].append(payload)
            target.cond.notify_all()

    def _take(self, ctx, tag, src, dst):
        st = self._ranks[dst]
        key = (ctx, tag, src, dst)
        deadline = time.monotonic() + self.timeout
        with st.cond:
            while True:
                box = self._boxes.get(key)
                if box:
                    payload = box.popleft()
                    break
                if self._aborted:
                    raise WorldAborted(f"rank {dst}: world aborted while waiting on rank {src}")
                left = deadline - time.monotonic()
                if left <= 0:
                    raise DeadlockError(
                        f"rank {dst} waited {self.timeout:.1f}s for a message from rank {src} "
                        f"(context {ctx}, tag {tag})"
                    )
                st.cond.wait(left)
        c = st.counters[st.phase]
        c.recv_words += payload.size
        c.recv_msgs += 1
        if self.trace is not None:
            with self._trace_lock:
                self.trace.append((st.phase, src, dst, ctx, int(payload.size)))
        return payload


class Communicator:
    """A rank's view of an ordered group of world ranks."""

    def __init__(self, world: World, members, rank: int, context: int):
        self.world = world
        self.members = list(members)
        self.rank = rank
        self.context = context
        self._splits = 0

    @property
    def size(self):
        return len(self.members)

    @property
    def world_rank(self):
        return self.members[self.rank]

    def _peer(self, r):
        if not 0 <= r < self.size:
            raise ValueError(f"peer {r} outside communicator of size {self.size}")
        return self.members[r]

    def set_phase(self, phase):
        self.world.set_phase(self.world_rank, phase)

    def count_copy(self, words):
        self.world.count_copy(self.world_rank, words)

    # -- raw messages ------------------------------------------------------

    def send(self, dest, payload, tag=0):
        """Send an array; the payload is copied here."""
        payload = np.array(payload, copy=True).ravel()
        self.world._post(self.context, tag, self.world_rank, self._peer(dest), payload)

    def recv(self, src, tag=0):
        return self.world._take(self.context, tag, self._peer(src), self.world_rank)

    # -- buffered path -----------------------------------------------------

    def send_buffer(self, dest, region, tag=0):
        self.send(dest, region, tag)

    def recv_buffer(self, src, region, tag=0):
        """Receive into a contiguous 1-D region; returns words received."""
        payload = self.recv(src, tag)
        if payload.size != region.size:
            raise TransportError(
                f"rank {self.rank} expected {region.size} words from rank {src}, got {payload.size}"
            )
        region[...] = payload.reshape(region.shape)
        return payload.size

    # -- descriptor (gather/scatter) path ------------------------------------

    def send_gathered(self, dest, descriptors, store, tag=0):
        """Send the concatenation of ``store[off:off+len]`` regions."""
        from .kernels import gather_regions

        flat = store.reshape(-1)
        payload = gather_regions(flat, descriptors)
        self.world._post(self.context, tag, self.world_rank, self._peer(dest), payload)

    def recv_scattered(self, src, descriptors, store, tag=0, accumulate=False):
        """Write (or add) an incoming payload into described regions in order."""
        from .kernels import scatter_regions

        payload = self.recv(src, tag)
        expected = int(np.asarray(descriptors).reshape(-1, 2)[:, 1].sum()) if len(descriptors) else 0
        if payload.size != expected:
            raise TransportError(
                f"rank {self.rank} descriptors cover {expected} words but rank {src} sent {payload.size}"
            )
        scatter_regions(store.reshape(-1), descriptors, payload, accumulate)
        return payload.size

    # -- collectives -------------------------------------------------------

    def _coll_tag(self):
        return _COLL_TAG

    def allgatherv(self, part):
        """Every member gets the list of parts in rank order."""
        part = np.asarray(part)
        tag = self._coll_tag()
        for r in range(self.size):
            if r != self.rank:
                self.send(r, part, tag)
        parts = []
        for r in range(self.size):
            parts.append(part.ravel().copy() if r == self.rank else self.recv(r, tag))
        return parts

    def allgather(self, part):
        """Concatenated parts in rank order; part sizes may differ."""
        parts = self.allgatherv(part)
        dtype = np.result_type(*parts) if parts else np.float64
        return np.concatenate([p.astype(dtype, copy=False) for p in parts])

    def reduce_scatter(self, vector, counts):
        """Member m gets the elementwise sum of segment m, summed by ascending source rank."""
        vector = np.asarray(vector, dtype=np.float64).ravel()
        counts = np.asarray(counts, dtype=np.int64)
        if len(counts) != self.size or counts.sum() != vector.size:
            raise TransportError(
                f"segmentation {counts.tolist()} does not match vector of {vector.size} words "
                f"on a communicator of size {self.size}"
            )
        bounds = np.concatenate([[0], np.cumsum(counts)])
        tag = self._coll_tag() - 1
        for r in range(self.size):
            if r != self.rank:
                self.send(r, vector[bounds[r]:bounds[r + 1]], tag)
        mine = vector[bounds[self.rank]:bounds[self.rank + 1]]
        acc = None
        for r in range(self.size):
            seg = mine if r == self.rank else self.recv(r, tag)
            if seg.size != mine.size:
                raise TransportError(f"segment from rank {r} has {seg.size} words, expected {mine.size}")
            acc = seg.copy() if acc is None else acc + seg
        return acc

    def _gather_bcast(self, item):
        """Fixed-size items from every member, via rank 0 (2(n-1) messages)."""
        tag = self._coll_tag() - 2
        if self.rank == 0:
            table = [item] + [self.recv(r, tag) for r in range(1, self.size)]
            table = np.concatenate(table)
            for r in range(1, self.size):
                self.send(r, table, tag)
            return table
        self.send(0, item, tag)
        return self.recv(0, tag)

    def barrier(self):
        self.allgatherv(np.zeros(0))

    def split(self, color: int, key: int) -> "Communicator":
        """Members with equal color form a new communicator ordered by (key, rank)."""
        seq = self._splits
        self._splits += 1
        info = self._gather_bcast(np.array([color, key], dtype=np.int64)).reshape(-1, 2)
        group = sorted((int(k), r) for r, (c, k) in enumerate(info) if c == color)
        members = [self.members[r] for _, r in group]
        new_rank = [r for _, r in group].index(self.rank)
        ctx = self.world._context_for((self.context, seq, int(color)))
        return Communicator(self.world, members, new_rank, ctx)
