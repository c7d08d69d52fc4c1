"""Point-to-point communication graphs and their executable plans.

A graph lists, per ordered (sender, receiver) pair of fiber ranks, the
sorted global ids of the dense-row chunks (data units) in that message.
``compile_plan`` turns one rank's view of a graph into a plan under one of
three buffer strategies:

``bb``  copy through send and receive staging buffers on both sides;
``rb``  re-lay out the store so the unique-id side moves whole contiguous
        regions, keeping a buffer only on the non-unique side;
``nb``  describe every message as coalesced (offset, length) regions of the
        store; the transport gathers/scatters them directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import pack_rows, unpack_rows

STRATEGIES = ("bb", "rb", "nb")
BROADCAST, REDUCE = "broadcast", "reduce"


class PlanError(RuntimeError):
    pass


# -- graphs -----------------------------------------------------------------


@dataclass
class CommGraph:
    kind: str
    size: int
    messages: dict = field(default_factory=dict)

    def outgoing(self, rank):
        return {d: ids for (s, d), ids in sorted(self.messages.items()) if s == rank}

    def incoming(self, rank):
        return {s: ids for (s, d), ids in sorted(self.messages.items()) if d == rank}

    def restricted(self, rank):
        return CommGraph(self.kind, self.size,
                         {k: v for k, v in self.messages.items() if rank in k})

    def transpose(self, kind=None):
        flipped = {(d, s): ids for (s, d), ids in self.messages.items()}
        if kind is None:
            kind = REDUCE if self.kind == BROADCAST else BROADCAST
        return CommGraph(kind, self.size, flipped)

    def total_ids(self):
        return sum(len(v) for v in self.messages.values())

    def triples(self):
        return {(s, d, int(i)) for (s, d), ids in self.messages.items() for i in ids}

    def validate(self):
        for (s, d), ids in self.messages.items():
            if s == d:
                raise PlanError(f"self-message at rank {s}")
            if len(ids) == 0:
                raise PlanError(f"empty message {s}->{d}")
            if np.any(np.diff(ids) <= 0):
                raise PlanError(f"ids of message {s}->{d} not strictly ascending")
        # Broadcast receivers and reduce senders see each id at most once.
        for r in range(self.size):
            side = self.incoming(r) if self.kind == BROADCAST else self.outgoing(r)
            if side:
                ids = np.concatenate(list(side.values()))
                if len(np.unique(ids)) != len(ids):
                    raise PlanError(f"rank {r} has duplicate ids on its unique side")


def _broadcast_from_lambda(fiber_lambda, owners) -> CommGraph:
    mask = fiber_lambda.mask
    n = mask.shape[1]
    gids = np.arange(fiber_lambda.lo, fiber_lambda.hi)
    used = mask.any(axis=1)
    own = owners.owner_of(gids)
    bad = used & ~mask[np.arange(len(gids)), own]
    if bad.any():
        gid = int(gids[np.argmax(bad)])
        raise PlanError(f"owner of id {gid} is rank {int(own[gid - fiber_lambda.lo])}, outside its lambda set")
    messages = {}
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            sel = (own == a) & mask[:, a] & mask[:, b]
            if sel.any():
                messages[(a, b)] = gids[sel]
    return CommGraph(BROADCAST, n, messages)


def build_precomm_rows(lam, owners, fiber: int) -> CommGraph:
    """m_{a->b} = {i : a, b in Lambda_i and owner(a_i) = a} within row fiber ``fiber``."""
    return _broadcast_from_lambda(lam.rows[fiber], owners)


def build_precomm_cols(lam, owners, fiber: int) -> CommGraph:
    """Column analogue of :func:`build_precomm_rows`."""
    return _broadcast_from_lambda(lam.cols[fiber], owners)


def build_postcomm_spmm(lam, owners, fiber: int) -> CommGraph:
    """Non-owner users of a_i send partial rows to owner(a_i)."""
    return build_precomm_rows(lam, owners, fiber).transpose(REDUCE)


def build_rank_graph(comm, used_ids, owners, tag=11) -> CommGraph:
    """One rank's share of the broadcast graph, built by exchanging request lists.

    Each rank tells every peer which of its used ids that peer owns; the
    requests received become the outgoing messages.
    """
    used_ids = np.asarray(used_ids, dtype=np.int64)
    own = owners.owner_of(used_ids)
    me, n = comm.rank, comm.size
    messages = {}
    for p in range(n):
        if p != me:
            req = used_ids[own == p]
            comm.send(p, req, tag)
            if len(req):
                messages[(p, me)] = req
    for p in range(n):
        if p != me:
            req = comm.recv(p, tag).astype(np.int64)
            if len(req):
                if np.any(owners.owner_of(req) != me):
                    raise PlanError(f"rank {p} requested ids not owned by rank {me}")
                messages[(me, p)] = req
    return CommGraph(BROADCAST, n, messages)


# -- dense row store --------------------------------------------------------


class DenseRowStore:
    """Contiguous words holding one ``width``-word chunk per resident global id.

    Slot ``s`` covers words ``[s*width, (s+1)*width)``; ``ids[s]`` is its id.
    """

    def __init__(self, ids, width: int, layout: str = "ascending"):
        ids = np.asarray(ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise ValueError("store ids must be unique")
        self.width = width
        self.words = np.zeros((len(ids), width))
        self._set_ids(ids, layout)

    def _set_ids(self, ids, layout):
        self.ids = ids
        self.layout = layout
        order = np.argsort(ids, kind="stable")
        self._sorted = ids[order]
        self._slot = order.astype(np.int64)

    @property
    def nwords(self):
        return self.words.size

    def __len__(self):
        return len(self.ids)

    def __contains__(self, gid):
        pos = np.searchsorted(self._sorted, gid)
        return pos < len(self._sorted) and self._sorted[pos] == gid

    def slots(self, gids) -> np.ndarray:
        gids = np.asarray(gids, dtype=np.int64)
        pos = np.searchsorted(self._sorted, gids)
        pos = np.minimum(pos, max(len(self._sorted) - 1, 0))
        ok = (self._sorted[pos] == gids) if len(self._sorted) else np.zeros(len(gids), bool)
        if not np.all(ok):
            missing = gids[~ok]
            raise KeyError(f"ids not resident in store: {missing[:8].tolist()}")
        return self._slot[pos]

    def offset(self, gid) -> int:
        return int(self.slots([gid])[0]) * self.width

    def directory(self):
        return {int(g): (s * self.width, self.width) for s, g in enumerate(self.ids)}

    def relayout(self, new_ids, layout):
        new_ids = np.asarray(new_ids, dtype=np.int64)
        if not np.array_equal(np.sort(new_ids), self._sorted):
            raise PlanError("relayout must keep the same id set")
        moved = self.words[self.slots(new_ids)]
        self._set_ids(new_ids, layout)
        self.words = np.ascontiguousarray(moved)

    def fingerprint(self):
        h = hashlib.sha1(self.ids.tobytes())
        h.update(f"{self.width}:{self.layout}".encode())
        return h.hexdigest()

    def snapshot(self):
        return {int(g): self.words[s].copy() for s, g in enumerate(self.ids)}

    def like(self):
        """Empty store with identical ids and layout."""
        other = DenseRowStore.__new__(DenseRowStore)
        other.width = self.width
        other.words = np.zeros_like(self.words)
        other._set_ids(self.ids.copy(), self.layout)
        return other


# -- plans ------------------------------------------------------------------


@dataclass
class PeerSide:
    peer: int
    ids: np.ndarray
    mode: str  # "buffer" | "region" | "descriptors"
    slots: np.ndarray
    descriptors: np.ndarray

    @property
    def nids(self):
        return len(self.ids)


@dataclass
class CommPlan:
    strategy: str
    kind: str
    rank: int
    width: int
    sends: list
    recvs: list
    store_fingerprint: str
    layout: str = "ascending"
    store_ids: np.ndarray = None

    def send_words(self):
        return sum(s.nids for s in self.sends) * self.width

    def recv_words(self):
        return sum(s.nids for s in self.recvs) * self.width

    def expected_copy_words(self):
        words = 0
        for side in self.sends + self.recvs:
            if side.mode == "buffer":
                words += side.nids * self.width
        return words

    def to_dict(self):
        def side(s):
            return {
                "peer": s.peer,
                "mode": s.mode,
                "ids": s.ids.tolist(),
                "descriptors": s.descriptors.tolist(),
            }

        return {
            "rank": self.rank,
            "kind": self.kind,
            "strategy": self.strategy,
            "width": self.width,
            "layout": self.layout,
            "store_ids": [] if self.store_ids is None else self.store_ids.tolist(),
            "sends": [side(s) for s in self.sends],
            "recvs": [side(s) for s in self.recvs],
        }


def coalesce(slots, width) -> np.ndarray:
    """Maximal (offset, length) word regions for consecutive slots."""
    slots = np.asarray(slots, dtype=np.int64)
    if len(slots) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    breaks = np.flatnonzero(np.diff(slots) != 1) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [len(slots)]])
    return np.column_stack([slots[starts] * width, (ends - starts) * width]).astype(np.int64)


def rb_layout(graph: CommGraph, rank: int, store: DenseRowStore) -> np.ndarray:
    """Unique-side groups by ascending peer, then every other resident id ascending."""
    side = graph.incoming(rank) if graph.kind == BROADCAST else graph.outgoing(rank)
    groups = [side[p] for p in sorted(side)]
    grouped = np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)
    rest = np.setdiff1d(store.ids, grouped)
    return np.concatenate([grouped, rest]).astype(np.int64)


def _side(peer, ids, store, mode):
    try:
        slots = store.slots(ids)
    except KeyError as exc:
        raise PlanError(f"peer {peer}: {exc.args[0]}") from None
    desc = coalesce(slots, store.width)
    if mode == "region" and len(desc) != 1:
        raise PlanError(f"peer {peer}: ids are not contiguous in the store")
    return PeerSide(peer, np.asarray(ids, dtype=np.int64), mode, slots, desc)


def compile_plan(graph: CommGraph, store: DenseRowStore, strategy: str, rank: int) -> CommPlan:
    """Compile ``rank``'s messages of ``graph`` against ``store``.

    Under ``rb`` the store is re-laid out in place first.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    unique_is_recv = graph.kind == BROADCAST
    if strategy == "rb":
        target = rb_layout(graph, rank, store)
        if not np.array_equal(target, store.ids):
            store.relayout(target, "rb")
    modes = {
        "bb": ("buffer", "buffer"),
        "nb": ("descriptors", "descriptors"),
        "rb": ("buffer", "region") if unique_is_recv else ("region", "buffer"),
    }[strategy]
    send_mode, recv_mode = modes
    sends = [_side(p, ids, store, send_mode) for p, ids in graph.outgoing(rank).items()]
    recvs = [_side(p, ids, store, recv_mode) for p, ids in graph.incoming(rank).items()]
    return CommPlan(strategy, graph.kind, rank, store.width, sends, recvs, store.fingerprint(),
                    store.layout, store.ids.copy())


def execute(plan: CommPlan, store: DenseRowStore, comm, tag: int = 0) -> int:
    """Move one round of data; returns words received."""
    if store.fingerprint() != plan.store_fingerprint:
        raise PlanError(f"rank {plan.rank}: store layout changed since the plan was compiled")
    accumulate = plan.kind == REDUCE
    flat = store.words.reshape(-1)
    for s in plan.sends:
        if s.mode == "buffer":
            buf = pack_rows(store.words, s.slots)
            comm.count_copy(buf.size)
            comm.send_buffer(s.peer, buf, tag)
        elif s.mode == "region":
            off, n = s.descriptors[0]
            comm.send_buffer(s.peer, flat[off:off + n], tag)
        else:
            comm.send_gathered(s.peer, s.descriptors, store.words, tag)
    received = 0
    for s in plan.recvs:
        if s.mode == "buffer":
            buf = np.empty((s.nids, plan.width))
            received += comm.recv_buffer(s.peer, buf, tag)
            comm.count_copy(buf.size)
            unpack_rows(buf, store.words, s.slots, accumulate)
        elif s.mode == "region":
            off, n = s.descriptors[0]
            received += comm.recv_buffer(s.peer, flat[off:off + n], tag)
        else:
            received += comm.recv_scattered(s.peer, s.descriptors, store.words, tag, accumulate)
    return received


def dump_plans(plans, path=None):
    """JSON debug dump of compiled plans (list of :meth:`CommPlan.to_dict`)."""
    doc = {"schema": "sparse3d.plans/1", "plans": [p.to_dict() for p in plans]}
    text = json.dumps(doc, indent=1, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
