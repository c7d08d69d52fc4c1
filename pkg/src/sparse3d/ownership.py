"""Lambda-aware random owner assignment for dense rows.

Every id used by some fiber rank is owned by one of its users, picked
uniformly from the ascending-rank candidate list with a counter-based
generator keyed by (seed, global id). The distributed and serial paths
share that generator, so they agree bit for bit. Ids that no rank uses
get a round-robin fallback owner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import split_bounds

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class OwnershipError(RuntimeError):
    pass


def splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def keyed_draw(seed: int, gids) -> np.ndarray:
    """One 64-bit draw per global id, a pure function of (seed, id)."""
    with np.errstate(over="ignore"):
        s = splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        return splitmix64(np.asarray(gids, dtype=np.int64).astype(np.uint64) ^ s)


def pick_owners(seed, gids, candidates: np.ndarray, lo: int, nranks: int) -> np.ndarray:
    """Choose an owner per id from a (len(gids), nranks) candidate mask."""
    gids = np.asarray(gids, dtype=np.int64)
    counts = candidates.sum(axis=1)
    owners = ((gids - lo) % nranks).astype(np.int64)
    used = counts > 0
    if used.any():
        draw = keyed_draw(seed, gids[used])
        choice = (draw % counts[used].astype(np.uint64)).astype(np.int64)
        running = np.cumsum(candidates[used], axis=1)
        owners[used] = np.argmax(running > choice[:, None], axis=1)
    return owners


@dataclass
class OwnerMap:
    """Owner (fiber-local rank) for every global id in ``[lo, lo + len(owner))``."""

    lo: int
    owner: np.ndarray
    used: np.ndarray

    @property
    def hi(self):
        return self.lo + len(self.owner)

    def __len__(self):
        return len(self.owner)

    def owner_of(self, gids):
        return self.owner[np.asarray(gids) - self.lo]

    def owned_by(self, rank):
        return self.lo + np.flatnonzero(self.owner == rank)

    def __eq__(self, other):
        return (
            isinstance(other, OwnerMap)
            and self.lo == other.lo
            and np.array_equal(self.owner, other.owner)
            and np.array_equal(self.used, other.used)
        )


def candidate_mask(need_lists, lo, hi):
    mask = np.zeros((hi - lo, len(need_lists)), dtype=bool)
    for r, ids in enumerate(need_lists):
        ids = np.asarray(ids, dtype=np.int64)
        mask[ids - lo, r] = True
    return mask


def assign_owners_serial(need_lists, seed: int, id_range) -> OwnerMap:
    """Single-address-space oracle: ``need_lists[r]`` holds the ids fiber rank r uses."""
    lo, hi = id_range
    mask = candidate_mask(need_lists, lo, hi)
    gids = np.arange(lo, hi, dtype=np.int64)
    owners = pick_owners(seed, gids, mask, lo, len(need_lists))
    return OwnerMap(lo, owners, mask.any(axis=1))


def assign_owners_distributed(comm, need_ids, seed: int, id_range, tag=7) -> OwnerMap:
    """Run on every rank of a fiber communicator; all ranks return the same map.

    Ids are sharded to responsible ranks by contiguous ranges, users send one
    candidacy message per peer, responsible ranks pick, and an all-gather
    distributes the result.
    """
    lo, hi = id_range
    n, me = comm.size, comm.rank
    seeds = comm.allgather(np.array([seed], dtype=np.int64))
    if np.any(seeds != seeds[0]):
        raise OwnershipError(f"inconsistent ownership seeds across fiber: {seeds.tolist()}")

    bounds = lo + split_bounds(hi - lo, n)
    need_ids = np.unique(np.asarray(need_ids, dtype=np.int64))
    cuts = np.searchsorted(need_ids, bounds)
    for p in range(n):
        if p != me:
            comm.send(p, need_ids[cuts[p]:cuts[p + 1]], tag)

    my_lo, my_hi = int(bounds[me]), int(bounds[me + 1])
    mask = np.zeros((my_hi - my_lo, n), dtype=bool)
    for p in range(n):
        ids = need_ids[cuts[me]:cuts[me + 1]] if p == me else comm.recv(p, tag)
        mask[np.asarray(ids, dtype=np.int64) - my_lo, p] = True

    gids = np.arange(my_lo, my_hi, dtype=np.int64)
    mine = pick_owners(seed, gids, mask, lo, n)
    owners = comm.allgather(mine.astype(np.int64))
    used = comm.allgather(mask.any(axis=1).astype(np.int64)).astype(bool)
    return OwnerMap(lo, owners, used)
