"""3D SDDMM and SpMM drivers over the simulated transport.

``setup`` runs once per configuration: it gathers S_{x,y} over each depth
fiber, assigns dense-row owners per row and column fiber, exchanges request
lists to build the communication graphs, and compiles plans. Kernel runs
then only move data (PreComm), compute locally, and combine partial
results (PostComm).

The Dense3D baseline uses the same owners but all-gathers every owned
chunk along the fibers regardless of need.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .grid import ProcGrid, dist3d, localize, split_bounds
from .kernels import LocalDense, local_sddmm, local_spmm
from .matrix import SparseMatrix
from .metrics import MetricsReport, RankMetrics
from .ownership import assign_owners_distributed, keyed_draw
from .plan import STRATEGIES, DenseRowStore, build_rank_graph, compile_plan, execute
from .transport import DEFAULT_TIMEOUT, RankFailure, World

MODES = ("sparse", "dense3d")
UPDATE_SALT = 0x5EED

_TAG_A, _TAG_B, _TAG_POST = 21, 22, 23


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    grid: ProcGrid
    K: int
    strategy: str = "nb"
    mode: str = "sparse"
    iterations: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.K % self.grid.Z:
            raise ValueError(f"K={self.K} is not a positive multiple of Z={self.grid.Z}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def width(self):
        return self.K // self.grid.Z


@dataclass
class RankState:
    rank: int
    coords: tuple
    row: object
    col: object
    depth: object
    block: object
    part_counts: np.ndarray
    part_start: int
    row_owners: object
    col_owners: object
    a_store: DenseRowStore
    b_store: DenseRowStore
    a_graph: object
    b_graph: object
    a_pre: object
    b_pre: object
    a_post: object
    a_loc: np.ndarray
    b_loc: np.ndarray
    setup_recv_words: int = 0
    setup_time: float = 0.0
    a_out: DenseRowStore | None = None

    @property
    def owned_a(self):
        return self.row_owners.owned_by(self.coords[1])

    @property
    def owned_b(self):
        return self.col_owners.owned_by(self.coords[0])

    @property
    def part_nnz(self):
        return int(self.part_counts[self.coords[2]])


@dataclass
class EngineState:
    config: KernelConfig
    shape: tuple
    world: World
    ranks: list
    updates: int = 0
    runs: int = 0
    info: dict = field(default_factory=dict)

    @property
    def grid(self):
        return self.config.grid

    def checksum(self):
        """Digest of every setup-phase structure (graphs, plans, layouts)."""
        h = hashlib.sha1()
        for st in self.ranks:
            for g in (st.a_graph, st.b_graph):
                for (s, d), ids in sorted(g.messages.items()):
                    h.update(f"{s}>{d}:".encode() + ids.tobytes())
            for p in (st.a_pre, st.b_pre, st.a_post):
                if p is not None:
                    h.update(repr(p.to_dict()).encode())
            h.update(st.a_store.fingerprint().encode() + st.b_store.fingerprint().encode())
            h.update(st.block.rows.tobytes() + st.block.cols.tobytes())
        return h.hexdigest()


def _run(world, fn, *args):
    try:
        return world.run(fn, *args)
    except RankFailure as exc:
        raise EngineError(f"{exc}") from exc.original


# -- setup ------------------------------------------------------------------


def _dense_layout(lo, hi, owners):
    """All ids of a fiber range grouped by owner ascending (the all-gather order)."""
    gids = np.arange(lo, hi, dtype=np.int64)
    return gids[np.argsort(owners.owner, kind="stable")]


def _setup_rank(comm, ctx):
    t0 = time.perf_counter()
    cfg, grid = ctx["config"], ctx["config"].grid
    comm.set_phase("setup")
    r = comm.rank
    x, y, z = grid.coords(r)
    row = comm.split(x * grid.Z + z, y)
    col = comm.split(y * grid.Z + z, x)
    depth = comm.split(x * grid.Y + y, z)

    part = ctx["parts"][r]
    packed = np.column_stack([part.rows, part.cols, part.vals]).astype(np.float64)
    pieces = depth.allgatherv(packed.ravel())
    counts = np.array([p.size // 3 for p in pieces], dtype=np.int64)
    entries = np.concatenate(pieces).reshape(-1, 3)
    M, N = ctx["shape"]
    gathered = SparseMatrix(M, N, entries[:, 0].astype(np.int64), entries[:, 1].astype(np.int64),
                            entries[:, 2], is_sorted=True)
    block = localize(gathered, (x, y, z))

    rb, cb = ctx["row_bounds"], ctx["col_bounds"]
    row_range = (int(rb[x]), int(rb[x + 1]))
    col_range = (int(cb[y]), int(cb[y + 1]))
    row_owners = assign_owners_distributed(row, block.row_global, cfg.seed, row_range)
    col_owners = assign_owners_distributed(col, block.col_global, cfg.seed, col_range)
    a_graph = build_rank_graph(row, block.row_global, row_owners)
    b_graph = build_rank_graph(col, block.col_global, col_owners)

    w = cfg.width
    if cfg.mode == "sparse":
        a_store = DenseRowStore(np.union1d(block.row_global, row_owners.owned_by(y)), w)
        b_store = DenseRowStore(np.union1d(block.col_global, col_owners.owned_by(x)), w)
        a_pre = compile_plan(a_graph, a_store, cfg.strategy, y)
        b_pre = compile_plan(b_graph, b_store, cfg.strategy, x)
    else:
        a_store = DenseRowStore(_dense_layout(*row_range, row_owners), w, "allgather")
        b_store = DenseRowStore(_dense_layout(*col_range, col_owners), w, "allgather")
        a_pre = b_pre = None
    a_post = compile_plan(a_graph.transpose(), a_store, cfg.strategy, y)

    # Initial values: each owner holds its rows' K/Z column chunk.
    cols_z = slice(z * w, (z + 1) * w)
    own_a, own_b = row_owners.owned_by(y), col_owners.owned_by(x)
    a_store.words[a_store.slots(own_a)] = ctx["A0"][own_a, cols_z]
    b_store.words[b_store.slots(own_b)] = ctx["B0"][own_b, cols_z]

    st = RankState(
        rank=r, coords=(x, y, z), row=row, col=col, depth=depth, block=block,
        part_counts=counts, part_start=int(counts[:z].sum()),
        row_owners=row_owners, col_owners=col_owners,
        a_store=a_store, b_store=b_store, a_graph=a_graph, b_graph=b_graph,
        a_pre=a_pre, b_pre=b_pre, a_post=a_post,
        a_loc=a_store.slots(block.row_global), b_loc=b_store.slots(block.col_global),
    )
    st.setup_recv_words = comm.world.counters(r, "setup").recv_words
    st.setup_time = time.perf_counter() - t0
    return st


def setup(S: SparseMatrix, A0, B0, config: KernelConfig, timeout=DEFAULT_TIMEOUT, trace=False) -> EngineState:
    """Distribute S, assign owners, build graphs and compile plans on every rank."""
    S = S.sorted()
    grid = config.grid
    A0 = np.asarray(A0, dtype=np.float64)
    B0 = np.asarray(B0, dtype=np.float64)
    if A0.shape != (S.nrows, config.K) or B0.shape != (S.ncols, config.K):
        raise ValueError(
            f"A0 must be {S.nrows}x{config.K} and B0 {S.ncols}x{config.K}, got {A0.shape} and {B0.shape}"
        )
    world = World(grid.P, timeout=timeout, trace=trace)
    ctx = {
        "config": config,
        "shape": S.shape,
        "parts": dist3d(S, grid),
        "row_bounds": split_bounds(S.nrows, grid.X),
        "col_bounds": split_bounds(S.ncols, grid.Y),
        "A0": A0,
        "B0": B0,
    }
    ranks = _run(world, _setup_rank, ctx)
    return EngineState(config, S.shape, world, ranks)


# -- phases -----------------------------------------------------------------


def _update_rank(st: RankState, K):
    """Owned rows: scale by 0.5 and add the id-seeded unit vector's K/Z chunk."""
    w = st.a_store.width
    z = st.coords[2]
    for store, own in ((st.a_store, st.owned_a), (st.b_store, st.owned_b)):
        slots = store.slots(own)
        store.words[slots] *= 0.5
        k = (keyed_draw(UPDATE_SALT, own) % np.uint64(K)).astype(np.int64)
        mine = (k >= z * w) & (k < (z + 1) * w)
        store.words[slots[mine], k[mine] - z * w] += 1.0


def apply_update(D, times=1):
    """Global-space mirror of the per-iteration owner update (for oracles)."""
    D = np.array(D, dtype=np.float64, copy=True)
    k = (keyed_draw(UPDATE_SALT, np.arange(D.shape[0])) % np.uint64(D.shape[1])).astype(np.int64)
    for _ in range(times):
        D *= 0.5
        D[np.arange(D.shape[0]), k] += 1.0
    return D


def _dense_precomm(st: RankState, comm, store, owners, fiber_rank):
    own = owners.owned_by(fiber_rank)
    parts = comm.allgatherv(store.words[store.slots(own)].ravel())
    for p, payload in enumerate(parts):
        if p != fiber_rank:
            ids = owners.owned_by(p)
            store.words[store.slots(ids)] = payload.reshape(len(ids), store.width)


def _snap(world, r, phase):
    c = world.counters(r, phase)
    return (c.recv_words, c.recv_msgs, c.copy_words, c.send_words)


def _delta(world, r, phase, before):
    after = _snap(world, r, phase)
    return dict(zip(("recv_words", "recv_msgs", "copy_words", "send_words"),
                    (a - b for a, b in zip(after, before))))


def _precomm(st, cfg, kernel):
    x, y, _ = st.coords
    if cfg.mode == "sparse":
        if kernel == "sddmm":
            execute(st.a_pre, st.a_store, st.row, _TAG_A)
        execute(st.b_pre, st.b_store, st.col, _TAG_B)
    else:
        if kernel == "sddmm":
            _dense_precomm(st, st.row, st.a_store, st.row_owners, y)
        _dense_precomm(st, st.col, st.b_store, st.col_owners, x)


def _kernel_rank(comm, state: EngineState, kernel: str, iterations: int):
    cfg = state.config
    r = comm.rank
    st = state.ranks[r]
    world = comm.world
    per_iter = []
    result = None
    for it in range(iterations):
        if it > 0:
            comm.set_phase("update")
            _update_rank(st, cfg.K)
        rec = {}
        times = {}

        comm.set_phase("precomm")
        before = _snap(world, r, "precomm")
        t = time.perf_counter()
        _precomm(st, cfg, kernel)
        times["precomm"] = time.perf_counter() - t
        rec["precomm"] = _delta(world, r, "precomm", before)

        comm.set_phase("compute")
        t = time.perf_counter()
        if kernel == "sddmm":
            partial = local_sddmm(st.block, LocalDense(st.a_store.words, st.a_loc),
                                  LocalDense(st.b_store.words, st.b_loc))
        else:
            if st.a_out is None:
                st.a_out = st.a_store.like()
            st.a_out.words[...] = 0.0
            local_spmm(st.block, LocalDense(st.b_store.words, st.b_loc),
                       LocalDense(st.a_out.words, st.a_loc))
        times["compute"] = time.perf_counter() - t

        comm.set_phase("postcomm")
        before = _snap(world, r, "postcomm")
        t = time.perf_counter()
        if kernel == "sddmm":
            result = st.depth.reduce_scatter(partial, st.part_counts)
        else:
            execute(st.a_post, st.a_out, st.row, _TAG_POST)
        times["postcomm"] = time.perf_counter() - t
        rec["postcomm"] = _delta(world, r, "postcomm", before)
        rec["times"] = times
        per_iter.append(rec)

    if kernel == "sddmm":
        lo = st.part_start
        hi = lo + st.part_nnz
        out = (st.block.global_rows()[lo:hi], st.block.global_cols()[lo:hi], result)
        dense_words = st.a_store.nwords + st.b_store.nwords
    else:
        own = st.owned_a
        out = (own, st.a_out.words[st.a_out.slots(own)].copy())
        dense_words = st.a_out.nwords + st.b_store.nwords
    return out, per_iter, dense_words


def _collect(state, kernel, results):
    cfg = state.config
    ranks = []
    for st, (_, per_iter, dense_words) in zip(state.ranks, results):
        ranks.append(RankMetrics.from_iterations(
            st.rank, st.coords, per_iter,
            dense_store_words=int(dense_words),
            gathered_sparse_entries=int(st.block.nnz - st.part_nnz),
            setup_recv_words=int(st.setup_recv_words),
            setup_time=st.setup_time,
        ))
    return MetricsReport(
        kernel=kernel, mode=cfg.mode, strategy=cfg.strategy, grid=str(cfg.grid), K=cfg.K,
        iterations=len(results[0][1]), ranks=ranks,
    )


def _run_kernel(state: EngineState, kernel, iterations):
    iterations = state.config.iterations if iterations is None else iterations
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    results = _run(state.world, _kernel_rank, state, kernel, iterations)
    state.updates += iterations - 1
    state.runs += 1
    return results, _collect(state, kernel, results)


def run_sddmm(state: EngineState, iterations=None):
    """Distributed SDDMM; returns the assembled C and a metrics report."""
    results, report = _run_kernel(state, "sddmm", iterations)
    M, N = state.shape
    rows = np.concatenate([res[0][0] for res in results])
    cols = np.concatenate([res[0][1] for res in results])
    vals = np.concatenate([res[0][2] for res in results])
    return SparseMatrix.from_coo(M, N, rows, cols, vals), report


def run_spmm(state: EngineState, iterations=None):
    """Distributed SpMM; returns the assembled dense A (M x K) and a metrics report."""
    results, report = _run_kernel(state, "spmm", iterations)
    M, _ = state.shape
    w = state.config.width
    A = np.zeros((M, state.config.K))
    for st, res in zip(state.ranks, results):
        ids, rows = res[0]
        z = st.coords[2]
        A[ids, z * w:(z + 1) * w] = rows
    return A, report


def run_dense3d_baseline(state: EngineState, kernel: str, iterations=None):
    """Bulk all-gather PreComm with the sparse mode's owner layout."""
    if state.config.mode != "dense3d":
        raise EngineError("baseline runs need a state set up with mode='dense3d'")
    if kernel == "sddmm":
        return run_sddmm(state, iterations)
    if kernel == "spmm":
        return run_spmm(state, iterations)
    raise ValueError(f"unknown kernel {kernel!r}")


def iterate_update(state: EngineState):
    """Apply one owner-side value update; plans and graphs are reused untouched."""

    def work(comm):
        comm.set_phase("update")
        _update_rank(state.ranks[comm.rank], state.config.K)

    _run(state.world, work)
    state.updates += 1


def assemble_inputs(state: EngineState):
    """Gather current owned A and B values into global arrays (verification only)."""
    M, N = state.shape
    K, w = state.config.K, state.config.width
    A, B = np.zeros((M, K)), np.zeros((N, K))
    for st in state.ranks:
        z = st.coords[2]
        A[st.owned_a, z * w:(z + 1) * w] = st.a_store.words[st.a_store.slots(st.owned_a)]
        B[st.owned_b, z * w:(z + 1) * w] = st.b_store.words[st.b_store.slots(st.owned_b)]
    return A, B
