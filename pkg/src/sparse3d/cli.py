"""Experiment runner: sweep grid/K/strategy/mode configurations and write reports.

A sweep runs every (grid, K, strategy, mode) combination on one matrix,
verifies results against the serial references, and emits per-rank
records plus one aggregate per (grid, K, strategy, kernel). ``--explain``
prints the analysis of each configuration without running any kernel.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import agnostic_memory, agnostic_volume, predict, total_sparse_volume
from .engine import (
    MODES,
    KernelConfig,
    apply_update,
    assemble_inputs,
    run_dense3d_baseline,
    run_sddmm,
    run_spmm,
    setup,
)
from .grid import ProcGrid, make_grid
from .matrix import SparseMatrix, gen_rmat, gen_uniform, load_matrix_market, sddmm_ref, spmm_ref
from .metrics import CSV_FIELDS, write_csv
from .plan import STRATEGIES, dump_plans

log = logging.getLogger("sparse3d")

SWEEP_SCHEMA = "sparse3d.sweep/1"
EXPLAIN_SCHEMA = "sparse3d.explain/1"
KERNELS = ("sddmm", "spmm")
EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


class SpecError(ValueError):
    """A bad run specification; ``field`` names the offending option."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunSpec:
    source: str
    grids: list
    ks: list
    strategies: list = field(default_factory=lambda: ["nb"])
    modes: list = field(default_factory=lambda: list(MODES))
    kernels: list = field(default_factory=lambda: list(KERNELS))
    iterations: int = 3
    seed: int = 0
    out: str | None = None
    fmt: str = "json"
    verify: bool = True

    def __post_init__(self):
        for name in ("grids", "ks", "strategies", "modes", "kernels"):
            if not getattr(self, name):
                raise SpecError(name, "empty sweep list")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise SpecError("strategy", f"unknown {bad}; choose from {STRATEGIES}")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise SpecError("mode", f"unknown {bad}; choose from {MODES}")
        bad = [k for k in self.kernels if k not in KERNELS]
        if bad:
            raise SpecError("kernel", f"unknown {bad}; choose from {KERNELS}")
        if any(k < 1 for k in self.ks):
            raise SpecError("k", "K must be positive")
        if self.iterations < 1:
            raise SpecError("iters", "need at least one iteration")
        if self.fmt not in ("json", "csv"):
            raise SpecError("format", f"unknown format {self.fmt!r}")

    @property
    def zs(self):
        return sorted({g.Z for g in self.grids})


# -- matrix sources -----------------------------------------------------------


def load_source(source: str, seed: int = 0) -> SparseMatrix:
    """A Matrix Market path, ``rmat:SCALE:NNZ`` or ``uniform:M:N:NNZ``."""
    head, _, rest = source.partition(":")
    if head in ("rmat", "uniform"):
        try:
            args = [int(t) for t in rest.split(":")]
        except ValueError:
            raise SpecError("gen", f"non-integer field in {source!r}") from None
        if head == "rmat" and len(args) == 2:
            return gen_rmat(args[0], args[1], seed)
        if head == "uniform" and len(args) == 3:
            return gen_uniform(*args, seed, low=0.5, high=1.5)
        raise SpecError("gen", f"expected rmat:SCALE:NNZ or uniform:M:N:NNZ, got {source!r}")
    path = Path(source)
    if not path.is_file():
        raise SpecError("matrix", f"no such file {source!r}")
    return load_matrix_market(path)


def make_inputs(S: SparseMatrix, K: int, seed: int):
    """Positive dense inputs so per-element relative error stays meaningful."""
    rng = np.random.default_rng([seed, K])
    return rng.uniform(0.5, 1.5, (S.nrows, K)), rng.uniform(0.5, 1.5, (S.ncols, K))


def max_rel_err(got, ref):
    got, ref = np.asarray(got, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if got.size == 0:
        return 0.0
    err = np.abs(got - ref)
    scale = np.abs(ref)
    rel = np.divide(err, scale, out=err.copy(), where=scale > 0)
    return float(rel.max())


# -- sweep --------------------------------------------------------------------


@dataclass
class SweepResult:
    matrix: dict
    spec: dict
    runs: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def partial(self):
        return bool(self.skipped)

    def aggregates(self):
        """One record per (grid, K, strategy, kernel) combining both modes."""
        groups = {}
        for meta, rep in self.runs:
            key = (rep.grid, rep.K, rep.strategy, rep.kernel)
            groups.setdefault(key, {})[rep.mode] = (meta, rep)
        out = []
        for (grid, K, strategy, kernel), by_mode in groups.items():
            g = ProcGrid.parse(grid)
            rec = {"grid": grid, "P": g.P, "Z": g.Z, "K": K, "strategy": strategy, "kernel": kernel}
            for mode, (_, rep) in by_mode.items():
                a = rep.aggregate
                rec[mode] = {k: a[k] for k in (
                    "max_recv_words", "avg_recv_words", "max_recv_k_normalized", "avg_recv_k_normalized",
                    "max_precomm_recv_words", "dense_store_words", "max_dense_store_words", "staging_copy_words", "phase_time_pct")}
            rec["improvement_ratio"] = improvement_ratio(rec.get("dense3d"), rec.get("sparse"))
            rec["precomm_improvement_ratio"] = improvement_ratio(rec.get("dense3d"), rec.get("sparse"),
                                                                 "max_precomm_recv_words")
            out.append(rec)
        return out

    def table(self):
        """K-normalized max receive volumes per (grid, K), laid out like a results table."""
        rows = []
        for a in self.aggregates():
            rows.append({
                "grid": a["grid"], "P": a["P"], "Z": a["Z"], "K": a["K"],
                "kernel": a["kernel"], "strategy": a["strategy"],
                "sparse_max_recv_knorm": a.get("sparse", {}).get("max_recv_k_normalized"),
                "dense3d_max_recv_knorm": a.get("dense3d", {}).get("max_recv_k_normalized"),
                "improvement_ratio": a["improvement_ratio"],
                "precomm_improvement_ratio": a["precomm_improvement_ratio"],
            })
        return rows

    def to_dict(self):
        runs = []
        for meta, rep in self.runs:
            runs.append({**rep.to_dict(), **meta})
        return {
            "schema": SWEEP_SCHEMA,
            "matrix": self.matrix,
            "spec": self.spec,
            "runs": runs,
            "aggregates": self.aggregates(),
            "table": self.table(),
            "skipped": self.skipped,
        }

    def csv_rows(self):
        for i, (_, rep) in enumerate(self.runs):
            yield from rep.csv_rows(i)


def improvement_ratio(baseline, sparse, key="max_recv_words"):
    """Baseline over sparse max receive volume; 1.0 when both are zero."""
    if baseline is None or sparse is None:
        return None
    b, s = baseline[key], sparse[key]
    if s == 0:
        return 1.0 if b == 0 else None
    return b / s


def _run_mode(S, A0, B0, config: KernelConfig, kernels, verify):
    state = setup(S, A0, B0, config)
    out = []
    for kernel in kernels:
        if verify:
            A, B = (apply_update(D, config.iterations - 1) for D in assemble_inputs(state))
        if config.mode == "dense3d":
            result, rep = run_dense3d_baseline(state, kernel)
        elif kernel == "sddmm":
            result, rep = run_sddmm(state)
        else:
            result, rep = run_spmm(state)
        meta = {}
        if verify:
            if kernel == "sddmm":
                meta["max_rel_err"] = max_rel_err(result.sorted().vals, sddmm_ref(S, A, B).vals)
            else:
                meta["max_rel_err"] = max_rel_err(result, spmm_ref(S, B))
        out.append((meta, rep))
    return out


def run_sweep(spec: RunSpec, S: SparseMatrix | None = None) -> SweepResult:
    """Run every feasible configuration; infeasible ones are recorded as skipped."""
    if S is None:
        S = load_source(spec.source, spec.seed)
    S = S.sorted()
    result = SweepResult(
        matrix={"source": spec.source, "nrows": S.nrows, "ncols": S.ncols, "nnz": S.nnz},
        spec={"grids": [str(g) for g in spec.grids], "ks": list(spec.ks), "strategies": list(spec.strategies),
              "modes": list(spec.modes), "kernels": list(spec.kernels), "iterations": spec.iterations,
              "seed": spec.seed, "time_statistic": "median over iterations"},
    )
    for grid in spec.grids:
        for K in spec.ks:
            if K % grid.Z:
                skip = {"grid": str(grid), "K": K, "strategy": None, "mode": None,
                        "reason": "k_not_multiple_of_z", "detail": f"Z={grid.Z} does not divide K={K}"}
                log.warning("skipping %s K=%d: %s", grid, K, skip["detail"])
                result.skipped.append(skip)
                continue
            A0, B0 = make_inputs(S, K, spec.seed)
            for strategy in spec.strategies:
                for mode in spec.modes:
                    config = KernelConfig(grid, K, strategy, mode, spec.iterations, spec.seed)
                    try:
                        result.runs.extend(_run_mode(S, A0, B0, config, spec.kernels, spec.verify))
                    except MemoryError as exc:
                        log.warning("skipping %s K=%d %s %s: out of memory", grid, K, strategy, mode)
                        result.skipped.append({"grid": str(grid), "K": K, "strategy": strategy, "mode": mode,
                                               "reason": "out_of_memory", "detail": str(exc)})
    return result


AGG_CSV_FIELDS = ("grid", "P", "Z", "K", "kernel", "strategy", "mode", "max_recv_words", "avg_recv_words",
                  "max_recv_k_normalized", "avg_recv_k_normalized", "dense_store_words",
                  "max_dense_store_words", "staging_copy_words", "max_precomm_recv_words", "pct_precomm",
                  "pct_compute", "pct_postcomm", "improvement_ratio", "precomm_improvement_ratio")


def aggregate_csv_rows(aggregates):
    for a in aggregates:
        for mode in MODES:
            if mode not in a:
                continue
            m = a[mode]
            row = {k: a[k] for k in ("grid", "P", "Z", "K", "kernel", "strategy", "improvement_ratio",
                                     "precomm_improvement_ratio")}
            row.update({k: v for k, v in m.items() if k != "phase_time_pct"})
            row.update({f"pct_{p}": v for p, v in m["phase_time_pct"].items()})
            row["mode"] = mode
            yield row


def write_report(result: SweepResult, out, fmt="json"):
    """JSON: one document. CSV: per-rank rows at ``out`` plus ``<stem>.aggregates.csv``."""
    out = Path(out)
    if fmt == "json":
        out.write_text(json.dumps(result.to_dict(), indent=1))
        return [out]
    with out.open("w", newline="") as fh:
        write_csv(result.csv_rows(), fh)
    agg = out.with_name(out.stem + ".aggregates.csv")
    with agg.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AGG_CSV_FIELDS)
        w.writeheader()
        w.writerows(aggregate_csv_rows(result.aggregates()))
    return [out, agg]


def format_table(rows):
    head = f"{'grid':>8} {'K':>4} {'kernel':>6} {'strat':>5} {'sparse/K':>10} {'dense3d/K':>10} {'ratio':>7} {'pre ratio':>9}"
    lines = [head]

    def num(v, spec):
        return format(v, spec) if v is not None else "-"

    for r in rows:
        lines.append(f"{r['grid']:>8} {r['K']:>4} {r['kernel']:>6} {r['strategy']:>5} "
                     f"{num(r['sparse_max_recv_knorm'], '10.1f')} {num(r['dense3d_max_recv_knorm'], '10.1f')} "
                     f"{num(r['improvement_ratio'], '7.3f')} {num(r['precomm_improvement_ratio'], '9.3f')}")
    return "\n".join(lines)


# -- analysis only ------------------------------------------------------------


def _maybe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ValueError:
        return None


def explain_config(S: SparseMatrix, grid: ProcGrid, K: int, seed: int = 0) -> dict:
    """Predicted volumes and footprints of one configuration; runs no kernel."""
    pred = predict(S.sorted(), grid, K, seed)
    lam_r, lam_c = pred.lam.row_lambda(), pred.lam.col_lambda()
    ranks = []
    for r in range(grid.P):
        ranks.append({"rank": r, "coords": list(grid.coords(r)),
                      "I": len(pred.need.I[r]), "J": len(pred.need.J[r]),
                      "owned_rows": int(pred.need.owned_rows[r]), "owned_cols": int(pred.need.owned_cols[r]),
                      "part_nnz": int(pred.part_nnz[r])})
    Asize, Bsize = S.nrows * K, S.ncols * K
    agnostic = {}
    for model in ("1D", "2D", "3D"):
        agnostic[model] = {"volume": _maybe(agnostic_volume, model, Asize, Bsize, grid.P, grid.Z),
                           "memory": _maybe(agnostic_memory, model, Asize, Bsize, grid.P, grid.Z)}

    def ints(a):
        return [int(v) for v in a]

    return {
        "schema": EXPLAIN_SCHEMA,
        "grid": str(grid), "K": K, "seed": seed,
        "matrix": {"nrows": S.nrows, "ncols": S.ncols, "nnz": S.nnz},
        "row_lambda_hist": ints(np.bincount(lam_r, minlength=grid.Y + 1)),
        "col_lambda_hist": ints(np.bincount(lam_c, minlength=grid.X + 1)),
        "ranks": ranks,
        "predicted": {
            "sddmm_precomm": ints(pred.sddmm_precomm()),
            "sddmm_postcomm": ints(pred.sddmm_postcomm()),
            "spmm_precomm": ints(pred.spmm_precomm()),
            "spmm_postcomm": ints(pred.spmm_postcomm()),
            "dense3d_precomm": ints(pred.dense3d_precomm()),
            "dense3d_spmm_precomm": ints(pred.dense3d_precomm("cols")),
            "sparse_memory": ints(pred.sparse_memory()),
            "dense3d_memory": ints(pred.dense3d_memory()),
            "slice_total_precomm": total_sparse_volume(pred.lam, K, grid.Z),
        },
        "agnostic": agnostic,
    }


def format_explain(info: dict) -> str:
    p = info["predicted"]
    lines = [
        f"grid {info['grid']}  K={info['K']}  seed={info['seed']}  "
        f"matrix {info['matrix']['nrows']}x{info['matrix']['ncols']} nnz={info['matrix']['nnz']}",
        "row lambda histogram (lambda: ids): "
        + " ".join(f"{v}:{c}" for v, c in enumerate(info["row_lambda_hist"])),
        "col lambda histogram (lambda: ids): "
        + " ".join(f"{v}:{c}" for v, c in enumerate(info["col_lambda_hist"])),
        f"{'rank':>5} {'coords':>9} {'|I|':>6} {'|J|':>6} {'sddmm pre':>10} {'sddmm post':>10} "
        f"{'spmm pre':>9} {'spmm post':>9} {'mem':>8} {'d3d pre':>8} {'d3d mem':>8}",
    ]
    for i, r in enumerate(info["ranks"]):
        c = ",".join(map(str, r["coords"]))
        lines.append(
            f"{r['rank']:>5} {c:>9} {r['I']:>6} {r['J']:>6} {p['sddmm_precomm'][i]:>10} {p['sddmm_postcomm'][i]:>10} "
            f"{p['spmm_precomm'][i]:>9} {p['spmm_postcomm'][i]:>9} {p['sparse_memory'][i]:>8} "
            f"{p['dense3d_precomm'][i]:>8} {p['dense3d_memory'][i]:>8}")
    lines.append(f"per-slice sparse PreComm total: {p['slice_total_precomm']} words")
    for model, v in info["agnostic"].items():
        vol = "n/a" if v["volume"] is None else v["volume"]
        mem = "n/a" if v["memory"] is None else v["memory"]
        lines.append(f"agnostic {model}: volume {vol} words/rank, memory {mem} words/rank")
    return "\n".join(lines)


# -- command line -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise SpecError("usage", message)


def build_parser():
    p = _Parser(prog="sparse3d", description="Sweep 3D SDDMM/SpMM configurations and report communication.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--matrix", help="Matrix Market file")
    src.add_argument("--gen", help="rmat:SCALE:NNZ or uniform:M:N:NNZ")
    p.add_argument("--grid", action="append", default=[], help="XxYxZ, repeatable")
    p.add_argument("--procs", type=int, help="build grids from P and each --z")
    p.add_argument("--z", action="append", type=int, default=[], help="depth for --procs, repeatable")
    p.add_argument("--k", action="append", type=int, default=[], help="dense width, repeatable")
    p.add_argument("--strategy", action="append", default=[], choices=STRATEGIES)
    p.add_argument("--mode", default="both", choices=("sparse", "dense3d", "both"))
    p.add_argument("--kernel", default="both", choices=("sddmm", "spmm", "both"))
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report path (default: print table only)")
    p.add_argument("--format", default="json", choices=("json", "csv"))
    p.add_argument("--explain", action="store_true", help="analysis only, no kernel runs")
    p.add_argument("--dump-plans", metavar="PATH", help="write the first sparse config's compiled plans as JSON")
    p.add_argument("--no-verify", action="store_true", help="skip the serial reference check")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def spec_from_args(args) -> RunSpec:
    source = args.matrix or args.gen
    if not source:
        raise SpecError("matrix", "give --matrix PATH or --gen SPEC")
    grids = []
    for text in args.grid:
        try:
            grids.append(ProcGrid.parse(text))
        except ValueError as exc:
            raise SpecError("grid", str(exc)) from None
    if args.procs is not None:
        if not args.z:
            raise SpecError("z", "--procs needs at least one --z")
        for z in args.z:
            try:
                grids.append(make_grid(args.procs, z))
            except ValueError as exc:
                raise SpecError("z", str(exc)) from None
    return RunSpec(
        source=source,
        grids=grids,
        ks=args.k,
        strategies=args.strategy or ["nb"],
        modes=list(MODES) if args.mode == "both" else [args.mode],
        kernels=list(KERNELS) if args.kernel == "both" else [args.kernel],
        iterations=args.iters,
        seed=args.seed,
        out=args.out,
        fmt=args.format,
        verify=not args.no_verify,
    )


def _explain(spec: RunSpec, S, out=None):
    out = out or sys.stdout
    reports = []
    for grid in spec.grids:
        for K in spec.ks:
            if K % grid.Z:
                print(f"skip {grid} K={K}: Z does not divide K", file=out)
                continue
            info = explain_config(S, grid, K, spec.seed)
            reports.append(info)
            print(format_explain(info), file=out)
            print(file=out)
    if spec.out:
        Path(spec.out).write_text(json.dumps({"schema": EXPLAIN_SCHEMA, "configs": reports}, indent=1))
    return reports


def dump_config_plans(spec: RunSpec, S, path):
    """Set up the first runnable (grid, K, strategy) in sparse mode and dump every rank's plans."""
    for grid in spec.grids:
        for K in spec.ks:
            if K % grid.Z == 0:
                A0, B0 = make_inputs(S, K, spec.seed)
                state = setup(S, A0, B0, KernelConfig(grid, K, spec.strategies[0], seed=spec.seed))
                plans = [p for st in state.ranks for p in (st.a_pre, st.b_pre, st.a_post) if p is not None]
                return dump_plans(plans, path)
    raise SpecError("dump-plans", "no grid/K pair with Z dividing K")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        spec = spec_from_args(args)
        S = load_source(spec.source, spec.seed)
        if args.dump_plans:
            dump_config_plans(spec, S, args.dump_plans)
        if args.explain:
            _explain(spec, S)
            return EXIT_OK
        result = run_sweep(spec, S)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except Exception as exc:  # noqa: BLE001
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(format_table(result.table()))
    if spec.out:
        for path in write_report(result, spec.out, spec.fmt):
            log.info("wrote %s", path)
    for s in result.skipped:
        print(f"skipped {s['grid']} K={s['K']}: {s['reason']}", file=sys.stderr)
    return EXIT_PARTIAL if result.partial else EXIT_OK


__all__ = ["RunSpec", "SpecError", "SweepResult", "explain_config", "load_source", "main", "run_sweep",
           "CSV_FIELDS"]

if __name__ == "__main__":
    sys.exit(main())
