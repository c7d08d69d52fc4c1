"""Per-rank and aggregate run metrics, with JSON and flat CSV output."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass, field

SCHEMA = "sparse3d.metrics/1"
TIMED_PHASES = ("precomm", "compute", "postcomm")
VOLUME_FIELDS = ("recv_words", "recv_msgs", "copy_words", "send_words")


@dataclass
class RankMetrics:
    rank: int
    coords: tuple
    precomm: dict
    postcomm: dict
    times: dict
    dense_store_words: int
    gathered_sparse_entries: int
    setup_recv_words: int
    setup_time: float
    per_iteration: list = field(default_factory=list)

    @classmethod
    def from_iterations(cls, rank, coords, per_iter, **kw):
        times = {p: statistics.median(it["times"][p] for it in per_iter) for p in TIMED_PHASES}
        volumes = [{ph: it[ph] for ph in ("precomm", "postcomm")} for it in per_iter]
        return cls(rank, tuple(coords), dict(per_iter[0]["precomm"]), dict(per_iter[0]["postcomm"]),
                   times, per_iteration=volumes, **kw)

    @classmethod
    def from_dict(cls, d):
        """Inverse of the per-rank record in ``MetricsReport.to_dict``."""
        d = dict(d)
        d.pop("gathered_sparse_words", None)
        d["coords"] = tuple(d["coords"])
        return cls(**d)

    @property
    def gathered_sparse_words(self):
        # One entry travels as (row, col, value).
        return 3 * self.gathered_sparse_entries

    @property
    def recv_words(self):
        return self.precomm["recv_words"] + self.postcomm["recv_words"]

    def volumes_stable(self):
        return all(v == self.per_iteration[0] for v in self.per_iteration)


def aggregate_ranks(ranks, K):
    """Aggregate metrics; every figure is recomputable from the rank records."""
    n = len(ranks)
    pre = [r.precomm["recv_words"] for r in ranks]
    post = [r.postcomm["recv_words"] for r in ranks]
    total = [a + b for a, b in zip(pre, post)]
    phase_max = {p: max(r.times[p] for r in ranks) for p in TIMED_PHASES}
    span = sum(phase_max.values())
    return {
        "ranks": n,
        "precomm_recv_words": sum(pre),
        "postcomm_recv_words": sum(post),
        "recv_words": sum(total),
        "max_recv_words": max(total),
        "avg_recv_words": sum(total) / n,
        "max_recv_k_normalized": max(total) / K,
        "avg_recv_k_normalized": sum(total) / n / K,
        "max_precomm_recv_words": max(pre),
        "precomm_msgs": sum(r.precomm["recv_msgs"] for r in ranks),
        "postcomm_msgs": sum(r.postcomm["recv_msgs"] for r in ranks),
        "staging_copy_words": sum(r.precomm["copy_words"] + r.postcomm["copy_words"] for r in ranks),
        "dense_store_words": sum(r.dense_store_words for r in ranks),
        "max_dense_store_words": max(r.dense_store_words for r in ranks),
        "gathered_sparse_words": sum(r.gathered_sparse_words for r in ranks),
        "phase_time_max": phase_max,
        "phase_time_pct": {p: (100.0 * t / span if span else 0.0) for p, t in phase_max.items()},
    }


@dataclass
class MetricsReport:
    kernel: str
    mode: str
    strategy: str
    grid: str
    K: int
    iterations: int
    ranks: list

    @property
    def aggregate(self):
        return aggregate_ranks(self.ranks, self.K)

    @property
    def max_recv_volume(self):
        return self.aggregate["max_recv_words"]

    def precomm_words(self):
        return [r.precomm["recv_words"] for r in self.ranks]

    def postcomm_words(self):
        return [r.postcomm["recv_words"] for r in self.ranks]

    def copy_words(self, phase="precomm"):
        return [getattr(r, phase)["copy_words"] for r in self.ranks]

    def dense_words(self):
        return [r.dense_store_words for r in self.ranks]

    def config(self):
        return {"kernel": self.kernel, "mode": self.mode, "strategy": self.strategy,
                "grid": self.grid, "K": self.K, "iterations": self.iterations}

    def to_dict(self):
        ranks = []
        for r in self.ranks:
            d = asdict(r)
            d["coords"] = list(r.coords)
            d["gathered_sparse_words"] = r.gathered_sparse_words
            ranks.append(d)
        return {"config": self.config(), "ranks": ranks, "aggregate": self.aggregate}

    def to_json(self):
        return json.dumps({"schema": SCHEMA, **self.to_dict()}, indent=1)

    def csv_rows(self, run_id=0):
        """Flat rows: (run, rank, phase, metric, value)."""
        cfg = self.config()
        for r in self.ranks:
            for phase in ("precomm", "postcomm"):
                for metric, value in getattr(r, phase).items():
                    yield {**cfg, "run": run_id, "rank": r.rank, "phase": phase, "metric": metric, "value": value}
                yield {**cfg, "run": run_id, "rank": r.rank, "phase": phase, "metric": "time_s",
                       "value": r.times[phase]}
            yield {**cfg, "run": run_id, "rank": r.rank, "phase": "compute", "metric": "time_s",
                   "value": r.times["compute"]}
            for metric in ("dense_store_words", "gathered_sparse_entries", "setup_recv_words"):
                yield {**cfg, "run": run_id, "rank": r.rank, "phase": "setup", "metric": metric,
                       "value": getattr(r, metric)}
            yield {**cfg, "run": run_id, "rank": r.rank, "phase": "setup", "metric": "time_s",
                   "value": r.setup_time}


CSV_FIELDS = ("run", "kernel", "mode", "strategy", "grid", "K", "iterations",
              "rank", "phase", "metric", "value")


def write_csv(rows, fh=None):
    out = fh or io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CSV_FIELDS, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return out.getvalue() if fh is None else None
