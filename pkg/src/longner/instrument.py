"""Allocation and attention-work accounting.

The meter tracks live bytes held by tensor buffers (views are free) and the
number of attention score pairs evaluated, keyed by a tag. Stages give
scoped measurements for benchmarks: peak bytes relative to the stage start,
pair counts, and wall time.
"""

from __future__ import annotations

import threading
import time
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class StageReport:
    name: str
    peak_bytes: int = 0
    score_pairs: int = 0
    max_single_alloc: int = 0
    wall_seconds: float = 0.0
    pairs_by_tag: dict = field(default_factory=dict)


class Meter:
    def __init__(self):
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.pairs: dict[str, int] = {}
        self._stages: list[dict] = []

    def on_alloc(self, obj, nbytes: int) -> None:
        if nbytes <= 0:
            return
        with self._lock:
            self.live_bytes += nbytes
            for st in self._stages:
                delta = self.live_bytes - st["base"]
                if delta > st["peak"]:
                    st["peak"] = delta
                if nbytes > st["max_single"]:
                    st["max_single"] = nbytes
        weakref.finalize(obj, self._on_free, nbytes)

    def _on_free(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def add_pairs(self, tag: str, n: int) -> None:
        n = int(n)
        with self._lock:
            self.pairs[tag] = self.pairs.get(tag, 0) + n
            for st in self._stages:
                st["pairs"] += n
                st["by_tag"][tag] = st["by_tag"].get(tag, 0) + n

    def total_pairs(self, prefix: str = "") -> int:
        with self._lock:
            return sum(v for k, v in self.pairs.items() if k.startswith(prefix))

    def reset_pairs(self) -> None:
        with self._lock:
            self.pairs.clear()

    @contextmanager
    def stage(self, name: str):
        """Measure peak allocation growth, pair counts and wall time of a block."""
        rec = {"base": self.live_bytes, "peak": 0, "pairs": 0, "max_single": 0, "by_tag": {}}
        report = StageReport(name)
        with self._lock:
            self._stages.append(rec)
        t0 = time.perf_counter()
        try:
            yield report
        finally:
            report.wall_seconds = time.perf_counter() - t0
            with self._lock:
                self._stages.remove(rec)
            report.peak_bytes = rec["peak"]
            report.score_pairs = rec["pairs"]
            report.max_single_alloc = rec["max_single"]
            report.pairs_by_tag = dict(rec["by_tag"])


METER = Meter()
