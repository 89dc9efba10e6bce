"""Wall-clock micro-benchmarks of the recurrent and chunkwise kernels.

Every grid cell draws one seeded input set, checks that the two kernels agree
on it, then times each kernel: ``warmup`` untimed runs followed by ``reps``
timed runs, reported as the median. Input generation and the equivalence
check are never inside the timed region.
"""
from __future__ import annotations

import csv
import io
import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .chunkwise import check_chunk_size, mdn_chunkwise_forward
from .recurrent import mdn_recurrent_forward
from .sampling import random_inputs
from .tensor import as_dtype, max_rel_err

CSV_HEADER = ("kernel", "B", "T", "H", "dk", "dv", "C", "median_ms", "tokens_per_s")
SPOT_TOL = {"float64": 1e-8, "float32": 3e-3}


class EquivalenceError(AssertionError):
    """The two kernels disagreed on a benchmark cell."""


@dataclass
class BenchRow:
    kernel: str
    B: int
    T: int
    H: int
    dk: int
    dv: int
    C: int            # 0 for the recurrent kernel
    times_ms: list
    spot_err: float

    @property
    def median_ms(self) -> float:
        return statistics.median(self.times_ms)

    @property
    def tokens_per_s(self) -> float:
        return self.B * self.T / (self.median_ms / 1e3)


@dataclass
class BenchReport:
    config: dict
    rows: list = field(default_factory=list)

    def median(self, kernel: str, T: int, C: int = 0) -> float:
        for r in self.rows:
            if r.kernel == kernel and r.T == T and r.C == C:
                return r.median_ms
        raise KeyError((kernel, T, C))

    def speedups(self) -> dict:
        """``{(T, C): recurrent_ms / chunkwise_ms}``."""
        out = {}
        for r in self.rows:
            if r.kernel == "chunkwise":
                out[(r.T, r.C)] = self.median("recurrent", r.T) / r.median_ms
        return out

    def scaling_ratios(self, kernel: str = "chunkwise", C: int | None = None) -> dict:
        """``{T: time(4T) / time(T)}`` for every T whose 4x neighbour is on the grid."""
        C = 0 if kernel == "recurrent" else (C if C is not None else self.config["C"][-1])
        Ts = sorted({r.T for r in self.rows if r.kernel == kernel and r.C == C})
        return {T: self.median(kernel, 4 * T, C) / self.median(kernel, T, C)
                for T in Ts if 4 * T in Ts}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.kernel, r.B, r.T, r.H, r.dk, r.dv, r.C,
                        f"{r.median_ms:.4f}", f"{r.tokens_per_s:.1f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "machine": machine_info(self.config["workers"]),
            "config": self.config,
            "cells": [dict(asdict(r), median_ms=r.median_ms, tokens_per_s=r.tokens_per_s)
                      for r in self.rows],
            "speedup": {f"T={T},C={C}": s for (T, C), s in self.speedups().items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def machine_info(workers: int) -> dict:
    try:
        cpus = len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        cpus = os.cpu_count()
    return {"python": platform.python_version(), "numpy": np.__version__,
            "machine": platform.machine(), "system": platform.system(),
            "cpus": cpus, "workers": workers}


def time_call(fn, reps: int, warmup: int) -> list:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return times


def run_bench(Ts=(256, 1024, 4096), Cs=(64,), *, B: int = 1, H: int = 1, dk: int = 64,
              dv: int | None = None, dtype="f64", reps: int = 5, warmup: int = 3,
              workers: int = 1, seed: int = 0, kernels=("recurrent", "chunkwise"),
              spot_tol: float | None = None) -> BenchReport:
    if reps < 5:
        raise ValueError("reps must be >= 5 (median-of-k with k >= 5)")
    if warmup < 3:
        raise ValueError("warmup must be >= 3")
    if not Ts:
        raise ValueError("empty T grid")
    for k in kernels:
        if k not in ("recurrent", "chunkwise"):
            raise ValueError(f"unknown kernel {k!r}")
    Cs = tuple(check_chunk_size(c) for c in Cs)
    dv = dk if dv is None else dv
    dt = as_dtype(dtype)
    tol = SPOT_TOL[dt.name] if spot_tol is None else spot_tol
    config = dict(Ts=list(Ts), C=list(Cs), B=B, H=H, dk=dk, dv=dv, dtype=dt.name,
                  reps=reps, warmup=warmup, workers=workers, seed=seed)
    report = BenchReport(config)
    for T in Ts:
        rng = np.random.default_rng([seed, T])
        x = random_inputs(rng, B, T, H, dk, dv, dtype=dt)
        o_ref, _ = mdn_recurrent_forward(x, workers=workers)
        errs = {}
        for C in Cs:
            o, _ = mdn_chunkwise_forward(x, C, workers=workers)
            errs[C] = max_rel_err(o, o_ref)
            if not errs[C] <= tol:
                raise EquivalenceError(f"T={T} C={C}: chunkwise vs recurrent rel err {errs[C]:.3g} > {tol:g}")
        worst = max(errs.values())
        if "recurrent" in kernels:
            t = time_call(lambda: mdn_recurrent_forward(x, workers=workers), reps, warmup)
            report.rows.append(BenchRow("recurrent", B, T, H, dk, dv, 0, t, worst))
        if "chunkwise" in kernels:
            for C in Cs:
                t = time_call(lambda: mdn_chunkwise_forward(x, C, workers=workers), reps, warmup)
                report.rows.append(BenchRow("chunkwise", B, T, H, dk, dv, C, t, errs[C]))
    return report
