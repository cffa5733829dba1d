"""Kernel microbenchmarks and runtime-scaling fits.

Methodology: inputs are generated outside the timed region, each kernel
gets warmup runs before ``reps`` timed repetitions, and the BLAS thread
pool is pinned to one thread when threadpoolctl is available.  The
headline statistic is the median; a least-squares log-log slope over the
swept sequence lengths summarizes the scaling.
"""

import time
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import backend as _backend

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional speedup control
    threadpool_limits = None

KERNELS = ("softmax", "cosh_linear")
DEFAULT_N_LIST = (256, 1024, 4096, 16384)
DEFAULT_D = 64
DEFAULT_REPS = 5
DEFAULT_WARMUP = 2

CSV_HEADER = "kernel,N,d,H,a,reps,median_ns,mean_ns,stddev_ns,status"


@dataclass
class BenchRecord:
    """One timed configuration; times in nanoseconds."""

    kernel: str
    n: int
    d: int
    h: int
    a: float
    reps: int
    median_ns: float = 0.0
    mean_ns: float = 0.0
    stddev_ns: float = 0.0
    status: str = "ok"

    def csv_row(self):
        return (
            f"{self.kernel},{self.n},{self.d},{self.h},{self.a},{self.reps},"
            f"{self.median_ns:.0f},{self.mean_ns:.0f},{self.stddev_ns:.0f},{self.status}"
        )


def _single_thread():
    if threadpool_limits is not None:
        return threadpool_limits(limits=1)
    return nullcontext()


def _kernel_fn(kernel, mod, q, k, v, a):
    n = q.shape[0]
    if kernel == "softmax":
        return lambda: mod.softmax_attention(q, k, v)
    if kernel == "cosh_linear":
        return lambda: mod.cosh_attention_linear(q, k, v, a, n, 1e-9)
    raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def time_kernel(kernel, n, d, a=1.1, reps=DEFAULT_REPS, warmup=DEFAULT_WARMUP,
                seed=0, backend=None):
    """Time one kernel at one size; returns a BenchRecord."""
    if reps < 5:
        raise ValueError("reps must be >= 5 for a stable median")
    mod = _backend.get_backend(backend)
    record = BenchRecord(kernel=kernel, n=n, d=d, h=1, a=a, reps=reps)
    rng = np.random.default_rng(seed)
    try:
        q, k, v = rng.normal(size=(3, n, d))
        fn = _kernel_fn(kernel, mod, q, k, v, a)
        with _single_thread():
            for _ in range(warmup):
                fn()
            samples = np.empty(reps)
            for i in range(reps):
                start = time.perf_counter_ns()
                fn()
                samples[i] = time.perf_counter_ns() - start
    except MemoryError:
        record.status = "oom"
        return record
    record.median_ns = float(np.median(samples))
    record.mean_ns = float(samples.mean())
    record.stddev_ns = float(samples.std())
    return record


def run_sweep(n_list=DEFAULT_N_LIST, d=DEFAULT_D, a=1.1, kernels=KERNELS,
              reps=DEFAULT_REPS, warmup=DEFAULT_WARMUP, seed=0, backend=None):
    """Time every kernel over the size sweep; returns records grouped per kernel."""
    if list(n_list) != sorted(n_list):
        raise ValueError("n_list must be ascending")
    records = []
    for kernel in kernels:
        for n in n_list:
            records.append(
                time_kernel(kernel, n, d, a=a, reps=reps, warmup=warmup,
                            seed=seed, backend=backend)
            )
    return records


def loglog_slope(ns, times_ns):
    """Least-squares slope of log(time) against log(N)."""
    ns = np.asarray(ns, dtype=np.float64)
    times = np.asarray(times_ns, dtype=np.float64)
    if len(ns) < 2:
        raise ValueError("need at least two sizes to fit a slope")
    x = np.log(ns)
    y = np.log(times)
    x = x - x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def slopes_by_kernel(records):
    out = {}
    for kernel in {r.kernel for r in records}:
        rows = [r for r in records if r.kernel == kernel and r.status == "ok"]
        rows.sort(key=lambda r: r.n)
        if len(rows) >= 2:
            out[kernel] = loglog_slope([r.n for r in rows], [r.median_ns for r in rows])
    return out
