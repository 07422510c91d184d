"""Wall-clock scaling of latent fusion against QKV cross attention."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .autodiff import Tensor
from .latent import EcmiParams, QkvParams, ecmi, qkv_cross_attention

BENCH_CSV_HEADER = ("N", "n", "c", "reps", "ecmi_median_s", "qkv_median_s", "speedup")


@dataclass(frozen=True)
class BenchRow:
    N: int
    n: int
    c: int
    reps: int
    ecmi_median_s: float
    qkv_median_s: float
    speedup: float


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    ecmi_slope: SlopeFit | None = None
    qkv_slope: SlopeFit | None = None
    speedup_at_max_n: float | None = None
    seed: int = 0
    environment: dict[str, Any] = field(default_factory=dict)

    csv_header = BENCH_CSV_HEADER

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "environment": self.environment,
            "rows": [asdict(r) for r in self.rows],
            "ecmi_slope": None if self.ecmi_slope is None else asdict(self.ecmi_slope),
            "qkv_slope": None if self.qkv_slope is None else asdict(self.qkv_slope),
            "speedup_at_max_n": self.speedup_at_max_n,
        }

    def csv_rows(self) -> list[tuple]:
        return [tuple(getattr(r, k) for k in BENCH_CSV_HEADER) for r in self.rows]

    def speedup_at(self, n_rows: int) -> float:
        for r in self.rows:
            if r.N == n_rows:
                return r.speedup
        raise KeyError(n_rows)


def fit_loglog(sizes: Sequence[int], times: Sequence[float], confidence: float = 0.95) -> SlopeFit:
    """Least-squares slope of log(time) against log(size) with a t-interval."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    res = stats.linregress(x, y)
    dof = len(x) - 2
    half = stats.t.ppf(0.5 + confidence / 2, dof) * res.stderr if dof > 0 else float("nan")
    return SlopeFit(float(res.slope), float(res.intercept), float(res.slope - half), float(res.slope + half))


def bench_inputs(N: int, c: int, seed: int) -> tuple[Tensor, Tensor]:
    rng = np.random.default_rng([seed, N])
    return (
        Tensor(rng.standard_normal((N, c), dtype=np.float32)),
        Tensor(rng.standard_normal((N, c), dtype=np.float32)),
    )


def environment_info() -> dict[str, Any]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
        "cpu_count": os.cpu_count(),
        "threads": 1,
        "dtype": "float32",
    }


def _median_time(fn, reps: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_ecmi_vs_qkv(
    sizes: Sequence[int],
    n: int = 16,
    c: int = 64,
    reps: int = 7,
    seed: int = 0,
    chunk_rows: int = 2048,
) -> BenchReport:
    """Median single-thread wall time of both ops on identical float32 inputs."""
    sizes = [int(s) for s in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly ascending")
    if reps < 5:
        raise ValueError("need at least 5 repetitions per size")
    rng = np.random.default_rng(seed)
    ep = EcmiParams.init(rng, c, n, np.float32)
    qp = QkvParams.init(rng, c, np.float32)
    rows = []
    with threadpool_limits(limits=1):
        for N in sizes:
            f_img, v_lidar = bench_inputs(N, c, seed)
            t_e = _median_time(lambda: ecmi(f_img, v_lidar, ep), reps)
            t_q = _median_time(lambda: qkv_cross_attention(f_img, v_lidar, qp, chunk_rows), reps)
            rows.append(BenchRow(N, n, c, reps, t_e, t_q, t_q / t_e))
    report = BenchReport(rows=rows, seed=seed, environment=environment_info())
    if len(rows) >= 2:
        report.ecmi_slope = fit_loglog(sizes, [r.ecmi_median_s for r in rows])
        report.qkv_slope = fit_loglog(sizes, [r.qkv_median_s for r in rows])
        report.speedup_at_max_n = rows[-1].speedup
    return report


def render_report(report: Any, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(report.csv_header)
        writer.writerows(report.csv_rows())
        return buf.getvalue()
    raise ValueError(f"unsupported report format {fmt!r}; use json or csv")


def emit_report(report: Any, fmt: str, path: str | Path) -> Path:
    """Write ``report`` as json or csv; identical reports give identical bytes."""
    text = render_report(report, fmt)
    path = Path(path)
    path.write_text(text, encoding="utf-8", newline="")
    return path
