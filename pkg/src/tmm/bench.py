"""Wall-clock comparison of the FFT and materialized mixing paths."""

from __future__ import annotations

import csv
import io
import time

import numpy as np

from tmm.toeplitz import mix_forward_fft, mix_forward_matmul

PATH_FUNCS = {"fft": mix_forward_fft, "matmul": mix_forward_matmul}


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up: plans, caches, allocator
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_mix(d_list, n_list, repeats: int = 5, seed: int = 0, paths=("fft", "matmul"),
              check_rtol: float = 1e-10) -> list[dict]:
    """Median seconds per call for each path at every (d, n).

    Both paths are checked for agreement on the benchmark input before timing.
    """
    if repeats < 5:
        raise ValueError("bench_mix needs repeats >= 5")
    rng = np.random.default_rng(seed)
    rows = []
    for d in d_list:
        for n in n_list:
            x = rng.standard_normal((d, n))
            c = rng.standard_normal(n) / np.sqrt(n)
            b = rng.standard_normal(n)
            ref = mix_forward_fft(x, c, b)
            alt = mix_forward_matmul(x, c, b)
            err = np.abs(ref - alt).max() / max(np.abs(ref).max(), 1e-300)
            if err > check_rtol:
                raise AssertionError(f"paths disagree at d={d}, n={n}: rel err {err:.3g}")
            for path in paths:
                fn = PATH_FUNCS[path]
                rows.append({"d": d, "n": n, "path": path,
                             "seconds": _median_time(lambda: fn(x, c, b), repeats)})
    return rows


def fit_exponents(rows: list[dict]) -> dict[tuple[str, int], float]:
    """Least-squares slope of log(time) against log(n), per (path, d)."""
    out = {}
    for key in sorted({(r["path"], r["d"]) for r in rows}):
        sel = [r for r in rows if (r["path"], r["d"]) == key]
        if len(sel) < 2:
            continue
        n = np.log([r["n"] for r in sel])
        t = np.log([r["seconds"] for r in sel])
        out[key] = float(np.polyfit(n, t, 1)[0])
    return out


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["d", "n", "path", "seconds"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
