"""Compare the compiled kernels with the pure-Python fallback.

Times the silhouette rasteriser, the instance-id z-buffer and EPnP (whose
Gauss-Newton refinement runs in the kernel module) under each available
backend, and checks that both backends return identical results.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from carpose import kernels
from carpose.geometry import pose_from_euler
from carpose.library import default_library
from carpose.pnp import CorrespondenceSet, epnp
from carpose.raster import render_ids
from carpose.shapesim import render_silhouette
from carpose.sim import default_intrinsics


def _epnp_cases(n: int):
    K = default_intrinsics()
    rng = np.random.default_rng(0)
    cases = []
    for _ in range(n):
        pts = rng.uniform(-2, 2, size=(10, 3))
        pose = pose_from_euler(0.0, 0.0, rng.uniform(-3, 3), (rng.uniform(-3, 3), 0.8, rng.uniform(8, 80)))
        cam = pts @ pose.R.T + pose.t
        uv = np.column_stack([K.fx * cam[:, 0] / cam[:, 2] + K.ux, K.fy * cam[:, 1] / cam[:, 2] + K.uy])
        uv += rng.normal(0.0, 1.0, uv.shape)
        cases.append(CorrespondenceSet(np.arange(10), uv, pts))
    return K, cases


def _timed(fn, repeat: int):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    library = default_library()
    K = default_intrinsics()
    items = [(i, m, pose_from_euler(0, 0, 0.6 * i, (-6 + 3 * i, 0.775, 8 + 4 * i))) for i, m in enumerate(library)]
    epnp_K, cases = _epnp_cases(200)

    workloads = {
        "silhouettes (5 models x 20 yaws, 512 px)": lambda: [
            render_silhouette(m, y, 512) for m in library for y in np.linspace(0, 6.2, 20)
        ],
        "id buffer (5 cars, 1280x960)": lambda: render_ids(K, items),
        "EPnP (200 problems)": lambda: [epnp(c, epnp_K).pose for c in cases],
    }

    backends = kernels.available_backends()
    before = kernels.backend()
    results: dict[str, dict[str, tuple[float, object]]] = {}
    try:
        for name in backends:
            kernels.set_backend(name)
            results[name] = {w: _timed(fn, args.repeat) for w, fn in workloads.items()}
    finally:
        kernels.set_backend(before)

    print(f"backends: {', '.join(backends)}")
    print(f"{'workload':44s}" + "".join(f"{b:>12s}" for b in backends) + ("  py/compiled" if len(backends) > 1 else ""))
    for w in workloads:
        times = [results[b][w][0] for b in backends]
        line = f"{w:44s}" + "".join(f"{t * 1e3:10.1f}ms" for t in times)
        if len(backends) > 1:
            line += f"{results['python'][w][0] / results['compiled'][w][0]:11.1f}x"
        print(line)
    if len(backends) > 1:
        for w in workloads:
            a, b = (results[x][w][1] for x in backends)
            same = _equal(a, b)
            print(f"identical output ({w}): {same}")
            if not same:
                return 1
    return 0


def _equal(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


if __name__ == "__main__":
    raise SystemExit(main())
