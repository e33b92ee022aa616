"""Compiled vs pure-Python kernels on a 512^3 submap.

    python3 benchmarks/bench_kernels.py [--rays 100000] [--python-rays 20000]

Rays are cast from the centre of a 10 m box room; the pure-Python backend
gets a smaller batch by default and its rate is reported per ray.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from occslam import sim
from occslam.kernels import available_backends
from occslam.occupancy import OccupancySubmap


def room_rays(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    scene = sim.box_room((10.0, 10.0, 10.0))
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.zeros((n, 3)) + rng.uniform(-0.5, 0.5, size=(n, 3))
    t, _ = scene.cast(origins, d)
    keep = np.isfinite(t)
    return origins[keep], origins[keep] + t[keep, None] * d[keep]


def bench_backend(backend: str, origins, endpoints, n_queries: int = 100_000, seed: int = 1) -> dict:
    submap = OccupancySubmap(0.03, 15.36, backend=backend)
    t0 = time.perf_counter()
    stats = submap.integrate_rays(origins, endpoints)
    t_int = time.perf_counter() - t0
    t0 = time.perf_counter()
    submap.propagate()
    t_prop = time.perf_counter() - t0
    rng = np.random.default_rng(seed)
    q = endpoints[rng.integers(0, len(endpoints), n_queries)] + rng.normal(0, 0.05, (n_queries, 3))
    t0 = time.perf_counter()
    L, ok = submap.query_batch(q)
    t_query = time.perf_counter() - t0
    return {
        "backend": backend,
        "rays": len(origins),
        "voxel_updates": stats.voxel_updates,
        "integrate_s": t_int,
        "rays_per_s": len(origins) / t_int,
        "propagate_s": t_prop,
        "queries": n_queries,
        "query_s": t_query,
        "checksum": submap.checksum(),
        "known_fraction": float(ok.mean()),
        "_L": L,
    }


def run(n_rays: int = 100_000, n_python: int = 20_000, seed: int = 0) -> list[dict]:
    origins, endpoints = room_rays(n_rays, seed)
    rows = []
    for backend in available_backends():
        n = len(origins) if backend != "python" else min(n_python, len(origins))
        rows.append(bench_backend(backend, origins[:n], endpoints[:n]))
    if len(rows) == 2 and n_python >= len(origins):
        same = rows[0]["checksum"] == rows[1]["checksum"] and np.array_equal(rows[0]["_L"], rows[1]["_L"])
        rows[0]["identical_to_compiled"] = rows[1]["identical_to_compiled"] = bool(same)
    for r in rows:
        r.pop("_L")
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=100_000)
    ap.add_argument("--python-rays", type=int, default=20_000)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    rows = run(args.rays, args.python_rays)
    if args.json:
        print(json.dumps(rows, indent=1))
        return
    print(f"{'backend':<8}{'rays':>9}{'integrate s':>13}{'rays/s':>12}{'propagate s':>13}{'100k query s':>14}")
    for r in rows:
        print(f"{r['backend']:<8}{r['rays']:>9}{r['integrate_s']:>13.3f}{r['rays_per_s']:>12.0f}"
              f"{r['propagate_s']:>13.3f}{r['query_s']:>14.3f}")
    if len(rows) == 2:
        speedup = rows[1]["rays_per_s"] / rows[0]["rays_per_s"]
        print(f"compiled speed-up on ray integration: {speedup:.1f}x")
    compiled = [r for r in rows if r["backend"] == "cython"]
    ref = compiled[0] if compiled else rows[0]
    verdict = "met" if ref["rays"] >= 100_000 and ref["integrate_s"] < 5.0 else "not met"
    print(f"soft target (100k rays < 5 s, {ref['backend']}): {verdict}")


if __name__ == "__main__":
    main()
