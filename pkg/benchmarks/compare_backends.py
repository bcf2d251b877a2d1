"""Benchmark the JIT kernels against the pure-numpy fallback.

Times the three hot paths (forward render, fused forward/backward, total
variation) on a mid-size synthetic scene and prints a comparison table.

    python benchmarks/compare_backends.py [--rays 20000] [--repeat 3]

The active default backend is whatever PERFIELD_BACKEND selects; both
implementations are imported explicitly here, so the flag does not matter
for this script.
"""

import argparse
import time

import numpy as np

from perfield.grid import dense_grid, make_background, neighbor_slots, prune
from perfield.kernels import _numpy as kernels_numpy
from perfield.renderer import RenderConfig, _bg_args, _step_world

try:
    from perfield.kernels import _numba as kernels_numba
except ImportError:
    kernels_numba = None


def build_scene(seed=0, resolution=48):
    rng = np.random.default_rng(seed)
    g = dense_grid((resolution,) * 3, [-1, -1, -1], [1, 1, 1])
    g.density[:] = rng.uniform(-1.0, 3.0, g.slot_count)
    g.sh[:] = rng.normal(0, 0.5, (g.slot_count, 27))
    g = prune(g, 0.0)
    bg = make_background(g, n_layers=8, layer_resolution=32)
    bg.texels[:] = rng.normal(0, 0.5, bg.texels.shape)
    return g, bg, rng


def bench(fn, repeat):
    fn()  # warmup (JIT compile / cache load)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rays", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--resolution", type=int, default=48)
    args = ap.parse_args()

    g, bg, rng = build_scene(resolution=args.resolution)
    cfg = RenderConfig()
    use_bg, tex, radii, center, bright = _bg_args(bg, cfg)
    n = args.rays
    origins = rng.uniform(-3, 3, (n, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    targets = rng.uniform(0, 1, (n, 3))
    fwd_args = (g.occupancy, g.density, g.sh, g.world_min, g.world_max,
                g.voxel_size, origins, dirs, np.zeros(n), np.full(n, np.inf),
                _step_world(g, cfg), cfg.sigma_threshold, cfg.early_stop_T,
                False, use_bg, tex, radii, center, bright)
    nbx, nby, nbz = neighbor_slots(g)

    backends = [("numpy", kernels_numpy)]
    if kernels_numba is not None:
        backends.insert(0, ("numba", kernels_numba))

    print(f"scene: {g.resolution[0]}^3 grid, {g.slot_count} voxels, {n} rays")
    print(f"{'kernel':<18}" + "".join(f"{name:>12}" for name, _ in backends)
          + f"{'speedup':>10}")
    rows = {}
    for name, impl in backends:
        out_rgb = np.empty((n, 3))
        out_T = np.empty(n)
        rows.setdefault("render_forward", []).append(
            bench(lambda: impl.render_forward(*fwd_args, out_rgb, out_T), args.repeat))

        dd = np.zeros(g.slot_count)
        dsh = np.zeros((g.slot_count, 27))
        dbg = np.zeros_like(bg.texels)
        loss = np.zeros(2)

        def backward(impl=impl, dd=dd, dsh=dsh, dbg=dbg, loss=loss,
                     out_rgb=out_rgb, out_T=out_T):
            dd[:] = 0
            dsh[:] = 0
            dbg[:] = 0
            impl.render_backward(*fwd_args, targets, 2.0 / (3 * n), 1e-5 / n,
                                 dd, dsh, dbg, out_rgb, out_T, loss)

        rows.setdefault("render_backward", []).append(bench(backward, args.repeat))

        grad = np.zeros_like(g.sh)

        def tv(impl=impl, grad=grad):
            grad[:] = 0
            impl.tv_grad(g.sh, nbx, nby, nbz, 5e-3, grad)

        rows.setdefault("tv_grad", []).append(bench(tv, args.repeat))

    for op, times in rows.items():
        line = f"{op:<18}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[1] / times[0]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
