"""Benchmark the compiled conv kernels against the numpy fallback.

Times conv2d forward and weight-gradient passes on the shapes the toy
generators use, plus one full cross-model attack run, on every available
backend. Forward outputs are also checked for bit-identity across backends.

    python benchmarks/bench_kernels.py [--repeats 20] [--threads 1] [--json out.json]
"""

import argparse
import json
import logging
import platform
import sys
import time

import numpy as np

from cmua import backend
from cmua.generators import SyntheticDataset, make_family, synth_images
from cmua.pipeline import PipelineConfig, make_batches, run_cmua

log = logging.getLogger("bench")

# (name, x shape, w shape): batch-8 images through the generators' layers
CASES = [
    ("first layer 7x7, 3->8", (8, 32, 32, 3), (7, 7, 3, 8)),
    ("hidden 3x3, 8->8", (8, 32, 32, 8), (3, 3, 8, 8)),
    ("output 3x3, 8->3", (8, 32, 32, 8), (3, 3, 8, 3)),
    ("analytic 7x7, 3->3", (8, 32, 32, 3), (7, 7, 3, 3)),
]


def best_of(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times))


def bench_kernels(repeats, threads):
    rng = np.random.default_rng(0)
    rows = []
    for name, xs, ws in CASES:
        x = rng.random(xs, dtype=np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        b = rng.standard_normal(ws[-1]).astype(np.float32)
        dy = rng.standard_normal(xs[:3] + (ws[-1],)).astype(np.float32)
        outputs = {}
        for be in backend.available():
            backend.use(be)
            backend.set_threads(threads)
            outputs[be] = backend.conv2d_forward(x, w, b)
            fwd = best_of(lambda: backend.conv2d_forward(x, w, b), repeats)
            wgrad = best_of(lambda: backend.conv2d_weight_grad(x, dy, ws[0]), repeats)
            rows.append({"case": name, "backend": be, "forward_s": fwd, "weight_grad_s": wgrad})
        ref = outputs.get("python")
        for be, out in outputs.items():
            if ref is not None and out.tobytes() != ref.tobytes():
                log.warning("%s: %s forward output differs from the fallback", name, be)
    return rows


def bench_pipeline(threads):
    ds = SyntheticDataset(seed=0)
    family = make_family(seed=0)
    cfg = PipelineConfig(seed=0)
    batches = make_batches(synth_images(ds, 0, 32), cfg.batch_size)
    rows = []
    for be in backend.available():
        backend.use(be)
        backend.set_threads(threads)
        t0 = time.perf_counter()
        wm = run_cmua(family, batches, cfg)
        rows.append({"backend": be, "run_cmua_s": time.perf_counter() - t0,
                     "checksum": float(np.abs(wm.perturbation).sum(dtype=np.float64))})
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--skip-pipeline", action="store_true", help="only time the kernels")
    parser.add_argument("--json", help="also write the results to this file")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    log.info("backends: %s; python %s; numpy %s", backend.available(), platform.python_version(), np.__version__)
    kernels = bench_kernels(args.repeats, args.threads)
    print(f"{'case':<24}{'backend':<9}{'forward best/median (ms)':>28}{'weight grad best/median (ms)':>32}")
    for r in kernels:
        f, g = r["forward_s"], r["weight_grad_s"]
        print(f"{r['case']:<24}{r['backend']:<9}{f[0] * 1e3:>16.2f} / {f[1] * 1e3:<9.2f}"
              f"{g[0] * 1e3:>20.2f} / {g[1] * 1e3:<9.2f}")
    by = {(r["case"], r["backend"]): r for r in kernels}
    if "cython" in backend.available():
        for name, _, _ in CASES:
            speed = by[(name, "python")]["forward_s"][0] / by[(name, "cython")]["forward_s"][0]
            print(f"  {name}: compiled forward {speed:.1f}x the fallback")

    pipeline = [] if args.skip_pipeline else bench_pipeline(args.threads)
    for r in pipeline:
        print(f"run_cmua (32 images, 4 models) on {r['backend']}: {r['run_cmua_s']:.2f}s")
    if len({r["checksum"] for r in pipeline}) > 1:
        log.info("note: watermarks differ across backends (weight gradients are summed in different orders)")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": kernels, "pipeline": pipeline, "threads": args.threads}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
