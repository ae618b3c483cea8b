"""Time the compiled filter-bank kernel against the numpy fallback.

    python benchmarks/bench_kernels.py --bins 64 --seconds 4

Both backends run the same joint Kalman (and RLS) bank on random
spectra; the script reports wall time, per-step cost, speed-up and the
largest output difference.
"""
import argparse
import time

import numpy as np

from draec.config import DraecConfig
from draec.core import TapLayout, run_bank
from draec.core.bank import KERNELS


def bench(backend, src, Y, taps, cfg, estimator, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = run_bank(src, Y, taps, cfg, estimator, backend=backend).s_hat
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--seconds", type=float, default=4.0, help="signal length at 16 kHz / hop 256")
    p.add_argument("--mics", type=int, default=2)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    cfg = DraecConfig(n_mics=args.mics)
    T = int(args.seconds * 16000 / 256)
    rng = np.random.default_rng(0)
    shape = (args.bins, 1 + args.mics, T)
    src = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    Y = np.ascontiguousarray(src[:, 1:])
    taps = TapLayout.joint(cfg)
    steps = args.bins * args.mics * T

    print(f"bank: {args.bins} bins x {args.mics} mics x {T} frames, L={cfg.length}; "
          f"backends {sorted(KERNELS)}")
    for estimator in ("kalman", "rls"):
        res = {b: bench(b, src, Y, taps, cfg, estimator, args.repeat) for b in sorted(KERNELS)}
        for b, (t, _) in res.items():
            print(f"  {estimator:6s} {b:7s} {t:8.3f} s  {1e6 * t / steps:7.2f} us/step")
        if len(res) == 2:
            (tc, oc), (tn, on) = res["cython"], res["numpy"]
            print(f"  {estimator:6s} speed-up {tn / tc:.1f}x, max |diff| {np.max(np.abs(oc - on)):.1e}")


if __name__ == "__main__":
    main()
