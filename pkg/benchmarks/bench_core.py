"""Compare the compiled kernel core against the numpy fallback.

Times one full forward pass (C2, C3, N1, N2 layer kernels) per image for
each implementation and accumulation mode, and checks the outputs agree
bit for bit.

    python benchmarks/bench_core.py [--images N] [--repeat R]
"""

import argparse
import time

import numpy as np

from simtcnn import core
from simtcnn.tensors import C2, C3, N1, N2
from simtcnn.trainer import init_network


def forward(impl, net, img, mode, lanes):
    c2 = np.empty((C2.n_out, C2.out_side ** 2), np.float32)
    impl.conv_layer(img[None], net.c2.grouped, 2, c2, 0, -1, mode, lanes, True)
    c3 = np.empty((C3.n_out, C3.out_side ** 2), np.float32)
    impl.conv_layer(c2.reshape(C2.n_out, C2.out_side, C2.out_side), net.c3.grouped, 2, c3,
                    0, -1, mode, lanes, True)
    n1 = np.empty(N1.n_out, np.float32)
    n2 = np.empty(N2.n_out, np.float32)
    if lanes:
        impl.fc_layer_lanes(c3.reshape(-1), net.n1.transposed, n1, 0, -1, mode, True)
        impl.fc_layer_lanes(n1, net.n2.transposed, n2, 0, -1, mode, False)
    else:
        impl.fc_layer(c3.reshape(-1), net.n1.grouped, n1, 0, -1, mode, True)
        impl.fc_layer(n1, net.n2.grouped, n2, 0, -1, mode, False)
    return n2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    net = init_network(args.seed, scale=24.0)
    images = rng.random((args.images, 29, 29), dtype=np.float32)
    impls = core.implementations()
    if "compiled" not in impls:
        print("compiled core not built; only the fallback is available")

    print(f"{'mode':<9} {'path':<6} " + " ".join(f"{k + ' us/img':>16}" for k in impls)
          + f" {'ratio':>8} {'bitwise':>8}")
    for mode_name in ("separate", "fused", "tree"):
        mode = core.mode_code(mode_name)
        for lanes in (False, True):
            timings, outs = {}, {}
            for name, impl in impls.items():
                best = float("inf")
                for _ in range(args.repeat):
                    t0 = time.perf_counter()
                    res = [forward(impl, net, img, mode, lanes) for img in images]
                    best = min(best, time.perf_counter() - t0)
                timings[name] = best / len(images) * 1e6
                outs[name] = np.stack(res)
            same = all(o.tobytes() == outs["python"].tobytes() for o in outs.values())
            ratio = (timings["python"] / timings["compiled"]) if "compiled" in timings else 1.0
            print(f"{mode_name:<9} {'lanes' if lanes else 'serial':<6} "
                  + " ".join(f"{timings[k]:>16.1f}" for k in impls)
                  + f" {ratio:>7.1f}x {str(same):>8}")


if __name__ == "__main__":
    main()
