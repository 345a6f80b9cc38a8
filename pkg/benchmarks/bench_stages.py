"""Stage timing for the Monte Carlo pipeline.

Splits one 1D zero-count run into factorization, sampling and extraction,
and one 2D nodal-length run into sampling and marching squares.  Used to
decide whether any stage is worth a compiled kernel.

    python benchmarks/bench_stages.py [--replicas 512]
"""
import argparse
import time

from artifact.gaussian import GridSampler, bargmann_fock
from artifact.simulate import conditional_mean_weights, nodal_segments_2d, refine_1d, sign_changes


def timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def bench_1d(T: float, h: float, replicas: int) -> dict:
    k = bargmann_fock(1, 1)
    sampler, t_fact = timed(lambda: GridSampler(k, T, h, [(0,), (1,)]))
    W = conditional_mean_weights(k, h)
    t_draw = t_ext = 0.0
    for s in range(0, replicas, 64):
        ch, dt = timed(lambda: sampler.draw(0, range(s, min(replicas, s + 64))))
        t_draw += dt
        _, dt = timed(lambda: sign_changes(refine_1d(ch[(0,)][..., 0], ch[(1,)][..., 0], W)))
        t_ext += dt
    return {"factorize": t_fact, "sample": t_draw, "extract": t_ext}


def bench_2d(R: float, h: float, replicas: int) -> dict:
    k = bargmann_fock(2, 1)
    sampler, t_fact = timed(lambda: GridSampler(k, R, h, [(0, 0)]))
    ch, t_draw = timed(lambda: sampler.draw(0, range(replicas)))
    _, t_ext = timed(lambda: [nodal_segments_2d(f[..., 0], h) for f in ch[(0, 0)]])
    return {"factorize": t_fact, "sample": t_draw, "extract": t_ext}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--replicas", type=int, default=512)
    a = p.parse_args()
    for name, res in (("1d zeros T=200 h=0.1", bench_1d(200.0, 0.1, a.replicas)),
                      ("2d length R=40 h=0.25", bench_2d(40.0, 0.25, min(a.replicas, 200)))):
        total = sum(res.values())
        parts = ", ".join(f"{k} {v:.2f}s ({100 * v / total:.0f}%)" for k, v in res.items())
        print(f"{name}: {parts}")


if __name__ == "__main__":
    main()
