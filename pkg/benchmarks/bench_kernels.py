"""Time the numba kernels against their numpy fallbacks and one training step.

    python benchmarks/bench_kernels.py [--repeat N]

The full-step comparison runs the step in two subprocesses, one per
``FLORA_NUMBA`` setting, because the kernel choice is fixed at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from flora import _kernels as K


def best_of(fn, repeat, number):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases():
    rng = np.random.default_rng(0)
    ffn = rng.normal(size=(64 * 9, 2560))
    rows = rng.normal(size=(64, 9, 64))
    gain, bias = rng.normal(size=64), rng.normal(size=64)
    att = rng.normal(size=(64, 4, 9, 9))
    g_att = rng.normal(size=att.shape)
    y_att = K.softmax_fwd_np(att)
    _, xhat, rstd = K.layernorm_fwd_np(rows, gain, bias, 1e-5)
    g_rows = rng.normal(size=rows.shape)
    pos = np.sort(rng.normal(1, 1, 10000))
    neg = np.sort(rng.normal(-1, 1, 10000))
    th = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg])), [np.inf]])
    return [
        ("gelu 576x2560", lambda f: f(ffn), "gelu_fwd"),
        ("layernorm fwd 64x9x64", lambda f: f(rows, gain, bias, 1e-5), "layernorm_fwd"),
        ("layernorm bwd 64x9x64", lambda f: f(g_rows, xhat, rstd, gain), "layernorm_bwd"),
        ("softmax fwd 64x4x9x9", lambda f: f(att), "softmax_fwd"),
        ("softmax bwd 64x4x9x9", lambda f: f(y_att, g_att), "softmax_bwd"),
        ("eer sweep 20k scores", lambda f: f(pos, neg, th), "sweep_counts"),
    ]


STEP = """
import time, numpy as np
from flora.backbone import ModelConfig, init_backbone
from flora.data import GenConfig, generate_samples
from flora.train import TrainConfig, new_model, train
cfg = ModelConfig()
samples = [s for s in generate_samples(GenConfig(seed=0, n_samples=2000)) if len(s.text) == 6][:64 * {n}]
model = new_model(cfg, init_backbone(cfg, 0), "flora", 0)
train(TrainConfig(epochs=1), samples[:64], model)   # warm-up
t = time.perf_counter()
train(TrainConfig(epochs=1), samples, model)
print((time.perf_counter() - t) / {n})
"""


def step_time(use_numba, n_steps):
    env = dict(os.environ, FLORA_NUMBA="1" if use_numba else "0")
    out = subprocess.run([sys.executable, "-c", STEP.format(n=n_steps)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--steps", type=int, default=5, help="training steps per timing")
    args = p.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<24} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for label, call, name in kernel_cases():
        f_np = getattr(K, name + "_np")
        f_nb = getattr(K, name + "_nb")
        t_np = best_of(lambda: call(f_np), args.repeat, 3) * 1e3
        t_nb = best_of(lambda: call(f_nb), args.repeat, 3) * 1e3
        print(f"{label:<24} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.2f}x")

    s_np = step_time(False, args.steps) * 1e3
    s_nb = step_time(True, args.steps) * 1e3
    print(f"{'train step (B=64)':<24} {s_np:>10.1f} {s_nb:>10.1f} {s_np / s_nb:>7.2f}x")


if __name__ == "__main__":
    main()
