"""Timing of one training step and of sliding-window inference on a desk crop.

    python scripts/benchmark.py --repeats 3
"""

import argparse
import time

import numpy as np

from hnseg.autodiff import AdamWState, Tensor, adamw_step, backward
from hnseg.config import desk_preset
from hnseg.inference import NetPredictor, sliding_window, tta_predict
from hnseg.loss import deep_supervision_loss
from hnseg.segresnet import build, forward


def timed(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()
    cfg = desk_preset()
    net = build(cfg.network, seed=0)
    rng = np.random.default_rng(0)
    patch = cfg.network.patch_size
    x = rng.random((1, 2, *patch)).astype(np.float32)
    y = rng.integers(0, 3, (1, *patch))
    opt = AdamWState.for_params(net.params, weight_decay=cfg.train.weight_decay)

    def step():
        loss = deep_supervision_loss(forward(net, Tensor(x)), y, cfg.loss)
        backward(loss)
        adamw_step(net.params, opt, cfg.train.lr0)

    crop = rng.random((1, 2, 32, 32, 48)).astype(np.float32)
    predict = NetPredictor(net)
    print(f"parameters            {net.count()}")
    print(f"train step {patch}  {timed(step, args.repeats):.3f} s")
    print(f"sliding window 32x32x48 {timed(lambda: sliding_window(predict, crop, cfg.inference), args.repeats):.3f} s")
    print(f"with 8 flips           {timed(lambda: tta_predict(predict, crop, cfg.inference), args.repeats):.3f} s")
