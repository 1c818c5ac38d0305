"""Warm up the network, fine-tune it on the pose loss and compare the two.

A scaled-down run by default (a couple of minutes on one core); pass
``--full`` for the 500/200 split used by the acceptance suite.
"""

import argparse
import time

from reinforced_features.evaluation import EvalConfig, evaluate_pose, network_extractor, summary_lines
from reinforced_features.model import init_params
from reinforced_features.synthdata import generate_dataset
from reinforced_features.trainer import PretrainConfig, TrainConfig, pretrain, train

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--full", action="store_true")
args = ap.parse_args()

n_train, n_test, pre_its, rl_its = (500, 200, 6000, 3000) if args.full else (100, 50, 2000, 600)
ds = generate_dataset(n_train + n_test, seed=42)
train_set, test_set = ds[:n_train], ds[n_train:]
t0 = time.perf_counter()

pre, losses = pretrain(train_set, init_params(0), PretrainConfig(iterations=pre_its))
print(f"warm-up: {pre_its} iterations, loss {losses[0]:.2f} -> {losses[-1]:.2f} ({time.perf_counter() - t0:.0f} s)")

tuned, curve = train(train_set, pre, TrainConfig(iterations=rl_its))
w = max(1, rl_its // 10)
first = sum(c[1] for c in curve[:w]) / w
last = sum(c[1] for c in curve[-w:]) / w
print(f"fine-tune: {rl_its} iterations, mean clamped loss {first:.2f} -> {last:.2f} ({time.perf_counter() - t0:.0f} s)")

cfg = EvalConfig()
for name, params in (("warm-up", pre), ("fine-tuned", tuned)):
    ev = evaluate_pose(test_set, network_extractor(params, cfg), cfg)
    print(f"--- {name} on {n_test} held-out pairs")
    print("\n".join(summary_lines(ev)))
