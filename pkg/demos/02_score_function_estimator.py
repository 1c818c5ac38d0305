"""The sampled pose-loss gradient on a pipeline small enough to enumerate.

Two 2x2 "images" with free heatmap logits and descriptors feed the same
episode sampler used in training.  The expected loss over every keypoint
draw and match subset is enumerated exactly, so the sampled gradient can
be compared against the true one, with and without the mean baseline.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from toy_oracle import exact_gradient, expected_loss  # noqa: E402

from reinforced_features.rng import make_rng  # noqa: E402
from reinforced_features.toy import ToyInstance, toy_config  # noqa: E402

inst = ToyInstance.random(4, (2, 2), 2)
cfg = toy_config()
print(f"exact expected loss: {expected_loss(inst, cfg.keypoints_per_image, cfg.match_fraction):.4f}")

exact = exact_gradient(inst, cfg.keypoints_per_image, cfg.match_fraction)
n = 5000
for baseline in ("mean", "none"):
    g = np.array([inst.surrogate_gradient(toy_config(baseline=baseline), make_rng(0, k)) for k in range(n)])
    se = g.std(axis=0, ddof=1) / np.sqrt(n)
    z = np.abs(g.mean(axis=0) - exact) / se
    print(f"baseline={baseline:>4}: largest deviation {z.max():.2f} standard errors, "
          f"mean per-coordinate variance {g.var(axis=0).mean():.3f}")

# a few plain gradient steps driven only by sampled gradients
w = inst.flat()
rng = make_rng(1)
for step in range(201):
    cur = inst.with_flat(w)
    if step % 50 == 0:
        print(f"step {step:3d}: expected loss {expected_loss(cur, cfg.keypoints_per_image, cfg.match_fraction):.4f}")
    w = w - 0.05 * cur.surrogate_gradient(cfg, rng)
