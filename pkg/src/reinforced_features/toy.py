"""A pipeline small enough to enumerate every outcome.

Two tiny images whose log-heatmaps come straight from free logits and
whose descriptors are a stride-1 grid, so every pixel owns its descriptor.
The task is a fixed lookup table over the chosen matches.  The REINFORCE
gradient is produced by the same ``reinforce_episodes`` used in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DescriptorField, HeatMap, log_softmax, log_softmax_backward
from .robust import LOSS_CEILING
from .trainer import TrainConfig, reinforce_episodes


@dataclass
class ToyInstance:
    logits: np.ndarray  # (2, H, W)
    grids: np.ndarray  # (2, H, W, D)
    pixel_loss: np.ndarray  # (2, H, W): cost of using a pixel in a match
    empty_loss: float = LOSS_CEILING

    @classmethod
    def random(cls, seed: int = 0, shape=(2, 2), dim: int = 2) -> "ToyInstance":
        r = np.random.default_rng(seed)
        H, W = shape
        return cls(
            r.normal(size=(2, H, W)),
            r.normal(size=(2, H, W, dim)),
            r.uniform(5.0, 30.0, size=(2, H, W)),
        )

    @property
    def shape(self):
        return self.logits.shape[1:]

    def n_params(self) -> int:
        return self.logits.size + self.grids.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.logits.ravel(), self.grids.ravel()])

    def with_flat(self, v) -> "ToyInstance":
        n = self.logits.size
        return ToyInstance(
            np.asarray(v[:n]).reshape(self.logits.shape),
            np.asarray(v[n:]).reshape(self.grids.shape),
            self.pixel_loss,
            self.empty_loss,
        )

    def task(self, kp1, kp2, pairs, offset: float = 0.0):
        """Mean pixel cost of the matched keypoints (a black box to the trainer)."""
        if len(pairs) == 0:
            return self.empty_loss + offset, 180.0, True
        a = kp1[pairs[:, 0]].astype(int)
        b = kp2[pairs[:, 1]].astype(int)
        cost = self.pixel_loss[0, a[:, 1], a[:, 0]] + self.pixel_loss[1, b[:, 1], b[:, 0]]
        return float(cost.mean()) + offset, float(cost.mean()), False

    def surrogate_gradient(self, cfg: TrainConfig, rng: np.random.Generator, offset: float = 0.0):
        """One sampled REINFORCE gradient, flattened like ``flat()``."""
        logp = log_softmax(self.logits)
        heat = (HeatMap(logp[0]), HeatMap(logp[1]))
        fields = tuple(DescriptorField(g, 1, self.shape) for g in self.grids)
        eg = reinforce_episodes(heat, fields, lambda a, b, p: self.task(a, b, p, offset), cfg, rng)
        g_logits = log_softmax_backward(eg.g_logp, logp)
        return np.concatenate([g_logits.ravel(), eg.g_grid.ravel()])


def toy_config(**kw) -> TrainConfig:
    base = dict(n_keypoint_samples=3, n_match_samples=3, keypoints_per_image=2, match_fraction=0.5)
    base.update(kw)
    return TrainConfig(**base)
