"""Finite-difference check of the full surrogate gradient.

Episodes are sampled once on a small image pair and then frozen; the
analytic gradient from ``backward`` is compared with central differences
of the frozen surrogate, one parameter at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, backward, forward, init_params
from .rng import make_rng
from .trainer import TrainConfig, reinforce_episodes, surrogate_value


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_parameter: str
    n_checked: int
    n_skipped: int
    relu_margin: float  # smallest |pre-activation| seen; kinks closer than eps can spoil differences


def _lookup_task(seed):
    table = make_rng(seed, 7).uniform(0.0, 32.0, size=4096)

    def task(kp1, kp2, pairs):
        if len(pairs) == 0:
            return 32.0, 180.0, True
        key = int(np.sum(kp1[pairs[:, 0]] * 3 + kp2[pairs[:, 1]] * 5)) % table.size
        return float(table[key]), float(table[key]), False

    return task


def test_images(seed: int = 0, size: int = 16) -> np.ndarray:
    """Two smooth random images with a few bright spots."""
    r = make_rng(seed, 5)
    yy, xx = np.mgrid[0:size, 0:size]
    out = []
    for _ in range(2):
        img = 0.3 + 0.1 * np.sin(xx * r.uniform(0.2, 0.6) + r.uniform(0, 6)) * np.cos(yy * r.uniform(0.2, 0.6))
        for _ in range(4):
            cx, cy = r.uniform(2, size - 3, 2)
            img += r.uniform(0.2, 0.5) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r.uniform(0.8, 2.0) ** 2))
        out.append(img)
    return np.stack(out)


def _relu_margin(params, images):
    _, _, cache = forward(images, params)
    margin = np.inf
    for name in ("conv1", "conv2", "conv3"):
        shape, cols, mask = cache.acts[name]
        # rebuild the pre-activation from the cached columns
        w = params[f"{name}.w"]
        z = np.einsum("ok,nkp->nop", w.reshape(w.shape[0], -1), cols) + params[f"{name}.b"][None, :, None]
        margin = min(margin, float(np.abs(z).min()))
    return margin


def surrogate_gradcheck(seed: int = 0, eps: float = 1e-4, size: int = 16, params: ModelParams | None = None,
                        cfg: TrainConfig | None = None, tiny: float = 1e-10) -> GradcheckReport:
    params = init_params(seed) if params is None else params.copy()
    images = test_images(seed, size)
    cfg = TrainConfig(keypoints_per_image=16) if cfg is None else cfg
    heat, fields_, cache = forward(images, params)
    eg = reinforce_episodes(tuple(heat), tuple(fields_), _lookup_task(seed), cfg, make_rng(seed, 6))
    grads = backward(cache, eg.g_logp, eg.g_grid)

    def value(p):
        h, f, _ = forward(images, p)
        return surrogate_value(h, f, eg.terms)

    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name in params.names():
        base = params[name]
        for idx in np.ndindex(base.shape):
            g = grads[name][idx]
            if abs(g) <= tiny:
                skipped += 1
                continue
            old = base[idx]
            base[idx] = old + eps
            up = value(params)
            base[idx] = old - eps
            dn = value(params)
            base[idx] = old
            num = (up - dn) / (2 * eps)
            rel = abs(num - g) / max(abs(num), abs(g))
            checked += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}{list(idx)}"
    return GradcheckReport(worst, worst_name, checked, skipped, _relu_margin(params, images))


def smooth_seed(min_margin: float = 4e-4, start: int = 0, limit: int = 1000) -> int:
    """First seed whose test instance keeps every ReLU input at least ``min_margin`` from zero.

    Central differences straddling a ReLU kink measure a one-sided slope
    mixture rather than the derivative, so the check is run where the
    surrogate is smooth over the whole +-eps stencil.
    """
    for seed in range(start, start + limit):
        if _relu_margin(init_params(seed), test_images(seed)) >= min_margin:
            return seed
    raise RuntimeError(f"no seed in [{start}, {start + limit}) has ReLU margin {min_margin}")
