"""Task-loss training of the detector and descriptor by REINFORCE.

One iteration runs the network once per image, then samples several
keypoint sets and, for each, several match subsets.  Every (keypoints,
matches) episode is scored by the pose pipeline, and the parameters move
along the advantage-weighted gradient of the sampling log-probabilities.
The pose pipeline itself is never differentiated.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import NonFiniteGradient
from .model import AdamState, DescriptorField, ModelParams, adam_step, backward, forward, save_checkpoint
from .robust import RansacConfig, run_task
from .rng import make_rng
from .sampling import (
    dist_grad_to_descriptors,
    match_distribution,
    mutual_nn_candidates,
    sample_keypoints,
    sample_match_subset,
    subset_logp,
    subset_logp_grad_dist,
)

BASELINES = ("mean", "per_set", "none")
RAW_ERROR_CAP = 180.0


@dataclass(frozen=True)
class TrainConfig:
    n_keypoint_samples: int = 3
    n_match_samples: int = 3
    keypoints_per_image: int = 64
    match_fraction: float = 0.5
    learning_rate: float = 1e-4
    iterations: int = 5000
    seed: int = 0
    ransac: RansacConfig = field(default_factory=lambda: RansacConfig(inlier_threshold=0.02, max_iterations=200))
    baseline: str = "mean"
    # rescale the mean-baseline estimator so that it stays unbiased
    bias_correction: bool = True
    nn_k: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.n_keypoint_samples < 1 or self.n_match_samples < 1:
            raise ValueError("sample counts must be >= 1")
        if not 0.0 < self.match_fraction <= 1.0:
            raise ValueError("match_fraction must lie in (0, 1]")
        if self.keypoints_per_image < 1:
            raise ValueError("keypoints_per_image must be >= 1")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")


_RANSAC_KEYS = {f"ransac_{f.name}": f.name for f in fields(RansacConfig)}


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "ransac":
            for key, name in _RANSAC_KEYS.items():
                lines.append(f"{key}={getattr(cfg.ransac, name)!r}")
        else:
            lines.append(f"{f.name}={getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment, unknown keys are errors."""
    base = TrainConfig() if base is None else base
    types = {f.name: f.type for f in fields(TrainConfig)}
    top, rs = {}, {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _RANSAC_KEYS:
            name = _RANSAC_KEYS[key]
            rs[name] = type(getattr(base.ransac, name))(float(value) if "." in value or "e" in value else int(value))
        elif key in types and key != "ransac":
            current = getattr(base, key)
            if isinstance(current, bool):
                top[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                top[key] = int(value)
            elif isinstance(current, float):
                top[key] = float(value)
            else:
                top[key] = value
        else:
            raise ValueError(f"line {n}: unknown key {key!r}")
    return replace(base, ransac=replace(base.ransac, **rs), **top)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


@dataclass
class EpisodeRecord:
    keypoint_index: int
    match_index: int
    clamped_loss: float
    raw_error: float
    logp_keypoints: float
    logp_matches: float
    advantage: float
    failed: bool = False


@dataclass
class EpisodeGradients:
    """Surrogate gradients w.r.t. the two log-heatmaps and descriptor grids."""

    g_logp: np.ndarray
    g_grid: np.ndarray
    records: list
    mean_loss: float
    mean_raw_error: float
    terms: "SurrogateTerms | None" = None


@dataclass
class SurrogateTerms:
    """The sampled episodes frozen as weights on log-probability terms.

    ``keypoints`` holds (flat indices 1, counts 1, flat indices 2, counts
    2, weight) per keypoint-set pair; ``matches`` holds (coords 1, coords 2,
    candidate pairs, draw order, weight) per match subset.
    """

    keypoints: list = field(default_factory=list)
    matches: list = field(default_factory=list)


def surrogate_value(heatmaps, fields_, terms: SurrogateTerms) -> float:
    """The scalar whose gradient ``reinforce_episodes`` returns, with the samples held fixed."""
    total = 0.0
    for f1, c1, f2, c2, w in terms.keypoints:
        total += w * (np.dot(c1, heatmaps[0].logp.ravel()[f1]) + np.dot(c2, heatmaps[1].logp.ravel()[f2]))
    for k1, k2, pairs, order, w in terms.matches:
        ms = match_distribution(pairs, fields_[0].lookup(k1), fields_[1].lookup(k2))
        total += w * subset_logp(ms, order)
    return float(total)


TaskFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


def _coefficients(losses: np.ndarray, cfg: TrainConfig):
    """Per-episode weights on the keypoint and match log-probabilities.

    ``losses`` is (n_X, n_M).  Subtracting a mean that contains the
    episode's own loss shrinks the expected gradient by (1 - 1/n) for the
    number n of independent draws it averages over; the correction undoes
    that shrinkage so the estimate stays unbiased.
    """
    nx, nm = losses.shape
    K = nx * nm
    if cfg.baseline == "none":
        return losses / K, losses / K, losses.copy()
    adv = losses - losses.mean()
    fx = nx / (nx - 1) if cfg.bias_correction and nx > 1 else 1.0
    if cfg.baseline == "per_set":
        adv_m = losses - losses.mean(axis=1, keepdims=True)
        fm = nm / (nm - 1) if cfg.bias_correction and nm > 1 else 1.0
    else:
        adv_m = adv
        fm = K / (K - 1) if cfg.bias_correction and K > 1 else 1.0
    return fx * adv / K, fm * adv_m / K, adv


def reinforce_episodes(
    heatmaps: tuple,
    fields_: tuple,
    task: TaskFn,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> EpisodeGradients:
    """Sample all episodes of one iteration and return the surrogate gradients.

    ``task(kp1, kp2, pairs)`` maps pixel keypoints and index pairs to
    ``(clamped_loss, raw_error, failed)``; it is treated as a black box.
    """
    h1, h2 = heatmaps
    f1, f2 = fields_
    nx, nm = cfg.n_keypoint_samples, cfg.n_match_samples
    if nx == 1 and nm == 1:
        warnings.warn("a single episode per iteration always has zero advantage", RuntimeWarning, stacklevel=2)
    kp_sets, episodes = [], []
    losses = np.zeros((nx, nm))
    raw = np.zeros((nx, nm))
    for i in range(nx):
        k1 = sample_keypoints(h1, cfg.keypoints_per_image, rng)
        k2 = sample_keypoints(h2, cfg.keypoints_per_image, rng)
        d1 = f1.lookup(k1.coords)
        d2 = f2.lookup(k2.coords)
        cand = mutual_nn_candidates(d1, d2, cfg.nn_k)
        ms = match_distribution(cand, d1, d2) if len(cand) else None
        kp_sets.append((k1, k2, d1, d2, ms))
        row = []
        for j in range(nm):
            if ms is None:
                sub, pairs = None, np.zeros((0, 2), dtype=np.int64)
            else:
                sub = sample_match_subset(ms, cfg.match_fraction, rng)
                pairs = sub.pairs
            loss, err, failed = task(k1.coords.astype(np.float64), k2.coords.astype(np.float64), pairs)
            losses[i, j] = loss
            raw[i, j] = err
            row.append((sub, failed))
        episodes.append(row)

    cx, cm, adv = _coefficients(losses, cfg)
    g_logp = np.zeros((2,) + h1.shape)
    g_grid = np.zeros((2,) + f1.grid.shape)
    records = []
    terms = SurrogateTerms()
    for i, (k1, k2, d1, d2, ms) in enumerate(kp_sets):
        wx = cx[i].sum()
        terms.keypoints.append((k1.flat_index, k1.counts, k2.flat_index, k2.counts, wx))
        if wx != 0.0:
            g_logp[0] += wx * k1.count_map(h1.shape)
            g_logp[1] += wx * k2.count_map(h2.shape)
        g_dist = np.zeros(len(ms)) if ms is not None else None
        for j, (sub, failed) in enumerate(episodes[i]):
            lm = 0.0
            if sub is not None:
                lm = sub.sequence_logp
                terms.matches.append((k1.coords, k2.coords, ms.pairs, sub.order, cm[i, j]))
                if cm[i, j] != 0.0:
                    g_dist += cm[i, j] * subset_logp_grad_dist(ms, sub.order)
            records.append(EpisodeRecord(i, j, float(losses[i, j]), float(raw[i, j]), k1.joint_logp + k2.joint_logp, lm, float(adv[i, j]), failed))
        if ms is not None and np.any(g_dist):
            gu1, gu2 = dist_grad_to_descriptors(ms.pairs, d1, d2, g_dist)
            g_grid[0] += f1.lookup_backward(k1.coords, gu1)
            g_grid[1] += f2.lookup_backward(k2.coords, gu2)
    return EpisodeGradients(g_logp, g_grid, records, float(losses.mean()), float(np.minimum(raw, RAW_ERROR_CAP).mean()), terms)


def pose_task(sample, ransac: RansacConfig, rng: np.random.Generator) -> TaskFn:
    """Black-box task: relative pose from the matches, scored against ground truth."""

    def task(kp1, kp2, pairs):
        res = run_task(kp1, kp2, pairs, sample.gt_pose, ransac, sample.camera, rng=rng)
        return res.clamped_loss, res.raw_error, res.failed

    return task


def run_training_iteration(sample, params: ModelParams, cfg: TrainConfig, rng: np.random.Generator):
    """Gradient of the REINFORCE surrogate for one image pair.

    Returns ``(grads, mean_loss, records)``; failed episodes simply carry
    the ceiling loss.
    """
    heatmaps, fields_, cache = forward(np.stack([sample.image1, sample.image2]), params)
    # RANSAC draws from its own stream so the sampled episodes do not depend on how much it consumes
    task_rng = make_rng(int(rng.integers(0, 2**63 - 1)))
    eg = reinforce_episodes(tuple(heatmaps), tuple(fields_), pose_task(sample, cfg.ransac, task_rng), cfg, rng)
    grads = backward(cache, eg.g_logp, eg.g_grid)
    return grads, eg.mean_loss, eg.records


def _check_finite(grads, iteration):
    for g in grads.values():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(iteration)


def train(dataset, params: ModelParams, cfg: TrainConfig, checkpoint_path=None, progress=None):
    """REINFORCE fine-tuning; returns ``(params, curve)``.

    ``curve`` rows are (iteration, mean clamped loss, mean raw error in
    degrees with failures counted as 180).  The input params are not
    modified.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    params = params.copy()
    state = AdamState()
    order = make_rng(cfg.seed, 1).permutation(len(dataset))
    rng = make_rng(cfg.seed, 2)
    curve = []
    for it in range(cfg.iterations):
        sample = dataset[order[it % len(order)]]
        grads, mean_loss, records = run_training_iteration(sample, params, cfg, rng)
        _check_finite(grads, it)
        adam_step(params, grads, state, cfg.learning_rate)
        mean_raw = float(np.mean([min(r.raw_error, RAW_ERROR_CAP) for r in records]))
        curve.append((it, mean_loss, mean_raw))
        if checkpoint_path is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params)
        if progress is not None:
            progress(it, mean_loss)
    return params, curve


def write_curve(path, curve):
    with open(path, "w") as fh:
        fh.write("iteration\tmean_loss\tmean_raw_error_deg\n")
        for it, loss, err in curve:
            fh.write(f"{it}\t{loss!r}\t{err!r}\n")


# ------------------------------------------------------------ warm-up


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 1500
    learning_rate: float = 1e-3
    margin: float = 1.0
    descriptor_weight: float = 1.0
    seed: int = 0


def _heat_target(shape, keypoints):
    H, W = shape
    t = np.zeros(shape)
    if len(keypoints):
        xy = np.clip(np.round(keypoints).astype(int), 0, [W - 1, H - 1])
        np.add.at(t, (xy[:, 1], xy[:, 0]), 1.0)
        t /= t.sum()
    return t


def _triplet(field1: DescriptorField, field2: DescriptorField, kp1, kp2, corr, margin):
    """Triplet hinge over known correspondences and its descriptor-grid gradients.

    Two terms share the margin: the hinge averaged over every negative,
    which keeps all descriptors apart early on, and the hinge against the
    hardest negative in each direction, which sharpens nearest-neighbour
    matching once the easy negatives are satisfied.
    """
    g1 = np.zeros_like(field1.grid)
    g2 = np.zeros_like(field2.grid)
    n = len(corr)
    if n < 2:
        return 0.0, g1, g2
    a = field1.lookup(kp1[corr[:, 0]])
    b = field2.lookup(kp2[corr[:, 1]])
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1)) + 1e-12
    pos = np.diag(dist)
    idx = np.arange(n)
    hinge = margin + pos[:, None] - dist
    active = ((hinge > 0) & ~np.eye(n, dtype=bool)) / (n * (n - 1))
    loss = float((hinge * active).sum())
    g_dist = -active
    g_dist[idx, idx] += active.sum(axis=1)
    off = dist + np.eye(n) * 4.0  # unit vectors are at most 2 apart
    for r, c in ((idx, off.argmin(axis=1)), (off.argmin(axis=0), idx)):
        h = margin + pos - dist[r, c]
        w = (h > 0) / (2 * n)
        loss += float((h * w).sum())
        g_dist[idx, idx] += w
        np.add.at(g_dist, (r, c), -w)
    # d dist_ij / d a_i = unit_ij and d dist_ij / d b_j = -unit_ij
    unit = diff / dist[..., None]
    ga = (g_dist[..., None] * unit).sum(axis=1)
    gb = -(g_dist[..., None] * unit).sum(axis=0)
    g1 = field1.lookup_backward(kp1[corr[:, 0]], ga)
    g2 = field2.lookup_backward(kp2[corr[:, 1]], gb)
    return loss, g1, g2


def pretrain_step(sample, params: ModelParams, cfg: PretrainConfig):
    """Supervised loss on one pair and its parameter gradients."""
    heatmaps, fields_, cache = forward(np.stack([sample.image1, sample.image2]), params)
    g_logp = np.zeros((2,) + heatmaps[0].shape)
    ce = 0.0
    for k, kp in enumerate((sample.gt_keypoints1, sample.gt_keypoints2)):
        t = _heat_target(heatmaps[k].shape, kp)
        ce -= float((t * heatmaps[k].logp).sum())
        g_logp[k] = -t
    trip, g1, g2 = _triplet(fields_[0], fields_[1], sample.gt_keypoints1, sample.gt_keypoints2, sample.gt_correspondences, cfg.margin)
    g_grid = cfg.descriptor_weight * np.stack([g1, g2])
    grads = backward(cache, g_logp, g_grid)
    return grads, ce + cfg.descriptor_weight * trip


def pretrain(dataset, params: ModelParams, cfg: PretrainConfig = PretrainConfig(), progress=None):
    """Supervised warm-up from generator keypoints and correspondences.

    Returns ``(params, losses)`` with one loss per iteration.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    params = params.copy()
    state = AdamState()
    order = make_rng(cfg.seed, 3).permutation(len(dataset))
    losses = []
    for it in range(cfg.iterations):
        grads, loss = pretrain_step(dataset[order[it % len(order)]], params, cfg)
        _check_finite(grads, it)
        adam_step(params, grads, state, cfg.learning_rate)
        losses.append(loss)
        if progress is not None:
            progress(it, loss)
    return params, losses
