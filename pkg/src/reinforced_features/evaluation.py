"""Pose-error AUC, mean matching accuracy and match statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EmptyInput, NoMatches
from .geometry import essential_from_pose, epipolar_distances
from .model import ModelParams, forward
from .rng import make_rng
from .robust import RansacConfig, run_task
from .sampling import extract_keypoints_test, mutual_nn_candidates

AUC_THRESHOLDS = (5.0, 10.0, 20.0)
MMA_THRESHOLDS = tuple(range(1, 11))


def pose_auc(errors, max_threshold: float) -> float:
    """Normalised area under the cumulative error curve on [0, max_threshold].

    Recall is a step function jumping at each error, so the area is exactly
    the mean of ``max(0, T - e)`` divided by ``T``.  Infinite errors (failed
    pairs) contribute nothing.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyInput("no errors to summarise")
    if not max_threshold > 0:
        raise ValueError("max_threshold must be positive")
    if (e < 0).any() or np.isnan(e).any():
        raise ValueError("errors must be nonnegative")
    return float(np.maximum(max_threshold - e, 0.0).sum() / (e.size * max_threshold))


@dataclass
class PoseErrorCurve:
    errors: np.ndarray
    thresholds: tuple = AUC_THRESHOLDS

    def __post_init__(self):
        self.errors = np.sort(np.asarray(self.errors, dtype=np.float64))

    def auc(self) -> dict:
        return {t: pose_auc(self.errors, t) for t in self.thresholds}


@dataclass
class MatchStats:
    keypoints_per_image: float
    matches_per_pair: float
    inlier_ratio: float
    gt_inlier_ratio: float


@dataclass
class PairResult:
    id: str
    error_deg: float
    n_keypoints1: int
    n_keypoints2: int
    n_matches: int
    n_inliers: int
    n_gt_inliers: int
    failed: bool


@dataclass
class PoseEvaluation:
    curve: PoseErrorCurve
    auc: dict
    stats: MatchStats
    pairs: list = field(default_factory=list)


@dataclass(frozen=True)
class EvalConfig:
    max_n: int = 256
    nms_radius: int = 2
    min_value: float = 3e-4
    ransac: RansacConfig = field(default_factory=lambda: RansacConfig(inlier_threshold=0.02))
    thresholds: tuple = AUC_THRESHOLDS
    seed: int = 0


# an extractor returns (keypoints1, keypoints2, descriptors1, descriptors2)
Extractor = Callable[[object], tuple]


def network_extractor(params: ModelParams, cfg: EvalConfig) -> Extractor:
    def extract(sample):
        heatmaps, fields_, _ = forward(np.stack([sample.image1, sample.image2]), params)
        out = []
        for hm, fd in zip(heatmaps, fields_):
            kp = extract_keypoints_test(hm, cfg.max_n, cfg.nms_radius, cfg.min_value).astype(np.float64)
            desc = fd.lookup(kp) if len(kp) else np.zeros((0, params.desc_dim))
            out.append((kp, desc))
        return out[0][0], out[1][0], out[0][1], out[1][1]

    return extract


def oracle_extractor(sample) -> tuple:
    """Co-visible generator keypoints; each corresponding pair shares a one-hot descriptor.

    Points seen in one image only are left out: their one-hot codes would
    all tie at the same distance and could pair up by index order.
    """
    c = sample.gt_correspondences
    code = np.eye(len(c))
    return sample.gt_keypoints1[c[:, 0]], sample.gt_keypoints2[c[:, 1]], code, code.copy()


def evaluate_pose(dataset, extractor: Extractor, cfg: EvalConfig = EvalConfig()) -> PoseEvaluation:
    """Deterministic pipeline per pair; failures count as infinite error."""
    if len(dataset) == 0:
        raise EmptyInput("dataset is empty")
    rows = []
    ratios, gt_ratios = [], []
    for k, sample in enumerate(dataset):
        kp1, kp2, d1, d2 = extractor(sample)
        matches = mutual_nn_candidates(d1, d2)
        res = run_task(kp1, kp2, matches, sample.gt_pose, cfg.ransac, sample.camera, rng=make_rng(cfg.seed, k))
        n_gt = 0
        if len(matches):
            x1 = sample.camera.normalize(kp1[matches[:, 0]])
            x2 = sample.camera.normalize(kp2[matches[:, 1]])
            gt_res = epipolar_distances(essential_from_pose(sample.gt_pose), x1, x2)
            n_gt = int((gt_res < cfg.ransac.inlier_threshold).sum())
            ratios.append(float(res.inlier_mask.mean()))
            gt_ratios.append(n_gt / len(matches))
        rows.append(
            PairResult(sample.id or f"{k:05d}", res.raw_error, len(kp1), len(kp2), len(matches), int(res.inlier_mask.sum()), n_gt, res.failed)
        )
    curve = PoseErrorCurve([r.error_deg for r in rows], tuple(cfg.thresholds))
    stats = MatchStats(
        float(np.mean([(r.n_keypoints1 + r.n_keypoints2) / 2 for r in rows])),
        float(np.mean([r.n_matches for r in rows])),
        float(np.mean(ratios)) if ratios else 0.0,
        float(np.mean(gt_ratios)) if gt_ratios else 0.0,
    )
    return PoseEvaluation(curve, curve.auc(), stats, rows)


def apply_homography(Hm, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    q = np.concatenate([p, np.ones((len(p), 1))], axis=1) @ np.asarray(Hm).T
    return q[:, :2] / q[:, 2:3]


def matching_accuracy(kp1, kp2, matches, Hm, thresholds=MMA_THRESHOLDS) -> np.ndarray:
    """Fraction of matches whose reprojection error is at most each threshold."""
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    if len(matches) == 0:
        raise NoMatches("no matches to score")
    err = np.linalg.norm(apply_homography(Hm, np.asarray(kp1)[matches[:, 0]]) - np.asarray(kp2)[matches[:, 1]], axis=1)
    return np.array([(err <= t).mean() for t in thresholds])


def mean_matching_accuracy(pairs, extractor: Extractor, thresholds=MMA_THRESHOLDS):
    """Per-threshold accuracy averaged over planar pairs.

    Returns ``(accuracy, flagged)`` where ``flagged`` lists the ids of pairs
    without matches; those count as zero accuracy.
    """
    if len(pairs) == 0:
        raise EmptyInput("no pairs")
    acc = np.zeros(len(thresholds))
    flagged = []
    for k, s in enumerate(pairs):
        if s.homography is None:
            raise ValueError("matching accuracy needs planar pairs with a homography")
        kp1, kp2, d1, d2 = extractor(s)
        try:
            acc += matching_accuracy(kp1, kp2, mutual_nn_candidates(d1, d2), s.homography, thresholds)
        except NoMatches:
            flagged.append(s.id or f"{k:05d}")
    return acc / len(pairs), flagged


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(int(x))


def write_table(path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(v if isinstance(v, str) else _fmt(v) for v in r) + "\n")


def write_pose_results(path, ev: PoseEvaluation):
    header = ["id", "error_deg", "n_keypoints1", "n_keypoints2", "n_matches", "n_inliers", "n_gt_inliers", "failed"]
    rows = [
        [r.id, float(r.error_deg), r.n_keypoints1, r.n_keypoints2, r.n_matches, r.n_inliers, r.n_gt_inliers, int(r.failed)]
        for r in ev.pairs
    ]
    write_table(path, header, rows)


def write_stats(path, ev: PoseEvaluation):
    s = ev.stats
    header = ["keypoints_per_image", "matches_per_pair", "inlier_ratio", "gt_inlier_ratio"]
    header += [f"auc_{t:g}" for t in ev.auc]
    write_table(path, header, [[s.keypoints_per_image, s.matches_per_pair, s.inlier_ratio, s.gt_inlier_ratio, *ev.auc.values()]])


def summary_lines(ev: PoseEvaluation) -> list[str]:
    out = [f"AUC@{t:g}deg\t{v:.4f}" for t, v in ev.auc.items()]
    s = ev.stats
    out.append(f"keypoints/image\t{s.keypoints_per_image:.1f}")
    out.append(f"matches/pair\t{s.matches_per_pair:.1f}")
    out.append(f"inlier ratio\t{s.inlier_ratio:.4f}")
    out.append(f"gt inlier ratio\t{s.gt_inlier_ratio:.4f}")
    return out

