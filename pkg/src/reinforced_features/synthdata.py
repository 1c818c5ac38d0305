"""Synthetic two-view scenes with exact ground truth.

Scene points are rendered as anisotropic Gaussian blobs over a smooth
background, so interest points are unambiguous and the relative pose,
keypoints and correspondences are known exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationFailed
from .geometry import Camera, Pose, rotation_about
from .rng import make_rng

MANIFEST_MAGIC = "#reinforced-features-dataset"
MANIFEST_VERSION = 1
NOISE_SIGMA = 0.01


@dataclass(frozen=True)
class SceneConfig:
    n_points: tuple = (60, 200)
    rotation_max_deg: float = 15.0
    baseline: tuple = (0.5, 1.0)
    translation_direction: tuple | None = None
    depth: tuple = (2.0, 5.0)
    image_size: tuple = (64, 64)
    focal: float = 64.0
    planar: bool = False
    min_covisible: int = 30
    margin_px: float = 6.0

    def camera(self) -> Camera:
        H, W = self.image_size
        return Camera(self.focal, (W - 1) / 2.0, (H - 1) / 2.0)


@dataclass
class Scene:
    points: np.ndarray  # (n, 3) in the first camera frame
    appearance_seeds: np.ndarray
    pose: Pose
    translation: np.ndarray  # metric t with X2 = R X1 + t
    camera: Camera
    image_size: tuple
    render_seed: int
    plane: tuple | None = None  # (normal, d) with normal . X = d


@dataclass
class PairSample:
    image1: np.ndarray
    image2: np.ndarray
    gt_pose: Pose
    gt_keypoints1: np.ndarray  # (n1, 2) subpixel (x, y)
    gt_keypoints2: np.ndarray
    gt_correspondences: np.ndarray  # (m, 2) indices into the keypoint arrays
    camera: Camera
    point_ids1: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    point_ids2: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    homography: np.ndarray | None = None
    id: str = ""


def _project(camera: Camera, X):
    return camera.to_pixels(X[:, :2] / X[:, 2:3])


def _inside(px, size):
    H, W = size
    return (px[:, 0] >= 0) & (px[:, 0] <= W - 1) & (px[:, 1] >= 0) & (px[:, 1] <= H - 1)


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    """Random points and relative pose satisfying the visibility invariants."""
    if cfg.n_points[0] < 8:
        raise ValueError("need at least 8 scene points")
    if not 0 <= cfg.rotation_max_deg <= 30:
        raise ValueError("rotation magnitude must be within 30 degrees")
    camera = cfg.camera()
    H, W = cfg.image_size
    for _ in range(100):
        n = int(rng.integers(cfg.n_points[0], cfg.n_points[1] + 1))
        angle = math.radians(rng.uniform(0.0, cfg.rotation_max_deg))
        axis = rng.normal(size=3)
        R = rotation_about(axis, angle) if angle > 0 else np.eye(3)
        if cfg.translation_direction is None:
            direction = rng.normal(size=3)
        else:
            direction = np.asarray(cfg.translation_direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)
        t = direction * rng.uniform(*cfg.baseline)

        k = 4 * n
        plane = None
        if cfg.planar:
            m = cfg.margin_px
            px = np.stack([rng.uniform(-m, W - 1 + m, k), rng.uniform(-m, H - 1 + m, k)], axis=1)
            rays = np.concatenate([camera.normalize(px), np.ones((k, 1))], axis=1)
            normal = np.array([0.0, 0.0, 1.0]) + 0.3 * rng.normal(size=3) * np.array([1.0, 1.0, 0.0])
            normal /= np.linalg.norm(normal)
            d = rng.uniform(*cfg.depth) * normal[2]
            plane = (normal, d)
            X = rays * (d / (rays @ normal))[:, None]
        else:
            # bounding box of the first camera's frustum over the depth range
            lo = camera.normalize(np.array([[-cfg.margin_px, -cfg.margin_px]]))[0] * cfg.depth[1]
            hi = camera.normalize(np.array([[W - 1 + cfg.margin_px, H - 1 + cfg.margin_px]]))[0] * cfg.depth[1]
            X = np.stack([rng.uniform(lo[0], hi[0], k), rng.uniform(lo[1], hi[1], k), rng.uniform(*cfg.depth, k)], axis=1)
        X2 = X @ R.T + t
        valid = (X[:, 2] > 0.1) & (X2[:, 2] > 0.1)
        if valid.sum() < n:
            continue
        X = X[valid][:n]
        X2 = X2[valid][:n]
        covisible = _inside(_project(camera, X), cfg.image_size) & _inside(_project(camera, X2), cfg.image_size)
        if covisible.sum() < cfg.min_covisible:
            continue
        seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
        return Scene(X, seeds, Pose(R, t), t, camera, cfg.image_size, int(rng.integers(0, 2**63 - 1)), plane)
    raise GenerationFailed("no valid scene after 100 attempts")


def appearance(seed: int):
    """Blob parameters (intensity, world size, aspect ratio, orientation)."""
    r = make_rng(int(seed))
    # bright and dark blobs on a mid-grey background
    intensity = r.uniform(0.15, 0.45) * (1.0 if r.random() < 0.5 else -1.0)
    return intensity, r.uniform(0.06, 0.12), r.uniform(1.0, 3.0), r.uniform(0.0, math.pi)


def _background(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    img = np.full((H, W), rng.uniform(0.4, 0.5))
    for _ in range(3):
        fx, fy = rng.uniform(-1.5, 1.5, size=2)
        img += rng.uniform(0.02, 0.05) * np.cos(2 * math.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * math.pi))
    return img


def _render_view(X, seeds, camera, size, roll, rng):
    H, W = size
    img = _background(rng, H, W)
    px = _project(camera, X)
    yy, xx = np.mgrid[0:H, 0:W]
    for p, depth, s in zip(px, X[:, 2], seeds):
        intensity, world, aspect, theta = appearance(s)
        sig_major = camera.f * world / depth
        sig_minor = sig_major / aspect
        reach = 4.0 * sig_major
        if p[0] < -reach or p[0] > W - 1 + reach or p[1] < -reach or p[1] > H - 1 + reach:
            continue
        c, s_ = math.cos(theta + roll), math.sin(theta + roll)
        dx = xx - p[0]
        dy = yy - p[1]
        u = c * dx + s_ * dy
        v = -s_ * dx + c * dy
        img += intensity * np.exp(-0.5 * ((u / sig_major) ** 2 + (v / sig_minor) ** 2))
    gain = rng.uniform(0.8, 1.2)
    img = gain * img + NOISE_SIGMA * rng.normal(size=(H, W))
    # 8-bit quantisation so files round-trip exactly
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def homography_of(scene: Scene) -> np.ndarray | None:
    """Pixel homography image1 -> image2 for planar scenes."""
    if scene.plane is None:
        return None
    normal, d = scene.plane
    K = scene.camera.K
    Hm = K @ (scene.pose.R + np.outer(scene.translation, normal) / d) @ np.linalg.inv(K)
    return Hm / Hm[2, 2]


def render_pair(scene: Scene, H: int | None = None, W: int | None = None, id: str = "") -> PairSample:
    size = scene.image_size if H is None else (H, W)
    rng = make_rng(scene.render_seed)
    R = scene.pose.R
    X2 = scene.points @ R.T + scene.translation
    roll = math.atan2(R[1, 0], R[0, 0])
    img1 = _render_view(scene.points, scene.appearance_seeds, scene.camera, size, 0.0, rng)
    img2 = _render_view(X2, scene.appearance_seeds, scene.camera, size, roll, rng)
    p1 = _project(scene.camera, scene.points)
    p2 = _project(scene.camera, X2)
    in1 = np.flatnonzero(_inside(p1, size))
    in2 = np.flatnonzero(_inside(p2, size))
    pos2 = {pid: j for j, pid in enumerate(in2)}
    corr = np.array([(i, pos2[pid]) for i, pid in enumerate(in1) if pid in pos2], dtype=np.int64).reshape(-1, 2)
    return PairSample(
        img1, img2, scene.pose, p1[in1], p2[in2], corr, scene.camera,
        in1.astype(np.int64), in2.astype(np.int64), homography_of(scene), id,
    )


def generate_dataset(n: int, seed: int, cfg: SceneConfig = SceneConfig()) -> list[PairSample]:
    """``n`` pairs, the i-th drawn from its own stream keyed by (seed, i)."""
    out = []
    for i in range(n):
        scene = generate_scene(cfg, make_rng(seed, i))
        out.append(render_pair(scene, id=f"{i:05d}"))
    return out


# ------------------------------------------------------------------ files


def write_pgm(path, image):
    img = np.asarray(image, dtype=np.float64)
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing image file {path}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte offset {pos}")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise FormatError(f"{path}: not an 8-bit P5 graymap")
    W, H = int(tokens[1]), int(tokens[2])
    need = pos + W * H
    if len(raw) < need:
        raise FormatError(f"{path}: truncated at byte offset {len(raw)} (expected {need} bytes)")
    return np.frombuffer(raw[pos:need], dtype=np.uint8).reshape(H, W).astype(np.float64) / 255.0


def _fmt(x) -> str:
    return repr(float(x))


def _write_rows(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write("\t".join(r) + "\n")


def _read_rows(path, ncols):
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError as exc:
        raise FormatError(f"missing sidecar file {path}") from exc
    rows = [ln.split("\t") for ln in lines if ln.strip()]
    for k, r in enumerate(rows):
        if len(r) != ncols:
            raise FormatError(f"{path}: line {k + 1} has {len(r)} fields, expected {ncols}")
    return rows


_HEADER = ["id", "image1", "image2"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["t0", "t1", "t2", "f", "cx", "cy"]


def write_dataset(path, samples: list[PairSample]):
    """Directory with manifest.tsv, P5 images and tab-separated sidecars."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"{MANIFEST_MAGIC}\t{MANIFEST_VERSION}", "\t".join(_HEADER)]
    for k, s in enumerate(samples):
        sid = s.id or f"{k:05d}"
        a, b = f"{sid}_1.pgm", f"{sid}_2.pgm"
        write_pgm(root / a, s.image1)
        write_pgm(root / b, s.image2)
        cam = s.camera
        fields = [sid, a, b] + [_fmt(v) for v in s.gt_pose.R.ravel()] + [_fmt(v) for v in s.gt_pose.t]
        fields += [_fmt(cam.f), _fmt(cam.cx), _fmt(cam.cy)]
        lines.append("\t".join(fields))
        _write_rows(root / f"{sid}.kp1.tsv", [(_fmt(x), _fmt(y), str(int(i))) for (x, y), i in zip(s.gt_keypoints1, s.point_ids1)])
        _write_rows(root / f"{sid}.kp2.tsv", [(_fmt(x), _fmt(y), str(int(i))) for (x, y), i in zip(s.gt_keypoints2, s.point_ids2)])
        _write_rows(root / f"{sid}.corr.tsv", [(str(int(i)), str(int(j))) for i, j in s.gt_correspondences])
        if s.homography is not None:
            _write_rows(root / f"{sid}.homography.tsv", [[_fmt(v) for v in row] for row in s.homography])
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n")


def read_dataset(path) -> list[PairSample]:
    root = Path(path)
    try:
        lines = (root / "manifest.tsv").read_text().splitlines()
    except FileNotFoundError as exc:
        raise FormatError(f"missing manifest in {root}") from exc
    if not lines or lines[0].split("\t")[0] != MANIFEST_MAGIC:
        raise FormatError(f"{root / 'manifest.tsv'}: bad magic")
    head = lines[0].split("\t")
    if len(head) != 2 or head[1] != str(MANIFEST_VERSION):
        raise FormatError(f"{root / 'manifest.tsv'}: unsupported version {head[1:]}")
    out = []
    for ln in lines[2:]:
        if not ln.strip():
            continue
        f = ln.split("\t")
        if len(f) != len(_HEADER):
            raise FormatError(f"{root / 'manifest.tsv'}: malformed row {f[:1]}")
        sid = f[0]
        R = np.array([float(v) for v in f[3:12]]).reshape(3, 3)
        t = np.array([float(v) for v in f[12:15]])
        cam = Camera(float(f[15]), float(f[16]), float(f[17]))
        kp1 = _read_rows(root / f"{sid}.kp1.tsv", 3)
        kp2 = _read_rows(root / f"{sid}.kp2.tsv", 3)
        corr = _read_rows(root / f"{sid}.corr.tsv", 2)
        hpath = root / f"{sid}.homography.tsv"
        Hm = np.array([[float(v) for v in r] for r in _read_rows(hpath, 3)]) if hpath.exists() else None
        out.append(
            PairSample(
                read_pgm(root / f[1]),
                read_pgm(root / f[2]),
                Pose(R, t),
                np.array([[float(r[0]), float(r[1])] for r in kp1]).reshape(-1, 2),
                np.array([[float(r[0]), float(r[1])] for r in kp2]).reshape(-1, 2),
                np.array([[int(r[0]), int(r[1])] for r in corr], dtype=np.int64).reshape(-1, 2),
                cam,
                np.array([int(r[2]) for r in kp1], dtype=np.int64),
                np.array([int(r[2]) for r in kp2], dtype=np.int64),
                Hm,
                sid,
            )
        )
    return out
