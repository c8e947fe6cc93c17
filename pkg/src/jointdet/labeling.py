"""Self-supervised label generation: synthetic shapes with exact corner
ground truth, and homographic-adaptation pseudo-labels from a trained
detector."""

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import ShapeError, ValidationError
from .geometry import HomographySamplingConfig, sample_homography_px, warp_image
from .model import heatmap_from_logits, run_inference
from .postprocess import KeypointSet, extract_keypoints, write_keypoint_file

SHAPE_KINDS = ("polygon", "line_segments", "star", "checkerboard", "stripes",
               "cube", "ellipse", "gaussian_noise")


@dataclass
class SyntheticSample:
    image: np.ndarray        # (H, W, 3) in [0, 1]
    points: KeypointSet      # exact corner locations of the rendered primitive
    shape_kind: str


@dataclass
class AdaptationConfig:
    num_homographies: int = 100
    detection_threshold: float = 0.015
    aggregation: str = "mean"
    include_identity: bool = True
    nms_radius: int = 4

    def validate(self):
        if self.num_homographies < 1:
            raise ValidationError("num_homographies must be >= 1")
        if not 0 < self.detection_threshold < 1:
            raise ValidationError("detection_threshold must lie in (0, 1)")
        if self.aggregation != "mean":
            raise ValidationError(f"unsupported aggregation {self.aggregation!r}")


# ---------------------------------------------------------------------------
# synthetic shape rendering


def _background(rng, size):
    base = rng.uniform(0.15, 0.75)
    noise = rng.uniform(-1, 1, size=(size, size))
    noise = cv2.blur(noise, (size // 4 + 1, size // 4 + 1)) * 0.08
    return np.clip(base + noise, 0.0, 1.0)


def _contrasting_shade(rng, canvas_mean):
    lo, hi = (0.0, canvas_mean - 0.25) if canvas_mean > 0.5 else (canvas_mean + 0.25, 1.0)
    return rng.uniform(max(lo, 0.0), min(hi, 1.0))


def draw_polygon(canvas, rng):
    size = canvas.shape[0]
    n = int(rng.integers(3, 7))
    center = rng.uniform(0.3 * size, 0.7 * size, size=2)
    radii = rng.uniform(0.15 * size, 0.28 * size, size=n)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    pts = np.stack([center[0] + radii * np.cos(angles),
                    center[1] + radii * np.sin(angles)], axis=1)
    pts = np.clip(pts, 1, size - 2)
    shade = _contrasting_shade(rng, canvas.mean())
    cv2.fillPoly(canvas, [np.round(pts).astype(np.int32)], shade)
    return pts


def _segments_cross(a, b, c, d):
    def orient(p, q, r):
        return np.sign((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))
    return (orient(a, b, c) != orient(a, b, d)) and (orient(c, d, a) != orient(c, d, b))


def draw_line_segments(canvas, rng):
    size = canvas.shape[0]
    points = []
    segments = []
    for _ in range(int(rng.integers(3, 7))):
        p = rng.uniform(2, size - 3, size=2)
        q = rng.uniform(2, size - 3, size=2)
        if np.linalg.norm(p - q) < 0.2 * size:
            continue
        if any(_segments_cross(p, q, a, b) for a, b in segments):
            continue
        segments.append((p, q))
        shade = _contrasting_shade(rng, canvas.mean())
        cv2.line(canvas, tuple(np.round(p).astype(int)), tuple(np.round(q).astype(int)),
                 shade, thickness=int(rng.integers(1, 3)))
        points.extend([p, q])
    return np.asarray(points).reshape(-1, 2)


def draw_star(canvas, rng):
    size = canvas.shape[0]
    n = int(rng.integers(3, 6))
    center = rng.uniform(0.35 * size, 0.65 * size, size=2)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.15 * size, 0.3 * size, size=n)
    tips = np.stack([center[0] + radii * np.cos(angles),
                     center[1] + radii * np.sin(angles)], axis=1)
    tips = np.clip(tips, 1, size - 2)
    for tip in tips:
        shade = _contrasting_shade(rng, canvas.mean())
        cv2.line(canvas, tuple(np.round(center).astype(int)),
                 tuple(np.round(tip).astype(int)), shade,
                 thickness=int(rng.integers(1, 3)))
    return np.concatenate([[center], tips], axis=0)


def draw_checkerboard(canvas, rng, rows=None, cols=None):
    size = canvas.shape[0]
    rows = rows or int(rng.integers(2, 5))
    cols = cols or int(rng.integers(2, 5))
    cell = rng.uniform(0.12 * size, min(0.3 * size, (size - 4) / max(rows, cols)))
    x0 = rng.uniform(1, size - 2 - cols * cell)
    y0 = rng.uniform(1, size - 2 - rows * cell)
    shades = rng.uniform(0, 1, size=(rows, cols))
    for r in range(rows):
        for c in range(cols):
            x1, y1 = x0 + c * cell, y0 + r * cell
            quad = np.array([[x1, y1], [x1 + cell, y1],
                             [x1 + cell, y1 + cell], [x1, y1 + cell]])
            cv2.fillPoly(canvas, [np.round(quad).astype(np.int32)], shades[r, c])
    xs = x0 + np.arange(cols + 1) * cell
    ys = y0 + np.arange(rows + 1) * cell
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def draw_stripes(canvas, rng):
    size = canvas.shape[0]
    n = int(rng.integers(2, 6))
    bounds = np.sort(rng.uniform(0.1 * size, 0.9 * size, size=n))
    # enforce a minimum stripe width so boundaries stay distinct corners
    bounds = bounds[np.concatenate([[True], np.diff(bounds) > 3])]
    edges = np.concatenate([[0.0], bounds, [float(size - 1)]])
    for i in range(len(edges) - 1):
        shade = rng.uniform(0, 1)
        quad = np.array([[edges[i], 0], [edges[i + 1], 0],
                         [edges[i + 1], size - 1], [edges[i], size - 1]])
        cv2.fillPoly(canvas, [np.round(quad).astype(np.int32)], shade)
    points = [(x, y) for x in bounds for y in (0.0, float(size - 1))]
    return np.asarray(points).reshape(-1, 2)


def draw_cube(canvas, rng):
    size = canvas.shape[0]
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)],
                       dtype=float)
    ax, ay = rng.uniform(0.2, np.pi / 2 - 0.2, size=2)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rot = (ry @ rx @ corners.T).T
    scale = rng.uniform(0.1 * size, 0.18 * size)
    center = rng.uniform(0.4 * size, 0.6 * size, size=2)
    proj = rot[:, :2] * scale + center
    proj = np.clip(proj, 1, size - 2)

    hidden = int(np.argmax(rot[:, 2]))
    front = int(np.argmin(rot[:, 2]))
    faces = [[0, 1, 3, 2], [4, 5, 7, 6], [0, 1, 5, 4],
             [2, 3, 7, 6], [0, 2, 6, 4], [1, 3, 7, 5]]
    shades = rng.uniform(0, 1, size=3)
    k = 0
    for face in faces:
        if front in face and hidden not in face:
            cv2.fillPoly(canvas, [np.round(proj[face]).astype(np.int32)], shades[k % 3])
            k += 1
    visible = [i for i in range(8) if i != hidden]
    return proj[visible]


def draw_ellipse(canvas, rng):
    size = canvas.shape[0]
    center = rng.uniform(0.3 * size, 0.7 * size, size=2)
    axes = rng.uniform(0.1 * size, 0.25 * size, size=2)
    angle = rng.uniform(0, 180)
    shade = _contrasting_shade(rng, canvas.mean())
    cv2.ellipse(canvas, tuple(np.round(center).astype(int)),
                tuple(np.round(axes).astype(int)), angle, 0, 360, shade, -1)
    return np.zeros((0, 2))


def draw_gaussian_noise(canvas, rng):
    canvas[:] = np.clip(rng.normal(0.5, 0.25, size=canvas.shape), 0, 1)
    return np.zeros((0, 2))


_DRAW_FNS = {
    "polygon": draw_polygon,
    "line_segments": draw_line_segments,
    "star": draw_star,
    "checkerboard": draw_checkerboard,
    "stripes": draw_stripes,
    "cube": draw_cube,
    "ellipse": draw_ellipse,
    "gaussian_noise": draw_gaussian_noise,
}


def apply_photometric_noise(image, rng):
    """Blur, brightness/contrast jitter and speckle; geometry untouched."""
    out = image.copy()
    sigma = rng.uniform(0.0, 1.2)
    if sigma > 0.1:
        out = cv2.GaussianBlur(out, (5, 5), sigma)
    contrast = rng.uniform(0.85, 1.15)
    brightness = rng.uniform(-0.08, 0.08)
    out = (out - 0.5) * contrast + 0.5 + brightness
    out = out + rng.normal(0.0, rng.uniform(0.0, 0.03), size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_synthetic(kind, rng, size=64, noise=True, **shape_params) -> SyntheticSample:
    """Render one labeled sample. Corner labels are registered before the
    photometric corruption, so they stay exact renderer geometry."""
    if kind not in _DRAW_FNS:
        raise ValidationError(f"unknown shape kind {kind!r}, want one of {SHAPE_KINDS}")
    seeds = rng.integers(0, 2 ** 31 - 1, size=3)
    canvas = _background(np.random.default_rng(seeds[0]), size)
    points = _DRAW_FNS[kind](canvas, np.random.default_rng(seeds[1]), **shape_params)
    if noise:
        canvas = apply_photometric_noise(canvas, np.random.default_rng(seeds[2]))
    image = np.repeat(canvas[:, :, None], 3, axis=2)
    kps = KeypointSet(points, np.ones(len(points)))
    return SyntheticSample(image, kps, kind)


def random_kind(rng):
    return SHAPE_KINDS[rng.integers(0, len(SHAPE_KINDS))]


# ---------------------------------------------------------------------------
# homographic adaptation


def adaptation_warps(cfg: AdaptationConfig, sampling: HomographySamplingConfig,
                     image_shape):
    """The warp sequence: optional identity first, then a prefix-stable stream
    of sampled homographies."""
    rng = np.random.default_rng(sampling.seed)
    warps = [np.eye(3)] if cfg.include_identity else []
    for _ in range(cfg.num_homographies):
        warps.append(sample_homography_px(sampling, image_shape, rng))
    return warps


def aggregate_heatmap(model, image, cfg: AdaptationConfig,
                      sampling: HomographySamplingConfig, device="cpu"):
    """Mean detector response over warped views, mapped back to the original
    frame. Returns (mean_heatmap, counts); pixels no valid warp ever covered
    have count 0 and mean 0."""
    cfg.validate()
    image = np.asarray(image, dtype=np.float64)
    h_img, w_img = image.shape[:2]
    accum = np.zeros((h_img, w_img))
    counts = np.zeros((h_img, w_img))
    for h in adaptation_warps(cfg, sampling, image.shape):
        warped, _ = warp_image(image, h)
        out = run_inference(model, warped, device=device)
        heat = heatmap_from_logits(_to_tensor(out.detector_logits)).numpy()
        if heat.shape != (h_img, w_img):
            raise ShapeError(f"heatmap shape {heat.shape} does not match image "
                             f"{(h_img, w_img)}")
        back, valid = warp_image(heat, np.linalg.inv(h))
        accum += back * valid
        counts += valid
    mean = np.where(counts > 0, accum / np.maximum(counts, 1), 0.0)
    return mean, counts


def _to_tensor(arr):
    import torch
    return torch.as_tensor(np.ascontiguousarray(arr))


def homographic_adaptation(model, image, cfg: AdaptationConfig,
                           sampling: HomographySamplingConfig, device="cpu"):
    """Aggregated, thresholded and NMS'd pseudo-label heatmap: binary (H, W)
    array with ones at the surviving keypoints."""
    mean, _ = aggregate_heatmap(model, image, cfg, sampling, device=device)
    kps = extract_keypoints(mean, cfg.detection_threshold, cfg.nms_radius)
    target = np.zeros(mean.shape)
    ij = np.round(kps.xy).astype(int)
    target[ij[:, 1], ij[:, 0]] = 1.0
    return target


def pseudo_label_keypoints(model, image, cfg: AdaptationConfig,
                           sampling: HomographySamplingConfig, device="cpu") -> KeypointSet:
    """Pseudo-label points with their aggregated confidences, for export."""
    mean, _ = aggregate_heatmap(model, image, cfg, sampling, device=device)
    return extract_keypoints(mean, cfg.detection_threshold, cfg.nms_radius)


def write_label_manifest(path, entries):
    """Manifest mapping image paths to label paths, sorted for determinism."""
    payload = {str(img): str(lbl) for img, lbl in sorted(entries)}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_label_manifest(path):
    return {k: v for k, v in json.loads(Path(path).read_text()).items()}


def export_pseudo_labels(model, image_paths, out_dir, cfg: AdaptationConfig,
                         sampling: HomographySamplingConfig, device="cpu",
                         loader=None):
    """One label file per image plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if loader is None:
        loader = load_image
    entries = []
    for img_path in image_paths:
        image = loader(img_path)
        kps = pseudo_label_keypoints(model, image, cfg, sampling, device=device)
        label_path = out_dir / (Path(img_path).stem + ".txt")
        write_keypoint_file(label_path, kps)
        entries.append((img_path, label_path))
    manifest = out_dir / "manifest.json"
    write_label_manifest(manifest, entries)
    return manifest


def load_image(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise ValidationError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0
