"""Homography sampling, point/image warping and cell correspondences.

Pixel coordinate convention: x right, y down, origin at the center of the
top-left pixel. A pixel (x, y) of an H x W image lies in [0, W-1] x [0, H-1].
All homographies are 3x3 with bottom-right entry normalized to 1.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, ValidationError

MIN_HOMOGRAPHY_DET = 1e-8


@dataclass
class HomographySamplingConfig:
    max_translation: float = 0.2   # fraction of image size
    max_rotation: float = 0.5      # radians
    scale_range: tuple = (0.7, 1.4)
    max_perspective: float = 0.2   # corner displacement fraction
    seed: int = 0

    def validate(self):
        if self.scale_range[0] <= 0:
            raise ValidationError("scale_range minimum must be > 0")
        for v in (self.max_translation, self.max_rotation, self.max_perspective,
                  self.scale_range[0], self.scale_range[1]):
            if not np.isfinite(v):
                raise ValidationError("homography sampling bounds must be finite")


def normalize_homography(h):
    """Scale a 3x3 matrix so its bottom-right entry is 1."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValidationError(f"homography must be 3x3, got {h.shape}")
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateGeometryError("homography has vanishing bottom-right entry")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= MIN_HOMOGRAPHY_DET:
        raise DegenerateGeometryError("homography is not invertible")
    return h


def sample_homography(cfg: HomographySamplingConfig, rng=None):
    """Draw a random homography composed of perspective, scale, rotation and
    translation, each within the bounds of `cfg`.

    The composition is built in normalized [0, 1]^2 image coordinates around
    the image center and returned in that same normalized frame; use
    `scale_homography_to_pixels` to convert it for a concrete image size.
    Deterministic given `cfg.seed` (or the supplied generator).
    """
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    persp = rng.uniform(-cfg.max_perspective, cfg.max_perspective, size=2)
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    trans = rng.uniform(-cfg.max_translation, cfg.max_translation, size=2)

    # All components act about the image center (0.5, 0.5).
    to_center = np.array([[1, 0, -0.5], [0, 1, -0.5], [0, 0, 1]], dtype=np.float64)
    from_center = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1]], dtype=np.float64)

    h_persp = np.array([[1, 0, 0], [0, 1, 0], [persp[0], persp[1], 1]], dtype=np.float64)
    h_scale = np.diag([scale, scale, 1.0])
    c, s = np.cos(angle), np.sin(angle)
    h_rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    h_trans = np.array([[1, 0, trans[0]], [0, 1, trans[1]], [0, 0, 1]], dtype=np.float64)

    centered = h_rot @ h_scale @ h_persp
    h = h_trans @ from_center @ centered @ to_center
    return normalize_homography(h)


def scale_homography_to_pixels(h_norm, image_shape):
    """Convert a homography acting on normalized [0,1]^2 coordinates into one
    acting on pixel coordinates of an (H, W) image."""
    height, width = image_shape[:2]
    up = np.diag([float(width), float(height), 1.0])
    down = np.diag([1.0 / width, 1.0 / height, 1.0])
    return normalize_homography(up @ h_norm @ down)


def sample_homography_px(cfg: HomographySamplingConfig, image_shape, rng=None):
    """Sample a homography directly in pixel coordinates of `image_shape`."""
    return scale_homography_to_pixels(sample_homography(cfg, rng), image_shape)


def warp_points(points, h):
    """Apply a projective transform to an (N, 2) array of (x, y) points."""
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    pts = np.atleast_2d(points)
    if pts.shape[-1] != 2:
        raise ValidationError(f"points must be (N, 2), got {pts.shape}")
    h = np.asarray(h, dtype=np.float64)
    homo = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    mapped = homo @ h.T
    w = mapped[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateGeometryError("point maps to the plane at infinity")
    out = mapped[:, :2] / w[:, None]
    return out[0] if single else out


def warp_image(image, h, out_shape=None):
    """Warp an image by `h` using inverse-mapped bilinear resampling.

    Returns (warped, valid_mask). Pixels whose inverse-mapped source lies
    outside [0, W-1] x [0, H-1] are filled with 0 and marked invalid.
    """
    image = np.asarray(image, dtype=np.float64)
    src_h, src_w = image.shape[:2]
    if out_shape is None:
        out_shape = (src_h, src_w)
    out_h, out_w = out_shape

    h_inv = np.linalg.inv(normalize_homography(h))
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64),
                         np.arange(out_h, dtype=np.float64))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = warp_points(grid, h_inv)
    sx = src[:, 0].reshape(out_h, out_w)
    sy = src[:, 1].reshape(out_h, out_w)

    valid = (sx >= 0) & (sx <= src_w - 1) & (sy >= 0) & (sy <= src_h - 1)

    x0 = np.clip(np.floor(sx), 0, src_w - 1).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, src_h - 1).astype(np.int64)
    x1 = np.clip(x0 + 1, 0, src_w - 1)
    y1 = np.clip(y0 + 1, 0, src_h - 1)
    fx = np.clip(sx, 0, src_w - 1) - x0
    fy = np.clip(sy, 0, src_h - 1) - y0

    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    warped = top * (1 - fy) + bot * fy
    warped[~valid] = 0.0
    return warped, valid


def cell_centers(grid_shape, cell_size):
    """Pixel coordinates (x, y) of every cell center of an (Hc, Wc) grid."""
    hc, wc = grid_shape
    half = (cell_size - 1) / 2.0
    xs = np.arange(wc) * cell_size + half
    ys = np.arange(hc) * cell_size + half
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _nearest_cell(coord, cell_size):
    # round half-to-smaller-index for determinism
    half = (cell_size - 1) / 2.0
    u = (coord - half) / cell_size
    return np.ceil(u - 0.5).astype(np.int64)


def cell_correspondences(h, grid_shape, cell_size=8):
    """Map every cell of an (Hc, Wc) grid through `h` to its nearest warped
    cell. Returns a list of ((i, j), (i2, j2)) row/col index pairs; cells whose
    warped center lands outside the grid are dropped.
    """
    hc, wc = grid_shape
    centers = cell_centers(grid_shape, cell_size)
    warped = warp_points(centers, h)
    cols = _nearest_cell(warped[:, 0], cell_size)
    rows = _nearest_cell(warped[:, 1], cell_size)
    pairs = []
    for idx in range(len(centers)):
        i, j = idx // wc, idx % wc
        i2, j2 = int(rows[idx]), int(cols[idx])
        if 0 <= i2 < hc and 0 <= j2 < wc:
            pairs.append(((i, j), (i2, j2)))
    return pairs
