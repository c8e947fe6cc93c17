"""Dataset ingestion and augmentation: label file formats, mosaic and
photometric augmentation, KITTI odometry sequences, and the training
datasets built on top of them."""

import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import IngestionError, ValidationError
from .labeling import generate_synthetic, load_image, random_kind
from .postprocess import KeypointSet, read_keypoint_file, write_keypoint_file


@dataclass
class SampleRecord:
    image_path: str
    keypoint_label_path: str = None
    box_label_path: str = None
    split: str = "train"

    def check_exists(self):
        for p in (self.image_path, self.keypoint_label_path, self.box_label_path):
            if p is not None and not Path(p).exists():
                raise IngestionError(f"referenced file does not exist: {p}")


# ---------------------------------------------------------------------------
# label files


def write_box_label_file(path, boxes, num_classes=None):
    """One "class_id cx cy w h" line per object, all normalized to [0, 1]."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    validate_boxes(boxes, num_classes)
    with open(path, "w") as fh:
        for cls, cx, cy, w, h in boxes:
            fh.write(f"{int(cls)} {cx:.9g} {cy:.9g} {w:.9g} {h:.9g}\n")


def read_box_label_file(path, num_classes=None):
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) != 5:
                raise IngestionError(f"{path}:{n}: expected 5 fields, got {len(toks)}")
            try:
                rows.append([float(t) for t in toks])
            except ValueError as exc:
                raise IngestionError(f"{path}:{n}: {exc}") from exc
    boxes = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    validate_boxes(boxes, num_classes)
    return boxes


def validate_boxes(boxes, num_classes=None):
    if len(boxes) == 0:
        return
    cls = boxes[:, 0]
    if np.any(cls != np.round(cls)) or np.any(cls < 0):
        raise ValidationError("class ids must be non-negative integers")
    if num_classes is not None and np.any(cls >= num_classes):
        raise ValidationError(f"class id exceeds num_classes={num_classes}")
    lo = boxes[:, 1:3] - boxes[:, 3:5] / 2
    hi = boxes[:, 1:3] + boxes[:, 3:5] / 2
    if np.any(lo < -1e-6) or np.any(hi > 1 + 1e-6):
        raise ValidationError("box extents must stay inside [0, 1]")
    if np.any(boxes[:, 3:5] <= 0):
        raise ValidationError("box sizes must be positive")


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class PhotometricConfig:
    max_brightness: float = 0.1
    contrast_range: tuple = (0.8, 1.2)
    max_blur_sigma: float = 1.5


def apply_photometric(image, brightness=0.0, contrast=1.0, blur_sigma=0.0):
    """Deterministic photometric transform; labels are untouched by design."""
    out = np.asarray(image, dtype=np.float64)
    if blur_sigma > 0:
        k = max(3, int(2 * math.ceil(2 * blur_sigma) + 1))
        out = cv2.GaussianBlur(out, (k, k), blur_sigma)
    if contrast != 1.0:
        out = (out - 0.5) * contrast + 0.5
    if brightness != 0.0:
        out = out + brightness
    return np.clip(out, 0.0, 1.0)


def photometric_augment(image, rng, cfg: PhotometricConfig = None):
    """Random brightness, contrast and blur within the configured bounds."""
    cfg = cfg or PhotometricConfig()
    brightness = rng.uniform(-cfg.max_brightness, cfg.max_brightness)
    contrast = rng.uniform(*cfg.contrast_range)
    blur = rng.uniform(0.0, cfg.max_blur_sigma)
    return apply_photometric(image, brightness, contrast, blur)


@dataclass
class QuadrantPlacement:
    """Affine source -> mosaic mapping for one quadrant: out = src * scale + offset."""
    scale: float
    offset: np.ndarray       # (2,)
    bounds: np.ndarray       # (x0, y0, x1, y1) of the quadrant in the mosaic


@dataclass
class MosaicResult:
    image: np.ndarray
    points: KeypointSet
    boxes: np.ndarray        # (n, 5) [class, cx, cy, w, h] normalized to mosaic
    placements: list         # 4 x QuadrantPlacement, TL/TR/BL/BR


def mosaic_augment(samples, out_shape, rng) -> MosaicResult:
    """Compose four (image, points, boxes) samples into one canvas around a
    random center split. Each quadrant is covered completely by a scaled crop
    of its source image, so the canvas has no padding pixels. Keypoints
    falling outside their quadrant are dropped; boxes are clipped."""
    if len(samples) != 4:
        raise ValidationError("mosaic needs exactly four samples")
    out_h, out_w = out_shape
    cx = int(rng.uniform(0.3, 0.7) * out_w)
    cy = int(rng.uniform(0.3, 0.7) * out_h)
    quads = [(0, 0, cx, cy), (cx, 0, out_w, cy), (0, cy, cx, out_h), (cx, cy, out_w, out_h)]

    canvas = np.zeros((out_h, out_w, 3))
    merged_pts, merged_conf, merged_boxes, placements = [], [], [], []
    for (image, points, boxes), (x0, y0, x1, y1) in zip(samples, quads):
        image = np.asarray(image, dtype=np.float64)
        qh, qw = y1 - y0, x1 - x0
        src_h, src_w = image.shape[:2]
        scale = max(qw / src_w, qh / src_h)
        scaled_w, scaled_h = int(math.ceil(src_w * scale)), int(math.ceil(src_h * scale))
        ox = rng.integers(0, scaled_w - qw + 1)
        oy = rng.integers(0, scaled_h - qh + 1)
        resized = cv2.resize(image, (scaled_w, scaled_h), interpolation=cv2.INTER_LINEAR)
        canvas[y0:y1, x0:x1] = resized[oy:oy + qh, ox:ox + qw]
        offset = np.array([x0 - ox, y0 - oy], dtype=np.float64)
        placements.append(QuadrantPlacement(scale, offset,
                                            np.array([x0, y0, x1, y1], dtype=np.float64)))

        if len(points):
            xy = points.xy * scale + offset
            inside = ((xy[:, 0] >= x0) & (xy[:, 0] <= x1 - 1)
                      & (xy[:, 1] >= y0) & (xy[:, 1] <= y1 - 1))
            merged_pts.append(xy[inside])
            merged_conf.append(points.confidence[inside])

        for cls, bcx, bcy, bw, bh in np.asarray(boxes, dtype=np.float64).reshape(-1, 5):
            bx0 = (bcx - bw / 2) * src_w * scale + offset[0]
            bx1 = (bcx + bw / 2) * src_w * scale + offset[0]
            by0 = (bcy - bh / 2) * src_h * scale + offset[1]
            by1 = (bcy + bh / 2) * src_h * scale + offset[1]
            bx0, bx1 = max(bx0, x0), min(bx1, x1 - 1)
            by0, by1 = max(by0, y0), min(by1, y1 - 1)
            if bx1 - bx0 >= 2 and by1 - by0 >= 2:
                merged_boxes.append([cls, (bx0 + bx1) / 2 / out_w, (by0 + by1) / 2 / out_h,
                                     (bx1 - bx0) / out_w, (by1 - by0) / out_h])

    pts = (KeypointSet(np.concatenate(merged_pts), np.concatenate(merged_conf))
           if merged_pts else KeypointSet.empty())
    boxes = np.asarray(merged_boxes, dtype=np.float64).reshape(-1, 5)
    return MosaicResult(canvas, pts, boxes, placements)


def letterbox(image, out_shape, fill=0.0):
    """Pad-to-shape resize, retained only for padding-artifact ablations."""
    out_h, out_w = out_shape
    src_h, src_w = image.shape[:2]
    scale = min(out_w / src_w, out_h / src_h)
    new_w, new_h = int(round(src_w * scale)), int(round(src_h * scale))
    resized = cv2.resize(image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    canvas = np.full((out_h, out_w, 3), fill, dtype=np.float64)
    x0 = (out_w - new_w) // 2
    y0 = (out_h - new_h) // 2
    canvas[y0:y0 + new_h, x0:x0 + new_w] = resized
    return canvas, scale, (x0, y0)


# ---------------------------------------------------------------------------
# KITTI odometry layout


def load_kitti_sequence(root, sequence_id):
    """Returns (frame paths in index order, CameraIntrinsics, gt pose array).

    Layout: root/sequences/<id>/{image_2|image_0}/*.png, calib.txt with
    projection matrices, and root/poses/<id>.txt with one row-major 3x4 pose
    (12 floats) per frame.
    """
    from .vo import CameraIntrinsics

    seq_dir = Path(root) / "sequences" / str(sequence_id)
    image_dir = None
    for cand in ("image_2", "image_0"):
        if (seq_dir / cand).is_dir():
            image_dir = seq_dir / cand
            break
    if image_dir is None:
        raise IngestionError(f"no image directory under {seq_dir}")
    frames = sorted(p for p in image_dir.iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".ppm"))
    if not frames:
        raise IngestionError(f"no image files in {image_dir}")

    calib_path = seq_dir / "calib.txt"
    if not calib_path.exists():
        raise IngestionError(f"missing calibration file {calib_path}")
    key = "P2" if image_dir.name == "image_2" else "P0"
    proj = parse_kitti_calib(calib_path, key)
    intrinsics = CameraIntrinsics(fx=proj[0, 0], fy=proj[1, 1],
                                  cx=proj[0, 2], cy=proj[1, 2])

    pose_path = Path(root) / "poses" / f"{sequence_id}.txt"
    if not pose_path.exists():
        raise IngestionError(f"missing pose file {pose_path}")
    poses = read_pose_file(pose_path)
    if len(poses) != len(frames):
        raise IngestionError(f"{len(frames)} frames but {len(poses)} poses "
                             f"for sequence {sequence_id}")
    return frames, intrinsics, poses


def parse_kitti_calib(path, key):
    with open(path) as fh:
        for line in fh:
            if line.startswith(key + ":") or line.startswith(key + " "):
                vals = np.fromstring(line.split(":", 1)[-1], sep=" ")
                if vals.size != 12:
                    raise IngestionError(f"{path}: {key} line has {vals.size} values, want 12")
                return vals.reshape(3, 4)
    raise IngestionError(f"{path}: no {key} projection matrix found")


def read_pose_file(path):
    """(N, 3, 4) array from the 12-floats-per-line trajectory format."""
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            vals = np.fromstring(line, sep=" ")
            if vals.size != 12:
                raise IngestionError(f"{path}:{n}: expected 12 floats, got {vals.size}")
            rows.append(vals.reshape(3, 4))
    if not rows:
        raise IngestionError(f"{path}: empty pose file")
    return np.stack(rows)


def write_pose_file(path, poses):
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 3, 4)
    with open(path, "w") as fh:
        for p in poses:
            fh.write(" ".join(f"{v:.9g}" for v in p.ravel()) + "\n")


# ---------------------------------------------------------------------------
# training datasets


class SyntheticShapes:
    """Deterministic lazily-rendered corpus: sample i of a given seed is
    always the same image/labels pair."""

    def __init__(self, count, seed=0, size=64, noise=True):
        self.count = count
        self.seed = seed
        self.size = size
        self.noise = noise

    def __len__(self):
        return self.count

    def __getitem__(self, idx):
        if not 0 <= idx < self.count:
            raise IndexError(idx)
        rng = np.random.default_rng([self.seed, idx])
        sample = generate_synthetic(random_kind(rng), rng, size=self.size,
                                    noise=self.noise)
        boxes = np.zeros((0, 5))
        return sample.image, sample.points, boxes


class LabeledImageFolder:
    """Images with keypoint label files (from a pseudo-label manifest) and
    optional per-image box label files."""

    def __init__(self, records, num_classes=None):
        self.records = list(records)
        self.num_classes = num_classes
        for rec in self.records:
            rec.check_exists()

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        rec = self.records[idx]
        image = load_image(rec.image_path)
        if rec.keypoint_label_path is not None:
            points = read_keypoint_file(rec.keypoint_label_path)
        else:
            points = KeypointSet.empty()
        if rec.box_label_path is not None:
            boxes = read_box_label_file(rec.box_label_path, self.num_classes)
        else:
            boxes = np.zeros((0, 5))
        return image, points, boxes


def records_from_manifest(manifest_path, box_dir=None, split="train"):
    from .labeling import read_label_manifest
    records = []
    for img, lbl in sorted(read_label_manifest(manifest_path).items()):
        box_path = None
        if box_dir is not None:
            cand = Path(box_dir) / (Path(img).stem + ".txt")
            box_path = str(cand) if cand.exists() else None
        records.append(SampleRecord(img, lbl, box_path, split))
    return records


def export_synthetic_dataset(out_dir, count, seed=0, size=64, noise=True):
    """Materialize a synthetic corpus: images, point label files, manifest."""
    from .labeling import write_label_manifest

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "points").mkdir(parents=True, exist_ok=True)
    dataset = SyntheticShapes(count, seed=seed, size=size, noise=noise)
    entries = []
    for i in range(count):
        image, points, _ = dataset[i]
        img_path = out_dir / "images" / f"{i:06d}.png"
        lbl_path = out_dir / "points" / f"{i:06d}.txt"
        cv2.imwrite(str(img_path), (image[:, :, ::-1] * 255).round().astype(np.uint8))
        write_keypoint_file(lbl_path, points)
        entries.append((img_path, lbl_path))
    manifest = out_dir / "manifest.json"
    write_label_manifest(manifest, entries)
    return manifest
