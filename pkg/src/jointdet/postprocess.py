"""Raw network outputs -> usable artifacts: keypoints via grid NMS,
descriptors interpolated at keypoint sites, decoded object boxes, and
dynamic-object keypoint filtering."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, ValidationError
from .model import CELL_SIZE

DETECT_STRIDES = (8, 16, 32)

# KITTI object classes; every movable class is flagged dynamic.
KITTI_CLASS_NAMES = ("pedestrian", "person_sitting", "car", "van", "truck",
                     "cyclist", "tram", "misc")
KITTI_DYNAMIC_FLAGS = (True, True, True, True, True, True, True, False)


@dataclass
class KeypointSet:
    """Keypoints as (x, y) pixel coordinates with confidences and optional
    index-aligned unit-norm descriptors."""
    xy: np.ndarray                      # (N, 2) float
    confidence: np.ndarray              # (N,)
    descriptors: np.ndarray = None      # (N, D) or None

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if len(self.xy) != len(self.confidence):
            raise ShapeError("keypoint coordinates and confidences differ in length")
        if self.descriptors is not None:
            self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
            if len(self.descriptors) != len(self.xy):
                raise ShapeError("descriptor count does not match keypoint count")

    def __len__(self):
        return len(self.xy)

    def select(self, index):
        return KeypointSet(
            self.xy[index], self.confidence[index],
            None if self.descriptors is None else self.descriptors[index])

    @staticmethod
    def empty(descriptor_dim=None):
        desc = None if descriptor_dim is None else np.zeros((0, descriptor_dim))
        return KeypointSet(np.zeros((0, 2)), np.zeros(0), desc)


@dataclass
class DetectionSet:
    """Class-labeled axis-aligned boxes (x1, y1, x2, y2) with confidences."""
    boxes: np.ndarray                   # (N, 4) pixel corners
    class_ids: np.ndarray               # (N,) int
    confidences: np.ndarray             # (N,)
    class_names: tuple = KITTI_CLASS_NAMES
    dynamic_flags: tuple = KITTI_DYNAMIC_FLAGS

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if not (len(self.boxes) == len(self.class_ids) == len(self.confidences)):
            raise ShapeError("box, class and confidence counts differ")
        if len(self.boxes) and (np.any(self.boxes[:, 0] >= self.boxes[:, 2])
                                or np.any(self.boxes[:, 1] >= self.boxes[:, 3])):
            raise ValidationError("boxes must satisfy x1 < x2 and y1 < y2")

    def __len__(self):
        return len(self.boxes)

    def dynamic_boxes(self):
        if len(self.boxes) == 0:
            return self.boxes[:0]
        flags = np.asarray([self.dynamic_flags[c] for c in self.class_ids], dtype=bool)
        return self.boxes[flags]

    @staticmethod
    def empty(class_names=KITTI_CLASS_NAMES, dynamic_flags=KITTI_DYNAMIC_FLAGS):
        return DetectionSet(np.zeros((0, 4)), np.zeros(0, dtype=np.int64),
                            np.zeros(0), class_names, dynamic_flags)


def extract_keypoints(heatmap, conf_threshold=0.015, nms_radius=8, max_points=None):
    """Greedy grid NMS on a [0, 1] heatmap.

    Keeps pixels above `conf_threshold` so that no two kept points lie within
    `nms_radius` of each other (Chebyshev distance), picking higher-confidence
    points first; ties break by (y, x) lexicographic order. Truncates to
    `max_points` by descending confidence.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim != 2:
        raise ShapeError(f"heatmap must be 2-D, got shape {heatmap.shape}")
    h, w = heatmap.shape
    ys, xs = np.nonzero(heatmap > conf_threshold)
    if len(xs) == 0:
        return KeypointSet.empty()
    conf = heatmap[ys, xs]
    order = np.lexsort((xs, ys, -conf))

    r = int(nms_radius)
    alive = np.ones((h + 2 * r, w + 2 * r), dtype=bool)
    keep = []
    for idx in order:
        y, x = ys[idx] + r, xs[idx] + r
        if alive[y, x]:
            keep.append(idx)
            alive[y - r:y + r + 1, x - r:x + r + 1] = False
    if max_points is not None:
        keep = keep[:max_points]
    keep = np.asarray(keep, dtype=np.int64)
    xy = np.stack([xs[keep], ys[keep]], axis=1).astype(np.float64)
    return KeypointSet(xy, conf[keep])


def sample_descriptors(coarse_descriptors, keypoints: KeypointSet) -> KeypointSet:
    """Attach descriptors by bilinear interpolation of the coarse (D, Hc, Wc)
    grid at each keypoint, then renormalize to unit norm.

    Cell (i, j) is anchored at pixel (8j + 3.5, 8i + 3.5), the center of its
    8x8 block, so the interpolation agrees with a dense x8 bilinear upsample
    of the grid; a keypoint sitting exactly on a cell center receives that
    cell's vector unchanged.
    """
    coarse = np.asarray(coarse_descriptors, dtype=np.float64)
    if coarse.ndim != 3:
        raise ShapeError(f"coarse descriptors must be (D, Hc, Wc), got {coarse.shape}")
    d, hc, wc = coarse.shape
    if len(keypoints) == 0:
        return KeypointSet(keypoints.xy, keypoints.confidence, np.zeros((0, d)))

    half = (CELL_SIZE - 1) / 2.0
    u = (keypoints.xy[:, 0] - half) / CELL_SIZE
    v = (keypoints.xy[:, 1] - half) / CELL_SIZE
    u = np.clip(u, 0, wc - 1)
    v = np.clip(v, 0, hc - 1)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, wc - 1)
    y1 = np.minimum(y0 + 1, hc - 1)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]

    grid = coarse.transpose(1, 2, 0)    # (Hc, Wc, D)
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    desc = top * (1 - fy) + bot * fy
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = desc / np.maximum(norms, 1e-12)
    return KeypointSet(keypoints.xy, keypoints.confidence, desc)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _iou_xyxy(box, boxes):
    ix1 = np.maximum(box[0], boxes[:, 0])
    iy1 = np.maximum(box[1], boxes[:, 1])
    ix2 = np.minimum(box[2], boxes[:, 2])
    iy2 = np.minimum(box[3], boxes[:, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / np.maximum(area + areas - inter, 1e-12)


def decode_single_prediction(raw_vec, anchor_wh, col, row, stride):
    """Decode one (5 + nc) raw vector into center xy, wh and scores."""
    sig = _sigmoid(np.asarray(raw_vec, dtype=np.float64))
    cx = (sig[0] * 2.0 - 0.5 + col) * stride
    cy = (sig[1] * 2.0 - 0.5 + row) * stride
    bw = (sig[2] * 2.0) ** 2 * anchor_wh[0]
    bh = (sig[3] * 2.0) ** 2 * anchor_wh[1]
    return cx, cy, bw, bh, sig[4], sig[5:]


def decode_boxes(object_raw, anchors, conf_threshold=0.25, iou_threshold=0.45,
                 class_names=KITTI_CLASS_NAMES,
                 dynamic_flags=KITTI_DYNAMIC_FLAGS) -> DetectionSet:
    """Anchor-relative offsets -> pixel boxes with class-wise greedy IoU NMS.

    `object_raw` is the per-scale list of (na, Hs, Ws, 5 + nc) arrays from a
    single-image forward pass; per-class confidence is objectness x class
    score with the best class kept per prediction.
    """
    cand_boxes, cand_cls, cand_conf = [], [], []
    for raw, anchor_set, stride in zip(object_raw, anchors, DETECT_STRIDES):
        raw = np.asarray(raw, dtype=np.float64)
        na, hs, ws, no = raw.shape
        sig = _sigmoid(raw)
        obj = sig[..., 4]
        cls = sig[..., 5:]
        best_cls = cls.argmax(axis=-1)
        best_conf = obj * np.take_along_axis(cls, best_cls[..., None], axis=-1)[..., 0]
        sel = np.nonzero(best_conf > conf_threshold)
        if len(sel[0]) == 0:
            continue
        a_idx, rows, cols = sel
        s = sig[a_idx, rows, cols]
        anchor_wh = np.asarray(anchor_set, dtype=np.float64)[a_idx]
        cx = (s[:, 0] * 2.0 - 0.5 + cols) * stride
        cy = (s[:, 1] * 2.0 - 0.5 + rows) * stride
        bw = (s[:, 2] * 2.0) ** 2 * anchor_wh[:, 0]
        bh = (s[:, 3] * 2.0) ** 2 * anchor_wh[:, 1]
        cand_boxes.append(np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1))
        cand_cls.append(best_cls[a_idx, rows, cols])
        cand_conf.append(best_conf[a_idx, rows, cols])

    if not cand_boxes:
        return DetectionSet.empty(class_names, dynamic_flags)
    boxes = np.concatenate(cand_boxes)
    cls_ids = np.concatenate(cand_cls)
    confs = np.concatenate(cand_conf)
    good = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, cls_ids, confs = boxes[good], cls_ids[good], confs[good]

    keep_all = []
    for c in np.unique(cls_ids):
        idx = np.nonzero(cls_ids == c)[0]
        idx = idx[np.argsort(-confs[idx], kind="stable")]
        while len(idx):
            best = idx[0]
            keep_all.append(best)
            if len(idx) == 1:
                break
            rest = idx[1:]
            ious = _iou_xyxy(boxes[best], boxes[rest])
            idx = rest[ious <= iou_threshold]
    keep_all = sorted(keep_all, key=lambda i: -confs[i])
    return DetectionSet(boxes[keep_all], cls_ids[keep_all], confs[keep_all],
                        class_names, dynamic_flags)


def filter_dynamic_keypoints(kps: KeypointSet, dets: DetectionSet) -> KeypointSet:
    """Drop every keypoint lying inside (edges inclusive) any detection box
    whose class is flagged dynamic. Survivor order is preserved."""
    boxes = dets.dynamic_boxes()
    if len(boxes) == 0 or len(kps) == 0:
        return kps
    x = kps.xy[:, 0][:, None]
    y = kps.xy[:, 1][:, None]
    inside = ((x >= boxes[:, 0]) & (x <= boxes[:, 2])
              & (y >= boxes[:, 1]) & (y <= boxes[:, 3])).any(axis=1)
    return kps.select(~inside)


def keypoints_from_raw(raw, conf_threshold=0.015, nms_radius=8, max_points=None) -> KeypointSet:
    """Single-image raw output (numpy, no batch dim) -> keypoints with
    descriptors attached."""
    import torch

    from .model import heatmap_from_logits
    heat = heatmap_from_logits(torch.as_tensor(np.ascontiguousarray(raw.detector_logits)))
    kps = extract_keypoints(heat.numpy(), conf_threshold, nms_radius, max_points)
    return sample_descriptors(raw.coarse_descriptors, kps)


def write_keypoint_file(path, kps: KeypointSet):
    """Interchange format: one "x y confidence d0 ... d{D-1}" line per point."""
    with open(path, "w") as fh:
        for i in range(len(kps)):
            parts = [f"{kps.xy[i, 0]:.9g}", f"{kps.xy[i, 1]:.9g}", f"{kps.confidence[i]:.9g}"]
            if kps.descriptors is not None:
                parts.extend(f"{v:.9g}" for v in kps.descriptors[i])
            fh.write(" ".join(parts) + "\n")


def read_keypoint_file(path) -> KeypointSet:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split()])
    if not rows:
        return KeypointSet.empty()
    width = len(rows[0])
    if any(len(r) != width for r in rows) or width < 3:
        raise ContractError(f"malformed keypoint file {path}")
    arr = np.asarray(rows, dtype=np.float64)
    desc = arr[:, 3:] if width > 3 else None
    return KeypointSet(arr[:, :2], arr[:, 2], desc)
