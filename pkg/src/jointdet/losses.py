"""Training losses: detector BCE over heatmaps, sparse descriptor hinge loss
with seeded correspondence sampling, composite object detection loss, and the
weighted total."""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateGeometryError, ShapeError, ValidationError
from .geometry import cell_correspondences
from .model import CELL_SIZE
from .postprocess import DETECT_STRIDES

CLIP_EPS = 1e-7

# composite object loss balance, in line with the usual three-term recipe
BOX_GAIN = 0.05
OBJ_GAIN = 1.0
CLS_GAIN = 0.5
SCALE_BALANCE = (4.0, 1.0, 0.4)
ANCHOR_MATCH_RATIO = 4.0


@dataclass
class DescriptorLossConfig:
    m_p: float = 1.0                 # positive hinge margin
    n_correspondences: int = 600
    n_non_correspondences: int = 600
    sampling_seed: int = 0

    def validate(self):
        if self.m_p <= 0:
            raise ValidationError("hinge margin must be positive")
        if self.n_correspondences < 1 or self.n_non_correspondences < 1:
            raise ValidationError("sample counts must be >= 1")


@dataclass
class LossWeights:
    w_desc: float = 1.0
    w_obj: float = 1.0

    def validate(self):
        for v in (self.w_desc, self.w_obj):
            if not np.isfinite(v) or v < 0:
                raise ValidationError("loss weights must be finite and >= 0")


def detector_loss(predicted_heatmap, target, valid_mask=None):
    """Mean binary cross-entropy over all heatmap pixels.

    Predictions are clipped to [1e-7, 1 - 1e-7] before the logarithms. When
    `valid_mask` is given, the mean runs over valid pixels only (pixels a
    warp never covered carry no signal).
    """
    if predicted_heatmap.shape != target.shape:
        raise ShapeError(f"heatmap shape {tuple(predicted_heatmap.shape)} != "
                         f"target shape {tuple(target.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise ValidationError("target heatmap must be binary")
    x = predicted_heatmap.clamp(CLIP_EPS, 1.0 - CLIP_EPS)
    bce = -(target * torch.log(x) + (1.0 - target) * torch.log(1.0 - x))
    if valid_mask is not None:
        if valid_mask.shape != target.shape:
            raise ShapeError("valid mask shape does not match target")
        mask = valid_mask.to(bce.dtype)
        return (bce * mask).sum() / mask.sum().clamp(min=1.0)
    return bce.mean()


def _as_batched(desc):
    if desc.dim() == 3:
        return desc.unsqueeze(0)
    if desc.dim() != 4:
        raise ShapeError(f"descriptor grid must be (C, Hc, Wc) or (B, C, Hc, Wc), got {tuple(desc.shape)}")
    return desc


def _flatten_cells(desc):
    # (B, C, Hc, Wc) -> (B * Hc * Wc, C) with index k * Hc * Wc + i * Wc + j
    b, c, hc, wc = desc.shape
    return desc.permute(0, 2, 3, 1).reshape(b * hc * wc, c)


def descriptor_loss(coarse_desc, coarse_desc_warped, homography,
                    cfg: DescriptorLossConfig = None, return_parts=False):
    """Sparse hinge loss over sampled descriptor pairs.

    N corresponding pairs contribute mean(max(0, m_p - d.d')) and M
    non-corresponding pairs (any warped cell other than an anchor's true
    match, across the whole batch) contribute mean(d.d'). Correspondences map
    each unwarped cell center through the pixel-coordinate `homography` to
    its nearest warped cell; anchors whose warped center leaves the grid are
    excluded. Sampling is seeded and exhaustive whenever the requested count
    reaches the number of available pairs.
    """
    cfg = cfg or DescriptorLossConfig()
    cfg.validate()
    desc = _as_batched(coarse_desc)
    desc_w = _as_batched(coarse_desc_warped)
    if desc.shape != desc_w.shape:
        raise ShapeError("descriptor grids must have identical shapes")
    b, c, hc, wc = desc.shape
    hs = np.asarray(homography, dtype=np.float64)
    if hs.ndim == 2:
        hs = np.broadcast_to(hs, (b, 3, 3))
    if hs.shape != (b, 3, 3):
        raise ShapeError(f"need one 3x3 homography per batch image, got {hs.shape}")

    anchor_idx, match_idx = [], []
    for k in range(b):
        for (i, j), (i2, j2) in cell_correspondences(hs[k], (hc, wc), CELL_SIZE):
            anchor_idx.append(k * hc * wc + i * wc + j)
            match_idx.append(k * hc * wc + i2 * wc + j2)
    if not anchor_idx:
        raise DegenerateGeometryError("homography maps every cell out of bounds")
    anchor_idx = np.asarray(anchor_idx, dtype=np.int64)
    match_idx = np.asarray(match_idx, dtype=np.int64)
    n_avail = len(anchor_idx)
    n_cells = b * hc * wc

    rng = np.random.default_rng(cfg.sampling_seed)
    if cfg.n_correspondences >= n_avail:
        corr_sel = np.arange(n_avail)
    else:
        corr_sel = rng.choice(n_avail, size=cfg.n_correspondences, replace=False)

    n_pairs_total = n_avail * (n_cells - 1)
    if n_pairs_total == 0:
        raise DegenerateGeometryError("grid too small to form non-corresponding pairs")
    if cfg.n_non_correspondences >= n_pairs_total:
        # exhaustive: every (anchor, warped cell) pair minus the true matches
        neg_anchor = np.repeat(np.arange(n_avail), n_cells)
        neg_cell = np.tile(np.arange(n_cells), n_avail)
        keep = neg_cell != match_idx[neg_anchor]
        neg_anchor, neg_cell = neg_anchor[keep], neg_cell[keep]
    else:
        m = cfg.n_non_correspondences
        neg_anchor = rng.integers(0, n_avail, size=m)
        neg_cell = rng.integers(0, n_cells, size=m)
        bad = neg_cell == match_idx[neg_anchor]
        while np.any(bad):
            neg_anchor[bad] = rng.integers(0, n_avail, size=int(bad.sum()))
            neg_cell[bad] = rng.integers(0, n_cells, size=int(bad.sum()))
            bad = neg_cell == match_idx[neg_anchor]

    flat = _flatten_cells(desc)
    flat_w = _flatten_cells(desc_w)
    d_a = flat[torch.from_numpy(anchor_idx[corr_sel])]
    d_m = flat_w[torch.from_numpy(match_idx[corr_sel])]
    corr_dots = (d_a * d_m).sum(dim=1)
    loss_corr = torch.clamp(cfg.m_p - corr_dots, min=0.0).mean()

    d_na = flat[torch.from_numpy(anchor_idx[neg_anchor])]
    d_nw = flat_w[torch.from_numpy(neg_cell)]
    loss_ncorr = (d_na * d_nw).sum(dim=1).mean()

    if return_parts:
        return loss_corr + loss_ncorr, loss_corr, loss_ncorr
    return loss_corr + loss_ncorr


def validate_box_targets(targets, num_classes):
    """Targets: per-image (n, 5) arrays of [class_id, cx, cy, w, h], all box
    values normalized to [0, 1] relative to image size."""
    for t in targets:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 5)
        if len(t) == 0:
            continue
        cls = t[:, 0]
        if np.any(cls < 0) or np.any(cls >= num_classes) or np.any(cls != np.round(cls)):
            raise ValidationError("box class ids must be integers < num_classes")
        lo = t[:, 1:3] - t[:, 3:5] / 2
        hi = t[:, 1:3] + t[:, 3:5] / 2
        if np.any(lo < -1e-6) or np.any(hi > 1 + 1e-6) or np.any(t[:, 3:5] <= 0):
            raise ValidationError("box coordinates must lie inside [0, 1]")


def _ciou(pred, gt):
    """Complete IoU between (n, 4) center-format boxes, differentiable."""
    px1, py1 = pred[:, 0] - pred[:, 2] / 2, pred[:, 1] - pred[:, 3] / 2
    px2, py2 = pred[:, 0] + pred[:, 2] / 2, pred[:, 1] + pred[:, 3] / 2
    gx1, gy1 = gt[:, 0] - gt[:, 2] / 2, gt[:, 1] - gt[:, 3] / 2
    gx2, gy2 = gt[:, 0] + gt[:, 2] / 2, gt[:, 1] + gt[:, 3] / 2

    inter = (torch.min(px2, gx2) - torch.max(px1, gx1)).clamp(min=0) * \
            (torch.min(py2, gy2) - torch.max(py1, gy1)).clamp(min=0)
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    iou = inter / (union + 1e-9)

    cw = torch.max(px2, gx2) - torch.min(px1, gx1)
    ch = torch.max(py2, gy2) - torch.min(py1, gy1)
    c2 = cw ** 2 + ch ** 2 + 1e-9
    rho2 = (pred[:, 0] - gt[:, 0]) ** 2 + (pred[:, 1] - gt[:, 1]) ** 2
    v = (4 / np.pi ** 2) * (torch.atan(gt[:, 2] / (gt[:, 3] + 1e-9))
                            - torch.atan(pred[:, 2] / (pred[:, 3] + 1e-9))) ** 2
    # alpha kept differentiable so the loss gradient is exactly the gradient
    # of the value being reported
    alpha = v / (1 - iou + v + 1e-9)
    return iou - rho2 / c2 - alpha * v


def assign_targets(targets, anchors, grid_shapes, image_shape):
    """Anchor assignment: each ground-truth box becomes a positive at the grid
    cell containing its center, on every anchor whose w/h ratio to the box is
    within ANCHOR_MATCH_RATIO. Returns per-scale index arrays
    (img, anchor, row, col) plus matched class ids and pixel-space boxes."""
    img_h, img_w = image_shape
    per_scale = []
    for s, (anchor_set, (hs, ws), stride) in enumerate(zip(anchors, grid_shapes, DETECT_STRIDES)):
        b_idx, a_idx, rows, cols, cls_ids, gt_boxes = [], [], [], [], [], []
        anchor_arr = np.asarray(anchor_set, dtype=np.float64)
        for b, t in enumerate(targets):
            t = np.asarray(t, dtype=np.float64).reshape(-1, 5)
            for row_t in t:
                cls, cx, cy, w, h = row_t
                box_px = np.array([cx * img_w, cy * img_h, w * img_w, h * img_h])
                ratio = box_px[2:] / anchor_arr
                match = np.maximum(ratio, 1.0 / ratio).max(axis=1) < ANCHOR_MATCH_RATIO
                if not match.any():
                    continue
                col = min(int(box_px[0] / stride), ws - 1)
                row = min(int(box_px[1] / stride), hs - 1)
                for a in np.nonzero(match)[0]:
                    b_idx.append(b)
                    a_idx.append(int(a))
                    rows.append(row)
                    cols.append(col)
                    cls_ids.append(int(cls))
                    gt_boxes.append(box_px)
        per_scale.append((
            np.asarray(b_idx, dtype=np.int64), np.asarray(a_idx, dtype=np.int64),
            np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64),
            np.asarray(cls_ids, dtype=np.int64),
            np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)))
    return per_scale


def object_loss(object_raw, targets, anchors, num_classes, return_parts=False):
    """Composite detection loss: objectness BCE over every prediction, class
    BCE and complete-IoU box regression over assigned positives. Images with
    no boxes contribute only the objectness term."""
    validate_box_targets(targets, num_classes)
    grid_shapes = [tuple(r.shape[2:4]) for r in object_raw]
    img_shape = (grid_shapes[0][0] * DETECT_STRIDES[0], grid_shapes[0][1] * DETECT_STRIDES[0])
    assigned = assign_targets(targets, anchors, grid_shapes, img_shape)

    device = object_raw[0].device
    zero = torch.zeros((), device=device)
    loss_obj = zero.clone()
    box_terms, cls_terms = [], []
    bce = torch.nn.functional.binary_cross_entropy_with_logits

    for raw, anchor_set, stride, balance, (b_idx, a_idx, rows, cols, cls_ids, gt_boxes) \
            in zip(object_raw, anchors, DETECT_STRIDES, SCALE_BALANCE, assigned):
        obj_target = torch.zeros_like(raw[..., 4])
        if len(b_idx):
            bi = torch.from_numpy(b_idx)
            ai = torch.from_numpy(a_idx)
            ri = torch.from_numpy(rows)
            ci = torch.from_numpy(cols)
            pred = raw[bi, ai, ri, ci]
            sig = torch.sigmoid(pred[:, :4])
            anchor_wh = torch.as_tensor(np.asarray(anchor_set, dtype=np.float64),
                                        dtype=raw.dtype, device=device)[ai]
            px = (sig[:, 0] * 2.0 - 0.5 + ci.to(raw.dtype)) * stride
            py = (sig[:, 1] * 2.0 - 0.5 + ri.to(raw.dtype)) * stride
            pw = (sig[:, 2] * 2.0) ** 2 * anchor_wh[:, 0]
            ph = (sig[:, 3] * 2.0) ** 2 * anchor_wh[:, 1]
            pred_box = torch.stack([px, py, pw, ph], dim=1)
            gt = torch.as_tensor(gt_boxes, dtype=raw.dtype, device=device)
            box_terms.append(1.0 - _ciou(pred_box, gt))

            cls_target = torch.zeros((len(b_idx), num_classes), dtype=raw.dtype, device=device)
            cls_target[torch.arange(len(b_idx)), torch.from_numpy(cls_ids)] = 1.0
            cls_terms.append(bce(pred[:, 5:], cls_target, reduction="none").reshape(-1))

            obj_target[bi, ai, ri, ci] = 1.0
        loss_obj = loss_obj + balance * bce(raw[..., 4], obj_target)

    loss_box = torch.cat(box_terms).mean() if box_terms else zero.clone()
    loss_cls = torch.cat(cls_terms).mean() if cls_terms else zero.clone()
    total = BOX_GAIN * loss_box + OBJ_GAIN * loss_obj + CLS_GAIN * loss_cls
    if return_parts:
        return total, loss_box, loss_obj, loss_cls
    return total


def total_loss(det, det_warp, desc, obj, weights: LossWeights = None):
    """Weighted sum: det + det_warp + w_desc * desc + w_obj * obj."""
    weights = weights or LossWeights()
    weights.validate()
    for name, v in (("det", det), ("det_warp", det_warp), ("desc", desc), ("obj", obj)):
        val = float(v.detach() if torch.is_tensor(v) else v)
        if not np.isfinite(val):
            raise ValidationError(f"{name} loss is not finite ({val})")
    return det + det_warp + weights.w_desc * desc + weights.w_obj * obj
