"""HPatches-style metrics: repeatability, homography estimation accuracy,
nearest-neighbor mAP and matching score, plus the mutual-NN matcher and the
scene-level evaluation driver."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import (ContractError, DegenerateGeometryError, IngestionError,
                     UndefinedMetricError)
from .geometry import warp_points
from .model import run_inference
from .postprocess import KeypointSet, keypoints_from_raw


@dataclass
class MatchSet:
    pairs: list                  # (index_a, index_b, descriptor_distance)
    method: str = "mutual_nn"

    def indices(self):
        ia = np.asarray([p[0] for p in self.pairs], dtype=np.int64)
        ib = np.asarray([p[1] for p in self.pairs], dtype=np.int64)
        return ia, ib


@dataclass
class EvalConfig:
    resolution: tuple = (256, 320)      # (H, W)
    max_points: int = 300
    nms_radius: int = 8
    correct_dist_eps: float = 3.0
    homography_eps_list: tuple = (1.0, 3.0, 5.0)
    conf_threshold: float = 0.015
    seed: int = 0


def repeatability_preset():
    return EvalConfig(resolution=(256, 320), max_points=300)


def homography_preset():
    return EvalConfig(resolution=(320, 480), max_points=1000)


def _require_descriptors(*sets):
    for s in sets:
        if s.descriptors is None:
            raise ContractError("keypoints carry no descriptors")


def match_descriptors(a: KeypointSet, b: KeypointSet, ratio=None) -> MatchSet:
    """Mutual nearest neighbors under Euclidean descriptor distance, ties
    broken toward the smaller index. Optional Lowe ratio test on top."""
    _require_descriptors(a, b)
    if len(a) == 0 or len(b) == 0:
        return MatchSet([])
    dists = np.linalg.norm(a.descriptors[:, None, :] - b.descriptors[None, :, :], axis=2)
    nn_ab = dists.argmin(axis=1)
    nn_ba = dists.argmin(axis=0)
    pairs = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        if ratio is not None and len(b) > 1:
            row = dists[i].copy()
            row[j] = np.inf
            if dists[i, j] >= ratio * row.min():
                continue
        pairs.append((i, int(j), float(dists[i, j])))
    return MatchSet(pairs)


def _inbounds(xy, shape):
    if shape is None:
        return np.ones(len(xy), dtype=bool)
    h, w = shape[:2]
    return ((xy[:, 0] >= 0) & (xy[:, 0] <= w - 1)
            & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1))


def _count_repeated(src: KeypointSet, dst: KeypointSet, h, eps, dst_shape):
    """(repeated, counted): src points whose warp lands inside dst's bounds,
    and how many of those lie within eps of some dst point."""
    if len(src) == 0:
        return 0, 0
    warped = warp_points(src.xy, h)
    valid = _inbounds(warped, dst_shape)
    counted = int(valid.sum())
    if counted == 0 or len(dst) == 0:
        return 0, counted
    d = np.linalg.norm(warped[valid][:, None, :] - dst.xy[None, :, :], axis=2)
    repeated = int((d.min(axis=1) <= eps).sum())
    return repeated, counted


def repeatability(kps_a: KeypointSet, kps_b: KeypointSet, h, eps=3.0,
                  shape_a=None, shape_b=None):
    """Symmetric ratio of re-detected keypoints: a point counts as repeated
    when its warped position lies within eps of a point detected in the other
    frame; only points whose warp lands in-bounds enter numerator and
    denominator."""
    h = np.asarray(h, dtype=np.float64)
    rep_a, n_a = _count_repeated(kps_a, kps_b, h, eps, shape_b)
    rep_b, n_b = _count_repeated(kps_b, kps_a, np.linalg.inv(h), eps, shape_a)
    if n_a + n_b == 0:
        raise UndefinedMetricError("no keypoints to evaluate repeatability on")
    return (rep_a + rep_b) / (n_a + n_b)


@dataclass
class HomographyEstimate:
    correct: dict                # eps -> bool
    mean_corner_error: float
    estimated: np.ndarray = None
    n_matches: int = 0
    degenerate: bool = False


def homography_estimation(kps_a: KeypointSet, kps_b: KeypointSet, true_h,
                          image_shape, eps_list=(1.0, 3.0, 5.0),
                          ratio=None, seed=0) -> HomographyEstimate:
    """Estimate a homography from descriptor matches (robust DLT: RANSAC with
    3 px reprojection threshold, 2000 iterations, least-squares refit) and
    judge it by mean warped-corner distance against the true one."""
    matches = match_descriptors(kps_a, kps_b, ratio=ratio)
    n = len(matches.pairs)
    if n < 4:
        return HomographyEstimate({float(e): False for e in eps_list},
                                  float("inf"), None, n, degenerate=True)
    ia, ib = matches.indices()
    cv2.setRNGSeed(seed)
    est, _ = cv2.findHomography(kps_a.xy[ia], kps_b.xy[ib], cv2.RANSAC,
                                ransacReprojThreshold=3.0, maxIters=2000)
    if est is None:
        return HomographyEstimate({float(e): False for e in eps_list},
                                  float("inf"), None, n, degenerate=True)
    h_img, w_img = image_shape[:2]
    corners = np.array([[0, 0], [w_img - 1, 0], [w_img - 1, h_img - 1], [0, h_img - 1]],
                       dtype=np.float64)
    try:
        err = np.linalg.norm(warp_points(corners, est) - warp_points(corners, true_h),
                             axis=1).mean()
    except DegenerateGeometryError:
        return HomographyEstimate({float(e): False for e in eps_list},
                                  float("inf"), est, n, degenerate=True)
    return HomographyEstimate({float(e): bool(err <= e) for e in eps_list},
                              float(err), est, n)


def nn_map(kps_a: KeypointSet, kps_b: KeypointSet, h, eps=3.0):
    """Average precision of the nearest-neighbor match list ranked by
    descriptor distance; a match is a true positive when the warped point
    lands within eps of its matched partner. AP integrates the
    precision-recall curve trapezoidally from the (recall 0, precision 1)
    anchor."""
    _require_descriptors(kps_a, kps_b)
    if len(kps_a) == 0 or len(kps_b) == 0:
        raise UndefinedMetricError("no candidate matches for nn_map")
    dists = np.linalg.norm(kps_a.descriptors[:, None, :] - kps_b.descriptors[None, :, :],
                           axis=2)
    nn = dists.argmin(axis=1)
    match_dist = dists[np.arange(len(kps_a)), nn]
    warped = warp_points(kps_a.xy, h)
    geo_err = np.linalg.norm(warped - kps_b.xy[nn], axis=1)
    order = np.argsort(match_dist, kind="stable")
    tp = (geo_err[order] <= eps).astype(np.float64)
    total_tp = tp.sum()
    if total_tp == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / total_tp
    prev_r, prev_p, ap = 0.0, 1.0, 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p
    return float(ap)


def matching_score(kps_a: KeypointSet, kps_b: KeypointSet, h, eps=3.0,
                   shape_a=None, shape_b=None, ratio=None):
    """Correct mutual-NN matches over keypoints proposed inside the shared
    (both-ways in-bounds) region, averaged over the two directions."""
    h = np.asarray(h, dtype=np.float64)
    matches = match_descriptors(kps_a, kps_b, ratio=ratio)
    n_a_shared = int(_inbounds(warp_points(kps_a.xy, h), shape_b).sum()) if len(kps_a) else 0
    n_b_shared = int(_inbounds(warp_points(kps_b.xy, np.linalg.inv(h)), shape_a).sum()) \
        if len(kps_b) else 0
    if n_a_shared == 0 or n_b_shared == 0:
        raise UndefinedMetricError("empty shared region")
    correct = 0
    if matches.pairs:
        ia, ib = matches.indices()
        err = np.linalg.norm(warp_points(kps_a.xy[ia], h) - kps_b.xy[ib], axis=1)
        correct = int((err <= eps).sum())
    return (correct / n_a_shared + correct / n_b_shared) / 2.0


# ---------------------------------------------------------------------------
# HPatches-style scene evaluation


def detect_for_eval(model, image, cfg: EvalConfig, device="cpu") -> KeypointSet:
    raw = run_inference(model, image, device=device)
    return keypoints_from_raw(raw, cfg.conf_threshold, cfg.nms_radius, cfg.max_points)


def load_hpatches_scene(scene_dir):
    """Standard layout: 6 images (1..6) and homographies H_1_2 .. H_1_6."""
    scene_dir = Path(scene_dir)
    images = []
    for i in range(1, 7):
        path = None
        for ext in (".ppm", ".png", ".jpg"):
            cand = scene_dir / f"{i}{ext}"
            if cand.exists():
                path = cand
                break
        if path is None:
            raise IngestionError(f"{scene_dir}: missing image {i}")
        img = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if img is None:
            raise IngestionError(f"{scene_dir}: unreadable image {path}")
        images.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0)
    homographies = []
    for i in range(2, 7):
        path = scene_dir / f"H_1_{i}"
        if not path.exists():
            raise IngestionError(f"{scene_dir}: missing homography file {path}")
        homographies.append(np.loadtxt(path).reshape(3, 3))
    return images, homographies


def resize_with_homography(image, h_1_k, shape_1, out_shape):
    """Resize an image pair's k-th member and rescale the 1->k homography so
    it maps between the resized frames."""
    out_h, out_w = out_shape
    src_h, src_w = image.shape[:2]
    resized = cv2.resize(image, (out_w, out_h), interpolation=cv2.INTER_LINEAR)
    s_k = np.diag([out_w / src_w, out_h / src_h, 1.0])
    s_1 = np.diag([out_w / shape_1[1], out_h / shape_1[0], 1.0])
    return resized, s_k @ np.asarray(h_1_k) @ np.linalg.inv(s_1)


def _pad_to_32(image):
    h, w = image.shape[:2]
    ph, pw = -h % 32, -w % 32
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
    return image


def evaluate_scene(model, scene_dir, rep_cfg: EvalConfig, hom_cfg: EvalConfig,
                   device="cpu"):
    """Pairwise metrics of image 1 against images 2..6 of one scene, averaged."""
    images, homographies = load_hpatches_scene(scene_dir)
    results = {"repeatability": [], "nn_map": [], "matching_score": []}
    for eps in hom_cfg.homography_eps_list:
        results[f"homography_eps{eps:g}"] = []

    for cfg, metrics in ((rep_cfg, ("repeatability",)),
                         (hom_cfg, ("homography", "nn_map", "matching_score"))):
        shape = cfg.resolution
        base = cv2.resize(images[0], (shape[1], shape[0]), interpolation=cv2.INTER_LINEAR)
        kps_1 = detect_for_eval(model, _pad_to_32(base), cfg, device)
        for k in range(5):
            img_k, h_1_k = resize_with_homography(images[k + 1], homographies[k],
                                                  images[0].shape, shape)
            kps_k = detect_for_eval(model, _pad_to_32(img_k), cfg, device)
            if "repeatability" in metrics:
                try:
                    rep = repeatability(kps_1, kps_k, h_1_k, cfg.correct_dist_eps,
                                        shape_a=shape, shape_b=shape)
                    results["repeatability"].append(rep)
                except UndefinedMetricError:
                    pass
            if "homography" in metrics:
                est = homography_estimation(kps_1, kps_k, h_1_k, shape,
                                            cfg.homography_eps_list, seed=cfg.seed)
                for eps, ok in est.correct.items():
                    results[f"homography_eps{eps:g}"].append(float(ok))
                try:
                    results["nn_map"].append(nn_map(kps_1, kps_k, h_1_k,
                                                    cfg.correct_dist_eps))
                except UndefinedMetricError:
                    pass
                try:
                    results["matching_score"].append(
                        matching_score(kps_1, kps_k, h_1_k, cfg.correct_dist_eps,
                                       shape_a=shape, shape_b=shape))
                except UndefinedMetricError:
                    pass
    return {m: float(np.mean(v)) for m, v in results.items() if v}


def evaluate_hpatches(model, root, out_dir, rep_cfg=None, hom_cfg=None, device="cpu",
                      scene_limit=None):
    """Evaluate every scene under `root` (i_* illumination, v_* viewpoint),
    write per-scene rows and a split summary, and return the summary dict."""
    rep_cfg = rep_cfg or repeatability_preset()
    hom_cfg = hom_cfg or homography_preset()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    scene_dirs = sorted(p for p in Path(root).iterdir() if p.is_dir())
    if scene_limit:
        scene_dirs = scene_dirs[:scene_limit]
    if not scene_dirs:
        raise IngestionError(f"no scene directories under {root}")

    rows = []
    for scene in scene_dirs:
        metrics = evaluate_scene(model, scene, rep_cfg, hom_cfg, device)
        for name, value in sorted(metrics.items()):
            rows.append((scene.name, name, value))

    results_path = out_dir / "results.csv"
    with open(results_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "metric", "value"])
        for scene, metric, value in rows:
            writer.writerow([scene, metric, f"{value:.9g}"])

    summary = summarize_rows(rows)
    with open(out_dir / "summary.txt", "w") as fh:
        fh.write(f"geometric-correctness eps: {hom_cfg.correct_dist_eps:g} px "
                 f"(all descriptor metrics)\n")
        for split in sorted(summary):
            fh.write(f"[{split}]\n")
            for metric in sorted(summary[split]):
                fh.write(f"  {metric}: {summary[split][metric]:.4f}\n")
    export_metric_histograms(rows, out_dir)
    return summary


def summarize_rows(rows):
    groups = {}
    for scene, metric, value in rows:
        split = ("illumination" if scene.startswith("i_")
                 else "viewpoint" if scene.startswith("v_") else "all")
        groups.setdefault(split, {}).setdefault(metric, []).append(value)
    return {split: {m: float(np.mean(v)) for m, v in metrics.items()}
            for split, metrics in groups.items()}


def export_metric_histograms(rows, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_metric = {}
    for _, metric, value in rows:
        by_metric.setdefault(metric, []).append(value)
    for metric, values in sorted(by_metric.items()):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.hist(values, bins=20, range=(0, 1), color="tab:blue")
        ax.set_xlabel(metric)
        ax.set_ylabel("scenes")
        fig.tight_layout()
        fig.savefig(Path(out_dir) / f"hist_{metric}.png", dpi=100)
        plt.close(fig)


def export_match_visualization(image_a, image_b, kps_a, kps_b, matches: MatchSet,
                               path, max_lines=80):
    """Side-by-side match rendering."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    h = max(image_a.shape[0], image_b.shape[0])
    w = image_a.shape[1] + image_b.shape[1]
    canvas = np.zeros((h, w, 3))
    canvas[:image_a.shape[0], :image_a.shape[1]] = image_a
    canvas[:image_b.shape[0], image_a.shape[1]:] = image_b
    off = image_a.shape[1]

    fig, ax = plt.subplots(figsize=(10, 4))
    ax.imshow(canvas)
    for i, j, _ in matches.pairs[:max_lines]:
        xa, ya = kps_a.xy[i]
        xb, yb = kps_b.xy[j]
        ax.plot([xa, xb + off], [ya, yb], linewidth=0.6, color="lime")
    ax.scatter(kps_a.xy[:, 0], kps_a.xy[:, 1], s=3, c="red")
    ax.scatter(kps_b.xy[:, 0] + off, kps_b.xy[:, 1], s=3, c="red")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
