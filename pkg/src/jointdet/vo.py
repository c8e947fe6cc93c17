"""Frame-to-frame monocular visual odometry on KITTI-format sequences:
detect -> filter dynamic -> match -> essential-matrix pose -> chain -> score.
No loop closure or bundle adjustment; translation scale per frame pair comes
from the ground-truth translation magnitude (monocular scale ambiguity)."""

import time
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import ContractError, DegenerateGeometryError, ValidationError
from .evalsuite import match_descriptors
from .labeling import load_image
from .model import JointDetectionModel, run_inference
from .postprocess import (DetectionSet, KeypointSet, decode_boxes,
                          filter_dynamic_keypoints, keypoints_from_raw,
                          read_keypoint_file)

MIN_POSE_MATCHES = 5
PARALLAX_RELIABLE_RAD = 1e-3  # median rotation-compensated parallax below this
                              # means the translation direction is unreliable


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]],
                        dtype=np.float64)


@dataclass
class Trajectory:
    poses: np.ndarray            # (N, 3, 4) camera-to-world
    frame_indices: np.ndarray = None

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 3, 4)
        if self.frame_indices is None:
            self.frame_indices = np.arange(len(self.poses))
        for i, pose in enumerate(self.poses):
            r = pose[:, :3]
            if (np.abs(r @ r.T - np.eye(3)).max() > 1e-6
                    or abs(np.linalg.det(r) - 1) > 1e-6):
                raise ValidationError(f"pose {i} rotation is not orthonormal")

    def __len__(self):
        return len(self.poses)

    def positions(self):
        return self.poses[:, :, 3]

    def rotations(self):
        return self.poses[:, :, :3]

    @staticmethod
    def identity(n=1):
        pose = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
        return Trajectory(np.repeat(pose[None], n, axis=0))


@dataclass
class VoReport:
    translation_rmse: float
    rotation_rmse_deg: float
    mean_iteration_time_ms: float = 0.0
    match_counts: list = field(default_factory=list)
    inlier_ratios: list = field(default_factory=list)
    degenerate_frames: list = field(default_factory=list)
    skipped_frames: list = field(default_factory=list)
    filtered_point_counts: list = field(default_factory=list)

    def metrics_dict(self):
        """Deterministic metrics only; timing is reported separately."""
        return {
            "translation_rmse": self.translation_rmse,
            "rotation_rmse_deg": self.rotation_rmse_deg,
            "match_counts": [int(v) for v in self.match_counts],
            "inlier_ratios": [round(float(v), 9) for v in self.inlier_ratios],
            "degenerate_frames": list(self.degenerate_frames),
            "skipped_frames": list(self.skipped_frames),
            "filtered_point_counts": [int(v) for v in self.filtered_point_counts],
        }


@dataclass
class VoConfig:
    max_points: int = 1000
    nms_radius: int = 8
    conf_threshold: float = 0.015
    filter_dynamic: bool = True
    box_conf_threshold: float = 0.25
    box_iou_threshold: float = 0.45
    ratio_test: float = None     # mutual NN by default; 0.8 enables the test
    ransac_threshold_px: float = 1.0
    seed: int = 0


@dataclass
class RelativePose:
    rotation: np.ndarray         # (3, 3) maps frame-a coords to frame-b coords
    translation: np.ndarray      # (3,) unit norm
    inlier_mask: np.ndarray      # (n_matches,) bool
    t_reliable: bool


def relative_pose(matches, kps_a: KeypointSet, kps_b: KeypointSet,
                  k: CameraIntrinsics, rng=None) -> RelativePose:
    """Essential-matrix relative pose from matched keypoints: five-point
    minimal solves inside RANSAC (1 px threshold), cheirality-checked
    decomposition, unit-norm translation."""
    if len(matches.pairs) < MIN_POSE_MATCHES:
        raise DegenerateGeometryError(
            f"need >= {MIN_POSE_MATCHES} matches, have {len(matches.pairs)}")
    idx_a = np.asarray([p[0] for p in matches.pairs], dtype=np.int64)
    idx_b = np.asarray([p[1] for p in matches.pairs], dtype=np.int64)
    pts_a = np.ascontiguousarray(kps_a.xy[idx_a], dtype=np.float64)
    pts_b = np.ascontiguousarray(kps_b.xy[idx_b], dtype=np.float64)
    kmat = k.matrix()

    if rng is not None:
        cv2.setRNGSeed(int(rng.integers(0, 2 ** 31 - 1)))
    else:
        cv2.setRNGSeed(0)
    essential, mask = cv2.findEssentialMat(pts_a, pts_b, kmat, method=cv2.RANSAC,
                                           prob=0.999, threshold=1.0)
    if essential is None or essential.shape[0] < 3:
        raise DegenerateGeometryError("essential matrix estimation found no consensus")
    essential = essential[:3]
    n_good, rot, t, pose_mask = cv2.recoverPose(essential, pts_a, pts_b, kmat,
                                                mask=mask.copy())
    if n_good < MIN_POSE_MATCHES:
        raise DegenerateGeometryError("cheirality check left too few inliers")
    inliers = pose_mask.ravel() > 0
    t = t.ravel()
    t = t / max(np.linalg.norm(t), 1e-12)

    parallax = _median_parallax(pts_a[inliers], pts_b[inliers], rot, kmat)
    return RelativePose(rotation=rot, translation=t, inlier_mask=inliers,
                        t_reliable=bool(parallax >= PARALLAX_RELIABLE_RAD))


def _median_parallax(pts_a, pts_b, rot, kmat):
    """Median angle between bearing rays after removing rotation; near zero
    for a pure rotation, where translation direction carries no signal."""
    if len(pts_a) == 0:
        return 0.0
    kinv = np.linalg.inv(kmat)
    homo_a = np.concatenate([pts_a, np.ones((len(pts_a), 1))], axis=1)
    homo_b = np.concatenate([pts_b, np.ones((len(pts_b), 1))], axis=1)
    rays_a = homo_a @ kinv.T
    rays_b = (homo_b @ kinv.T) @ rot   # == rot.T applied to each b-ray
    rays_a /= np.linalg.norm(rays_a, axis=1, keepdims=True)
    rays_b /= np.linalg.norm(rays_b, axis=1, keepdims=True)
    cosang = np.clip((rays_a * rays_b).sum(axis=1), -1.0, 1.0)
    return float(np.median(np.arccos(cosang)))


def reorthonormalize(rot):
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def chain_pose(pose, rot_rel, t_rel):
    """Append a relative motion (frame k -> k+1 coordinates) to a
    camera-to-world pose."""
    r_prev, t_prev = pose[:, :3], pose[:, 3]
    r_new = reorthonormalize(r_prev @ rot_rel.T)
    t_new = t_prev - r_new @ t_rel
    return np.concatenate([r_new, t_new[:, None]], axis=1)


class ModelFrontend:
    """Runs the network per frame and post-processes to keypoints and boxes."""

    def __init__(self, model, cfg: VoConfig, device="cpu"):
        self.model = model
        self.cfg = cfg
        self.device = device

    def __call__(self, frame_index, image):
        out = run_inference(self.model, image, device=self.device)
        kps = keypoints_from_raw(out, self.cfg.conf_threshold,
                                 self.cfg.nms_radius, self.cfg.max_points)
        dets = decode_boxes(out.object_raw, self.model.config.anchor_spec,
                            self.cfg.box_conf_threshold, self.cfg.box_iou_threshold)
        return kps, dets


class FileFrontend:
    """Reads keypoints (interchange format) and optional boxes from files,
    for running the pipeline on externally produced detections."""

    def __init__(self, keypoint_dir, box_dir=None, image_shape=None,
                 class_names=None, dynamic_flags=None):
        self.keypoint_dir = Path(keypoint_dir)
        self.box_dir = Path(box_dir) if box_dir else None
        self.image_shape = image_shape
        self.class_names = class_names
        self.dynamic_flags = dynamic_flags

    def __call__(self, frame_index, image):
        kps = read_keypoint_file(self.keypoint_dir / f"{frame_index:06d}.txt")
        dets = DetectionSet.empty()
        if self.box_dir is not None:
            box_path = self.box_dir / f"{frame_index:06d}.txt"
            if box_path.exists():
                from .data_io import read_box_label_file
                boxes = read_box_label_file(box_path)
                if len(boxes):
                    h, w = self.image_shape if self.image_shape is not None \
                        else image.shape[:2]
                    xyxy = np.stack([
                        (boxes[:, 1] - boxes[:, 3] / 2) * w,
                        (boxes[:, 2] - boxes[:, 4] / 2) * h,
                        (boxes[:, 1] + boxes[:, 3] / 2) * w,
                        (boxes[:, 2] + boxes[:, 4] / 2) * h], axis=1)
                    kwargs = {}
                    if self.class_names is not None:
                        kwargs = {"class_names": self.class_names,
                                  "dynamic_flags": self.dynamic_flags}
                    dets = DetectionSet(xyxy, boxes[:, 0].astype(int),
                                        np.ones(len(boxes)), **kwargs)
        return kps, dets


def run_sequence(frontend, frames, k: CameraIntrinsics, gt: Trajectory,
                 cfg: VoConfig = None, load=None):
    """Chain frame-to-frame relative poses over a sequence and score against
    ground truth. `frontend` maps (frame_index, image) to (keypoints, boxes);
    a model instance is wrapped automatically. Degenerate frames reuse the
    previous relative motion; unreadable frames are skipped the same way."""
    cfg = cfg or VoConfig()
    if isinstance(frontend, JointDetectionModel):
        frontend = ModelFrontend(frontend, cfg)
    if load is None:
        load = load_image
    if len(gt) != len(frames):
        raise ContractError(f"{len(frames)} frames but {len(gt)} ground-truth poses")

    rng = np.random.default_rng(cfg.seed)
    poses = [np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)]
    report = VoReport(translation_rmse=0.0, rotation_rmse_deg=0.0)
    prev = None
    last_motion = (np.eye(3), np.zeros(3))
    gt_pos = gt.positions()
    iter_times = []

    for i, frame in enumerate(frames):
        t0 = time.perf_counter()
        try:
            image = load(frame)
        except (ValidationError, OSError):
            report.skipped_frames.append(i)
            image = None
        if image is not None:
            kps, dets = frontend(i, image)
            if cfg.filter_dynamic:
                kept = filter_dynamic_keypoints(kps, dets)
            else:
                kept = kps
            report.filtered_point_counts.append(len(kps) - len(kept))
            cur = kept
        else:
            cur = None

        if i > 0:
            scale = float(np.linalg.norm(gt_pos[i] - gt_pos[i - 1]))
            rot_rel, t_rel = last_motion
            if prev is not None and cur is not None:
                try:
                    matches = match_descriptors(prev, cur, ratio=cfg.ratio_test)
                    pose = relative_pose(matches, prev, cur, k, rng=rng)
                    rot_rel, t_rel = pose.rotation, pose.translation
                    last_motion = (rot_rel, t_rel)
                    report.match_counts.append(len(matches.pairs))
                    report.inlier_ratios.append(
                        float(pose.inlier_mask.mean()) if len(pose.inlier_mask) else 0.0)
                except (DegenerateGeometryError, ContractError):
                    report.degenerate_frames.append(i)
                    report.match_counts.append(0)
                    report.inlier_ratios.append(0.0)
            else:
                report.degenerate_frames.append(i)
                report.match_counts.append(0)
                report.inlier_ratios.append(0.0)
            poses.append(chain_pose(poses[-1], rot_rel, t_rel * scale))
        if cur is not None:
            prev = cur
        iter_times.append(time.perf_counter() - t0)

    est = Trajectory(np.stack(poses))
    scored = score_trajectory(est, gt)
    report.translation_rmse = scored.translation_rmse
    report.rotation_rmse_deg = scored.rotation_rmse_deg
    report.mean_iteration_time_ms = float(np.mean(iter_times) * 1000.0)
    return est, report


def rotation_angle_deg(rot):
    cos = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def score_trajectory(est: Trajectory, gt: Trajectory) -> VoReport:
    """Translation RMSE over per-frame positions, rotation RMSE over geodesic
    angle errors of consecutive relative rotations."""
    if len(est) != len(gt):
        raise ContractError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    pos_err = np.linalg.norm(est.positions() - gt.positions(), axis=1)
    t_rmse = float(np.sqrt(np.mean(pos_err ** 2)))

    ang_errs = []
    rot_est, rot_gt = est.rotations(), gt.rotations()
    for i in range(len(est) - 1):
        rel_est = rot_est[i].T @ rot_est[i + 1]
        rel_gt = rot_gt[i].T @ rot_gt[i + 1]
        ang_errs.append(rotation_angle_deg(rel_est.T @ rel_gt))
    r_rmse = float(np.sqrt(np.mean(np.square(ang_errs)))) if ang_errs else 0.0
    return VoReport(translation_rmse=t_rmse, rotation_rmse_deg=r_rmse)
