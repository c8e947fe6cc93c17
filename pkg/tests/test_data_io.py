import numpy as np
import pytest

from jointdet.data_io import (PhotometricConfig, SyntheticShapes, apply_photometric,
                              export_synthetic_dataset, LabeledImageFolder,
                              load_kitti_sequence, mosaic_augment,
                              photometric_augment, read_box_label_file,
                              read_pose_file, records_from_manifest,
                              write_box_label_file, write_pose_file)
from jointdet.errors import IngestionError, ValidationError
from jointdet.postprocess import KeypointSet


class TestBoxLabels:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        cx, cy = rng.uniform(0.3, 0.7, size=(2, 6))
        w, h = rng.uniform(0.05, 0.4, size=(2, 6))
        boxes = np.stack([rng.integers(0, 8, size=6).astype(float), cx, cy, w, h], axis=1)
        path = tmp_path / "boxes.txt"
        write_box_label_file(path, boxes, num_classes=8)
        back = read_box_label_file(path, num_classes=8)
        assert np.allclose(back, boxes, rtol=1e-6)

    def test_rejects_out_of_range(self, tmp_path):
        path = tmp_path / "boxes.txt"
        path.write_text("0 0.95 0.5 0.2 0.2\n")
        with pytest.raises(ValidationError):
            read_box_label_file(path)

    def test_rejects_residue(self, tmp_path):
        path = tmp_path / "boxes.txt"
        path.write_text("0 0.5 0.5 0.2\n")
        with pytest.raises(IngestionError):
            read_box_label_file(path)

    def test_rejects_class_overflow(self, tmp_path):
        path = tmp_path / "boxes.txt"
        path.write_text("9 0.5 0.5 0.2 0.2\n")
        with pytest.raises(ValidationError):
            read_box_label_file(path, num_classes=8)


class TestPhotometric:
    def test_zero_ranges_identity(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, size=(32, 32, 3))
        cfg = PhotometricConfig(max_brightness=0.0, contrast_range=(1.0, 1.0),
                                max_blur_sigma=0.0)
        out = photometric_augment(img, np.random.default_rng(2), cfg)
        assert np.array_equal(out, img)

    def test_brightness_exact(self):
        img = np.full((16, 16, 3), 0.5)
        out = apply_photometric(img, brightness=0.1)
        assert np.allclose(out, 0.6, atol=1e-12)

    def test_seed_determinism(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, size=(32, 32, 3))
        a = photometric_augment(img, np.random.default_rng(7))
        b = photometric_augment(img, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_output_clipped(self):
        img = np.full((8, 8, 3), 0.99)
        out = apply_photometric(img, brightness=0.5)
        assert out.max() <= 1.0


def quad_sample(rng, size=48, n_points=6, n_boxes=1):
    image = rng.uniform(0, 1, size=(size, size, 3))
    pts = KeypointSet(rng.uniform(0, size - 1, size=(n_points, 2)), np.ones(n_points))
    boxes = np.stack([np.zeros(n_boxes), rng.uniform(0.4, 0.6, size=n_boxes),
                      rng.uniform(0.4, 0.6, size=n_boxes),
                      rng.uniform(0.2, 0.3, size=n_boxes),
                      rng.uniform(0.2, 0.3, size=n_boxes)], axis=1)
    return image, pts, boxes


class TestMosaic:
    def test_no_padding_pixels(self):
        rng = np.random.default_rng(4)
        # all-bright sources: any black pixel would be padding
        samples = []
        for _ in range(4):
            img, pts, boxes = quad_sample(rng)
            samples.append((np.clip(img, 0.25, 1.0), pts, boxes))
        out = mosaic_augment(samples, (64, 64), rng)
        assert out.image.min() >= 0.25
        assert out.image.shape == (64, 64, 3)

    def test_keypoints_map_back_through_recorded_affine(self):
        rng = np.random.default_rng(5)
        samples = [quad_sample(rng) for _ in range(4)]
        out = mosaic_augment(samples, (96, 96), rng)
        # every merged keypoint must equal some source point under its
        # quadrant's recorded affine, within 0.5 px
        source_xy = [s[1].xy for s in samples]
        for x, y in out.points.xy:
            matched = False
            for placement, src in zip(out.placements, source_xy):
                x0, y0, x1, y1 = placement.bounds
                if not (x0 <= x <= x1 - 1 and y0 <= y <= y1 - 1):
                    continue
                mapped = src * placement.scale + placement.offset
                if len(mapped) and np.min(np.linalg.norm(mapped - [x, y], axis=1)) < 0.5:
                    matched = True
                    break
            assert matched, (x, y)

    def test_outside_quadrant_points_dropped(self):
        rng = np.random.default_rng(6)
        img = np.ones((48, 48, 3)) * 0.5
        # single corner point per source; scale >= 1 pushes some out of quadrant
        pts = KeypointSet(np.array([[47.0, 47.0]]), np.ones(1))
        samples = [(img, pts, np.zeros((0, 5)))] * 4
        out = mosaic_augment(samples, (64, 64), rng)
        for x, y in out.points.xy:
            inside_any = any(b[0] <= x <= b[2] - 1 and b[1] <= y <= b[3] - 1
                             for b in [p.bounds for p in out.placements])
            assert inside_any

    def test_boxes_clipped_and_normalized(self):
        rng = np.random.default_rng(7)
        samples = [quad_sample(rng, n_boxes=2) for _ in range(4)]
        out = mosaic_augment(samples, (64, 64), rng)
        if len(out.boxes):
            lo = out.boxes[:, 1:3] - out.boxes[:, 3:5] / 2
            hi = out.boxes[:, 1:3] + out.boxes[:, 3:5] / 2
            assert lo.min() >= -1e-9 and hi.max() <= 1 + 1e-9

    def test_needs_four_samples(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ValidationError):
            mosaic_augment([quad_sample(rng)] * 3, (64, 64), rng)


def make_kitti_fixture(root, n_frames=3, poses=None):
    import cv2
    seq = root / "sequences" / "00"
    (seq / "image_2").mkdir(parents=True)
    (root / "poses").mkdir(parents=True)
    rng = np.random.default_rng(9)
    for i in range(n_frames):
        img = (rng.uniform(0, 255, size=(64, 96, 3))).astype(np.uint8)
        cv2.imwrite(str(seq / "image_2" / f"{i:06d}.png"), img)
    calib = ("P0: 700 0 48 0 0 700 32 0 0 0 1 0\n"
             "P2: 718.856 0 607.1928 45.38225 0 718.856 185.2157 -0.1130887 "
             "0 0 1 0.003779761\n")
    (seq / "calib.txt").write_text(calib)
    if poses is None:
        poses = np.repeat(np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)[None],
                          n_frames, axis=0)
    write_pose_file(root / "poses" / "00.txt", poses)
    return root


class TestKitti:
    def test_fixture_round_trip(self, tmp_path):
        make_kitti_fixture(tmp_path)
        frames, intrinsics, poses = load_kitti_sequence(tmp_path, "00")
        assert len(frames) == 3
        assert intrinsics.fx == 718.856
        assert intrinsics.cy == 185.2157
        assert poses.shape == (3, 3, 4)
        for p in poses:
            assert np.allclose(p[:, :3], np.eye(3))
            assert np.allclose(p[:, 3], 0)

    def test_identity_pose_line(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
        poses = read_pose_file(path)
        assert np.array_equal(poses[0], np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))

    def test_missing_calib(self, tmp_path):
        make_kitti_fixture(tmp_path)
        (tmp_path / "sequences" / "00" / "calib.txt").unlink()
        with pytest.raises(IngestionError, match="calib"):
            load_kitti_sequence(tmp_path, "00")

    def test_missing_poses(self, tmp_path):
        make_kitti_fixture(tmp_path)
        (tmp_path / "poses" / "00.txt").unlink()
        with pytest.raises(IngestionError, match="pose"):
            load_kitti_sequence(tmp_path, "00")

    def test_count_mismatch(self, tmp_path):
        make_kitti_fixture(tmp_path)
        pose = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
        write_pose_file(tmp_path / "poses" / "00.txt", np.repeat(pose[None], 5, axis=0))
        with pytest.raises(IngestionError, match="frames"):
            load_kitti_sequence(tmp_path, "00")

    def test_pose_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        poses = rng.normal(size=(4, 3, 4))
        path = tmp_path / "p.txt"
        write_pose_file(path, poses)
        assert np.allclose(read_pose_file(path), poses, rtol=1e-6)


class TestDatasets:
    def test_synthetic_shapes_deterministic(self):
        ds = SyntheticShapes(count=5, seed=42)
        img1, pts1, _ = ds[3]
        img2, pts2, _ = ds[3]
        assert np.array_equal(img1, img2)
        assert np.array_equal(pts1.xy, pts2.xy)
        other, _, _ = ds[4]
        assert not np.array_equal(img1, other)

    def test_export_and_reload(self, tmp_path):
        manifest = export_synthetic_dataset(tmp_path / "ds", count=4, seed=1)
        records = records_from_manifest(manifest)
        folder = LabeledImageFolder(records)
        assert len(folder) == 4
        image, points, boxes = folder[0]
        assert image.shape == (64, 64, 3)
        assert boxes.shape == (0, 5)
        # labels on disk match the in-memory dataset within print precision
        _, mem_points, _ = SyntheticShapes(count=4, seed=1)[0]
        if len(mem_points):
            assert np.allclose(points.xy, mem_points.xy, rtol=1e-6)

    def test_missing_file_rejected(self, tmp_path):
        from jointdet.data_io import SampleRecord
        with pytest.raises(IngestionError):
            LabeledImageFolder([SampleRecord(str(tmp_path / "nope.png"))])
