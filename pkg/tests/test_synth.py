import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatcascade.synth import (
    FLIP_PAIRS,
    JOINT_NAMES,
    LEFT_SHOULDER,
    DatasetFormatError,
    SynthSpec,
    _MARKER_COLORS,
    affine_matrix,
    apply_affine,
    augment,
    dumps_dataset,
    generate_dataset,
    generate_sample,
    loads_dataset,
    read_dataset,
    stack,
    write_dataset,
)

TYPES = {1: "shoulder", 2: "elbow", 3: "wrist", 4: "shoulder", 5: "elbow", 6: "wrist"}
CLEAN = SynthSpec(clutter=(0, 0), noise=0.0)


def marker_centroid(image, joint, xy, radius=3.5):
    """Centroid of pixels carrying either color of the joint's marker type."""
    colors = np.array(_MARKER_COLORS[TYPES[joint]])
    H, W = image.shape[1:]
    yy, xx = np.mgrid[0:H, 0:W]
    near = np.hypot(xx - xy[0], yy - xy[1]) <= radius
    dist = np.min([np.abs(image - c[:, None, None]).max(axis=0) for c in colors], axis=0)
    sel = near & (dist < 0.2)
    if sel.sum() < 3:
        return None
    return np.array([xx[sel].mean(), yy[sel].mean()])


def well_separated(joints, min_gap=7.0):
    d = np.linalg.norm(joints[:, None] - joints[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1) >= min_gap


class TestGenerate:
    def test_deterministic(self):
        a = generate_sample(np.random.default_rng(5))
        b = generate_sample(np.random.default_rng(5))
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.joints, b.joints)

    def test_dataset_deterministic(self):
        a, b = generate_dataset(3, 6), generate_dataset(3, 6)
        assert dumps_dataset(a) == dumps_dataset(b)
        assert dumps_dataset(a) != dumps_dataset(generate_dataset(4, 6))

    def test_sample_invariants(self):
        for s in generate_dataset(0, 30):
            assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert s.valid.all() and len(s.joints) == len(JOINT_NAMES)
            assert np.all((s.joints >= 0) & (s.joints <= 63))
            assert s.scale > 0

    def test_quantized_to_byte_levels(self):
        s = generate_sample(np.random.default_rng(1))
        levels = s.image.astype(np.float64) * 255
        np.testing.assert_allclose(levels, np.round(levels), atol=1e-4)

    def test_left_arm_on_image_right(self):
        for s in generate_dataset(2, 20):
            assert s.joints[LEFT_SHOULDER, 0] > s.joints[4, 0]

    def test_markers_at_annotations(self):
        hits = 0
        for s in generate_dataset(9, 20, CLEAN):
            sep = well_separated(s.joints)
            for j in range(1, 7):
                if not sep[j]:
                    continue
                c = marker_centroid(s.image, j, s.joints[j])
                assert c is not None
                assert np.all(np.abs(c - s.joints[j]) <= 0.5), (j, c, s.joints[j])
                hits += 1
        assert hits > 50

    def test_no_distractor_by_default(self):
        assert all(s.distractor is None for s in generate_dataset(0, 10))

    def test_distractor_present(self):
        ds = generate_dataset(0, 10, SynthSpec(distractor_prob=1.0))
        for s in ds:
            assert s.distractor is not None
            gap = abs(s.distractor[0, 0] - s.joints[0, 0])
            assert 28.0 <= gap <= 38.0


class TestAugment:
    def test_identity(self):
        s = generate_sample(np.random.default_rng(0))
        t = apply_affine(s, 0.0, 1.0, False)
        np.testing.assert_allclose(t.image, s.image, atol=1e-6)
        np.testing.assert_allclose(t.joints, s.joints, atol=1e-12)

    def test_pure_flip(self):
        s = generate_sample(np.random.default_rng(1))
        t = apply_affine(s, 0.0, 1.0, True)
        expected = s.joints.copy()
        expected[:, 0] = 63 - expected[:, 0]
        for a, b in FLIP_PAIRS:
            expected[[a, b]] = expected[[b, a]]
        np.testing.assert_allclose(t.joints, expected, atol=1e-12)
        np.testing.assert_allclose(t.image, s.image[:, :, ::-1], atol=1e-6)
        # the person's left arm is still on the image right after relabeling
        assert t.joints[1, 0] > t.joints[4, 0]

    def test_rotation_matches_direct_affine(self):
        s = generate_sample(np.random.default_rng(2))
        t = apply_affine(s, 20.0, 1.0, False)
        th = np.deg2rad(20.0)
        c = np.array([31.5, 31.5])
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        expected = (s.joints - c) @ R.T + c
        np.testing.assert_allclose(t.joints, expected, atol=1e-12)

    def test_out_of_bounds_invalid(self):
        s = generate_sample(np.random.default_rng(3))
        t = apply_affine(s, 0.0, 3.0, False)
        out = (t.joints < 0).any(axis=1) | (t.joints > 63).any(axis=1)
        assert out.any()
        np.testing.assert_array_equal(t.valid, ~out)
        assert np.all((t.torso_xy >= 0) & (t.torso_xy <= 63))

    def test_scale_tracks_person_size(self):
        s = generate_sample(np.random.default_rng(4))
        assert apply_affine(s, 5.0, 0.7, True).scale == pytest.approx(0.7 * s.scale)

    def test_affine_matrix_flip(self):
        M = affine_matrix((64, 64), 0.0, 1.0, True)
        np.testing.assert_allclose(M @ [10.0, 5.0, 1.0], [53.0, 5.0])

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_label_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        s = generate_sample(rng, CLEAN)
        angle, scale, flip = rng.uniform(-20, 20), rng.uniform(0.9, 1.5), bool(rng.random() < 0.5)
        t = apply_affine(s, angle, scale, flip)
        sep = well_separated(t.joints, 7.0 * scale)
        for j in range(1, 7):
            if not (t.valid[j] and sep[j]):
                continue
            x, y = t.joints[j]
            if min(x, y, 63 - x, 63 - y) < 4:
                continue
            c = marker_centroid(t.image, j, t.joints[j], radius=3.5 * scale)
            assert c is not None, j
            assert np.all(np.abs(c - t.joints[j]) <= 1.0), (j, c, t.joints[j])

    def test_augment_ranges(self):
        rng = np.random.default_rng(0)
        s = generate_sample(rng)
        flips = 0
        for _ in range(40):
            t = augment(s, rng)
            assert 0.5 * s.scale - 1e-9 <= t.scale <= 1.5 * s.scale + 1e-9
            flips += t.joints[1, 0] < t.joints[4, 0]
        assert flips == 0  # relabeling keeps anatomical sides consistent


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        ds = generate_dataset(7, 12)
        ds[3] = apply_affine(ds[3], 0.0, 3.0, False)
        path = tmp_path / "d.bin"
        write_dataset(path, ds)
        back = read_dataset(path)
        assert len(back) == 12
        for a, b in zip(ds, back):
            np.testing.assert_array_equal(a.joints, b.joints)
            np.testing.assert_array_equal(a.valid, b.valid)
            np.testing.assert_array_equal(a.torso_xy, b.torso_xy)
            assert a.scale == b.scale
            np.testing.assert_array_equal(a.image, b.image)

    def test_truncated(self):
        buf = dumps_dataset(generate_dataset(0, 3))
        with pytest.raises(DatasetFormatError) as exc:
            loads_dataset(buf[:-10])
        assert exc.value.offset > 0
        with pytest.raises(DatasetFormatError):
            loads_dataset(buf[:5])

    def test_bad_magic_and_trailing(self):
        buf = dumps_dataset(generate_dataset(0, 2))
        with pytest.raises(DatasetFormatError, match="magic"):
            loads_dataset(b"XXXX" + buf[4:])
        with pytest.raises(DatasetFormatError, match="trailing"):
            loads_dataset(buf + b"\x00")

    def test_empty(self):
        with pytest.raises(ValueError):
            dumps_dataset([])

    def test_read_speed(self, tmp_path):
        path = tmp_path / "d.bin"
        write_dataset(path, generate_dataset(0, 500))
        t = time.perf_counter()
        assert len(read_dataset(path)) == 500
        assert time.perf_counter() - t < 1.0

    def test_stack(self):
        b = stack(generate_dataset(0, 4))
        assert b["images"].shape == (4, 3, 64, 64)
        assert b["joints"].shape == (4, 7, 2)
        assert b["valid"].shape == (4, 7) and b["torso"].shape == (4, 2) and b["scale"].shape == (4,)
