import json

import numpy as np
import pytest
import torch

from lapreg.data import (
    FOLLOW_UP,
    PRE_OP,
    Image,
    LandmarkSet,
    SegmentationMap,
    Subject,
    assign_split,
    crop_padding,
    generate_synthetic_pair,
    load_labels,
    load_volume,
    make_pairs,
    normalize_intensity,
    pad_to_pyramid,
    read_landmarks,
    read_manifest,
    save_labels,
    save_volume,
    split_subjects,
    synthetic_dataset,
    write_landmarks,
    write_manifest,
)
from lapreg.field_ops import jacobian_determinant, warp
from lapreg.metrics import tre


class TestTypes:
    def test_image_validation(self):
        with pytest.raises(ValueError):
            Image(np.zeros((4, 4)), (1.0,))
        with pytest.raises(ValueError):
            Image(np.zeros((4, 4)), (1.0, 0.0))
        with pytest.raises(ValueError):
            Image(np.full((4, 4), np.nan), (1.0, 1.0))
        with pytest.raises(ValueError):
            Image(np.zeros((1, 4)), (1.0, 1.0))

    def test_image_tensor(self):
        t = Image(np.ones((4, 6), dtype=np.float32), (1, 2)).tensor()
        assert t.shape == (1, 1, 4, 6) and t.dtype == torch.float32

    def test_landmark_ids_unique(self):
        with pytest.raises(ValueError):
            LandmarkSet(["a", "a"], np.zeros((2, 2)))

    def test_segmentation(self):
        seg = SegmentationMap(np.array([[0, 2], [2, 5]]))
        assert seg.label_set == [2, 5]
        with pytest.raises(ValueError):
            SegmentationMap(np.array([[-1, 0]]))

    def test_subject_segmentation_shape(self):
        with pytest.raises(ValueError):
            Subject("s", Image(np.zeros((4, 4)), (1, 1)), SegmentationMap(np.zeros((4, 5))))


class TestIO:
    def test_normalize(self):
        out, degenerate = normalize_intensity(np.array([[2.0, 4.0], [6.0, 10.0]]))
        assert not degenerate and out.min() == 0.0 and out.max() == 1.0
        out, degenerate = normalize_intensity(np.full((3, 3), 7.0))
        assert degenerate and np.all(out == 0)

    @pytest.mark.parametrize("shape,spacing", [((8, 6), (1.0, 1.5)), ((4, 5, 6), (1.0, 2.0, 0.5))])
    def test_volume_round_trip(self, tmp_path, shape, spacing):
        data = np.random.default_rng(0).random(shape).astype(np.float32)
        data = (data - data.min()) / (data.max() - data.min())
        save_volume(Image(data, spacing), tmp_path / "v.nii.gz")
        img = load_volume(tmp_path / "v.nii.gz")
        np.testing.assert_allclose(img.data, data, atol=1e-6)
        assert img.spacing == pytest.approx(spacing)
        assert not img.degenerate

    def test_out_of_range_volume_is_normalized(self, tmp_path):
        save_volume(Image(np.array([[2.0, 4.0], [6.0, 10.0]]), (1, 1)), tmp_path / "v.nii.gz")
        img = load_volume(tmp_path / "v.nii.gz")
        np.testing.assert_allclose(img.data, [[0.0, 0.25], [0.5, 1.0]])

    def test_constant_volume_is_flagged(self, tmp_path):
        save_volume(Image(np.full((3, 3), 5.0), (1, 1)), tmp_path / "v.nii.gz")
        assert load_volume(tmp_path / "v.nii.gz").degenerate

    def test_labels_round_trip(self, tmp_path):
        seg = SegmentationMap(np.array([[0, 1, 2], [3, 3, 0]]))
        save_labels(seg, tmp_path / "s.nii.gz", (1.0, 1.0))
        np.testing.assert_array_equal(load_labels(tmp_path / "s.nii.gz").labels, seg.labels)

    def test_landmarks_round_trip(self, tmp_path):
        lms = LandmarkSet(["p1", "p2"], np.array([[1.25, 2.5, 3.0], [0.1, 0.2, 0.3]]))
        write_landmarks(lms, tmp_path / "l.csv")
        back = read_landmarks(tmp_path / "l.csv")
        assert back.ids == lms.ids
        np.testing.assert_array_equal(back.points, lms.points)


class TestPadding:
    def test_pad_and_crop(self):
        data = np.random.default_rng(0).random((30, 35)).astype(np.float32)
        s = Subject("s", Image(data, (1, 1)), SegmentationMap(np.ones((30, 35))),
                    LandmarkSet(["a"], [[3.0, 4.0]]))
        p = pad_to_pyramid(s, 5)
        assert p.image.shape == (32, 48)
        assert p.segmentation.labels.shape == (32, 48)
        np.testing.assert_array_equal(crop_padding(p.image.data, p.pad), data)
        offset = [b for b, _ in p.pad]
        np.testing.assert_allclose(p.landmarks.points[0], [3.0 + offset[0], 4.0 + offset[1]])
        # leading axes (e.g. field components) are left alone
        assert crop_padding(np.zeros((2, 32, 48)), p.pad).shape == (2, 30, 35)

    def test_already_divisible(self):
        s = Subject("s", Image(np.zeros((32, 16)), (1, 1)))
        assert pad_to_pyramid(s, 5).pad == [(0, 0), (0, 0)]


def subjects(n):
    out = []
    for i in range(n):
        img = Image(np.zeros((4, 4)), (1, 1))
        out.append(Subject(f"p{i}_pre", img, session=PRE_OP, patient=f"p{i}"))
        out.append(Subject(f"p{i}_fu", img, session=FOLLOW_UP, patient=f"p{i}"))
    return out


class TestSplitsAndPairs:
    def test_split_is_deterministic_and_patient_grouped(self):
        subs = subjects(40)
        a, b = split_subjects(subs, 3), split_subjects(subs, 3)
        assert {k: [s.id for s in v] for k, v in a.items()} == {k: [s.id for s in v] for k, v in b.items()}
        for group in a.values():
            patients = {s.patient for s in group}
            for p in patients:
                assert sum(s.patient == p for s in group) == 2

    def test_split_ratios(self):
        counts = {"a": 0, "b": 0}
        for i in range(4000):
            counts[assign_split(f"k{i}", 0, {"a": 3, "b": 1})] += 1
        assert counts["a"] / 4000 == pytest.approx(0.75, abs=0.03)

    def test_intra_pairs(self):
        pairs = make_pairs(subjects(5), "intra", seed=0)
        assert len(pairs) == 5
        for moving, fixed in pairs:
            assert moving.session == FOLLOW_UP and fixed.session == PRE_OP
            assert moving.patient == fixed.patient

    def test_intra_needs_sessions(self):
        with pytest.raises(ValueError):
            make_pairs([Subject("x", Image(np.zeros((4, 4)), (1, 1)))], "intra", seed=0)

    def test_inter_pairs(self):
        subs = subjects(3)
        pairs = make_pairs(subs, "inter", seed=1)
        assert len(pairs) == 6 * 5
        assert all(m is not f for m, f in pairs)
        assert [(m.id, f.id) for m, f in pairs] == [(m.id, f.id) for m, f in make_pairs(subs, "inter", seed=1)]
        assert len(make_pairs(subs, "inter", seed=1, limit=4)) == 4

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            make_pairs(subjects(1), "random", seed=0)


class TestManifest:
    def test_round_trip_and_determinism(self, tmp_path):
        subs = synthetic_dataset(2, seed=0, size=32, lesion=True)
        splits = {s.id: "test" for s in subs}
        doc_a = write_manifest(subs, tmp_path / "a", tmp_path / "a.json", 2, splits)
        write_manifest(subs, tmp_path / "b", tmp_path / "b.json", 2, splits)
        doc_b = json.loads((tmp_path / "b.json").read_text())
        assert [e["id"] for e in doc_a["subjects"]] == [e["id"] for e in doc_b["subjects"]]
        back, back_splits, doc = read_manifest(tmp_path / "a.json")
        assert doc["ndim"] == 2 and back_splits == splits
        for s, t in zip(subs, back):
            assert s.id == t.id and s.session == t.session and s.patient == t.patient
            np.testing.assert_allclose(t.image.data, s.image.data, atol=1e-6)
            np.testing.assert_array_equal(t.segmentation.labels, s.segmentation.labels)
            np.testing.assert_allclose(t.landmarks.points, s.landmarks.points)
            assert set(t.extras) == set(s.extras)

    def test_schema_check(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"schema": 42, "subjects": []}))
        with pytest.raises(ValueError):
            read_manifest(tmp_path / "m.json")


@pytest.fixture(scope="module")
def pair():
    return generate_synthetic_pair(11, size=64, lesion=True)


class TestSynthetic:
    def test_deterministic(self, pair):
        again = generate_synthetic_pair(11, size=64, lesion=True)
        np.testing.assert_array_equal(pair.fixed.data, again.fixed.data)
        np.testing.assert_array_equal(pair.true_field, again.true_field)

    def test_displacement_cap_and_diffeomorphism(self, pair):
        assert np.sqrt((pair.true_field ** 2).sum(0)).max() <= 0.05 * 64 + 1e-9
        det = jacobian_determinant(torch.as_tensor(pair.true_field)[None])
        assert (det[0, 1:-1, 1:-1] > 0).all()

    def test_fixed_is_warped_moving_outside_lesion(self, pair):
        clean = generate_synthetic_pair(11, size=64, lesion=False)
        warped = warp(clean.moving.tensor(torch.float64), torch.as_tensor(pair.true_field)[None])[0, 0].numpy()
        outside = ~pair.lesion_mask
        np.testing.assert_allclose(pair.fixed.data[outside], warped[outside], atol=1e-5)

    def test_lesion_only_in_moving(self, pair):
        assert pair.lesion_mask.any()
        clean = generate_synthetic_pair(11, size=64, lesion=False)
        np.testing.assert_array_equal(pair.fixed.data, clean.fixed.data)
        assert not np.array_equal(pair.moving.data, clean.moving.data)

    def test_landmark_self_consistency(self, pair):
        assert len(pair.landmarks_fixed) >= 3
        assert tre(pair.landmarks_fixed, pair.landmarks_moving, pair.true_field, (1.0, 1.0)) < 0.5

    def test_segmentation_nonempty(self, pair):
        assert len(pair.seg_moving.label_set) >= 2
        assert pair.seg_fixed.labels.shape == (64, 64)

    def test_3d(self):
        p = generate_synthetic_pair(0, size=16, ndim=3, n_bumps=10)
        assert p.fixed.shape == (16, 16, 16) and p.true_field.shape == (3, 16, 16, 16)

    def test_dataset_sessions(self):
        subs = synthetic_dataset(3, seed=0, size=32)
        assert len(subs) == 6
        assert {s.session for s in subs} == {PRE_OP, FOLLOW_UP}
        assert len(make_pairs(subs, "intra", seed=0)) == 3
