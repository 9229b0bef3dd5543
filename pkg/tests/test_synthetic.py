import numpy as np
import pytest

from unipercept.datamodel import decode_rle, validate_record
from unipercept.evaluation import box_iou_xyxy
from unipercept.synthetic import SyntheticSceneSpec, generate_synthetic, referents, scene_objects


def test_single_shape_one_annotation():
    spec = SyntheticSceneSpec(objects_per_image=(1, 1), shapes=("circle",))
    s = generate_synthetic(spec, 0, 30)
    assert all(len(r.annotations) == 1 for r in s.records)
    assert s.categories == ["circle"]


def test_records_validate_and_pixels_match():
    s = generate_synthetic(SyntheticSceneSpec(), 1, 20)
    for rec, img in zip(s.records, s.images):
        assert validate_record(rec) == []
        assert img.shape == (3, rec.height, rec.width) and img.dtype == np.float32
        for a in rec.annotations:
            m = decode_rle(a.mask).astype(bool)
            # shapes are drawn in colour over a darker background
            assert img[:, m].mean() > img[:, ~m].mean()


def test_deterministic_per_seed():
    a = generate_synthetic(SyntheticSceneSpec(), 4, 5)
    b = generate_synthetic(SyntheticSceneSpec(), 4, 5)
    assert a.records == b.records
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    assert generate_synthetic(SyntheticSceneSpec(), 5, 5).records != a.records


def test_expression_uniqueness_1000_images():
    spec = SyntheticSceneSpec(label="expression", objects_per_image=(1, 4))
    s = generate_synthetic(spec, 0, 1000)
    objs = scene_objects(spec, 0, 1000)
    n = 0
    for rec, scene in zip(s.records, objs):
        assert len(rec.annotations) == len(scene)
        for k, ann in enumerate(rec.annotations):
            assert referents(ann.expression, scene, spec.height, spec.width) == [k]
            n += 1
    assert n > 1500


def test_label_toggles():
    agn = generate_synthetic(SyntheticSceneSpec(label="agnostic"), 0, 5)
    assert all(a.is_class_agnostic for r in agn.records for a in r.annotations)
    assert agn.categories == ["object"]
    boxes = generate_synthetic(SyntheticSceneSpec(with_mask=False), 0, 5)
    assert all(a.mask is None for r in boxes.records for a in r.annotations)


def test_clip_track_consistency():
    spec = SyntheticSceneSpec(clip_length=10, objects_per_image=(2, 3))
    s = generate_synthetic(spec, 0, 20)
    for clip, pix in zip(s.records, s.images):
        assert validate_record(clip) == []
        assert pix.shape == (10, 3, spec.height, spec.width)
        ids = [sorted(a.track_id for a in f.annotations) for f in clip.frames]
        assert all(i == ids[0] for i in ids)
        for f0, f1 in zip(clip.frames[:-1], clip.frames[1:]):
            b0 = {a.track_id: a.box.to_xyxy() for a in f0.annotations}
            b1 = {a.track_id: a.box.to_xyxy() for a in f1.annotations}
            for tid in b0:
                assert box_iou_xyxy(b0[tid], b1[tid]) > 0


def test_clip_expressions_fixed_over_time():
    s = generate_synthetic(SyntheticSceneSpec(clip_length=4, label="expression"), 2, 3)
    for clip in s.records:
        per_frame = [sorted(a.expression for a in f.annotations) for f in clip.frames]
        assert all(p == per_frame[0] for p in per_frame)


def test_empty_inventory():
    with pytest.raises(ValueError, match="inventory is empty"):
        generate_synthetic(SyntheticSceneSpec(shapes=()), 0, 1)
