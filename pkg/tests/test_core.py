import json

import numpy as np
import pytest

from darkseg.core import (IGNORE, INVALID, ClassSet, ShapeMismatchError, ValidationError, as_labels, as_mask,
                          as_soft, confidence, hard_labels, illegal_pixels, validate_pair)


def test_default_class_set_is_cityscapes():
    cs = ClassSet()
    assert cs.num_classes == 19
    assert cs.min_confidence == pytest.approx(1 / 19)
    assert [cs.names[i] for i in sorted(cs.dynamic)] == [
        "person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle"]
    assert cs.dynamic_mask().sum() == 8


@pytest.mark.parametrize("kwargs", [
    dict(names=("a",)),
    dict(names=("a", "a")),
    dict(names=("a", "b"), dynamic={2}),
    dict(names=("a", "b"), dynamic=(), ignore_value=1),
    dict(names=("a", "b"), dynamic=(), ignore_value=INVALID),
])
def test_class_set_rejects_bad_definitions(kwargs):
    with pytest.raises(ValidationError):
        ClassSet(**kwargs)


def test_class_set_from_dict_accepts_names_and_indices(tmp_path):
    cs = ClassSet.from_dict({"names": ["road", "car", "person"], "dynamic": ["car", 2]})
    assert cs.dynamic == frozenset({1, 2})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"names": ["x", "y"], "dynamic": []}))
    assert ClassSet.from_json(p).names == ("x", "y")


def test_as_soft_renormalizes_within_tolerance():
    s = np.full((2, 3, 3), 0.5004)
    out = as_soft(s)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-15)
    assert not out.flags.writeable


def test_as_soft_rejects_sums_off_by_more_than_tolerance():
    with pytest.raises(ValidationError, match="channel sums"):
        as_soft(np.full((2, 2, 2), 0.45))


@pytest.mark.parametrize("bad", [np.zeros((2, 2)), np.full((1, 2, 2), 1.0), np.full((2, 2, 2), 0.5, dtype=np.int64) * 0,
                                 np.array([[[np.nan]], [[1.0]]]), np.array([[[-0.5]], [[1.5]]])])
def test_as_soft_rejects_malformed(bad):
    with pytest.raises(ValidationError):
        as_soft(bad)


def test_argmax_ties_go_to_lowest_index():
    s = np.array([[[0.4]], [[0.4]], [[0.2]]])
    assert hard_labels(s)[0, 0] == 0
    assert confidence(s)[0, 0] == 0.4


def test_as_labels_itemizes_illegal_values():
    cs = ClassSet(("a", "b", "c"), ())
    lab = np.array([[0, 1, 2], [IGNORE, 7, INVALID]], dtype=np.uint8)
    assert illegal_pixels(lab, cs, allow_invalid=False) == [(1, 1, 7), (1, 2, INVALID)]
    assert illegal_pixels(lab, cs, allow_invalid=True) == [(1, 1, 7)]
    with pytest.raises(ValidationError, match=r"\(1, 1\)=7"):
        as_labels(lab, cs)


def test_as_mask_maps_255_to_one_and_rejects_other_values():
    np.testing.assert_array_equal(as_mask(np.array([[0, 255], [1, 0]])), [[0, 1], [1, 0]])
    with pytest.raises(ValidationError, match="binary"):
        as_mask(np.array([[0, 3]]))


def test_validate_pair_reports_and_raises():
    cs = ClassSet(("a", "b"), ())
    labels = np.array([[0, 1, IGNORE], [1, 9, 0]], dtype=np.uint8)
    mask = np.array([[0, 255, 1], [0, 0, 7]], dtype=np.uint8)
    rep = validate_pair(labels, mask, cs)
    assert rep.labeled_pixels == 5
    assert rep.invalid_labeled_pixels == 1
    assert rep.illegal_labels == [(1, 1, 9)]
    assert rep.illegal_mask == [(1, 2, 7)]
    assert not rep.ok
    assert "illegal" in rep.summary()
    with pytest.raises(ShapeMismatchError, match="dimension mismatch"):
        validate_pair(labels, mask[:, :2], cs)
