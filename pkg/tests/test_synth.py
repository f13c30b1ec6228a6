"""Synthetic face corpus: determinism, geometry, splits, pair counting."""

import numpy as np
import pytest

from frsattack.core import check_image
from frsattack.synth import (
    IdentitySpec,
    export_dataset,
    generate_identity,
    genuine_pairs,
    impostor_pairs,
    load_dataset,
    make_dataset,
    render,
)


def test_generate_identity_within_documented_ranges():
    for seed in range(20):
        spec = generate_identity(seed)
        assert 0.26 <= spec.face_ax <= 0.34
        assert 0.30 <= spec.face_ay <= 0.38
        assert 0.36 <= spec.eye_spacing <= 0.52
        assert 0.11 <= spec.eye_radius <= 0.17
        assert 0.18 <= spec.eye_height <= 0.32
        assert 0.35 <= spec.mouth_width <= 0.60
        assert -0.5 <= spec.mouth_curve <= 0.5
        assert all(0.5 <= c <= 0.95 for c in spec.skin)
        assert 0.03 <= spec.eye_tone <= 0.18


def test_generate_identity_deterministic():
    a = generate_identity(7)
    b = generate_identity(7)
    assert a == b
    assert generate_identity(8) != a


def test_render_deterministic_and_valid():
    spec = generate_identity(3)
    s1 = render(spec, canvas=(64, 64), jitter_seed=5)
    s2 = render(spec, canvas=(64, 64), jitter_seed=5)
    assert np.array_equal(s1.image, s2.image)
    assert s1.box == s2.box and s1.eyes == s2.eyes
    check_image(s1.image)
    s3 = render(spec, canvas=(64, 64), jitter_seed=6)
    assert not np.array_equal(s1.image, s3.image)


def test_render_box_and_eyes_consistent():
    spec = generate_identity(11)
    s = render(spec, canvas=(64, 64), jitter_seed=0)
    x0, y0, x1, y1 = s.box
    assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
    (lx, ly), (rx, ry) = s.eyes
    assert x0 <= lx < rx <= x1
    assert y0 <= ly <= y1 and y0 <= ry <= y1


def test_render_background_only():
    spec = generate_identity(2)
    s = render(spec, canvas=(64, 64), jitter_seed=1, with_face=False)
    assert s.box is None and s.eyes is None
    check_image(s.image)


def test_render_rejects_tiny_canvas():
    spec = generate_identity(0)
    with pytest.raises(Exception):
        render(spec, canvas=(16, 16), jitter_seed=0)


def test_make_dataset_shape_and_determinism():
    ds = make_dataset(5, 5, seed=3)
    assert len(ds.identities) == 5
    assert all(len(samples) == 5 for _, samples in ds.identities)
    assert len(ds.negatives) >= 8
    ds2 = make_dataset(5, 5, seed=3)
    assert ds.content_hash() == ds2.content_hash()
    ds3 = make_dataset(5, 5, seed=4)
    assert ds.content_hash() != ds3.content_hash()


def test_make_dataset_identities_distinct():
    ds = make_dataset(6, 2, seed=9)
    imgs = [samples[0].image for _, samples in ds.identities]
    for i in range(len(imgs)):
        for j in range(i + 1, len(imgs)):
            assert not np.array_equal(imgs[i], imgs[j])


def test_detector_split_identity_disjoint():
    ds = make_dataset(10, 4, seed=1)
    train_f, train_n, test_f, test_n = ds.detector_split()
    assert len(train_f) == 32 and len(test_f) == 8
    assert len(train_n) + len(test_n) == len(ds.negatives)
    train_imgs = {id(s) for s in train_f}
    assert not train_imgs & {id(s) for s in test_f}


def test_matcher_split_per_identity():
    ds = make_dataset(4, 5, seed=2)
    train, test = ds.matcher_split()
    assert len(train) == 16 and len(test) == 4
    per_id = {}
    for iid, _ in test:
        per_id[iid] = per_id.get(iid, 0) + 1
    assert set(per_id) == set(ds.identity_ids())


def test_pair_counting():
    # 2 identities x 2 embeddings: 2 genuine pairs, 4 impostor pairs
    items = [("a", 1), ("a", 2), ("b", 3), ("b", 4)]
    assert len(list(genuine_pairs(items))) == 2
    assert len(list(impostor_pairs(items))) == 4


def test_make_dataset_validates_counts():
    with pytest.raises(ValueError):
        make_dataset(1, 5, seed=0)
    with pytest.raises(ValueError):
        make_dataset(5, 1, seed=0)


def test_export_and_load_round_trip(tmp_path):
    ds = make_dataset(3, 3, seed=5)
    root = tmp_path / "corpus"
    export_dataset(ds, root)
    back = load_dataset(root)
    assert back.identity_ids() == ds.identity_ids()
    assert back.content_hash() == ds.content_hash()
    for iid in ds.identity_ids():
        for a, b in zip(ds.samples_of(iid), back.samples_of(iid)):
            assert np.array_equal(a.image, b.image)
            assert a.box == b.box and a.eyes == b.eyes
