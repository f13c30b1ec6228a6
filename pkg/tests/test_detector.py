"""Window-grid geometry and the untrained detector's differentiable surface."""

import numpy as np
import pytest
import torch

from frsattack.detector import (
    STRIDE,
    WINDOW,
    TinyPNet,
    active_windows,
    detect,
    grid_dims,
    load_detector,
    probability_map,
    save_detector,
    window_box,
)


def test_grid_dims_trivial_cases():
    assert grid_dims(12, 12) == (1, 1)
    assert grid_dims(16, 12) == (2, 1)
    assert grid_dims(15, 12) == (1, 1)
    assert grid_dims(48, 48) == (10, 10)
    assert grid_dims(64, 64) == (14, 14)


def test_grid_dims_matches_formula_exhaustively():
    for w in range(12, 65):
        for h in range(12, 65):
            m, n = grid_dims(w, h)
            assert m == (w - 12) // 4 + 1
            assert n == (h - 12) // 4 + 1


def test_grid_dims_rejects_small_images():
    with pytest.raises(ValueError):
        grid_dims(11, 12)
    with pytest.raises(ValueError):
        grid_dims(12, 11)


def test_window_box_geometry():
    assert window_box(0, 0) == (0, 0, 12, 12)
    assert window_box(2, 1) == (8, 4, 20, 16)
    x0, y0, x1, y1 = window_box(5, 3)
    assert x1 - x0 == WINDOW and y1 - y0 == WINDOW
    assert x0 == 5 * STRIDE and y0 == 3 * STRIDE


def test_model_output_matches_grid_dims():
    model = TinyPNet()
    rng = np.random.default_rng(0)
    for w, h in ((12, 12), (13, 17), (32, 24), (64, 64), (61, 35)):
        img = rng.uniform(size=(h, w, 3)).astype(np.float32)
        dm = probability_map(model, img)
        assert dm.probs.shape == grid_dims(w, h)
        assert dm.probs.min() >= 0.0 and dm.probs.max() <= 1.0


def test_receptive_field_is_exactly_12():
    # a pixel change outside a window's box must not move its score
    model = TinyPNet()
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    base = probability_map(model, img).probs
    poked = img.copy()
    poked[20:, 20:, :] = rng.uniform(size=(12, 12, 3)).astype(np.float32)
    after = probability_map(model, poked).probs
    assert after[0, 0] == base[0, 0]
    assert not np.array_equal(after, base)


def test_translation_by_stride_shifts_grid():
    model = TinyPNet()
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(48, 48, 3)).astype(np.float32)
    rolled = np.roll(img, (STRIDE, STRIDE), axis=(0, 1))
    a = probability_map(model, img).probs
    b = probability_map(model, rolled).probs
    # interior windows see identical pixels one grid step over
    assert np.allclose(a[:-1, :-1], b[1:, 1:], atol=1e-6)


def test_prob_grid_gradient_matches_finite_differences():
    model = TinyPNet()
    rng = np.random.default_rng(3)
    img = rng.uniform(0.2, 0.8, size=(20, 20, 3)).astype(np.float32)
    t = torch.from_numpy(img).double().requires_grad_(True)
    model.double()
    total = model.prob_grid(t).sum()
    total.backward()
    grad = t.grad.numpy()
    eps = 1e-5
    for _ in range(20):
        i = int(rng.integers(20))
        j = int(rng.integers(20))
        c = int(rng.integers(3))
        up = img.astype(np.float64).copy()
        dn = up.copy()
        up[i, j, c] += eps
        dn[i, j, c] -= eps
        with torch.no_grad():
            fu = float(model.prob_grid(torch.from_numpy(up)).sum())
            fd = float(model.prob_grid(torch.from_numpy(dn)).sum())
        fdg = (fu - fd) / (2 * eps)
        assert abs(fdg - grad[i, j, c]) < 1e-4 * max(1.0, abs(fdg))


def test_active_windows_threshold():
    model = TinyPNet()
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(24, 24, 3)).astype(np.float32)
    dm = probability_map(model, img)
    aw = active_windows(model, img, tau=0.5)
    assert np.array_equal(aw.active, dm.probs >= 0.5)
    assert aw.tau == 0.5


def test_detect_reports_argmax_window():
    model = TinyPNet()
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(28, 40, 3)).astype(np.float32)
    dm = probability_map(model, img)
    det = detect(model, img, tau=dm.probs.max() + 1e-6)
    assert not det.detected
    det2 = detect(model, img, tau=float(dm.probs.max()))
    assert det2.detected
    k, l = np.unravel_index(int(np.argmax(dm.probs)), dm.probs.shape)
    assert det2.box == window_box(int(k), int(l))
    assert det2.max_prob == dm.probs.max()


def test_detector_checkpoint_round_trip(tmp_path):
    model = TinyPNet(c1=4, c2=5)
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(24, 24, 3)).astype(np.float32)
    before = probability_map(model, img).probs
    save_detector(model, tmp_path / "det")
    back = load_detector(tmp_path / "det")
    assert back.c1 == 4 and back.c2 == 5
    after = probability_map(back, img).probs
    assert np.array_equal(before, after)
