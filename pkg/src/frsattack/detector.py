"""Sliding-window face detector with fixed proposal-stage geometry.

The model is fully convolutional: every output cell scores one 12x12
pixel window, windows are spaced 4 pixels apart, and there is no padding,
so the probability grid for a WxH image has
    m = floor((W - 12) / 4) + 1 columns of windows along x,
    n = floor((H - 12) / 4) + 1 rows along y.
Grids are indexed (k, l) with k along x. Any object exposing
``prob_grid(img) -> (m, n) tensor`` differentiable in the image can stand
in for the reference model, e.g. to wrap a stronger detector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import check_image, load_checkpoint, save_checkpoint

WINDOW = 12
STRIDE = 4


def grid_dims(width: int, height: int) -> tuple:
    """Number of scored windows (m, n) along x and y."""
    if width < WINDOW or height < WINDOW:
        raise ValueError(f"image must be at least {WINDOW}x{WINDOW}, got {width}x{height}")
    m = (width - WINDOW) // STRIDE + 1
    n = (height - WINDOW) // STRIDE + 1
    return m, n


def window_box(k: int, l: int) -> tuple:
    """Pixel box (x0, y0, x1, y1) of grid cell (k, l), exclusive high edge."""
    return (k * STRIDE, l * STRIDE, k * STRIDE + WINDOW, l * STRIDE + WINDOW)


@dataclass
class DetectionMap:
    """Window probabilities for one image, probs[k, l] in [0, 1]."""

    probs: np.ndarray  # (m, n)
    image_size: tuple  # (H, W)

    @property
    def grid(self) -> tuple:
        return self.probs.shape


@dataclass
class ActiveWindowMask:
    """Windows of a clean image whose probability reached tau."""

    active: np.ndarray  # (m, n) bool
    tau: float


@dataclass
class Detection:
    detected: bool
    max_prob: float
    box: tuple  # window of the highest-probability cell


class TinyPNet(nn.Module):
    """Three-conv proposal network: receptive field 12, stride 4, sigmoid head."""

    def __init__(self, c1: int = 16, c2: int = 32):
        super().__init__()
        self.c1, self.c2 = c1, c2
        self.net = nn.Sequential(
            nn.Conv2d(3, c1, kernel_size=4, stride=4),
            nn.ReLU(),
            nn.Conv2d(c1, c2, kernel_size=2),
            nn.ReLU(),
            nn.Conv2d(c2, 1, kernel_size=2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logit grid, x is (B, 3, H, W), output (B, 1, n, m)."""
        return self.net(x)

    def prob_grid(self, img: torch.Tensor) -> torch.Tensor:
        """(m, n) window probabilities for one (H, W, 3) image tensor."""
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) tensor, got {tuple(img.shape)}")
        x = img.permute(2, 0, 1).unsqueeze(0)
        logits = self.forward(x)[0, 0]  # (n, m)
        return torch.sigmoid(logits).T


def probability_map(model, img: np.ndarray) -> DetectionMap:
    """Score every window of an image. Not a gradient path; use prob_grid."""
    a = check_image(img)
    grid_dims(a.shape[1], a.shape[0])
    with torch.no_grad():
        probs = model.prob_grid(torch.from_numpy(a))
    return DetectionMap(probs=probs.numpy().astype(np.float32), image_size=a.shape[:2])


def active_windows(model, img: np.ndarray, tau: float) -> ActiveWindowMask:
    dm = probability_map(model, img)
    return ActiveWindowMask(active=dm.probs >= tau, tau=float(tau))


def detect(model, img: np.ndarray, tau: float) -> Detection:
    """Face present iff any window reaches tau; box is the argmax window.

    Ties resolve to the first cell in row-major order of the (m, n) grid.
    """
    dm = probability_map(model, img)
    flat = int(np.argmax(dm.probs))
    k, l = np.unravel_index(flat, dm.probs.shape)
    p = float(dm.probs[k, l])
    return Detection(detected=p >= tau, max_prob=p, box=window_box(int(k), int(l)))


# window-center distance to the nearest eye decides the label: faces are
# "present" exactly where an intact eye is visible off-center in the
# window, so occluding the eye region is what suppresses detection.
# Eye-centered windows are negative: a 12x12 box reaches at most ~8.5 px
# from its center, which can be short of a 0.45*IED rim, so only windows
# that also see rim pixels are allowed to fire.
POS_IN_RADIUS = 2.9
POS_OUT_RADIUS = 8.0
IGNORE_RADIUS = 11.0
HARD_NEG_RADIUS = 26.0
HARD_NEG_WEIGHT = 6.0


def _window_centers(m: int, n: int) -> tuple:
    cx = np.arange(m, dtype=np.float32) * STRIDE + (WINDOW - 1) / 2.0
    cy = np.arange(n, dtype=np.float32) * STRIDE + (WINDOW - 1) / 2.0
    return np.meshgrid(cx, cy)  # (n, m) each


def _label_grid(eyes, h: int, w: int, occluded: bool = False) -> tuple:
    """Per-window target and weight in conv orientation (n, m).

    A window is positive when its center sits just off an eye, negative
    when it is centered on one, ignored in a band beyond the positive
    annulus, negative elsewhere. When the eyes have been occluded the
    whole eye region turns negative.
    """
    m, n = grid_dims(w, h)
    target = np.zeros((1, n, m), dtype=np.float32)
    weight = np.ones((1, n, m), dtype=np.float32)
    if eyes is None:
        return target, weight
    wx, wy = _window_centers(m, n)
    d = np.full((n, m), np.inf, dtype=np.float32)
    for ex, ey in eyes:
        d = np.minimum(d, np.hypot(wx - ex, wy - ey))
    # in-face negatives look a lot like positives, so they carry extra weight
    hard = (d > IGNORE_RADIUS) & (d <= HARD_NEG_RADIUS)
    if occluded:
        weight[0][d <= HARD_NEG_RADIUS] = HARD_NEG_WEIGHT
        return target, weight  # every window negative
    target[0][(d > POS_IN_RADIUS) & (d <= POS_OUT_RADIUS)] = 1.0
    weight[0][d <= POS_IN_RADIUS] = HARD_NEG_WEIGHT
    weight[0][(d > POS_OUT_RADIUS) & (d <= IGNORE_RADIUS)] = 0.0
    weight[0][hard] = HARD_NEG_WEIGHT
    return target, weight


def _occlude_eyes(img: np.ndarray, eyes, rng: np.random.Generator) -> np.ndarray:
    """Cover both eyes with uniform-noise disks scaled like patch rims."""
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    out = img.copy()
    (lx, ly), (rx, ry) = eyes
    radius = 0.45 * float(np.hypot(rx - lx, ry - ly))
    for ex, ey in eyes:
        disk = np.hypot(xx - ex, yy - ey) <= radius
        out[disk] = rng.uniform(0.0, 1.0, size=(int(disk.sum()), 3)).astype(np.float32)
    return out


def _training_arrays(samples, h: int, w: int, rng: np.random.Generator) -> tuple:
    """Stack originals plus eye-occluded variants of the face samples."""
    images, targets, weights = [], [], []
    for s in samples:
        images.append(s.image)
        t, wt = _label_grid(s.eyes, h, w)
        targets.append(t)
        weights.append(wt)
        if s.eyes is not None:
            images.append(_occlude_eyes(s.image, s.eyes, rng))
            t, wt = _label_grid(s.eyes, h, w, occluded=True)
            targets.append(t)
            weights.append(wt)
    return (
        np.stack(images).transpose(0, 3, 1, 2),
        np.stack(targets),
        np.stack(weights),
    )


def train_detector(
    dataset,
    epochs: int = 30,
    seed: int = 0,
    lr: float = 2e-3,
    batch_size: int = 32,
    noise_std: float = 0.02,
) -> TinyPNet:
    """Fit the reference model with per-window binary cross entropy.

    Needs both face and background canvases; raises if negatives are
    missing. Deterministic in the seed.
    """
    if not dataset.negatives:
        raise ValueError("detector training requires background-only negatives")
    train_faces, train_negs, _, _ = dataset.detector_split()
    samples = list(train_faces) + list(train_negs)
    h, w = dataset.canvas
    torch.manual_seed(seed)
    model = TinyPNet()
    rng = np.random.default_rng(seed)
    images_np, targets_np, weights_np = _training_arrays(samples, h, w, rng)
    images = torch.from_numpy(images_np)
    targets = torch.from_numpy(targets_np)
    weights = torch.from_numpy(weights_np)
    n_pos = float((targets_np * weights_np).sum())
    n_neg = float(((1.0 - targets_np) * weights_np).sum())
    pos_weight = float(np.clip(n_neg / max(n_pos, 1.0), 1.0, 20.0))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = images.shape[0]
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = images[idx]
            if noise_std > 0:
                x = (x + noise_std * torch.randn(x.shape, generator=gen)).clamp(0, 1)
            logits = model(x)
            loss = nn.functional.binary_cross_entropy_with_logits(
                logits,
                targets[idx],
                weight=weights[idx],
                pos_weight=torch.tensor(pos_weight),
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def detection_rate(model, samples, tau: float) -> float:
    """Fraction of face samples detected at threshold tau."""
    hits = sum(detect(model, s.image, tau).detected for s in samples)
    return hits / max(len(samples), 1)


def false_positive_rate(model, negatives, tau: float) -> float:
    hits = sum(detect(model, s.image, tau).detected for s in negatives)
    return hits / max(len(negatives), 1)


def save_detector(model: TinyPNet, dir_path) -> None:
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(dir_path, "tiny_pnet", {"c1": model.c1, "c2": model.c2}, arrays)


def load_detector(dir_path) -> TinyPNet:
    kind, config, arrays = load_checkpoint(dir_path)
    if kind != "tiny_pnet":
        raise ValueError(f"checkpoint {dir_path} holds a {kind!r}, expected tiny_pnet")
    model = TinyPNet(**config)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model
