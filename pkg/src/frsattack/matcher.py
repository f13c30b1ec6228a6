"""Face matcher: differentiable crop, embedding model, verification.

Embeddings are unit-norm 32-d vectors of fixed 32x32 face crops. The
verification rule is distance <= theta_m under a Minkowski p-norm, with
theta_m calibrated at the equal error rate. Crops used by the attack and
for enrollment are fixed-size boxes centered on the detector's best
window, so gradients flow from the matcher loss back to image pixels
through ``crop_face``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import check_image, load_array, load_checkpoint, save_array, save_checkpoint
from .detector import STRIDE, WINDOW, detect, probability_map
from .synth import genuine_pairs, impostor_pairs

EMBED_DIM = 32
CROP_SIZE = 32


def crop_face_t(img: torch.Tensor, box, out_size: int = CROP_SIZE) -> torch.Tensor:
    """Differentiable bilinear crop-and-resize of an (H, W, 3) tensor.

    Sample points sit at output pixel centers mapped into the box, so a
    box spanning the full image at out_size == image size is the identity.
    Gradients flow to the input pixels; the box itself is not a variable.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) tensor, got {tuple(img.shape)}")
    h, w = int(img.shape[0]), int(img.shape[1])
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate box {box}")
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"box {box} outside {w}x{h} image")
    if out_size < 12:
        raise ValueError("crop output must be at least 12 pixels")
    sx = (x1 - x0) / out_size
    sy = (y1 - y0) / out_size
    xs = x0 + (torch.arange(out_size, dtype=img.dtype) + 0.5) * sx - 0.5
    ys = y0 + (torch.arange(out_size, dtype=img.dtype) + 0.5) * sy - 0.5
    x0f = torch.clamp(torch.floor(xs), 0, w - 1)
    y0f = torch.clamp(torch.floor(ys), 0, h - 1)
    wx = torch.clamp(xs - x0f, 0.0, 1.0)
    wy = torch.clamp(ys - y0f, 0.0, 1.0)
    xi0 = x0f.long()
    yi0 = y0f.long()
    xi1 = torch.clamp(xi0 + 1, max=w - 1)
    yi1 = torch.clamp(yi0 + 1, max=h - 1)
    wy_ = wy[:, None, None]
    wx_ = wx[None, :, None]
    top = img[yi0][:, xi0] * (1 - wx_) + img[yi0][:, xi1] * wx_
    bot = img[yi1][:, xi0] * (1 - wx_) + img[yi1][:, xi1] * wx_
    return top * (1 - wy_) + bot * wy_


def crop_face(img: np.ndarray, box, out_size: int = CROP_SIZE) -> np.ndarray:
    a = check_image(img)
    with torch.no_grad():
        out = crop_face_t(torch.from_numpy(a), box, out_size)
    return out.numpy()


class FaceEmbedder(nn.Module):
    """Small convnet mapping a 32x32 crop to a unit-norm embedding."""

    def __init__(self, dim: int = EMBED_DIM, crop_size: int = CROP_SIZE):
        super().__init__()
        self.dim = dim
        self.crop_size = crop_size
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 32, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.head = nn.Linear(32 * (crop_size // 8) ** 2, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x is (B, 3, crop, crop); returns (B, dim) unit-norm embeddings."""
        z = self.features(x)
        z = self.head(z.flatten(1))
        return nn.functional.normalize(z, p=2, dim=1)

    def embed_t(self, crop: torch.Tensor) -> torch.Tensor:
        """(crop, crop, 3) tensor to a (dim,) unit-norm embedding."""
        if crop.shape[0] != self.crop_size or crop.shape[1] != self.crop_size:
            raise ValueError(
                f"expected {self.crop_size}x{self.crop_size} crop, got {tuple(crop.shape)}"
            )
        return self.forward(crop.permute(2, 0, 1).unsqueeze(0))[0]


def embed(model, crop: np.ndarray) -> np.ndarray:
    a = check_image(crop)
    with torch.no_grad():
        e = model.embed_t(torch.from_numpy(a))
    return e.numpy().astype(np.float32)


def distance(a: np.ndarray, b: np.ndarray, p: float = 2.0) -> float:
    """Minkowski distance (sum |a-b|^p)^(1/p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not p > 0:
        raise ValueError("p must be > 0")
    return float(np.sum(np.abs(a - b) ** p) ** (1.0 / p))


@dataclass
class VerifyResult:
    match: bool
    dist: float


@dataclass
class Gallery:
    """Enrolled identities with the calibrated decision threshold."""

    embeddings: dict  # identity_id -> (dim,) unit-norm array
    threshold: float
    p_norm: float = 2.0
    eer: float | None = None


def verify(gallery: Gallery, probe: np.ndarray, claimed_id: str) -> VerifyResult:
    """Accept iff distance to the claimed enrollment is <= theta_m."""
    if claimed_id not in gallery.embeddings:
        raise KeyError(f"identity {claimed_id!r} is not enrolled")
    d = distance(probe, gallery.embeddings[claimed_id], gallery.p_norm)
    return VerifyResult(match=d <= gallery.threshold, dist=d)


@dataclass
class Calibration:
    threshold: float
    eer: float


def calibrate_threshold(genuine, impostor) -> Calibration:
    """Equal-error-rate threshold, the midpoint of the EER crossing.

    genuine/impostor are distance samples. FAR(t) counts impostor
    distances <= t, FRR(t) counts genuine distances > t.
    """
    gen = np.sort(np.asarray(list(genuine), dtype=np.float64))
    imp = np.sort(np.asarray(list(impostor), dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise ValueError("need non-empty genuine and impostor distance lists")
    cand = np.unique(np.concatenate([gen, imp]))
    fa = np.searchsorted(imp, cand, side="right") / imp.size
    fr = 1.0 - np.searchsorted(gen, cand, side="right") / gen.size
    diff = fa - fr  # nondecreasing in t
    i = int(np.argmax(diff >= 0))  # exists: diff at the largest candidate is 1
    if diff[i] == 0.0:
        j = i + 1
        while j < cand.size and fa[j] == fa[i] and fr[j] == fr[i]:
            j += 1
        hi = cand[j] if j < cand.size else cand[i]
        theta = float((cand[i] + hi) / 2.0)
        eer = float((fa[i] + fr[i]) / 2.0)
    else:
        # the rates jump past each other between candidates; average both sides
        fa_lo, fr_lo = (fa[i - 1], fr[i - 1]) if i > 0 else (0.0, 1.0)
        theta = float((cand[i - 1] + cand[i]) / 2.0) if i > 0 else float(cand[i])
        eer = float((fa_lo + fr_lo + fa[i] + fr[i]) / 4.0)
    if eer >= 0.5:
        warnings.warn("genuine and impostor distances are inseparable (EER >= 0.5)")
    return Calibration(threshold=theta, eer=eer)


def center_crop_box(cx: float, cy: float, image_shape, size: int = CROP_SIZE) -> tuple:
    """Integer size x size box centered near (cx, cy), shifted to fit."""
    h, w = image_shape[0], image_shape[1]
    if size > w or size > h:
        raise ValueError(f"crop {size} exceeds image {w}x{h}")
    x0 = int(round(cx - size / 2.0))
    y0 = int(round(cy - size / 2.0))
    x0 = min(max(x0, 0), w - size)
    y0 = min(max(y0, 0), h - size)
    return (x0, y0, x0 + size, y0 + size)


def pipeline_crop_box(detector, img: np.ndarray, size: int = CROP_SIZE) -> tuple:
    """Crop box the pipeline feeds the matcher.

    Centered on the probability-weighted centroid of the confident
    windows, which sits between the eyes on a detected face and is far
    more stable across images than the single argmax window. Falls back
    to the argmax window when nothing is confident.
    """
    dm = probability_map(detector, img)
    probs = dm.probs
    conf = probs >= 0.5
    if conf.any():
        ks, ls = np.nonzero(conf)
        w = probs[ks, ls]
        cx = float(np.sum(w * (ks * STRIDE + (WINDOW - 1) / 2.0)) / np.sum(w))
        cy = float(np.sum(w * (ls * STRIDE + (WINDOW - 1) / 2.0)) / np.sum(w))
    else:
        det = detect(detector, img, tau=0.5)
        x0, y0, x1, y1 = det.box
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    return center_crop_box(cx, cy + CROP_DY, img.shape, size)


# crops anchor below the eye midpoint so the mouth stays in frame
CROP_DY = 4.0


def _eye_midpoint(s) -> tuple:
    (lx, ly), (rx, ry) = s.eyes
    return (lx + rx) / 2.0, (ly + ry) / 2.0


def _train_crops(items, rng: np.random.Generator, size: int, jitter: int = 3):
    """Fixed-size crops centered near the eye midpoint with integer jitter.

    The deployed pipeline crops around the detector's confident-window
    centroid, which lands between the eyes, so training sees the same
    framing plus jitter covering the centroid's scatter.
    """
    crops, labels = [], []
    for iid, s in items:
        cx, cy = _eye_midpoint(s)
        cx += rng.integers(-jitter, jitter + 1)
        cy += CROP_DY + rng.integers(-jitter, jitter + 1)
        bx = center_crop_box(cx, cy, s.image.shape, size)
        crops.append(s.image[bx[1] : bx[3], bx[0] : bx[2]])
        labels.append(iid)
    return np.stack(crops), labels


def train_matcher(
    dataset,
    epochs: int = 30,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 32,
    margin: float = 0.5,
    noise_std: float = 0.02,
) -> FaceEmbedder:
    """Fit the embedder with a triplet margin loss over identity labels."""
    train_items, _ = dataset.matcher_split()
    per_id = {}
    for idx, (iid, _) in enumerate(train_items):
        per_id.setdefault(iid, []).append(idx)
    if len(per_id) < 2:
        raise ValueError("matcher training requires at least 2 identities")
    if any(len(v) < 2 for v in per_id.values()):
        raise ValueError("every identity needs at least 2 training images")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model = FaceEmbedder()
    crops, labels = _train_crops(train_items, rng, model.crop_size)
    images = torch.from_numpy(crops.transpose(0, 3, 1, 2))
    ids = list(per_id)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = images.shape[0]
    for _ in range(epochs):
        anchors = rng.permutation(n)
        pos = np.empty(n, dtype=np.int64)
        neg = np.empty(n, dtype=np.int64)
        for t, a in enumerate(anchors):
            same = per_id[labels[a]]
            p = a
            while p == a:
                p = same[rng.integers(len(same))]
            other = ids[rng.integers(len(ids))]
            while other == labels[a]:
                other = ids[rng.integers(len(ids))]
            pos[t] = p
            neg[t] = per_id[other][rng.integers(len(per_id[other]))]
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            batch = torch.cat(
                [images[anchors[sl]], images[pos[sl]], images[neg[sl]]]
            )
            if noise_std > 0:
                batch = (batch + noise_std * torch.randn(batch.shape, generator=gen)).clamp(0, 1)
            emb = model(batch)
            ea, ep, en = emb.chunk(3)
            loss = nn.functional.triplet_margin_loss(ea, ep, en, margin=margin, p=2)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def matcher_eer(model, dataset) -> Calibration:
    """Held-out EER with ground-truth eye-midpoint crops."""
    _, test_items = dataset.matcher_split()
    embs = []
    for iid, s in test_items:
        cx, cy = _eye_midpoint(s)
        bx = center_crop_box(cx, cy + CROP_DY, s.image.shape, CROP_SIZE)
        embs.append((iid, embed(model, s.image[bx[1] : bx[3], bx[0] : bx[2]])))
    gen = [distance(a[1], b[1]) for a, b in genuine_pairs(embs)]
    imp = [distance(a[1], b[1]) for a, b in impostor_pairs(embs)]
    return calibrate_threshold(gen, imp)


def build_gallery(matcher, detector, dataset, p_norm: float = 2.0) -> Gallery:
    """Enroll mean embeddings of detector-cropped training images.

    theta_m is calibrated on held-out verification pairs pushed through
    the same detect-crop-embed pipeline the attacks face.
    """
    train_items, test_items = dataset.matcher_split()

    def pipe_embed(s):
        bx = pipeline_crop_box(detector, s.image)
        return embed(matcher, s.image[bx[1] : bx[3], bx[0] : bx[2]])

    by_id = {}
    for iid, s in train_items:
        by_id.setdefault(iid, []).append(pipe_embed(s))
    embeddings = {}
    for iid, vecs in by_id.items():
        mean = np.mean(vecs, axis=0)
        norm = float(np.linalg.norm(mean))
        if norm == 0.0:
            raise ValueError(f"degenerate enrollment for {iid!r}")
        embeddings[iid] = (mean / norm).astype(np.float32)
    test_embs = [(iid, pipe_embed(s)) for iid, s in test_items]
    gen = [distance(a[1], b[1], p_norm) for a, b in genuine_pairs(test_embs)]
    imp = [distance(a[1], b[1], p_norm) for a, b in impostor_pairs(test_embs)]
    cal = calibrate_threshold(gen, imp)
    return Gallery(embeddings=embeddings, threshold=cal.threshold, p_norm=p_norm, eer=cal.eer)


def save_gallery(gallery: Gallery, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    refs = {}
    for iid, vec in sorted(gallery.embeddings.items()):
        ref = f"emb_{iid}.f32"
        save_array(vec, path.parent / ref)
        refs[iid] = ref
    doc = {
        "threshold": gallery.threshold,
        "p_norm": gallery.p_norm,
        "eer": gallery.eer,
        "identities": refs,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_gallery(path: str | Path) -> Gallery:
    path = Path(path)
    doc = json.loads(path.read_text())
    embeddings = {
        iid: load_array(path.parent / ref) for iid, ref in doc["identities"].items()
    }
    return Gallery(
        embeddings=embeddings,
        threshold=float(doc["threshold"]),
        p_norm=float(doc["p_norm"]),
        eer=None if doc.get("eer") is None else float(doc["eer"]),
    )


def save_matcher(model: FaceEmbedder, dir_path) -> None:
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(
        dir_path, "face_embedder", {"dim": model.dim, "crop_size": model.crop_size}, arrays
    )


def load_matcher(dir_path) -> FaceEmbedder:
    kind, config, arrays = load_checkpoint(dir_path)
    if kind != "face_embedder":
        raise ValueError(f"checkpoint {dir_path} holds a {kind!r}, expected face_embedder")
    model = FaceEmbedder(**config)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model
