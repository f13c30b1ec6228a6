"""Parametric face renderer and dataset builder.

Faces are flat-shaded ovals with two eye disks and a curved mouth on a
textured background. Appearance parameters are drawn per identity from a
seed; per-image jitter moves, rescales, and relights the face. Ground
truth boxes and eye centers come out of the renderer for free and anchor
both detector training labels and patch placement.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import FormatError, check_image, load_image, quantize8, save_image

MIN_CANVAS = 32


class RenderError(ValueError):
    """Face geometry does not fit the requested canvas."""


@dataclass(frozen=True)
class IdentitySpec:
    """Appearance parameters of one synthetic subject.

    All geometry is relative to S = min(canvas). Documented ranges:
      face_ax, face_ay   ellipse semi-axes, fractions of S: [0.26, 0.34] x [0.30, 0.38]
      eye_spacing        half inter-eye distance / face_ax: [0.36, 0.52]
      eye_radius         eye disk radius / face_ax: [0.11, 0.17]
      eye_height         eye line above face center / face_ay: [0.18, 0.32]
      mouth_width        mouth half width / face_ax: [0.35, 0.60]
      mouth_curve        vertical bow of the mouth, fraction of width: [-0.5, 0.5]
      skin, eye_tone     base intensities in [0.5, 0.95] and [0.03, 0.18];
                         skin carries a small RGB tint
    """

    seed: int
    face_ax: float
    face_ay: float
    eye_spacing: float
    eye_radius: float
    eye_height: float
    mouth_width: float
    mouth_curve: float
    skin: tuple
    eye_tone: float


def generate_identity(seed: int) -> IdentitySpec:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.58, 0.85)
    tint = rng.uniform(-0.08, 0.08, size=3)
    skin = tuple(float(np.clip(base + t, 0.50, 0.95)) for t in tint)
    return IdentitySpec(
        seed=seed,
        face_ax=float(rng.uniform(0.26, 0.34)),
        face_ay=float(rng.uniform(0.30, 0.38)),
        eye_spacing=float(rng.uniform(0.36, 0.52)),
        eye_radius=float(rng.uniform(0.11, 0.17)),
        eye_height=float(rng.uniform(0.18, 0.32)),
        mouth_width=float(rng.uniform(0.35, 0.60)),
        mouth_curve=float(rng.uniform(-0.5, 0.5)),
        skin=skin,
        eye_tone=float(rng.uniform(0.03, 0.18)),
    )


@dataclass
class Sample:
    """One rendered canvas with its ground truth, if a face is present."""

    image: np.ndarray
    box: tuple | None  # (x0, y0, x1, y1), exclusive high edge
    eyes: tuple | None  # ((lx, ly), (rx, ry)) pixel coordinates
    identity: str | None = None


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.22, 0.38)
    coarse = rng.uniform(-0.09, 0.09, size=(6, 6, 3)).astype(np.float32)
    up = Image.fromarray(((coarse + 0.5) * 255).astype(np.uint8), mode="RGB")
    up = up.resize((w, h), Image.BILINEAR)
    tex = np.asarray(up, dtype=np.float32) / 255.0 - 0.5
    grain = rng.normal(0.0, 0.015, size=(h, w, 3)).astype(np.float32)
    return np.clip(base + tex + grain, 0.0, 1.0).astype(np.float32)


def render(
    spec: IdentitySpec,
    jitter_seed: int,
    canvas: tuple = (64, 64),
    with_face: bool = True,
) -> Sample:
    """Render one canvas. Deterministic in (spec, jitter_seed, canvas)."""
    h, w = int(canvas[0]), int(canvas[1])
    if h < MIN_CANVAS or w < MIN_CANVAS:
        raise RenderError(f"canvas must be at least {MIN_CANVAS}x{MIN_CANVAS}, got {h}x{w}")
    rng = np.random.default_rng(jitter_seed)
    img = _background(rng, h, w)
    if not with_face:
        return Sample(image=quantize8(img), box=None, eyes=None)

    s = float(min(h, w))
    scale = rng.uniform(0.90, 1.10)
    cx = w / 2.0 + rng.uniform(-0.05, 0.05) * s
    cy = h / 2.0 + rng.uniform(-0.05, 0.05) * s
    glow = rng.uniform(-0.06, 0.06)

    ax = spec.face_ax * s * scale
    ay = spec.face_ay * s * scale
    if cx - ax < 1 or cx + ax > w - 1 or cy - ay < 1 or cy + ay > h - 1:
        raise RenderError("canvas too small for the jittered face")

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    u2 = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    face = u2 <= 1.0

    skin = np.clip(np.asarray(spec.skin, dtype=np.float32) + glow, 0.0, 1.0)
    shade = (1.0 - 0.18 * u2)[..., None]  # mild radial falloff inside the oval
    img = np.where(face[..., None], skin[None, None, :] * shade, img)

    eye_y = cy - spec.eye_height * ay
    eye_dx = spec.eye_spacing * ax
    r_eye = spec.eye_radius * ax
    eyes = ((cx - eye_dx, eye_y), (cx + eye_dx, eye_y))
    tone = np.clip(spec.eye_tone + glow * 0.5, 0.0, 1.0)
    for ex, ey in eyes:
        disk = (xx - ex) ** 2 + (yy - ey) ** 2 <= r_eye**2
        img = np.where(disk[..., None], np.float32(tone), img)

    mouth_y = cy + 0.45 * ay
    mw = spec.mouth_width * ax
    rel = (xx - cx) / max(mw, 1e-6)
    curve_y = mouth_y + spec.mouth_curve * mw * (rel**2 - 0.5)
    band = (np.abs(yy - curve_y) <= 1.2) & (np.abs(xx - cx) <= mw)
    mouth_col = np.clip(
        np.asarray([0.35, 0.15, 0.18], dtype=np.float32) + glow, 0.0, 1.0
    )
    img = np.where(band[..., None], mouth_col[None, None, :], img)

    box = (
        int(np.floor(cx - ax)),
        int(np.floor(cy - ay)),
        int(np.ceil(cx + ax)),
        int(np.ceil(cy + ay)),
    )
    img = quantize8(np.clip(img, 0.0, 1.0))
    return Sample(image=img, box=box, eyes=eyes)


BACKGROUND_DIR = "_background"


@dataclass
class Dataset:
    """Rendered identities plus background-only negatives.

    The detector split is identity-disjoint (held-out subjects and
    backgrounds); the matcher split holds out images within each
    identity so verification pairs share identities with training.
    """

    identities: list  # list of (identity_id, list[Sample])
    negatives: list  # list[Sample]
    canvas: tuple
    seed: int

    def identity_ids(self) -> list:
        return [iid for iid, _ in self.identities]

    def samples_of(self, identity_id: str) -> list:
        for iid, samples in self.identities:
            if iid == identity_id:
                return samples
        raise KeyError(f"unknown identity {identity_id!r}")

    def detector_split(self, train_frac: float = 0.8):
        """(train_faces, train_negs, test_faces, test_negs), identity-disjoint."""
        n_train = max(1, int(round(len(self.identities) * train_frac)))
        n_train = min(n_train, len(self.identities) - 1)
        train_faces = [s for _, ss in self.identities[:n_train] for s in ss]
        test_faces = [s for _, ss in self.identities[n_train:] for s in ss]
        nb = max(1, min(int(round(len(self.negatives) * train_frac)), len(self.negatives) - 1))
        return train_faces, self.negatives[:nb], test_faces, self.negatives[nb:]

    def matcher_split(self, train_frac: float = 0.8):
        """Per-identity image split: (train, test) lists of (identity_id, Sample)."""
        train, test = [], []
        for iid, samples in self.identities:
            k = max(1, min(int(round(len(samples) * train_frac)), len(samples) - 1))
            train.extend((iid, s) for s in samples[:k])
            test.extend((iid, s) for s in samples[k:])
        return train, test

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for iid, samples in self.identities:
            h.update(iid.encode())
            for s in samples:
                h.update(s.image.tobytes())
                h.update(repr((s.box, s.eyes)).encode())
        for s in self.negatives:
            h.update(s.image.tobytes())
        return h.hexdigest()


def genuine_pairs(items: list) -> list:
    """All same-identity pairs of (identity_id, Sample) items."""
    out = []
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            if items[i][0] == items[j][0]:
                out.append((items[i], items[j]))
    return out


def impostor_pairs(items: list) -> list:
    """All cross-identity pairs of (identity_id, Sample) items."""
    out = []
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            if items[i][0] != items[j][0]:
                out.append((items[i], items[j]))
    return out


def make_dataset(
    n_identities: int,
    images_per_identity: int,
    canvas: tuple = (64, 64),
    seed: int = 0,
    n_negatives: int | None = None,
) -> Dataset:
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    if images_per_identity < 2:
        raise ValueError("need at least 2 images per identity")
    if n_negatives is None:
        n_negatives = max(8, n_identities)
    identities = []
    for i in range(n_identities):
        spec = generate_identity(seed * 100003 + i)
        iid = f"id{i:03d}"
        samples = []
        for j in range(images_per_identity):
            js = (seed * 1000003 + i) * 1013 + j
            sample = render(spec, js, canvas)
            sample.identity = iid
            samples.append(sample)
        identities.append((iid, samples))
    negatives = []
    for t in range(n_negatives):
        js = (seed * 1000003 + 777_777) * 1013 + t
        spec = generate_identity(0)  # unused in background mode
        negatives.append(render(spec, js, canvas, with_face=False))
    return Dataset(identities=identities, negatives=negatives, canvas=(int(canvas[0]), int(canvas[1])), seed=seed)


def export_dataset(ds: Dataset, root: str | Path) -> None:
    """Write <root>/<identity>/<index>.png plus a landmarks.json per directory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for iid, samples in ds.identities:
        d = root / iid
        d.mkdir(exist_ok=True)
        landmarks = {}
        for j, s in enumerate(samples):
            save_image(s.image, d / f"{j}.png")
            landmarks[str(j)] = {
                "box": list(s.box),
                "eyes": [list(map(float, e)) for e in s.eyes],
            }
        (d / "landmarks.json").write_text(json.dumps(landmarks, indent=1, sort_keys=True))
    bg = root / BACKGROUND_DIR
    bg.mkdir(exist_ok=True)
    landmarks = {}
    for j, s in enumerate(ds.negatives):
        save_image(s.image, bg / f"{j}.png")
        landmarks[str(j)] = {"box": None, "eyes": None}
    (bg / "landmarks.json").write_text(json.dumps(landmarks, indent=1, sort_keys=True))
    meta = {"canvas": list(ds.canvas), "seed": ds.seed}
    (root / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise FormatError(f"{root} is not a dataset directory (no dataset.json)")
    meta = json.loads(meta_path.read_text())
    identities = []
    for d in sorted(p for p in root.iterdir() if p.is_dir() and p.name != BACKGROUND_DIR):
        landmarks = json.loads((d / "landmarks.json").read_text())
        samples = []
        for j in sorted(landmarks, key=int):
            entry = landmarks[j]
            img = load_image(d / f"{j}.png")
            box = tuple(entry["box"]) if entry["box"] else None
            eyes = tuple(tuple(e) for e in entry["eyes"]) if entry["eyes"] else None
            samples.append(Sample(image=img, box=box, eyes=eyes, identity=d.name))
        identities.append((d.name, samples))
    negatives = []
    bg = root / BACKGROUND_DIR
    if bg.exists():
        landmarks = json.loads((bg / "landmarks.json").read_text())
        for j in sorted(landmarks, key=int):
            negatives.append(Sample(image=load_image(bg / f"{j}.png"), box=None, eyes=None))
    return Dataset(
        identities=identities,
        negatives=negatives,
        canvas=tuple(meta["canvas"]),
        seed=int(meta["seed"]),
    )
