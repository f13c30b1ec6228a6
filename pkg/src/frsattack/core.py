"""Shared types, image I/O, and the raw float32 array format.

Images are numpy float32 arrays of shape (H, W, C) with values in [0, 1],
C = 3, and both sides at least 12 pixels. Arrays are persisted as raw
little-endian float32 bytes next to a small text header so that runs can
be diffed and replayed bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

MIN_SIDE = 12

MODES = ("di", "de", "ue")
MASK_STYLES = ("thin", "large")

# modes that keep the face detectable (detection term pushes probabilities up)
DETECTABLE_MODES = ("di", "de")


class FormatError(ValueError):
    """Unsupported or malformed input file."""


class CorruptionError(ValueError):
    """Persisted array/checkpoint data does not match its header."""


class ConfigError(ValueError):
    """Invalid attack configuration."""


class NumericError(RuntimeError):
    """Non-finite value encountered during optimization."""


def check_image(arr: np.ndarray, min_side: int = MIN_SIDE) -> np.ndarray:
    """Validate an image array and return it as contiguous float32."""
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError(f"expected (H, W, 3) image, got shape {a.shape}")
    if a.shape[0] < min_side or a.shape[1] < min_side:
        raise FormatError(f"image sides must be >= {min_side}, got {a.shape[:2]}")
    a = np.ascontiguousarray(a, dtype=np.float32)
    if not np.isfinite(a).all():
        raise FormatError("image contains non-finite values")
    if a.min() < 0.0 or a.max() > 1.0:
        raise FormatError("image values outside [0, 1]")
    return a


def load_image(path: str | Path) -> np.ndarray:
    """Load a PNG (or other PIL-readable) image as float32 in [0, 1]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except OSError as e:
        raise FormatError(f"cannot decode image {path}: {e}") from e
    if img.mode in ("RGBA", "LA", "PA"):
        raise FormatError(f"alpha channels unsupported: {path} has mode {img.mode}")
    if img.mode != "RGB":
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.uint8).astype(np.float32) / 255.0
    return check_image(arr)


def save_image(arr: np.ndarray, path: str | Path) -> None:
    """Quantize to 8-bit and write a PNG."""
    a = check_image(arr)
    q = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(Path(path), format="PNG")


def quantize8(arr: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid, so in-memory values match a PNG round trip."""
    return (np.round(np.clip(arr, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".hdr")


def save_array(arr: np.ndarray, path: str | Path) -> None:
    """Write raw little-endian float32 bytes plus a text header.

    The header records shape, dtype, and element order. Round trip is
    bit-exact for finite float32 input.
    """
    path = Path(path)
    # asarray keeps 0-d shapes; ascontiguousarray would promote them to (1,)
    a = np.asarray(arr, dtype="<f4", order="C")
    if a.size and not np.isfinite(a).all():
        raise ValueError("refusing to persist non-finite array")
    path.write_bytes(a.tobytes(order="C"))
    hdr = "shape: {}\ndtype: float32\norder: row-major\n".format(
        " ".join(str(d) for d in a.shape)
    )
    _header_path(path).write_text(hdr)


def load_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    hdr_path = _header_path(path)
    if not hdr_path.exists():
        raise CorruptionError(f"missing header {hdr_path}")
    fields = {}
    for line in hdr_path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    if fields.get("dtype") != "float32":
        raise CorruptionError(f"unsupported dtype {fields.get('dtype')!r} in {hdr_path}")
    if fields.get("order") != "row-major":
        raise CorruptionError(f"unsupported order {fields.get('order')!r} in {hdr_path}")
    if "shape" not in fields:
        raise CorruptionError(f"header {hdr_path} lacks a shape field")
    try:
        shape = tuple(int(t) for t in fields["shape"].split())
    except ValueError as e:
        raise CorruptionError(f"bad shape in {hdr_path}: {fields['shape']!r}") from e
    raw = path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(raw) != expected:
        raise CorruptionError(
            f"{path}: payload is {len(raw)} bytes, header implies {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_checkpoint(
    dir_path: str | Path, kind: str, config: dict, arrays: dict
) -> None:
    """Persist named float32 arrays plus a JSON architecture manifest."""
    import json

    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": kind,
        "config": config,
        "params": {name: f"{name}.f32" for name in sorted(arrays)},
    }
    (d / "arch.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    for name, arr in arrays.items():
        save_array(np.asarray(arr, dtype=np.float32), d / f"{name}.f32")


def load_checkpoint(dir_path: str | Path):
    """Return (kind, config, arrays) persisted by save_checkpoint."""
    import json

    d = Path(dir_path)
    if not d.exists():
        raise FileNotFoundError(f"no checkpoint directory {d}")
    arch = d / "arch.json"
    if not arch.exists():
        raise CorruptionError(f"{d} is not a checkpoint directory (no arch.json)")
    manifest = json.loads(arch.read_text())
    for key in ("kind", "config", "params"):
        if key not in manifest:
            raise CorruptionError(f"checkpoint manifest {arch} lacks {key!r}")
    arrays = {}
    for name, rel in manifest["params"].items():
        arrays[name] = load_array(d / rel)
    return manifest["kind"], manifest["config"], arrays


def checkpoint_hash(dir_path: str | Path) -> str:
    """Stable content hash of a checkpoint directory."""
    import hashlib

    d = Path(dir_path)
    h = hashlib.sha256()
    h.update((d / "arch.json").read_bytes())
    for p in sorted(d.glob("*.f32")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass(frozen=True)
class AdversarialNoise:
    """Additive perturbation confined to a binary mask.

    delta: (H, W, 3) float32, zero wherever mask is zero.
    mask:  (H, W) bool support.
    """

    delta: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        delta = np.ascontiguousarray(self.delta, dtype=np.float32)
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if delta.ndim != 3 or delta.shape[2] != 3 or delta.shape[:2] != mask.shape:
            raise ValueError(
                f"delta shape {delta.shape} incompatible with mask {mask.shape}"
            )
        if not np.isfinite(delta).all():
            raise ValueError("noise contains non-finite values")
        if delta[~mask].any():
            raise ValueError("noise has support outside its mask")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "mask", mask)


def apply_noise(image: np.ndarray, noise: AdversarialNoise | np.ndarray) -> np.ndarray:
    """image + delta, clamped to the valid pixel range."""
    delta = noise.delta if isinstance(noise, AdversarialNoise) else noise
    img = check_image(image)
    if delta.shape != img.shape:
        raise ValueError(f"noise shape {delta.shape} does not match image {img.shape}")
    return np.clip(img + delta, 0.0, 1.0).astype(np.float32)


@dataclass
class Identity:
    """A labeled subject with one or more face images."""

    id: str
    images: list = field(default_factory=list)

    def __post_init__(self):
        if not self.id:
            raise ValueError("identity id must be non-empty")


# mode-dependent defaults: detection-loss weight, margin, and patch style.
# ue gets a heavier detection weight because suppressing every window below
# tau is a harder goal than keeping one window above it.
_DEFAULT_ALPHA = {"di": 1.0, "de": 1.0, "ue": 2.0}
_DEFAULT_MARGIN = {"di": 0.95, "de": 0.95, "ue": 0.30}
_DEFAULT_MASK = {"di": "large", "de": "large", "ue": "thin"}


@dataclass(frozen=True)
class AttackConfig:
    """Everything a single attack run needs besides the models and images.

    mode: 'di' keeps the face detectable and impersonates a target,
          'de' keeps it detectable while evading the matcher,
          'ue' hides the face from the detector while evading the matcher.
    alpha, margin_k, and mask_size default per mode when left unset.
    """

    mode: str
    alpha: float | None = None
    exponent_s: float = 3.0
    margin_k: float | None = None
    detect_threshold_tau: float = 0.6
    p_norm: float = 2.0
    iterations: int = 500
    step_size: float = 4.0 / 255.0
    seed: int = 0
    repeats: int = 3
    mask_size: str | None = None

    def __post_init__(self):
        mode = str(self.mode).lower()
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.alpha is None:
            object.__setattr__(self, "alpha", _DEFAULT_ALPHA[mode])
        if self.margin_k is None:
            object.__setattr__(self, "margin_k", _DEFAULT_MARGIN[mode])
        if self.mask_size is None:
            object.__setattr__(self, "mask_size", _DEFAULT_MASK[mode])
        if self.mask_size not in MASK_STYLES:
            raise ConfigError(f"mask_size must be one of {MASK_STYLES}")
        if not self.alpha >= 0.0:
            raise ConfigError("alpha must be >= 0")
        if not self.exponent_s > 0.0:
            raise ConfigError("exponent_s must be > 0")
        if not 0.0 <= self.margin_k <= 1.0:
            raise ConfigError("margin_k must lie in [0, 1]")
        if not 0.0 < self.detect_threshold_tau < 1.0:
            raise ConfigError("detect_threshold_tau must lie in (0, 1)")
        if not self.p_norm > 0.0:
            raise ConfigError("p_norm must be > 0")
        # iterations == 0 is allowed and yields the random-init patch
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ConfigError("iterations must be a non-negative integer")
        if not self.step_size > 0.0:
            raise ConfigError("step_size must be > 0")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if int(self.repeats) != self.repeats or self.repeats < 1:
            raise ConfigError("repeats must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "mode" not in d:
            raise ConfigError("config requires a mode")
        kwargs = dict(d)
        for key in ("iterations", "seed", "repeats"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = int(kwargs[key])
        return cls(**kwargs)
