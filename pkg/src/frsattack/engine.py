"""Masked signed-gradient attack against detector and matcher jointly.

One run: build the eyeglass mask from the source's eye landmarks, draw a
random init patch, then iterate projected gradient descent on
alpha * detection_term + matcher_term. The detection term sees the
window grid of the perturbed image against the active-window mask frozen
from the clean image; the matcher term sees the embedding of a crop
whose box is also frozen from the clean detection. The lowest-loss
iterate wins. Pixel feasibility doubles as the perturbation budget: the
patched image is clamped to [0, 1] every step and the patch may use that
whole range.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (
    AdversarialNoise,
    AttackConfig,
    ConfigError,
    NumericError,
    apply_noise,
    check_image,
    load_array,
    load_image,
    save_array,
    save_image,
)
from .detector import active_windows, grid_dims
from .losses import (
    LossBreakdown,
    det_loss_detectable,
    det_loss_evasive,
    evasion_loss,
    imper_loss,
    total_loss,
)
from .masks import eyeglass_mask, random_patch
from .matcher import crop_face_t, embed, pipeline_crop_box

RUN_SCHEMA = 1


@dataclass
class AttackRun:
    """Everything produced by one attack, enough to replay and evaluate it."""

    mode: str
    config: AttackConfig
    source_id: str | None = None
    other_id: str | None = None
    source_image: np.ndarray | None = None
    other_image: np.ndarray | None = None
    init_image: np.ndarray | None = None
    adv_image: np.ndarray | None = None
    noise: AdversarialNoise | None = None
    eyes: tuple | None = None
    crop_box: tuple | None = None
    active: np.ndarray | None = None
    trace: list = field(default_factory=list)
    best_iter: int = 0
    wall_time_s: float = 0.0
    error: str | None = None
    # batch bookkeeping: which job and which repeat produced this run
    job_index: int = 0
    repeat: int = 0


@dataclass
class AttackJob:
    """A batch element: who attacks whom, with the source's eye anchors."""

    source: np.ndarray
    other: np.ndarray
    eyes: tuple
    source_id: str | None = None
    other_id: str | None = None


def pgd_step(
    delta: np.ndarray,
    grad: np.ndarray,
    step_size: float,
    source: np.ndarray,
    mask: np.ndarray,
) -> np.ndarray:
    """One signed-gradient descent step, projected onto mask and pixel range."""
    m3 = mask[..., None].astype(np.float32)
    d = delta - step_size * np.sign(grad, dtype=np.float32)
    d *= m3
    d = np.clip(source + d, 0.0, 1.0) - source
    d *= m3
    return d.astype(np.float32)


def _other_embedding(detector, matcher, other: np.ndarray) -> np.ndarray:
    box = pipeline_crop_box(detector, other)
    crop = other[box[1] : box[3], box[0] : box[2]]
    return embed(matcher, crop)


def generate(
    detector,
    matcher,
    source: np.ndarray,
    other: np.ndarray,
    mode: str,
    config: AttackConfig,
    eyes,
    matcher_weight: float = 1.0,
) -> AttackRun:
    """Run one attack on a source image.

    other is the impersonation target's image in di mode and the
    registered image of the source subject in de/ue modes. eyes are the
    source's eye centers, anchoring the patch mask.
    """
    if mode != config.mode:
        raise ConfigError(f"mode argument {mode!r} disagrees with config.mode {config.mode!r}")
    source = check_image(source)
    other = check_image(other)
    t_start = time.perf_counter()

    active = active_windows(detector, source, config.detect_threshold_tau)
    crop_box = pipeline_crop_box(detector, source)
    other_emb = _other_embedding(detector, matcher, other)

    mask = eyeglass_mask(eyes, source.shape[:2], config.mask_size)
    init = random_patch(mask, config.seed)
    delta = init.delta.copy()

    source_t = torch.from_numpy(source)
    active_t = torch.from_numpy(active.active.astype(np.float32))
    other_t = torch.from_numpy(other_emb)
    detectable = mode in ("di", "de")

    trace = []
    best_total = np.inf
    best_delta = delta.copy()
    best_iter = 0
    for i in range(config.iterations):
        delta_t = torch.from_numpy(delta).requires_grad_(True)
        x = torch.clamp(source_t + delta_t, 0.0, 1.0)
        probs = detector.prob_grid(x)
        if detectable:
            det_term = det_loss_detectable(probs, active_t, config.margin_k, config.exponent_s)
        else:
            det_term = det_loss_evasive(probs, active_t, config.margin_k, config.exponent_s)
        crop = crop_face_t(x, crop_box)
        emb = matcher.embed_t(crop)
        if mode == "di":
            match_term = imper_loss(other_t, emb, config.p_norm)
        else:
            match_term = evasion_loss(other_t, emb, config.p_norm)
        objective = config.alpha * det_term + matcher_weight * match_term
        breakdown = total_loss(
            mode,
            float(det_term.detach()),
            matcher_weight * float(match_term.detach()),
            config.alpha,
        )
        trace.append(breakdown)
        if breakdown.total < best_total:
            best_total = breakdown.total
            best_delta = delta.copy()
            best_iter = i
        (grad,) = torch.autograd.grad(objective, delta_t)
        grad = grad.numpy()
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient at iteration {i}")
        delta = pgd_step(delta, grad, config.step_size, source, mask.mask)

    noise = AdversarialNoise(delta=best_delta, mask=mask.mask)
    return AttackRun(
        mode=mode,
        config=config,
        source_image=source,
        other_image=other,
        init_image=apply_noise(source, init),
        adv_image=apply_noise(source, noise),
        noise=noise,
        eyes=mask.eyes,
        crop_box=crop_box,
        active=active.active,
        trace=trace,
        best_iter=best_iter,
        wall_time_s=time.perf_counter() - t_start,
    )


def run_seed(base_seed: int, job_index: int, repeat: int) -> int:
    """Per-run seed: unique per (job, repeat) for any sane repeat count."""
    return base_seed + 7919 * job_index + repeat


def generate_batch(
    detector,
    matcher,
    jobs,
    mode: str,
    config: AttackConfig,
    repeats: int | None = None,
    workers: int = 1,
    matcher_weight: float = 1.0,
) -> list:
    """Run every job `repeats` times. Per-run failures are recorded, not raised."""
    if not jobs:
        raise ConfigError("no attack jobs given")
    if repeats is None:
        repeats = config.repeats
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")

    def one(job, j, r):
        # the stored config reflects the effective repeat count and per-run seed
        cfg = dataclasses.replace(config, seed=run_seed(config.seed, j, r), repeats=repeats)
        try:
            run = generate(
                detector, matcher, job.source, job.other, mode, cfg, job.eyes,
                matcher_weight=matcher_weight,
            )
            run.source_id = job.source_id
            run.other_id = job.other_id
        except Exception as e:  # noqa: BLE001 - recorded per run
            run = AttackRun(
                mode=mode, config=cfg, source_id=job.source_id,
                other_id=job.other_id, error=f"{type(e).__name__}: {e}",
            )
        run.job_index = j
        run.repeat = r
        return run

    tasks = [(job, j, r) for j, job in enumerate(jobs) for r in range(repeats)]
    if workers <= 1:
        return [one(*t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(one, *t) for t in tasks]
        return [f.result() for f in futs]


def save_run(run: AttackRun, dir_path: str | Path) -> None:
    """Persist one run: manifest.json, noise.f32 (+header), and PNGs."""
    if run.error is not None:
        raise ValueError(f"refusing to persist a failed run: {run.error}")
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema": RUN_SCHEMA,
        "mode": run.mode,
        "config": run.config.to_dict(),
        "source_id": run.source_id,
        "other_id": run.other_id,
        "eyes": [list(e) for e in run.eyes],
        "crop_box": list(run.crop_box),
        "grid": list(run.active.shape),
        "active_cells": [[int(k), int(l)] for k, l in zip(*np.nonzero(run.active))],
        "trace": [[b.detection_term, b.matcher_term, b.total] for b in run.trace],
        "best_iter": run.best_iter,
        "wall_time_s": run.wall_time_s,
        "job_index": run.job_index,
        "repeat": run.repeat,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    save_array(run.noise.delta, d / "noise.f32")
    save_image(run.source_image, d / "source.png")
    save_image(run.other_image, d / "other.png")
    save_image(run.adv_image, d / "adv.png")


def load_run(dir_path: str | Path) -> AttackRun:
    """Rebuild a run from disk; adv/init images are recomputed float-exact."""
    d = Path(dir_path)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("schema") != RUN_SCHEMA:
        raise ValueError(f"unsupported run schema in {d}")
    config = AttackConfig.from_dict(manifest["config"])
    source = load_image(d / "source.png")
    other = load_image(d / "other.png")
    delta = load_array(d / "noise.f32")
    eyes = tuple(tuple(e) for e in manifest["eyes"])
    mask = eyeglass_mask(eyes, source.shape[:2], config.mask_size)
    noise = AdversarialNoise(delta=delta, mask=mask.mask)
    m, n = manifest["grid"]
    expect = grid_dims(source.shape[1], source.shape[0])
    if (m, n) != expect:
        raise ValueError(f"manifest grid {(m, n)} does not match image {expect}")
    active = np.zeros((m, n), dtype=bool)
    for k, l in manifest["active_cells"]:
        active[k, l] = True
    trace = [
        LossBreakdown(detection_term=det, matcher_term=match, total=tot, alpha=config.alpha)
        for det, match, tot in manifest["trace"]
    ]
    return AttackRun(
        mode=manifest["mode"],
        config=config,
        source_id=manifest.get("source_id"),
        other_id=manifest.get("other_id"),
        source_image=source,
        other_image=other,
        init_image=apply_noise(source, random_patch(mask, config.seed)),
        adv_image=apply_noise(source, noise),
        noise=noise,
        eyes=eyes,
        crop_box=tuple(manifest["crop_box"]),
        active=active,
        trace=trace,
        best_iter=int(manifest["best_iter"]),
        wall_time_s=float(manifest["wall_time_s"]),
        job_index=int(manifest.get("job_index", 0)),
        repeat=int(manifest.get("repeat", 0)),
    )
