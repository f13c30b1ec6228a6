"""Success metrics, per-identity aggregation, baselines, and reports.

Detection strength is reported as the mean probability over the clean
image's active windows under three conditions: the clean image (CI), the
clean image with the random init patch (CI+CP), and the adversarial
patch (CI+AP). Matcher success is ISR (impersonation accepted) or ESR
(evasion: own enrollment rejected) depending on mode; OASR counts runs
that fool both components at once.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .detector import detect, probability_map
from .engine import generate_batch
from .matcher import embed, verify


class MeanProb(NamedTuple):
    value: float
    fallback: bool  # no active windows: value is the grid max instead


def mean_detection_probability(detector, img: np.ndarray, active) -> MeanProb:
    """Average window probability over a frozen active mask."""
    act = np.asarray(active.active if hasattr(active, "active") else active, dtype=bool)
    probs = probability_map(detector, img).probs
    if probs.shape != act.shape:
        raise ValueError(f"active mask {act.shape} does not match grid {probs.shape}")
    if act.any():
        return MeanProb(float(probs[act].mean()), False)
    return MeanProb(float(probs.max()), True)


class SuccessFlags(NamedTuple):
    detector_ok: bool
    matcher_ok: bool
    overall: bool


def attack_success(run, detector, matcher, gallery) -> SuccessFlags:
    """Judge one finished run against the deployed pipeline.

    di: face still detected and accepted as the target identity.
    de: face still detected but no longer accepted as its own identity.
    ue: face not detected at all and not accepted as its own identity.
    """
    if run.error is not None:
        return SuccessFlags(False, False, False)
    tau = run.config.detect_threshold_tau
    det = detect(detector, run.adv_image, tau)
    detector_ok = det.detected if run.mode in ("di", "de") else not det.detected
    if run.other_id is None:
        raise ValueError("run carries no enrolled identity to verify against")
    x0, y0, x1, y1 = run.crop_box
    probe = embed(matcher, run.adv_image[y0:y1, x0:x1])
    res = verify(gallery, probe, run.other_id)
    matcher_ok = res.match if run.mode == "di" else not res.match
    return SuccessFlags(detector_ok, matcher_ok, detector_ok and matcher_ok)


@dataclass
class EvalRow:
    """Aggregated metrics for one source identity under one attack."""

    source_id: str
    mode: str
    n_images: int
    repeats: int
    mean_prob_ci: float
    mean_prob_cp: float
    std_cp: float
    mean_prob_ap: float
    std_ap: float
    detector_sr: float
    matcher_sr: float
    oasr: float


def evaluate_identity(runs, detector, matcher, gallery) -> EvalRow:
    """Collapse all runs of one source identity into a table row.

    Probability columns average over source images first, then mean/std
    over the repeats; failed runs count as unsuccessful and are excluded
    from the probability statistics.
    """
    ok_runs = [r for r in runs if r.error is None]
    if not ok_runs:
        raise ValueError("no successful runs to evaluate")
    source_ids = {r.source_id for r in ok_runs}
    modes = {r.mode for r in runs}
    if len(source_ids) != 1 or len(modes) != 1:
        raise ValueError("evaluate_identity expects runs of one identity and one mode")
    repeats = ok_runs[0].config.repeats

    by_job = {}
    for r in ok_runs:
        by_job.setdefault(r.job_index, []).append(r)
    ci = float(
        np.mean(
            [
                mean_detection_probability(detector, rs[0].source_image, rs[0].active).value
                for rs in by_job.values()
            ]
        )
    )

    def per_repeat(img_of):
        means = []
        for rep in range(repeats):
            vals = [
                mean_detection_probability(detector, img_of(r), r.active).value
                for r in ok_runs
                if r.repeat == rep
            ]
            if vals:
                means.append(float(np.mean(vals)))
        return np.asarray(means)

    cp = per_repeat(lambda r: r.init_image)
    ap = per_repeat(lambda r: r.adv_image)

    flags = [attack_success(r, detector, matcher, gallery) for r in runs]
    n = len(runs)
    return EvalRow(
        source_id=next(iter(source_ids)),
        mode=next(iter(modes)),
        n_images=len(by_job),
        repeats=repeats,
        mean_prob_ci=ci,
        mean_prob_cp=float(cp.mean()),
        std_cp=float(cp.std()),
        mean_prob_ap=float(ap.mean()),
        std_ap=float(ap.std()),
        detector_sr=sum(f.detector_ok for f in flags) / n,
        matcher_sr=sum(f.matcher_ok for f in flags) / n,
        oasr=sum(f.overall for f in flags) / n,
    )


def evaluate_runs(runs, detector, matcher, gallery) -> list:
    """One EvalRow per source identity, in first-seen order."""
    order = []
    groups = {}
    for r in runs:
        key = r.source_id
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(r)
    return [evaluate_identity(groups[k], detector, matcher, gallery) for k in order]


@dataclass
class BaselineResult:
    """Vanilla single-component attack outcome on the full pipeline."""

    component: str
    objective: str
    mode: str
    n_runs: int
    single_asr: float
    transfer_rate: float
    overall_asr: float


_BASELINE_MODE = {
    ("matcher", "impersonation"): "di",
    ("matcher", "evasion"): "de",
    ("detector", "evasion"): "ue",
    ("detector", "impersonation"): "de",
}


def vanilla_baseline(
    detector,
    matcher,
    jobs,
    component: str,
    objective: str,
    config,
    gallery,
    repeats: int | None = None,
    workers: int = 1,
):
    """Attack a single component, then measure the whole pipeline.

    The untouched term is dropped from the objective (alpha = 0 for
    matcher-only, matcher weight 0 for detector-only); mask style and
    budget come from config unchanged.
    """
    key = (component, objective)
    if key not in _BASELINE_MODE:
        raise ValueError(f"unsupported baseline {key}")
    mode = _BASELINE_MODE[key]
    if component == "matcher":
        cfg = dataclasses.replace(config, mode=mode, alpha=0.0)
        weight = 1.0
    else:
        cfg = dataclasses.replace(config, mode=mode)
        weight = 0.0
    runs = generate_batch(
        detector, matcher, jobs, mode, cfg,
        repeats=repeats, workers=workers, matcher_weight=weight,
    )
    flags = [attack_success(r, detector, matcher, gallery) for r in runs]
    n = len(runs)
    if component == "matcher":
        single = sum(f.matcher_ok for f in flags) / n
        transfer = sum(f.detector_ok for f in flags) / n
    else:
        single = sum(f.detector_ok for f in flags) / n
        transfer = sum(f.matcher_ok for f in flags) / n
    overall = sum(f.overall for f in flags) / n
    result = BaselineResult(
        component=component,
        objective=objective,
        mode=mode,
        n_runs=n,
        single_asr=single,
        transfer_rate=transfer,
        overall_asr=overall,
    )
    return result, runs


def _fmt_prob(x: float) -> str:
    return f"{x:.2f}"


def _fmt_pm(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.3f}"


def _fmt_rate(x: float) -> str:
    s = f"{x:.2f}".rstrip("0").rstrip(".")
    return s if s else "0"


_LEGEND = (
    "CI: Clean Image; CP: Clean Patch; AP: Adversarial Patch. "
    "Probabilities average the clean image's active windows; "
    "the spread is the std over repeats.",
    "ISR/ESR: fraction of runs fooling the matcher "
    "(impersonation accepted / own enrollment rejected). "
    "OASR: fraction of runs fooling detector and matcher at once.",
)


def render_report(rows, fmt: str = "markdown") -> str:
    """Deterministic text table for a list of same-mode EvalRows.

    An empty row list renders the header and legend with no data rows.
    """
    modes = {r.mode for r in rows}
    if len(modes) > 1:
        raise ValueError(f"rows mix modes {sorted(modes)}; render one mode per report")
    mode = next(iter(modes)) if modes else None
    sr_label = {"di": "ISR", None: "ISR/ESR"}.get(mode, "ESR")
    title = f"{mode} attack results" if mode else "attack results"
    header = ["source", "mean prob CI", "mean prob CI+CP", "mean prob CI+AP", sr_label, "OASR"]
    cells = [
        [
            r.source_id,
            _fmt_prob(r.mean_prob_ci),
            _fmt_pm(r.mean_prob_cp, r.std_cp),
            _fmt_pm(r.mean_prob_ap, r.std_ap),
            _fmt_rate(r.matcher_sr),
            _fmt_rate(r.oasr),
        ]
        for r in rows
    ]
    if fmt == "markdown":
        lines = [f"# {title}", ""]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join(" --- " for _ in header) + "|")
        lines.extend("| " + " | ".join(row) + " |" for row in cells)
        lines.append("")
        lines.extend(f"- {note}" for note in _LEGEND)
        lines.append("")
        return "\n".join(lines)
    if fmt == "csv":
        lines = [",".join(header)]
        lines.extend(",".join(row) for row in cells)
        lines.extend(f"# {note}" for note in _LEGEND)
        lines.append("")
        return "\n".join(lines)
    raise ValueError(f"unknown report format {fmt!r}")
