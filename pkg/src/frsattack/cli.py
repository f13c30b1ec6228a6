"""Command line front end: synth, train, attack, evaluate, baseline.

Every command is deterministic given its seed. Exit codes: 0 success,
2 configuration or usage error, 3 runtime failure. With --json the
summary goes to stdout as a single JSON object. Attack config files are
flat ``key = value`` text mirroring the AttackConfig field names; a
previously written manifest.json is accepted in their place, so a run
can be replayed from its own manifest.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    AttackConfig,
    ConfigError,
    CorruptionError,
    NumericError,
    checkpoint_hash,
)
from .detector import (
    detection_rate,
    false_positive_rate,
    load_detector,
    save_detector,
    train_detector,
)
from .engine import AttackJob, generate_batch, load_run, save_run
from .evaluate import _BASELINE_MODE, evaluate_runs, render_report, vanilla_baseline
from .masks import GeometryError
from .matcher import (
    build_gallery,
    load_gallery,
    load_matcher,
    matcher_eer,
    save_gallery,
    save_matcher,
    train_matcher,
)
from .synth import export_dataset, load_dataset, make_dataset

_CONFIG_INT_FIELDS = {"iterations", "seed", "repeats"}


def parse_config_file(path: Path) -> dict:
    """Flat key=value text or a run/batch manifest JSON."""
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        return dict(doc.get("config", doc))
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        value = value.strip()
        if key in _CONFIG_INT_FIELDS:
            out[key] = int(value)
        elif key in ("mode", "mask_size"):
            out[key] = value
        else:
            out[key] = float(value)
    return out


def build_attack_config(args) -> AttackConfig:
    fields = {}
    if getattr(args, "config", None):
        fields.update(parse_config_file(Path(args.config)))
    overrides = {
        "mode": getattr(args, "mode", None),
        "alpha": args.alpha,
        "exponent_s": args.exponent_s,
        "margin_k": args.margin_k,
        "detect_threshold_tau": args.tau,
        "p_norm": args.p_norm,
        "iterations": args.iterations,
        "step_size": args.step_size,
        "seed": args.seed,
        "repeats": args.repeats,
        "mask_size": args.mask_size,
    }
    for key, value in overrides.items():
        if value is not None:
            fields[key] = value
    return AttackConfig.from_dict(fields)


def add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file or a manifest.json")
    p.add_argument("--alpha", type=float)
    p.add_argument("--exponent-s", dest="exponent_s", type=float)
    p.add_argument("--margin-k", dest="margin_k", type=float)
    p.add_argument("--tau", type=float, help="detection threshold")
    p.add_argument("--p-norm", dest="p_norm", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--mask-size", dest="mask_size", choices=("thin", "large"))
    p.add_argument("--workers", type=int, default=1, help="parallel attack runs")


def build_jobs(ds, source_id: str, other_id: str, n_images: int | None, other_index: int):
    sources = ds.samples_of(source_id)
    others = ds.samples_of(other_id)
    if not 0 <= other_index < len(others):
        raise ConfigError(f"--other-index {other_index} out of range for {other_id!r}")
    if n_images is not None:
        sources = sources[:n_images]
    other_img = others[other_index].image
    return [
        AttackJob(
            source=s.image, other=other_img, eyes=s.eyes,
            source_id=source_id, other_id=other_id,
        )
        for s in sources
    ]


def timestamp_dir(parent: Path, label: str) -> Path:
    """Fresh run directory; never reuses or overwrites an existing one."""
    parent.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    base = f"{stamp}-{label}"
    d = parent / base
    k = 1
    while d.exists():
        d = parent / f"{base}-{k}"
        k += 1
    d.mkdir()
    return d


def discover_runs(paths) -> list:
    dirs = []
    for p in paths:
        p = Path(p)
        if (p / "manifest.json").exists() and (p / "noise.f32").exists():
            dirs.append(p)
            continue
        hits = sorted(q.parent for q in p.glob("**/noise.f32"))
        if not hits:
            raise FileNotFoundError(f"no runs found under {p}")
        dirs.extend(hits)
    return [load_run(d) for d in dirs]


def cmd_synth(args) -> dict:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty; pass --force to write into it")
    h, w = (int(t) for t in args.canvas.lower().split("x"))
    ds = make_dataset(
        args.identities, args.images, canvas=(h, w), seed=args.seed,
        n_negatives=args.negatives,
    )
    export_dataset(ds, out)
    return {
        "out": str(out),
        "identities": args.identities,
        "images_per_identity": args.images,
        "negatives": len(ds.negatives),
        "canvas": [h, w],
        "seed": args.seed,
        "content_hash": ds.content_hash(),
    }


def cmd_train(args) -> dict:
    ds = load_dataset(args.data)
    out = Path(args.out)
    if args.component == "detector":
        model = train_detector(ds, epochs=args.epochs, seed=args.seed)
        _, _, test_faces, test_negs = ds.detector_split()
        rate = detection_rate(model, test_faces, args.tau)
        fpr = false_positive_rate(model, test_negs, args.tau)
        save_detector(model, out)
        metrics = {
            "component": "detector",
            "held_out_detection_rate": rate,
            "held_out_false_positive_rate": fpr,
            "tau": args.tau,
            "epochs": args.epochs,
            "seed": args.seed,
            "checkpoint": str(out),
            "checkpoint_hash": checkpoint_hash(out),
        }
    else:
        model = train_matcher(ds, epochs=args.epochs, seed=args.seed)
        cal = matcher_eer(model, ds)
        save_matcher(model, out)
        metrics = {
            "component": "matcher",
            "held_out_eer": cal.eer,
            "held_out_threshold": cal.threshold,
            "epochs": args.epochs,
            "seed": args.seed,
            "checkpoint": str(out),
            "checkpoint_hash": checkpoint_hash(out),
        }
        if args.detector:
            gallery = build_gallery(model, load_detector(args.detector), ds)
            gpath = Path(args.gallery) if args.gallery else out / "gallery.json"
            save_gallery(gallery, gpath)
            metrics["gallery"] = str(gpath)
            metrics["gallery_threshold"] = gallery.threshold
            metrics["gallery_eer"] = gallery.eer
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    return metrics


def _write_batch(out_dir: Path, runs, config: AttackConfig, summary: dict) -> dict:
    ok = 0
    per_run = []
    for i, run in enumerate(runs):
        rel = f"runs/{i:04d}"
        entry = {
            "dir": rel,
            "seed": run.config.seed,
            "job_index": run.job_index,
            "repeat": run.repeat,
        }
        if run.error is None:
            save_run(run, out_dir / rel)
            entry["best_total"] = run.trace[run.best_iter].total if run.trace else None
            ok += 1
        else:
            entry["error"] = run.error
        per_run.append(entry)
    manifest = {
        "schema": 1,
        "tool_version": __version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": config.to_dict(),
        "runs": per_run,
        **summary,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return {"out": str(out_dir), "runs": len(runs), "failed": len(runs) - ok}


def cmd_attack(args) -> dict:
    config = build_attack_config(args)
    ds = load_dataset(args.data)
    other_id = args.other
    if other_id is None:
        if config.mode == "di":
            raise ConfigError("di attacks need --other (the impersonation target)")
        other_id = args.source
    if config.mode == "di" and other_id == args.source:
        raise ConfigError("di attacks need a target other than the source")
    detector = load_detector(args.detector)
    matcher = load_matcher(args.matcher)
    jobs = build_jobs(ds, args.source, other_id, args.images, args.other_index)
    runs = generate_batch(
        detector, matcher, jobs, config.mode, config, workers=args.workers
    )
    out_dir = timestamp_dir(Path(args.out), config.mode)
    summary = {
        "command": "attack",
        "mode": config.mode,
        "data": str(args.data),
        "source_id": args.source,
        "other_id": other_id,
        "detector_checkpoint_hash": checkpoint_hash(args.detector),
        "matcher_checkpoint_hash": checkpoint_hash(args.matcher),
        "workers": args.workers,
    }
    return _write_batch(out_dir, runs, config, summary)


def cmd_evaluate(args) -> dict:
    runs = discover_runs(args.runs)
    detector = load_detector(args.detector)
    matcher = load_matcher(args.matcher)
    gallery = load_gallery(args.gallery)
    rows = evaluate_runs(runs, detector, matcher, gallery)
    md = render_report(rows, "markdown")
    csv = render_report(rows, "csv")
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    md_path = prefix.with_suffix(".md")
    csv_path = prefix.with_suffix(".csv")
    md_path.write_text(md)
    csv_path.write_text(csv)
    return {
        "report_md": str(md_path),
        "report_csv": str(csv_path),
        "rows": [
            {"source_id": r.source_id, "matcher_sr": r.matcher_sr, "oasr": r.oasr}
            for r in rows
        ],
    }


def cmd_baseline(args) -> dict:
    # the component/objective pair implies the mode, so --mode is optional here
    if args.mode is None:
        args.mode = _BASELINE_MODE.get((args.component, args.objective))
    config = build_attack_config(args)
    ds = load_dataset(args.data)
    other_id = args.other if args.other is not None else args.source
    detector = load_detector(args.detector)
    matcher = load_matcher(args.matcher)
    gallery = load_gallery(args.gallery)
    jobs = build_jobs(ds, args.source, other_id, args.images, args.other_index)
    result, runs = vanilla_baseline(
        detector, matcher, jobs, args.component, args.objective, config, gallery,
        workers=args.workers,
    )
    out_dir = timestamp_dir(Path(args.out), f"baseline-{args.component}-{args.objective}")
    summary = {
        "command": "baseline",
        "component": args.component,
        "objective": args.objective,
        "mode": result.mode,
        "source_id": args.source,
        "other_id": other_id,
        "single_asr": result.single_asr,
        "transfer_rate": result.transfer_rate,
        "overall_asr": result.overall_asr,
        "detector_checkpoint_hash": checkpoint_hash(args.detector),
        "matcher_checkpoint_hash": checkpoint_hash(args.matcher),
    }
    if args.reference_runs:
        ref = discover_runs([args.reference_runs])
        ref_rows = evaluate_runs(ref, detector, matcher, gallery)
        total = sum(r.oasr * r.n_images * r.repeats for r in ref_rows)
        count = sum(r.n_images * r.repeats for r in ref_rows)
        summary["reference_oasr"] = total / count if count else None
    info = _write_batch(out_dir, [r for r in runs], runs[0].config, summary)
    info.update(
        single_asr=result.single_asr,
        transfer_rate=result.transfer_rate,
        overall_asr=result.overall_asr,
    )
    if "reference_oasr" in summary:
        info["reference_oasr"] = summary["reference_oasr"]
    return info


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="frsattack",
        description="Joint detector+matcher adversarial attacks on a reference face pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--json", action="store_true", help="print a JSON summary to stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic identity dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=50)
    p.add_argument("--images", "--images-per", dest="images", type=int, default=10)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--canvas", default="64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the reference detector or matcher")
    p.add_argument("--component", choices=("detector", "matcher"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.6)
    p.add_argument("--detector", help="matcher only: detector checkpoint to build a gallery")
    p.add_argument("--gallery", help="matcher only: where to write gallery.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run a batch of joint attacks")
    p.add_argument("--mode", choices=("di", "de", "ue"))
    p.add_argument("--data", required=True)
    p.add_argument("--source", required=True, help="source identity id")
    p.add_argument("--other", help="di: target identity; de/ue: registered identity (default source)")
    p.add_argument("--other-index", dest="other_index", type=int, default=0)
    p.add_argument("--images", type=int, help="cap on source images per identity")
    p.add_argument("--detector", required=True)
    p.add_argument("--matcher", required=True)
    p.add_argument("--out", required=True)
    add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="score saved runs and render reports")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--matcher", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--out", required=True, help="report path prefix (writes .md and .csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="single-component attack with pipeline metrics")
    p.add_argument("--component", choices=("detector", "matcher"), required=True)
    p.add_argument("--objective", choices=("evasion", "impersonation"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--other")
    p.add_argument("--other-index", dest="other_index", type=int, default=0)
    p.add_argument("--images", type=int)
    p.add_argument("--detector", required=True)
    p.add_argument("--matcher", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("di", "de", "ue"), help="base mode for config defaults")
    p.add_argument("--reference-runs", dest="reference_runs")
    add_attack_flags(p)
    p.set_defaults(func=cmd_baseline)
    return parser


_USAGE_ERRORS = (
    ConfigError,
    GeometryError,
    FileNotFoundError,
    FileExistsError,
    KeyError,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and args.epochs is None:
        args.epochs = 30
    try:
        summary = args.func(args)
    except CorruptionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for key, value in summary.items():
            print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
