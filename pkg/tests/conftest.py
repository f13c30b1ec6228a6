"""Session fixtures: one trained toy pipeline shared across test modules.

Training the reference detector and matcher takes a few seconds, so the
pipeline is built once per session, with its training wall times kept
for the acceptance suite's budget checks.
"""

import time
from dataclasses import dataclass

import pytest

from frsattack.detector import (
    detection_rate,
    false_positive_rate,
    save_detector,
    train_detector,
)
from frsattack.matcher import build_gallery, matcher_eer, save_gallery, save_matcher, train_matcher
from frsattack.synth import export_dataset, make_dataset

TAU = 0.6


@dataclass
class ToyPipeline:
    ds: object
    detector: object
    matcher: object
    gallery: object
    detector_train_s: float
    matcher_train_s: float
    detection_rate: float
    false_positive_rate: float
    eer: float
    tau: float = TAU


@pytest.fixture(scope="session")
def pipeline():
    ds = make_dataset(50, 10, seed=7)
    t0 = time.perf_counter()
    detector = train_detector(ds, seed=0)
    t_det = time.perf_counter() - t0
    t0 = time.perf_counter()
    matcher = train_matcher(ds, seed=0)
    t_mat = time.perf_counter() - t0
    _, _, test_faces, test_negs = ds.detector_split()
    rate = detection_rate(detector, test_faces, TAU)
    fpr = false_positive_rate(detector, test_negs, TAU)
    cal = matcher_eer(matcher, ds)
    gallery = build_gallery(matcher, detector, ds)
    return ToyPipeline(
        ds=ds,
        detector=detector,
        matcher=matcher,
        gallery=gallery,
        detector_train_s=t_det,
        matcher_train_s=t_mat,
        detection_rate=rate,
        false_positive_rate=fpr,
        eer=cal.eer,
    )


@pytest.fixture(scope="session")
def saved_pipeline(pipeline, tmp_path_factory):
    """The session pipeline exported to disk, for CLI-level tests."""
    root = tmp_path_factory.mktemp("saved-pipeline")
    export_dataset(pipeline.ds, root / "data")
    save_detector(pipeline.detector, root / "det")
    save_matcher(pipeline.matcher, root / "mat")
    save_gallery(pipeline.gallery, root / "gallery.json")
    return root
