"""Evaluation harness: mean probabilities, success flags, rows, reports."""

from pathlib import Path

import numpy as np
import pytest
import torch

from frsattack.core import AttackConfig
from frsattack.engine import AttackJob, AttackRun
from frsattack.evaluate import (
    EvalRow,
    attack_success,
    evaluate_identity,
    evaluate_runs,
    mean_detection_probability,
    render_report,
    vanilla_baseline,
)
from frsattack.matcher import Gallery

GOLDENS = Path(__file__).parent / "goldens"


class GridStub:
    """Detector stand-in mapping known images to fixed probability grids."""

    def __init__(self):
        self.table = {}

    def add(self, img, grid):
        key = np.asarray(img, dtype=np.float32).tobytes()
        self.table[key] = np.asarray(grid, dtype=np.float32)
        return img

    def prob_grid(self, x):
        if isinstance(x, torch.Tensor):
            x = x.detach().numpy()
        return torch.from_numpy(self.table[np.ascontiguousarray(x, dtype=np.float32).tobytes()])


class AngleEmbedder:
    """Embeds a crop to the unit vector at angle = mean pixel value."""

    def embed_t(self, crop: torch.Tensor) -> torch.Tensor:
        a = crop.mean()
        return torch.stack([torch.cos(a), torch.sin(a)])


def unit(angle: float) -> np.ndarray:
    return np.array([np.cos(angle), np.sin(angle)], dtype=np.float32)


def make_image(rng, h=24, w=24):
    return rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)


def test_mean_probability_two_point_mean():
    rng = np.random.default_rng(0)
    det = GridStub()
    img = det.add(make_image(rng), [[0.8, 0.9], [0.1, 0.2]])
    active = np.array([[True, True], [False, False]])
    got = mean_detection_probability(det, img, active)
    assert got.value == pytest.approx(0.85)
    assert got.fallback is False


def test_mean_probability_fallback_is_grid_max():
    rng = np.random.default_rng(1)
    det = GridStub()
    img = det.add(make_image(rng), [[0.3, 0.7], [0.2, 0.1]])
    got = mean_detection_probability(det, img, np.zeros((2, 2), dtype=bool))
    assert got.value == pytest.approx(0.7)
    assert got.fallback is True


def test_mean_probability_shape_mismatch():
    rng = np.random.default_rng(2)
    det = GridStub()
    img = det.add(make_image(rng), [[0.5]])
    with pytest.raises(ValueError):
        mean_detection_probability(det, img, np.zeros((2, 3), dtype=bool))


def stub_run(det, rng, mode, grid, crop_mean, other_id="a", repeats=1,
             job_index=0, repeat=0, source=None, init=None):
    """One fake finished run whose adv image maps to `grid` and whose
    matcher crop embeds at angle `crop_mean`."""
    adv = np.full((24, 24, 3), crop_mean, dtype=np.float32)
    adv[0, 0, 0] += rng.uniform(1e-4, 1e-3)  # unique bytes per run
    det.add(adv, grid)
    run = AttackRun(mode=mode, config=AttackConfig(mode=mode, repeats=repeats))
    run.adv_image = adv
    run.source_image = det.add(make_image(rng), grid) if source is None else source
    run.init_image = det.add(make_image(rng), grid) if init is None else init
    run.crop_box = (4, 4, 20, 20)
    run.active = np.asarray(grid) >= 0.6
    run.other_id = other_id
    run.job_index = job_index
    run.repeat = repeat
    return run


def gallery_at(angle: float, threshold: float = 0.3) -> Gallery:
    return Gallery(embeddings={"a": unit(angle)}, threshold=threshold,
                   p_norm=2.0, eer=0.0)


def test_attack_success_di_detected_and_matched():
    rng = np.random.default_rng(3)
    det = GridStub()
    run = stub_run(det, rng, "di", [[0.9, 0.2]], crop_mean=0.0)
    flags = attack_success(run, det, AngleEmbedder(), gallery_at(0.0))
    assert flags == (True, True, True)


def test_attack_success_di_fails_when_not_detected():
    rng = np.random.default_rng(4)
    det = GridStub()
    run = stub_run(det, rng, "di", [[0.4, 0.2]], crop_mean=0.0)
    flags = attack_success(run, det, AngleEmbedder(), gallery_at(0.0))
    assert flags.detector_ok is False and flags.overall is False
    assert flags.matcher_ok is True


def test_attack_success_ue_null_attack_fails():
    """A still-detected, still-matched image fools nothing in ue mode."""
    rng = np.random.default_rng(5)
    det = GridStub()
    run = stub_run(det, rng, "ue", [[0.9]], crop_mean=0.0)
    flags = attack_success(run, det, AngleEmbedder(), gallery_at(0.0))
    assert flags == (False, False, False)


def test_attack_success_ue_requires_both_evasions():
    rng = np.random.default_rng(6)
    det = GridStub()
    run = stub_run(det, rng, "ue", [[0.3]], crop_mean=0.8)
    flags = attack_success(run, det, AngleEmbedder(), gallery_at(0.0))
    assert flags == (True, True, True)


def test_attack_success_de_wants_detection_and_mismatch():
    rng = np.random.default_rng(7)
    det = GridStub()
    run = stub_run(det, rng, "de", [[0.95]], crop_mean=0.8)
    flags = attack_success(run, det, AngleEmbedder(), gallery_at(0.0))
    assert flags == (True, True, True)


def test_attack_success_failed_run_counts_as_failure():
    run = AttackRun(mode="di", config=AttackConfig(mode="di"), error="boom")
    flags = attack_success(run, None, None, None)
    assert flags == (False, False, False)


def test_attack_success_unknown_identity_raises():
    rng = np.random.default_rng(8)
    det = GridStub()
    run = stub_run(det, rng, "di", [[0.9]], crop_mean=0.0, other_id="ghost")
    with pytest.raises(KeyError):
        attack_success(run, det, AngleEmbedder(), gallery_at(0.0))


def test_evaluate_identity_two_repeat_statistics():
    """AP means of 0.84 and 0.90 over repeats give the 0.87 +- 0.030 row."""
    rng = np.random.default_rng(9)
    det = GridStub()
    source = det.add(make_image(rng), [[0.95]])
    init = det.add(make_image(rng), [[0.8]])
    runs = [
        stub_run(det, rng, "di", [[0.84]], crop_mean=0.0, repeats=2,
                 repeat=0, source=source, init=init),
        stub_run(det, rng, "di", [[0.90]], crop_mean=0.0, repeats=2,
                 repeat=1, source=source, init=init),
    ]
    for r in runs:
        r.source_id = "s1"
        r.active = np.array([[True]])
    row = evaluate_identity(runs, det, AngleEmbedder(), gallery_at(0.0))
    assert row.mean_prob_ci == pytest.approx(0.95)
    assert row.mean_prob_cp == pytest.approx(0.8)
    assert row.mean_prob_ap == pytest.approx(0.87)
    assert row.std_ap == pytest.approx(0.03)
    assert row.matcher_sr == 1.0
    report = render_report([row], "markdown")
    assert "0.87 ± 0.030" in report


def test_evaluate_identity_rejects_mixed_or_empty():
    rng = np.random.default_rng(10)
    det = GridStub()
    a = stub_run(det, rng, "di", [[0.9]], crop_mean=0.0)
    b = stub_run(det, rng, "di", [[0.9]], crop_mean=0.0)
    a.source_id, b.source_id = "x", "y"
    with pytest.raises(ValueError):
        evaluate_identity([a, b], det, AngleEmbedder(), gallery_at(0.0))
    with pytest.raises(ValueError):
        evaluate_identity([], det, AngleEmbedder(), gallery_at(0.0))


def test_evaluate_runs_groups_in_first_seen_order():
    rng = np.random.default_rng(11)
    det = GridStub()
    runs = []
    for sid in ("s2", "s1", "s2"):
        r = stub_run(det, rng, "di", [[0.9]], crop_mean=0.0)
        r.source_id = sid
        runs.append(r)
    rows = evaluate_runs(runs, det, AngleEmbedder(), gallery_at(0.0))
    assert [r.source_id for r in rows] == ["s2", "s1"]
    assert [r.n_images for r in rows] == [1, 1]


def golden_rows():
    return [
        EvalRow(source_id="id000", mode="di", n_images=5, repeats=3,
                mean_prob_ci=0.93, mean_prob_cp=0.78, std_cp=0.012,
                mean_prob_ap=0.87, std_ap=0.030, detector_sr=1.0,
                matcher_sr=1.0, oasr=1.0),
        EvalRow(source_id="id001", mode="di", n_images=5, repeats=3,
                mean_prob_ci=0.91, mean_prob_cp=0.74, std_cp=0.020,
                mean_prob_ap=0.84, std_ap=0.018, detector_sr=1.0,
                matcher_sr=2 / 3, oasr=2 / 3),
        EvalRow(source_id="id002", mode="di", n_images=5, repeats=3,
                mean_prob_ci=0.95, mean_prob_cp=0.80, std_cp=0.008,
                mean_prob_ap=0.90, std_ap=0.025, detector_sr=1.0,
                matcher_sr=1.0, oasr=1.0),
    ]


def test_render_report_matches_goldens():
    rows = golden_rows()
    assert render_report(rows, "markdown") == (GOLDENS / "report.md").read_text()
    assert render_report(rows, "csv") == (GOLDENS / "report.csv").read_text()


def test_render_report_formats_share_numbers():
    rows = golden_rows()
    md = render_report(rows, "markdown")
    csv = render_report(rows, "csv")
    for cell in ("0.87 ± 0.030", "0.74 ± 0.020", "0.67", "0.95"):
        assert cell in md and cell in csv


def test_render_report_empty_rows_header_only():
    md = render_report([], "markdown")
    assert "| source |" in md and "ISR/ESR" in md
    assert "id0" not in md
    csv = render_report([], "csv")
    assert csv.splitlines()[0].startswith("source,")


def test_render_report_rejects_mixed_modes_and_bad_format():
    rows = golden_rows()
    other = EvalRow(source_id="x", mode="ue", n_images=1, repeats=1,
                    mean_prob_ci=0.9, mean_prob_cp=0.5, std_cp=0.0,
                    mean_prob_ap=0.1, std_ap=0.0, detector_sr=1.0,
                    matcher_sr=1.0, oasr=1.0)
    with pytest.raises(ValueError):
        render_report(rows + [other], "markdown")
    with pytest.raises(ValueError):
        render_report(rows, "html")


def test_render_report_esr_label_for_evasion_modes():
    row = EvalRow(source_id="x", mode="ue", n_images=1, repeats=1,
                  mean_prob_ci=0.9, mean_prob_cp=0.5, std_cp=0.0,
                  mean_prob_ap=0.1, std_ap=0.0, detector_sr=1.0,
                  matcher_sr=1.0, oasr=1.0)
    assert "ESR" in render_report([row], "markdown")


def test_vanilla_baseline_rejects_unknown_combo(pipeline):
    with pytest.raises(ValueError):
        vanilla_baseline(pipeline.detector, pipeline.matcher, [], "matcher",
                         "identification", AttackConfig(mode="di"), pipeline.gallery)


def test_vanilla_baseline_matcher_only_drops_detection_term(pipeline):
    iid = pipeline.ds.identity_ids()[0]
    tgt = pipeline.ds.identity_ids()[1]
    s = pipeline.ds.samples_of(iid)[0]
    t = pipeline.ds.samples_of(tgt)[0]
    jobs = [AttackJob(source=s.image, other=t.image, eyes=s.eyes,
                      source_id=iid, other_id=tgt)]
    cfg = AttackConfig(mode="di", iterations=8, seed=0)
    result, runs = vanilla_baseline(pipeline.detector, pipeline.matcher, jobs,
                                    "matcher", "impersonation", cfg, pipeline.gallery,
                                    repeats=1)
    assert result.mode == "di"
    assert result.n_runs == 1
    assert runs[0].config.alpha == 0.0
    assert all(t.total == pytest.approx(t.matcher_term) for t in runs[0].trace)
    for rate in (result.single_asr, result.transfer_rate, result.overall_asr):
        assert 0.0 <= rate <= 1.0


def test_vanilla_baseline_detector_only_zeroes_matcher_term(pipeline):
    iid = pipeline.ds.identity_ids()[0]
    s = pipeline.ds.samples_of(iid)[0]
    jobs = [AttackJob(source=s.image, other=s.image, eyes=s.eyes,
                      source_id=iid, other_id=iid)]
    cfg = AttackConfig(mode="ue", iterations=8, seed=0)
    result, runs = vanilla_baseline(pipeline.detector, pipeline.matcher, jobs,
                                    "detector", "evasion", cfg, pipeline.gallery,
                                    repeats=1)
    assert result.mode == "ue"
    assert all(t.matcher_term == 0.0 for t in runs[0].trace)
    assert all(t.total == pytest.approx(t.alpha * t.detection_term) for t in runs[0].trace)
