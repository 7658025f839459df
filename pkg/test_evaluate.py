"""Metrics, user-study win rates and manifest evaluation reports"""

import math
import shlex
import sys

import pytest
import torch
from pydantic import ValidationError

from conftest import random_image, smooth_image, template_landmarks
from src.restoration.evaluate import (
    PSNR_CAP,
    EvalConfig,
    ExternalMetric,
    SelectionRecord,
    bicubic_restorer,
    compare_reports,
    evaluate_manifest,
    format_table,
    id_score,
    model_restorer,
    psnr,
    read_eval_csv,
    read_selections,
    ssim,
    win_rate,
    win_rate_by_criterion,
    write_csv,
)
from src.restoration.geometry import FaceTemplate
from src.restoration.imaging import load_image, rgb_to_gray, save_image
from src.restoration.manifest import FaceTriplet
from src.restoration.model import RestorationModel
from src.restoration.types import EmptyInput, ExternalProcessError, ShapeError


def test_psnr_known_value():
    a = torch.zeros(3, 16, 16)
    b = torch.full((3, 16, 16), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    assert psnr(b, b) == PSNR_CAP
    with pytest.raises(ShapeError):
        psnr(a, b[:, :8])


def test_ssim_identical_and_bounded():
    a = random_image(0, size=32)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    b = random_image(1, size=32)
    assert -1.0 <= ssim(a, b) < 0.5
    assert ssim(a[0], a[0]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ShapeError):
        ssim(torch.zeros(2, 8, 8), torch.zeros(2, 8, 8))


def test_ssim_matches_scikit_image():
    metrics = pytest.importorskip("skimage.metrics")
    a = smooth_image(3, size=48)
    b = (a + 0.05 * random_image(4, size=48)).clamp(0.0, 1.0)
    gray_a = rgb_to_gray(a[None])[0, 0].numpy()
    gray_b = rgb_to_gray(b[None])[0, 0].numpy()
    expected = metrics.structural_similarity(
        gray_a,
        gray_b,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        data_range=1.0,
    )
    assert ssim(a, b) == pytest.approx(expected, abs=1e-6)


def test_id_score_of_identical_faces(embedder):
    img = smooth_image(5, size=64)
    lm = template_landmarks(64)
    assert id_score(img, img, lm, embedder, FaceTemplate.arcface(64)) == pytest.approx(1.0)
    other = smooth_image(6, size=64)
    assert id_score(img, other, lm, embedder, FaceTemplate.arcface(64)) < 1.0


def test_external_metric(tmp_path):
    script = tmp_path / "metric.py"
    script.write_text("import sys\nprint(len(sys.argv) - 1)\n")
    cmd = f"{shlex.quote(sys.executable)} {shlex.quote(str(script))}"
    metric = ExternalMetric(cmd, name="args")
    assert metric(random_image(0, 8), random_image(1, 8)) == 2.0

    script.write_text("print('not a number')\n")
    with pytest.raises(ExternalProcessError):
        metric(random_image(0, 8), random_image(1, 8))
    script.write_text("import sys\nsys.exit(2)\n")
    with pytest.raises(ExternalProcessError):
        metric(random_image(0, 8), random_image(1, 8))


def _selections():
    picks = ["a", "a", "a", "b", "c"]
    return [
        SelectionRecord(
            question_id=f"q{i}",
            candidates=["a", "b", "c"],
            selected=s,
            criterion="quality" if i < 3 else "identity",
        )
        for i, s in enumerate(picks)
    ]


def test_win_rate():
    rates = win_rate(_selections())
    assert rates == pytest.approx({"a": 0.6, "b": 0.2, "c": 0.2})
    assert sum(rates.values()) == pytest.approx(1.0)
    with pytest.raises(EmptyInput):
        win_rate([])

    by = win_rate_by_criterion(_selections())
    assert list(by) == ["overall", "identity", "quality"]
    assert by["quality"] == pytest.approx({"a": 1.0, "b": 0.0, "c": 0.0})
    assert by["identity"] == pytest.approx({"a": 0.0, "b": 0.5, "c": 0.5})


def test_selection_validation_and_csv(tmp_path):
    with pytest.raises(ValidationError):
        SelectionRecord(question_id="q", candidates=["a", "b"], selected="z")
    with pytest.raises(ValidationError):
        SelectionRecord(question_id="q", candidates=[], selected="a")

    path = tmp_path / "study.csv"
    path.write_text(
        "question_id,candidates,selected,criterion\n"
        "q0,ours|base,ours,quality\n"
        "q1,ours|base,base,\n"
    )
    records = read_selections(path)
    assert [r.candidates for r in records] == [["ours", "base"], ["ours", "base"]]
    assert records[1].criterion is None
    assert win_rate(records) == pytest.approx({"base": 0.5, "ours": 0.5})


@pytest.fixture
def eval_set(tmp_path):
    """Row a has a reference, b has no face, c points at missing files"""
    lookup = {}
    for i, rid in enumerate(("a", "b")):
        save_image(smooth_image(10 + i, size=32), tmp_path / f"hq/{rid}.png")
        save_image(smooth_image(20 + i, size=8), tmp_path / f"lq/{rid}.png")
        lq = load_image(tmp_path / f"lq/{rid}.png")
        lookup[float(lq.sum())] = load_image(tmp_path / f"hq/{rid}.png")
    save_image(smooth_image(30, size=32), tmp_path / "faces/r.png")
    rows = [
        FaceTriplet(
            id="a",
            portrait_id="a",
            lq="lq/a.png",
            hq="hq/a.png",
            ref="faces/r.png",
            ref_id="r",
            mask_box=(2, 2, 7, 7),
            landmarks=template_landmarks(32),
            degrade_seed=0,
            split="test",
        ),
        FaceTriplet(
            id="b", portrait_id="b", lq="lq/b.png", hq="hq/b.png", degrade_seed=0, split="test"
        ),
        FaceTriplet(
            id="c", portrait_id="c", lq="lq/c.png", hq="hq/c.png", degrade_seed=0, split="test"
        ),
    ]
    return tmp_path, rows, lookup


def test_evaluate_manifest_with_oracle_restorer(eval_set, embedder):
    root, rows, lookup = eval_set
    calls = []

    def oracle(lq, ref, mask):
        calls.append((ref is not None, None if mask is None else float(mask.sum())))
        return lookup[float(lq.sum())]

    report = evaluate_manifest(
        oracle,
        rows,
        root,
        embedder,
        EvalConfig(face_side=32),
        out_csv=root / "out/eval.csv",
        out_table=root / "out/eval.txt",
    )
    assert calls == [(True, 25.0), (False, None)]
    assert [r.row_id for r in report.failures] == ["c"]
    assert report.means["psnr"] == PSNR_CAP
    assert report.means["ssim"] == pytest.approx(1.0)
    assert report.means["id_score"] == pytest.approx(1.0)
    assert report.means["face_psnr"] == PSNR_CAP
    assert report.referenced_means["psnr"] == PSNR_CAP

    back = read_eval_csv(root / "out/eval.csv")
    for col in report.columns:
        assert back[col] == pytest.approx(report.means[col])
    table = (root / "out/eval.txt").read_text()
    assert "all (2)" in table and "referenced (1)" in table


def test_evaluate_without_references(eval_set, embedder):
    root, rows, lookup = eval_set
    seen = []

    def oracle(lq, ref, mask):
        seen.append(ref)
        return lookup[float(lq.sum())]

    report = evaluate_manifest(
        oracle, rows[:2], root, embedder, EvalConfig(with_reference=False, face_side=32)
    )
    assert seen == [None, None]
    assert not report.failures
    assert math.isnan(report.referenced_means["psnr"])


def test_domain_errors_fail_only_their_row(eval_set, embedder):
    root, rows, lookup = eval_set
    save_image(smooth_image(40, size=16), root / "hq/d.png")
    save_image(smooth_image(41, size=8), root / "lq/d.png")
    save_image(smooth_image(42, size=32), root / "hq/e.png")
    save_image(smooth_image(43, size=8), root / "lq/e.png")
    broken = float(load_image(root / "lq/e.png").sum())
    extra = [
        FaceTriplet(
            id=rid, portrait_id=rid, lq=f"lq/{rid}.png", hq=f"hq/{rid}.png", degrade_seed=0
        )
        for rid in ("d", "e")
    ]

    def restorer(lq, ref, mask):
        key = float(lq.sum())
        if key == broken:
            raise ExternalProcessError("restorer crashed")
        return lookup.get(key, torch.zeros(3, 32, 32))

    cfg = EvalConfig(face_side=32)
    report = evaluate_manifest(restorer, rows + extra, root, embedder, cfg)
    failed = {r.row_id: r.error for r in report.failures}
    assert sorted(failed) == ["c", "d", "e"]
    assert failed["d"].startswith("ShapeError")
    assert failed["e"].startswith("ExternalProcessError")
    assert [r.row_id for r in report.rows if r.success] == ["a", "b"]
    assert report.means["psnr"] == PSNR_CAP


def test_bicubic_and_model_restorers(eval_set, embedder, tiny_model_cfg):
    root, rows, _ = eval_set
    cfg = EvalConfig(with_reference=False, face_side=32)
    bicubic = evaluate_manifest(bicubic_restorer(4), rows[:2], root, embedder, cfg)
    assert 0.0 < bicubic.means["psnr"] < PSNR_CAP
    assert -1.0 <= bicubic.means["ssim"] < 1.0

    torch.manual_seed(0)
    model = RestorationModel(tiny_model_cfg, factor=4)
    report = evaluate_manifest(model_restorer(model), rows[:2], root, embedder, cfg)
    assert all(r.success for r in report.rows)
    assert math.isfinite(report.means["psnr"])


def test_write_csv_and_compare(eval_set, embedder, tmp_path):
    root, rows, lookup = eval_set
    cfg = EvalConfig(with_reference=False, face_side=32)
    ours = evaluate_manifest(
        lambda lq, ref, mask: lookup[float(lq.sum())], rows, root, embedder, cfg
    )
    base = evaluate_manifest(bicubic_restorer(4), rows, root, embedder, cfg)
    a = write_csv(ours, tmp_path / "ours.csv")
    b = write_csv(base, tmp_path / "bicubic.csv")

    lines = a.read_text().splitlines()
    assert lines[0].startswith("id,status,referenced,psnr")
    assert lines[-1].startswith("c,failed,0")

    table = compare_reports([a, b])
    header, rule, *body = table.splitlines()
    assert header.split()[:3] == ["run", "psnr", "ssim"]
    assert [row.split()[0] for row in body] == ["ours", "bicubic"]
    assert body[0].split()[1] == f"{PSNR_CAP:.4f}"


def test_format_table():
    out = format_table(["a", "long"], [["xyz", "1"], ["p", "22"]])
    assert out.splitlines() == ["a    long", "---  ----", "xyz  1   ", "p    22  "]
