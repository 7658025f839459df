"""Image metrics, user-study win rates and evaluation reports"""

import csv
import json
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, model_validator
from tqdm import tqdm

from .geometry import FaceTemplate, Landmarks5, align_face
from .identity import similarity
from .imaging import (
    bicubic_upsample,
    box_mask,
    check_same_shape,
    load_image,
    rgb_to_gray,
    save_image,
    ssim_map,
)
from .manifest import FaceTriplet
from .model import RestorationModel
from .types import (
    EmptyInput,
    Embedder,
    ExternalProcessError,
    RestorationError,
    RowResult,
    ShapeError,
)

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10

# (lq, reference or None, LQ-grid mask or None) -> restored portrait
Restorer = Callable[
    [torch.Tensor, Optional[torch.Tensor], Optional[torch.Tensor]], torch.Tensor
]


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    with_reference: bool = True
    face_side: int = 128
    external_metric: Optional[str] = None
    external_metric_name: str = "external"
    timeout: float = 120.0


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 log10(1 / MSE) for [0, 1] images, capped at 100 dB"""
    check_same_shape(a, b)
    err = float((a.double() - b.double()).pow(2).mean())
    if err < MSE_FLOOR:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / err)


def _gray(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img[None, None]
    if img.dim() == 3:
        img = img[None]
    if img.dim() != 4:
        raise ShapeError(f"Unsupported image shape {tuple(img.shape)}")
    if img.shape[1] == 3:
        return rgb_to_gray(img)
    if img.shape[1] == 1:
        return img
    raise ShapeError(f"Expected 1 or 3 channels, got {img.shape[1]}")


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Grayscale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, range 1"""
    check_same_shape(a, b)
    return float(ssim_map(_gray(a.double()), _gray(b.double())).mean())


def id_score(
    pred: torch.Tensor,
    gt: torch.Tensor,
    lm: Landmarks5,
    embedder: Embedder,
    template: Optional[FaceTemplate] = None,
) -> float:
    """Identity similarity of the aligned faces of a restored and a ground-truth portrait"""
    check_same_shape(pred, gt)
    template = template or FaceTemplate.arcface()
    with torch.no_grad():
        fp = align_face(pred.double(), lm, template)
        fg = align_face(gt.double(), lm, template)
        return similarity(fp, fg, embedder)


class ExternalMetric:
    """Runs `<cmd> <pred-path> <gt-path>`, which prints a JSON number"""

    def __init__(self, command: str, name: str = "external", timeout: float = 120.0):
        self.command = command
        self.name = name
        self.timeout = timeout

    def __call__(self, pred: torch.Tensor, gt: torch.Tensor) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            p, g = Path(tmp) / "pred.png", Path(tmp) / "gt.png"
            save_image(pred, p)
            save_image(gt, g)
            argv = shlex.split(self.command) + [str(p), str(g)]
            try:
                proc = subprocess.run(
                    argv, capture_output=True, text=True, timeout=self.timeout, check=True
                )
            except (OSError, subprocess.SubprocessError) as e:
                raise ExternalProcessError(f"Metric command failed: {e}") from e
        try:
            value = json.loads(proc.stdout)
        except json.JSONDecodeError as e:
            raise ExternalProcessError(f"Metric output is not JSON: {proc.stdout[:80]!r}") from e
        if not isinstance(value, (int, float)):
            raise ExternalProcessError("Metric command must print a single number")
        return float(value)


# ---------------------------------------------------------------------------
# User study
# ---------------------------------------------------------------------------


class SelectionRecord(BaseModel):
    question_id: str
    candidates: List[str]
    selected: str
    criterion: Optional[str] = None

    @model_validator(mode="after")
    def _check_selected(self) -> "SelectionRecord":
        if not self.candidates:
            raise ValueError("A question needs at least one candidate")
        if self.selected not in self.candidates:
            raise ValueError(f"{self.selected!r} is not among the candidates {self.candidates}")
        return self


def read_selections(path: Union[str, Path]) -> List[SelectionRecord]:
    """CSV with header question_id,candidates,selected[,criterion]; candidates pipe-separated"""
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            records.append(
                SelectionRecord(
                    question_id=row["question_id"],
                    candidates=[c.strip() for c in row["candidates"].split("|") if c.strip()],
                    selected=row["selected"].strip(),
                    criterion=(row.get("criterion") or "").strip() or None,
                )
            )
    return records


def win_rate(records: Sequence[SelectionRecord]) -> Dict[str, float]:
    """Share of selections won by each method; candidates never selected get 0"""
    if not records:
        raise EmptyInput("No selection records")
    methods = sorted({c for r in records for c in r.candidates})
    counts = {m: 0 for m in methods}
    for r in records:
        counts[r.selected] += 1
    total = len(records)
    return {m: counts[m] / total for m in methods}


def win_rate_by_criterion(records: Sequence[SelectionRecord]) -> Dict[str, Dict[str, float]]:
    """Win rates per criterion plus an `overall` entry"""
    out = {"overall": win_rate(records)}
    groups: Dict[str, List[SelectionRecord]] = {}
    for r in records:
        if r.criterion is not None:
            groups.setdefault(r.criterion, []).append(r)
    for name in sorted(groups):
        out[name] = win_rate(groups[name])
    return out


# ---------------------------------------------------------------------------
# Manifest evaluation
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ["psnr", "ssim", "id_score", "face_psnr", "face_ssim"]


@dataclass
class EvalReport:
    rows: List[RowResult]
    means: Dict[str, float] = field(default_factory=dict)
    referenced_means: Dict[str, float] = field(default_factory=dict)
    columns: List[str] = field(default_factory=lambda: list(METRIC_COLUMNS))

    @property
    def failures(self) -> List[RowResult]:
        return [r for r in self.rows if not r.success]


def model_restorer(model: RestorationModel) -> Restorer:
    model.eval()

    def run(lq: torch.Tensor, ref: Optional[torch.Tensor], mask: Optional[torch.Tensor]):
        with torch.no_grad():
            return model.restore(lq, ref, mask)

    return run


def bicubic_restorer(factor: int) -> Restorer:
    def run(lq: torch.Tensor, ref: Optional[torch.Tensor], mask: Optional[torch.Tensor]):
        return bicubic_upsample(lq, factor)

    return run


def _mean(values: List[float]) -> float:
    return sum(values) / len(values) if values else float("nan")


def summarize(rows: Sequence[RowResult], columns: Sequence[str]) -> Dict[str, float]:
    out = {}
    for col in columns:
        vals = [r.metrics[col] for r in rows if r.success and col in r.metrics]
        out[col] = _mean(vals)
    return out


def _row_metrics(
    row: FaceTriplet,
    root: Path,
    restorer: Restorer,
    embedder: Embedder,
    template: FaceTemplate,
    with_reference: bool,
    external: Optional[ExternalMetric],
) -> Dict[str, float]:
    lq = load_image(root / row.lq)
    hq = load_image(root / row.hq)
    ref = mask = None
    referenced = with_reference and row.ref is not None
    if referenced:
        ref = load_image(root / row.ref)
        mask = box_mask(lq.shape[-2], lq.shape[-1], row.mask_box)
    pred = restorer(lq, ref, mask).float().clamp(0.0, 1.0)

    metrics = {
        "psnr": psnr(pred, hq),
        "ssim": ssim(pred, hq),
        "referenced": 1.0 if referenced else 0.0,
    }
    if row.landmarks is not None:
        fp = align_face(pred.double(), row.landmarks, template)
        fg = align_face(hq.double(), row.landmarks, template)
        with torch.no_grad():
            metrics["id_score"] = similarity(fp, fg, embedder)
        metrics["face_psnr"] = psnr(fp, fg)
        metrics["face_ssim"] = ssim(fp, fg)
    if external is not None:
        metrics[external.name] = external(pred, hq)
    return metrics


def evaluate_row(
    row: FaceTriplet,
    root: Path,
    restorer: Restorer,
    embedder: Embedder,
    template: FaceTemplate,
    with_reference: bool,
    external: Optional[ExternalMetric] = None,
) -> RowResult:
    """Metrics for one triplet; missing files and domain errors fail the row only"""
    try:
        metrics = _row_metrics(
            row, root, restorer, embedder, template, with_reference, external
        )
    except OSError as e:
        return RowResult(row_id=row.id, success=False, error=f"missing file: {e}")
    except RestorationError as e:
        return RowResult(row_id=row.id, success=False, error=f"{type(e).__name__}: {e}")
    return RowResult(row_id=row.id, success=True, metrics=metrics)



def evaluate_manifest(
    restorer: Restorer,
    rows: Sequence[FaceTriplet],
    root: Path,
    embedder: Embedder,
    cfg: Optional[EvalConfig] = None,
    out_csv: Optional[Path] = None,
    out_table: Optional[Path] = None,
) -> EvalReport:
    """Per-image and mean PSNR/SSIM/ID-Score (plus face-crop metrics) over a manifest.

    Rows with missing files or bad data are reported, not fatal. ID-Score is averaged
    over all rows and, separately, over rows evaluated with a reference.
    """
    cfg = cfg or EvalConfig()
    root = Path(root)
    template = FaceTemplate.arcface(cfg.face_side)
    external = (
        ExternalMetric(cfg.external_metric, cfg.external_metric_name, cfg.timeout)
        if cfg.external_metric
        else None
    )
    columns = list(METRIC_COLUMNS) + ([external.name] if external else [])

    results = [
        evaluate_row(row, root, restorer, embedder, template, cfg.with_reference, external)
        for row in tqdm(sorted(rows, key=lambda r: r.id), desc="eval", leave=False)
    ]
    report = EvalReport(rows=results, columns=columns)
    report.means = summarize(results, columns)
    referenced = [r for r in results if r.success and r.metrics.get("referenced") == 1.0]
    report.referenced_means = summarize(referenced, columns)
    for r in report.failures:
        logger.warning(f"{r.row_id}: {r.error}")

    if out_csv is not None:
        write_csv(report, out_csv)
    if out_table is not None:
        Path(out_table).parent.mkdir(parents=True, exist_ok=True)
        Path(out_table).write_text(format_report(report), encoding="utf-8")
    return report


def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_csv(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "status", "referenced"] + report.columns + ["error"])
        for r in report.rows:
            writer.writerow(
                [r.row_id, "ok" if r.success else "failed", int(r.metrics.get("referenced", 0))]
                + [_cell(r.metrics.get(c)) for c in report.columns]
                + [r.error or ""]
            )
    return path


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned text table"""
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return "-" if v is None or math.isnan(v) else f"{v:.4f}"


def format_report(report: EvalReport) -> str:
    ok = len(report.rows) - len(report.failures)
    n_ref = sum(1 for r in report.rows if r.success and r.metrics.get("referenced") == 1.0)
    rows = [
        [f"all ({ok})"] + [_fmt(report.means[c]) for c in report.columns],
        [f"referenced ({n_ref})"] + [_fmt(report.referenced_means[c]) for c in report.columns],
    ]
    return format_table(["subset"] + report.columns, rows)


def read_eval_csv(path: Union[str, Path]) -> Dict[str, float]:
    """Means recomputed from a per-image CSV (ok rows only)"""
    sums: Dict[str, List[float]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        fixed = ("id", "status", "referenced", "error")
        metric_cols = [c for c in reader.fieldnames or [] if c not in fixed]
        for row in reader:
            if row["status"] != "ok":
                continue
            for c in metric_cols:
                if row[c] != "":
                    sums.setdefault(c, []).append(float(row[c]))
        return {c: _mean(sums.get(c, [])) for c in metric_cols}


def compare_reports(paths: Sequence[Union[str, Path]]) -> str:
    """Side-by-side means of several evaluation CSVs"""
    tables = {str(p): read_eval_csv(p) for p in paths}
    columns: List[str] = []
    for means in tables.values():
        columns += [c for c in means if c not in columns]
    rows = [
        [Path(p).stem] + [_fmt(m.get(c, float("nan"))) for c in columns]
        for p, m in tables.items()
    ]
    return format_table(["run"] + columns, rows)


def format_win_rates(rates: Dict[str, Dict[str, float]]) -> str:
    methods = sorted({m for r in rates.values() for m in r})
    rows = [[name] + [_fmt(r.get(m, 0.0)) for m in methods] for name, r in rates.items()]
    return format_table(["criterion"] + methods, rows)
