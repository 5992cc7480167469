"""Benchmark evaluation: judge verdicts, low-level element scores, and reports.

The low-level Text/Type/Layout/Color scores compare element traces extracted
from the gold code and the final code: Text is a multiset F1 over
whitespace-normalized strings, Type and Color are set F1 (colors first
quantized to 32 levels per channel), and Layout gives full credit for an
exact (rows, cols, n_axes) match with partial credit when only the axes
count differs on a matching grid. The F1 of two empty sets is 1.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .gateway import ChatRequest, ModelGateway, NoRating, parse_rating
from .images import ChartImage
from .metrics import compute_metrics
from .prompt_library import render_judge_prompt
from .sandbox import ElementTrace, RenderOutcome

JUDGE_SAMPLES = 3

REPORT_COLUMNS = ("Text", "Type", "Layout", "Color", "PSNR", "SSIM", "MSE", "GPT-Score")

JUDGE_SKIPPED = "skipped"


class ManifestError(Exception):
    pass


class MissingFile(ManifestError):
    def __init__(self, item_id: str, path: str) -> None:
        super().__init__(f"item '{item_id}': missing file {path}")
        self.item_id = item_id
        self.path = path


class MalformedManifest(ManifestError):
    def __init__(self, line_no: int, detail: str) -> None:
        super().__init__(f"manifest line {line_no}: {detail}")
        self.line_no = line_no


class JudgeParseFailure(Exception):
    """A judge response carried no parseable rating; keeps the raw text."""

    def __init__(self, raw_text: str) -> None:
        super().__init__(f"unparseable judge response: {raw_text[:120]!r}")
        self.raw_text = raw_text


@dataclass(frozen=True)
class DatasetItem:
    id: str
    image: Path
    code: Path | None = None


def load_manifest(path: str | Path) -> list[DatasetItem]:
    """Parse a JSONL manifest of {"id", "image", "code"|null}, validating files."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    items: list[DatasetItem] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            item_id = obj["id"]
            image = obj["image"]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedManifest(line_no, str(exc)) from exc
        code = obj.get("code")
        image_path = (path.parent / image).resolve() if not Path(image).is_absolute() else Path(image)
        if not image_path.is_file():
            raise MissingFile(item_id, str(image_path))
        code_path: Path | None = None
        if code:
            code_path = (path.parent / code).resolve() if not Path(code).is_absolute() else Path(code)
            if not code_path.is_file():
                raise MissingFile(item_id, str(code_path))
        items.append(DatasetItem(id=item_id, image=image_path, code=code_path))
    return items


def write_manifest(items: Iterable[DatasetItem], path: str | Path) -> None:
    lines = []
    for item in items:
        lines.append(json.dumps({
            "id": item.id,
            "image": str(item.image),
            "code": str(item.code) if item.code else None,
        }))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def import_paired_directory(directory: str | Path, manifest_path: str | Path) -> list[DatasetItem]:
    """Adapter for benchmark layouts of paired ``<id>.png`` / ``<id>.py`` files."""
    directory = Path(directory)
    items = []
    for image_path in sorted(directory.glob("*.png")):
        code_path = image_path.with_suffix(".py")
        items.append(DatasetItem(
            id=image_path.stem,
            image=image_path.resolve(),
            code=code_path.resolve() if code_path.is_file() else None,
        ))
    write_manifest(items, manifest_path)
    return items


# -- Judge scoring ---------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    ratings: tuple[int, int, int]
    mean: float

    def __post_init__(self) -> None:
        if len(self.ratings) != JUDGE_SAMPLES:
            raise ValueError(f"expected {JUDGE_SAMPLES} ratings")
        expected = sum(self.ratings) / JUDGE_SAMPLES
        if abs(self.mean - expected) > 1e-9:
            raise ValueError("mean does not match ratings")


def judge_score(
    gateway: ModelGateway,
    ref: ChartImage,
    gen: ChartImage,
    *,
    allow_zero: bool = False,
    transcript=None,
) -> JudgeVerdict:
    """Mean of three independent judge ratings on the fixed similarity prompt."""
    prompt = render_judge_prompt()
    minimum = 0 if allow_zero else 1
    ratings = []
    for _ in range(JUDGE_SAMPLES):
        response = gateway.complete(ChatRequest("judge", prompt, (ref, gen)), transcript)
        try:
            ratings.append(parse_rating(response.text, minimum=minimum))
        except NoRating as exc:
            raise JudgeParseFailure(response.text) from exc
    ratings_t = (ratings[0], ratings[1], ratings[2])
    return JudgeVerdict(ratings=ratings_t, mean=sum(ratings_t) / JUDGE_SAMPLES)


# -- Low-level element scores ------------------------------------------------


@dataclass(frozen=True)
class LowLevelScores:
    text: float
    type: float
    layout: float
    color: float

    def __post_init__(self) -> None:
        for name in ("text", "type", "layout", "color"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} score {value} outside [0, 1]")


def _f1(tp: float, n_ref: int, n_gen: int) -> float:
    if n_ref == 0 and n_gen == 0:
        return 1.0
    if tp == 0 or n_ref == 0 or n_gen == 0:
        return 0.0
    precision = tp / n_gen
    recall = tp / n_ref
    return 2.0 * precision * recall / (precision + recall)


def _multiset_f1(ref_items: Sequence[str], gen_items: Sequence[str]) -> float:
    ref_counts = Counter(ref_items)
    gen_counts = Counter(gen_items)
    tp = sum((ref_counts & gen_counts).values())
    return _f1(tp, sum(ref_counts.values()), sum(gen_counts.values()))


def _set_f1(ref_set: frozenset, gen_set: frozenset) -> float:
    return _f1(len(ref_set & gen_set), len(ref_set), len(gen_set))


def _normalize_text(s: str) -> str:
    return " ".join(s.split())


def _quantize_color(rgb: int) -> tuple[int, int, int]:
    # 32 levels per channel: drop the 3 low bits.
    return ((rgb >> 16) & 0xFF) >> 3, ((rgb >> 8) & 0xFF) >> 3, (rgb & 0xFF) >> 3


def low_level_scores(ref_trace: ElementTrace, gen_trace: ElementTrace) -> LowLevelScores:
    text = _multiset_f1(
        [_normalize_text(s) for s in ref_trace.texts],
        [_normalize_text(s) for s in gen_trace.texts],
    )
    type_score = _set_f1(ref_trace.type_tags, gen_trace.type_tags)
    if ref_trace.layout == gen_trace.layout:
        layout = 1.0
    elif (ref_trace.rows, ref_trace.cols) == (gen_trace.rows, gen_trace.cols):
        layout = min(ref_trace.n_axes, gen_trace.n_axes) / max(ref_trace.n_axes, gen_trace.n_axes)
    else:
        layout = 0.0
    color = _set_f1(
        frozenset(_quantize_color(c) for c in ref_trace.colors),
        frozenset(_quantize_color(c) for c in gen_trace.colors),
    )
    return LowLevelScores(text=text, type=type_score, layout=layout, color=color)


# -- Per-item evaluation ------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    """One evaluated item; None marks a column that is n/a for this item."""

    id: str
    text: float | None
    type: float | None
    layout: float | None
    color: float | None
    psnr: float
    ssim: float
    mse: float
    judge_mean: float | None
    judge_status: str
    iterations: int
    termination_reason: str
    render_ok: bool
    notes: str = ""

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "type": self.type,
            "layout": self.layout,
            "color": self.color,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "mse": self.mse,
            "judge_mean": self.judge_mean,
            "judge_status": self.judge_status,
            "iterations": self.iterations,
            "termination_reason": self.termination_reason,
            "render_ok": self.render_ok,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ReportRow":
        return cls(**obj)


class Evaluator:
    """Computes report rows for finished items; sandbox errors never abort a run."""

    def __init__(
        self,
        sandbox,
        *,
        judge_gateway: ModelGateway | None = None,
        render_timeout_ms: int = 30000,
        work_root: str | Path | None = None,
        allow_zero_rating: bool = False,
    ) -> None:
        self.sandbox = sandbox
        self.judge_gateway = judge_gateway
        self.render_timeout_ms = render_timeout_ms
        self._work_root = Path(work_root) if work_root else None
        self._seq = 0
        self.allow_zero_rating = allow_zero_rating

    def evaluate_item(
        self,
        item: DatasetItem,
        final_code: str,
        *,
        iterations: int = 0,
        termination_reason: str = "",
    ) -> ReportRow:
        reference = ChartImage.from_file(item.image)
        notes: list[str] = []

        outcome = self._render(item.id, final_code) if final_code.strip() else None
        if outcome is None or not outcome.ok:
            if outcome is not None:
                notes.append(f"final render failed: {outcome.error_class}")
            else:
                notes.append("no final code produced")
            has_gold = item.code is not None
            return ReportRow(
                id=item.id,
                text=0.0 if has_gold else None,
                type=0.0 if has_gold else None,
                layout=0.0 if has_gold else None,
                color=0.0 if has_gold else None,
                psnr=0.0,
                ssim=0.0,
                mse=0.0,
                judge_mean=None,
                judge_status=JUDGE_SKIPPED,
                iterations=iterations,
                termination_reason=termination_reason,
                render_ok=False,
                notes="; ".join(notes),
            )

        vector = compute_metrics(outcome.image, reference)

        text = type_score = layout = color = None
        if item.code is not None:
            gold_code = item.code.read_text(encoding="utf-8")
            ref_trace = self._trace(item.id, gold_code)
            gen_trace = self._trace(item.id, final_code)
            if isinstance(ref_trace, ElementTrace) and isinstance(gen_trace, ElementTrace):
                scores = low_level_scores(ref_trace, gen_trace)
                text, type_score, layout, color = (
                    scores.text, scores.type, scores.layout, scores.color,
                )
            else:
                failed = ref_trace if isinstance(ref_trace, RenderOutcome) else gen_trace
                notes.append(f"trace failed: {failed.error_class}")
                text = type_score = layout = color = 0.0

        judge_mean: float | None = None
        judge_status = JUDGE_SKIPPED
        if self.judge_gateway is not None:
            verdict = judge_score(
                self.judge_gateway, reference, outcome.image,
                allow_zero=self.allow_zero_rating,
            )
            judge_mean = verdict.mean
            judge_status = "scored"

        return ReportRow(
            id=item.id,
            text=text,
            type=type_score,
            layout=layout,
            color=color,
            psnr=vector.psnr_db,
            ssim=vector.ssim if vector.ssim is not None else 0.0,
            mse=vector.mse,
            judge_mean=judge_mean,
            judge_status=judge_status,
            iterations=iterations,
            termination_reason=termination_reason,
            render_ok=True,
            notes="; ".join(notes),
        )

    def _render(self, item_id: str, code: str) -> RenderOutcome:
        return self.sandbox.render(code, self.render_timeout_ms, self._fresh_workdir(item_id))

    def _trace(self, item_id: str, code: str) -> ElementTrace | RenderOutcome:
        return self.sandbox.trace_elements(
            code, self.render_timeout_ms, self._fresh_workdir(item_id)
        )

    def _fresh_workdir(self, item_id: str) -> Path:
        import tempfile

        if self._work_root is None:
            self._work_root = Path(tempfile.mkdtemp(prefix="chartir-eval-"))
        base = self._work_root / item_id
        base.mkdir(parents=True, exist_ok=True)
        self._seq += 1
        return Path(tempfile.mkdtemp(prefix=f"eval-{self._seq:04d}-", dir=base))


# -- Report assembly ----------------------------------------------------------


@dataclass(frozen=True)
class RunReport:
    rows: tuple[ReportRow, ...]
    aggregate: dict


_COLUMN_FIELDS = {
    "Text": "text",
    "Type": "type",
    "Layout": "layout",
    "Color": "color",
    "PSNR": "psnr",
    "SSIM": "ssim",
    "MSE": "mse",
    "GPT-Score": "judge_mean",
}


def build_report(rows: Sequence[ReportRow]) -> RunReport:
    """Aggregate means per column, skipping n/a values; zero rows give an empty report."""
    aggregate: dict = {}
    for column, field_name in _COLUMN_FIELDS.items():
        values = [getattr(r, field_name) for r in rows if getattr(r, field_name) is not None]
        aggregate[column] = sum(values) / len(values) if values else None
    aggregate["items"] = len(rows)
    aggregate["failed_renders"] = sum(1 for r in rows if not r.render_ok)
    return RunReport(rows=tuple(rows), aggregate=aggregate)


def _format_cell(value: float | None, digits: int = 4) -> str:
    if value is None:
        return "n/a"
    return f"{value:.{digits}g}"


def render_markdown(report: RunReport) -> str:
    header = ["id", *REPORT_COLUMNS, "iterations", "termination"]
    lines = [
        "| " + " | ".join(header) + " |",
        "| " + " | ".join("---" for _ in header) + " |",
    ]
    for row in report.rows:
        cells = [row.id]
        cells += [_format_cell(getattr(row, _COLUMN_FIELDS[c])) for c in REPORT_COLUMNS]
        cells += [str(row.iterations), row.termination_reason or "-"]
        lines.append("| " + " | ".join(cells) + " |")
    mean_cells = ["mean"]
    mean_cells += [_format_cell(report.aggregate[c]) for c in REPORT_COLUMNS]
    mean_cells += ["-", "-"]
    lines.append("| " + " | ".join(mean_cells) + " |")
    return "\n".join(lines) + "\n"


def render_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["id", *REPORT_COLUMNS, "iterations", "termination"])
    for row in report.rows:
        writer.writerow(
            [row.id]
            + [_format_cell(getattr(row, _COLUMN_FIELDS[c]), digits=10) for c in REPORT_COLUMNS]
            + [row.iterations, row.termination_reason or "-"]
        )
    writer.writerow(
        ["mean"]
        + [_format_cell(report.aggregate[c], digits=10) for c in REPORT_COLUMNS]
        + ["-", "-"]
    )
    return buf.getvalue()


def report_to_json(report: RunReport) -> str:
    return json.dumps(
        {"rows": [row.as_dict() for row in report.rows], "aggregate": report.aggregate},
        indent=2,
    )


def report_from_json(raw: str) -> RunReport:
    payload = json.loads(raw)
    rows = tuple(ReportRow.from_dict(obj) for obj in payload["rows"])
    return RunReport(rows=rows, aggregate=payload["aggregate"])
