"""Manifest loading and the two-subset accuracy protocol.

Subset accuracies are kept as exact fractions until the report is
serialized, so the overall score is the true mean of the two subsets and
display rounding (half-up, two decimals) never sees float noise.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .backend import Backend
from .constraints import ConstraintSet
from .core import IllusionQuery, ImageError, ImageRef, ParseStatus, SqiError
from .dispatch import DispatchRules
from .pipeline import PipelineConfig, PipelineResult, run_many, write_traces

PERTURBED = 0
ORIGINAL = 1
MANIFEST_FIELDS = ("id", "image", "question", "gt")


class SchemaError(SqiError):
    pass


class MissingImageError(SqiError):
    pass


class EmptySubsetError(SqiError):
    pass


@dataclass(frozen=True)
class Manifest:
    items: tuple[IllusionQuery, ...]
    name: str
    version: str

    def subset(self, label: int) -> tuple[IllusionQuery, ...]:
        return tuple(q for q in self.items if q.gt_label == label)


def load_manifest(path: str | Path) -> Manifest:
    """Read a JSON-lines manifest; image paths resolve against its directory."""
    path = Path(path)
    raw = path.read_bytes()
    items = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{where}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise SchemaError(f"{where}: expected a JSON object")
        item_id = obj.get("id")
        if isinstance(item_id, str) and item_id:
            where = f"{where} (item {item_id})"
        missing = [k for k in MANIFEST_FIELDS if k not in obj]
        if missing:
            raise SchemaError(f"{where}: missing field(s) {', '.join(missing)}")
        extra = sorted(set(obj) - set(MANIFEST_FIELDS))
        if extra:
            raise SchemaError(f"{where}: unknown field(s) {', '.join(extra)}")
        if not isinstance(item_id, str) or not item_id:
            raise SchemaError(f"{where}: id must be a non-empty string")
        if item_id in seen:
            raise SchemaError(f"{where}: duplicate id")
        seen.add(item_id)
        gt = obj["gt"]
        if isinstance(gt, bool) or gt not in (0, 1):
            raise SchemaError(f"{where}: gt must be 0 or 1, got {gt!r}")
        question = obj["question"]
        if not isinstance(question, str) or not question.strip():
            raise SchemaError(f"{where}: question must be non-empty text")
        if not isinstance(obj["image"], str) or not obj["image"]:
            raise SchemaError(f"{where}: image must be a relative path")
        image_path = path.parent / obj["image"]
        if not image_path.is_file():
            raise MissingImageError(f"{where}: image not found: {image_path}")
        try:
            image = ImageRef.from_path(image_path)
        except ImageError as exc:
            raise SchemaError(f"{where}: {exc}") from None
        items.append(IllusionQuery(item_id, image, question, gt))
    version = hashlib.sha256(raw).hexdigest()[:12]
    return Manifest(tuple(items), path.stem, version)


# --- metric -----------------------------------------------------------------


def _exact(value) -> Fraction:
    # floats are read through their shortest repr, i.e. as the published decimal
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def round_half_up(value, places: int = 2) -> Decimal:
    """Round to ``places`` decimals, ties away from zero, on the exact value."""
    scaled = _exact(value) * 10**places
    n = math.floor(abs(scaled) + Fraction(1, 2))
    return Decimal(-n if scaled < 0 else n).scaleb(-places)


def fmt_pct(value) -> str:
    return f"{round_half_up(value):.2f}"


@dataclass(frozen=True)
class ItemOutcome:
    item_id: str
    query_type: str
    gt_label: int
    predicted_label: int | None
    parse_status: str
    correct: bool

    def as_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "query_type": self.query_type,
            "gt_label": self.gt_label,
            "predicted_label": self.predicted_label,
            "parse_status": self.parse_status,
            "correct": self.correct,
        }


def outcome_from_result(result: PipelineResult) -> ItemOutcome:
    gt = result.query.gt_label
    if gt is None:
        raise SchemaError(f"item {result.query.item_id} has no gt_label")
    predicted = result.verdict.numeric_label
    return ItemOutcome(
        item_id=result.query.item_id,
        query_type=result.query_type.value,
        gt_label=gt,
        predicted_label=predicted,
        parse_status=result.verdict.parse_status.value,
        correct=predicted is not None and predicted == gt,
    )


def subset_fraction(items: Sequence[ItemOutcome], subset: int) -> Fraction:
    members = [o for o in items if o.gt_label == subset]
    if not members:
        name = "perturbed (gt=0)" if subset == PERTURBED else "original (gt=1)"
        raise EmptySubsetError(f"no {name} items to score")
    return Fraction(100 * sum(o.correct for o in members), len(members))


def subset_accuracy(items: Sequence[ItemOutcome], subset: int) -> float:
    return float(subset_fraction(items, subset))


def overall_accuracy(acc_pert, acc_orig) -> float:
    """Mean of the two subset accuracies (percent), full precision."""
    a, b = _exact(acc_pert), _exact(acc_orig)
    for v in (a, b):
        if not 0 <= v <= 100:
            raise ValueError(f"accuracy {float(v)} is outside [0, 100]")
    return float((a + b) / 2)


@dataclass(frozen=True)
class EvalReport:
    acc_pert: float
    acc_orig: float
    overall: float
    per_item: tuple[ItemOutcome, ...]
    n_pert: int
    n_orig: int
    n_unparseable: int
    metadata: dict = field(default_factory=dict)
    _exact: tuple[Fraction, Fraction, Fraction] | None = field(
        default=None, repr=False, compare=False
    )

    def display(self) -> dict[str, str]:
        pert, orig, overall = self._exact or (self.acc_pert, self.acc_orig, self.overall)
        return {"overall": fmt_pct(overall), "pert": fmt_pct(pert), "orig": fmt_pct(orig)}

    def summary_line(self) -> str:
        d = self.display()
        return f"overall={d['overall']} pert={d['pert']} orig={d['orig']}"

    def to_dict(self) -> dict:
        return {
            "accuracy": {
                "overall": self.overall,
                "pert": self.acc_pert,
                "orig": self.acc_orig,
            },
            "display": self.display(),
            "counts": {
                "n_pert": self.n_pert,
                "n_orig": self.n_orig,
                "n_unparseable": self.n_unparseable,
            },
            "metadata": self.metadata,
            "per_item": [o.as_dict() for o in self.per_item],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["item_id", "query_type", "gt_label", "predicted_label", "parse_status", "correct"]
        )
        for o in self.per_item:
            predicted = "" if o.predicted_label is None else o.predicted_label
            writer.writerow(
                [o.item_id, o.query_type, o.gt_label, predicted, o.parse_status, int(o.correct)]
            )
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json(), encoding="utf-8")
        (out_dir / "report.csv").write_text(self.to_csv(), encoding="utf-8")
        d = self.display()
        summary = f"overall {d['overall']}\nperturbed {d['pert']}\noriginal {d['orig']}\n"
        (out_dir / "summary.txt").write_text(summary, encoding="utf-8")


def build_report(outcomes: Iterable[ItemOutcome], metadata: dict | None = None) -> EvalReport:
    per_item = tuple(sorted(outcomes, key=lambda o: o.item_id))
    pert = subset_fraction(per_item, PERTURBED)
    orig = subset_fraction(per_item, ORIGINAL)
    overall = (pert + orig) / 2
    return EvalReport(
        acc_pert=float(pert),
        acc_orig=float(orig),
        overall=overall_accuracy(pert, orig),
        per_item=per_item,
        n_pert=sum(o.gt_label == PERTURBED for o in per_item),
        n_orig=sum(o.gt_label == ORIGINAL for o in per_item),
        n_unparseable=sum(o.parse_status == ParseStatus.UNPARSEABLE.value for o in per_item),
        metadata=dict(metadata or {}),
        _exact=(pert, orig, overall),
    )


def run_eval(
    manifest: Manifest,
    cs: ConstraintSet,
    cfg: PipelineConfig,
    backend: Backend,
    rules: DispatchRules | None = None,
    concurrency: int = 1,
    trace_dir: str | Path | None = None,
) -> EvalReport:
    for label in (PERTURBED, ORIGINAL):
        if not manifest.subset(label):
            subset_fraction([], label)
    results = run_many(manifest.items, cs, cfg, backend, rules, concurrency)
    if trace_dir is not None:
        write_traces(results, trace_dir)
    metadata = {
        "manifest": manifest.name,
        "manifest_version": manifest.version,
        "mode": cfg.mode.value,
        "backend_id": cfg.backend_id,
        "n_items": len(manifest.items),
    }
    return build_report((outcome_from_result(r) for r in results), metadata)
