"""Evaluation metrics and run scoring.

Kernels: Levenshtein distance, thresholded normalized-similarity scoring for
short answers (ANLS), micro-averaged F1 of selected key boxes against gold
helpful boxes, and field extraction F1 with type-aware fuzzy value matching
(exact-match variant included). `evaluate_run` joins a predictions file with a
gold file, writes the per-sample table, a machine-readable summary, and a
score figure.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import InputFormatError, JoinError, ParameterError, ValidationError
from .textnorm import normalize_text

METRIC_ANLS = "anls"
METRIC_KEYBOX_F1 = "keybox-f1"
METRIC_TYPED_MICRO_F1 = "typed-micro-f1"
METRIC_FIELD_F1 = "field-f1"
METRICS = (METRIC_ANLS, METRIC_KEYBOX_F1, METRIC_TYPED_MICRO_F1, METRIC_FIELD_F1)

DEFAULT_ANLS_TAU = 0.5

FIELD_TYPES = ("string", "numeric", "price", "date")

_CURRENCY = "$€£¥"
_NUMERIC_RE = re.compile(r"^[+-]?\d+(\.\d+)?$")


def levenshtein(a: str, b: str) -> int:
    """Minimum number of unit-cost edits (insert/delete/substitute)."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(cur[-1] + 1, prev[j] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(pred: str, golds: Sequence[str], tau: float = DEFAULT_ANLS_TAU,
         lowercase: bool = True) -> float:
    """Best thresholded normalized Levenshtein similarity over the gold answers.

    Per gold: NL = distance / max(len(pred), len(gold)) after trimming (and
    lowercasing unless disabled); the score is 1 - NL when NL < tau, else 0.
    Both strings empty counts as a perfect match.
    """
    if not golds:
        raise ParameterError("golds must be non-empty")
    p = pred.strip()
    if lowercase:
        p = p.lower()
    best = 0.0
    for gold in golds:
        g = gold.strip()
        if lowercase:
            g = g.lower()
        denom = max(len(p), len(g))
        nl = 0.0 if denom == 0 else levenshtein(p, g) / denom
        score = 1.0 - nl if nl < tau else 0.0
        best = max(best, score)
    return best


def keybox_counts(predicted: Iterable[int], gold_helpful: Iterable[int]) -> tuple[int, int, int]:
    """Per-sample (tp, fp, fn) of predicted key boxes against gold helpful boxes."""
    p, g = set(predicted), set(gold_helpful)
    return (len(p & g), len(p - g), len(g - p))


def micro_f1(counts: Iterable[tuple[int, int, int]]) -> float:
    """Pooled F1 = 2*TP / (2*TP + FP + FN); 1.0 when there is nothing to match."""
    tp = fp = fn = 0
    for t, f, n in counts:
        tp, fp, fn = tp + t, fp + f, fn + n
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


# ---------------------------------------------------------------------------
# Type-aware field matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TypedField:
    field_name: str
    value: str
    value_type: str

    def __post_init__(self) -> None:
        if self.value_type not in FIELD_TYPES:
            raise ParameterError(f"unknown value_type {self.value_type!r}")


def assign_types(fields: Sequence[tuple[str, str]], type_table: dict[str, str]) -> list[TypedField]:
    """Attach declared types from the dataset's field-type table."""
    out = []
    for name, value in fields:
        if name not in type_table:
            raise ValidationError(f"field {name!r} missing from the field-type table")
        out.append(TypedField(name, value, type_table[name]))
    return out


def parse_numeric(s: str) -> Optional[float]:
    cleaned = s.strip()
    for ch in _CURRENCY:
        cleaned = cleaned.replace(ch, "")
    cleaned = cleaned.replace(",", "").replace(" ", "")
    if not _NUMERIC_RE.match(cleaned):
        return None
    return float(cleaned)


_DATE_FORMATS_MDY = ("%Y-%m-%d", "%m/%d/%Y", "%B %d, %Y", "%b %d, %Y", "%d %B %Y", "%d %b %Y")
_DATE_FORMATS_DMY = ("%Y-%m-%d", "%d/%m/%Y", "%B %d, %Y", "%b %d, %Y", "%d %B %Y", "%d %b %Y")


def parse_date(s: str, day_first: bool = False) -> Optional[date]:
    cleaned = " ".join(s.strip().split())
    for fmt in _DATE_FORMATS_DMY if day_first else _DATE_FORMATS_MDY:
        try:
            return datetime.strptime(cleaned, fmt).date()
        except ValueError:
            continue
    return None


def _string_equal(a: str, b: str) -> bool:
    return normalize_text(a) == normalize_text(b)


def typed_match(pred: TypedField, gold: TypedField, day_first: bool = False) -> bool:
    """Fuzzy equality under the field's declared type.

    Numeric/price values compare after stripping currency symbols and
    thousands separators (relative tolerance 1e-6); dates compare as calendar
    dates across the supported formats. When either side does not parse, the
    normalized-string rule decides.
    """
    if pred.field_name != gold.field_name:
        raise ParameterError(
            f"field mismatch: {pred.field_name!r} vs {gold.field_name!r}"
        )
    t = gold.value_type
    if t in ("numeric", "price"):
        a, b = parse_numeric(pred.value), parse_numeric(gold.value)
        if a is not None and b is not None:
            return math.isclose(a, b, rel_tol=1e-6, abs_tol=1e-9)
        return _string_equal(pred.value, gold.value)
    if t == "date":
        a, b = parse_date(pred.value, day_first), parse_date(gold.value, day_first)
        if a is not None and b is not None:
            return a == b
        return _string_equal(pred.value, gold.value)
    return _string_equal(pred.value, gold.value)


def exact_match(pred: TypedField, gold: TypedField) -> bool:
    """Strict variant: normalized string equality regardless of type."""
    if pred.field_name != gold.field_name:
        raise ParameterError(
            f"field mismatch: {pred.field_name!r} vs {gold.field_name!r}"
        )
    return _string_equal(pred.value, gold.value)


def field_match_counts(
    predictions: Sequence[TypedField],
    golds: Sequence[TypedField],
    fuzzy: bool = True,
    day_first: bool = False,
) -> tuple[int, int, int]:
    """Greedy one-to-one matching: golds in file order, each taking its first
    matching unmatched prediction with the same field name."""
    taken = [False] * len(predictions)
    tp = 0
    for gold in golds:
        for i, pred in enumerate(predictions):
            if taken[i] or pred.field_name != gold.field_name:
                continue
            ok = typed_match(pred, gold, day_first) if fuzzy else exact_match(pred, gold)
            if ok:
                taken[i] = True
                tp += 1
                break
    fp = taken.count(False)
    fn = len(golds) - tp
    return (tp, fp, fn)


# ---------------------------------------------------------------------------
# Run evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    dataset_tag: str
    metric_name: str
    score: float
    n_samples: int
    rows: tuple[dict, ...]
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must be in [0,1], got {self.score}")


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputFormatError(f"{path}: {exc}") from exc
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputFormatError(f"{path}:{ln}: bad JSON: {exc}") from exc
        if not isinstance(rec, dict) or "sample_id" not in rec:
            raise InputFormatError(f"{path}:{ln}: record needs a sample_id")
        records.append(rec)
    return records


def _join(preds: list[dict], golds: list[dict]) -> list[tuple[dict, dict]]:
    if not preds:
        raise InputFormatError("predictions file is empty")
    if not golds:
        raise InputFormatError("gold file is empty")
    gold_by_id = {}
    for g in golds:
        if g["sample_id"] in gold_by_id:
            raise InputFormatError(f"duplicate gold sample_id {g['sample_id']!r}")
        gold_by_id[g["sample_id"]] = g
    seen = set()
    for p in preds:
        if p["sample_id"] in seen:
            raise InputFormatError(f"duplicate prediction sample_id {p['sample_id']!r}")
        seen.add(p["sample_id"])
    unresolved = sorted(seen - set(gold_by_id))
    if unresolved:
        raise JoinError(f"prediction sample_ids missing from gold: {unresolved}")
    unanswered = sorted(set(gold_by_id) - seen)
    if unanswered:
        raise JoinError(f"gold sample_ids missing from predictions: {unanswered}")
    return [(p, gold_by_id[p["sample_id"]]) for p in preds]


def _typed_fields(rec: dict, path_label: str, type_table: dict[str, str]) -> list[TypedField]:
    raw = rec.get("fields")
    if not isinstance(raw, list):
        raise InputFormatError(f"{path_label}: sample {rec['sample_id']!r} needs a fields list")
    pairs = []
    for f in raw:
        if not isinstance(f, dict) or "field_name" not in f or "value" not in f:
            raise InputFormatError(
                f"{path_label}: sample {rec['sample_id']!r} field needs field_name and value"
            )
        pairs.append((str(f["field_name"]), str(f["value"])))
    return assign_types(pairs, type_table)


def evaluate_run(
    predictions_path: str | Path,
    gold_path: str | Path,
    metric: str,
    tau: float = DEFAULT_ANLS_TAU,
    day_first: bool = False,
    field_types: Optional[dict[str, str]] = None,
    dataset_tag: str = "",
) -> EvalReport:
    """Score one predictions file against one gold file.

    Both files are JSONL keyed by sample_id and must cover each other exactly;
    anything unresolved is an error, never a silent zero.
    """
    if metric not in METRICS:
        raise ParameterError(f"metric must be one of {METRICS}, got {metric!r}")
    preds = _read_jsonl(Path(predictions_path))
    golds = _read_jsonl(Path(gold_path))
    joined = _join(preds, golds)

    rows: list[dict] = []
    if metric == METRIC_ANLS:
        total = 0.0
        for p, g in joined:
            answers = g.get("answers") or []
            if not answers:
                raise InputFormatError(f"gold sample {g['sample_id']!r} has no answers")
            score = anls(str(p.get("answer", "")), [str(a) for a in answers], tau=tau)
            total += score
            rows.append({"sample_id": p["sample_id"], "score": score})
        aggregate = total / len(joined)
        params: dict = {"tau": tau}
    elif metric == METRIC_KEYBOX_F1:
        counts = []
        for p, g in joined:
            tp, fp, fn = keybox_counts(p.get("selection") or [], g.get("helpful") or [])
            counts.append((tp, fp, fn))
            rows.append({"sample_id": p["sample_id"], "tp": tp, "fp": fp, "fn": fn})
        aggregate = micro_f1(counts)
        params = {}
    else:
        fuzzy = metric == METRIC_TYPED_MICRO_F1
        table = field_types or {}
        counts = []
        for p, g in joined:
            pf = _typed_fields(p, "predictions", table)
            gf = _typed_fields(g, "gold", table)
            tp, fp, fn = field_match_counts(pf, gf, fuzzy=fuzzy, day_first=day_first)
            counts.append((tp, fp, fn))
            rows.append({"sample_id": p["sample_id"], "tp": tp, "fp": fp, "fn": fn})
        aggregate = micro_f1(counts)
        params = {"fuzzy": fuzzy, "day_first": day_first}

    return EvalReport(
        dataset_tag=dataset_tag,
        metric_name=metric,
        score=aggregate,
        n_samples=len(joined),
        rows=tuple(rows),
        params=params,
    )


def write_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    """Write report.tsv, summary.json and a score figure; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    columns = sorted({k for row in report.rows for k in row} - {"sample_id"})
    table_path = out / "report.tsv"
    lines = ["\t".join(["sample_id"] + columns)]
    for row in report.rows:
        lines.append("\t".join([str(row["sample_id"])] + [_fmt(row.get(c)) for c in columns]))
    table_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary_path = out / "summary.json"
    summary_path.write_text(
        json.dumps(
            {
                "dataset_tag": report.dataset_tag,
                "metric": report.metric_name,
                "score": report.score,
                "n_samples": report.n_samples,
                "params": report.params,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )

    figure_path = out / "scores.png"
    _write_figure(report, figure_path)
    return {"table": table_path, "summary": summary_path, "figure": figure_path}


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return "" if value is None else str(value)


def _write_figure(report: EvalReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if report.metric_name == METRIC_ANLS:
        scores = [row["score"] for row in report.rows]
        ax.hist(scores, bins=20, range=(0.0, 1.0), color="#4477aa", edgecolor="black")
        ax.set_xlabel("per-sample score")
        ax.set_ylabel("samples")
    else:
        totals = {
            "TP": sum(r.get("tp", 0) for r in report.rows),
            "FP": sum(r.get("fp", 0) for r in report.rows),
            "FN": sum(r.get("fn", 0) for r in report.rows),
        }
        ax.bar(list(totals), list(totals.values()), color=["#228833", "#ee6677", "#ccbb44"])
        ax.set_ylabel("count")
    ax.set_title(f"{report.metric_name} = {report.score:.4f} (n={report.n_samples})")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
