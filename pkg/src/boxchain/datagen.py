"""Training-data generation: annotate, parse, quality-check, route, synthesize.

Per image, all of its question-answer pairs are batched into one annotator
call. The annotator returns, per question, the helpful boxes (containing the
exact evidence), optional confusing boxes (look-alikes without the answer),
and a short rationale per box. Rule-based checks gate what enters the dataset;
everything else goes to the human review queue. Two auxiliary task
synthesizers emit index-recognition and box-role samples from accepted
annotations.
"""

from __future__ import annotations

import hashlib
import logging
import random
import re
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

from .errors import InputFormatError, ParameterError
from .layout import LayoutSet
from .textnorm import is_entailed, normalize_text

logger = logging.getLogger(__name__)

MIN_KEY_BOXES = 3  # minimum helpful+confusing boxes required on busy pages
DEFAULT_BOX_ID_CAP = 5  # index-recognition samples emitted per image

CHECK_FORMAT = "format"
CHECK_DISJOINT = "disjointness"
CHECK_ID_RANGE = "id-validity"
CHECK_MIN_BOXES = "min-3"
CHECK_ENTAILMENT = "entailment"
REASON_NO_OCR_TEXT = "no-ocr-text"
REASON_UNPARSEABLE = "unparseable"

STATUS_PASSED = "passed"
STATUS_FAILED = "failed"
STATUS_INDETERMINATE = "indeterminate"

ANNOTATION_PROMPT_TEMPLATE = """You are presented with an image containing multiple pre-labeled boxes, each identified by a unique number. You will receive a series of question–answer (QA) pairs. For each question, determine which labeled boxes in the image contain the information needed to arrive at the given answer, adhering to the following rules:

1. **If the Number of Boxes in the Image Exceeds 3, Output at Least Three Boxes**

For each question, list all boxes that are genuinely helpful to answer the question. If the number of truly helpful boxes is less than three, please output several boxes that are most likely to cause confusion in answering the question to ensure that at least three boxes are output.

2. **If the Number of Boxes in the Image is Less Than 3, Output Only the Boxes Helpful for Answering the Question**

For each question, list all boxes that are genuinely helpful to answer the question. Do not output boxes that might cause confusion.

3. **Output Reason and Content**

After listing the boxes, for each box, output the reasons (from semantic, layout, etc. perspectives) why it helps or doesn't help answer the question.

4. **Other Details**

When referring to any box, use the notation <box>num</box>.

5. **Output Format**

For each QA pair, output only the question ID (Q1, Q2, etc.). Output in this strict format:

Q1:

HELPFUL BOX: [<box>num</box>(s)]

CONFUSING BOX: [<box>num</box>(s)]

Reason for <box>num</box>: **30-50 word explanation**

Q2:

HELPFUL BOX: [<box>num</box>(s)]

CONFUSING BOX: [<box>num</box>(s)]

Reason for <box>num</box>: **30-50 word explanation**

Below is an example of the exact format expected:

Q1:

HELPFUL BOX: [<box>16</box>]

CONFUSING BOX: [<box>15</box>, <box>19</box>]

Reason for <box>16</box>: **30-50 word explanation**

Reason for <box>15</box>: **30-50 word explanation**

Q2:

HELPFUL BOX: [<box>2</box>, <box>3</box>, <box>4</box>]

CONFUSING BOX: []

Reason for <box>2</box>: **30-50 word explanation**

Reason for <box>3</box>: **30-50 word explanation**

Reason for <box>4</box>: **30-50 word explanation**

**Here are the QA pairs:**

{qa_pairs}"""


@dataclass(frozen=True)
class QASample:
    """One source question-answer pair bound to a document image."""

    sample_id: str
    image_id: str
    question: str
    answers: tuple[str, ...]
    dataset_tag: str = ""

    def __post_init__(self) -> None:
        if not self.answers:
            raise ParameterError(f"sample {self.sample_id}: answers must be non-empty")


@dataclass(frozen=True)
class KeyBoxAnnotation:
    """Annotator output for one question. May violate the QA rules;
    `check_annotation` decides whether it is usable."""

    sample_id: str
    helpful: frozenset[int]
    confusing: frozenset[int]
    rationales: dict[int, str]
    annotator_raw: str = ""

    @property
    def key_ids(self) -> frozenset[int]:
        return self.helpful | self.confusing


@dataclass(frozen=True)
class QAVerdict:
    status: str
    failed_checks: tuple[str, ...] = ()
    entailment_detail: Optional[str] = None

    def __post_init__(self) -> None:
        if self.status not in (STATUS_PASSED, STATUS_FAILED, STATUS_INDETERMINATE):
            raise ParameterError(f"unknown verdict status {self.status!r}")
        if self.status == STATUS_FAILED and not self.failed_checks:
            raise ParameterError("failed status requires named checks")
        if self.status != STATUS_FAILED and self.failed_checks:
            raise ParameterError("named checks require failed status")

    @property
    def review_reasons(self) -> tuple[str, ...]:
        if self.status == STATUS_INDETERMINATE:
            return self.failed_checks + (REASON_NO_OCR_TEXT,)
        return self.failed_checks


def build_annotation_prompt(layout: LayoutSet, samples: Sequence[QASample]) -> str:
    """Render the full annotator prompt, batching every QA pair of one image."""
    if not samples:
        raise ParameterError("at least one sample is required")
    image_ids = {s.image_id for s in samples}
    if image_ids != {layout.image_id}:
        raise ParameterError(
            f"samples span images {sorted(image_ids)}, layout is {layout.image_id!r}"
        )
    qa_pairs = "\n".join(
        f"Q{i}: {s.question} | A: {s.answers[0]}" for i, s in enumerate(samples, start=1)
    )
    return ANNOTATION_PROMPT_TEMPLATE.format(qa_pairs=qa_pairs)


@dataclass(frozen=True)
class ParsedBlock:
    """Parse result for one question in the annotator's batched output."""

    question_index: int
    annotation: Optional[KeyBoxAnnotation]
    notes: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.annotation is not None


_BLOCK_RE = re.compile(r"^Q(\d+)\s*:", re.MULTILINE)
_HELPFUL_RE = re.compile(r"HELPFUL BOX\s*:\s*\[([^\]]*)\]")
_CONFUSING_RE = re.compile(r"CONFUSING BOX\s*:\s*\[([^\]]*)\]")
_BOX_NUM_RE = re.compile(r"<box>\s*(\d+)\s*</box>")
_REASON_RE = re.compile(r"Reason for <box>\s*(\d+)\s*</box>\s*:\s*(.+)")


def _clean_rationale(text: str) -> str:
    return text.strip().strip("*").strip()


def parse_annotation(
    raw: str,
    layout: LayoutSet,
    expected_questions: int,
    sample_ids: Optional[Sequence[str]] = None,
) -> list[ParsedBlock]:
    """Split the annotator's output into per-question annotations.

    A question whose block is missing, whose bracket lines are malformed, or
    whose helpful set empties out after dropping unknown ids is returned as an
    unparseable block (annotation None). If no block parses at all the whole
    batch is a format error, routed wholesale to review by the caller.
    """
    if sample_ids is not None and len(sample_ids) != expected_questions:
        raise ParameterError("sample_ids length must equal expected_questions")

    matches = list(_BLOCK_RE.finditer(raw))
    blocks: dict[int, str] = {}
    for pos, m in enumerate(matches):
        end = matches[pos + 1].start() if pos + 1 < len(matches) else len(raw)
        blocks.setdefault(int(m.group(1)), raw[m.start() : end])

    n = len(layout)
    results: list[ParsedBlock] = []
    for qi in range(1, expected_questions + 1):
        sid = sample_ids[qi - 1] if sample_ids else f"Q{qi}"
        block = blocks.get(qi)
        if block is None:
            results.append(ParsedBlock(qi, None, (f"missing block Q{qi}",)))
            continue
        helpful_m = _HELPFUL_RE.search(block)
        confusing_m = _CONFUSING_RE.search(block)
        if helpful_m is None or confusing_m is None:
            results.append(ParsedBlock(qi, None, ("malformed HELPFUL/CONFUSING brackets",)))
            continue

        notes: list[str] = []

        def in_range(ids: list[int]) -> list[int]:
            kept = []
            for i in ids:
                if 1 <= i <= n:
                    kept.append(i)
                else:
                    notes.append(f"dropped id {i} not in layout 1..{n}")
            return kept

        helpful = in_range([int(x) for x in _BOX_NUM_RE.findall(helpful_m.group(1))])
        confusing = in_range([int(x) for x in _BOX_NUM_RE.findall(confusing_m.group(1))])
        if not helpful:
            notes.append("helpful set empty after parsing")
            results.append(ParsedBlock(qi, None, tuple(notes)))
            continue

        rationales: dict[int, str] = {}
        for num, text in _REASON_RE.findall(block):
            rationales.setdefault(int(num), _clean_rationale(text))
        missing = [i for i in sorted(set(helpful) | set(confusing)) if i not in rationales]
        if missing:
            notes.append(f"missing rationale for boxes {missing}")

        results.append(
            ParsedBlock(
                qi,
                KeyBoxAnnotation(
                    sample_id=sid,
                    helpful=frozenset(helpful),
                    confusing=frozenset(confusing),
                    rationales=rationales,
                    annotator_raw=block.strip(),
                ),
                tuple(notes),
            )
        )

    if results and not any(b.ok for b in results):
        raise InputFormatError(
            "no parseable question blocks in annotator output "
            f"(expected {expected_questions})"
        )
    return results


def check_annotation(annotation: KeyBoxAnnotation, layout: LayoutSet, sample: QASample) -> QAVerdict:
    """Run the five gating checks in order; collect every failure.

    Entailment compares normalized ground-truth answers against the
    concatenated OCR text of the helpful boxes. When that text is missing or
    incomplete and no answer matched, the check is indeterminate rather than
    failed: a figure or table can legitimately hold the answer without
    extractable text.
    """
    failed: list[str] = []
    key_ids = annotation.key_ids

    if not annotation.helpful or any(
        not annotation.rationales.get(i, "").strip() for i in key_ids
    ):
        failed.append(CHECK_FORMAT)
    if annotation.helpful & annotation.confusing:
        failed.append(CHECK_DISJOINT)

    n = len(layout)
    ids_valid = all(1 <= i <= n for i in key_ids)
    if not ids_valid:
        failed.append(CHECK_ID_RANGE)
    if n > MIN_KEY_BOXES:
        if len(key_ids) < MIN_KEY_BOXES:
            failed.append(CHECK_MIN_BOXES)
    elif annotation.confusing:
        failed.append(CHECK_MIN_BOXES)

    entailment_detail: Optional[str] = None
    indeterminate = False
    if ids_valid and annotation.helpful:
        helpful_sorted = sorted(annotation.helpful)
        texts = [layout.get(i).text or "" for i in helpful_sorted]
        haystack = " ".join(t for t in texts if t)
        matched = next((a for a in sample.answers if haystack and is_entailed(a, haystack)), None)
        if matched is not None:
            entailment_detail = (
                f"answer {matched!r} found in helpful boxes {helpful_sorted}"
            )
        elif any(not t for t in texts):
            indeterminate = True
            entailment_detail = REASON_NO_OCR_TEXT
        else:
            failed.append(CHECK_ENTAILMENT)
            entailment_detail = (
                f"no ground-truth answer found in normalized text {normalize_text(haystack)!r}"
            )

    if failed:
        status = STATUS_FAILED
    elif indeterminate:
        status = STATUS_INDETERMINATE
    else:
        status = STATUS_PASSED
    return QAVerdict(status=status, failed_checks=tuple(failed), entailment_detail=entailment_detail)


DISPOSITION_DATASET = "accepted_into_dataset"
DISPOSITION_REVIEW = "review_queue"


class _DatasetSink(Protocol):
    def append(self, record) -> None: ...


class _ReviewSink(Protocol):
    def enqueue(self, draft, failed_checks) -> object: ...


def route(
    annotation: KeyBoxAnnotation,
    verdict: QAVerdict,
    sample: QASample,
    draft_factory,
    dataset_sink: _DatasetSink,
    review_sink: _ReviewSink,
) -> str:
    """Send a checked annotation to the dataset or to the review queue.

    `draft_factory(annotation, sample, provenance)` builds the storage record;
    keeping construction with the caller avoids coupling this module to the
    persistence layer.
    """
    if verdict.status == STATUS_PASSED:
        dataset_sink.append(draft_factory(annotation, sample, "auto_passed"))
        return DISPOSITION_DATASET
    review_sink.enqueue(draft_factory(annotation, sample, None), verdict.review_reasons)
    return DISPOSITION_REVIEW


# ---------------------------------------------------------------------------
# Enabling-task synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnablingSample:
    """One auxiliary training sample; the input image is the indexed overlay."""

    task: str  # "box_id" | "box_query"
    sample_id: str
    image_id: str
    question: str
    target: str
    image_role: str = "s1_overlay"

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "sample_id": self.sample_id,
            "image_id": self.image_id,
            "image_role": self.image_role,
            "question": self.question,
            "target": self.target,
        }


def _stable_rng(seed: int, key: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def synthesize_box_id_task(
    layout: LayoutSet,
    cap: int = DEFAULT_BOX_ID_CAP,
    seed: int = 0,
) -> list[EnablingSample]:
    """Index-recognition samples: box coordinates in, box index out.

    Emits one sample per box, or a seeded subset of `cap` boxes on busy pages.
    """
    if len(layout) == 0:
        raise ParameterError("layout must contain at least one box")
    ids = list(layout.ids)
    if len(ids) > cap:
        rng = _stable_rng(seed, layout.image_id)
        ids = sorted(rng.sample(ids, cap))
    samples = []
    for i in ids:
        b = layout.get(i).bbox
        samples.append(
            EnablingSample(
                task="box_id",
                sample_id=f"{layout.image_id}:boxid:{i}",
                image_id=layout.image_id,
                question=f"What is the index of the box at {b.as_list()}?",
                target=str(i),
            )
        )
    return samples


def synthesize_box_query_task(
    annotation: KeyBoxAnnotation,
    sample: QASample,
) -> list[EnablingSample]:
    """Box-role samples: for each key box, the stored rationale is the target."""
    out = []
    for i in sorted(annotation.key_ids):
        rationale = annotation.rationales.get(i, "").strip()
        if not rationale:
            logger.warning(
                "sample %s: box %d has no rationale, skipping box-query sample",
                sample.sample_id,
                i,
            )
            continue
        out.append(
            EnablingSample(
                task="box_query",
                sample_id=f"{sample.sample_id}:boxquery:{i}",
                image_id=sample.image_id,
                question=f'What role does box {i} play in answering "{sample.question}"?',
                target=rationale,
            )
        )
    return out
