"""Persistence: dataset record files, manifests, and the review queue.

Everything is line-oriented JSON with a single serialized writer per file, so
audits are diffable and parallel producers only need to share the store
object. The review queue is an append-only event log (enqueue/verdict);
in-memory state is the fold of those events.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

from . import datagen
from .errors import (
    ConflictError,
    CorruptRecordError,
    InputFormatError,
    ParameterError,
    StateError,
    ValidationError,
)
from .layout import load_layout

PROVENANCES = ("auto_passed", "human_accepted", "human_corrected")

REVIEW_PENDING = "pending"
REVIEW_ACCEPTED = "accepted"
REVIEW_CORRECTED = "corrected"
REVIEW_REJECTED = "rejected"
VERDICT_STATUSES = (REVIEW_ACCEPTED, REVIEW_CORRECTED, REVIEW_REJECTED)


@dataclass(frozen=True)
class RecordDraft:
    """Candidate dataset record; may still violate the annotation rules."""

    sample_id: str
    image_path: str
    layout_path: str
    question: str
    answers: tuple[str, ...]
    helpful: tuple[int, ...]
    confusing: tuple[int, ...]
    rationales: dict[int, str]
    dataset_tag: str
    split: str = "train"

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_path": self.image_path,
            "layout_path": self.layout_path,
            "question": self.question,
            "answers": list(self.answers),
            "helpful": list(self.helpful),
            "confusing": list(self.confusing),
            "rationales": {str(k): v for k, v in self.rationales.items()},
            "dataset_tag": self.dataset_tag,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "RecordDraft":
        return cls(
            sample_id=str(payload["sample_id"]),
            image_path=str(payload["image_path"]),
            layout_path=str(payload["layout_path"]),
            question=str(payload["question"]),
            answers=tuple(str(a) for a in payload["answers"]),
            helpful=tuple(sorted(int(i) for i in payload["helpful"])),
            confusing=tuple(sorted(int(i) for i in payload["confusing"])),
            rationales={int(k): str(v) for k, v in payload.get("rationales", {}).items()},
            dataset_tag=str(payload["dataset_tag"]),
            split=str(payload.get("split", "train")),
        )

    def annotation(self) -> datagen.KeyBoxAnnotation:
        return datagen.KeyBoxAnnotation(
            sample_id=self.sample_id,
            helpful=frozenset(self.helpful),
            confusing=frozenset(self.confusing),
            rationales=dict(self.rationales),
        )


@dataclass(frozen=True)
class DatasetRecord:
    """An accepted training record. Validated on write and on load."""

    draft: RecordDraft
    provenance: str

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        validate_structural(self.draft)

    @property
    def sample_id(self) -> str:
        return self.draft.sample_id

    def to_json(self) -> dict:
        payload = self.draft.to_json()
        payload["provenance"] = self.provenance
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "DatasetRecord":
        return cls(
            draft=RecordDraft.from_json(payload),
            provenance=str(payload.get("provenance", "")),
        )


def validate_structural(draft: RecordDraft) -> None:
    """Layout-independent invariants every stored record must satisfy."""
    if not draft.sample_id:
        raise ValidationError("record needs a sample_id")
    if not draft.answers:
        raise ValidationError(f"record {draft.sample_id}: answers must be non-empty")
    if not draft.helpful:
        raise ValidationError(f"record {draft.sample_id}: helpful set must be non-empty")
    overlap = set(draft.helpful) & set(draft.confusing)
    if overlap:
        raise ValidationError(
            f"record {draft.sample_id}: helpful and confusing overlap on {sorted(overlap)}"
        )
    missing = [i for i in (*draft.helpful, *draft.confusing) if not draft.rationales.get(i, "").strip()]
    if missing:
        raise ValidationError(
            f"record {draft.sample_id}: missing rationale for boxes {sorted(missing)}"
        )


def make_draft(
    annotation: datagen.KeyBoxAnnotation,
    sample: datagen.QASample,
    image_path: str,
    layout_path: str,
    split: str = "train",
) -> RecordDraft:
    return RecordDraft(
        sample_id=sample.sample_id,
        image_path=image_path,
        layout_path=layout_path,
        question=sample.question,
        answers=tuple(sample.answers),
        helpful=tuple(sorted(annotation.helpful)),
        confusing=tuple(sorted(annotation.confusing)),
        rationales=dict(annotation.rationales),
        dataset_tag=sample.dataset_tag,
        split=split,
    )


class DatasetStore:
    """Append-only JSONL dataset files, one per dataset tag."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path(self, dataset_tag: str) -> Path:
        if not dataset_tag:
            raise ParameterError("dataset_tag must be non-empty")
        return self.root / f"{dataset_tag}.jsonl"

    def append(self, record: DatasetRecord) -> None:
        validate_structural(record.draft)
        with self._lock:
            for existing in self.load(record.draft.dataset_tag):
                if existing.sample_id == record.sample_id:
                    raise ValidationError(
                        f"sample_id {record.sample_id!r} already in dataset "
                        f"{record.draft.dataset_tag!r}"
                    )
            with self.path(record.draft.dataset_tag).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")

    def load(self, dataset_tag: str) -> list[DatasetRecord]:
        path = self.path(dataset_tag)
        if not path.exists():
            return []
        records = []
        for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
                raise CorruptRecordError(f"{path}:{ln}: {exc}") from exc
        return records


@dataclass(frozen=True)
class Manifest:
    dataset_tag: str
    image_count: int
    question_count: int
    split_counts: dict[str, int]
    mean_key_boxes: float

    def to_json(self) -> dict:
        return {
            "dataset_tag": self.dataset_tag,
            "image_count": self.image_count,
            "question_count": self.question_count,
            "split_counts": dict(sorted(self.split_counts.items())),
            "mean_key_boxes": self.mean_key_boxes,
        }


def compute_manifest(store: DatasetStore, dataset_tag: str) -> Manifest:
    """Exact counts over the dataset; mean key boxes reported to 2 decimals."""
    records = store.load(dataset_tag)
    images = {r.draft.image_path for r in records}
    splits: dict[str, int] = {}
    key_total = 0
    for r in records:
        splits[r.draft.split] = splits.get(r.draft.split, 0) + 1
        key_total += len(set(r.draft.helpful) | set(r.draft.confusing))
    mean = round(key_total / len(records), 2) if records else 0.0
    return Manifest(
        dataset_tag=dataset_tag,
        image_count=len(images),
        question_count=len(records),
        split_counts=splits,
        mean_key_boxes=mean,
    )


def write_manifest(store: DatasetStore, dataset_tag: str) -> Path:
    manifest = compute_manifest(store, dataset_tag)
    path = store.root / f"{dataset_tag}.manifest.json"
    path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(store: DatasetStore, dataset_tag: str) -> Manifest:
    """Load and cross-check a stored manifest against a fresh recount."""
    path = store.root / f"{dataset_tag}.manifest.json"
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputFormatError(f"{path}: {exc}") from exc
    stored = Manifest(
        dataset_tag=str(payload["dataset_tag"]),
        image_count=int(payload["image_count"]),
        question_count=int(payload["question_count"]),
        split_counts={str(k): int(v) for k, v in payload["split_counts"].items()},
        mean_key_boxes=float(payload["mean_key_boxes"]),
    )
    fresh = compute_manifest(store, dataset_tag)
    if stored != fresh:
        raise CorruptRecordError(
            f"{path}: stored manifest {stored.to_json()} does not match recount {fresh.to_json()}"
        )
    return stored


# ---------------------------------------------------------------------------
# Review queue
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    status: str
    reviewer: str
    corrected: Optional[RecordDraft] = None
    timestamp: str = ""

    def __post_init__(self) -> None:
        if self.status not in VERDICT_STATUSES:
            raise ParameterError(f"verdict status must be one of {VERDICT_STATUSES}")
        if not self.reviewer:
            raise ParameterError("verdict needs a non-empty reviewer tag")
        if self.status == REVIEW_CORRECTED and self.corrected is None:
            raise ParameterError("corrected verdict needs the corrected record")

    def same_decision(self, other: "Verdict") -> bool:
        return (
            self.status == other.status
            and self.reviewer == other.reviewer
            and self.corrected == other.corrected
        )


@dataclass
class ReviewItem:
    item_id: str
    draft: RecordDraft
    failed_checks: tuple[str, ...]
    status: str = REVIEW_PENDING
    verdict: Optional[Verdict] = None

    def to_json(self) -> dict:
        payload = {
            "item_id": self.item_id,
            "draft": self.draft.to_json(),
            "failed_checks": list(self.failed_checks),
            "status": self.status,
        }
        if self.verdict:
            payload["verdict"] = {
                "status": self.verdict.status,
                "reviewer": self.verdict.reviewer,
                "timestamp": self.verdict.timestamp,
                "corrected": self.verdict.corrected.to_json() if self.verdict.corrected else None,
            }
        return payload


class ReviewQueue:
    """Event-sourced queue of QA-failed annotations awaiting a human verdict.

    Verdicts are idempotent per item: repeating an identical decision is a
    no-op, a different decision on a decided item is a conflict. Accepted and
    corrected items become dataset records with human provenance.
    """

    def __init__(self, path: str | Path, dataset_store: Optional[DatasetStore] = None) -> None:
        self.path = Path(path)
        self.dataset_store = dataset_store
        self._lock = threading.Lock()
        self._items: dict[str, ReviewItem] = {}
        self._order: list[str] = []
        self._counter = 0
        if self.path.exists():
            self._replay()

    def _replay(self) -> None:
        for ln, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                event = json.loads(line)
                kind = event["event"]
                if kind == "enqueue":
                    item = ReviewItem(
                        item_id=str(event["item_id"]),
                        draft=RecordDraft.from_json(event["draft"]),
                        failed_checks=tuple(str(c) for c in event["failed_checks"]),
                    )
                    self._items[item.item_id] = item
                    self._order.append(item.item_id)
                    self._counter += 1
                elif kind == "verdict":
                    item = self._items[str(event["item_id"])]
                    corrected = event.get("corrected")
                    item.verdict = Verdict(
                        status=str(event["status"]),
                        reviewer=str(event["reviewer"]),
                        corrected=RecordDraft.from_json(corrected) if corrected else None,
                        timestamp=str(event.get("timestamp", "")),
                    )
                    item.status = item.verdict.status
                else:
                    raise KeyError(f"unknown event kind {kind!r}")
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise CorruptRecordError(f"{self.path}:{ln}: {exc}") from exc

    def _append_event(self, payload: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, sort_keys=True) + "\n")

    def enqueue(self, draft: RecordDraft, failed_checks: Iterable[str]) -> ReviewItem:
        with self._lock:
            self._counter += 1
            item = ReviewItem(
                item_id=f"item-{self._counter:06d}",
                draft=draft,
                failed_checks=tuple(failed_checks),
            )
            self._items[item.item_id] = item
            self._order.append(item.item_id)
            self._append_event(
                {
                    "event": "enqueue",
                    "item_id": item.item_id,
                    "draft": draft.to_json(),
                    "failed_checks": list(item.failed_checks),
                }
            )
            return item

    def get(self, item_id: str) -> ReviewItem:
        try:
            return self._items[item_id]
        except KeyError:
            raise StateError(f"unknown review item {item_id!r}") from None

    def next_pending(self) -> Optional[ReviewItem]:
        for item_id in self._order:
            if self._items[item_id].status == REVIEW_PENDING:
                return self._items[item_id]
        return None

    def counts(self) -> dict[str, int]:
        counts = {REVIEW_PENDING: 0, REVIEW_ACCEPTED: 0, REVIEW_CORRECTED: 0, REVIEW_REJECTED: 0}
        for item in self._items.values():
            counts[item.status] += 1
        counts["enqueued"] = len(self._items)
        return counts

    def _validate_corrected(self, item: ReviewItem, corrected: RecordDraft) -> None:
        validate_structural(corrected)
        sample = datagen.QASample(
            sample_id=corrected.sample_id,
            image_id=corrected.sample_id,
            question=corrected.question,
            answers=tuple(corrected.answers),
            dataset_tag=corrected.dataset_tag,
        )
        from PIL import Image

        with Image.open(corrected.image_path) as img:
            width, height = img.size
        layout = load_layout(corrected.layout_path, corrected.sample_id, width, height)
        verdict = datagen.check_annotation(corrected.annotation(), layout, sample)
        if verdict.status == datagen.STATUS_FAILED:
            raise ValidationError(
                f"corrected annotation fails checks: {list(verdict.failed_checks)}"
            )

    def submit_verdict(self, item_id: str, verdict: Verdict) -> ReviewItem:
        with self._lock:
            item = self.get(item_id)
            if item.status != REVIEW_PENDING:
                if item.verdict and item.verdict.same_decision(verdict):
                    return item  # idempotent re-submit
                raise ConflictError(
                    f"item {item_id} already decided as {item.status} "
                    f"by {item.verdict.reviewer if item.verdict else 'unknown'}"
                )

            if verdict.status == REVIEW_CORRECTED:
                assert verdict.corrected is not None
                self._validate_corrected(item, verdict.corrected)
            elif verdict.status == REVIEW_ACCEPTED:
                validate_structural(item.draft)

            stamped = replace(
                verdict,
                timestamp=verdict.timestamp or datetime.now(timezone.utc).isoformat(),
            )
            if stamped.status in (REVIEW_ACCEPTED, REVIEW_CORRECTED) and self.dataset_store:
                draft = stamped.corrected if stamped.status == REVIEW_CORRECTED else item.draft
                provenance = (
                    "human_corrected" if stamped.status == REVIEW_CORRECTED else "human_accepted"
                )
                self.dataset_store.append(DatasetRecord(draft=draft, provenance=provenance))

            item.verdict = stamped
            item.status = stamped.status
            self._append_event(
                {
                    "event": "verdict",
                    "item_id": item_id,
                    "status": stamped.status,
                    "reviewer": stamped.reviewer,
                    "timestamp": stamped.timestamp,
                    "corrected": stamped.corrected.to_json() if stamped.corrected else None,
                }
            )
            return item
