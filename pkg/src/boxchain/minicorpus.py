"""Bundled mini corpus: five synthetic document pages with twelve questions.

Built entirely from code so the fixture is byte-reproducible: page images are
white canvases with deterministic dash-stroke "text" inside each layout box,
layouts use the interchange format, and scripted behavior files drive the mock
backend through stage 1/stage 2/vanilla calls, the annotator flow, and the
garbage-injection fallback variant. `build_review_fixture` additionally seeds
a review queue with known-defective annotations for the review service/UI.

Run `python -m boxchain.minicorpus --out DIR` to materialize it.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import datagen, store
from .layout import BBox, LayoutBox, LayoutSet, save_layout
from .render import encode_png

PAGE_W, PAGE_H = 640, 800
DATASET_TAG = "minicorpus"

# Stage-1 garbage is injected for these samples in behavior_garbage.json.
GARBAGE_SAMPLE_IDS = ("q02", "q06", "q09")

GARBAGE_S1_TEXT = "I cannot determine which region holds that information."

_HELPFUL_REASON = (
    "Holds the exact evidence string for the answer inside its text region, "
    "so reading this box alone is enough to answer the question."
)
_CONFUSING_REASON = (
    "Mentions wording or numbers that resemble the query and sits close to the "
    "evidence region, which makes it a plausible but non-evidential match."
)

# (image_id, [(x, y, w, h, category, text), ...]) - laid out so list order is
# reading order and box ids are stable.
PAGES: list[tuple[str, list[tuple[int, int, int, int, str, str]]]] = [
    (
        "p1",
        [
            (40, 40, 560, 60, "title", "MALASADAS PORTUGUESE DOUGHNUTS"),
            (40, 140, 270, 160, "text", "MALASADAS 2 eggs 1 cup milk 4 cups flour"),
            (330, 140, 270, 160, "text", "BREAD ROLLS 4 eggs 2 cups sugar"),
            (40, 340, 560, 200, "text", "Beat the eggs until thick. Add milk and flour."),
        ],
    ),
    (
        "p2",
        [
            (40, 30, 560, 50, "title", "APPLICATION FORM"),
            (40, 120, 560, 60, "text", "Name: John Carter"),
            (40, 220, 560, 60, "text", "Address: 31 Palmer Drive, Dover"),
            (40, 320, 560, 60, "text", "Phone: 555-0102"),
            (40, 420, 560, 60, "text", "Date: 01/05/2020"),
        ],
    ),
    (
        "p3",
        [
            (40, 30, 560, 50, "title", "STAR MART RECEIPT"),
            (40, 120, 560, 60, "text", "Total: $12.50"),
            (40, 220, 560, 60, "text", "Date: 2020-01-05"),
            (40, 320, 560, 60, "text", "Cashier: Ann"),
        ],
    ),
    (
        "p4",
        [
            (40, 30, 560, 50, "title", "ANNUAL REPORT 2021"),
            (40, 120, 560, 60, "text", "Revenue 1,200"),
            (40, 220, 560, 60, "text", "Expenses 800"),
            (40, 320, 560, 60, "text", "Profit 400"),
            (40, 420, 560, 120, "text", "Notes: figures in thousands"),
        ],
    ),
    (
        "p5",
        [
            (40, 30, 560, 50, "title", "TRAIN SCHEDULE"),
            (40, 120, 560, 60, "text", "Departure 09:15"),
            (40, 220, 560, 60, "text", "Arrival 11:40"),
            (40, 320, 560, 60, "text", "Platform 6"),
        ],
    ),
]


@dataclass(frozen=True)
class CorpusQuestion:
    sample_id: str
    image_id: str
    question: str
    answer: str
    gold_helpful: tuple[int, ...]
    confusing: tuple[int, ...]


QUESTIONS: list[CorpusQuestion] = [
    CorpusQuestion("q01", "p1", "How many eggs are needed to make Malasadas?", "2", (2,), (3, 1)),
    CorpusQuestion("q02", "p1", "What is the title of the page?", "MALASADAS PORTUGUESE DOUGHNUTS", (1,), (2, 3)),
    CorpusQuestion("q03", "p1", "What should be added after beating the eggs?", "milk and flour", (4,), (2, 3)),
    CorpusQuestion("q04", "p1", "Which recipe uses 4 eggs?", "BREAD ROLLS", (3,), (2, 1)),
    CorpusQuestion("q05", "p2", "Where does the applicant live?", "31 Palmer Drive, Dover", (3,), (2, 5)),
    CorpusQuestion("q06", "p2", "What is the applicant's phone number?", "555-0102", (4,), (5, 2)),
    CorpusQuestion("q07", "p3", "What is the total amount?", "$12.50", (2,), (3, 4)),
    CorpusQuestion("q08", "p3", "Who was the cashier?", "Ann", (4,), (2, 3)),
    CorpusQuestion("q09", "p4", "What is the revenue?", "1,200", (2,), (3, 4)),
    CorpusQuestion("q10", "p4", "What is the profit?", "400", (4,), (2, 3)),
    CorpusQuestion("q11", "p5", "When does the train depart?", "09:15", (2,), (3, 4)),
    CorpusQuestion("q12", "p5", "What platform does the train leave from?", "6", (4,), (2, 3)),
]


def page_layout(image_id: str) -> LayoutSet:
    for pid, rows in PAGES:
        if pid == image_id:
            boxes = [
                LayoutBox(id=i + 1, bbox=BBox(x, y, w, h), category=cat, text=text)
                for i, (x, y, w, h, cat, text) in enumerate(rows)
            ]
            return LayoutSet.build(image_id, PAGE_W, PAGE_H, boxes)
    raise KeyError(image_id)


def _draw_textish(arr: np.ndarray, x: int, y: int, w: int, h: int, rng: np.random.Generator) -> None:
    """Deterministic dash rows standing in for printed text."""
    margin = 8
    line_h = 14
    yy = y + margin
    while yy + 6 < y + h - margin:
        xx = x + margin
        while xx < x + w - margin - 6:
            dash = int(rng.integers(10, 40))
            dash = min(dash, x + w - margin - xx)
            shade = int(rng.integers(20, 90))
            arr[yy : yy + 6, xx : xx + dash] = shade
            xx += dash + int(rng.integers(6, 16))
        yy += line_h


def render_page(image_id: str) -> Image.Image:
    layout = page_layout(image_id)
    arr = np.full((PAGE_H, PAGE_W, 3), 255, dtype=np.uint8)
    for box in layout.boxes:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(17, hash_id(image_id), box.id)))
        b = box.bbox
        _draw_textish(arr, b.x, b.y, b.w, b.h, rng)
    return Image.fromarray(arr)


def hash_id(s: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(s)) % 100003


def questions_for(image_id: str) -> list[CorpusQuestion]:
    return [q for q in QUESTIONS if q.image_id == image_id]


def _annotation_block(index: int, q: CorpusQuestion) -> str:
    helpful = ", ".join(f"<box>{i}</box>" for i in q.gold_helpful)
    confusing = ", ".join(f"<box>{i}</box>" for i in q.confusing)
    lines = [f"Q{index}:", "", f"HELPFUL BOX: [{helpful}]", "", f"CONFUSING BOX: [{confusing}]", ""]
    for i in q.gold_helpful:
        lines += [f"Reason for <box>{i}</box>: **{_HELPFUL_REASON}**", ""]
    for i in q.confusing:
        lines += [f"Reason for <box>{i}</box>: **{_CONFUSING_REASON}**", ""]
    return "\n".join(lines)


def _behavior_rules(garbage_ids: tuple[str, ...] = ()) -> list[dict]:
    rules: list[dict] = []
    for q in QUESTIONS:
        s1_text = (
            GARBAGE_S1_TEXT
            if q.sample_id in garbage_ids
            else ", ".join(f"<box>{i}</box>" for i in q.gold_helpful)
        )
        rules.append(
            {"instruction_pattern": f"following question: {q.question}", "response": s1_text}
        )
        rules.append(
            {"instruction_pattern": f"{q.question} The key regions are boxes", "response": q.answer}
        )
        rules.append(
            {"instruction_pattern": f"{q.question} Answer the question using", "response": q.answer}
        )
    rules.append({"instruction_pattern": "*", "response": "UNKNOWN"})
    return rules


def _annotator_rules() -> list[dict]:
    rules = []
    for image_id, _ in PAGES:
        qs = questions_for(image_id)
        blocks = "\n".join(_annotation_block(i + 1, q) for i, q in enumerate(qs))
        rules.append(
            {"instruction_pattern": f"Q1: {qs[0].question} | A:", "response": blocks}
        )
    rules.append({"instruction_pattern": "*", "response": "UNKNOWN"})
    return rules


def build_mini_corpus(out_dir: str | Path) -> Path:
    """Materialize the corpus; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "layouts").mkdir(parents=True, exist_ok=True)
    (out / "datasets").mkdir(parents=True, exist_ok=True)
    (out / "outputs").mkdir(parents=True, exist_ok=True)

    for image_id, _ in PAGES:
        img = render_page(image_id)
        (out / "images" / f"{image_id}.png").write_bytes(encode_png(img))
        save_layout(page_layout(image_id), out / "layouts" / f"{image_id}.json")

    with (out / "questions.jsonl").open("w", encoding="utf-8") as fh:
        for q in QUESTIONS:
            fh.write(
                json.dumps(
                    {
                        "sample_id": q.sample_id,
                        "image_id": q.image_id,
                        "question": q.question,
                        "answers": [q.answer],
                        "gold_helpful": list(q.gold_helpful),
                        "dataset_tag": DATASET_TAG,
                    }
                )
                + "\n"
            )

    with (out / "gold.jsonl").open("w", encoding="utf-8") as fh:
        for q in QUESTIONS:
            fh.write(
                json.dumps(
                    {
                        "sample_id": q.sample_id,
                        "answers": [q.answer],
                        "helpful": list(q.gold_helpful),
                    }
                )
                + "\n"
            )

    (out / "behavior.json").write_text(
        json.dumps(_behavior_rules(), indent=2) + "\n", encoding="utf-8"
    )
    (out / "behavior_garbage.json").write_text(
        json.dumps(_behavior_rules(GARBAGE_SAMPLE_IDS), indent=2) + "\n", encoding="utf-8"
    )
    (out / "annotator_behavior.json").write_text(
        json.dumps(_annotator_rules(), indent=2) + "\n", encoding="utf-8"
    )

    config = """seed: 7
paths:
  images_dir: images
  layouts_dir: layouts
  datasets_dir: datasets
  outputs_dir: outputs
  review_queue: review_queue.jsonl
backend:
  kind: mock
  behavior_file: behavior.json
service:
  host: 127.0.0.1
  port: 8787
"""
    (out / "config.yaml").write_text(config, encoding="utf-8")

    manifest = {
        "images_dir": "images",
        "layouts_dir": "layouts",
        "questions": "questions.jsonl",
        "gold": "gold.jsonl",
        "behavior": "behavior.json",
        "behavior_garbage": "behavior_garbage.json",
        "annotator_behavior": "annotator_behavior.json",
        "garbage_sample_ids": list(GARBAGE_SAMPLE_IDS),
        "dataset_tag": DATASET_TAG,
    }
    manifest_path = out / "corpus.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


# Defective annotations seeded into the review-queue fixture:
# (item sample_id base, defect kind, helpful, confusing, drop_rationale_for)
_REVIEW_DEFECTS = [
    ("q05", "entailment", (2,), (1, 4), None),
    ("q07", "entailment", (3,), (1, 4), None),
    ("q05", "min-3", (3,), (), None),
    ("q11", "min-3", (2,), (), None),
    ("q08", "disjointness", (4,), (4, 2), None),
    ("q10", "disjointness", (4,), (4, 2), None),
]


def build_review_fixture(corpus_dir: str | Path, n_items: int = 6) -> store.ReviewQueue:
    """Seed the corpus review queue with QA-failed annotations."""
    corpus = Path(corpus_dir)
    dataset_store = store.DatasetStore(corpus / "datasets")
    queue = store.ReviewQueue(corpus / "review_queue.jsonl", dataset_store)

    by_id = {q.sample_id: q for q in QUESTIONS}
    for idx, (base_id, kind, helpful, confusing, drop) in enumerate(_REVIEW_DEFECTS[:n_items], start=1):
        q = by_id[base_id]
        layout = page_layout(q.image_id)
        rationales = {
            i: (_HELPFUL_REASON if i in helpful else _CONFUSING_REASON)
            for i in set(helpful) | set(confusing)
        }
        if drop in rationales:
            del rationales[drop]
        annotation = datagen.KeyBoxAnnotation(
            sample_id=f"rv{idx:02d}",
            helpful=frozenset(helpful),
            confusing=frozenset(confusing),
            rationales=rationales,
        )
        sample = datagen.QASample(
            sample_id=f"rv{idx:02d}",
            image_id=q.image_id,
            question=q.question,
            answers=(q.answer,),
            dataset_tag=DATASET_TAG,
        )
        verdict = datagen.check_annotation(annotation, layout, sample)
        draft = store.make_draft(
            annotation,
            sample,
            image_path=str(corpus / "images" / f"{q.image_id}.png"),
            layout_path=str(corpus / "layouts" / f"{q.image_id}.json"),
        )
        queue.enqueue(draft, verdict.review_reasons or (kind,))
    return queue


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="build the bundled mini corpus")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--review-fixture",
        action="store_true",
        help="also seed the review queue with defective annotations",
    )
    args = parser.parse_args(argv)
    manifest = build_mini_corpus(args.out)
    if args.review_fixture:
        build_review_fixture(args.out)
    print(manifest)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
