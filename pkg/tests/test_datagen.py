from pathlib import Path

import pytest

from boxchain.datagen import (
    CHECK_DISJOINT,
    CHECK_ENTAILMENT,
    CHECK_FORMAT,
    CHECK_ID_RANGE,
    CHECK_MIN_BOXES,
    DISPOSITION_DATASET,
    DISPOSITION_REVIEW,
    KeyBoxAnnotation,
    QASample,
    QAVerdict,
    build_annotation_prompt,
    check_annotation,
    parse_annotation,
    route,
    synthesize_box_id_task,
    synthesize_box_query_task,
)
from boxchain.errors import InputFormatError, ParameterError
from boxchain.layout import BBox, LayoutBox, LayoutSet
from boxchain.textnorm import is_entailed, normalize_text
from conftest import make_layout
from oracles import oracle_normalize

GOLDEN = Path(__file__).parent / "fixtures" / "annotation_prompt_golden.txt"


def layout_with_texts(texts, image_id="img"):
    boxes = [
        LayoutBox(id=i + 1, bbox=BBox(10, 10 + i * 60, 100, 40), text=t)
        for i, t in enumerate(texts)
    ]
    return LayoutSet.build(image_id, 500, 100 + len(texts) * 60, boxes)


def annotation(helpful, confusing=(), rationales=None, sid="s1"):
    ids = set(helpful) | set(confusing)
    return KeyBoxAnnotation(
        sample_id=sid,
        helpful=frozenset(helpful),
        confusing=frozenset(confusing),
        rationales=rationales if rationales is not None else {i: f"reason {i}" for i in ids},
    )


class TestNormalize:
    def test_edge_punctuation(self):
        assert normalize_text("Address: 31 Palmer Drive, Dover") == "address 31 palmer drive dover"

    def test_entailment_example(self):
        assert is_entailed("31 palmer drive", "Address: 31 Palmer Drive, Dover")

    def test_agrees_with_oracle(self):
        cases = [
            "Total:  $12.50 ",
            "  (Hello)  WORLD!!",
            "a-b c_d",
            "ACME Corp.",
            "“quoted” text",
        ]
        for s in cases:
            assert normalize_text(s) == oracle_normalize(s), s


class TestAnnotationPrompt:
    def samples(self):
        return [
            QASample("s1", "p2", "Where does the applicant live?", ("31 Palmer Drive, Dover",)),
            QASample("s2", "p2", "What is the applicant's phone number?", ("555-0102",)),
        ]

    def test_matches_golden(self):
        from boxchain.minicorpus import page_layout

        text = build_annotation_prompt(page_layout("p2"), self.samples())
        assert text == GOLDEN.read_text(encoding="utf-8")

    def test_rule_headings_once(self):
        from boxchain.minicorpus import page_layout

        text = build_annotation_prompt(page_layout("p2"), self.samples())
        for heading in (
            "1. **If the Number of Boxes in the Image Exceeds 3, Output at Least Three Boxes**",
            "2. **If the Number of Boxes in the Image is Less Than 3, Output Only the Boxes Helpful for Answering the Question**",
            "3. **Output Reason and Content**",
            "4. **Other Details**",
            "5. **Output Format**",
        ):
            assert text.count(heading) == 1

    def test_single_sample(self):
        layout = layout_with_texts(["a"], image_id="p")
        text = build_annotation_prompt(
            layout, [QASample("s", "p", "What is a?", ("a",))]
        )
        assert text.endswith("Q1: What is a? | A: a")
        assert "Q2:" in text  # from the format example only

    def test_multi_image_rejected(self):
        layout = layout_with_texts(["a"], image_id="p")
        with pytest.raises(ParameterError):
            build_annotation_prompt(
                layout,
                [QASample("s", "p", "q", ("a",)), QASample("t", "other", "q2", ("b",))],
            )

    def test_first_answer_used(self):
        layout = layout_with_texts(["a"], image_id="p")
        text = build_annotation_prompt(
            layout, [QASample("s", "p", "q?", ("first", "second"))]
        )
        assert "A: first" in text and "second" not in text


APPENDIX_STYLE_OUTPUT = """Q1:
HELPFUL BOX: [<box>16</box>]

CONFUSING BOX: [<box>15</box>, <box>19</box>]

Reason for <box>16</box>: **holds the address the question asks about**

Reason for <box>15</box>: **nearby field with a similar label**

Reason for <box>19</box>: **another address-like line**
"""


class TestParseAnnotation:
    def big_layout(self):
        return layout_with_texts([f"text {i}" for i in range(1, 21)])

    def test_appendix_example(self):
        blocks = parse_annotation(APPENDIX_STYLE_OUTPUT, self.big_layout(), 1, ["s1"])
        assert len(blocks) == 1
        ann = blocks[0].annotation
        assert ann.helpful == {16}
        assert ann.confusing == {15, 19}
        assert set(ann.rationales) == {15, 16, 19}
        assert ann.sample_id == "s1"

    def test_missing_rationale_noted_then_failed_by_check(self):
        raw = "Q1:\nHELPFUL BOX: [<box>1</box>]\nCONFUSING BOX: [<box>2</box>]\nReason for <box>1</box>: **ok**\n"
        layout = layout_with_texts(["a", "b", "c", "d"])
        blocks = parse_annotation(raw, layout, 1)
        assert blocks[0].ok
        assert any("missing rationale" in n for n in blocks[0].notes)
        sample = QASample("s", "img", "q", ("a",))
        verdict = check_annotation(blocks[0].annotation, layout, sample)
        assert verdict.status == "failed"
        assert CHECK_FORMAT in verdict.failed_checks

    def test_out_of_layout_ids_dropped(self):
        raw = (
            "Q1:\nHELPFUL BOX: [<box>99</box>]\nCONFUSING BOX: []\n"
            "Q2:\nHELPFUL BOX: [<box>1</box>]\nCONFUSING BOX: []\nReason for <box>1</box>: **x**\n"
        )
        blocks = parse_annotation(raw, layout_with_texts(["a", "b"]), 2)
        assert not blocks[0].ok
        assert any("dropped id 99" in n for n in blocks[0].notes)
        assert blocks[1].ok

    def test_all_questions_unparseable_raises(self):
        raw = "Q1:\nHELPFUL BOX: [<box>99</box>]\nCONFUSING BOX: []\n"
        with pytest.raises(InputFormatError):
            parse_annotation(raw, layout_with_texts(["a", "b"]), 1)

    def test_missing_block_unparseable(self):
        raw = "Q1:\nHELPFUL BOX: [<box>1</box>]\nCONFUSING BOX: []\nReason for <box>1</box>: **x**\n"
        blocks = parse_annotation(raw, layout_with_texts(["a", "b"]), 2)
        assert blocks[0].ok
        assert not blocks[1].ok
        assert "missing block Q2" in blocks[1].notes[0]

    def test_zero_parseable_raises(self):
        with pytest.raises(InputFormatError):
            parse_annotation("complete nonsense", layout_with_texts(["a"]), 2)

    def test_no_id_loss(self):
        # every bracketed id lands in a parsed set or a dropped-id note
        raw = "Q1:\nHELPFUL BOX: [<box>1</box>, <box>7</box>]\nCONFUSING BOX: [<box>2</box>]\nReason for <box>1</box>: **x**\nReason for <box>2</box>: **y**\n"
        layout = layout_with_texts(["a", "b", "c", "d"])
        blocks = parse_annotation(raw, layout, 1)
        ann = blocks[0].annotation
        kept = set(ann.helpful) | set(ann.confusing)
        dropped = [n for n in blocks[0].notes if "dropped id" in n]
        assert kept == {1, 2}
        assert len(dropped) == 1 and "7" in dropped[0]


class TestCheckAnnotation:
    def sample(self, answers=("31 palmer drive",)):
        return QASample("s", "img", "Where does the applicant live?", tuple(answers))

    def layout(self):
        return layout_with_texts(
            ["Name: John", "Address: 31 Palmer Drive, Dover", "Phone: 555", "Date: 2020", None]
        )

    def test_entailment_passes(self):
        verdict = check_annotation(annotation([2], [1, 3]), self.layout(), self.sample())
        assert verdict.status == "passed"
        assert verdict.failed_checks == ()

    def test_disjointness_fails(self):
        verdict = check_annotation(annotation([2, 4], [4, 1]), self.layout(), self.sample())
        assert verdict.status == "failed"
        assert CHECK_DISJOINT in verdict.failed_checks

    def test_min3_fails_on_busy_page(self):
        verdict = check_annotation(annotation([2]), self.layout(), self.sample())
        assert CHECK_MIN_BOXES in verdict.failed_checks

    def test_small_page_forbids_confusing(self):
        layout = layout_with_texts(["Address: 31 Palmer Drive", "other"])
        verdict = check_annotation(annotation([1], [2]), layout, self.sample())
        assert CHECK_MIN_BOXES in verdict.failed_checks

    def test_small_page_helpful_only_passes(self):
        layout = layout_with_texts(["Address: 31 Palmer Drive", "other"])
        verdict = check_annotation(annotation([1]), layout, self.sample())
        assert verdict.status == "passed"

    def test_entailment_fails_when_text_present(self):
        verdict = check_annotation(annotation([1], [3, 4]), self.layout(), self.sample())
        assert verdict.status == "failed"
        assert CHECK_ENTAILMENT in verdict.failed_checks

    def test_no_ocr_text_indeterminate(self):
        verdict = check_annotation(annotation([5], [1, 3]), self.layout(), self.sample())
        assert verdict.status == "indeterminate"
        assert verdict.entailment_detail == "no-ocr-text"
        assert "no-ocr-text" in verdict.review_reasons

    def test_any_ground_truth_suffices(self):
        verdict = check_annotation(
            annotation([2], [1, 3]), self.layout(), self.sample(answers=("nope", "palmer drive"))
        )
        assert verdict.status == "passed"

    def test_out_of_range_id(self):
        verdict = check_annotation(annotation([2], [1, 99]), self.layout(), self.sample())
        assert CHECK_ID_RANGE in verdict.failed_checks

    def test_verdict_invariant(self):
        with pytest.raises(ParameterError):
            QAVerdict(status="passed", failed_checks=("format",))


class _Sink:
    def __init__(self):
        self.items = []

    def append(self, record):
        self.items.append(record)

    def enqueue(self, draft, failed_checks):
        self.items.append((draft, tuple(failed_checks)))


class TestRoute:
    def factory(self, annotation_, sample, provenance):
        return {"sample": sample.sample_id, "provenance": provenance}

    def test_passed_goes_to_dataset(self):
        data, review = _Sink(), _Sink()
        verdict = QAVerdict(status="passed")
        sample = QASample("s", "img", "q", ("a",))
        out = route(annotation([1]), verdict, sample, self.factory, data, review)
        assert out == DISPOSITION_DATASET
        assert data.items == [{"sample": "s", "provenance": "auto_passed"}]
        assert review.items == []

    def test_failed_goes_to_review_with_reasons(self):
        data, review = _Sink(), _Sink()
        verdict = QAVerdict(status="failed", failed_checks=(CHECK_ENTAILMENT,))
        sample = QASample("s", "img", "q", ("a",))
        out = route(annotation([1]), verdict, sample, self.factory, data, review)
        assert out == DISPOSITION_REVIEW
        assert review.items[0][1] == (CHECK_ENTAILMENT,)

    def test_indeterminate_goes_to_review(self):
        data, review = _Sink(), _Sink()
        verdict = QAVerdict(status="indeterminate", entailment_detail="no-ocr-text")
        sample = QASample("s", "img", "q", ("a",))
        out = route(annotation([1]), verdict, sample, self.factory, data, review)
        assert out == DISPOSITION_REVIEW
        assert review.items[0][1] == ("no-ocr-text",)


class TestEnablingTasks:
    def test_box_id_all_boxes_under_cap(self):
        layout = layout_with_texts(["a", "b", "c"])
        samples = synthesize_box_id_task(layout, cap=5, seed=0)
        assert [s.target for s in samples] == ["1", "2", "3"]
        assert all(s.task == "box_id" and s.image_role == "s1_overlay" for s in samples)

    def test_box_id_question_format(self):
        layout = LayoutSet.build(
            "img", 500, 500, [LayoutBox(id=1, bbox=BBox(10, 20, 30, 40), text="x")]
        )
        (s,) = synthesize_box_id_task(layout, cap=5, seed=0)
        assert s.question == "What is the index of the box at [10, 20, 30, 40]?"
        assert s.target == "1"

    def test_box_id_seeded_subset_deterministic(self):
        layout = layout_with_texts([f"t{i}" for i in range(20)])
        a = synthesize_box_id_task(layout, cap=5, seed=7)
        b = synthesize_box_id_task(layout, cap=5, seed=7)
        c = synthesize_box_id_task(layout, cap=5, seed=8)
        assert a == b
        assert len(a) == 5
        assert [s.sample_id for s in a] != [s.sample_id for s in c]

    def test_box_query_targets_rationales(self):
        ann = annotation([16], [15], rationales={16: "contains the applicant address", 15: "similar label"})
        sample = QASample("s9", "img", "Where does the applicant live?", ("x",))
        samples = synthesize_box_query_task(ann, sample)
        assert len(samples) == 2
        by_id = {s.sample_id: s for s in samples}
        q16 = by_id["s9:boxquery:16"]
        assert q16.question == 'What role does box 16 play in answering "Where does the applicant live?"?'
        assert q16.target == "contains the applicant address"

    def test_box_query_skips_missing_rationale(self):
        ann = annotation([1, 2], rationales={1: "fine"})
        sample = QASample("s", "img", "q", ("x",))
        samples = synthesize_box_query_task(ann, sample)
        assert [s.sample_id for s in samples] == ["s:boxquery:1"]

    def test_counts_equal_key_box_sizes(self):
        ann = annotation([1, 2], [3])
        sample = QASample("s", "img", "q", ("x",))
        assert len(synthesize_box_query_task(ann, sample)) == 3
