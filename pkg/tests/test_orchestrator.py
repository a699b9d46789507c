import pytest

from boxchain.backend import MatchRule, MockBackend, ScriptedBehavior
from boxchain.errors import ParameterError
from boxchain.orchestrator import (
    KeyBoxSelection,
    build_s1_prompt,
    build_s2_prompt,
    build_vanilla_prompt,
    infer_doc_cob,
    infer_vanilla,
    parse_box_ids,
)
from conftest import make_layout, make_noise_image


@pytest.fixture()
def page():
    img = make_noise_image(300, 200, seed=21)
    layout = make_layout("pg", 300, 200, [(10, 10, 80, 40), (120, 10, 80, 40), (10, 100, 200, 60)])
    return img, layout


def mock(*rules):
    return MockBackend(ScriptedBehavior(tuple(rules) + (MatchRule("*", "UNKNOWN"),)))


class TestPrompts:
    def test_s1_template_exact(self):
        assert build_s1_prompt("Where does the applicant live?") == (
            "Which red box in the given image contains the answer to the following "
            "question: Where does the applicant live?? Use the box ID near the red box "
            "to answer the question."
        )

    def test_s1_empty_question_rejected(self):
        with pytest.raises(ParameterError):
            build_s1_prompt("")

    def test_vanilla_suffix(self):
        assert build_vanilla_prompt("How many eggs?") == (
            "How many eggs? Answer the question using a single word or phrase."
        )

    def test_s2_prompt_lists_ids_and_coords(self, page):
        _, layout = page
        sel = KeyBoxSelection(ids=(3, 1), raw_text="<box>3</box> <box>1</box>")
        prompt = build_s2_prompt("How many eggs?", sel, layout)
        assert prompt == (
            "How many eggs? The key regions are boxes 3, 1 at "
            "[10, 100, 200, 60], [10, 10, 80, 40]. "
            "Please pay more attention to the red boxes. "
            "Answer the question using a single word or phrase."
        )

    def test_s2_requires_selection(self, page):
        _, layout = page
        with pytest.raises(ParameterError):
            build_s2_prompt("q", KeyBoxSelection(ids=(), raw_text=""), layout)


class TestParseBoxIds:
    def layout(self, n):
        return make_layout("pg", 1000, 40 + n * 60, [(10, 10 + i * 60, 50, 40) for i in range(n)])

    def test_markers_priority(self):
        sel = parse_box_ids("<box>16</box>, <box>15</box>", self.layout(20), k_max=8)
        assert sel.ids == (16, 15)

    def test_box_words(self):
        sel = parse_box_ids("Box 2 and box 3 look right", self.layout(5), k_max=8)
        assert sel.ids == (2, 3)

    def test_bare_integers_fallback(self):
        sel = parse_box_ids("Boxes 3, 5 and 6 contain the recipe", self.layout(10), k_max=8)
        assert sel.ids == (3, 5, 6)

    def test_out_of_range_dropped_with_note(self):
        sel = parse_box_ids("box 99", self.layout(5), k_max=8)
        assert sel.ids == ()
        assert any("99" in n for n in sel.parse_notes)

    def test_markers_suppress_other_integers(self):
        sel = parse_box_ids("<box>2</box> out of 30 options", self.layout(5), k_max=8)
        assert sel.ids == (2,)

    def test_dedup_keeps_first(self):
        sel = parse_box_ids("<box>4</box><box>2</box><box>4</box>", self.layout(5), k_max=8)
        assert sel.ids == (4, 2)

    def test_truncates_to_k_max(self):
        raw = " ".join(f"<box>{i}</box>" for i in range(1, 12))
        sel = parse_box_ids(raw, self.layout(11), k_max=8)
        assert sel.ids == tuple(range(1, 9))
        assert any("truncated" in n for n in sel.parse_notes)

    def test_garbage_gives_empty(self):
        sel = parse_box_ids("no idea, sorry", self.layout(5), k_max=8)
        assert not sel
        assert sel.raw_text == "no idea, sorry"


class TestInferVanilla:
    def test_answer_and_tokens(self, page):
        img, _ = page
        backend = mock(MatchRule("How many eggs? Answer the question using", "4"))
        trace = infer_vanilla(img, "How many eggs?", backend, sample_id="s1")
        assert trace.mode == "vanilla_qa"
        assert trace.answer == "4"
        assert trace.s1_call is None and trace.s2_call is None
        call = trace.vanilla_call
        assert trace.total_prompt_tokens == call.prompt_tokens
        assert trace.total_image_tokens == call.image_tokens

    def test_deterministic(self, page):
        img, _ = page
        backend = mock()
        a = infer_vanilla(img, "q?", backend)
        b = infer_vanilla(img, "q?", backend)
        assert a.answer == b.answer == "UNKNOWN"
        assert a.total_prompt_tokens == b.total_prompt_tokens


class TestInferDocCob:
    def test_two_stage_happy_path(self, page):
        img, layout = page
        backend = mock(
            MatchRule("following question: How many eggs", "<box>2</box>"),
            MatchRule("How many eggs? The key regions are boxes", "2 eggs"),
        )
        trace = infer_doc_cob(img, layout, "How many eggs?", backend, sample_id="s1")
        assert trace.mode == "doc_cob"
        assert trace.selection.ids == (2,)
        assert trace.answer == "2 eggs"
        assert trace.fallback_reason is None
        assert trace.s1_call.image_roles == ("s1_overlay",)
        assert trace.s2_call.image_roles == ("s2_mask",)
        assert trace.total_prompt_tokens == trace.s1_call.prompt_tokens + trace.s2_call.prompt_tokens
        assert trace.total_image_tokens == trace.s1_call.image_tokens + trace.s2_call.image_tokens

    def test_garbage_selection_falls_back(self, page):
        img, layout = page
        backend = mock(
            MatchRule("following question:", "I could not find it."),
            MatchRule("Answer the question using", "fallback answer"),
        )
        trace = infer_doc_cob(img, layout, "Where is it?", backend)
        assert trace.mode == "doc_cob"
        assert trace.fallback_reason == "empty-selection"
        assert trace.answer == "fallback answer"
        assert trace.s2_call is None
        assert trace.vanilla_call is not None
        assert trace.total_prompt_tokens == (
            trace.s1_call.prompt_tokens + trace.vanilla_call.prompt_tokens
        )

    def test_empty_layout_skips_s1(self):
        img = make_noise_image(100, 100, seed=22)
        layout = make_layout("pg", 100, 100, [])
        backend = mock(MatchRule("Answer the question using", "direct"))
        trace = infer_doc_cob(img, layout, "q?", backend)
        assert trace.mode == "vanilla_qa"
        assert trace.fallback_reason == "no-layout-boxes"
        assert trace.answer == "direct"
        assert trace.s1_call is None
        assert len(backend.call_log) == 1

    def test_deterministic_with_mock(self, page):
        img, layout = page
        backend = mock(
            MatchRule("following question:", "<box>1</box>"),
            MatchRule("The key regions are boxes", "answer"),
        )
        a = infer_doc_cob(img, layout, "q?", backend)
        b = infer_doc_cob(img, layout, "q?", backend)
        assert a.answer == b.answer
        assert a.selection == b.selection
        assert a.s2_call.image_fingerprints == b.s2_call.image_fingerprints

    def test_trace_serialization_round_trip_fields(self, page):
        img, layout = page
        backend = mock(
            MatchRule("following question:", "<box>1</box> <box>3</box>"),
            MatchRule("The key regions are boxes", "done"),
        )
        trace = infer_doc_cob(img, layout, "q?", backend, sample_id="abc")
        payload = trace.to_json()
        assert payload["sample_id"] == "abc"
        assert payload["selection"]["ids"] == [1, 3]
        assert payload["s1"]["image_roles"] == ["s1_overlay"]
        assert payload["s2"]["response_text"] == "done"
        assert payload["vanilla"] is None
