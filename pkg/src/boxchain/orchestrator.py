"""Two-stage select-then-answer inference, plus the one-pass vanilla mode.

Stage 1 shows the model the indexed overlay and asks which boxes contain the
answer; stage 2 shows the blur-masked image (selected boxes kept sharp) and
asks for the answer itself. When stage 1 yields nothing usable, or the layout
has no boxes at all, the orchestrator falls back to answering from the
unmodified image and records why.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from typing import Optional

from .backend import Backend, ModelRequest, ModelResponse, DEFAULT_MAX_OUTPUT_TOKENS
from .errors import ParameterError
from .layout import LayoutSet
from .render import ImageLike, RenderStyle, render_s1_overlay, render_s2_mask

MODE_DOC_COB = "doc_cob"
MODE_VANILLA = "vanilla_qa"

DEFAULT_K_MAX = 8

S1_PROMPT_TEMPLATE = (
    "Which red box in the given image contains the answer to the following "
    "question: {question}? Use the box ID near the red box to answer the question."
)
ANSWER_SUFFIX = "Answer the question using a single word or phrase."

_BOX_MARKER_RE = re.compile(r"<box>\s*(\d+)\s*</box>")
_BOX_WORD_RE = re.compile(r"\b[Bb]ox\s*(\d+)")
_BARE_INT_RE = re.compile(r"\d+")


def build_s1_prompt(question: str) -> str:
    if not question:
        raise ParameterError("question must be non-empty")
    return S1_PROMPT_TEMPLATE.format(question=question)


def build_vanilla_prompt(question: str) -> str:
    if not question:
        raise ParameterError("question must be non-empty")
    return f"{question} {ANSWER_SUFFIX}"


@dataclass(frozen=True)
class KeyBoxSelection:
    """Parsed stage-1 output: the chosen box ids plus parser bookkeeping."""

    ids: tuple[int, ...]
    raw_text: str
    parse_notes: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.ids)


def parse_box_ids(raw: str, layout: LayoutSet, k_max: int = DEFAULT_K_MAX) -> KeyBoxSelection:
    """Extract box ids from free-form stage-1 model output.

    Strategies, first one that yields any candidate wins: explicit
    <box>n</box> markers, then "box n"/"Box n" phrases, then bare integers in
    text order. Candidates are deduplicated keeping first occurrence, ids
    outside 1..N are dropped (noted), and the result is truncated to k_max.
    """
    if k_max < 1:
        raise ParameterError("k_max must be >= 1")
    candidates: list[int] = []
    for pattern in (_BOX_MARKER_RE, _BOX_WORD_RE, _BARE_INT_RE):
        found = pattern.findall(raw)
        if found:
            candidates = [int(tok) for tok in found]
            break

    notes: list[str] = []
    ids: list[int] = []
    n = len(layout)
    for cand in candidates:
        if cand in ids:
            continue
        if not 1 <= cand <= n:
            notes.append(f"dropped out-of-range id {cand} (layout has {n} boxes)")
            continue
        ids.append(cand)
    if len(ids) > k_max:
        notes.append(f"truncated selection from {len(ids)} to k_max={k_max}")
        ids = ids[:k_max]
    if not candidates:
        notes.append("no box ids found in output")
    return KeyBoxSelection(ids=tuple(ids), raw_text=raw, parse_notes=tuple(notes))


def build_s2_prompt(question: str, selection: KeyBoxSelection, layout: LayoutSet) -> str:
    """Stage-2 prompt: the question plus the selected boxes with coordinates."""
    if not selection.ids:
        raise ParameterError("selection must be non-empty")
    ids_str = ", ".join(str(i) for i in selection.ids)
    bbox_str = ", ".join(str(layout.get(i).bbox.as_list()) for i in selection.ids)
    return (
        f"{question} The key regions are boxes {ids_str} at {bbox_str}. "
        f"Please pay more attention to the red boxes. {ANSWER_SUFFIX}"
    )


@dataclass(frozen=True)
class CallRecordView:
    """Serialized view of one model call inside a trace."""

    instruction: str
    image_fingerprints: tuple[str, ...]
    image_roles: tuple[str, ...]
    response_text: str
    prompt_tokens: int
    output_tokens: int
    image_tokens: int
    estimated: bool


@dataclass(frozen=True)
class InferenceTrace:
    """Full record of one inference: prompts, raw outputs, selection, answer."""

    sample_id: str
    mode: str
    answer: str
    total_prompt_tokens: int
    total_output_tokens: int
    total_image_tokens: int
    wall_time_ms: float
    s1_call: Optional[CallRecordView] = None
    selection: Optional[KeyBoxSelection] = None
    s2_call: Optional[CallRecordView] = None
    vanilla_call: Optional[CallRecordView] = None
    fallback_reason: Optional[str] = None

    def calls(self) -> tuple[CallRecordView, ...]:
        return tuple(c for c in (self.s1_call, self.s2_call, self.vanilla_call) if c)

    def to_json(self) -> dict:
        def call_dict(c: Optional[CallRecordView]) -> Optional[dict]:
            if c is None:
                return None
            return {
                "instruction": c.instruction,
                "image_fingerprints": list(c.image_fingerprints),
                "image_roles": list(c.image_roles),
                "response_text": c.response_text,
                "prompt_tokens": c.prompt_tokens,
                "output_tokens": c.output_tokens,
                "image_tokens": c.image_tokens,
                "estimated": c.estimated,
            }

        return {
            "sample_id": self.sample_id,
            "mode": self.mode,
            "answer": self.answer,
            "total_prompt_tokens": self.total_prompt_tokens,
            "total_output_tokens": self.total_output_tokens,
            "total_image_tokens": self.total_image_tokens,
            "wall_time_ms": self.wall_time_ms,
            "s1": call_dict(self.s1_call),
            "selection": None
            if self.selection is None
            else {
                "ids": list(self.selection.ids),
                "raw_text": self.selection.raw_text,
                "parse_notes": list(self.selection.parse_notes),
            },
            "s2": call_dict(self.s2_call),
            "vanilla": call_dict(self.vanilla_call),
            "fallback_reason": self.fallback_reason,
        }


def _record_call(request: ModelRequest, response: ModelResponse) -> CallRecordView:
    from .backend import image_fingerprint
    from .render import PromptedImage

    roles = tuple(
        i.role if isinstance(i, PromptedImage) else "original" for i in request.images
    )
    return CallRecordView(
        instruction=request.instruction,
        image_fingerprints=tuple(image_fingerprint(b) for b in request.image_bytes()),
        image_roles=roles,
        response_text=response.text,
        prompt_tokens=response.prompt_token_count,
        output_tokens=response.output_token_count,
        image_tokens=response.image_token_count,
        estimated=response.estimated,
    )


def _totals(calls: list[CallRecordView]) -> tuple[int, int, int]:
    return (
        sum(c.prompt_tokens for c in calls),
        sum(c.output_tokens for c in calls),
        sum(c.image_tokens for c in calls),
    )


def infer_vanilla(
    image: ImageLike,
    question: str,
    backend: Backend,
    sample_id: str = "",
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS,
) -> InferenceTrace:
    """One-pass answering from the full, unmodified image."""
    from .render import encode_png, load_image

    t0 = time.monotonic()
    request = ModelRequest(
        images=(encode_png(load_image(image)),),
        instruction=build_vanilla_prompt(question),
        max_output_tokens=max_output_tokens,
    )
    response = backend.invoke(request)
    call = _record_call(request, response)
    prompt, output, img_tokens = _totals([call])
    return InferenceTrace(
        sample_id=sample_id,
        mode=MODE_VANILLA,
        answer=response.text.strip(),
        total_prompt_tokens=prompt,
        total_output_tokens=output,
        total_image_tokens=img_tokens,
        wall_time_ms=(time.monotonic() - t0) * 1000.0,
        vanilla_call=call,
    )


def infer_doc_cob(
    image: ImageLike,
    layout: LayoutSet,
    question: str,
    backend: Backend,
    style: Optional[RenderStyle] = None,
    k_max: int = DEFAULT_K_MAX,
    sample_id: str = "",
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS,
) -> InferenceTrace:
    """Two-stage inference; falls back to vanilla QA when selection fails."""
    t0 = time.monotonic()

    if len(layout) == 0:
        trace = infer_vanilla(image, question, backend, sample_id, max_output_tokens)
        return InferenceTrace(
            sample_id=sample_id,
            mode=MODE_VANILLA,
            answer=trace.answer,
            total_prompt_tokens=trace.total_prompt_tokens,
            total_output_tokens=trace.total_output_tokens,
            total_image_tokens=trace.total_image_tokens,
            wall_time_ms=(time.monotonic() - t0) * 1000.0,
            vanilla_call=trace.vanilla_call,
            fallback_reason="no-layout-boxes",
        )

    overlay = render_s1_overlay(image, layout, style)
    s1_request = ModelRequest(
        images=(overlay,),
        instruction=build_s1_prompt(question),
        max_output_tokens=max_output_tokens,
    )
    s1_response = backend.invoke(s1_request)
    s1_call = _record_call(s1_request, s1_response)
    selection = parse_box_ids(s1_response.text, layout, k_max)

    if not selection:
        fallback = infer_vanilla(image, question, backend, sample_id, max_output_tokens)
        calls = [s1_call, fallback.vanilla_call]
        prompt, output, img_tokens = _totals([c for c in calls if c])
        return InferenceTrace(
            sample_id=sample_id,
            mode=MODE_DOC_COB,
            answer=fallback.answer,
            total_prompt_tokens=prompt,
            total_output_tokens=output,
            total_image_tokens=img_tokens,
            wall_time_ms=(time.monotonic() - t0) * 1000.0,
            s1_call=s1_call,
            selection=selection,
            vanilla_call=fallback.vanilla_call,
            fallback_reason="empty-selection",
        )

    masked = render_s2_mask(image, layout, selection.ids, style)
    s2_request = ModelRequest(
        images=(masked,),
        instruction=build_s2_prompt(question, selection, layout),
        max_output_tokens=max_output_tokens,
    )
    s2_response = backend.invoke(s2_request)
    s2_call = _record_call(s2_request, s2_response)
    prompt, output, img_tokens = _totals([s1_call, s2_call])
    return InferenceTrace(
        sample_id=sample_id,
        mode=MODE_DOC_COB,
        answer=s2_response.text.strip(),
        total_prompt_tokens=prompt,
        total_output_tokens=output,
        total_image_tokens=img_tokens,
        wall_time_ms=(time.monotonic() - t0) * 1000.0,
        s1_call=s1_call,
        selection=selection,
        s2_call=s2_call,
    )
