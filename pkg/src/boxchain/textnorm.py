"""Text normalization shared by the answer-entailment check and field matching.

Rule: casefold, collapse runs of whitespace, and strip leading/trailing
punctuation from each whitespace-delimited token. Tolerates OCR casing and
punctuation drift while staying strict on content.
"""

from __future__ import annotations

import string

_EDGE_PUNCT = string.punctuation + "‘’“”«»"


def normalize_text(s: str) -> str:
    tokens = []
    for tok in s.casefold().split():
        tok = tok.strip(_EDGE_PUNCT)
        if tok:
            tokens.append(tok)
    return " ".join(tokens)


def is_entailed(answer: str, haystack: str) -> bool:
    """True when the normalized answer occurs inside the normalized haystack."""
    needle = normalize_text(answer)
    if not needle:
        return False
    return needle in normalize_text(haystack)
