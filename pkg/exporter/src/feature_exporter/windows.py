"""Sliding-window planning and subword window assembly.

This deliberately re-implements the consumer toolkit's window planner (a
documented conformance pair): slice starts advance by ``stride`` until a
slice reaches the last document token, and every window is laid out as
``[CLS] context [SEP] document-slice [SEP]`` (three special tokens, CLS
playing the BOS role).  Both planners are pinned to the shared windowing
vector file.

Document tokens carry character offsets into the document text from the
fast tokenizer's offset mapping; context and special tokens carry the
empty span and are flagged in the special-token mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExportWindow:
    window_id: str
    sample_id: str
    doc_id: str
    window_char_offset: int
    has_bos: bool
    token_ids: tuple[int, ...]
    char_spans: tuple[tuple[int, int], ...]
    special_mask: tuple[bool, ...]


def plan_slices(doc_tokens: int, capacity: int, stride: int) -> list[tuple[int, int]]:
    if capacity < 1:
        raise ValueError("window capacity below one document token")
    if stride < 1 or stride > capacity:
        raise ValueError(f"stride must be in [1, capacity={capacity}], got {stride}")
    if doc_tokens == 0:
        return [(0, 0)]
    slices = []
    start = 0
    while True:
        end = min(start + capacity, doc_tokens)
        slices.append((start, end))
        if end >= doc_tokens:
            return slices
        start += stride


def serialize_context(context_turns) -> str:
    return " ".join(f"{role}: {utterance}" for role, utterance in context_turns)


def build_windows(sample, doc_text: str, tokenizer, max_len: int, stride: int) -> list[ExportWindow]:
    """Tokenize context and document and assemble aligned windows."""
    cls_id = tokenizer.cls_token_id
    sep_id = tokenizer.sep_token_id
    if cls_id is None or sep_id is None:
        raise ValueError("tokenizer must define CLS and SEP tokens")

    context_ids = tokenizer(serialize_context(sample.context_turns), add_special_tokens=False)["input_ids"]
    budget = max_len - 4  # three specials plus at least one document token
    if len(context_ids) > budget:
        log.warning("sample %s: truncating %d leading context tokens", sample.sample_id, len(context_ids) - budget)
        context_ids = context_ids[len(context_ids) - budget :]

    encoded = tokenizer(doc_text, add_special_tokens=False, return_offsets_mapping=True)
    doc_ids = encoded["input_ids"]
    doc_offsets = encoded["offset_mapping"]

    capacity = max_len - 3 - len(context_ids)
    effective_stride = min(stride, capacity)
    if effective_stride != stride:
        log.warning("sample %s: stride %d clamped to capacity %d", sample.sample_id, stride, capacity)

    windows = []
    for w_idx, (s, e) in enumerate(plan_slices(len(doc_ids), capacity, effective_stride)):
        head = 1 + len(context_ids) + 1
        token_ids = [cls_id] + list(context_ids) + [sep_id] + list(doc_ids[s:e]) + [sep_id]
        char_spans = [(0, 0)] * head + [tuple(doc_offsets[i]) for i in range(s, e)] + [(0, 0)]
        special = [True] * head + [False] * (e - s) + [True]
        windows.append(
            ExportWindow(
                window_id=f"{sample.sample_id}:w{w_idx}",
                sample_id=sample.sample_id,
                doc_id=sample.doc_id,
                window_char_offset=doc_offsets[s][0] if e > s else len(doc_text),
                has_bos=True,
                token_ids=tuple(token_ids),
                char_spans=tuple(char_spans),
                special_mask=tuple(special),
            )
        )
    return windows
