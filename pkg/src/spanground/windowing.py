"""Sliding-window segmentation with token-to-character alignment.

Long documents are cut into overlapping token slices; every window is laid
out as ``[BOS] dialog-context [SEP] document-slice [EOS]`` (three special
tokens).  Character spans of document tokens are kept in absolute document
coordinates so window scores can be merged back into one span space.

The bundled tokenizer is a deterministic whitespace+punctuation splitter
over a hashed vocabulary; subword tokenizers arrive pre-aligned inside
feature files instead.
"""

from __future__ import annotations

import logging
import re
import unicodedata
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import DialogSample, GroundedDocument, ROLE_AGENT
from .errors import ConfigurationError

log = logging.getLogger(__name__)

# Pseudo-span used as the training target when a window does not contain the
# reference: both indices point at the BOS position.
BOS_SPAN = (0, 0)

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class HashTokenizer:
    """Deterministic word/punctuation tokenizer with a CRC-hashed id space."""

    BOS = 0
    EOS = 1
    SEP = 2
    USER = 3
    AGENT = 4
    _FIRST_WORD_ID = 5

    def __init__(self, vocab_size: int = 8192):
        if vocab_size <= self._FIRST_WORD_ID:
            raise ConfigurationError(f"vocab_size must exceed {self._FIRST_WORD_ID}")
        self.vocab_size = vocab_size

    @property
    def fingerprint(self) -> str:
        return f"hash-ws-punct/v1/size={self.vocab_size}"

    def token_id(self, surface: str) -> int:
        digest = zlib.crc32(unicodedata.normalize("NFC", surface).encode("utf-8"))
        return self._FIRST_WORD_ID + digest % (self.vocab_size - self._FIRST_WORD_ID)

    def encode(self, text: str) -> tuple[list[int], list[tuple[int, int]]]:
        """Token ids plus their character spans into ``text``."""
        ids, spans = [], []
        for m in _WORD_RE.finditer(text):
            ids.append(self.token_id(m.group()))
            spans.append((m.start(), m.end()))
        return ids, spans


@dataclass(frozen=True, eq=True)
class TokenAlignment:
    """Per-token ids, document character spans and the no-alignment mask.

    ``special_mask`` is True for every token without a document alignment:
    the three specials and all dialog-context tokens.  Masked tokens carry
    the empty span (0, 0).
    """

    token_ids: tuple[int, ...]
    char_spans: tuple[tuple[int, int], ...]
    special_mask: tuple[bool, ...]

    def __post_init__(self):
        n = len(self.token_ids)
        if len(self.char_spans) != n or len(self.special_mask) != n:
            raise ValueError("alignment arrays disagree in length")

    def __len__(self) -> int:
        return len(self.token_ids)

    def doc_positions(self) -> list[int]:
        return [i for i, masked in enumerate(self.special_mask) if not masked]

    def validate(self) -> None:
        prev_end = -1
        for i, masked in enumerate(self.special_mask):
            start, end = self.char_spans[i]
            if masked:
                if start != end:
                    raise ValueError(f"token {i}: special token with non-empty char span")
                continue
            if start >= end:
                raise ValueError(f"token {i}: empty char span on document token")
            if start < prev_end:
                raise ValueError(f"token {i}: overlapping or decreasing char spans")
            prev_end = end


@dataclass(frozen=True, eq=True)
class WindowDescriptor:
    window_id: str
    sample_id: str
    doc_id: str
    alignment: TokenAlignment
    window_char_offset: int
    has_bos: bool = True

    def doc_positions(self) -> list[int]:
        return self.alignment.doc_positions()


@dataclass(frozen=True, eq=False)
class FeatureWindow:
    """A window descriptor paired with one encoder's hidden states."""

    descriptor: WindowDescriptor
    hidden_states: np.ndarray  # [num_tokens, feature_dim], float

    def __post_init__(self):
        if self.hidden_states.shape[0] != len(self.descriptor.alignment):
            raise ValueError(
                f"window {self.descriptor.window_id}: {self.hidden_states.shape[0]} feature rows "
                f"for {len(self.descriptor.alignment)} tokens"
            )

    @property
    def window_id(self) -> str:
        return self.descriptor.window_id

    @property
    def doc_id(self) -> str:
        return self.descriptor.doc_id

    @property
    def alignment(self) -> TokenAlignment:
        return self.descriptor.alignment

    @property
    def feature_dim(self) -> int:
        return self.hidden_states.shape[1]


def serialize_context(context: Sequence[tuple[str, str]], tokenizer: HashTokenizer) -> list[list[int]]:
    """Per-turn token id lists: a role marker followed by the utterance tokens."""
    turns = []
    for role, utterance in context:
        marker = tokenizer.AGENT if role == ROLE_AGENT else tokenizer.USER
        ids, _ = tokenizer.encode(utterance)
        turns.append([marker] + ids)
    return turns


def plan_slices(doc_tokens: int, capacity: int, stride: int) -> list[tuple[int, int]]:
    """Token ranges of consecutive document slices.

    Starts advance by ``stride`` until a slice reaches the last token, so
    consecutive slices overlap by ``capacity - stride`` tokens.  This planner
    is mirrored by the feature exporter; both are pinned to the shared
    windowing vector file.
    """
    if capacity < 1:
        raise ConfigurationError("window capacity below one document token")
    if stride < 1 or stride > capacity:
        raise ConfigurationError(f"stride must be in [1, capacity={capacity}], got {stride}")
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


def make_windows(
    sample: DialogSample,
    doc: GroundedDocument,
    tokenizer: HashTokenizer,
    max_len: int = 512,
    stride: int = 128,
) -> list[WindowDescriptor]:
    """Cut one (sample, document) pair into aligned windows covering the document."""
    if max_len < 5:
        raise ConfigurationError(f"max_len={max_len} cannot hold specials plus one document token")

    turn_ids = serialize_context(sample.context, tokenizer)
    # the three specials plus at least one document token must fit
    budget = max_len - 4
    while turn_ids and sum(map(len, turn_ids)) > budget:
        dropped = turn_ids.pop(0)
        log.warning(
            "sample %s: dialog context exceeds window budget, dropping oldest turn (%d tokens)",
            sample.sample_id,
            len(dropped),
        )
    query = [tid for turn in turn_ids for tid in turn]
    if len(query) > budget:  # single over-long turn: clip its head
        log.warning("sample %s: truncating %d leading context tokens", sample.sample_id, len(query) - budget)
        query = query[len(query) - budget :]

    doc_ids, doc_spans = tokenizer.encode(doc.text)
    capacity = max_len - 3 - len(query)
    effective_stride = min(stride, capacity)
    if effective_stride != stride:
        log.warning("sample %s: stride %d clamped to slice capacity %d", sample.sample_id, stride, capacity)

    windows = []
    for w_idx, (s, e) in enumerate(plan_slices(len(doc_ids), capacity, effective_stride)):
        token_ids = [tokenizer.BOS] + query + [tokenizer.SEP] + doc_ids[s:e] + [tokenizer.EOS]
        char_spans = (
            [(0, 0)] * (1 + len(query) + 1) + [doc_spans[i] for i in range(s, e)] + [(0, 0)]
        )
        special = [True] * (1 + len(query) + 1) + [False] * (e - s) + [True]
        alignment = TokenAlignment(tuple(token_ids), tuple(char_spans), tuple(special))
        alignment.validate()
        windows.append(
            WindowDescriptor(
                window_id=f"{sample.sample_id}:w{w_idx}",
                sample_id=sample.sample_id,
                doc_id=doc.doc_id,
                alignment=alignment,
                window_char_offset=doc_spans[s][0] if e > s else len(doc.text),
            )
        )
    return windows


def coverage_char_ranges(windows: Sequence[WindowDescriptor], doc_len: int) -> list[tuple[int, int]]:
    """Character range each window accounts for; their union is [0, doc_len).

    Boundaries snap outward over inter-token gaps: the first window starts at
    0, the last ends at ``doc_len``, and each window extends to at least the
    next window's first document character.
    """
    ranges = []
    n = len(windows)
    for i, w in enumerate(windows):
        doc_pos = w.doc_positions()
        if not doc_pos:
            ranges.append((0, doc_len))
            continue
        start = 0 if i == 0 else w.alignment.char_spans[doc_pos[0]][0]
        end = w.alignment.char_spans[doc_pos[-1]][1]
        if i + 1 < n:
            nxt = windows[i + 1]
            nxt_pos = nxt.doc_positions()
            if nxt_pos:
                end = max(end, nxt.alignment.char_spans[nxt_pos[0]][0])
        else:
            end = doc_len
        ranges.append((start, end))
    return ranges


def window_slice_char_range(window: WindowDescriptor) -> tuple[int, int] | None:
    doc_pos = window.doc_positions()
    if not doc_pos:
        return None
    spans = window.alignment.char_spans
    return spans[doc_pos[0]][0], spans[doc_pos[-1]][1]


def assign_targets(window: WindowDescriptor, reference_span: tuple[int, int]) -> tuple[int, int]:
    """Window token indices of the tightest pair covering the reference.

    Returns ``BOS_SPAN`` when the reference is not fully inside this
    window's slice (including spans straddling the window boundary).
    """
    ref_start, ref_end = reference_span
    if ref_start >= ref_end:
        return BOS_SPAN
    slice_range = window_slice_char_range(window)
    if slice_range is None or ref_start < slice_range[0] or ref_end > slice_range[1]:
        return BOS_SPAN

    spans = window.alignment.char_spans
    doc_pos = window.doc_positions()
    starts = [i for i in doc_pos if spans[i][1] > ref_start]
    ends = [i for i in doc_pos if spans[i][0] < ref_end]
    if not starts or not ends or starts[0] > ends[-1]:
        return BOS_SPAN
    return starts[0], ends[-1]


def token_pair_char_span(window: WindowDescriptor, pair: tuple[int, int]) -> tuple[int, int]:
    """Absolute character span covered by a (start, end) token pair."""
    spans = window.alignment.char_spans
    return spans[pair[0]][0], spans[pair[1]][1]
