"""Binary feature-file format and the desk-scale synthetic featurizer.

Feature file layout (all integers little-endian):

    magic            4 bytes  b"SGF1"
    feature_dim      u32
    window_count     u32
    per window:
        window_id            str  (u32 byte length + UTF-8 bytes)
        sample_id            str
        doc_id               str
        window_char_offset   u32
        has_bos              u8
        token_ids            u32 array  (u32 count + values); count = num_tokens
        char_starts          u32 array  (count must equal num_tokens)
        char_ends            u32 array
        special_mask         u8 array
        hidden_states        f32 x (num_tokens * feature_dim), row-major

A JSON sidecar at ``<path>.json`` records ``model_id``, the tokenizer
fingerprint, ``feature_dim`` and ``window_count``.  The feature exporter
writes this format bit-exactly; this module is the validating reader.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .corpus import DialogSample, GroundedDocument
from .errors import DataError
from .windowing import FeatureWindow, TokenAlignment, WindowDescriptor

MAGIC = b"SGF1"


@dataclass
class FeatureFile:
    feature_dim: int
    windows: list[FeatureWindow]
    sidecar: dict

    @property
    def model_id(self) -> str:
        return self.sidecar.get("model_id", "")

    def windows_by_sample(self) -> dict[str, list[FeatureWindow]]:
        grouped: dict[str, list[FeatureWindow]] = {}
        for fw in self.windows:
            grouped.setdefault(fw.descriptor.sample_id, []).append(fw)
        return grouped


def _write_str(fh: BinaryIO, value: str) -> None:
    raw = value.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _write_array(fh: BinaryIO, values, fmt: str) -> None:
    fh.write(struct.pack("<I", len(values)))
    fh.write(struct.pack(f"<{len(values)}{fmt}", *values))


def write_feature_file(
    path: str | Path,
    windows: Sequence[FeatureWindow],
    model_id: str,
    tokenizer_fingerprint: str,
) -> None:
    windows = list(windows)
    if not windows:
        raise DataError("refusing to write a feature file with zero windows")
    dims = {fw.feature_dim for fw in windows}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature_dim across windows: {sorted(dims)}")
    feature_dim = dims.pop()

    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", feature_dim, len(windows)))
        for fw in windows:
            d = fw.descriptor
            _write_str(fh, d.window_id)
            _write_str(fh, d.sample_id)
            _write_str(fh, d.doc_id)
            fh.write(struct.pack("<IB", d.window_char_offset, int(d.has_bos)))
            _write_array(fh, d.alignment.token_ids, "I")
            _write_array(fh, [s for s, _ in d.alignment.char_spans], "I")
            _write_array(fh, [e for _, e in d.alignment.char_spans], "I")
            _write_array(fh, [int(m) for m in d.alignment.special_mask], "B")
            fh.write(np.asarray(fw.hidden_states, dtype="<f4").tobytes(order="C"))

    sidecar = {
        "model_id": model_id,
        "tokenizer_fingerprint": tokenizer_fingerprint,
        "feature_dim": feature_dim,
        "window_count": len(windows),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class _Reader:
    def __init__(self, fh: BinaryIO, path: Path):
        self.fh = fh
        self.path = path

    def take(self, count: int) -> bytes:
        raw = self.fh.read(count)
        if len(raw) != count:
            raise DataError(f"{self.path}: truncated feature file")
        return raw

    def read_str(self) -> str:
        (length,) = struct.unpack("<I", self.take(4))
        return self.take(length).decode("utf-8")

    def read_array(self, fmt: str, item_size: int) -> tuple:
        (count,) = struct.unpack("<I", self.take(4))
        return struct.unpack(f"<{count}{fmt}", self.take(count * item_size))


def read_feature_file(path: str | Path) -> FeatureFile:
    """Load and validate a feature file; raises DataError naming the offending window."""
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8")) if sidecar_path.exists() else {}

    with path.open("rb") as fh:
        reader = _Reader(fh, path)
        if reader.take(4) != MAGIC:
            raise DataError(f"{path}: bad magic, not a feature file")
        feature_dim, window_count = struct.unpack("<II", reader.take(8))
        windows = []
        for _ in range(window_count):
            window_id = reader.read_str()
            sample_id = reader.read_str()
            doc_id = reader.read_str()
            window_char_offset, has_bos = struct.unpack("<IB", reader.take(5))
            token_ids = reader.read_array("I", 4)
            char_starts = reader.read_array("I", 4)
            char_ends = reader.read_array("I", 4)
            special_mask = reader.read_array("B", 1)
            n = len(token_ids)
            if not (len(char_starts) == len(char_ends) == len(special_mask) == n):
                raise DataError(f"{path}: window {window_id}: alignment array lengths disagree")
            raw = reader.take(n * feature_dim * 4)
            hidden = np.frombuffer(raw, dtype="<f4").reshape(n, feature_dim).astype(np.float64)
            alignment = TokenAlignment(
                token_ids=tuple(token_ids),
                char_spans=tuple(zip(char_starts, char_ends)),
                special_mask=tuple(bool(m) for m in special_mask),
            )
            try:
                alignment.validate()
            except ValueError as exc:
                raise DataError(f"{path}: window {window_id}: {exc}")
            windows.append(
                FeatureWindow(
                    descriptor=WindowDescriptor(
                        window_id=window_id,
                        sample_id=sample_id,
                        doc_id=doc_id,
                        alignment=alignment,
                        window_char_offset=window_char_offset,
                        has_bos=bool(has_bos),
                    ),
                    hidden_states=hidden,
                )
            )
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after {window_count} windows")

    if sidecar and sidecar.get("feature_dim") not in (None, feature_dim):
        raise DataError(f"{path}: sidecar feature_dim {sidecar['feature_dim']} != {feature_dim}")
    return FeatureFile(feature_dim=feature_dim, windows=windows, sidecar=sidecar)


# --- synthetic featurizer -------------------------------------------------
#
# Stand-in for a frozen encoder at desk scale.  Per-token features are a
# seeded hash embedding plus three structured channels a linear head can
# exploit: token-level lexical overlap with the dialog context, a
# document-token flag, and the overlap rate of the whole surrounding
# sentence (a crude contextual signal, so sentence-final tokens are
# separable too).

_SENTENCE_BREAK = frozenset(".!?")


def _context_words(sample: DialogSample) -> set[str]:
    words = set()
    for _, utterance in sample.context:
        words.update(w.lower().strip(".,!?;:") for w in utterance.split())
    words.discard("")
    return words


def _sentence_ranges(text: str) -> list[tuple[int, int]]:
    ranges = []
    start = 0
    for i, ch in enumerate(text):
        if ch in _SENTENCE_BREAK:
            ranges.append((start, i + 1))
            start = i + 1
    if start < len(text):
        ranges.append((start, len(text)))
    return ranges


def _sentence_overlap(text: str, words: set[str]) -> list[tuple[int, int, float]]:
    scored = []
    for start, end in _sentence_ranges(text):
        tokens = [t.lower().strip(".,!?;:") for t in text[start:end].split()]
        tokens = [t for t in tokens if t]
        rate = sum(t in words for t in tokens) / len(tokens) if tokens else 0.0
        scored.append((start, end, rate))
    return scored


def _base_vector(token_id: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng((seed, token_id))
    return rng.normal(0.0, 0.1, size=dim)


def synthetic_features(
    descriptor: WindowDescriptor,
    sample: DialogSample,
    doc: GroundedDocument,
    feature_dim: int = 16,
    seed: int = 0,
) -> FeatureWindow:
    if feature_dim < 4:
        raise DataError("synthetic features need feature_dim >= 4")
    words = _context_words(sample)
    sentences = _sentence_overlap(doc.text, words)
    rows = np.zeros((len(descriptor.alignment), feature_dim))
    for i, token_id in enumerate(descriptor.alignment.token_ids):
        rows[i] = _base_vector(token_id, feature_dim, seed)
        rows[i][:3] = 0.0
        if not descriptor.alignment.special_mask[i]:
            start, end = descriptor.alignment.char_spans[i]
            surface = doc.text[start:end].lower()
            rows[i][0] = 1.0 if surface in words else 0.0
            rows[i][1] = 1.0
            for s_start, s_end, rate in sentences:
                if s_start <= start < s_end:
                    rows[i][2] = rate
                    break
    return FeatureWindow(descriptor=descriptor, hidden_states=rows)


def synthetic_model_id(feature_dim: int, seed: int) -> str:
    return f"synthetic-enc-d{feature_dim}-s{seed}"
