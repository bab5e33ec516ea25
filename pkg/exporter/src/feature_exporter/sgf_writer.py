"""Bit-exact writer for the span-grounding feature file format.

Layout (little-endian): magic b"SGF1", u32 feature_dim, u32 window count;
per window: length-prefixed UTF-8 window_id / sample_id / doc_id, u32
window_char_offset, u8 has_bos, length-prefixed u32 arrays token_ids /
char_starts / char_ends, length-prefixed u8 special_mask, then f32
hidden_states row-major.  A JSON sidecar at ``<path>.json`` carries
model_id, tokenizer fingerprint, feature_dim and window count.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .windows import ExportWindow

MAGIC = b"SGF1"


def _put_str(fh: BinaryIO, value: str) -> None:
    raw = value.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _put_array(fh: BinaryIO, values, fmt: str) -> None:
    fh.write(struct.pack("<I", len(values)))
    fh.write(struct.pack(f"<{len(values)}{fmt}", *values))


def write_features(
    path: str | Path,
    windows: Sequence[ExportWindow],
    hidden_states: Sequence[np.ndarray],
    model_id: str,
    tokenizer_fingerprint: str,
) -> None:
    if not windows:
        raise ValueError("refusing to write a feature file with zero windows")
    if len(windows) != len(hidden_states):
        raise ValueError("window/feature count mismatch")
    feature_dim = int(hidden_states[0].shape[1])

    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", feature_dim, len(windows)))
        for window, hidden in zip(windows, hidden_states):
            if hidden.shape != (len(window.token_ids), feature_dim):
                raise ValueError(f"window {window.window_id}: feature shape {hidden.shape} mismatch")
            _put_str(fh, window.window_id)
            _put_str(fh, window.sample_id)
            _put_str(fh, window.doc_id)
            fh.write(struct.pack("<IB", window.window_char_offset, int(window.has_bos)))
            _put_array(fh, window.token_ids, "I")
            _put_array(fh, [s for s, _ in window.char_spans], "I")
            _put_array(fh, [e for _, e in window.char_spans], "I")
            _put_array(fh, [int(m) for m in window.special_mask], "B")
            fh.write(np.ascontiguousarray(hidden, dtype="<f4").tobytes(order="C"))

    sidecar = {
        "model_id": model_id,
        "tokenizer_fingerprint": tokenizer_fingerprint,
        "feature_dim": feature_dim,
        "window_count": len(windows),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
