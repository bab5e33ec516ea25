"""Feature export orchestration: corpus -> windows -> encoder -> feature file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .corpus_io import extract_samples, load_dialogs, load_documents
from .encoder import encode_windows, load_encoder, tokenizer_fingerprint
from .sgf_writer import write_features
from .windows import build_windows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExportManifest:
    model_id: str
    tokenizer_fingerprint: str
    feature_dim: int
    window_params: dict
    corpus_hashes: dict

    def write(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def export_features(
    documents_path: str | Path,
    dialogs_path: str | Path,
    model_dir: str | Path,
    out_path: str | Path,
    max_len: int = 128,
    stride: int = 32,
    include_followups: bool = True,
    batch_size: int = 8,
    model_id: str | None = None,
) -> ExportManifest:
    """Run the frozen encoder over every sample's windows and write the
    feature file plus its manifest; returns the manifest."""
    docs_by_id = load_documents(documents_path)
    dialogs = load_dialogs(dialogs_path)
    samples = extract_samples(docs_by_id, dialogs, include_followups=include_followups)
    if not samples:
        raise ValueError("no grounded agent turns found in the dialogs")

    model, tokenizer = load_encoder(model_dir)
    windows = []
    for sample in samples:
        doc_text = docs_by_id[sample.doc_id]["text"]
        new_windows = build_windows(sample, doc_text, tokenizer, max_len, stride)
        _check_alignment(new_windows, doc_text, tokenizer)
        windows.extend(new_windows)

    hidden = encode_windows(model, [list(w.token_ids) for w in windows], batch_size=batch_size)
    feature_dim = int(hidden[0].shape[1])
    resolved_model_id = model_id or f"hf:{Path(model_dir).name}-d{feature_dim}"
    fingerprint = tokenizer_fingerprint(model_dir)
    write_features(out_path, windows, hidden, resolved_model_id, fingerprint)

    manifest = ExportManifest(
        model_id=resolved_model_id,
        tokenizer_fingerprint=fingerprint,
        feature_dim=feature_dim,
        window_params={"max_len": max_len, "stride": stride, "include_followups": include_followups},
        corpus_hashes={
            "documents": _sha256(documents_path),
            "dialogs": _sha256(dialogs_path),
        },
    )
    manifest.write(str(out_path) + ".manifest.json")
    log.info(
        "exported %d windows for %d samples (dim=%d) -> %s",
        len(windows), len(samples), feature_dim, out_path,
    )
    return manifest


def _check_alignment(windows, doc_text: str, tokenizer) -> None:
    """Every document token's char span must round-trip to its surface form."""
    for window in windows:
        for i, masked in enumerate(window.special_mask):
            if masked:
                continue
            start, end = window.char_spans[i]
            surface = doc_text[start:end]
            piece = tokenizer.convert_ids_to_tokens([window.token_ids[i]])[0]
            if piece == tokenizer.unk_token:
                continue  # unknown pieces cannot be compared textually
            if piece.replace("##", "").lower() != surface.lower():
                raise ValueError(
                    f"window {window.window_id}: token {i} piece {piece!r} does not "
                    f"round-trip to document slice {surface!r} at ({start}, {end})"
                )
