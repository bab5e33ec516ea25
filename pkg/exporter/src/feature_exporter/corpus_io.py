"""Minimal reader for the corpus JSON schemas and sample extraction.

Consumes the documented external interface of the span-grounding toolkit:
``documents.json`` (doc_id, domain, text, sections, phrases) and
``dialogs.json`` (dialog_id, doc_id, turns with roles and grounding phrase
ids).  Extraction mirrors the primary pipeline: one sample per grounded
agent turn, with an ``is_followup`` flag for agent turns preceded by
another agent turn.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class ExportSample:
    sample_id: str
    doc_id: str
    context_turns: tuple[tuple[str, str], ...]
    reference_span: tuple[int, int]
    target_utterance: str
    is_followup: bool


def load_documents(path: str | Path) -> dict[str, dict]:
    docs = json.loads(Path(path).read_text(encoding="utf-8"))
    return {d["doc_id"]: d for d in docs}


def load_dialogs(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def extract_samples(
    docs_by_id: dict[str, dict], dialogs: list[dict], include_followups: bool = True
) -> list[ExportSample]:
    samples = []
    for dialog in dialogs:
        doc = docs_by_id[dialog["doc_id"]]
        phrases = {p["phrase_id"]: p for p in doc["phrases"]}
        turns = dialog["turns"]
        for idx, turn in enumerate(turns):
            if turn["role"] != "agent" or not turn.get("grounding_phrase_ids"):
                continue
            is_followup = idx > 0 and turns[idx - 1]["role"] == "agent"
            if is_followup and not include_followups:
                continue
            refs = [phrases[pid] for pid in turn["grounding_phrase_ids"]]
            samples.append(
                ExportSample(
                    sample_id=f"{dialog['dialog_id']}#t{idx}",
                    doc_id=dialog["doc_id"],
                    context_turns=tuple((t["role"], t["utterance"]) for t in turns[:idx]),
                    reference_span=(min(p["start"] for p in refs), max(p["end"] for p in refs)),
                    target_utterance=turn["utterance"],
                    is_followup=is_followup,
                )
            )
    return samples
