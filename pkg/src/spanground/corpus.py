"""Data model and loader for phrase-annotated documents and grounded dialogs.

Input schemas (UTF-8 JSON arrays, offsets counted in Unicode scalar values):

``documents.json``::

    [{"doc_id", "domain", "text",
      "sections": [{"section_id", "title", "start", "end"}],
      "phrases":  [{"phrase_id", "section_id", "start", "end", "text"?}]}]

``dialogs.json``::

    [{"dialog_id", "doc_id",
      "turns": [{"role": "user"|"agent", "utterance",
                 "grounding_phrase_ids": [...]}]}]

A phrase record may carry an optional ``text`` field; when present it must
round-trip to the exact document slice.  Domain strings are opaque labels.
All loaded structures are immutable and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CorpusError

ROLE_USER = "user"
ROLE_AGENT = "agent"


@dataclass(frozen=True)
class Phrase:
    """A dataset-annotated subspan of a document; the unit grounding spans are restricted to."""

    phrase_id: str
    section_id: str
    start: int
    end: int


@dataclass(frozen=True)
class Section:
    section_id: str
    title: str
    start: int
    end: int


@dataclass(frozen=True)
class GroundedDocument:
    doc_id: str
    domain: str
    text: str
    sections: tuple[Section, ...]
    phrases: tuple[Phrase, ...]

    def phrase(self, phrase_id: str) -> Phrase:
        for p in self.phrases:
            if p.phrase_id == phrase_id:
                return p
        raise KeyError(phrase_id)

    def phrase_text(self, phrase: Phrase) -> str:
        return self.text[phrase.start : phrase.end]


@dataclass(frozen=True)
class Turn:
    role: str
    utterance: str
    grounding_phrase_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class Dialog:
    dialog_id: str
    doc_id: str
    turns: tuple[Turn, ...]


@dataclass(frozen=True)
class DialogSample:
    """One agent turn with its grounding reference and full preceding context."""

    sample_id: str
    dialog_id: str
    doc_id: str
    context: tuple[tuple[str, str], ...]  # (role, utterance), oldest first
    target_utterance: str
    reference_span: tuple[int, int]
    reference_phrase_ids: tuple[str, ...]
    is_followup: bool


@dataclass
class ExtractionResult:
    samples: list[DialogSample]
    skipped: list[tuple[str, int, str]] = field(default_factory=list)  # (dialog_id, turn index, reason)


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise CorpusError(f"{where}: missing field '{key}'")
    return record[key]


def _load_json_array(path: Path, what: str) -> list:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorpusError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{what} file {path} is not valid JSON: {exc}")
    if not isinstance(data, list):
        raise CorpusError(f"{what} file {path}: expected a top-level array")
    return data


def _parse_document(record: dict, where: str) -> GroundedDocument:
    doc_id = _require(record, "doc_id", where)
    text = _require(record, "text", where)
    domain = _require(record, "domain", where)
    if not isinstance(text, str):
        raise CorpusError(f"{where}.text: expected string (doc_id={doc_id!r})")

    sections = []
    section_ids = set()
    for j, sec in enumerate(record.get("sections", [])):
        sw = f"{where}.sections[{j}]"
        section = Section(
            section_id=_require(sec, "section_id", sw),
            title=_require(sec, "title", sw),
            start=int(_require(sec, "start", sw)),
            end=int(_require(sec, "end", sw)),
        )
        if not (0 <= section.start <= section.end <= len(text)):
            raise CorpusError(
                f"{sw}: range ({section.start}, {section.end}) out of bounds for "
                f"doc_id={doc_id!r} of length {len(text)}"
            )
        sections.append(section)
        section_ids.add(section.section_id)

    phrases = []
    seen_phrase_ids = set()
    for j, ph in enumerate(record.get("phrases", [])):
        pw = f"{where}.phrases[{j}]"
        phrase = Phrase(
            phrase_id=_require(ph, "phrase_id", pw),
            section_id=_require(ph, "section_id", pw),
            start=int(_require(ph, "start", pw)),
            end=int(_require(ph, "end", pw)),
        )
        if phrase.phrase_id in seen_phrase_ids:
            raise CorpusError(f"{pw}.phrase_id: duplicate id {phrase.phrase_id!r} in doc_id={doc_id!r}")
        seen_phrase_ids.add(phrase.phrase_id)
        if phrase.section_id not in section_ids:
            raise CorpusError(f"{pw}.section_id: unknown section {phrase.section_id!r} in doc_id={doc_id!r}")
        if not (0 <= phrase.start < phrase.end <= len(text)):
            raise CorpusError(
                f"{pw}: range ({phrase.start}, {phrase.end}) out of bounds for "
                f"doc_id={doc_id!r} of length {len(text)}"
            )
        if not text[phrase.start : phrase.end]:
            raise CorpusError(f"{pw}: empty text slice for phrase {phrase.phrase_id!r}")
        stored_text = ph.get("text")
        if stored_text is not None and stored_text != text[phrase.start : phrase.end]:
            raise CorpusError(
                f"{pw}.text: stored text does not round-trip to slice "
                f"({phrase.start}, {phrase.end}) of doc_id={doc_id!r}"
            )
        phrases.append(phrase)

    return GroundedDocument(
        doc_id=doc_id, domain=domain, text=text, sections=tuple(sections), phrases=tuple(phrases)
    )


def _parse_dialog(record: dict, where: str, docs_by_id: dict[str, GroundedDocument]) -> Dialog:
    dialog_id = _require(record, "dialog_id", where)
    doc_id = _require(record, "doc_id", where)
    if doc_id not in docs_by_id:
        raise CorpusError(f"{where}.doc_id: unknown document {doc_id!r} (dialog_id={dialog_id!r})")
    doc = docs_by_id[doc_id]
    known_phrases = {p.phrase_id for p in doc.phrases}
    turns = []
    for j, turn in enumerate(_require(record, "turns", where)):
        tw = f"{where}.turns[{j}]"
        role = _require(turn, "role", tw)
        if role not in (ROLE_USER, ROLE_AGENT):
            raise CorpusError(f"{tw}.role: expected 'user' or 'agent', got {role!r}")
        grounding = tuple(turn.get("grounding_phrase_ids", []))
        for pid in grounding:
            if pid not in known_phrases:
                raise CorpusError(f"{tw}.grounding_phrase_ids: unknown phrase {pid!r} in doc {doc_id!r}")
        turns.append(Turn(role=role, utterance=_require(turn, "utterance", tw), grounding_phrase_ids=grounding))
    return Dialog(dialog_id=dialog_id, doc_id=doc_id, turns=tuple(turns))


def load_corpus(doc_file: str | Path, dialog_file: str | Path) -> tuple[list[GroundedDocument], list[Dialog]]:
    """Load and validate documents and dialogs; raises CorpusError naming field and record."""
    docs = [_parse_document(rec, f"documents[{i}]") for i, rec in enumerate(_load_json_array(Path(doc_file), "documents"))]
    docs_by_id = {}
    for doc in docs:
        if doc.doc_id in docs_by_id:
            raise CorpusError(f"documents: duplicate doc_id {doc.doc_id!r}")
        docs_by_id[doc.doc_id] = doc
    dialogs = [
        _parse_dialog(rec, f"dialogs[{i}]", docs_by_id)
        for i, rec in enumerate(_load_json_array(Path(dialog_file), "dialogs"))
    ]
    return docs, dialogs


def minimal_cover(doc: GroundedDocument, phrase_ids: tuple[str, ...], strict_contiguous: bool = False) -> tuple[int, int]:
    """Smallest character range covering every referenced phrase.

    With ``strict_contiguous`` the referenced phrases must tile the cover up
    to whitespace; otherwise gaps are silently covered.
    """
    phrases = [doc.phrase(pid) for pid in phrase_ids]
    ranges = sorted((p.start, p.end) for p in phrases)
    start, end = ranges[0][0], max(r[1] for r in ranges)
    if strict_contiguous:
        covered_to = ranges[0][1]
        for r_start, r_end in ranges[1:]:
            if r_start > covered_to and doc.text[covered_to:r_start].strip():
                raise CorpusError(
                    f"non-contiguous grounding phrases {list(phrase_ids)!r} in doc {doc.doc_id!r}: "
                    f"gap ({covered_to}, {r_start}) contains text"
                )
            covered_to = max(covered_to, r_end)
    return start, end


def extract_samples(
    docs: list[GroundedDocument],
    dialogs: list[Dialog],
    include_followups: bool = True,
    strict_contiguous: bool = False,
) -> ExtractionResult:
    """One sample per grounded agent turn; context is every turn strictly before it.

    A turn is a follow-up when the immediately preceding turn was also taken
    by the agent; ``include_followups=False`` drops those samples.  Agent
    turns without grounding annotation are skipped and reported.
    """
    docs_by_id = {d.doc_id: d for d in docs}
    result = ExtractionResult(samples=[])
    for dialog in dialogs:
        doc = docs_by_id[dialog.doc_id]
        for idx, turn in enumerate(dialog.turns):
            if turn.role != ROLE_AGENT:
                continue
            if not turn.grounding_phrase_ids:
                result.skipped.append((dialog.dialog_id, idx, "agent turn without grounding reference"))
                continue
            is_followup = idx > 0 and dialog.turns[idx - 1].role == ROLE_AGENT
            if is_followup and not include_followups:
                continue
            span = minimal_cover(doc, turn.grounding_phrase_ids, strict_contiguous=strict_contiguous)
            result.samples.append(
                DialogSample(
                    sample_id=f"{dialog.dialog_id}#t{idx}",
                    dialog_id=dialog.dialog_id,
                    doc_id=dialog.doc_id,
                    context=tuple((t.role, t.utterance) for t in dialog.turns[:idx]),
                    target_utterance=turn.utterance,
                    reference_span=span,
                    reference_phrase_ids=turn.grounding_phrase_ids,
                    is_followup=is_followup,
                )
            )
    return result


def partition_by_domain(docs: list[GroundedDocument]) -> dict[str, list[str]]:
    """doc_ids grouped per domain label, each group in corpus order."""
    out: dict[str, list[str]] = {}
    for doc in docs:
        out.setdefault(doc.domain, []).append(doc.doc_id)
    return out


# --- sample (de)serialization used by the CLI pipeline ---

def samples_to_json(result: ExtractionResult, docs: list[GroundedDocument]) -> list[dict]:
    docs_by_id = {d.doc_id: d for d in docs}
    records = []
    for s in result.samples:
        doc = docs_by_id[s.doc_id]
        records.append(
            {
                "sample_id": s.sample_id,
                "dialog_id": s.dialog_id,
                "doc_id": s.doc_id,
                "context": [list(turn) for turn in s.context],
                "target_utterance": s.target_utterance,
                "reference_span": list(s.reference_span),
                "reference_text": doc.text[s.reference_span[0] : s.reference_span[1]],
                "reference_phrase_ids": list(s.reference_phrase_ids),
                "is_followup": s.is_followup,
            }
        )
    return records


def samples_from_json(records: list[dict]) -> list[DialogSample]:
    return [
        DialogSample(
            sample_id=r["sample_id"],
            dialog_id=r["dialog_id"],
            doc_id=r["doc_id"],
            context=tuple((role, utt) for role, utt in r["context"]),
            target_utterance=r["target_utterance"],
            reference_span=tuple(r["reference_span"]),
            reference_phrase_ids=tuple(r["reference_phrase_ids"]),
            is_followup=r["is_followup"],
        )
        for r in records
    ]
