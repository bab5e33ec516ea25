"""Synthetic fixture corpora, toy generation models and pipeline configs.

All fixtures are deterministic hand-authored content in the documented
corpus schema, sized so the full pipeline runs in seconds on one core.
Three corpora are provided:

``separable``   one document with two phrases whose content words are
                disjoint; every query echoes its phrase, so a linear head
                can reach perfect span accuracy.
``pipeline``    four single-document domains, agent follow-up turns, a
                trailing user turn and one ungrounded agent turn.
``adversarial`` a document whose query keyword also occurs outside every
                phrase, so unrestricted decoding is drawn off the phrase
                inventory.
"""

from __future__ import annotations

import json
from pathlib import Path

from .metrics import normalize_tokens

EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"
RESPONSE_LENGTH = 6


def _doc_record(doc_id: str, domain: str, sections: list[tuple[str, list[str]]]) -> dict:
    """Assemble a document from (section title, phrase sentences) blocks."""
    text = ""
    section_records = []
    phrase_records = []
    for s_idx, (title, sentences) in enumerate(sections):
        section_id = f"{doc_id}-s{s_idx}"
        section_start = len(text)
        text += f"{title}. "
        for p_idx, sentence in enumerate(sentences):
            start = len(text)
            text += sentence
            phrase_records.append(
                {
                    "phrase_id": f"{doc_id}-s{s_idx}-p{p_idx}",
                    "section_id": section_id,
                    "start": start,
                    "end": len(text),
                    "text": sentence,
                }
            )
            text += " "
        section_records.append(
            {
                "section_id": section_id,
                "title": title,
                "start": section_start,
                "end": len(text.rstrip()),
            }
        )
    return {
        "doc_id": doc_id,
        "domain": domain,
        "text": text.rstrip(),
        "sections": section_records,
        "phrases": phrase_records,
    }


def response_template(phrase_text: str) -> list[str]:
    """Deterministic response tokens for a grounding phrase: its first
    distinct normalized words, loop-free so a bigram chain reproduces them."""
    seen = []
    for token in normalize_tokens(phrase_text):
        if token not in seen:
            seen.append(token)
        if len(seen) == RESPONSE_LENGTH:
            break
    return seen


def query_for(phrase_text: str) -> str:
    """A user utterance echoing the phrase's content words."""
    skip = {"you", "can", "a", "an", "the"}
    words = [w for w in normalize_tokens(phrase_text) if w not in skip]
    return "how do i " + " ".join(words)


def _dialog(dialog_id: str, doc_id: str, turns: list[dict]) -> dict:
    return {"dialog_id": dialog_id, "doc_id": doc_id, "turns": turns}


def _user(utterance: str) -> dict:
    return {"role": "user", "utterance": utterance, "grounding_phrase_ids": []}


def _agent(doc: dict, phrase_id: str) -> dict:
    phrase = next(p for p in doc["phrases"] if p["phrase_id"] == phrase_id)
    return {
        "role": "agent",
        "utterance": " ".join(response_template(phrase["text"])),
        "grounding_phrase_ids": [phrase_id],
    }


def toy_model_spec(docs: list[dict]) -> dict:
    """Bigram conditional tables reproducing each phrase's template response."""
    vocab = {EOS_TOKEN, UNK_TOKEN}
    tables: dict[str, dict[str, float]] = {"*": {UNK_TOKEN: 0.6, EOS_TOKEN: 0.4}}
    for doc in docs:
        for phrase in doc["phrases"]:
            grounding = phrase["text"]
            tokens = response_template(grounding)
            vocab.update(tokens)
            chain = [""] + tokens
            for prev, nxt in zip(chain, chain[1:]):
                tables[f"{grounding}||{prev}"] = {nxt: 1.0}
            tables[f"{grounding}||{tokens[-1]}"] = {EOS_TOKEN: 1.0}
    return {"vocab": sorted(vocab), "eos": EOS_TOKEN, "context_order": 1, "tables": tables}


# --- separable two-phrase corpus -------------------------------------------

def separable_corpus() -> tuple[list[dict], list[dict]]:
    doc = _doc_record(
        "services-guide",
        "services",
        [
            ("Renewal portal", ["You can renew a standard license online using the renewal portal."]),
            ("Office payments", ["You can pay a parking fine in person at the downtown payment office."]),
        ],
    )
    queries = {
        "services-guide-s0-p0": [
            "can i renew my standard license online using the renewal portal",
            "i want to renew a standard license online using the renewal portal",
            "renew standard license online renewal portal",
            "help me renew my standard license online using the renewal portal today",
        ],
        "services-guide-s1-p0": [
            "how can i pay a parking fine in person at the downtown payment office",
            "i need to pay my parking fine in person at the downtown payment office",
            "pay parking fine in person downtown payment office",
            "where do i pay a parking fine in person at the downtown payment office",
        ],
    }
    dialogs = []
    i = 0
    for phrase_id, variants in queries.items():
        for query in variants:
            dialogs.append(
                _dialog(f"sep-d{i}", doc["doc_id"], [_user(query), _agent(doc, phrase_id)])
            )
            i += 1
    return [doc], dialogs


# --- four-domain pipeline corpus --------------------------------------------

_PIPELINE_DOCS = [
    (
        "parks-guide",
        "parks",
        [
            (
                "Reservations",
                [
                    "You can reserve a picnic shelter online through the reservation portal.",
                    "Group events above fifty guests require a special permit from the rangers.",
                ],
            ),
            (
                "Hours and fees",
                [
                    "The main gate opens at sunrise and closes at dusk every day.",
                    "Parking costs three dollars per vehicle on summer weekends.",
                ],
            ),
        ],
    ),
    (
        "library-guide",
        "library",
        [
            (
                "Cards",
                [
                    "Residents receive a free library card with proof of address.",
                    "Lost cards carry a small replacement charge at the front desk.",
                ],
            ),
            (
                "Borrowing",
                [
                    "Most books may be borrowed for three weeks at a time.",
                    "Digital audiobooks return themselves automatically at the due date.",
                ],
            ),
        ],
    ),
    (
        "transit-guide",
        "transit",
        [
            (
                "Fares",
                [
                    "A monthly transit pass covers unlimited rides on buses and trains.",
                    "Seniors ride at half fare with a valid reduced fare card.",
                ],
            ),
            (
                "Service",
                [
                    "Night routes run hourly between midnight and five in the morning.",
                    "Route changes are posted two weeks before they take effect.",
                ],
            ),
        ],
    ),
    (
        "permits-guide",
        "permits",
        [
            (
                "Building",
                [
                    "Small sheds under one hundred square feet need no building permit.",
                    "Fence projects taller than six feet require an engineering review.",
                ],
            ),
            (
                "Renewal",
                [
                    "Contractor licenses must be renewed every two years before March.",
                    "Expired permits can be reinstated within ninety days for a fee.",
                ],
            ),
        ],
    ),
]


def pipeline_corpus() -> tuple[list[dict], list[dict]]:
    docs = [_doc_record(doc_id, domain, sections) for doc_id, domain, sections in _PIPELINE_DOCS]
    dialogs = []
    for doc in docs:
        doc_id = doc["doc_id"]
        p = [rec["phrase_id"] for rec in doc["phrases"]]
        texts = {rec["phrase_id"]: rec["text"] for rec in doc["phrases"]}
        # plain exchange, follow-up pair (the second agent turn continues with
        # extra information the user never asked for), and a trailing user turn
        dialogs.append(_dialog(f"{doc_id}-d0", doc_id, [_user(query_for(texts[p[0]])), _agent(doc, p[0])]))
        dialogs.append(
            _dialog(
                f"{doc_id}-d1",
                doc_id,
                [_user(query_for(texts[p[1]])), _agent(doc, p[1]), _agent(doc, p[2])],
            )
        )
        dialogs.append(
            _dialog(
                f"{doc_id}-d2",
                doc_id,
                [_user(query_for(texts[p[3]])), _agent(doc, p[3]), _user("thanks that helps")],
            )
        )
    # one agent turn without grounding annotation: skipped at extraction
    dialogs.append(
        _dialog(
            "parks-guide-d3",
            "parks-guide",
            [
                _user("hello are you there"),
                {"role": "agent", "utterance": "hello how can i help", "grounding_phrase_ids": []},
            ],
        )
    )
    return docs, dialogs


# --- adversarial corpus for the restriction ablation -------------------------

def adversarial_corpus() -> tuple[list[dict], list[dict]]:
    """The query keyword 'voucher' occurs before any phrase; with restriction
    off, boundary scores are drawn to the distractor occurrences."""
    doc_id = "refunds-guide"
    intro = "voucher voucher holders read this first. "
    phrase = "Submit the voucher refund form before the end of the month."
    other = "Walk in appointments are handled at the service window daily."
    text = intro + phrase + " " + other
    doc = {
        "doc_id": doc_id,
        "domain": "refunds",
        "text": text,
        "sections": [{"section_id": f"{doc_id}-s0", "title": "Refunds", "start": 0, "end": len(text)}],
        "phrases": [
            {
                "phrase_id": f"{doc_id}-p0",
                "section_id": f"{doc_id}-s0",
                "start": len(intro),
                "end": len(intro) + len(phrase),
                "text": phrase,
            },
            {
                "phrase_id": f"{doc_id}-p1",
                "section_id": f"{doc_id}-s0",
                "start": len(intro) + len(phrase) + 1,
                "end": len(text),
                "text": other,
            },
        ],
    }
    dialogs = [
        _dialog(
            f"{doc_id}-d0",
            doc_id,
            [
                _user("where do i submit the voucher refund form"),
                {
                    "role": "agent",
                    "utterance": " ".join(response_template(phrase)),
                    "grounding_phrase_ids": [f"{doc_id}-p0"],
                },
            ],
        )
    ]
    return [doc], dialogs


_KINDS = {
    "separable": separable_corpus,
    "pipeline": pipeline_corpus,
    "adversarial": adversarial_corpus,
}


def fixture_manifest(docs: list[dict], dialogs: list[dict]) -> dict:
    domains: dict[str, list[str]] = {}
    for doc in docs:
        domains.setdefault(doc["domain"], []).append(doc["doc_id"])
    return {
        "domains": domains,
        "n_documents": len(docs),
        "n_dialogs": len(dialogs),
        "n_phrases": sum(len(d["phrases"]) for d in docs),
    }


def default_config(kind: str) -> dict:
    return {
        "paths": {"documents": "documents.json", "dialogs": "dialogs.json", "workdir": "."},
        "windowing": {"max_len": 64, "stride": 32},
        "featurizer": {"feature_dim": 16, "seed": 0},
        "head": {
            "kind": "independent",
            "restricted": True,
            "lr": 1.0,
            "epochs": 80,
            "batch_size": 8,
            "seed": 13,
            "clip_norm": 1.0,
            "momentum": 0.0,
        },
        "decode": {"n_best": 20},
        "ensemble": {"members": [], "n": 20},
        "generation": {
            "mode": "predicted_span",
            "beam": 4,
            "rep_penalty": 1.0,
            "marginalize_k": 1,
            "max_len": 32,
            "max_input_tokens": None,
        },
        "toy_model": "toy_model.json",
    }


def write_fixture(out_dir: str | Path, kind: str) -> dict:
    """Emit documents.json, dialogs.json, toy_model.json, manifest and config."""
    if kind not in _KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}; choose from {sorted(_KINDS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs, dialogs = _KINDS[kind]()

    def dump(name: str, payload) -> None:
        (out / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    dump("documents.json", docs)
    dump("dialogs.json", dialogs)
    dump("toy_model.json", toy_model_spec(docs))
    manifest = fixture_manifest(docs, dialogs)
    dump("fixture_manifest.json", manifest)
    dump("config.json", default_config(kind))
    return manifest
