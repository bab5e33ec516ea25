import json
from pathlib import Path

import numpy as np
import pytest

from spanground.corpus import DialogSample, GroundedDocument, Phrase, Section
from spanground.windowing import FeatureWindow, TokenAlignment, WindowDescriptor

DATA_DIR = Path(__file__).parent / "data"


def make_doc(sentences, doc_id="doc", domain="testing"):
    """Document whose phrases are exactly the given sentences."""
    text = ""
    phrases = []
    for i, sentence in enumerate(sentences):
        start = len(text)
        text += sentence
        phrases.append(Phrase(phrase_id=f"{doc_id}-p{i}", section_id=f"{doc_id}-s0", start=start, end=len(text)))
        text += " "
    text = text.rstrip()
    return GroundedDocument(
        doc_id=doc_id,
        domain=domain,
        text=text,
        sections=(Section(section_id=f"{doc_id}-s0", title="All", start=0, end=len(text)),),
        phrases=tuple(phrases),
    )


def make_sample(doc, phrase_idx=0, context=(("user", "hello"),), sample_id="s0"):
    phrase = doc.phrases[phrase_idx]
    return DialogSample(
        sample_id=sample_id,
        dialog_id="d0",
        doc_id=doc.doc_id,
        context=tuple(context),
        target_utterance="ok",
        reference_span=(phrase.start, phrase.end),
        reference_phrase_ids=(phrase.phrase_id,),
        is_followup=False,
    )


def toy_window(num_doc_tokens, feature_dim, query_tokens=2, rng=None, window_id="w0", char_offset=0):
    """Window with 1-char document tokens at chars offset+2i and random features."""
    n = 1 + query_tokens + 1 + num_doc_tokens + 1
    token_ids = [0] + [100 + i for i in range(query_tokens)] + [2] + [200 + i for i in range(num_doc_tokens)] + [1]
    spans = [(0, 0)] * (query_tokens + 2)
    spans += [(char_offset + 2 * i, char_offset + 2 * i + 1) for i in range(num_doc_tokens)]
    spans += [(0, 0)]
    special = [True] * (query_tokens + 2) + [False] * num_doc_tokens + [True]
    alignment = TokenAlignment(tuple(token_ids), tuple(spans), tuple(special))
    descriptor = WindowDescriptor(
        window_id=window_id, sample_id="s0", doc_id="doc", alignment=alignment, window_char_offset=char_offset
    )
    if rng is None:
        rng = np.random.default_rng(0)
    hidden = rng.normal(0.0, 1.0, size=(n, feature_dim))
    return FeatureWindow(descriptor=descriptor, hidden_states=hidden)


@pytest.fixture
def pipeline_manifest():
    return json.loads((DATA_DIR / "pipeline_manifest.json").read_text())
