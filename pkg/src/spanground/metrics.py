"""Evaluation metrics: normalized exact match, token F1, EM@k and corpus BLEU.

Span metrics normalize both sides first: lowercase, strip Unicode
punctuation, drop the articles a/an/the, collapse whitespace.  F1 is the
bag-of-tokens precision/recall harmonic mean, averaged per turn.

BLEU follows the SacreBLEU defaults: mteval-13a tokenization, clipped
n-gram precisions up to order 4 aggregated at corpus level, geometric mean,
exponential brevity penalty, no smoothing (a zero precision zeroes the
score).  The pinned signature makes reported scores reproducible.
"""

from __future__ import annotations

import math
import re
import unicodedata
from collections import Counter
from typing import Iterable, Sequence

from .errors import DataError
from .span_decoding import SpanPosterior

_ARTICLES = frozenset({"a", "an", "the"})

BLEU_MAX_ORDER = 4
BLEU_SIGNATURE = "bleu|nrefs:1|case:mixed|tok:13a|smooth:none|order:4|corpus:sum"


def normalize_tokens(text: str) -> list[str]:
    """Lowercased tokens with Unicode punctuation and articles removed; idempotent."""
    lowered = text.lower()
    stripped = "".join(ch for ch in lowered if not unicodedata.category(ch).startswith("P"))
    return [tok for tok in stripped.split() if tok not in _ARTICLES]


def exact_match(prediction: str, reference: str) -> int:
    """1 iff the normalized token sequences are equal (no stemming)."""
    return int(normalize_tokens(prediction) == normalize_tokens(reference))


def token_f1(prediction: str, reference: str) -> float:
    pred = normalize_tokens(prediction)
    ref = normalize_tokens(reference)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def em_at_k(nbest: SpanPosterior | Iterable[str], reference: str, k: int = 5) -> int:
    """1 iff any of the top-k candidate texts is an exact match."""
    if isinstance(nbest, SpanPosterior):
        candidates = [h.text if h.text is not None else "" for h in nbest.hypotheses]
    else:
        candidates = list(nbest)
    return int(any(exact_match(c, reference) for c in candidates[:k]))


# --- corpus BLEU --------------------------------------------------------------

_13A_RULES = (
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
    (re.compile(r"\s+"), r" "),
)


def tokenize_13a(line: str) -> list[str]:
    """mteval-v13a tokenization (the WMT/SacreBLEU default)."""
    norm = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in norm:
        norm = (
            norm.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
        )
    norm = f" {norm} "
    for pattern, repl in _13A_RULES:
        norm = pattern.sub(repl, norm)
    return norm.strip().split()


def _ngram_counts(tokens: Sequence[str], max_order: int) -> Counter:
    counts: Counter = Counter()
    for order in range(1, max_order + 1):
        for i in range(len(tokens) - order + 1):
            counts[tuple(tokens[i : i + order])] += 1
    return counts


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus-level BLEU in [0, 100]; raises on an empty corpus."""
    if len(hypotheses) == 0:
        raise DataError("BLEU over an empty corpus")
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses for {len(references)} references")

    correct = [0] * BLEU_MAX_ORDER
    total = [0] * BLEU_MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_tokens = tokenize_13a(hyp.rstrip())
        ref_tokens = tokenize_13a(ref.rstrip())
        hyp_len += len(hyp_tokens)
        ref_len += len(ref_tokens)
        ref_counts = _ngram_counts(ref_tokens, BLEU_MAX_ORDER)
        for ngram, count in _ngram_counts(hyp_tokens, BLEU_MAX_ORDER).items():
            order = len(ngram)
            correct[order - 1] += min(count, ref_counts.get(ngram, 0))
            total[order - 1] += count

    precisions = []
    for n in range(BLEU_MAX_ORDER):
        if total[n] == 0:
            precisions.append(0.0)
        else:
            precisions.append(correct[n] / total[n])
    if any(p == 0.0 for p in precisions):
        return 0.0

    if hyp_len == 0:
        return 0.0
    brevity_penalty = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    geo_mean = math.exp(sum(math.log(p) for p in precisions) / BLEU_MAX_ORDER)
    return 100.0 * brevity_penalty * geo_mean


# --- evaluation report ---------------------------------------------------------

def evaluation_report(
    predictions: Sequence[str],
    references: Sequence[str],
    nbest_lists: Sequence[Sequence[str]] | None = None,
    responses: Sequence[str] | None = None,
    response_references: Sequence[str] | None = None,
) -> dict:
    """Percent-scaled EM / F1 / EM@5 over spans plus BLEU over responses."""
    if len(predictions) != len(references):
        raise DataError("prediction/reference count mismatch")
    if len(predictions) == 0:
        raise DataError("evaluation over zero samples")
    n = len(predictions)
    em = sum(exact_match(p, r) for p, r in zip(predictions, references)) / n
    f1 = sum(token_f1(p, r) for p, r in zip(predictions, references)) / n
    report = {
        "n_samples": n,
        "em": 100.0 * em,
        "f1": 100.0 * f1,
        "bleu_signature": BLEU_SIGNATURE,
    }
    if nbest_lists is not None:
        if len(nbest_lists) != n:
            raise DataError("n-best list count mismatch")
        report["em_at_5"] = 100.0 * sum(
            em_at_k(cands, ref, k=5) for cands, ref in zip(nbest_lists, references)
        ) / n
    if responses is not None:
        if response_references is None:
            raise DataError("responses given without response references")
        report["bleu"] = corpus_bleu(responses, response_references)
    return report
