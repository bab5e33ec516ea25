"""Document-level n-best span decoding and Bayesian Model Averaging.

Window scores are merged into one span space by mapping token pairs to
absolute character spans.  A span scored by several overlapping windows
keeps its maximum log-probability (a sum-of-probabilities rule is available
behind a flag).  The BOS fallback pair is never emitted as a hypothesis.

Model ensembling marginalizes the joint probability of span and model:
``p(span) = sum_m p_m(span) * prior(m)`` with the model prior obtained by a
softmax over the logarithm of each member's validation F1.  Spans absent
from a member's n-best list contribute zero for that member; member lists
are renormalized before mixing so each is a proper distribution over its
own support.

Ordering everywhere: log-probability descending, then (start, end)
ascending.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NoDecodableSpanError
from .numerics import NEG_INF, logsumexp
from .span_heads import Head, RestrictionMask, pair_distribution
from .windowing import BOS_SPAN, FeatureWindow, token_pair_char_span


@dataclass(frozen=True)
class SpanHypothesis:
    char_span: tuple[int, int]
    logprob: float
    phrase_ids: tuple[str, ...] = ()
    source_window: str | None = None
    text: str | None = None


@dataclass(frozen=True)
class SpanPosterior:
    hypotheses: tuple[SpanHypothesis, ...]
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.hypotheses)

    def top(self) -> SpanHypothesis:
        return self.hypotheses[0]

    def probabilities(self) -> np.ndarray:
        return np.exp(np.asarray([h.logprob for h in self.hypotheses]))


def _sort_key(hyp: SpanHypothesis):
    return (-hyp.logprob, hyp.char_span[0], hyp.char_span[1])


def _finalize(hyps: list[SpanHypothesis], n: int) -> SpanPosterior:
    """Sort under the documented tie-break, truncate to n, renormalize."""
    hyps = sorted(hyps, key=_sort_key)[:n]
    norm = logsumexp(np.asarray([h.logprob for h in hyps]))
    out = tuple(replace(h, logprob=h.logprob - norm) for h in hyps)
    return SpanPosterior(hypotheses=out, normalized=True)


def decode_document(
    head: Head,
    windows: Sequence[FeatureWindow],
    masks: Sequence[RestrictionMask],
    n: int,
    restricted: bool = True,
    duplicate_rule: str = "max",
    doc_text: str | None = None,
) -> SpanPosterior:
    """Top-n distinct character spans across all windows of one sample.

    ``masks`` aligns with ``windows``; candidate spans are each mask's valid
    pairs.  ``restricted`` selects the independent head's softmax support
    (the biaffine head always normalizes over the mask's pairs).
    """
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    if len(windows) != len(masks):
        raise ConfigurationError("windows and masks must align")
    if duplicate_rule not in ("max", "sum"):
        raise ConfigurationError(f"unknown duplicate rule {duplicate_rule!r}")

    best: dict[tuple[int, int], SpanHypothesis] = {}
    for window, mask in zip(windows, masks):
        dist = pair_distribution(head, window, mask, restricted=restricted)
        for pair, logprob in zip(dist.pairs, dist.logprobs):
            if pair == BOS_SPAN:
                continue
            span = token_pair_char_span(window.descriptor, pair)
            candidate = SpanHypothesis(
                char_span=span,
                logprob=float(logprob),
                phrase_ids=mask.pair_phrases.get(pair, ()),
                source_window=window.window_id,
            )
            seen = best.get(span)
            if seen is None:
                best[span] = candidate
            elif duplicate_rule == "max":
                if candidate.logprob > seen.logprob:
                    best[span] = candidate
            else:
                best[span] = replace(
                    seen,
                    logprob=float(np.logaddexp(seen.logprob, candidate.logprob)),
                    phrase_ids=seen.phrase_ids or candidate.phrase_ids,
                )
    if not best:
        raise NoDecodableSpanError("no window offered a decodable phrase pair")

    posterior = _finalize(list(best.values()), n)
    if doc_text is not None:
        posterior = SpanPosterior(
            hypotheses=tuple(
                replace(h, text=doc_text[h.char_span[0] : h.char_span[1]]) for h in posterior.hypotheses
            ),
            normalized=True,
        )
    return posterior


def nbest_oracle(
    head: Head,
    windows: Sequence[FeatureWindow],
    masks: Sequence[RestrictionMask],
    n: int,
    restricted: bool = True,
) -> SpanPosterior:
    """Exhaustive reference decoder: plain loops and scalar math, no shortcuts.

    Enumerates every valid pair of every window, keeps the max per span,
    sorts the full list and renormalizes the top n itself (it shares only
    the per-window scoring with decode_document, whose combination logic it
    exists to verify).
    """
    import math

    scored: dict[tuple[int, int], float] = {}
    meta: dict[tuple[int, int], tuple[tuple[str, ...], str]] = {}
    for window, mask in zip(windows, masks):
        dist = pair_distribution(head, window, mask, restricted=restricted)
        table = dist.as_dict()
        for pair in mask.valid_pairs:
            if pair == BOS_SPAN:
                continue
            span = token_pair_char_span(window.descriptor, pair)
            lp = table[pair]
            if span not in scored or lp > scored[span]:
                scored[span] = lp
                meta[span] = (mask.pair_phrases.get(pair, ()), window.window_id)
    if not scored:
        raise NoDecodableSpanError("no window offered a decodable phrase pair")
    ranked = sorted(scored.items(), key=lambda item: (-item[1], item[0][0], item[0][1]))[:n]
    peak = max(lp for _, lp in ranked)
    norm = peak + math.log(sum(math.exp(lp - peak) for _, lp in ranked))
    return SpanPosterior(
        hypotheses=tuple(
            SpanHypothesis(
                char_span=span,
                logprob=lp - norm,
                phrase_ids=meta[span][0],
                source_window=meta[span][1],
            )
            for span, lp in ranked
        ),
        normalized=True,
    )


# --- Bayesian Model Averaging ----------------------------------------------

@dataclass(frozen=True)
class EnsembleMember:
    model_id: str
    validation_f1: float


@dataclass(frozen=True)
class EnsembleConfig:
    members: tuple[EnsembleMember, ...]
    priors: tuple[float, ...] = field(init=False, default=())

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("ensemble needs at least one member")
        for m in self.members:
            if m.validation_f1 <= 0:
                raise ConfigurationError(
                    f"member {m.model_id!r}: validation F1 must be positive to take its logarithm"
                )
        object.__setattr__(self, "priors", tuple(model_priors([m.validation_f1 for m in self.members])))

    @classmethod
    def from_json(cls, path: str | Path) -> tuple["EnsembleConfig", int]:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        members = tuple(EnsembleMember(m["model_id"], float(m["f1"])) for m in data["members"])
        return cls(members=members), int(data.get("n", 20))


def model_priors(f1_scores: Sequence[float]) -> np.ndarray:
    """Softmax over the logarithm of validation F1 scores."""
    scores = np.asarray(f1_scores, dtype=np.float64)
    if np.any(scores <= 0):
        raise ConfigurationError("F1 scores must be positive to take their logarithm")
    logits = np.log(scores)
    weights = np.exp(logits - np.max(logits))
    return weights / weights.sum()


def bma_ensemble(
    posteriors: Sequence[SpanPosterior],
    config: EnsembleConfig,
    n: int,
) -> SpanPosterior:
    """Mix member span posteriors under the model prior, truncate and renormalize."""
    if len(posteriors) != len(config.members):
        raise ConfigurationError(
            f"{len(posteriors)} posteriors for {len(config.members)} ensemble members"
        )
    mixed: dict[tuple[int, int], float] = {}
    texts: dict[tuple[int, int], str | None] = {}
    phrase_ids: dict[tuple[int, int], tuple[str, ...]] = {}
    for posterior, prior in zip(posteriors, config.priors):
        hyps = posterior.hypotheses
        if not posterior.normalized:
            norm = logsumexp(np.asarray([h.logprob for h in hyps]))
            hyps = tuple(replace(h, logprob=h.logprob - norm) for h in hyps)
        log_prior = float(np.log(prior))
        for h in hyps:
            weighted = h.logprob + log_prior
            prev = mixed.get(h.char_span, NEG_INF)
            mixed[h.char_span] = float(np.logaddexp(prev, weighted))
            if h.text is not None:
                texts.setdefault(h.char_span, h.text)
            if h.phrase_ids:
                phrase_ids.setdefault(h.char_span, h.phrase_ids)
    if not mixed:
        raise DataError("ensemble over empty member posteriors")
    hyps = [
        SpanHypothesis(
            char_span=span,
            logprob=lp,
            phrase_ids=phrase_ids.get(span, ()),
            source_window=None,
            text=texts.get(span),
        )
        for span, lp in mixed.items()
    ]
    return _finalize(hyps, n)


# --- n-best JSON interchange -------------------------------------------------

def nbest_to_json(sample_id: str, posterior: SpanPosterior) -> dict:
    return {
        "sample_id": sample_id,
        "hypotheses": [
            {
                "start": h.char_span[0],
                "end": h.char_span[1],
                "text": h.text if h.text is not None else "",
                "logprob": h.logprob,
            }
            for h in posterior.hypotheses
        ],
    }


def write_nbest_file(path: str | Path, entries: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps(list(entries), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_nbest_file(path: str | Path) -> dict[str, SpanPosterior]:
    """sample_id -> posterior, preserving file order of hypotheses."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"n-best file not found: {path} (produce it with the decode command)")
    data = json.loads(path.read_text(encoding="utf-8"))
    out: dict[str, SpanPosterior] = {}
    for record in data:
        hyps = tuple(
            SpanHypothesis(
                char_span=(int(h["start"]), int(h["end"])),
                logprob=float(h["logprob"]),
                text=h.get("text"),
            )
            for h in record["hypotheses"]
        )
        out[record["sample_id"]] = SpanPosterior(hypotheses=hyps, normalized=True)
    return out
