"""Grounded response generation: input construction, beam search, span mixtures.

The generation input is the serialized dialog context, the document title
and a grounding segment, in that order, with exactly one separator token
between segments.  The grounding segment is the reference span (training),
the predicted span (cascaded decoding) or the whole document (baseline
mode, truncated at the tail to the model's input limit).

Decoding is standard beam search over log-probabilities without length
normalization.  The repetition penalty multiplies the log-probability of
every token already present in the hypothesis by ``theta`` when negative
(divides when positive), after which the distribution is renormalized.

Span marginalization decodes against a per-token mixture over the top-k
span conditionals, renormalized to a proper distribution, with one shared
prefix across spans.  The bundled table-driven model makes every formula
exactly testable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .corpus import DialogSample, GroundedDocument
from .errors import ConfigurationError, DataError, DecodeError
from .numerics import NEG_INF, assert_normalized, log_softmax, logsumexp
from .span_decoding import SpanPosterior

SEPARATOR = "<sep>"
ROLE_MARKERS = {"user": "<user>", "agent": "<agent>"}

GROUNDING_REFERENCE = "reference_span"
GROUNDING_PREDICTED = "predicted_span"
GROUNDING_FULL_DOC = "full_document"


@dataclass(frozen=True)
class GenerationInput:
    context: str  # role-marked serialized dialog history
    title: str
    grounding: str
    separator: str = SEPARATOR

    def serialize(self) -> str:
        return f"{self.context} {self.separator} {self.title} {self.separator} {self.grounding}".strip()

    def tokens(self) -> list[str]:
        return self.serialize().split()


def serialize_dialog(context: Sequence[tuple[str, str]]) -> str:
    return " ".join(f"{ROLE_MARKERS[role]} {utterance}".strip() for role, utterance in context)


def build_input(
    sample: DialogSample,
    doc: GroundedDocument,
    grounding_mode: str,
    nbest: dict[str, SpanPosterior] | None = None,
    max_input_tokens: int | None = None,
) -> GenerationInput:
    """Deterministic generation input for one sample.

    ``predicted_span`` requires the sample's n-best entry; ``full_document``
    truncates the document tail so the serialized input is exactly
    ``max_input_tokens`` long whenever it would exceed it.
    """
    context = serialize_dialog(sample.context)
    title = doc.doc_id
    if grounding_mode == GROUNDING_REFERENCE:
        grounding = doc.text[sample.reference_span[0] : sample.reference_span[1]]
    elif grounding_mode == GROUNDING_PREDICTED:
        if nbest is None or sample.sample_id not in nbest:
            raise DataError(f"no n-best entry for sample {sample.sample_id!r}; run span decoding first")
        top = nbest[sample.sample_id].top()
        grounding = top.text if top.text is not None else doc.text[top.char_span[0] : top.char_span[1]]
    elif grounding_mode == GROUNDING_FULL_DOC:
        grounding = doc.text
    else:
        raise ConfigurationError(f"unknown grounding mode {grounding_mode!r}")

    built = GenerationInput(context=context, title=title, grounding=grounding)
    if grounding_mode == GROUNDING_FULL_DOC and max_input_tokens is not None:
        total = len(built.tokens())
        if total > max_input_tokens:
            overflow = total - max_input_tokens
            grounding_tokens = grounding.split()
            if overflow >= len(grounding_tokens):
                raise DataError(
                    f"sample {sample.sample_id!r}: context and title alone exceed "
                    f"max_input_tokens={max_input_tokens}"
                )
            built = GenerationInput(
                context=context, title=title, grounding=" ".join(grounding_tokens[:-overflow])
            )
    return built


class GenerationModel(Protocol):
    """Anything that scores the next token given an input and a prefix."""

    vocab: tuple[str, ...]
    eos: str

    def next_token_logprobs(self, input: GenerationInput, prefix: Sequence[str]) -> np.ndarray: ...

    def token_index(self, token: str) -> int: ...


class TableGenerationModel:
    """Generation model driven by explicit conditional tables.

    Tables map a state key to a ``{token: probability}`` row.  The key is
    the grounding segment joined with the tail of the prefix
    (``context_order`` tokens; None keys on the full prefix):
    ``"<grounding>||<prefix tail>"``.  A ``"*"`` entry acts as the fallback
    row for unknown states.  Rows are renormalized at load time.
    """

    def __init__(
        self,
        vocab: Sequence[str],
        tables: dict[str, dict[str, float]],
        eos: str = "</s>",
        context_order: int | None = 1,
    ):
        if eos not in vocab:
            raise ConfigurationError(f"EOS token {eos!r} missing from vocabulary")
        if len(set(vocab)) != len(vocab):
            raise ConfigurationError("duplicate tokens in vocabulary")
        self.vocab = tuple(vocab)
        self.eos = eos
        self.context_order = context_order
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        self._rows: dict[str, np.ndarray] = {}
        for state, row in tables.items():
            probs = np.zeros(len(self.vocab))
            for token, p in row.items():
                if token not in self._index:
                    raise ConfigurationError(f"table row {state!r} scores unknown token {token!r}")
                if p < 0:
                    raise ConfigurationError(f"table row {state!r}: negative probability for {token!r}")
                probs[self._index[token]] = p
            total = probs.sum()
            if total <= 0:
                raise ConfigurationError(f"table row {state!r} has no probability mass")
            with np.errstate(divide="ignore"):
                self._rows[state] = np.log(probs / total)

    def state_key(self, input: GenerationInput, prefix: Sequence[str]) -> str:
        if self.context_order is None:
            tail = list(prefix)
        elif self.context_order == 0:
            tail = []
        else:
            tail = list(prefix)[-self.context_order :]
        return f"{input.grounding}||{' '.join(tail)}"

    def next_token_logprobs(self, input: GenerationInput, prefix: Sequence[str]) -> np.ndarray:
        key = self.state_key(input, prefix)
        row = self._rows.get(key)
        if row is None:
            row = self._rows.get("*")
        if row is None:
            raise DecodeError(f"no conditional table for state {key!r} and no '*' fallback")
        return row.copy()

    def token_index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise DataError(f"token {token!r} not in model vocabulary")

    @classmethod
    def from_json(cls, path: str | Path) -> "TableGenerationModel":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            vocab=data["vocab"],
            tables=data["tables"],
            eos=data.get("eos", "</s>"),
            context_order=data.get("context_order", 1),
        )


# --- beam search -------------------------------------------------------------

@dataclass(frozen=True)
class GenerationHypothesis:
    tokens: tuple[str, ...]
    score: float  # cumulative log-probability under the penalized distributions

    @property
    def text(self) -> str:
        return " ".join(t for t in self.tokens if t)


def apply_repetition_penalty(
    logprobs: np.ndarray, prefix: Sequence[str], theta: float, model: GenerationModel
) -> np.ndarray:
    """CTRL-style penalty on log-probabilities, then renormalization."""
    if theta < 1.0:
        raise ConfigurationError(f"repetition penalty must be >= 1, got {theta}")
    if theta == 1.0 or not prefix:
        return logprobs
    penalized = logprobs.copy()
    for token in set(prefix):
        idx = model.token_index(token)
        value = penalized[idx]
        if value < 0:
            penalized[idx] = value * theta
        elif value > 0:
            penalized[idx] = value / theta
    return log_softmax(penalized)


def _step_logprobs(
    model: GenerationModel, input: GenerationInput, prefix: Sequence[str], rep_penalty: float
) -> np.ndarray:
    lp = model.next_token_logprobs(input, prefix)
    if np.any(np.isnan(lp)) or np.any(lp == np.inf):
        raise DecodeError("generation model emitted non-finite log-probabilities")
    assert_normalized(lp)
    return apply_repetition_penalty(lp, prefix, rep_penalty, model)


def beam_search(
    model: GenerationModel,
    input: GenerationInput,
    beam: int = 4,
    max_len: int = 32,
    rep_penalty: float = 1.0,
) -> tuple[GenerationHypothesis, list[GenerationHypothesis]]:
    """Best hypothesis and the final n-best list (size ``beam``).

    Hypotheses end at EOS or ``max_len``; no length normalization.  Ties
    break on the lexicographically smaller token sequence, so decoding is
    fully deterministic.
    """
    if beam < 1:
        raise ConfigurationError(f"beam must be >= 1, got {beam}")
    live: list[GenerationHypothesis] = [GenerationHypothesis(tokens=(), score=0.0)]
    done: list[GenerationHypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        candidates = []
        for hyp in live:
            lp = _step_logprobs(model, input, hyp.tokens, rep_penalty)
            for idx, token in enumerate(model.vocab):
                if lp[idx] == NEG_INF:
                    continue
                candidates.append(GenerationHypothesis(tokens=hyp.tokens + (token,), score=hyp.score + lp[idx]))
        candidates.sort(key=lambda h: (-h.score, h.tokens))
        live = []
        for hyp in candidates[:beam]:
            if hyp.tokens[-1] == model.eos:
                done.append(hyp)
            else:
                live.append(hyp)
    done.extend(live)  # hypotheses cut off at max_len
    done.sort(key=lambda h: (-h.score, h.tokens))
    nbest = done[:beam]
    if not nbest:
        raise DecodeError("beam search produced no hypotheses")
    return nbest[0], nbest


def sequence_score(
    model: GenerationModel,
    input: GenerationInput,
    tokens: Sequence[str],
    rep_penalty: float = 1.0,
) -> float:
    """Teacher-forced cumulative score of a fixed token sequence.

    Scores exactly as beam search would along this path; the exhaustive
    search oracle in the tests ranks full sequences with it.
    """
    total = 0.0
    for i, token in enumerate(tokens):
        lp = _step_logprobs(model, input, tokens[:i], rep_penalty)
        total += float(lp[model.token_index(token)])
    return total


# --- span marginalization ------------------------------------------------------

@dataclass(frozen=True)
class SpanMixtureState:
    """Top-k span hypotheses with renormalized probabilities and their inputs."""

    inputs: tuple[GenerationInput, ...]
    log_weights: tuple[float, ...]
    span_texts: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.inputs:
            raise DataError("span mixture needs at least one span")
        if len(self.inputs) != len(self.log_weights):
            raise DataError("mixture inputs and weights must align")
        total = logsumexp(np.asarray(self.log_weights))
        if abs(total) > 1e-12:
            raise DataError(f"mixture weights not normalized: logsumexp={total!r}")

    @classmethod
    def from_posterior(
        cls,
        sample: DialogSample,
        doc: GroundedDocument,
        posterior: SpanPosterior,
        k: int = 5,
    ) -> "SpanMixtureState":
        if len(posterior) == 0:
            raise DataError(f"empty span posterior for sample {sample.sample_id!r}")
        top = posterior.hypotheses[:k]
        raw = np.asarray([h.logprob for h in top])
        weights = raw - logsumexp(raw)
        context = serialize_dialog(sample.context)
        inputs, texts = [], []
        for h in top:
            text = h.text if h.text is not None else doc.text[h.char_span[0] : h.char_span[1]]
            inputs.append(GenerationInput(context=context, title=doc.doc_id, grounding=text))
            texts.append(text)
        return cls(inputs=tuple(inputs), log_weights=tuple(float(w) for w in weights), span_texts=tuple(texts))


def marginalized_step(
    model: GenerationModel,
    mixture: SpanMixtureState,
    prefix: Sequence[str],
) -> np.ndarray:
    """log sum_s p(s) * p(token | input(s), prefix); a normalized distribution."""
    stacked = np.stack(
        [w + model.next_token_logprobs(inp, prefix) for inp, w in zip(mixture.inputs, mixture.log_weights)]
    )
    out = logsumexp(stacked, axis=0)
    assert_normalized(out)
    return np.asarray(out)


class MixtureGenerationModel:
    """Adapter running beam search directly over the span mixture (shared prefix)."""

    def __init__(self, model: GenerationModel, mixture: SpanMixtureState):
        self.model = model
        self.mixture = mixture
        self.vocab = model.vocab
        self.eos = model.eos

    def next_token_logprobs(self, input: GenerationInput, prefix: Sequence[str]) -> np.ndarray:
        return marginalized_step(self.model, self.mixture, prefix)

    def token_index(self, token: str) -> int:
        return self.model.token_index(token)


def reference_tokens(model: GenerationModel, utterance: str) -> list[str]:
    """Whitespace tokens of the reference plus EOS; fails on OOV tokens."""
    tokens = utterance.split()
    unknown = sorted({t for t in tokens if t not in model.vocab})
    if unknown:
        raise DataError(f"reference contains out-of-vocabulary tokens: {unknown}")
    return tokens + [model.eos]


def cascaded_loss(model: GenerationModel, input: GenerationInput, utterance: str) -> float:
    """Cross-entropy of the reference under a single grounding input (nats)."""
    tokens = reference_tokens(model, utterance)
    total = 0.0
    for i, token in enumerate(tokens):
        lp = model.next_token_logprobs(input, tokens[:i])
        total -= float(lp[model.token_index(token)])
    return total


def marginalized_training_loss(
    model: GenerationModel,
    sample: DialogSample,
    doc: GroundedDocument,
    nbest: SpanPosterior,
    k: int = 5,
) -> float:
    """Cross-entropy of the reference under the top-k span mixture (nats).

    Computed in log space: ``-sum_i log sum_s p(s) p(token_i | s, prefix)``.
    """
    mixture = SpanMixtureState.from_posterior(sample, doc, nbest, k=k)
    tokens = reference_tokens(model, sample.target_utterance)
    total = 0.0
    for i, token in enumerate(tokens):
        lp = marginalized_step(model, mixture, tokens[:i])
        total -= float(lp[model.token_index(token)])
    return total
