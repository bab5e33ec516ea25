"""Trainable span-scoring heads over frozen encoder features.

Two heads are provided.  The independent head scores start and end
positions with separate linear projections and multiplies the two softmax
probabilities.  The biaffine head scores every candidate (start, end) pair
jointly with a bilinear form plus linear terms and normalizes over the
candidate pair set.

Phrase restriction narrows the softmax support to phrase boundary
positions (independent head) or phrase-aligned pairs (biaffine head); the
BOS fallback pair is always part of the support so out-of-window training
targets stay scoreable.  Training is plain mini-batch gradient descent with
optional momentum and gradient-norm clipping; all gradients are derived by
hand and checked against finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Phrase
from .errors import ConfigurationError, DataError, TrainingError
from .numerics import NEG_INF, log_softmax
from .windowing import (
    BOS_SPAN,
    FeatureWindow,
    WindowDescriptor,
    assign_targets,
    window_slice_char_range,
)


@dataclass
class IndependentHead:
    w_start: np.ndarray
    w_end: np.ndarray
    b_start: float = 0.0
    b_end: float = 0.0

    kind = "independent"

    @property
    def feature_dim(self) -> int:
        return self.w_start.shape[0]

    @classmethod
    def init(cls, feature_dim: int, seed: int = 0, scale: float = 0.02) -> "IndependentHead":
        rng = np.random.default_rng(seed)
        return cls(
            w_start=rng.normal(0.0, scale, feature_dim),
            w_end=rng.normal(0.0, scale, feature_dim),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {
            "w_start": self.w_start,
            "w_end": self.w_end,
            "b_start": np.asarray(self.b_start, dtype=np.float64),
            "b_end": np.asarray(self.b_end, dtype=np.float64),
        }

    def apply_update(self, delta: dict[str, np.ndarray]) -> None:
        self.w_start = self.w_start + delta["w_start"]
        self.w_end = self.w_end + delta["w_end"]
        self.b_start = float(self.b_start + delta["b_start"])
        self.b_end = float(self.b_end + delta["b_end"])


@dataclass
class BiaffineHead:
    bilinear: np.ndarray  # [feature_dim, feature_dim]
    v_start: np.ndarray
    v_end: np.ndarray
    bias: float = 0.0

    kind = "biaffine"

    @property
    def feature_dim(self) -> int:
        return self.v_start.shape[0]

    @classmethod
    def init(cls, feature_dim: int, seed: int = 0, scale: float = 0.02) -> "BiaffineHead":
        # zero bilinear term at init counters the training instability of the
        # joint objective; the linear terms break symmetry
        rng = np.random.default_rng(seed)
        return cls(
            bilinear=np.zeros((feature_dim, feature_dim)),
            v_start=rng.normal(0.0, scale, feature_dim),
            v_end=rng.normal(0.0, scale, feature_dim),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {
            "bilinear": self.bilinear,
            "v_start": self.v_start,
            "v_end": self.v_end,
            "bias": np.asarray(self.bias, dtype=np.float64),
        }

    def apply_update(self, delta: dict[str, np.ndarray]) -> None:
        self.bilinear = self.bilinear + delta["bilinear"]
        self.v_start = self.v_start + delta["v_start"]
        self.v_end = self.v_end + delta["v_end"]
        self.bias = float(self.bias + delta["bias"])


Head = IndependentHead | BiaffineHead


@dataclass(frozen=True)
class RestrictionMask:
    """Scoreable positions and pairs for one window.

    ``valid_pairs`` always contains the BOS fallback pair and is kept in
    sorted order for deterministic iteration.  ``pair_phrases`` annotates
    pairs that coincide with annotated phrases.
    """

    valid_starts: frozenset[int]
    valid_ends: frozenset[int]
    valid_pairs: tuple[tuple[int, int], ...]
    pair_phrases: dict[tuple[int, int], tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.valid_pairs:
            raise ValueError("restriction mask without any valid pair")
        for s, e in self.valid_pairs:
            if (s, e) != BOS_SPAN and (s not in self.valid_starts or e not in self.valid_ends):
                raise ValueError(f"pair ({s}, {e}) outside valid start/end sets")

    @property
    def real_pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple(p for p in self.valid_pairs if p != BOS_SPAN)


def _check_dim(head: Head, window: FeatureWindow) -> None:
    if head.feature_dim != window.feature_dim:
        raise ConfigurationError(
            f"head feature_dim {head.feature_dim} does not match window "
            f"{window.window_id} feature_dim {window.feature_dim}"
        )


def phrase_token_pair(window: WindowDescriptor, phrase: Phrase) -> tuple[int, int] | None:
    """Window token pair tightly covering a phrase, or None if not fully inside."""
    pair = assign_targets(window, (phrase.start, phrase.end))
    return None if pair == BOS_SPAN else pair


def phrase_restriction_mask(window: WindowDescriptor | FeatureWindow, phrases: Iterable[Phrase]) -> RestrictionMask:
    """Mask admitting only phrase-aligned pairs (plus the BOS fallback)."""
    descriptor = window.descriptor if isinstance(window, FeatureWindow) else window
    starts = {BOS_SPAN[0]}
    ends = {BOS_SPAN[1]}
    pair_phrases: dict[tuple[int, int], tuple[str, ...]] = {}
    for phrase in phrases:
        pair = phrase_token_pair(descriptor, phrase)
        if pair is None:
            continue
        starts.add(pair[0])
        ends.add(pair[1])
        pair_phrases[pair] = pair_phrases.get(pair, ()) + (phrase.phrase_id,)
    pairs = sorted(pair_phrases) + [BOS_SPAN]
    return RestrictionMask(
        valid_starts=frozenset(starts),
        valid_ends=frozenset(ends),
        valid_pairs=tuple(sorted(pairs)),
        pair_phrases=pair_phrases,
    )


def full_pair_mask(window: WindowDescriptor | FeatureWindow, max_span_tokens: int | None = None) -> RestrictionMask:
    """Unrestricted mask: every in-order document token pair plus BOS."""
    descriptor = window.descriptor if isinstance(window, FeatureWindow) else window
    doc_pos = descriptor.doc_positions()
    pairs = [BOS_SPAN]
    for i, s in enumerate(doc_pos):
        for e in doc_pos[i:]:
            if max_span_tokens is not None and e - s + 1 > max_span_tokens:
                break
            pairs.append((s, e))
    return RestrictionMask(
        valid_starts=frozenset(doc_pos) | {BOS_SPAN[0]},
        valid_ends=frozenset(doc_pos) | {BOS_SPAN[1]},
        valid_pairs=tuple(sorted(set(pairs))),
    )


def _masked_log_softmax(logits: np.ndarray, support: Sequence[int]) -> np.ndarray:
    out = np.full(logits.shape[0], NEG_INF)
    idx = np.asarray(sorted(support), dtype=int)
    out[idx] = log_softmax(logits[idx])
    return out


def score_independent(
    head: IndependentHead,
    window: FeatureWindow,
    mask: RestrictionMask | None = None,
    restricted: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token start/end log-probabilities.

    Unrestricted: softmax over all window tokens.  Restricted: softmax over
    the mask's start (resp. end) positions only, -inf elsewhere.
    """
    _check_dim(head, window)
    h = window.hidden_states
    start_logits = h @ head.w_start + head.b_start
    end_logits = h @ head.w_end + head.b_end
    if restricted:
        if mask is None:
            raise ConfigurationError("restricted scoring requires a restriction mask")
        return (
            _masked_log_softmax(start_logits, mask.valid_starts),
            _masked_log_softmax(end_logits, mask.valid_ends),
        )
    return log_softmax(start_logits), log_softmax(end_logits)


def span_logprob_independent(
    start_logprobs: np.ndarray, end_logprobs: np.ndarray, pair: tuple[int, int]
) -> float:
    """Joint log-probability of a pair under conditionally independent heads."""
    return float(start_logprobs[pair[0]] + end_logprobs[pair[1]])


@dataclass(frozen=True)
class PairDistribution:
    pairs: tuple[tuple[int, int], ...]
    logprobs: np.ndarray

    def logprob(self, pair: tuple[int, int]) -> float:
        try:
            return float(self.logprobs[self.pairs.index(pair)])
        except ValueError:
            return NEG_INF

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {p: float(lp) for p, lp in zip(self.pairs, self.logprobs)}


def _biaffine_scores(head: BiaffineHead, hidden: np.ndarray, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    s_idx = np.fromiter((p[0] for p in pairs), dtype=int, count=len(pairs))
    e_idx = np.fromiter((p[1] for p in pairs), dtype=int, count=len(pairs))
    hs, he = hidden[s_idx], hidden[e_idx]
    return np.einsum("kd,de,ke->k", hs, head.bilinear, he) + hs @ head.v_start + he @ head.v_end + head.bias


def score_biaffine(head: BiaffineHead, window: FeatureWindow, mask: RestrictionMask) -> PairDistribution:
    """Joint log-probabilities over the mask's valid pairs (log-softmax normalized)."""
    _check_dim(head, window)
    scores = _biaffine_scores(head, window.hidden_states, mask.valid_pairs)
    return PairDistribution(pairs=mask.valid_pairs, logprobs=log_softmax(scores))


def pair_distribution(
    head: Head, window: FeatureWindow, mask: RestrictionMask, restricted: bool
) -> PairDistribution:
    """Log-probability of every valid pair under either head (one scoring API for decode)."""
    if isinstance(head, BiaffineHead):
        return score_biaffine(head, window, mask)
    start_lp, end_lp = score_independent(head, window, mask, restricted=restricted)
    lps = np.asarray([span_logprob_independent(start_lp, end_lp, p) for p in mask.valid_pairs])
    return PairDistribution(pairs=mask.valid_pairs, logprobs=lps)


# --- hand-derived gradients ------------------------------------------------

@dataclass
class GradientResult:
    loss: float
    grads: dict[str, np.ndarray]


def gradients(
    head: Head,
    window: FeatureWindow,
    mask: RestrictionMask,
    target: tuple[int, int],
    restricted: bool = True,
) -> GradientResult:
    """Cross-entropy loss of ``target`` and its gradient for every parameter.

    For softmax cross-entropy the score gradient is (p - y); parameter
    gradients follow by the chain rule through the linear or biaffine form.
    """
    _check_dim(head, window)
    h = window.hidden_states
    if isinstance(head, IndependentHead):
        if restricted:
            starts = np.asarray(sorted(mask.valid_starts), dtype=int)
            ends = np.asarray(sorted(mask.valid_ends), dtype=int)
        else:
            starts = np.arange(h.shape[0])
            ends = np.arange(h.shape[0])
        if target[0] not in starts or target[1] not in ends:
            raise TrainingError(f"target pair {target} outside scoring support")

        start_logits = h @ head.w_start + head.b_start
        end_logits = h @ head.w_end + head.b_end
        start_lp = log_softmax(start_logits[starts])
        end_lp = log_softmax(end_logits[ends])
        y_start = (starts == target[0]).astype(np.float64)
        y_end = (ends == target[1]).astype(np.float64)
        loss = -(start_lp[y_start == 1.0][0] + end_lp[y_end == 1.0][0])
        d_start = np.exp(start_lp) - y_start
        d_end = np.exp(end_lp) - y_end
        grads = {
            "w_start": d_start @ h[starts],
            "w_end": d_end @ h[ends],
            "b_start": np.asarray(d_start.sum()),
            "b_end": np.asarray(d_end.sum()),
        }
        return GradientResult(loss=float(loss), grads=grads)

    pairs = mask.valid_pairs
    if target not in pairs:
        raise TrainingError(f"target pair {target} outside scoring support")
    scores = _biaffine_scores(head, h, pairs)
    lp = log_softmax(scores)
    p = np.exp(lp)
    y = np.asarray([1.0 if pair == target else 0.0 for pair in pairs])
    delta = p - y
    s_idx = np.fromiter((pp[0] for pp in pairs), dtype=int, count=len(pairs))
    e_idx = np.fromiter((pp[1] for pp in pairs), dtype=int, count=len(pairs))
    hs, he = h[s_idx], h[e_idx]
    grads = {
        "bilinear": np.einsum("k,kd,ke->de", delta, hs, he),
        "v_start": delta @ hs,
        "v_end": delta @ he,
        "bias": np.asarray(delta.sum()),
    }
    return GradientResult(loss=float(-lp[pairs.index(target)]), grads=grads)


def loss_only(
    head: Head,
    window: FeatureWindow,
    mask: RestrictionMask,
    target: tuple[int, int],
    restricted: bool = True,
) -> float:
    """Forward-only cross-entropy; the probe the finite-difference check differentiates."""
    if isinstance(head, IndependentHead):
        start_lp, end_lp = score_independent(head, window, mask, restricted=restricted)
        return -span_logprob_independent(start_lp, end_lp, target)
    return -score_biaffine(head, window, mask).logprob(target)


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 8
    seed: int = 13
    momentum: float = 0.0
    clip_norm: float | None = 1.0
    restricted: bool = True


@dataclass
class TrainingExample:
    window: FeatureWindow
    mask: RestrictionMask
    target: tuple[int, int]


@dataclass
class TrainResult:
    head: Head
    loss_trace: list[float]  # per-epoch mean cross-entropy


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
    if total > max_norm > 0.0:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


def train_head(head: Head, dataset: Sequence[TrainingExample], config: TrainConfig) -> TrainResult:
    """Mini-batch gradient descent on summed start/end (or joint) cross-entropy.

    Every example must hold an assigned target (a real pair or BOS_SPAN).
    Deterministic for a fixed seed: shuffling, batch order and the gradient
    reduction order are all fixed.
    """
    if not dataset:
        raise TrainingError("empty training dataset")
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in head.params().items()}
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for batch_id, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = [dataset[i] for i in order[lo : lo + config.batch_size]]
            grads = {k: np.zeros_like(v) for k, v in head.params().items()}
            batch_loss = 0.0
            for ex in batch:
                result = gradients(head, ex.window, ex.mask, ex.target, restricted=config.restricted)
                batch_loss += result.loss
                for k, g in result.grads.items():
                    grads[k] += g
            if not np.isfinite(batch_loss):
                raise TrainingError(
                    f"non-finite loss in epoch {epoch} batch {batch_id} (lr={config.lr})"
                )
            epoch_loss += batch_loss
            grads = {k: g / len(batch) for k, g in grads.items()}
            if config.clip_norm is not None:
                grads = _clip_global_norm(grads, config.clip_norm)
            for k in grads:
                if not np.all(np.isfinite(grads[k])):
                    raise TrainingError(
                        f"non-finite gradient for {k} in epoch {epoch} batch {batch_id} (lr={config.lr})"
                    )
                velocity[k] = config.momentum * velocity[k] - config.lr * grads[k]
            head.apply_update(velocity)
        trace.append(epoch_loss / len(dataset))
    return TrainResult(head=head, loss_trace=trace)


def make_head(kind: str, feature_dim: int, seed: int = 0) -> Head:
    if kind == "independent":
        return IndependentHead.init(feature_dim, seed=seed)
    if kind == "biaffine":
        return BiaffineHead.init(feature_dim, seed=seed)
    raise ConfigurationError(f"unknown head kind {kind!r}")


def training_accuracy(head: Head, dataset: Sequence[TrainingExample], restricted: bool = True) -> float:
    """Fraction of examples whose argmax pair equals the target."""
    hits = 0
    for ex in dataset:
        dist = pair_distribution(head, ex.window, ex.mask, restricted=restricted)
        best_idx = max(
            range(len(dist.pairs)),
            key=lambda k: (dist.logprobs[k], -dist.pairs[k][0], -dist.pairs[k][1]),
        )
        hits += int(dist.pairs[best_idx] == ex.target)
    return hits / len(dataset)


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"SGH1"
CHECKPOINT_VERSION = 1


def save_head(path: str | Path, head: Head) -> None:
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        kind = head.kind.encode("utf-8")
        fh.write(struct.pack("<I", len(kind)))
        fh.write(kind)
        fh.write(struct.pack("<I", head.feature_dim))
        if isinstance(head, IndependentHead):
            arrays = [head.w_start, head.w_end, np.asarray([head.b_start]), np.asarray([head.b_end])]
        else:
            arrays = [head.bilinear.ravel(), head.v_start, head.v_end, np.asarray([head.bias])]
        for arr in arrays:
            fh.write(np.asarray(arr, dtype="<f8").tobytes(order="C"))


def load_head(path: str | Path) -> Head:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a head checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (kind_len,) = struct.unpack("<I", fh.read(4))
        kind = fh.read(kind_len).decode("utf-8")
        (dim,) = struct.unpack("<I", fh.read(4))

        def take(count: int) -> np.ndarray:
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise DataError(f"{path}: truncated checkpoint")
            return np.frombuffer(raw, dtype="<f8").astype(np.float64)

        if kind == "independent":
            head: Head = IndependentHead(
                w_start=take(dim), w_end=take(dim), b_start=float(take(1)[0]), b_end=float(take(1)[0])
            )
        elif kind == "biaffine":
            head = BiaffineHead(
                bilinear=take(dim * dim).reshape(dim, dim),
                v_start=take(dim),
                v_end=take(dim),
                bias=float(take(1)[0]),
            )
        else:
            raise DataError(f"{path}: unknown head kind {kind!r}")
    for arr in head.params().values():
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{path}: non-finite parameters in checkpoint")
    return head
