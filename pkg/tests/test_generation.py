import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spanground.errors import ConfigurationError, DataError, DecodeError
from spanground.generation import (
    GROUNDING_FULL_DOC,
    GROUNDING_PREDICTED,
    GROUNDING_REFERENCE,
    GenerationInput,
    MixtureGenerationModel,
    SpanMixtureState,
    TableGenerationModel,
    apply_repetition_penalty,
    beam_search,
    build_input,
    cascaded_loss,
    marginalized_step,
    marginalized_training_loss,
    sequence_score,
    serialize_dialog,
)
from spanground.numerics import logsumexp
from spanground.span_decoding import SpanHypothesis, SpanPosterior

from conftest import make_doc, make_sample


def table_model(tables, vocab=("a", "b", "c", "</s>"), order=None):
    return TableGenerationModel(vocab=vocab, tables=tables, eos="</s>", context_order=order)


def uniform_model(vocab=("a", "b", "c", "</s>")):
    return table_model({"*": {t: 1.0 for t in vocab}}, vocab=vocab)


GIN = GenerationInput(context="<user> q", title="doc", grounding="g")


class TestBuildInput:
    def test_reference_mode_uses_doc_slice(self):
        doc = make_doc(["alpha beta gamma.", "delta epsilon zeta."])
        sample = make_sample(doc, phrase_idx=1)
        built = build_input(sample, doc, GROUNDING_REFERENCE)
        assert built.grounding == "delta epsilon zeta."
        assert built.title == doc.doc_id
        assert built.context == serialize_dialog(sample.context)

    def test_exactly_one_separator_between_segments(self):
        assert GIN.serialize().count(GIN.separator) == 2
        assert GIN.serialize() == "<user> q <sep> doc <sep> g"

    def test_predicted_top1_equals_reference_mode(self):
        doc = make_doc(["alpha beta gamma.", "delta epsilon zeta."])
        sample = make_sample(doc, phrase_idx=0)
        phrase = doc.phrases[0]
        nbest = {
            sample.sample_id: SpanPosterior(
                hypotheses=(
                    SpanHypothesis(
                        char_span=(phrase.start, phrase.end),
                        logprob=0.0,
                        text=doc.text[phrase.start : phrase.end],
                    ),
                ),
                normalized=True,
            )
        }
        predicted = build_input(sample, doc, GROUNDING_PREDICTED, nbest=nbest)
        reference = build_input(sample, doc, GROUNDING_REFERENCE)
        assert predicted == reference

    def test_predicted_without_nbest_names_sample(self):
        doc = make_doc(["alpha beta."])
        sample = make_sample(doc)
        with pytest.raises(DataError, match=sample.sample_id):
            build_input(sample, doc, GROUNDING_PREDICTED, nbest={})

    def test_full_document_truncates_to_exact_limit(self):
        doc = make_doc([" ".join(f"w{i}" for i in range(100))])
        sample = make_sample(doc)
        limit = 30
        built = build_input(sample, doc, GROUNDING_FULL_DOC, max_input_tokens=limit)
        assert len(built.tokens()) == limit
        assert built.context == serialize_dialog(sample.context)  # context intact
        # grounding is a prefix of the document
        assert doc.text.startswith(built.grounding)

    def test_full_document_within_limit_untouched(self):
        doc = make_doc(["alpha beta gamma."])
        sample = make_sample(doc)
        built = build_input(sample, doc, GROUNDING_FULL_DOC, max_input_tokens=100)
        assert built.grounding == doc.text

    def test_unsatisfiable_limit_rejected(self):
        doc = make_doc(["alpha beta gamma."])
        sample = make_sample(doc, context=(("user", " ".join(["q"] * 50)),))
        with pytest.raises(DataError, match="exceed"):
            build_input(sample, doc, GROUNDING_FULL_DOC, max_input_tokens=10)


class TestTableModel:
    def test_rows_are_normalized(self):
        model = table_model({"g||": {"a": 2.0, "b": 6.0}})
        lp = model.next_token_logprobs(GIN, [])
        assert abs(logsumexp(lp)) < 1e-12
        assert np.isclose(np.exp(lp[model.token_index("a")]), 0.25)

    def test_fallback_row(self):
        model = uniform_model()
        lp = model.next_token_logprobs(GIN, ["a"])
        assert abs(logsumexp(lp)) < 1e-9

    def test_missing_state_without_fallback(self):
        model = table_model({"g||": {"a": 1.0}})
        with pytest.raises(DecodeError, match="no conditional table"):
            model.next_token_logprobs(GIN, ["a"])

    def test_unknown_token_in_table(self):
        with pytest.raises(ConfigurationError, match="unknown token"):
            table_model({"g||": {"zzz": 1.0}})

    def test_json_round_trip(self, tmp_path):
        spec = {
            "vocab": ["x", "y", "</s>"],
            "eos": "</s>",
            "context_order": 1,
            "tables": {"g||": {"x": 0.5, "y": 0.5}, "g||x": {"</s>": 1.0}},
        }
        import json

        path = tmp_path / "toy.json"
        path.write_text(json.dumps(spec))
        model = TableGenerationModel.from_json(path)
        assert model.vocab == ("x", "y", "</s>")


def greedy_decode(model, input, max_len):
    """Independent greedy oracle for the beam=1 degeneracy check."""
    tokens = []
    for _ in range(max_len):
        lp = model.next_token_logprobs(input, tokens)
        order = sorted(range(len(model.vocab)), key=lambda i: (-lp[i], model.vocab[i]))
        tokens.append(model.vocab[order[0]])
        if tokens[-1] == model.eos:
            break
    return tuple(tokens)


def exhaustive_best(model, input, length, rep_penalty=1.0):
    """Brute-force search over every token sequence of the given length."""
    best_tokens, best_score = None, -math.inf
    non_eos = [t for t in model.vocab if t != model.eos]
    for cand in itertools.product(non_eos, repeat=length):
        score = 0.0
        for i, token in enumerate(cand):
            lp = apply_repetition_penalty(
                model.next_token_logprobs(input, cand[:i]), cand[:i], rep_penalty, model
            )
            score += float(lp[model.token_index(token)])
        if score > best_score or (score == best_score and cand < best_tokens):
            best_tokens, best_score = cand, score
    return best_tokens, best_score


# three-step tables where greedy is suboptimal but beam=2 recovers the optimum:
# step 1 prefers 'a' (0.6) but everything after 'a' stays diffuse, while the
# 0.4 'b' branch turns deterministic
TRAP_TABLES = {
    "g||": {"a": 0.6, "b": 0.4},
    "g||a": {"a": 0.5, "b": 0.5, "c": 0.0},
    "g||b": {"c": 0.9, "a": 0.05, "b": 0.05},
    "g||c": {"c": 0.9, "a": 0.05, "b": 0.05},
}


class TestBeamSearch:
    def test_beam_one_is_greedy(self):
        model = table_model(TRAP_TABLES, order=1)
        best, _ = beam_search(model, GIN, beam=1, max_len=3, rep_penalty=1.0)
        assert best.tokens == greedy_decode(model, GIN, 3)

    def test_point_mass_chain_forced_for_any_beam(self):
        tables = {"g||": {"a": 1.0}, "g||a": {"b": 1.0}, "g||b": {"c": 1.0}, "g||c": {"</s>": 1.0}}
        model = table_model(tables, order=1)
        for beam in (1, 2, 4, 6):
            best, _ = beam_search(model, GIN, beam=beam, max_len=10, rep_penalty=1.0)
            assert best.tokens == ("a", "b", "c", "</s>")

    def test_beam_two_matches_exhaustive_three_step(self):
        model = table_model(TRAP_TABLES, order=1)
        oracle_tokens, oracle_score = exhaustive_best(model, GIN, 3)
        best, _ = beam_search(model, GIN, beam=2, max_len=3, rep_penalty=1.0)
        assert best.tokens == oracle_tokens
        assert np.isclose(best.score, oracle_score, atol=1e-12)
        greedy, _ = beam_search(model, GIN, beam=1, max_len=3, rep_penalty=1.0)
        assert greedy.score < best.score  # the trap actually bites greedy

    def test_monotone_in_beam_width(self):
        model = table_model(TRAP_TABLES, order=1)
        scores = []
        for beam in (1, 2, 4, 6):
            best, _ = beam_search(model, GIN, beam=beam, max_len=3, rep_penalty=1.0)
            scores.append(best.score)
        assert all(a <= b + 1e-12 for a, b in zip(scores, scores[1:]))

    def test_nbest_sorted_and_sized(self):
        model = table_model(TRAP_TABLES, order=1)
        _, nbest = beam_search(model, GIN, beam=4, max_len=3, rep_penalty=1.0)
        assert len(nbest) == 4
        assert all(a.score >= b.score for a, b in zip(nbest, nbest[1:]))

    def test_eos_terminates_hypothesis(self):
        tables = {"g||": {"a": 0.7, "</s>": 0.3}, "g||a": {"</s>": 1.0}}
        model = table_model(tables, order=1)
        best, nbest = beam_search(model, GIN, beam=2, max_len=5, rep_penalty=1.0)
        assert best.tokens == ("a", "</s>")
        assert ("</s>",) in [h.tokens for h in nbest]

    def test_non_finite_model_rejected(self):
        class BrokenModel:
            vocab = ("a", "</s>")
            eos = "</s>"

            def next_token_logprobs(self, input, prefix):
                return np.asarray([np.nan, np.nan])

            def token_index(self, token):
                return self.vocab.index(token)

        with pytest.raises(DecodeError, match="non-finite"):
            beam_search(BrokenModel(), GIN, beam=1, max_len=2)

    def test_determinism(self):
        model = table_model(TRAP_TABLES, order=1)
        runs = [beam_search(model, GIN, beam=3, max_len=3, rep_penalty=1.1) for _ in range(2)]
        assert runs[0] == runs[1]


class TestRepetitionPenalty:
    def test_hand_computed_rule(self):
        # distribution (0.5, 0.3, 0.2); token 'a' in prefix; theta = 1.2:
        # its log-probability is scaled by 1.2, then the vector renormalizes
        model = table_model({"g||": {"a": 0.5, "b": 0.3, "c": 0.2}})
        base = model.next_token_logprobs(GIN, [])
        penalized = apply_repetition_penalty(base.copy(), ["a"], 1.2, model)
        raw = base.copy()
        ia = model.token_index("a")
        raw[ia] = raw[ia] * 1.2
        expected = raw - logsumexp(raw)
        assert np.allclose(penalized, expected, atol=1e-12)
        assert penalized[ia] < base[ia]
        assert abs(logsumexp(penalized)) < 1e-12

    def test_theta_one_is_identity(self):
        model = table_model({"g||": {"a": 0.5, "b": 0.5}})
        base = model.next_token_logprobs(GIN, [])
        assert np.array_equal(apply_repetition_penalty(base.copy(), ["a"], 1.0, model), base)

    def test_penalty_strictly_lowers_repeating_hypothesis(self):
        tables = {"*": {"a": 0.5, "b": 0.3, "c": 0.2}}
        model = table_model(tables)
        repeat = ("a", "a", "a")
        plain = sequence_score(model, GIN, repeat, rep_penalty=1.0)
        penalized = sequence_score(model, GIN, repeat, rep_penalty=1.2)
        assert penalized < plain
        # a repetition-free hypothesis is not hurt
        clean = ("a", "b", "c")
        assert sequence_score(model, GIN, clean, rep_penalty=1.2) >= sequence_score(
            model, GIN, clean, rep_penalty=1.0
        )

    def test_invalid_theta(self):
        model = uniform_model()
        with pytest.raises(ConfigurationError):
            apply_repetition_penalty(model.next_token_logprobs(GIN, []), ["a"], 0.5, model)


def two_span_setup(p=(0.7, 0.3)):
    tables = {
        "s1||": {"a": 0.6, "b": 0.2, "c": 0.1, "</s>": 0.1},
        "s2||": {"a": 0.1, "b": 0.5, "c": 0.2, "</s>": 0.2},
    }
    model = table_model(tables, order=0)
    inputs = (
        GenerationInput(context="<user> q", title="d", grounding="s1"),
        GenerationInput(context="<user> q", title="d", grounding="s2"),
    )
    mixture = SpanMixtureState(
        inputs=inputs, log_weights=tuple(float(np.log(x)) for x in p), span_texts=("s1", "s2")
    )
    return model, mixture


class TestMarginalization:
    def test_k1_equals_single_model(self):
        model, _ = two_span_setup()
        single_input = GenerationInput(context="<user> q", title="d", grounding="s1")
        mixture = SpanMixtureState(inputs=(single_input,), log_weights=(0.0,))
        mixed = marginalized_step(model, mixture, [])
        direct = model.next_token_logprobs(single_input, [])
        assert np.array_equal(mixed, direct)

    def test_identical_conditionals_collapse(self):
        tables = {"s1||": {"a": 0.4, "b": 0.6}, "s2||": {"a": 0.4, "b": 0.6}}
        model = table_model(tables, order=0)
        inputs = (
            GenerationInput(context="c", title="d", grounding="s1"),
            GenerationInput(context="c", title="d", grounding="s2"),
        )
        for weights in ((0.5, 0.5), (0.9, 0.1)):
            mixture = SpanMixtureState(inputs=inputs, log_weights=tuple(float(np.log(w)) for w in weights))
            mixed = marginalized_step(model, mixture, [])
            assert np.allclose(mixed, model.next_token_logprobs(inputs[0], []), atol=1e-12)

    def test_hand_computed_mixture(self):
        # weights (0.7, 0.3) over the 4-token tables: every entry is
        # log(0.7 p1 + 0.3 p2), computed directly
        model, mixture = two_span_setup()
        mixed = marginalized_step(model, mixture, [])
        p1 = {"a": 0.6, "b": 0.2, "c": 0.1, "</s>": 0.1}
        p2 = {"a": 0.1, "b": 0.5, "c": 0.2, "</s>": 0.2}
        for token in model.vocab:
            expected = math.log(0.7 * p1[token] + 0.3 * p2[token])
            assert np.isclose(mixed[model.token_index(token)], expected, atol=1e-12)
        assert abs(logsumexp(mixed)) < 1e-9

    def test_mixture_normalized_along_decode(self):
        model, mixture = two_span_setup()
        mix_model = MixtureGenerationModel(model, mixture)
        prefix = []
        for _ in range(4):
            lp = mix_model.next_token_logprobs(None, prefix)
            assert abs(logsumexp(lp)) < 1e-9
            prefix.append(model.vocab[int(np.argmax(lp))])

    def test_training_loss_matches_brute_force(self):
        doc = make_doc(["s1", "s2"])
        sample = make_sample(doc)
        sample = sample.__class__(**{**sample.__dict__, "target_utterance": "a b c"})
        tables = {
            "s1||": {"a": 0.6, "b": 0.2, "c": 0.1, "</s>": 0.1},
            "s2||": {"a": 0.1, "b": 0.5, "c": 0.2, "</s>": 0.2},
        }
        model = table_model(tables, order=0)
        nbest = SpanPosterior(
            hypotheses=(
                SpanHypothesis(char_span=(0, 2), logprob=float(np.log(0.7)), text="s1"),
                SpanHypothesis(char_span=(3, 5), logprob=float(np.log(0.3)), text="s2"),
            ),
            normalized=True,
        )
        loss = marginalized_training_loss(model, sample, doc, nbest, k=2)
        p1 = {"a": 0.6, "b": 0.2, "c": 0.1, "</s>": 0.1}
        p2 = {"a": 0.1, "b": 0.5, "c": 0.2, "</s>": 0.2}
        expected = -sum(
            math.log(0.7 * p1[tok] + 0.3 * p2[tok]) for tok in ["a", "b", "c", "</s>"]
        )
        assert np.isclose(loss, expected, atol=1e-12)

    def test_k1_reduces_to_cascaded_loss(self):
        doc = make_doc(["s1", "s2"])
        sample = make_sample(doc)
        sample = sample.__class__(**{**sample.__dict__, "target_utterance": "a b"})
        model, _ = two_span_setup()
        nbest = SpanPosterior(
            hypotheses=(SpanHypothesis(char_span=(0, 2), logprob=float(np.log(0.8)), text="s1"),),
            normalized=False,
        )
        loss = marginalized_training_loss(model, sample, doc, nbest, k=1)
        single = cascaded_loss(
            model, GenerationInput(context=serialize_dialog(sample.context), title=doc.doc_id, grounding="s1"), "a b"
        )
        assert loss == single

    def test_identical_span_texts_equal_single_loss(self):
        doc = make_doc(["s1", "s2"])
        sample = make_sample(doc)
        sample = sample.__class__(**{**sample.__dict__, "target_utterance": "a b"})
        model, _ = two_span_setup()
        nbest = SpanPosterior(
            hypotheses=(
                SpanHypothesis(char_span=(0, 2), logprob=float(np.log(0.6)), text="s1"),
                SpanHypothesis(char_span=(0, 2), logprob=float(np.log(0.4)), text="s1"),
            ),
            normalized=True,
        )
        loss = marginalized_training_loss(model, sample, doc, nbest, k=2)
        single = cascaded_loss(
            model, GenerationInput(context=serialize_dialog(sample.context), title=doc.doc_id, grounding="s1"), "a b"
        )
        assert np.isclose(loss, single, atol=1e-12)

    def test_oov_reference_lists_tokens(self):
        doc = make_doc(["s1"])
        sample = make_sample(doc)
        sample = sample.__class__(**{**sample.__dict__, "target_utterance": "a zzz qqq"})
        model, _ = two_span_setup()
        nbest = SpanPosterior(
            hypotheses=(SpanHypothesis(char_span=(0, 2), logprob=0.0, text="s1"),), normalized=True
        )
        with pytest.raises(DataError, match=r"qqq.*zzz|zzz.*qqq"):
            marginalized_training_loss(model, sample, doc, nbest, k=1)

    def test_empty_posterior_rejected(self):
        doc = make_doc(["s1"])
        sample = make_sample(doc)
        model, _ = two_span_setup()
        with pytest.raises(DataError):
            SpanMixtureState.from_posterior(sample, doc, SpanPosterior(hypotheses=()), k=1)

    @settings(max_examples=80, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10**6))
    def test_loss_bounded_by_best_single_span(self, seed):
        rng = np.random.default_rng(seed)
        vocab = ("a", "b", "c", "</s>")
        tables = {}
        for g in ("s1", "s2", "s3"):
            probs = rng.dirichlet(np.ones(len(vocab)))
            tables[f"{g}||"] = {t: float(p) for t, p in zip(vocab, probs)}
        model = table_model(tables, order=0)
        doc = make_doc(["s1", "s2", "s3"])
        sample = make_sample(doc)
        n_tokens = int(rng.integers(1, 5))
        utterance = " ".join(rng.choice(["a", "b", "c"]) for _ in range(n_tokens))
        sample = sample.__class__(**{**sample.__dict__, "target_utterance": utterance})
        raw = rng.dirichlet(np.ones(3))
        hyps = tuple(
            SpanHypothesis(char_span=(0, 2), logprob=float(np.log(p)), text=f"s{i + 1}")
            for i, p in enumerate(raw)
        )
        nbest = SpanPosterior(hypotheses=hyps, normalized=True)
        loss = marginalized_training_loss(model, sample, doc, nbest, k=3)
        context = serialize_dialog(sample.context)
        # per-token mixture bound: every factor satisfies
        # sum_s p(s) p(u_i|s) >= p(s*) p(u_i|s*), so -ln p(s*) accrues once
        # per reference position (EOS included)
        n_positions = len(utterance.split()) + 1
        bounds = []
        for hyp in hyps:
            single = cascaded_loss(
                model,
                GenerationInput(context=context, title=doc.doc_id, grounding=hyp.text),
                utterance,
            )
            bounds.append(single - n_positions * hyp.logprob)
        assert loss <= min(bounds) + 1e-9
