import itertools
import time

import numpy as np
import pytest

from helpers import brute_force_nbest
from tsnat.corpus import TaskConfig, generate_corpus
from tsnat.inference import (
    DecodeConfig,
    DecodeResult,
    Hypothesis,
    ProbGraph,
    ar_beam_search,
    ar_greedy,
    ar_rescore,
    greedy_decode,
    greedy_nar,
    log_softmax,
    measure_rtf,
    nar_graph,
    nbest_from_graph,
    path_score,
    read_decode_file,
    two_step_decode,
    write_decode_file,
)
from tsnat.model import DecodeMode, ModelConfig, TSNAT
from tsnat.vocab import BOS, EOS, N_SPECIALS, Vocab


def random_graph(rng, rows, n_task, temperature=1.0):
    return ProbGraph(log_softmax(rng.standard_normal((rows, N_SPECIALS + n_task)) * temperature))


@pytest.fixture(scope="module")
def model():
    return TSNAT(ModelConfig(dropout=0.0, max_decode_len=8), seed=7)


@pytest.fixture(scope="module")
def utt():
    return generate_corpus(TaskConfig(seed=1), 1).utterances[0]


@pytest.fixture(scope="module")
def encoded(model, utt):
    return model.encode([utt.frames])


class TestNarGraph:
    def test_rows_normalised_and_shape(self, model, encoded):
        g = nar_graph(model, *encoded)
        assert g.logprobs.shape == (8, model.cfg.vocab_size)
        np.testing.assert_allclose(np.logaddexp.reduce(g.logprobs, axis=1), 0.0, atol=1e-9)

    def test_deterministic(self, model, encoded):
        a, b = nar_graph(model, *encoded), nar_graph(model, *encoded)
        assert a.logprobs.tobytes() == b.logprobs.tobytes()


class TestGreedy:
    def test_immediate_eos(self):
        lp = np.full((3, 9), -5.0)
        lp[0, EOS] = -0.1
        lp[1:, 6] = -0.1
        assert greedy_decode(ProbGraph(lp)) == ()

    def test_hand_built(self):
        # columns 0..4 specials, 5..8 task tokens
        lp = np.log(np.array([
            [0.30, 0.00, 0.00, 0.05, 0.30, 0.10, 0.20, 0.05, 0.00],  # PAD/MASK ignored -> 6
            [0.00, 0.40, 0.00, 0.10, 0.00, 0.05, 0.05, 0.10, 0.30],  # UNK ignored -> 8
            [0.00, 0.00, 0.00, 0.50, 0.00, 0.20, 0.10, 0.10, 0.10],  # EOS
        ]) + 1e-300)
        assert greedy_decode(ProbGraph(lp)) == (6, 8)

    def test_ties_go_to_smaller_id(self):
        lp = np.full((2, 8), -3.0)
        lp[0, [5, 6, 7]] = -0.5
        lp[1, [EOS, 7]] = -0.5
        assert greedy_decode(ProbGraph(lp)) == (5,)

    def test_no_eos_returns_every_row(self):
        lp = np.full((3, 7), -9.0)
        lp[:, 6] = -0.01
        g = ProbGraph(lp)
        assert greedy_decode(g) == (6, 6, 6)
        assert path_score(g, (6, 6, 6)) == pytest.approx(-0.01)


class TestNBest:
    def test_uniform_two_by_two(self):
        g = ProbGraph(np.full((2, N_SPECIALS + 2), -np.log(N_SPECIALS + 2)))
        got = nbest_from_graph(g, 10)
        want = brute_force_nbest(g.logprobs, 10, EOS, N_SPECIALS)
        assert [h.tokens for h in got] == [(), (5,), (6,)] == [t for _, t in want]
        assert len({h.nar_score for h in got}) == 1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            rows, n_task = int(rng.integers(1, 5)), int(rng.integers(1, 7))
            n = int(rng.integers(1, 13))
            g = random_graph(rng, rows, n_task, temperature=float(rng.uniform(0.5, 3)))
            got = nbest_from_graph(g, n)
            want = brute_force_nbest(g.logprobs, n, EOS, N_SPECIALS)
            assert [h.tokens for h in got] == [t for _, t in want], trial
            np.testing.assert_allclose([h.nar_score for h in got], [s for s, _ in want], rtol=0, atol=1e-9)

    def test_scores_non_increasing(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            scores = [h.nar_score for h in nbest_from_graph(random_graph(rng, 10, 12), 50)]
            assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_n_one_equals_greedy_when_greedy_is_optimal(self):
        rng = np.random.default_rng(2)
        checked = 0
        for _ in range(300):
            g = random_graph(rng, 4, 5, temperature=3.0)
            greedy = greedy_decode(g)
            best_score, best = brute_force_nbest(g.logprobs, 1, EOS, N_SPECIALS)[0]
            if len(greedy) < 4 and best == greedy:
                checked += 1
                assert nbest_from_graph(g, 1)[0].tokens == greedy
        assert checked > 20

    def test_per_length_argmax_invariant_to_row_shift(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            g = random_graph(rng, 4, 4)
            row, c = int(rng.integers(0, 4)), float(rng.uniform(-3, 3))
            shifted = g.logprobs.copy()
            shifted[row] += c
            everything = 1 + 4 + 16 + 64
            best = lambda graph, ell: next(h.tokens for h in nbest_from_graph(graph, everything) if len(h.tokens) == ell)
            for ell in range(row, 4):  # paths of length ell end at row ell >= the shifted row
                assert best(g, ell) == best(ProbGraph(shifted), ell)

    def test_interior_tokens_are_never_special(self):
        rng = np.random.default_rng(4)
        lp = rng.standard_normal((5, 11))
        lp[:, :N_SPECIALS] += 10  # specials dominate every row
        for h in nbest_from_graph(ProbGraph(log_softmax(lp)), 30):
            assert all(t >= N_SPECIALS for t in h.tokens)


def incremental_ar_score(model, encoded, valid, tokens):
    """Re-run the decoder once per prefix and read the next-token log-probability."""
    s = 0.0
    full = list(tokens) + [EOS]
    for j in range(len(full)):
        logits = model.decoder_forward([[BOS] + list(tokens[:j])], encoded, DecodeMode.AR, valid).data
        s += log_softmax(logits[0, -1])[full[j]]
    return s / len(full)


class TestRescore:
    def test_single_batched_vs_alone(self, model, encoded):
        hyps = [Hypothesis((5, 9, 6), 0.0), Hypothesis((7,), 0.0), Hypothesis((8, 8, 8, 8, 8), 0.0)]
        batched = [h.ar_score for h in ar_rescore(model, *encoded[:1], hyps, encoded[1])]
        for h, s in zip(hyps, batched):
            alone = ar_rescore(model, encoded[0], [Hypothesis(h.tokens, 0.0)], encoded[1])[0].ar_score
            assert abs(alone - s) < 1e-9

    def test_empty_hypothesis(self, model, encoded):
        enc, valid = encoded
        h = ar_rescore(model, enc, [Hypothesis((), 0.0)], valid)[0]
        logits = model.decoder_forward([[BOS]], enc, DecodeMode.AR, valid).data
        assert h.ar_score == pytest.approx(log_softmax(logits[0, 0])[EOS], abs=1e-12)

    def test_matches_incremental_decode(self, model, encoded):
        rng = np.random.default_rng(5)
        hyps = [Hypothesis(tuple(int(t) for t in rng.integers(5, 21, size=rng.integers(0, 8))), 0.0) for _ in range(6)]
        ar_rescore(model, encoded[0], hyps, encoded[1])
        for h in hyps:
            assert abs(h.ar_score - incremental_ar_score(model, *encoded, h.tokens)) < 1e-9

    def test_too_long(self, model, encoded):
        with pytest.raises(ValueError):
            ar_rescore(model, encoded[0], [Hypothesis(tuple([5] * 8), 0.0)], encoded[1])


class TestTwoStep:
    def test_n_one_is_greedy(self, model, utt):
        res = two_step_decode(model, utt.frames, DecodeConfig(n_best=1))
        assert res.tokens == greedy_nar(model, utt.frames).tokens

    def test_result_is_in_nbest(self, model, utt):
        res = two_step_decode(model, utt.frames, DecodeConfig(n_best=10))
        assert res.tokens in [h.tokens for h in res.candidates]
        assert res.ar_score == max(h.ar_score for h in res.candidates)

    def test_deterministic(self, model, utt):
        a = two_step_decode(model, utt.frames, DecodeConfig(n_best=5))
        b = two_step_decode(model, utt.frames, DecodeConfig(n_best=5))
        assert (a.tokens, a.nar_score, a.ar_score) == (b.tokens, b.nar_score, b.ar_score)

    def test_nar_weight_one_selects_nar_best(self, model, utt):
        res = two_step_decode(model, utt.frames, DecodeConfig(n_best=10, nar_weight=1.0))
        assert res.tokens == res.candidates[0].tokens


@pytest.fixture(scope="module")
def tiny_ar():
    """Four task tokens and at most three tokens before EOS."""
    cfg = ModelConfig(vocab_size=N_SPECIALS + 4, max_decode_len=4, dropout=0.0, d_model=32, d_ff=32)
    return cfg


def exhaustive_best(model, encoded, valid, n_task, max_tokens):
    seqs = [s for ell in range(max_tokens + 1) for s in itertools.product(range(N_SPECIALS, N_SPECIALS + n_task), repeat=ell)]
    hyps = ar_rescore(model, encoded, [Hypothesis(s, 0.0) for s in seqs], valid)
    best = min(hyps, key=lambda h: (-h.ar_score, len(h.tokens), h.tokens))
    return best.tokens, best.ar_score


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(4))
    def test_beam_one_is_greedy(self, tiny_ar, utt, seed):
        m = TSNAT(tiny_ar, seed=seed)
        enc, valid = m.encode([utt.frames])
        assert ar_beam_search(m, enc, 1, 4, valid) == ar_greedy(m, enc, 4, valid)

    @pytest.mark.parametrize("seed", range(4))
    def test_wide_beam_is_exhaustive(self, tiny_ar, utt, seed):
        m = TSNAT(tiny_ar, seed=seed)
        for p in m.params.values():  # sharpen the distributions so lengths and tokens differ
            p.data *= 1.5
        enc, valid = m.encode([utt.frames])
        tokens, score = ar_beam_search(m, enc, 64, 4, valid)
        best_tokens, best_score = exhaustive_best(m, enc, valid, 4, 3)
        assert tokens == best_tokens
        assert score == pytest.approx(best_score, abs=1e-9)

    def test_beam_dominates_greedy(self, model, encoded):
        _, greedy_score = ar_greedy(model, encoded[0], 8, encoded[1])
        for beam in (2, 5, 10):
            _, score = ar_beam_search(model, encoded[0], beam, 8, encoded[1])
            assert score >= greedy_score - 1e-12


class TestRTF:
    def test_sleep_stub(self):
        utts = generate_corpus(TaskConfig(seed=0, min_len=12, max_len=12, min_frames_per_token=4, max_frames_per_token=4), 4)
        audio = sum(u.num_frames for u in utts) * 0.01

        def stub(u):
            time.sleep(0.01 * u.num_frames * 0.01)

        rtf = measure_rtf(stub, utts, repeats=2)
        assert 0.01 <= rtf < 0.01 + 0.005 / audio * len(utts) + 0.003

    def test_empty(self):
        with pytest.raises(ValueError):
            measure_rtf(lambda u: None, [])


def test_decode_file_round_trip(tmp_path):
    vocab = Vocab.with_task_tokens(4)
    rows = [("u1", DecodeResult((5, 8), -0.25, -0.5)), ("u2", DecodeResult((), -1.0, None))]
    write_decode_file(tmp_path / "d.txt", rows, vocab)
    back = read_decode_file(tmp_path / "d.txt", vocab)
    assert back["u1"] == rows[0][1]
    assert back["u2"] == rows[1][1]
    assert (tmp_path / "d.txt").read_text().splitlines()[0] == "u1\tc0 c3\t-0.25\t-0.5"
