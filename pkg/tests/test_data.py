
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_edit_distance
from tsnat.corpus import (
    CorpusFormatError,
    TaskConfig,
    Utterance,
    WrongFormatError,
    decode_corpus,
    default_mask_params,
    draw_masks,
    encode_corpus,
    generate_corpus,
    read_corpus,
    read_matrix,
    spec_mask,
    templates,
    write_corpus,
    write_matrix,
    write_transcripts,
)
from tsnat.metrics import cer, corpus_cer, edit_distance, speech_seconds
from tsnat.vocab import BOS, EOS, MASK, N_SPECIALS, PAD, UNK, Vocab


class TestVocab:
    def test_specials_first(self):
        v = Vocab.with_task_tokens(4)
        assert [v.id(s) for s in ("<PAD>", "<UNK>", "<BOS>", "<EOS>", "<MASK>")] == [PAD, UNK, BOS, EOS, MASK]
        assert list(v.task_ids) == [5, 6, 7, 8]

    def test_bijection(self):
        v = Vocab.with_task_tokens(10)
        assert v.encode(v.decode(range(len(v)))) == list(range(len(v)))

    def test_unknown_maps_to_unk(self):
        assert Vocab.with_task_tokens(2).id("nope") == UNK

    def test_rejects_bad_tables(self):
        with pytest.raises(ValueError):
            Vocab(("a", "b"))
        with pytest.raises(ValueError):
            Vocab(("<PAD>", "<UNK>", "<BOS>", "<EOS>", "<MASK>", "x", "x"))


class TestGenerateCorpus:
    def test_deterministic_bytes(self):
        cfg = TaskConfig(seed=11)
        assert encode_corpus(generate_corpus(cfg, 20)) == encode_corpus(generate_corpus(cfg, 20))

    def test_utterance_depends_only_on_index(self):
        cfg = TaskConfig(seed=3)
        whole = generate_corpus(cfg, 10)
        tail = generate_corpus(cfg, 4, start=6)
        assert whole.utterances[6:] == tail.utterances

    def test_shapes_and_ranges(self):
        cfg = TaskConfig(seed=5)
        for u in generate_corpus(cfg, 50):
            assert cfg.min_len <= len(u.transcript) <= cfg.max_len
            assert all(N_SPECIALS <= t < N_SPECIALS + cfg.task_vocab_size for t in u.transcript)
            n = len(u.transcript)
            assert 2 * n <= u.num_frames <= 4 * n
            assert u.frames.shape[1] == cfg.feature_dim and u.frames.dtype == np.float32

    def test_noiseless_frames_are_templates(self):
        cfg = TaskConfig(seed=2, noise_std=0.0)
        tmpl = templates(cfg).astype(np.float32)
        for u in generate_corpus(cfg, 20):
            # every frame equals the template of some token of its transcript, in order
            rows = [int(np.argmin(np.abs(tmpl - f).sum(axis=1))) for f in u.frames]
            assert all(np.array_equal(f, tmpl[r]) for f, r in zip(u.frames, rows))
            collapsed = [r for i, r in enumerate(rows) if i == 0 or r != rows[i - 1]]
            expected = [t - N_SPECIALS for i, t in enumerate(u.transcript)
                        if i == 0 or t != u.transcript[i - 1]]
            assert collapsed == expected

    def test_nearest_template_oracle_recovers_transcripts(self):
        cfg = TaskConfig(seed=9, noise_std=0.0, min_frames_per_token=2, max_frames_per_token=2)
        tmpl = templates(cfg)
        errors = []
        for u in generate_corpus(cfg, 100):
            d = ((u.frames[:, None, :] - tmpl[None]) ** 2).sum(-1)
            labels = d.argmin(axis=1) + N_SPECIALS
            hyp = list(labels[::2])
            errors.append(cer(hyp, u.transcript))
        assert max(errors) == 0.0

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TaskConfig(min_len=5, max_len=4)
        with pytest.raises(ValueError):
            TaskConfig(noise_std=-1)
        with pytest.raises(ValueError):
            generate_corpus(TaskConfig(), 0)


class TestSpecMask:
    @pytest.fixture
    def frames(self):
        return np.random.default_rng(0).uniform(1, 2, size=(30, 8))

    def test_no_masks_is_identity(self, frames):
        out = spec_mask(frames, 0, 3, 0, 2, np.random.default_rng(1))
        np.testing.assert_array_equal(out, frames)

    def test_full_time_mask(self, frames):
        out = spec_mask(frames, 1, 30, 0, 1, np.random.default_rng(1), fixed_width=True)
        np.testing.assert_array_equal(out, 0.0)

    def test_zeroed_counts_match_drawn_spans(self, frames):
        for seed in range(20):
            out = spec_mask(frames, 2, 5, 1, 3, np.random.default_rng(seed))
            t_spans, f_spans = draw_masks(30, 8, 2, 5, 1, 3, np.random.default_rng(seed))
            rows = set().union(*[range(s, s + w) for s, w in t_spans])
            cols = set().union(*[range(s, s + w) for s, w in f_spans])
            assert set(np.nonzero(np.all(out == 0, axis=1))[0]) == rows
            assert set(np.nonzero(np.all(out == 0, axis=0))[0]) == cols
            untouched = np.ones_like(frames, dtype=bool)
            untouched[list(rows), :] = False
            untouched[:, list(cols)] = False
            np.testing.assert_array_equal(out[untouched], frames[untouched])

    def test_input_not_modified(self, frames):
        before = frames.copy()
        spec_mask(frames, 2, 5, 1, 3, np.random.default_rng(0))
        np.testing.assert_array_equal(frames, before)

    def test_width_bound(self, frames):
        with pytest.raises(ValueError):
            spec_mask(frames, 1, 31, 0, 1, np.random.default_rng(0))

    def test_defaults(self):
        assert default_mask_params(100, 20) == dict(n_time_masks=2, max_time_width=10, n_freq_masks=1, max_freq_width=2)
        assert default_mask_params(5, 4)["max_time_width"] == 1


class TestCER:
    def test_identical(self):
        assert cer([5, 6, 7], [5, 6, 7]) == 0.0

    def test_all_deletions(self):
        assert cer([], [5, 6, 7, 8, 9]) == 1.0

    def test_empty_reference(self):
        with pytest.raises(ValueError):
            cer([1], [])

    def test_matches_brute_force_edit_scripts(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = list(rng.integers(0, 3, size=rng.integers(0, 7)))
            b = list(rng.integers(0, 3, size=rng.integers(1, 7)))
            assert edit_distance(a, b) == brute_force_edit_distance(a, b)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 2), max_size=6), st.lists(st.integers(0, 2), min_size=1, max_size=6),
           st.permutations([0, 1, 2]))
    def test_relabeling_invariance(self, a, b, perm):
        relabel = lambda s: [perm[x] for x in s]
        assert cer(relabel(a), relabel(b)) == cer(a, b)

    @settings(max_examples=100, deadline=None)
    @given(*[st.lists(st.integers(0, 2), max_size=6)] * 3)
    def test_metric_axioms(self, a, b, c):
        assert edit_distance(a, b) == edit_distance(b, a)
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
        assert (edit_distance(a, b) == 0) == (a == b)

    def test_corpus_cer(self):
        refs = [[5] * 10 for _ in range(10)]
        hyps = [list(r) for r in refs]
        hyps[3][4] = 6
        assert corpus_cer(zip(hyps, refs)) == pytest.approx(0.01)

    def test_speech_seconds(self):
        assert speech_seconds(np.zeros((250, 3))) == pytest.approx(2.5)


class TestCorpusIO:
    @pytest.fixture
    def corpus(self):
        return generate_corpus(TaskConfig(seed=4), 15)

    def test_round_trip(self, corpus, tmp_path):
        path = tmp_path / "c.bin"
        write_corpus(path, corpus)
        back = read_corpus(path)
        assert back.vocab == corpus.vocab
        assert back.utterances == corpus.utterances

    def test_truncated(self, corpus):
        buf = encode_corpus(corpus)
        for cut in (5, 20, len(buf) // 2, len(buf) - 1):
            with pytest.raises(CorpusFormatError) as info:
                decode_corpus(buf[:cut])
            assert not isinstance(info.value, WrongFormatError) or cut < 8
            assert "offset" in str(info.value)

    def test_wrong_magic(self, corpus):
        buf = bytearray(encode_corpus(corpus))
        buf[0:8] = b"NOTACORP"
        with pytest.raises(WrongFormatError, match="wrong format"):
            decode_corpus(bytes(buf))

    def test_trailing_bytes(self, corpus):
        with pytest.raises(CorpusFormatError, match="trailing"):
            decode_corpus(encode_corpus(corpus) + b"\0")

    def test_special_in_transcript_rejected(self):
        with pytest.raises(ValueError):
            Utterance("x", np.zeros((4, 2), np.float32), [EOS])

    def test_transcript_export(self, corpus, tmp_path):
        path = tmp_path / "t.txt"
        write_transcripts(path, corpus)
        lines = path.read_text().splitlines()
        uid, toks = lines[0].split("\t")
        assert uid == corpus.utterances[0].id
        assert corpus.vocab.encode(toks.split()) == corpus.utterances[0].transcript

    def test_matrix_record(self, tmp_path):
        m = np.arange(12, dtype=np.float32).reshape(3, 4) - 5.5
        write_matrix(tmp_path / "g.bin", m)
        np.testing.assert_array_equal(read_matrix(tmp_path / "g.bin"), m)
