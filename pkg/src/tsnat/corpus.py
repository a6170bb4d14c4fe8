"""Synthetic pseudo-speech corpus, feature masking and the binary corpus container.

Each task token owns a fixed random template vector.  An utterance renders
its transcript token by token, holding each template for a random number of
frames and adding Gaussian noise, so the encoder has to learn a many-to-one
frame/token alignment much like real speech.

Container layout (all integers little-endian uint32)::

    magic  b"TSNATCRP"  | version | n_symbols | (len, utf8)*
    n_utts | per utterance: (len, utf8 id) T F  float32[T*F]  L  uint32[L]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import N_SPECIALS, Vocab

MAGIC = b"TSNATCRP"
GRAPH_MAGIC = b"TSNATGRF"
VERSION = 1


class CorpusFormatError(ValueError):
    """Malformed or truncated container; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class WrongFormatError(CorpusFormatError):
    """The file does not start with the expected magic bytes."""


@dataclass
class TaskConfig:
    task_vocab_size: int = 16
    feature_dim: int = 20
    min_len: int = 3
    max_len: int = 12
    min_frames_per_token: int = 2
    max_frames_per_token: int = 4
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.task_vocab_size < 1 or self.feature_dim < 1:
            raise ValueError("task_vocab_size and feature_dim must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("transcript length range is empty")
        if not 1 <= self.min_frames_per_token <= self.max_frames_per_token:
            raise ValueError("frames-per-token range is empty")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class Utterance:
    id: str
    frames: np.ndarray  # (T, F) float32
    transcript: list

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"{self.id}: frames must be a non-empty T x F matrix")
        if len(self.transcript) < 1:
            raise ValueError(f"{self.id}: empty transcript")
        if any(t < N_SPECIALS for t in self.transcript):
            raise ValueError(f"{self.id}: transcript contains special ids")

    def __eq__(self, other):
        return (
            isinstance(other, Utterance)
            and self.id == other.id
            and list(self.transcript) == list(other.transcript)
            and self.frames.dtype == other.frames.dtype
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class Corpus:
    vocab: Vocab
    utterances: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def by_id(self) -> dict:
        return {u.id: u for u in self.utterances}


def templates(cfg: TaskConfig) -> np.ndarray:
    """One template row per task token (row i belongs to id ``N_SPECIALS + i``)."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    return rng.standard_normal((cfg.task_vocab_size, cfg.feature_dim))


def render_utterance(cfg: TaskConfig, tmpl: np.ndarray, index: int) -> Utterance:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, index)))
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    tokens = rng.integers(0, cfg.task_vocab_size, size=length)
    durations = rng.integers(cfg.min_frames_per_token, cfg.max_frames_per_token + 1, size=length)
    frames = np.repeat(tmpl[tokens], durations, axis=0)
    frames = frames + cfg.noise_std * rng.standard_normal(frames.shape)
    return Utterance(
        id=f"utt{index:06d}",
        frames=frames.astype(np.float32),
        transcript=[int(t) + N_SPECIALS for t in tokens],
    )


def generate_corpus(cfg: TaskConfig, n_utts: int, start: int = 0) -> Corpus:
    """Utterances ``start .. start+n_utts-1``; utterance i depends only on (cfg, i)."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    tmpl = templates(cfg)
    vocab = Vocab.with_task_tokens(cfg.task_vocab_size)
    return Corpus(vocab, [render_utterance(cfg, tmpl, i) for i in range(start, start + n_utts)])


# ---------------------------------------------------------------------------
# time / frequency masking


def default_mask_params(num_frames: int, feature_dim: int) -> dict:
    return dict(
        n_time_masks=2,
        max_time_width=max(1, num_frames // 10),
        n_freq_masks=1,
        max_freq_width=max(1, feature_dim // 8),
    )


def draw_masks(num_frames, feature_dim, n_time_masks, max_time_width, n_freq_masks,
               max_freq_width, rng, fixed_width=False):
    """Return ``(time_spans, freq_spans)`` as lists of ``(start, width)``."""
    if max_time_width > num_frames or max_freq_width > feature_dim:
        raise ValueError("mask width exceeds the masked dimension")

    def spans(n, max_w, size):
        out = []
        for _ in range(n):
            w = max_w if fixed_width else int(rng.integers(0, max_w + 1))
            out.append((int(rng.integers(0, size - w + 1)), w))
        return out

    return spans(n_time_masks, max_time_width, num_frames), spans(n_freq_masks, max_freq_width, feature_dim)


def spec_mask(frames, n_time_masks, max_time_width, n_freq_masks, max_freq_width, rng,
              fixed_width=False) -> np.ndarray:
    """Zero random contiguous time spans and feature channels of a copy of ``frames``.

    Widths are uniform in ``[0, max_width]`` unless ``fixed_width`` is set.
    """
    out = np.array(frames, copy=True)
    t_spans, f_spans = draw_masks(out.shape[0], out.shape[1], n_time_masks, max_time_width,
                                  n_freq_masks, max_freq_width, rng, fixed_width)
    for s, w in t_spans:
        out[s:s + w, :] = 0
    for s, w in f_spans:
        out[:, s:s + w] = 0
    return out


# ---------------------------------------------------------------------------
# binary container


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def matrix_record(m: np.ndarray) -> bytes:
    m = np.ascontiguousarray(m, dtype="<f4")
    return _u32(m.shape[0]) + _u32(m.shape[1]) + m.tobytes()


def encode_corpus(corpus: Corpus) -> bytes:
    parts = [MAGIC, _u32(VERSION), _u32(len(corpus.vocab))]
    parts += [_text(s) for s in corpus.vocab.symbols]
    parts.append(_u32(len(corpus)))
    for u in corpus:
        parts.append(_text(u.id))
        parts.append(matrix_record(u.frames))
        parts.append(_u32(len(u.transcript)))
        parts.append(np.asarray(u.transcript, dtype="<u4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorpusFormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        start = self.pos
        raw = self.take(self.u32(what), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CorpusFormatError(f"invalid utf-8 in {what}", start) from None

    def matrix(self, what: str) -> np.ndarray:
        rows, cols = self.u32(what), self.u32(what)
        raw = self.take(4 * rows * cols, what)
        return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32)

    def header(self, magic: bytes) -> None:
        got = self.buf[:len(magic)]
        if got != magic:
            raise WrongFormatError(f"wrong format: expected magic {magic!r}, got {got!r}", 0)
        self.pos = len(magic)
        version = self.u32("version")
        if version != VERSION:
            raise CorpusFormatError(f"unsupported version {version}", self.pos - 4)


def decode_corpus(buf: bytes) -> Corpus:
    r = _Reader(buf)
    r.header(MAGIC)
    n_sym = r.u32("vocab size")
    start = r.pos
    try:
        vocab = Vocab(tuple(r.text("vocab symbol") for _ in range(n_sym)))
    except ValueError as err:
        if isinstance(err, CorpusFormatError):
            raise
        raise CorpusFormatError(f"bad vocab block: {err}", start) from None
    utts = []
    for _ in range(r.u32("utterance count")):
        rec = r.pos
        uid = r.text("utterance id")
        frames = r.matrix("frames")
        n_tok = r.u32("transcript length")
        tokens = np.frombuffer(r.take(4 * n_tok, "transcript"), dtype="<u4")
        try:
            utts.append(Utterance(uid, frames, [int(t) for t in tokens]))
        except ValueError as err:
            raise CorpusFormatError(f"invalid utterance record: {err}", rec) from None
    if r.pos != len(buf):
        raise CorpusFormatError("trailing bytes after last record", r.pos)
    return Corpus(vocab, utts)


def write_corpus(path, corpus: Corpus) -> None:
    Path(path).write_bytes(encode_corpus(corpus))


def read_corpus(path) -> Corpus:
    return decode_corpus(Path(path).read_bytes())


def write_transcripts(path, corpus: Corpus) -> None:
    """Plain-text ``id<TAB>tokens`` export for inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        for u in corpus:
            fh.write(f"{u.id}\t{' '.join(corpus.vocab.decode(u.transcript))}\n")


def write_matrix(path, m: np.ndarray) -> None:
    """Dump one matrix (e.g. a NAR probability graph) as a matrix record."""
    Path(path).write_bytes(GRAPH_MAGIC + _u32(VERSION) + matrix_record(m))


def read_matrix(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    r.header(GRAPH_MAGIC)
    m = r.matrix("matrix")
    if r.pos != len(r.buf):
        raise CorpusFormatError("trailing bytes after matrix", r.pos)
    return m

