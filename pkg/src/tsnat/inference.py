"""Decoding: one-step NAR greedy, N-best pre-selection plus AR rescoring, AR beam search.

A hypothesis ``y_1..y_l`` read off the NAR probability graph takes token
``y_i`` from row ``i`` and ``<EOS>`` from row ``l+1``; its score is the summed
log-probability divided by ``l+1``.  The AR rescore uses the same
denominator so both scores live on one scale.  Interior tokens never include
special ids.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .metrics import speech_seconds
from .model import DecodeMode, TSNAT
from .tensor import Tensor
from .vocab import BOS, EOS, MASK, N_SPECIALS, PAD


@dataclass
class ProbGraph:
    logprobs: np.ndarray  # (L_max, V)

    def __post_init__(self):
        if self.logprobs.ndim != 2:
            raise ValueError("ProbGraph needs an L x V matrix")

    @property
    def max_len(self) -> int:
        return self.logprobs.shape[0]

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "ProbGraph":
        return cls(log_softmax(logits))


@dataclass
class Hypothesis:
    tokens: tuple
    nar_score: float
    ar_score: Optional[float] = None


@dataclass
class DecodeConfig:
    n_best: int = 10
    beam: int = 10
    max_decode_len: Optional[int] = None  # None: the model's max_decode_len
    nar_weight: float = 0.0  # final score = (1-w)*ar + w*nar; 0 selects on the AR score alone

    def __post_init__(self):
        if self.n_best < 1 or self.beam < 1:
            raise ValueError("n_best and beam must be >= 1")
        if not 0.0 <= self.nar_weight <= 1.0:
            raise ValueError("nar_weight must be in [0, 1]")


@dataclass
class DecodeResult:
    tokens: tuple
    nar_score: Optional[float] = None
    ar_score: Optional[float] = None
    candidates: list = field(default_factory=list)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _encoded(model: TSNAT, frames: np.ndarray) -> tuple[Tensor, np.ndarray]:
    return model.encode([np.asarray(frames, dtype=np.float64)])


def nar_graph(model: TSNAT, encoded: Tensor, enc_valid: Optional[np.ndarray] = None,
              max_len: Optional[int] = None) -> ProbGraph:
    """One NAR pass over ``[MASK] * L_max``; rows are log-distributions."""
    length = max_len or model.cfg.max_decode_len
    logits = model.decoder_forward(np.full((1, length), MASK), encoded, DecodeMode.NAR, enc_valid)
    return ProbGraph.from_logits(logits.data[0])


def path_score(graph: ProbGraph, tokens: Sequence[int]) -> float:
    """Length-normalised NAR score; a path using every row has no EOS term."""
    lp = graph.logprobs
    s = 0.0
    for i, t in enumerate(tokens):
        s += lp[i, t]
    if len(tokens) < graph.max_len:
        s += lp[len(tokens), EOS]
        return s / (len(tokens) + 1)
    return s / len(tokens)


def greedy_decode(graph: ProbGraph) -> tuple:
    """Row-wise argmax over ``<EOS>`` and task tokens, cut at the first ``<EOS>``.

    Ties go to the smaller id.  Without any ``<EOS>`` all rows are returned.
    """
    lp = graph.logprobs.copy()
    lp[:, :N_SPECIALS] = -np.inf
    lp[:, EOS] = graph.logprobs[:, EOS]
    best = lp.argmax(axis=1)
    out = []
    for t in best:
        if t == EOS:
            break
        out.append(int(t))
    return tuple(out)


def nbest_from_graph(graph: ProbGraph, n: int) -> list[Hypothesis]:
    """Exact top-``n`` EOS-terminated paths by length-normalised score.

    For every end row a best-first search over per-row sorted candidates
    yields that length's best ``n`` paths; the union is then ranked by
    (score desc, shorter first, lexicographic tokens).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lp = graph.logprobs
    n_rows = graph.max_len
    task = lp[:, N_SPECIALS:]
    k = min(n, task.shape[1])
    found: list[tuple] = []
    if k == 0:
        return [Hypothesis((), lp[0, EOS])]
    order = np.argsort(-task, axis=1, kind="stable")[:, :k]
    vals = np.take_along_axis(task, order, axis=1).tolist()
    toks = (order + N_SPECIALS).tolist()
    for end in range(1, n_rows + 1):
        ell = end - 1
        eos = lp[ell, EOS]

        def entry(ranks):
            s = 0.0
            for i in range(ell):
                s += vals[i][ranks[i]]
            s += eos
            return (-(s / end), tuple(toks[i][ranks[i]] for i in range(ell)), ranks)

        start = (0,) * ell
        heap = [entry(start)]
        seen = {start}
        taken = 0
        while heap and taken < n:
            neg, tokens, ranks = heapq.heappop(heap)
            found.append((-neg, tokens))
            taken += 1
            for i in range(ell):
                if ranks[i] + 1 < k:
                    child = ranks[:i] + (ranks[i] + 1,) + ranks[i + 1:]
                    if child not in seen:
                        seen.add(child)
                        heapq.heappush(heap, entry(child))
    found.sort(key=lambda x: (-x[0], len(x[1]), x[1]))
    return [Hypothesis(tokens, score) for score, tokens in found[:n]]


def ar_rescore(model: TSNAT, encoded: Tensor, hyps: list[Hypothesis],
               enc_valid: Optional[np.ndarray] = None) -> list[Hypothesis]:
    """Fill ``ar_score`` for every hypothesis with one batched, teacher-forced AR pass."""
    if not hyps:
        raise ValueError("ar_rescore needs at least one hypothesis")
    limit = model.cfg.max_decode_len - 1
    for h in hyps:
        if len(h.tokens) > limit:
            raise ValueError(f"hypothesis of length {len(h.tokens)} exceeds max_decode_len - 1 = {limit}")
    width = max(len(h.tokens) for h in hyps) + 1
    inputs = np.full((len(hyps), width), PAD, dtype=np.int64)
    for i, h in enumerate(hyps):
        inputs[i, : len(h.tokens) + 1] = (BOS,) + tuple(h.tokens)
    logp = log_softmax(model.decoder_forward(inputs, encoded, DecodeMode.AR, enc_valid).data)
    for i, h in enumerate(hyps):
        s = 0.0
        for j, t in enumerate(tuple(h.tokens) + (EOS,)):
            s += logp[i, j, t]
        h.ar_score = s / (len(h.tokens) + 1)
    return hyps


def _final_key(h: Hypothesis, nar_weight: float):
    score = (1.0 - nar_weight) * h.ar_score + nar_weight * h.nar_score
    return (-score, -h.nar_score, len(h.tokens), tuple(h.tokens))


def two_step_decode(model: TSNAT, frames: np.ndarray, cfg: DecodeConfig) -> DecodeResult:
    """NAR pre-selection of ``n_best`` paths, then AR rescoring; ``n_best == 1`` is greedy."""
    encoded, valid = _encoded(model, frames)
    graph = nar_graph(model, encoded, valid, cfg.max_decode_len)
    if cfg.n_best == 1:
        tokens = greedy_decode(graph)
        return DecodeResult(tokens, path_score(graph, tokens))
    hyps = ar_rescore(model, encoded, nbest_from_graph(graph, cfg.n_best), valid)
    best = min(hyps, key=lambda h: _final_key(h, cfg.nar_weight))
    return DecodeResult(tuple(best.tokens), best.nar_score, best.ar_score, hyps)


def greedy_nar(model: TSNAT, frames: np.ndarray, cfg: Optional[DecodeConfig] = None) -> DecodeResult:
    encoded, valid = _encoded(model, frames)
    graph = nar_graph(model, encoded, valid, cfg.max_decode_len if cfg else None)
    tokens = greedy_decode(graph)
    return DecodeResult(tokens, path_score(graph, tokens))


def _allowed_mask(vocab_size: int) -> np.ndarray:
    m = np.zeros(vocab_size, dtype=bool)
    m[N_SPECIALS:] = True
    m[EOS] = True
    return m


def ar_greedy(model: TSNAT, encoded: Tensor, max_len: int, enc_valid=None) -> tuple[tuple, float]:
    """Step-by-step AR argmax decoding; at most ``max_len - 1`` tokens before a forced EOS."""
    allowed = _allowed_mask(model.cfg.vocab_size)
    tokens: list = []
    s = 0.0
    while True:
        logits = model.decoder_forward([[BOS] + tokens], encoded, DecodeMode.AR, enc_valid).data
        lp = log_softmax(logits[0, -1])
        if len(tokens) == max_len - 1:
            t = EOS
        else:
            t = int(np.where(allowed, lp, -np.inf).argmax())
        s += lp[t]
        if t == EOS:
            return tuple(tokens), s / (len(tokens) + 1)
        tokens.append(t)


def ar_beam_search(model: TSNAT, encoded: Tensor, beam: int, max_len: int,
                   enc_valid=None) -> tuple[tuple, float]:
    """Length-normalised AR beam search.

    All alive prefixes are expanded by ``<EOS>`` and every task token; the
    best ``beam`` expansions by summed log-probability survive, and those
    ending in ``<EOS>`` are finished.  Returns the finished hypothesis with the
    best normalised score (ties: shorter, then lexicographic).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    allowed = np.nonzero(_allowed_mask(model.cfg.vocab_size))[0]
    alive: list[tuple[tuple, float]] = [((), 0.0)]
    finished: list[tuple[float, tuple]] = []
    while alive:
        inputs = np.array([(BOS,) + t for t, _ in alive], dtype=np.int64)
        lp = log_softmax(model.decoder_forward(inputs, encoded, DecodeMode.AR, enc_valid).data[:, -1])
        cands = []
        for i, (t, s) in enumerate(alive):
            options = (EOS,) if len(t) == max_len - 1 else allowed
            for tok in options:
                cands.append((-(s + lp[i, tok]), t + (int(tok),)))
        cands.sort()
        alive = []
        for neg, seq in cands[:beam]:
            if seq[-1] == EOS:
                finished.append((-neg / len(seq), seq[:-1]))
            else:
                alive.append((seq, -neg))
    score, tokens = min(finished, key=lambda x: (-x[0], len(x[1]), x[1]))
    return tokens, score


def decode_utterance(model: TSNAT, frames: np.ndarray, mode: str, cfg: DecodeConfig) -> DecodeResult:
    if mode == "greedy":
        return greedy_nar(model, frames, cfg)
    if mode == "twostep":
        return two_step_decode(model, frames, cfg)
    if mode == "arbeam":
        encoded, valid = _encoded(model, frames)
        tokens, score = ar_beam_search(model, encoded, cfg.beam, cfg.max_decode_len or model.cfg.max_decode_len, valid)
        return DecodeResult(tokens, None, score)
    raise ValueError(f"unknown decode mode {mode!r}")


def measure_rtf(decode_fn: Callable, utterances: Iterable, repeats: int = 1) -> float:
    """Wall-clock decode seconds per second of speech, decoding one utterance at a time.

    With ``repeats > 1`` the fastest full pass is used, which suppresses
    scheduler noise without changing what is measured.
    """
    utts = list(utterances)
    if not utts:
        raise ValueError("measure_rtf needs a non-empty corpus")
    audio = sum(speech_seconds(u.frames) for u in utts)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for u in utts:
            decode_fn(u)
        best = min(best, time.perf_counter() - t0)
    return best / audio


# ---------------------------------------------------------------------------
# decode files: id<TAB>tokens<TAB>nar_score<TAB>ar_score


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else repr(float(x))


def write_decode_file(path, rows: Iterable[tuple], vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid, res in rows:
            fh.write(f"{uid}\t{' '.join(vocab.decode(res.tokens))}\t{_fmt(res.nar_score)}\t{_fmt(res.ar_score)}\n")


def read_decode_file(path, vocab) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            uid, toks, nar, ar = parts
            tokens = tuple(vocab.encode(toks.split())) if toks else ()
            out[uid] = DecodeResult(tokens, None if nar == "-" else float(nar), None if ar == "-" else float(ar))
    return out
