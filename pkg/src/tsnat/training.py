"""Dual-forward joint training.

The encoder runs once per batch and the decoder twice (AR with teacher
forcing, NAR from ``<MASK>`` input); the loss is
``(1 - alpha) * L_NAR + alpha * L_AR``.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import Corpus, spec_mask
from .model import DecodeMode, ModelConfig, TSNAT, read_checkpoint, save_checkpoint
from .tensor import Tape, Tensor
from .vocab import BOS, EOS, MASK, PAD, is_special

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.7
    warmup_steps: int = 1000
    epochs: int = 20
    batch_size: int = 32
    avg_last_k: int = 5
    seed: int = 0
    lr_scale: float = 1.0
    n_time_masks: int = 2
    time_mask_frac: float = 0.1
    n_freq_masks: int = 1
    freq_mask_frac: float = 0.125
    # "fixed": MASK x max_decode_len, as at inference; "target": MASK over targets+EOS, PAD after
    nar_input: str = "fixed"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 1 <= self.avg_last_k <= self.epochs:
            raise ValueError("avg_last_k must be in [1, epochs]")
        if self.lr_scale < 0:
            raise ValueError("lr_scale must be >= 0")
        if self.nar_input not in ("target", "fixed"):
            raise ValueError(f"nar_input must be 'target' or 'fixed', got {self.nar_input!r}")


def _check_targets(targets: Sequence[int]) -> list:
    targets = list(targets)
    if not targets:
        raise ValueError("targets must be non-empty")
    if any(is_special(t) for t in targets):
        raise ValueError(f"targets contain special ids: {targets}")
    return targets


def make_ar_pair(targets: Sequence[int]) -> tuple[list, list]:
    targets = _check_targets(targets)
    return [BOS] + targets, targets + [EOS]


def make_nar_pair(targets: Sequence[int]) -> tuple[list, list]:
    targets = _check_targets(targets)
    return [MASK] * (len(targets) + 1), targets + [EOS]


def _pad(seqs, length: int) -> np.ndarray:
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class Batch:
    frames: list  # per-utterance T x F float64 matrices, possibly masked
    ar_in: np.ndarray
    ar_out: np.ndarray
    nar_in: np.ndarray
    nar_out: np.ndarray

    @property
    def frame_lengths(self) -> np.ndarray:
        return np.array([f.shape[0] for f in self.frames])

    @property
    def target_lengths(self) -> np.ndarray:
        return (self.ar_out != PAD).sum(axis=1) - 1


def make_batch(utts, nar_input: str = "target", nar_len: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, cfg: Optional[TrainConfig] = None) -> Batch:
    """Assemble padded AR/NAR inputs and targets; masks features when ``rng`` is given."""
    frames = []
    for u in utts:
        f = np.asarray(u.frames, dtype=np.float64)
        if rng is not None and cfg is not None:
            n, d = f.shape
            f = spec_mask(f, cfg.n_time_masks, max(1, int(n * cfg.time_mask_frac)),
                          cfg.n_freq_masks, max(1, int(d * cfg.freq_mask_frac)), rng)
        frames.append(f)
    ar = [make_ar_pair(u.transcript) for u in utts]
    nar = [make_nar_pair(u.transcript) for u in utts]
    length = max(len(a[0]) for a in ar)
    if nar_input == "fixed":
        if nar_len is None or nar_len < length:
            raise ValueError(f"fixed NAR input length {nar_len} shorter than target length {length}")
        nar_in = np.full((len(utts), nar_len), MASK, dtype=np.int64)
        nar_out = _pad([n[1] for n in nar], nar_len)
    else:
        nar_in = _pad([n[0] for n in nar], length)
        nar_out = _pad([n[1] for n in nar], length)
    return Batch(frames, _pad([a[0] for a in ar], length), _pad([a[1] for a in ar], length), nar_in, nar_out)


class JointLoss(NamedTuple):
    loss: Tensor
    ar: Tensor
    nar: Tensor


def joint_loss(batch: Batch, model: TSNAT, alpha: float) -> JointLoss:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    encoded, valid = model.encode(batch.frames)
    ar_logits = model.decoder_forward(batch.ar_in, encoded, DecodeMode.AR, valid)
    nar_logits = model.decoder_forward(batch.nar_in, encoded, DecodeMode.NAR, valid)
    l_ar = T.cross_entropy(ar_logits, batch.ar_out, PAD)
    l_nar = T.cross_entropy(nar_logits, batch.nar_out, PAD)
    loss = T.add(T.scale(l_nar, 1.0 - alpha), T.scale(l_ar, alpha))
    return JointLoss(loss, l_ar, l_nar)


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("noam_lr: step must be >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr != 0.0:
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def bucket_batches(corpus: Corpus, batch_size: int) -> list[list]:
    """Sort by frame count (then id) and cut into consecutive batches."""
    order = sorted(corpus.utterances, key=lambda u: (u.num_frames, u.id))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train_epoch(corpus: Corpus, model: TSNAT, opt: Adam, cfg: TrainConfig, epoch: int = 0) -> dict:
    """One pass over the shuffled length buckets.  Returns averaged metrics."""
    batches = bucket_batches(corpus, cfg.batch_size)
    order_rng = np.random.default_rng([cfg.seed, epoch, 0])
    mask_rng = np.random.default_rng([cfg.seed, epoch, 1])
    model.train(np.random.default_rng([cfg.seed, epoch, 2]))
    totals = np.zeros(3)
    lr = 0.0
    try:
        for n, bi in enumerate(order_rng.permutation(len(batches))):
            batch = make_batch(batches[bi], cfg.nar_input, model.cfg.max_decode_len, mask_rng, cfg)
            model.zero_grad()
            with Tape() as tape:
                out = joint_loss(batch, model, cfg.alpha)
            vals = (out.loss.item(), out.ar.item(), out.nar.item())
            if not np.all(np.isfinite(vals)):
                raise TrainingDivergedError(
                    f"epoch {epoch} batch {n}: loss={vals[0]} L_AR={vals[1]} L_NAR={vals[2]} "
                    f"at optimizer step {opt.step_count}, lr={lr:.3g}")
            T.backward(out.loss, tape)
            lr = noam_lr(opt.step_count + 1, model.cfg.d_model, cfg.warmup_steps, cfg.lr_scale)
            opt.step(lr)
            totals += vals
    finally:
        model.eval()
    avg = totals / len(batches)
    return {"loss": avg[0], "L_AR": avg[1], "L_NAR": avg[2], "lr": lr}


def average_states(states: Sequence[dict]) -> dict:
    if not states:
        raise ValueError("need at least one state to average")
    names = set(states[0])
    for s in states[1:]:
        if set(s) != names:
            raise ValueError("checkpoints have different parameter names")
    # running mean: identical inputs come back bit-for-bit
    avg = {k: np.array(v, dtype=np.float64, copy=True) for k, v in states[0].items()}
    for n, s in enumerate(states[1:], 2):
        for k in avg:
            avg[k] += (s[k] - avg[k]) / n
    return avg


def average_checkpoints(paths: Sequence) -> tuple[ModelConfig, dict]:
    """Elementwise mean of the parameters stored in ``paths``."""
    if not paths:
        raise ValueError("need at least one checkpoint")
    loaded = [read_checkpoint(p) for p in paths]
    cfg = loaded[0][0]
    for c, _ in loaded[1:]:
        if c != cfg:
            raise ValueError("checkpoint configs differ")
    return cfg, average_states([s for _, s in loaded])


METRIC_FIELDS = ("epoch", "loss", "L_AR", "L_NAR", "lr", "wall_secs")


def fit(corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None,
        model_seed: Optional[int] = None) -> tuple[TSNAT, list]:
    """Train for ``cfg.epochs`` and return the model holding the averaged last-K parameters.

    With ``out_dir`` set, per-epoch checkpoints, ``metrics.csv`` and
    ``final.ckpt`` (the average) are written there.
    """
    model = TSNAT(model_cfg, seed=cfg.seed if model_seed is None else model_seed)
    opt = Adam(model.params)
    recent: deque = deque(maxlen=cfg.avg_last_k)
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        m = train_epoch(corpus, model, opt, cfg, epoch)
        m["epoch"] = epoch
        m["wall_secs"] = time.perf_counter() - t0
        history.append(m)
        log.info("epoch %d loss %.4f L_AR %.4f L_NAR %.4f lr %.2e (%.1fs)",
                 epoch, m["loss"], m["L_AR"], m["L_NAR"], m["lr"], m["wall_secs"])
        recent.append(model.state_dict())
        if out is not None:
            save_checkpoint(out / f"epoch{epoch:03d}.ckpt", model)
            with open(out / "metrics.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([m[k] for k in METRIC_FIELDS])
    model.load_state_dict(average_states(list(recent)))
    if out is not None:
        save_checkpoint(out / "final.ckpt", model)
    return model, history
