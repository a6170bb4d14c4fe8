"""Two-step NAR transformer: front end, acoustic encoder, dual-mode decoder.

The decoder is one set of weights run in two modes.  ``AR`` applies a
strictly causal self-attention mask and expects ``<BOS>``-initial input;
``NAR`` applies no causal mask and expects an all-``<MASK>`` input.  Layers
are post-norm (sublayer -> dropout -> residual -> layer norm) and the
feed-forward block is ``GLU(x W1 + b1) W2 + b2`` with ``W1: d_model -> 2*d_ff``.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vocab import BOS, MASK, PAD

CKPT_MAGIC = b"TSNATCKP"
CKPT_VERSION = 1


class UtteranceTooShortError(ValueError):
    pass


class DecodeContractError(ValueError):
    """Decoder input violates the mode's contract (e.g. AR input without <BOS>)."""


class DecodeMode(enum.Enum):
    AR = "ar"
    NAR = "nar"


@dataclass(frozen=True)
class ModelConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 4
    vocab_size: int = 21
    max_decode_len: int = 16
    frontend: str = "conv"
    feature_dim: int = 20
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_ff < 1:
            raise ValueError("d_ff must be >= 1")
        if self.max_decode_len < 2:
            raise ValueError("max_decode_len must be >= 2")
        if self.frontend not in ("conv", "linear-splice"):
            raise ValueError(f"unknown frontend kind {self.frontend!r}")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


# 4234 characters + <EOS> + <MASK>
_AISHELL_VOCAB = 4236

PRESETS = {
    "TSNAT-Toy": ModelConfig(),
    "TSNAT-Small": ModelConfig(12, 6, 384, 384, 4, _AISHELL_VOCAB, 60, "conv", 80),
    "TSNAT-Middle": ModelConfig(12, 6, 512, 512, 4, _AISHELL_VOCAB, 60, "conv", 80),
    "TSNAT-Big": ModelConfig(12, 6, 512, 512, 4, _AISHELL_VOCAB, 60, "conv", 80),
}


def preset(name: str, **overrides) -> ModelConfig:
    return replace(PRESETS[name], **overrides)


@dataclass
class AttentionRecord:
    """Per-layer attention weights ``[B, H, Lq, Lk]`` of the latest decoder pass."""

    mode: DecodeMode
    self_attn: list = field(default_factory=list)
    cross_attn: list = field(default_factory=list)


_PE_CACHE: dict = {}


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    if length < 1:
        raise ValueError("length must be >= 1")
    key = (length, d_model)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(length)[:, None]
        two_i = np.arange(0, d_model, 2)
        angle = pos / np.power(10000.0, two_i / d_model)
        pe = np.zeros((length, d_model))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
        pe.setflags(write=False)
        _PE_CACHE[key] = pe
    return pe


def conv_out_len(n: int) -> int:
    """Length after one kernel-3, stride-2, pad-1 convolution."""
    return (n + 1) // 2


def subsampled_lengths(lengths, kind: str) -> np.ndarray:
    lengths = np.asarray(lengths)
    if kind == "conv":
        return (((lengths + 1) // 2) + 1) // 2
    return lengths // 4


def pad_frames(frames: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in frames])
    out = np.zeros((len(frames), lengths.max(), frames[0].shape[1]))
    for i, f in enumerate(frames):
        out[i, : f.shape[0]] = f
    return out, lengths


def pad_tokens(seqs: Sequence[Sequence[int]], length: Optional[int] = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


class TSNAT:
    """Parameters and forward passes.  ``params`` maps names to leaf tensors."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.training = False
        self.rng: Optional[np.random.Generator] = None
        self.encoder_calls = 0
        self.attention: Optional[AttentionRecord] = None
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _linear_init(self, name: str, d_in: int, d_out: int, rng) -> None:
        a = math.sqrt(6.0 / (d_in + d_out))
        self._add(f"{name}.w", rng.uniform(-a, a, size=(d_in, d_out)))
        self._add(f"{name}.b", np.zeros(d_out))

    def _ln_init(self, name: str, d: int) -> None:
        self._add(f"{name}.g", np.ones(d))
        self._add(f"{name}.b", np.zeros(d))

    def _mha_init(self, name: str, rng) -> None:
        d = self.cfg.d_model
        for p in "qkvo":
            self._linear_init(f"{name}.{p}", d, d, rng)

    def _ffn_init(self, name: str, rng) -> None:
        c = self.cfg
        self._linear_init(f"{name}.w1", c.d_model, 2 * c.d_ff, rng)
        self._linear_init(f"{name}.w2", c.d_ff, c.d_model, rng)

    def _init_params(self, rng) -> None:
        c = self.cfg
        if c.frontend == "conv":
            self._linear_init("front.conv1", 3 * c.feature_dim, c.d_model, rng)
            self._linear_init("front.conv2", 3 * c.d_model, c.d_model, rng)
            self._linear_init("front.proj", c.d_model, c.d_model, rng)
        else:
            self._linear_init("front.splice", 4 * c.feature_dim, c.d_model, rng)
        for i in range(c.n_enc_layers):
            self._mha_init(f"enc.{i}.self", rng)
            self._ln_init(f"enc.{i}.ln1", c.d_model)
            self._ffn_init(f"enc.{i}.ffn", rng)
            self._ln_init(f"enc.{i}.ln2", c.d_model)
        self._add("dec.embed", rng.standard_normal((c.vocab_size, c.d_model)) / math.sqrt(c.d_model))
        for i in range(c.n_dec_layers):
            self._mha_init(f"dec.{i}.self", rng)
            self._ln_init(f"dec.{i}.ln1", c.d_model)
            self._mha_init(f"dec.{i}.cross", rng)
            self._ln_init(f"dec.{i}.ln2", c.d_model)
            self._ffn_init(f"dec.{i}.ffn", rng)
            self._ln_init(f"dec.{i}.ln3", c.d_model)
        self._linear_init("dec.out", c.d_model, c.vocab_size, rng)

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("parameter names do not match the model")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def train(self, rng: np.random.Generator) -> None:
        self.training, self.rng = True, rng

    def eval(self) -> None:
        self.training, self.rng = False, None

    # -- building blocks ----------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        lead = x.shape[:-1]
        y = T.matmul(T.reshape(x, (-1, x.shape[-1])), w)
        return T.reshape(T.add(y, b), lead + (w.shape[1],))

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x: Tensor) -> Tensor:
        if not self.training:
            return x
        return T.dropout(x, self.cfg.dropout, self.rng)

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        return self._linear(T.glu(self._linear(x, f"{name}.w1")), f"{name}.w2")

    def multi_head_attention(self, name, q_in, kv_in, key_valid=None, causal=False, record=None):
        """Scaled dot-product attention over ``n_heads`` heads.

        ``key_valid`` is a boolean ``[B, Lk]`` array; invalid keys and (when
        ``causal``) future keys get a -inf score before the softmax.
        """
        h = self.cfg.n_heads
        b, lq, d = q_in.shape
        lk = kv_in.shape[1]
        dk = d // h
        q = T.transpose(T.reshape(self._linear(q_in, f"{name}.q"), (b, lq, h, dk)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self._linear(kv_in, f"{name}.k"), (b, lk, h, dk)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self._linear(kv_in, f"{name}.v"), (b, lk, h, dk)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(dk))
        mask = None
        if key_valid is not None:
            mask = ~np.asarray(key_valid, dtype=bool)[:, None, None, :]
        if causal:
            future = np.triu(np.ones((lq, lk), dtype=bool), k=1)
            mask = future if mask is None else (mask | future)
        if mask is not None:
            scores = T.masked_fill(scores, mask)
        weights = T.softmax_lastdim(scores)
        if record is not None:
            record.append(weights.data)
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, lq, d))
        return self._linear(ctx, f"{name}.o")

    # -- front end and encoder ---------------------------------------------

    def frontend_forward(self, frames: np.ndarray, lengths) -> tuple[Tensor, np.ndarray]:
        """``frames[B, T, F]`` (zero padded) -> ``([B, T', d_model], lengths')``."""
        lengths = np.asarray(lengths)
        if lengths.min() < 4:
            raise UtteranceTooShortError(f"utterance too short: {int(lengths.min())} frames, need >= 4")
        x = Tensor(frames)
        if self.cfg.frontend == "linear-splice":
            b, t, f = frames.shape
            t4 = t // 4
            x = T.reshape(Tensor(frames[:, : 4 * t4]), (b, t4, 4 * f))
            return self._linear(x, "front.splice"), lengths // 4
        for layer in ("front.conv1", "front.conv2"):
            lengths = conv_out_len(lengths)
            x = T.relu(self._linear(T.frame_unfold(x, 3, 2, 1), layer))
            valid = np.arange(x.shape[1])[None, :] < lengths[:, None]
            if not valid.all():
                # zero padded steps so the next layer sees the same zeros an unpadded input would
                x = T.mul(x, Tensor(valid[:, :, None].astype(np.float64)))
        return self._linear(x, "front.proj"), lengths

    def encoder_forward(self, x: Tensor, key_valid: Optional[np.ndarray] = None) -> Tensor:
        """Encoder blocks only; positional encoding is added by :meth:`encode`."""
        self.encoder_calls += 1
        for i in range(self.cfg.n_enc_layers):
            p = f"enc.{i}"
            x = self._ln(T.add(x, self._drop(self.multi_head_attention(f"{p}.self", x, x, key_valid))), f"{p}.ln1")
            x = self._ln(T.add(x, self._drop(self._ffn(x, f"{p}.ffn"))), f"{p}.ln2")
        return x

    def encode(self, frames_list: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        """Front end + encoder on a list of ``T x F`` matrices.  Returns encoded and key-valid mask."""
        frames, lengths = pad_frames(frames_list)
        x, out_len = self.frontend_forward(frames, lengths)
        x = self._drop(T.add(x, Tensor(positional_encoding(x.shape[1], self.cfg.d_model))))
        valid = np.arange(x.shape[1])[None, :] < out_len[:, None]
        return self.encoder_forward(x, valid), valid

    # -- decoder ------------------------------------------------------------

    def decoder_forward(self, tokens, encoded: Tensor, mode: DecodeMode,
                        enc_valid: Optional[np.ndarray] = None, record: bool = False) -> Tensor:
        """Token ids ``[B, L]`` -> logits ``[B, L, vocab_size]``.

        ``encoded`` may have batch size 1 and is then shared by every row.
        """
        c = self.cfg
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if mode is DecodeMode.AR:
            if not np.all(tokens[:, 0] == BOS):
                raise DecodeContractError("AR decoder input must begin with <BOS>")
        elif np.any((tokens != MASK) & (tokens != PAD)):
            raise DecodeContractError("NAR decoder input must be all <MASK> (PAD allowed as padding)")
        b, length = tokens.shape
        if encoded.shape[0] != b:
            if encoded.shape[0] != 1:
                raise T.DimensionError(f"batch mismatch: tokens {tokens.shape} vs encoded {encoded.shape}")
            encoded = Tensor(np.broadcast_to(encoded.data, (b,) + encoded.shape[1:])) \
                if not encoded.requires_grad else _repeat_batch(encoded, b)
            if enc_valid is not None:
                enc_valid = np.broadcast_to(enc_valid, (b, enc_valid.shape[1]))
        rec = AttentionRecord(mode) if record else None
        x = T.scale(T.embedding(self.params["dec.embed"], tokens), math.sqrt(c.d_model))
        x = self._drop(T.add(x, Tensor(positional_encoding(length, c.d_model))))
        key_valid = tokens != PAD
        causal = mode is DecodeMode.AR
        for i in range(c.n_dec_layers):
            p = f"dec.{i}"
            a = self.multi_head_attention(f"{p}.self", x, x, key_valid, causal, rec.self_attn if rec else None)
            x = self._ln(T.add(x, self._drop(a)), f"{p}.ln1")
            a = self.multi_head_attention(f"{p}.cross", x, encoded, enc_valid, False, rec.cross_attn if rec else None)
            x = self._ln(T.add(x, self._drop(a)), f"{p}.ln2")
            x = self._ln(T.add(x, self._drop(self._ffn(x, f"{p}.ffn"))), f"{p}.ln3")
        if rec is not None:
            self.attention = rec
        return self._linear(x, "dec.out")


def _repeat_batch(x: Tensor, b: int) -> Tensor:
    return T.add(x, Tensor(np.zeros((b,) + x.shape[1:])))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: TSNAT) -> None:
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a TSNAT checkpoint")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, n_cfg = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = ModelConfig(**json.loads(take(n_cfg).decode("utf-8")))
    state = {}
    (n_params,) = struct.unpack("<I", take(4))
    for _ in range(n_params):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return cfg, state


def load_checkpoint(path) -> TSNAT:
    cfg, state = read_checkpoint(path)
    model = TSNAT(cfg)
    model.load_state_dict(state)
    return model
