"""``tsnat`` command line: gen-corpus, train, decode, eval, dump-attention.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import DECODE_MODES, ConfigError, RunConfig, load_config
from .corpus import Corpus, generate_corpus, read_corpus, write_corpus, write_transcripts
from .inference import DecodeConfig, decode_utterance, measure_rtf, read_decode_file, write_decode_file
from .metrics import cer, corpus_cer
from .model import DecodeMode, TSNAT, load_checkpoint
from .training import fit
from .vocab import BOS, MASK

log = logging.getLogger("tsnat")


class UsageError(Exception):
    pass


def _read_corpus(path: Path) -> Corpus:
    if not Path(path).is_file():
        raise UsageError(f"corpus not found: {path}")
    return read_corpus(path)


def _check_compatible(cfg: RunConfig, corpus: Corpus) -> None:
    if cfg.model.vocab_size != len(corpus.vocab):
        raise ConfigError(f"model.vocab_size: {cfg.model.vocab_size} does not match the corpus vocabulary ({len(corpus.vocab)})")
    dim = corpus.utterances[0].frames.shape[1]
    if cfg.model.feature_dim != dim:
        raise ConfigError(f"model.feature_dim: {cfg.model.feature_dim} does not match the corpus features ({dim})")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    train = generate_corpus(cfg.task, cfg.n_train)
    dev = generate_corpus(cfg.task, cfg.n_dev, start=cfg.n_train)
    for path, corpus in ((cfg.paths.corpus, train), (cfg.paths.dev_corpus, dev)):
        path.parent.mkdir(parents=True, exist_ok=True)
        write_corpus(path, corpus)
        if args.transcripts:
            write_transcripts(path.with_suffix(".txt"), corpus)
        print(f"wrote {len(corpus)} utterances to {path}")
    return 0


def decode_corpus(model: TSNAT, corpus: Corpus, mode: str, dcfg: DecodeConfig, repeats: int = 1):
    """Decode every utterance sequentially; returns ``(rows, rtf)``."""
    results = {}

    def run(u):
        results[u.id] = decode_utterance(model, u.frames, mode, dcfg)

    rtf = measure_rtf(run, corpus.utterances, repeats)
    return [(u.id, results[u.id]) for u in corpus], rtf


def score_rows(rows, corpus: Corpus) -> float:
    refs = corpus.by_id()
    return corpus_cer((res.tokens, refs[uid].transcript) for uid, res in rows)


def cmd_train(args, cfg: RunConfig) -> int:
    corpus = _read_corpus(cfg.paths.corpus)
    _check_compatible(cfg, corpus)
    if not args.alpha_list:
        fit(corpus, cfg.model, cfg.train, out_dir=cfg.paths.out_dir)
        print(f"final checkpoint: {cfg.paths.out_dir / 'final.ckpt'}")
        return 0

    dev = _read_corpus(cfg.paths.dev_corpus)
    rows = []
    for alpha in args.alpha_list:
        out = cfg.paths.out_dir / f"alpha{alpha:g}"
        try:
            tcfg = replace(cfg.train, alpha=alpha)
        except ValueError as err:
            raise ConfigError(f"--alpha-list: {err}") from None
        model, _ = fit(corpus, cfg.model, tcfg, out_dir=out)
        row = [f"{alpha:g}"]
        for mode in ("greedy", "twostep"):
            decoded, _ = decode_corpus(model, dev, mode, cfg.decode)
            row.append(score_rows(decoded, dev))
        rows.append(row)
    print(_table(["alpha", "greedy_cer", f"twostep_n{cfg.decode.n_best}_cer"], rows))
    return 0


def cmd_decode(args, cfg: RunConfig) -> int:
    mode = args.mode or cfg.mode
    if mode == "arbeam" and (args.n is not None or args.n_list):
        raise UsageError("--n/--n-list select the N-best size of two-step decoding; use --beam with arbeam")
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.paths.out_dir / "final.ckpt"
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    corpus = _read_corpus(Path(args.corpus) if args.corpus else cfg.paths.dev_corpus)
    dcfg = cfg.decode
    if args.beam is not None:
        dcfg = replace(dcfg, beam=args.beam)
    if args.n is not None:
        dcfg = replace(dcfg, n_best=args.n)

    if args.n_list:
        rows = []
        greedy_rows, greedy_rtf = decode_corpus(model, corpus, "greedy", dcfg, args.rtf_repeats)
        rows.append(["greedy", score_rows(greedy_rows, corpus), greedy_rtf])
        for n in args.n_list:
            decoded, rtf = decode_corpus(model, corpus, "twostep", replace(dcfg, n_best=n), args.rtf_repeats)
            rows.append([f"twostep N={n}", score_rows(decoded, corpus), rtf])
        print(_table(["decoder", "cer", "rtf"], rows))
        return 0

    rows, rtf = decode_corpus(model, corpus, mode, dcfg, args.rtf_repeats)
    out = Path(args.out) if args.out else cfg.paths.out_dir / f"decode_{mode}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_decode_file(out, rows, corpus.vocab)
    summary = f"mode={mode} utts={len(rows)} rtf={rtf:.6f}"
    if all(u.transcript for u in corpus):
        summary = f"cer={score_rows(rows, corpus):.6f} " + summary
    print(f"wrote {out}")
    print(summary)
    return 0


def cmd_eval(args, cfg) -> int:
    corpus = _read_corpus(Path(args.corpus))
    if not Path(args.decode_file).is_file():
        raise UsageError(f"decode file not found: {args.decode_file}")
    hyps = read_decode_file(args.decode_file, corpus.vocab)
    refs = corpus.by_id()
    unknown = sorted(set(hyps) - set(refs))
    if unknown:
        raise ValueError(f"ids not in the reference corpus: {', '.join(unknown)}")
    for uid, res in hyps.items():
        print(f"{uid}\t{cer(res.tokens, refs[uid].transcript):.6f}")
    total = corpus_cer((res.tokens, refs[uid].transcript) for uid, res in hyps.items())
    print(f"cer={total:.6f} utts={len(hyps)}")
    return 0


def _write_pgm(path: Path, w: np.ndarray) -> None:
    """8-bit grayscale, each row scaled by its own maximum."""
    peak = w.max(axis=1, keepdims=True)
    img = np.rint(255.0 * np.divide(w, peak, out=np.zeros_like(w), where=peak > 0)).astype(np.uint8)
    h, wd = img.shape
    path.write_bytes(f"P5\n{wd} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    wd, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, wd)


def attention_maps(model: TSNAT, frames: np.ndarray, tokens) -> dict:
    """Head-averaged last-block decoder attention for both modes."""
    encoded, valid = model.encode([frames])
    inputs = {
        DecodeMode.AR: [[BOS] + list(tokens)],
        DecodeMode.NAR: [[MASK] * model.cfg.max_decode_len],
    }
    maps = {}
    for mode, tok in inputs.items():
        model.decoder_forward(tok, encoded, mode, valid, record=True)
        rec = model.attention
        if not rec.self_attn:
            raise ValueError("model has no decoder layers")
        maps[(mode.value, "self")] = rec.self_attn[-1][0].mean(axis=0)
        maps[(mode.value, "cross")] = rec.cross_attn[-1][0].mean(axis=0)
    return maps


def cmd_dump_attention(args, cfg: RunConfig) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.paths.out_dir / "final.ckpt"
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    corpus = _read_corpus(Path(args.corpus) if args.corpus else cfg.paths.dev_corpus)
    utts = corpus.by_id()
    if args.utt not in utts:
        raise UsageError(f"utterance {args.utt!r} not in {args.corpus or cfg.paths.dev_corpus}")
    u = utts[args.utt]
    out = Path(args.out) if args.out else cfg.paths.out_dir / "attention"
    out.mkdir(parents=True, exist_ok=True)
    for (mode, kind), w in attention_maps(model, u.frames, u.transcript).items():
        stem = out / f"{args.utt}_{mode}_{kind}"
        np.savetxt(stem.with_suffix(".csv"), w, delimiter=",", fmt="%.9g")
        _write_pgm(stem.with_suffix(".pgm"), w)
        print(f"wrote {stem}.csv {stem}.pgm")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsnat", description="Two-step non-autoregressive transformer toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch training metrics")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-corpus", help="generate the synthetic train and dev corpora")
    g.add_argument("--config", required=True)
    g.add_argument("--transcripts", action="store_true", help="also write id<TAB>tokens text files")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train and average the last checkpoints")
    t.add_argument("--config", required=True)
    t.add_argument("--alpha-list", type=_float_list, help="comma-separated sweep over the AR loss weight")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode a corpus and report CER and RTF")
    d.add_argument("--config", required=True)
    d.add_argument("--checkpoint")
    d.add_argument("--corpus", help="defaults to paths.dev_corpus")
    d.add_argument("--mode", choices=DECODE_MODES)
    d.add_argument("--n", type=int, help="N-best size for two-step decoding")
    d.add_argument("--n-list", type=_int_list, help="comma-separated N sweep (prints a table)")
    d.add_argument("--beam", type=int)
    d.add_argument("--out", help="decode file path")
    d.add_argument("--rtf-repeats", type=int, default=1, help="time the fastest of this many passes")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="score a decode file against a reference corpus")
    e.add_argument("decode_file")
    e.add_argument("--corpus", required=True)
    e.set_defaults(func=cmd_eval, config=None)

    a = sub.add_parser("dump-attention", help="export last-block decoder attention for both modes")
    a.add_argument("--config", required=True)
    a.add_argument("--checkpoint")
    a.add_argument("--corpus")
    a.add_argument("--utt", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_dump_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else None
        return args.func(args, cfg)
    except (ConfigError, UsageError) as err:
        print(f"tsnat {args.verb}: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"tsnat {args.verb}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
