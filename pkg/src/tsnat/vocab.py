"""Token table with the five reserved specials at ids 0..4."""

from __future__ import annotations

from dataclasses import dataclass, field

PAD, UNK, BOS, EOS, MASK = 0, 1, 2, 3, 4
SPECIALS = ("<PAD>", "<UNK>", "<BOS>", "<EOS>", "<MASK>")
N_SPECIALS = len(SPECIALS)


@dataclass(frozen=True)
class Vocab:
    symbols: tuple
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        syms = tuple(self.symbols)
        if syms[:N_SPECIALS] != SPECIALS:
            raise ValueError(f"vocab must start with {SPECIALS}")
        if len(set(syms)) != len(syms):
            raise ValueError("duplicate symbols in vocab")
        object.__setattr__(self, "symbols", syms)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(syms)})

    @classmethod
    def with_task_tokens(cls, n: int) -> "Vocab":
        return cls(SPECIALS + tuple(f"c{i}" for i in range(n)))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def task_ids(self) -> range:
        return range(N_SPECIALS, len(self.symbols))

    def id(self, symbol: str) -> int:
        return self._index.get(symbol, UNK)

    def encode(self, symbols) -> list[int]:
        return [self.id(s) for s in symbols]

    def decode(self, ids) -> list[str]:
        return [self.symbols[i] for i in ids]


def is_special(token: int) -> bool:
    return 0 <= token < N_SPECIALS
