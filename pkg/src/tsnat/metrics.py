"""Edit-distance metrics and speech-duration accounting."""

from __future__ import annotations

from typing import Sequence

import numpy as np

FRAME_SHIFT_SECONDS = 0.01


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit insertion, deletion and substitution costs."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def cer(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("cer: empty reference")
    return edit_distance(hyp, ref) / len(ref)


def corpus_cer(pairs) -> float:
    """Sum of edit distances over sum of reference lengths."""
    errors = total = 0
    for hyp, ref in pairs:
        if len(ref) == 0:
            raise ValueError("cer: empty reference")
        errors += edit_distance(hyp, ref)
        total += len(ref)
    if total == 0:
        raise ValueError("cer: no references")
    return errors / total


def speech_seconds(frames: np.ndarray) -> float:
    return frames.shape[0] * FRAME_SHIFT_SECONDS
