"""Independent oracles shared by the test modules."""

import itertools

import numpy as np

from tsnat import tensor as T
from tsnat.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of the scalar function ``f`` w.r.t. ``x`` (perturbed in place).

    ``entries`` restricts the check to a list of flat indices; other entries stay NaN.
    """
    g = np.full(x.shape, np.nan)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error; below ``floor`` the absolute error is returned.

    Central differences carry roundoff of roughly ``eps * |f| / h`` (about 1e-10
    for a loss near 4 at h=1e-5), so gradients that are exactly zero (e.g. key
    biases, which softmax ignores) need a floor above that level.
    """
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < floor:
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / denom)


def analytic_grads(build, leaves):
    """Run ``build()`` under a fresh tape and backprop; returns grads of ``leaves``."""
    for t in leaves:
        t.zero_grad()
    with Tape() as tape:
        loss = build()
    T.backward(loss, tape)
    return [t.grad.copy() for t in leaves]


def check_op_grads(build, leaves, h=1e-5, entries=None):
    """Largest relative error between analytic and finite-difference gradients."""
    ana = analytic_grads(build, leaves)
    worst = 0.0
    for t, a in zip(leaves, ana):
        num = numeric_grad(lambda: float(build().data), t.data, h, entries)
        mask = ~np.isnan(num)
        worst = max(worst, rel_err(a[mask], num[mask]))
    return worst


def weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(y, Tensor(w)))


def brute_force_nbest(logprobs, n, eos, first_task):
    """Enumerate every EOS-terminated path and rank it (score desc, shorter, lexicographic)."""
    rows, vocab = logprobs.shape
    task = range(first_task, vocab)
    paths = []
    for ell in range(rows):
        for toks in itertools.product(task, repeat=ell):
            s = 0.0
            for i, t in enumerate(toks):
                s += logprobs[i, t]
            s += logprobs[ell, eos]
            paths.append((s / (ell + 1), toks))
    paths.sort(key=lambda p: (-p[0], len(p[1]), p[1]))
    return paths[:n]


def brute_force_edit_distance(hyp, ref):
    """Shortest edit script found by breadth-first search over (i, j) alignment states."""
    from collections import deque

    start = (0, 0)
    dist = {start: 0}
    queue = deque([start])
    best = None
    # 0-1 BFS: matches cost 0, every edit costs 1
    while queue:
        i, j = queue.popleft()
        d = dist[(i, j)]
        if (i, j) == (len(hyp), len(ref)):
            best = d if best is None else min(best, d)
            continue
        moves = []
        if i < len(hyp) and j < len(ref):
            moves.append(((i + 1, j + 1), 0 if hyp[i] == ref[j] else 1))
        if i < len(hyp):
            moves.append(((i + 1, j), 1))
        if j < len(ref):
            moves.append(((i, j + 1), 1))
        for nxt, c in moves:
            if nxt not in dist or dist[nxt] > d + c:
                dist[nxt] = d + c
                if c == 0:
                    queue.appendleft(nxt)
                else:
                    queue.append(nxt)
    return dist[(len(hyp), len(ref))]
