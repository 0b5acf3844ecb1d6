"""CTC loss over the blank-augmented label lattice, and greedy decoding."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InfeasibleAlignmentError
from .numerics import Tensor, custom_op

BLANK = 0
NEG_INF = -np.inf


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target`` (a blank must separate repeats)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target: Sequence[int]) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.intp)
    ext[1::2] = target
    return ext


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]],
                   lengths: Sequence[int] | None = None) -> Tensor:
    """Per-utterance CTC negative log-likelihoods, shape ``[B]``.

    ``log_probs`` is ``[B, T, V]``; frames at or beyond ``lengths[b]`` are ignored.
    The gradient w.r.t. ``log_probs`` is minus the state occupancy, so it is
    exact for arbitrary (not necessarily normalised) inputs.
    """
    lp = log_probs.data
    B, T, V = lp.shape
    lengths = np.full(B, T, dtype=np.intp) if lengths is None else np.asarray(lengths, dtype=np.intp)
    for b, tgt in enumerate(targets):
        if any(tok == BLANK or not 0 < tok < V for tok in tgt):
            raise ValueError(f"target {b} has tokens outside [1, {V}): {list(tgt)}")
        need = min_frames(tgt)
        if lengths[b] < max(need, 1):
            raise InfeasibleAlignmentError(
                f"utterance {b}: target of length {len(tgt)} needs {need} frames, got {lengths[b]}")

    S = 2 * max(len(t) for t in targets) + 1
    ext = np.zeros((B, S), dtype=np.intp)
    n_states = np.empty(B, dtype=np.intp)
    for b, tgt in enumerate(targets):
        e = _extend(tgt)
        ext[b, :len(e)] = e
        n_states[b] = len(e)
    valid = np.arange(S)[None, :] < n_states[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid

    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
        acc[:, 2:] = np.logaddexp(acc[:, 2:], np.where(skip[:, 2:], prev[:, :-2], NEG_INF))
        alpha[:, t] = acc + emit[:, t]

    rows = np.arange(B)
    last = lengths - 1
    end = alpha[rows, last, n_states - 1]
    before = np.where(n_states >= 2, alpha[rows, last, np.maximum(n_states - 2, 0)], NEG_INF)
    log_like = np.logaddexp(end, before)
    if np.isneginf(log_like).any():
        raise InfeasibleAlignmentError("no alignment has non-zero probability")

    def backward(g):
        beta = np.full((B, T, S), NEG_INF)
        final = np.full((B, S), NEG_INF)
        final[rows, n_states - 1] = 0.0
        final[rows, np.maximum(n_states - 2, 0)] = np.where(n_states >= 2, 0.0, final[rows, 0])
        nxt = np.full((B, S), NEG_INF)
        for t in range(T - 1, -1, -1):
            acc = nxt.copy()
            acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
            acc[:, :-2] = np.logaddexp(acc[:, :-2], np.where(skip[:, 2:], nxt[:, 2:], NEG_INF))
            here = np.where((t == last)[:, None], final, acc)
            here = np.where((t > last)[:, None], NEG_INF, here) + emit[:, t]
            beta[:, t] = here
            nxt = here
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta - emit - log_like[:, None, None])
        occ = np.where(np.isfinite(emit), occ, 0.0)
        occ[np.arange(T)[None, :] >= lengths[:, None]] = 0.0
        grad = np.zeros_like(lp)
        b_idx = np.broadcast_to(rows[:, None, None], (B, T, S))
        t_idx = np.broadcast_to(np.arange(T)[None, :, None], (B, T, S))
        k_idx = np.broadcast_to(ext[:, None, :], (B, T, S))
        np.add.at(grad, (b_idx, t_idx, k_idx), occ)
        return (-grad * g[:, None, None],)

    return custom_op("ctc_loss", -log_like, (log_probs,), backward)


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """Single-utterance CTC loss for ``log_probs`` of shape ``[T, V]``."""
    from .numerics import reshape, sum as tsum

    T, V = log_probs.shape
    batched = reshape(log_probs, (1, T, V))
    return tsum(ctc_loss_batch(batched, [list(target)]))


def greedy_path_collapse(path: Sequence[int]) -> list[int]:
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != BLANK:
            out.append(int(tok))
        prev = tok
    return out


def ctc_greedy_decode(log_probs, length: int | None = None) -> list[int]:
    """Best-path decoding: per-frame argmax, merge repeats, drop blanks."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if length is not None:
        data = data[:length]
    return greedy_path_collapse(np.argmax(data, axis=-1))


def ctc_greedy_decode_batch(log_probs, lengths: Sequence[int]) -> list[list[int]]:
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = np.argmax(data, axis=-1)
    return [greedy_path_collapse(best[b, :n]) for b, n in enumerate(lengths)]
