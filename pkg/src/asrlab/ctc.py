"""CTC loss and decoders over a T x V log-probability lattice.

Blank is id 0 and the collapse rule is: merge adjacent repeats, then drop
blanks. The loss is the standard alpha recursion over the blank-interleaved
label sequence, built from autograd ops so backward yields exact gradients.
A brute-force path enumerator serves as an independent oracle for small
instances. Batch reduction is mean over utterances, sum over time within
each utterance.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

BLANK = 0
NEG_INF = -1.0e30  # log(0) stand-in that keeps gradients finite


class CtcInfeasibleError(ValueError):
    """Target cannot be emitted in the available number of frames."""


@dataclass
class Hypothesis:
    ids: list[int]
    score: float  # log-probability, <= 0
    kind: str  # "greedy" | "beam"


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge adjacent repeats, then remove blanks."""
    out: list[int] = []
    prev = None
    for p in path:
        if p != prev:
            if p != BLANK:
                out.append(p)
            prev = p
    return tuple(out)


def _count_repeats(target: Sequence[int]) -> int:
    return sum(1 for a, b in zip(target, target[1:]) if a == b)


def _check_feasible(num_frames: int, target: Sequence[int]) -> None:
    need = len(target) + _count_repeats(target)
    if num_frames < need:
        raise CtcInfeasibleError(
            f"target infeasible: frames={num_frames}, length={len(target)}, "
            f"repeats={_count_repeats(target)}"
        )


def ctc_loss(lattice: Tensor, target: Sequence[int], length: int | None = None) -> Tensor:
    """Negative log-probability of ``target`` under a (T, V) lattice of
    per-frame log-distributions; differentiable w.r.t. the lattice."""
    if lattice.data.ndim != 2:
        raise ValueError(f"lattice must be (T, V), got {lattice.shape}")
    t_total, vocab = lattice.shape
    length = t_total if length is None else int(length)
    if not 1 <= length <= t_total:
        raise ValueError(f"length {length} out of range 1..{t_total}")
    target = [int(x) for x in target]
    for x in target:
        if not 1 <= x < vocab:
            raise ValueError(f"target id {x} outside 1..{vocab - 1}")
    _check_feasible(length, target)

    ext = [BLANK]
    for x in target:
        ext.extend((x, BLANK))
    s = len(ext)
    ext_arr = np.array(ext)

    valid = ag.slice_axis(lattice, 0, 0, length)
    emissions = ag.take(valid, ext_arr, axis=1)  # (length, S)

    skip_blocked = np.ones(s, dtype=bool)
    for i in range(2, s):
        if ext[i] != BLANK and ext[i] != ext[i - 2]:
            skip_blocked[i] = False

    init_mask = np.ones(s, dtype=bool)
    init_mask[: min(2, s)] = False
    alpha = ag.masked_fill(ag.reshape(ag.slice_axis(emissions, 0, 0, 1), (s,)),
                           init_mask, NEG_INF)

    pad1 = Tensor(np.full(1, NEG_INF))
    pad2 = Tensor(np.full(2, NEG_INF))
    for t in range(1, length):
        stay = alpha
        step = ag.concat([pad1, ag.slice_axis(alpha, 0, 0, s - 1)], axis=0)
        if s > 2:
            skip = ag.concat([pad2, ag.slice_axis(alpha, 0, 0, s - 2)], axis=0)
            skip = ag.masked_fill(skip, skip_blocked, NEG_INF)
            rows = [stay, step, skip]
        else:
            rows = [stay, step]
        stacked = ag.concat([ag.reshape(r, (1, s)) for r in rows], axis=0)
        merged = ag.logsumexp(stacked, axis=0)
        alpha = ag.add(merged, ag.reshape(ag.slice_axis(emissions, 0, t, t + 1), (s,)))

    final = ag.slice_axis(alpha, 0, max(0, s - 2), s)
    return ag.neg(ag.logsumexp(final, axis=0))


def ctc_loss_batch(
    log_probs: Tensor,
    lengths: Sequence[int],
    targets: Sequence[Sequence[int]],
) -> Tensor:
    """Mean CTC loss over a (B, T, V) batch."""
    b = log_probs.shape[0]
    if len(lengths) != b or len(targets) != b:
        raise ValueError("batch size mismatch between lattice, lengths, targets")
    losses = []
    for i in range(b):
        row = ag.reshape(ag.slice_axis(log_probs, 0, i, i + 1), log_probs.shape[1:])
        losses.append(ag.reshape(ctc_loss(row, targets[i], lengths[i]), (1,)))
    return ag.scale(ag.sum_(ag.concat(losses, axis=0)), 1.0 / b)


def ctc_brute_force(log_probs: np.ndarray, target: Sequence[int],
                    length: int | None = None) -> float:
    """Oracle: sum the probability of every frame path whose collapse equals
    the target; returns -log of the sum. Only for tiny instances."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    t_total, vocab = log_probs.shape
    length = t_total if length is None else int(length)
    if length > 8 or vocab > 5:
        raise ValueError(f"instance too large for enumeration: T={length}, V={vocab}")
    target = tuple(int(x) for x in target)
    if len(target) + _count_repeats(target) > length:
        raise CtcInfeasibleError(
            f"target infeasible: frames={length}, length={len(target)}, "
            f"repeats={_count_repeats(target)}"
        )
    probs = np.exp(log_probs[:length])
    total = 0.0
    for path in itertools.product(range(vocab), repeat=length):
        if collapse(path) == target:
            p = 1.0
            for t, c in enumerate(path):
                p *= probs[t, c]
            total += p
    if total <= 0.0:
        raise CtcInfeasibleError("target has zero probability")
    return -float(np.log(total))


def greedy_decode(log_probs: np.ndarray, length: int | None = None) -> Hypothesis:
    """Per-frame argmax, collapsed; ties break toward the lowest id."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    length = log_probs.shape[0] if length is None else int(length)
    frame_ids = log_probs[:length].argmax(axis=1)
    score = float(log_probs[np.arange(length), frame_ids].sum())
    return Hypothesis(ids=list(collapse(frame_ids)), score=score, kind="greedy")


def prefix_beam_decode(
    log_probs: np.ndarray,
    beam_width: int,
    length: int | None = None,
) -> list[Hypothesis]:
    """CTC prefix beam search (no language model). Each beam's score is the
    total log-probability of its transcript, merged over identical prefixes;
    output is sorted by score descending."""
    if beam_width < 1:
        raise ValueError(f"beam_width {beam_width} must be >= 1")
    log_probs = np.asarray(log_probs, dtype=np.float64)
    length = log_probs.shape[0] if length is None else int(length)
    vocab = log_probs.shape[1]

    # prefix -> (log p ending in blank, log p ending in non-blank)
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, -np.inf)}
    for t in range(length):
        row = log_probs[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def bump(prefix, blank_part, value):
            cell = nxt.setdefault(prefix, [-np.inf, -np.inf])
            cell[0 if blank_part else 1] = np.logaddexp(
                cell[0 if blank_part else 1], value
            )

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, True, total + row[BLANK])
            for c in range(1, vocab):
                p = row[c]
                if prefix and c == prefix[-1]:
                    bump(prefix, False, pnb + p)  # repeat merges into prefix
                    bump(prefix + (c,), False, pb + p)  # blank-separated repeat
                else:
                    bump(prefix + (c,), False, total + p)

        ranked = sorted(nxt.items(), key=lambda kv: -np.logaddexp(*kv[1]))
        beams = {prefix: (cell[0], cell[1]) for prefix, cell in ranked[:beam_width]}

    hyps = [
        Hypothesis(ids=list(prefix), score=float(np.logaddexp(pb, pnb)), kind="beam")
        for prefix, (pb, pnb) in beams.items()
    ]
    hyps.sort(key=lambda h: -h.score)
    return hyps
