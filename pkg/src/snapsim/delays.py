"""Closed-form delay models for the two tree overlays.

OPST (optimal packet streaming tree): one relay receives from the server and
forwards to everyone else sequentially; its pipeline pays the propagation
delay once, so it wins when transmission time is tiny compared to
propagation.  SBT (snowball tree): holders double every round; the deepest
path re-pays propagation at every hop, so the tree wins when a chunk's
transmission time rivals propagation.
"""

from __future__ import annotations

import math

from .overlay import DelayModel, tree_depth


def opst_delay(n: int, model: DelayModel) -> tuple[float, float]:
    """(max, mean) delay for a sequential relay tree over n peers.

    The relay's own download pays transmission time only; the m-th pipelined
    send arrives d + m*t after that, so the last of n peers sits at d + n*t
    and the mean is d + (n+1)*t/2.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    return model.d + n * model.t, model.d + 0.5 * (n + 1) * model.t


def sbt_delay(n: int, model: DelayModel) -> tuple[float, float]:
    """(max, mean bound) delay for a snowball tree over n peers.

    The maximum follows the fresh chain with no pipelining at all:
    ceil(log2 n) hops of d + t each.  The mean here drops a vanishing
    correction term and is only an upper-bound comparator; use
    sbt_exact_average for the exact power-of-two value.
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    k = tree_depth(n)
    return k * (model.d + model.t), 0.5 * k * model.d + (k - 1) * model.t


def sbt_level_average(k: int, model: DelayModel) -> float:
    """Mean delay of the level-k peers of a snowball tree (k >= 1).

    A level-k peer fed from level i inherits that feeder's delay plus one
    propagation and (k-i) pipelined transmissions; averaging over the level
    collapses to (k+1)/2 * d + k*t.
    """
    if k < 1:
        raise ValueError(f"need k >= 1, got {k}")
    return 0.5 * (k + 1) * model.d + k * model.t


def sbt_exact_average(depth: int, model: DelayModel) -> float:
    """Exact mean delay over all 2^depth peers of one snowball tree.

    Weights the per-level means by level sizes (the root contributes zero):
    (K/2)*d + (K-1)*t + t/2^K.
    """
    if depth < 1:
        raise ValueError(f"need depth >= 1, got {depth}")
    return 0.5 * depth * model.d + (depth - 1) * model.t + model.t / 2**depth


def crossover_verdict(n: int, model: DelayModel) -> str:
    """Which overlay has the lower max delay for these parameters."""
    opst_max, _ = opst_delay(n, model)
    sbt_max, _ = sbt_delay(n, model)
    if math.isclose(opst_max, sbt_max, rel_tol=1e-12):
        return "tie"
    return "sbt" if sbt_max < opst_max else "opst"
