"""Sequential feature explanations computed from subset-marginal density queries.

Every method consumes a density oracle, an object answering
``log_marginal(x, subset)`` for any nonempty feature subset, and emits an
ordered list of feature indices with per-step objective values. Marginal
methods pick features that make the point look most anomalous on its own;
dropout methods pick features whose removal makes the point look most normal.

All objectives are evaluated in log space, which preserves every argmin and
argmax. The independent-dropout scores are density differences, so those are
rescaled back out of log space with a shared max subtraction before the sign
of the difference matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence

import numpy as np


class Method(str, Enum):
    IND_MARG = "indmarg"
    SEQ_MARG = "seqmarg"
    IND_DO = "inddo"
    SEQ_DO = "seqdo"
    RANDOM = "random"
    OPT_ORACLE = "optoracle"


# Methods computable from a density oracle, in canonical reporting order.
DENSITY_METHODS = (Method.IND_MARG, Method.SEQ_MARG, Method.IND_DO, Method.SEQ_DO)


class DensityOracle(Protocol):
    """Anything that can score a point on an arbitrary feature subset."""

    def log_marginal(self, x: np.ndarray, subset: Sequence[int]) -> float: ...


@dataclass(frozen=True)
class Sfe:
    """An explanation: distinct feature indices, most important first."""

    order: tuple[int, ...]
    step_scores: tuple[float, ...]
    method: Method

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        scores = tuple(float(s) for s in self.step_scores)
        if len(set(order)) != len(order):
            raise ValueError("explanation order must not repeat features")
        if any(i < 0 for i in order):
            raise ValueError("feature indices must be nonnegative")
        if len(scores) != len(order):
            raise ValueError("step_scores must match the order length")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "step_scores", scores)

    def __len__(self) -> int:
        return len(self.order)

    def csv_row(self, point_index: int) -> list[str]:
        return [
            str(point_index),
            self.method.value,
            ";".join(str(i) for i in self.order),
            ";".join(repr(s) for s in self.step_scores),
        ]


def _check_length(n: int, k: int | None, max_k: int | None = None) -> int:
    limit = n if max_k is None else max_k
    if k is None:
        k = limit
    if not 1 <= k <= limit:
        raise ValueError(f"explanation length must be in [1, {limit}], got {k}")
    return k


def explain_ind_marg(f: DensityOracle, x: np.ndarray, k: int | None = None) -> Sfe:
    """Order features by ascending singleton marginal density.

    Uses exactly n singleton queries; ties break toward the lower index.
    """
    n = len(x)
    k = _check_length(n, k)
    values = [f.log_marginal(x, (j,)) for j in range(n)]
    order = sorted(range(n), key=lambda j: (values[j], j))[:k]
    return Sfe(order=tuple(order), step_scores=tuple(values[j] for j in order), method=Method.IND_MARG)


def explain_seq_marg(f: DensityOracle, x: np.ndarray, k: int | None = None) -> Sfe:
    """Greedily grow the subset that minimizes the joint marginal density.

    Step i picks the remaining feature whose addition to the current prefix
    gives the smallest joint marginal; ties break toward the lower index.
    """
    n = len(x)
    k = _check_length(n, k)
    chosen: list[int] = []
    scores: list[float] = []
    remaining = list(range(n))
    for _ in range(k):
        best_j = -1
        best_val = math.inf
        for j in remaining:
            val = f.log_marginal(x, (*chosen, j))
            if val < best_val:
                best_val = val
                best_j = j
        chosen.append(best_j)
        scores.append(best_val)
        remaining.remove(best_j)
    return Sfe(order=tuple(chosen), step_scores=tuple(scores), method=Method.SEQ_MARG)


def explain_ind_do(f: DensityOracle, x: np.ndarray, k: int | None = None) -> Sfe:
    """Order features by how much more normal the point looks without them.

    Each feature's score is the density of the point with that one feature
    removed minus the full-joint density, computed in density space. A shared
    max subtraction keeps the differences comparable when all densities
    underflow; the stored scores are the rescaled real differences.
    """
    n = len(x)
    if n < 2:
        raise ValueError("dropout needs at least 2 features")
    k = _check_length(n, k)
    full = f.log_marginal(x, tuple(range(n)))
    dropped = [f.log_marginal(x, tuple(t for t in range(n) if t != j)) for j in range(n)]
    anchor = max(dropped + [full])
    scaled = [math.exp(a - anchor) - math.exp(full - anchor) for a in dropped]
    rescale = math.exp(anchor)
    order = sorted(range(n), key=lambda j: (-scaled[j], j))[:k]
    return Sfe(
        order=tuple(order),
        step_scores=tuple(scaled[j] * rescale for j in order),
        method=Method.IND_DO,
    )


def explain_seq_do(f: DensityOracle, x: np.ndarray, k: int | None = None) -> Sfe:
    """Greedily remove the feature set whose absence looks most normal.

    Step i picks the remaining feature j maximizing the density of the
    complement of the removed set plus j. When k = n the final step would
    query an empty subset, so the last feature is appended by elimination
    with a NaN step score instead.
    """
    n = len(x)
    if n < 2:
        raise ValueError("dropout needs at least 2 features")
    k = _check_length(n, k)
    chosen: list[int] = []
    scores: list[float] = []
    remaining = list(range(n))
    for _ in range(k):
        if len(remaining) == 1:
            chosen.append(remaining[0])
            scores.append(math.nan)
            remaining.clear()
            break
        best_j = -1
        best_val = -math.inf
        for j in remaining:
            complement = tuple(t for t in remaining if t != j)
            val = f.log_marginal(x, complement)
            if val > best_val:
                best_val = val
                best_j = j
        chosen.append(best_j)
        scores.append(best_val)
        remaining.remove(best_j)
    return Sfe(order=tuple(chosen), step_scores=tuple(scores), method=Method.SEQ_DO)


def explain_random(n: int, k: int | None = None, seed: int = 0) -> Sfe:
    """A uniformly random k-prefix of a random feature permutation."""
    k = _check_length(n, k)
    order = np.random.default_rng(seed).permutation(n)[:k]
    return Sfe(order=tuple(int(j) for j in order), step_scores=(0.0,) * k, method=Method.RANDOM)
