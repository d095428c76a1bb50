"""The simulated analyst and its effort metrics.

The analyst answers "how likely is this point normal, seeing only these
features?" by training one discriminative forest per feature subset, on
demand, with an at-most-once cache. Revealing an explanation's features one
at a time yields a certainty curve; the minimum feature prefix is how many
features must be revealed before certainty drops to a detection threshold.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset
from .explain import Sfe
from .forest import BaggedForest, ForestConfig, SingleClassTrainingData

__all__ = [
    "AnalystModel",
    "CertaintyCurve",
    "ThresholdDistribution",
    "SingleClassTrainingData",
    "certainty_curve",
    "mfp",
    "expected_mfp",
    "censored_expected_mfp",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CertaintyCurve:
    """Analyst normality probabilities after revealing 1, 2, ... features."""

    values: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("certainty values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ThresholdDistribution:
    """Discrete distribution over detection thresholds in [0, 0.5]."""

    support: tuple[tuple[float, float], ...]

    def __post_init__(self):
        support = tuple((float(t), float(p)) for t, p in self.support)
        if not support:
            raise ValueError("threshold distribution needs at least one value")
        if any(not 0.0 <= t <= 0.5 for t, _ in support):
            raise ValueError("thresholds must lie in [0, 0.5]")
        if any(p < 0.0 for _, p in support):
            raise ValueError("probabilities must be nonnegative")
        total = sum(p for _, p in support)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"threshold probabilities must sum to 1, got {total}")
        object.__setattr__(self, "support", support)

    @classmethod
    def uniform(cls, taus: Iterable[float] = (0.1, 0.2, 0.3)) -> "ThresholdDistribution":
        taus = tuple(taus)
        return cls(support=tuple((t, 1.0 / len(taus)) for t in taus))

    def to_dict(self) -> dict:
        return {"support": [[t, p] for t, p in self.support]}

    @classmethod
    def from_dict(cls, raw: dict) -> "ThresholdDistribution":
        unknown = set(raw) - {"support"}
        if unknown:
            raise ValueError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(support=tuple((t, p) for t, p in raw["support"]))


def canonical_subset(subset: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted({int(j) for j in subset}))


class AnalystModel:
    """Per-subset classifier cache over a fixed labeled training set.

    Each subset's forest trains on the training data projected onto the
    subset, with a seed derived from (analyst seed, subset), so results do
    not depend on query order. The cache is thread safe: concurrent misses
    for the same subset coalesce onto a single training run.

    When cache_dir is set, fitted classifiers persist to disk keyed by a
    hash of the training data plus the canonical subset, so repeated
    evaluations skip retraining.
    """

    def __init__(
        self,
        training_data: Dataset,
        forest_config: ForestConfig | None = None,
        seed: int | None = None,
        cache_dir: str | Path | None = None,
    ):
        self.training_data = training_data
        self.forest_config = forest_config or ForestConfig()
        self.seed = self.forest_config.seed if seed is None else int(seed)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._cache: dict[tuple[int, ...], BaggedForest] = {}
        self._pending: dict[tuple[int, ...], threading.Event] = {}
        self._lock = threading.Lock()
        self.cache_hits = 0
        self.trained_count = 0
        self.loaded_count = 0

    @property
    def n_features(self) -> int:
        return self.training_data.n_features

    def _dataset_fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.training_data.points.tobytes())
        digest.update(self.training_data.labels.tobytes())
        digest.update(repr(self.forest_config.to_dict()).encode())
        digest.update(str(self.seed).encode())
        return digest.hexdigest()[:16]

    def _cache_path(self, key: tuple[int, ...]) -> Path:
        name = f"{self._dataset_fingerprint()}_{'-'.join(map(str, key))}.json"
        return self.cache_dir / name

    def _train(self, key: tuple[int, ...]) -> BaggedForest:
        if self.cache_dir is not None:
            path = self._cache_path(key)
            if path.exists():
                self.loaded_count += 1
                return BaggedForest.load(path)
        forest_seed = int(
            np.random.SeedSequence([self.seed, *key]).generate_state(1, dtype=np.uint64)[0]
        )
        forest = BaggedForest.fit(
            self.training_data.points[:, key],
            self.training_data.labels,
            self.forest_config,
            seed=forest_seed,
        )
        self.trained_count += 1
        if self.cache_dir is not None:
            forest.save(self._cache_path(key))
        return forest

    def classifier_for(self, subset: Iterable[int]) -> BaggedForest:
        """Return the forest for a feature subset, training it at most once."""
        key = canonical_subset(subset)
        if not key:
            raise ValueError("feature subset must be nonempty")
        if key[0] < 0 or key[-1] >= self.n_features:
            raise ValueError(f"feature indices must lie in [0, {self.n_features})")
        while True:
            with self._lock:
                cached = self._cache.get(key)
                if cached is not None:
                    self.cache_hits += 1
                    return cached
                event = self._pending.get(key)
                if event is None:
                    event = threading.Event()
                    self._pending[key] = event
                    break
            event.wait()
        try:
            forest = self._train(key)
            with self._lock:
                self._cache[key] = forest
            return forest
        finally:
            with self._lock:
                del self._pending[key]
            event.set()

    def prob_normal(self, x: np.ndarray, subset: Iterable[int]) -> float:
        """P(normal | the point's values on the subset), in (0, 1)."""
        key = canonical_subset(subset)
        forest = self.classifier_for(key)
        x = np.asarray(x, dtype=np.float64)
        return forest.prob_normal(x[list(key)])


def certainty_curve(
    analyst: AnalystModel, x: np.ndarray, explanation: Sfe, k: int | None = None
) -> CertaintyCurve:
    """Analyst certainty after revealing each successive explanation prefix."""
    if k is None:
        k = len(explanation)
    if not 1 <= k <= len(explanation):
        raise ValueError(f"prefix length must be in [1, {len(explanation)}], got {k}")
    values = [analyst.prob_normal(x, explanation.order[: i + 1]) for i in range(k)]
    return CertaintyCurve(values=tuple(values))


def mfp(curve: CertaintyCurve, tau: float) -> int | None:
    """Smallest number of revealed features with certainty <= tau.

    Returns None when the curve never reaches the threshold (no detection
    within the explanation).
    """
    if not 0.0 <= tau <= 0.5:
        raise ValueError(f"tau must lie in [0, 0.5], got {tau}")
    for i, value in enumerate(curve.values, start=1):
        if value <= tau:
            return i
    return None


def expected_mfp(curve: CertaintyCurve, dist: ThresholdDistribution) -> float | None:
    """Threshold-averaged MFP; None if any supported threshold goes undetected."""
    total = 0.0
    for tau, prob in dist.support:
        m = mfp(curve, tau)
        if m is None:
            return None
        total += prob * m
    return total


def censored_expected_mfp(
    curve: CertaintyCurve, dist: ThresholdDistribution
) -> tuple[float, bool]:
    """Expected MFP with undetected thresholds censored at curve length + 1.

    Returns the aggregation-ready value and whether any threshold was
    censored.
    """
    total = 0.0
    censored = False
    for tau, prob in dist.support:
        m = mfp(curve, tau)
        if m is None:
            m = len(curve) + 1
            censored = True
        total += prob * m
    return total, censored
