"""Gaussian mixture density estimation and bootstrap-ensemble detectors.

A single mixture is fit by EM with k-means++ initialization. The ensemble
detector trains one mixture per bootstrap resample, varies the component
count across members, discards the lowest-scoring members, and answers
density queries as the uniform mixture of the survivors.

Every density query is a joint marginal over an arbitrary nonempty feature
subset, computed in closed form by slicing component means and covariance
blocks. All public scores are log densities.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import logsumexp

from .dataset import Dataset
from .errors import SfexplainError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)

# Ridge added to covariance diagonals every M-step, relative to the mean
# feature variance of the training sample.
RIDGE_SCALE = 1e-6

MODEL_FORMAT = "sfexplain-egmm"
MODEL_VERSION = 1


class DegenerateCluster(SfexplainError):
    """EM collapsed a component below the covariance floor, even after retries."""


class _DegenerateFit(Exception):
    """Internal: one EM attempt collapsed; retried with a fresh seed."""


@dataclass(frozen=True)
class GaussianComponent:
    """One weighted Gaussian: weight in (0, 1], mean vector, SPD covariance."""

    weight: float
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        cov = np.array(self.covariance, dtype=np.float64)
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight must be in (0, 1], got {self.weight}")
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError("covariance must be square and match the mean's length")
        scale = max(np.max(np.abs(cov)), 1.0)
        if np.max(np.abs(cov - cov.T)) > 1e-9 * scale:
            raise ValueError("covariance must be symmetric")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class GmmModel:
    """A single Gaussian mixture; weights sum to one.

    em_log_likelihoods records the training log-likelihood after each EM
    iteration (non-decreasing); it is diagnostic only and not serialized.
    """

    components: tuple[GaussianComponent, ...]
    n: int
    em_log_likelihoods: tuple[float, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.components:
            raise ValueError("a mixture needs at least one component")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"component weights must sum to 1, got {total}")
        for c in self.components:
            if c.mean.size != self.n:
                raise ValueError("all components must have the model's dimensionality")

    def log_marginal(self, x: np.ndarray, subset: Iterable[int]) -> float:
        return gmm_log_marginal(self, x, subset)


@dataclass(frozen=True)
class EgmmConfig:
    """Ensemble layout and EM controls."""

    members_per_k: int = 15
    component_counts: tuple[int, ...] = (3, 4, 5)
    retention_quantile: float = 0.10
    em_max_iters: int = 200
    em_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "component_counts", tuple(int(k) for k in self.component_counts))
        if self.members_per_k < 1:
            raise ValueError("members_per_k must be positive")
        if not self.component_counts or any(k < 1 for k in self.component_counts):
            raise ValueError("component_counts must be a nonempty list of positive integers")
        if not 0.0 <= self.retention_quantile < 1.0:
            raise ValueError("retention_quantile must be in [0, 1)")
        if self.em_max_iters < 1 or self.em_tol <= 0.0:
            raise ValueError("em_max_iters must be positive and em_tol > 0")

    def to_dict(self) -> dict:
        return {
            "members_per_k": self.members_per_k,
            "component_counts": list(self.component_counts),
            "retention_quantile": self.retention_quantile,
            "em_max_iters": self.em_max_iters,
            "em_tol": self.em_tol,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EgmmConfig":
        unknown = set(raw) - {
            "members_per_k",
            "component_counts",
            "retention_quantile",
            "em_max_iters",
            "em_tol",
            "seed",
        }
        if unknown:
            raise ValueError(f"unknown EGMM config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass(frozen=True)
class EgmmModel:
    """Uniform mixture of retained mixtures, plus the input standardization.

    Members are fit in standardized coordinates (zero mean, unit variance per
    feature); queries transform the point and correct the density by the log
    Jacobian of the scaling, so returned values are densities over the
    original feature units. An identity transform (shift 0, scale 1) makes
    the ensemble query equal the member queries directly.
    """

    members: tuple[GmmModel, ...]
    n: int
    shift: np.ndarray
    scale: np.ndarray
    config: EgmmConfig | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        for m in self.members:
            if m.n != self.n:
                raise ValueError("all members must share the ensemble dimensionality")
        shift = np.array(self.shift, dtype=np.float64)
        scale = np.array(self.scale, dtype=np.float64)
        if shift.shape != (self.n,) or scale.shape != (self.n,):
            raise ValueError("shift and scale must be length-n vectors")
        if np.any(scale <= 0):
            raise ValueError("scale entries must be positive")
        shift.setflags(write=False)
        scale.setflags(write=False)
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)

    def log_marginal(self, x: np.ndarray, subset: Iterable[int]) -> float:
        return egmm_log_marginal(self, x, subset)


def identity_egmm(members: Sequence[GmmModel]) -> EgmmModel:
    """Wrap mixtures into an ensemble with no input standardization."""
    n = members[0].n
    return EgmmModel(members=tuple(members), n=n, shift=np.zeros(n), scale=np.ones(n))


def _as_subset(subset: Iterable[int], n: int) -> np.ndarray:
    idx = np.unique(np.fromiter((int(j) for j in subset), dtype=np.intp))
    if idx.size == 0:
        raise ValueError("feature subset must be nonempty")
    if idx[0] < 0 or idx[-1] >= n:
        raise ValueError(f"feature indices must lie in [0, {n}), got {idx.tolist()}")
    return idx


def _mvn_logpdf(diff: np.ndarray, cov: np.ndarray) -> float:
    """Log density of N(0, cov) at diff, via Cholesky."""
    chol = cholesky(cov, lower=True)
    solved = solve_triangular(chol, diff, lower=True)
    log_det_half = float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (diff.size * _LOG_2PI + float(solved @ solved)) - log_det_half


def gmm_log_marginal(model: GmmModel, x: np.ndarray, subset: Iterable[int]) -> float:
    """Log joint-marginal density of x restricted to a feature subset.

    Each component marginalizes in closed form by slicing its mean and
    covariance block on the subset.
    """
    idx = _as_subset(subset, model.n)
    x = np.asarray(x, dtype=np.float64)
    terms = np.empty(len(model.components))
    for c, comp in enumerate(model.components):
        diff = x[idx] - comp.mean[idx]
        cov = comp.covariance[np.ix_(idx, idx)]
        terms[c] = math.log(comp.weight) + _mvn_logpdf(diff, cov)
    return float(logsumexp(terms))


def egmm_log_marginal(model: EgmmModel, x: np.ndarray, subset: Iterable[int]) -> float:
    """Log joint-marginal density under the uniform mixture of members.

    Combines member values with log-sum-exp and removes the standardization
    Jacobian so the result is a density over original feature units.
    """
    idx = _as_subset(subset, model.n)
    x = np.asarray(x, dtype=np.float64)
    z = (x - model.shift) / model.scale
    member_vals = np.array([gmm_log_marginal(m, z, idx) for m in model.members])
    log_jacobian = float(np.sum(np.log(model.scale[idx])))
    return float(logsumexp(member_vals) - math.log(len(model.members)) - log_jacobian)


def _gmm_log_joint_many(model: GmmModel, X: np.ndarray) -> np.ndarray:
    """Full-joint log density for every row of X. Vectorized over points."""
    N = X.shape[0]
    terms = np.empty((N, len(model.components)))
    for c, comp in enumerate(model.components):
        chol = cholesky(comp.covariance, lower=True)
        solved = solve_triangular(chol, (X - comp.mean).T, lower=True)
        log_det_half = float(np.sum(np.log(np.diag(chol))))
        terms[:, c] = (
            math.log(comp.weight)
            - 0.5 * (model.n * _LOG_2PI + np.sum(solved * solved, axis=0))
            - log_det_half
        )
    return logsumexp(terms, axis=1)


def egmm_log_joint_many(model: EgmmModel, X: np.ndarray) -> np.ndarray:
    """Full-joint ensemble log density for every row of X, in original units."""
    Z = (np.asarray(X, dtype=np.float64) - model.shift) / model.scale
    member_vals = np.stack([_gmm_log_joint_many(m, Z) for m in model.members])
    log_jacobian = float(np.sum(np.log(model.scale)))
    return logsumexp(member_vals, axis=0) - math.log(len(model.members)) - log_jacobian


def rank_points(model: EgmmModel, data: Dataset) -> np.ndarray:
    """Point indices sorted by ascending full-joint density, ties by index."""
    if data.n_features != model.n:
        raise ValueError("model dimensionality does not match the dataset")
    scores = egmm_log_joint_many(model, data.points)
    return _rank_by_score(scores)


def _rank_by_score(scores: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(len(scores)), scores))


# ---------------------------------------------------------------------------
# EM fitting
# ---------------------------------------------------------------------------


def _kmeans_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding followed by 10 Lloyd iterations; returns centers."""
    N = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(N)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            pick = rng.choice(N, p=probs)
        else:
            pick = rng.integers(N)
        centers[c] = X[pick]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))

    for _ in range(10):
        dists = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dists, axis=1)
        for c in range(k):
            mask = assign == c
            if mask.any():
                centers[c] = X[mask].mean(axis=0)
    return centers


def _component_log_likelihoods(
    X: np.ndarray, weights: np.ndarray, means: np.ndarray, covs: np.ndarray
) -> np.ndarray:
    """(N, k) matrix of log(weight_c) + log N(x_i; mean_c, cov_c)."""
    N, n = X.shape
    k = len(weights)
    out = np.empty((N, k))
    for c in range(k):
        chol = cholesky(covs[c], lower=True)
        solved = solve_triangular(chol, (X - means[c]).T, lower=True)
        log_det_half = float(np.sum(np.log(np.diag(chol))))
        out[:, c] = (
            math.log(weights[c])
            - 0.5 * (n * _LOG_2PI + np.sum(solved * solved, axis=0))
            - log_det_half
        )
    return out


def _em_once(
    X: np.ndarray, k: int, rng: np.random.Generator, max_iters: int, tol: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[float]]:
    N, n = X.shape
    ridge = RIDGE_SCALE * float(np.mean(np.var(X, axis=0)))
    if ridge <= 0.0:
        raise _DegenerateFit("zero-variance training sample")
    ridge_eye = ridge * np.eye(n)

    centers = _kmeans_init(X, k, rng)
    dists = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    assign = np.argmin(dists, axis=1)
    global_cov = np.cov(X, rowvar=False, ddof=0).reshape(n, n) + ridge_eye

    weights = np.empty(k)
    means = centers.copy()
    covs = np.empty((k, n, n))
    for c in range(k):
        mask = assign == c
        count = int(mask.sum())
        weights[c] = max(count, 1)
        if count >= 2:
            covs[c] = np.cov(X[mask], rowvar=False, ddof=0).reshape(n, n) + ridge_eye
        else:
            covs[c] = global_cov
    weights /= weights.sum()

    log_likelihoods: list[float] = []
    prev_ll = -np.inf
    for _ in range(max_iters):
        try:
            joint = _component_log_likelihoods(X, weights, means, covs)
        except (LinAlgError, ValueError) as exc:
            raise _DegenerateFit(str(exc)) from None
        norms = logsumexp(joint, axis=1)
        ll = float(norms.sum())
        assert not log_likelihoods or ll >= log_likelihoods[-1] - 1e-9 * max(
            1.0, abs(log_likelihoods[-1])
        ), "EM step decreased the log-likelihood"
        log_likelihoods.append(ll)
        if ll - prev_ll < tol * max(abs(prev_ll), 1e-12) and np.isfinite(prev_ll):
            break
        prev_ll = ll

        resp = np.exp(joint - norms[:, None])
        mass = resp.sum(axis=0)
        if np.any(mass < 1e-10):
            raise _DegenerateFit("a component lost all responsibility mass")
        weights = mass / N
        means = (resp.T @ X) / mass[:, None]
        for c in range(k):
            diff = X - means[c]
            covs[c] = (resp[:, c, None] * diff).T @ diff / mass[c] + ridge_eye
            covs[c] = 0.5 * (covs[c] + covs[c].T)

    try:
        _component_log_likelihoods(X[:1], weights, means, covs)
    except (LinAlgError, ValueError) as exc:
        raise _DegenerateFit(str(exc)) from None
    return weights, means, covs, log_likelihoods


def fit_gmm(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 200,
    tol: float = 1e-6,
) -> GmmModel:
    """Fit a k-component mixture by EM.

    Initialization is k-means++ plus a short Lloyd refinement. A ridge
    proportional to the mean feature variance is added to every covariance
    each M-step. A collapsed fit is retried with a fresh derived seed up to
    3 times before DegenerateCluster is raised.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"points must be 2D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("points must be finite")
    if X.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {X.shape[0]}")

    last_error = None
    for attempt in range(4):
        rng = np.random.default_rng(seed if attempt == 0 else derive_seed(seed, attempt))
        try:
            weights, means, covs, lls = _em_once(X, k, rng, max_iters, tol)
        except _DegenerateFit as exc:
            last_error = exc
            continue
        components = tuple(
            GaussianComponent(weight=float(w), mean=m, covariance=c)
            for w, m, c in zip(weights, means, covs)
        )
        return GmmModel(components=components, n=X.shape[1], em_log_likelihoods=tuple(lls))
    raise DegenerateCluster(f"EM collapsed on every attempt: {last_error}")


# ---------------------------------------------------------------------------
# Ensemble fitting
# ---------------------------------------------------------------------------


def egmm_fit(points: np.ndarray, config: EgmmConfig | None = None, workers: int = 1) -> EgmmModel:
    """Train the bootstrap ensemble and discard its weakest members.

    Each member fits on an independent N-draw bootstrap resample of the
    standardized data. Members are scored by mean per-point log-likelihood
    on the full (non-resampled) data; the lowest floor(quantile * M) scores
    are discarded. Member training order is fixed by index, so results do
    not depend on scheduling.
    """
    config = config or EgmmConfig()
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"points must be 2D, got shape {X.shape}")
    if X.shape[0] < max(config.component_counts):
        raise ValueError("need at least max(component_counts) points")

    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (X - shift) / scale

    ks = [k for k in config.component_counts for _ in range(config.members_per_k)]
    N = Z.shape[0]

    def train_member(index: int) -> GmmModel:
        boot_rng = np.random.default_rng(derive_seed(config.seed, index, 0))
        sample = Z[boot_rng.integers(0, N, size=N)]
        return fit_gmm(
            sample,
            ks[index],
            derive_seed(config.seed, index, 1),
            max_iters=config.em_max_iters,
            tol=config.em_tol,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(train_member, range(len(ks))))
    else:
        members = [train_member(i) for i in range(len(ks))]

    scores = np.array([float(np.mean(_gmm_log_joint_many(m, Z))) for m in members])
    n_discard = int(math.floor(config.retention_quantile * len(members)))
    threshold = np.sort(scores)[n_discard]
    retained = tuple(m for m, s in zip(members, scores) if s >= threshold)
    assert retained, "retention with quantile < 1 always keeps the best member"
    logger.info("retained %d of %d ensemble members", len(retained), len(members))

    return EgmmModel(
        members=retained, n=X.shape[1], shift=shift, scale=scale, config=config
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_egmm(model: EgmmModel, path: str | Path) -> None:
    """Write the model as versioned JSON; floats round-trip exactly."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n": model.n,
        "shift": model.shift.tolist(),
        "scale": model.scale.tolist(),
        "config": model.config.to_dict() if model.config else None,
        "members": [
            {
                "components": [
                    {
                        "weight": comp.weight,
                        "mean": comp.mean.tolist(),
                        "covariance": comp.covariance.tolist(),
                    }
                    for comp in member.components
                ]
            }
            for member in model.members
        ],
    }
    with open(Path(path), "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_egmm(path: str | Path) -> EgmmModel:
    with open(Path(path)) as fh:
        payload = json.load(fh)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not an ensemble model file")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {payload.get('version')}")
    members = tuple(
        GmmModel(
            components=tuple(
                GaussianComponent(
                    weight=comp["weight"],
                    mean=np.array(comp["mean"]),
                    covariance=np.array(comp["covariance"]),
                )
                for comp in member["components"]
            ),
            n=payload["n"],
        )
        for member in payload["members"]
    )
    config = EgmmConfig.from_dict(payload["config"]) if payload.get("config") else None
    return EgmmModel(
        members=members,
        n=payload["n"],
        shift=np.array(payload["shift"]),
        scale=np.array(payload["scale"]),
        config=config,
    )
