"""Conformal-martingale distribution shift detection (non-differentiable path).

Pipeline: nearest-neighbour conformity scores on cosine-type distances,
randomized conformal p-values, and a mixture betting martingale. The
detector fires the first time the martingale reaches ``1/alpha``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

BET_SLOPES = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
MIXING_RATE = 0.005
CAPITAL_CAP = 1e12

COVARIATE = "covariate"
CONCEPT = "concept"
MODES = (COVARIATE, CONCEPT)


@dataclass
class DetectionSequence:
    features: np.ndarray  # (T, n_d)
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.features):
                raise ValueError(f"{len(self.labels)} labels for {len(self.features)} features")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.features)


@dataclass
class PValueSequence:
    values: np.ndarray
    xi_seed: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any((self.values < 0) | (self.values > 1)):
            raise ValueError("p-values must lie in [0, 1]")


@dataclass
class MartingaleTrace:
    values: np.ndarray
    threshold: float = np.inf
    triggered_at: int | None = None  # 0-based index of the first S_t >= threshold
    pvalues: np.ndarray | None = None

    @property
    def triggered(self) -> bool:
        return self.triggered_at is not None


@dataclass
class BettorState:
    """Capital of the mixture bettor. ``capital == weights.sum()`` after every update."""

    mixing: float = MIXING_RATE
    slopes: np.ndarray = field(default_factory=lambda: BET_SLOPES.copy())
    cap: float = CAPITAL_CAP
    capital: float = 1.0
    weights: np.ndarray = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.full(len(self.slopes), self.capital / len(self.slopes))

    def update(self, p: float) -> float:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p-value {p} outside [0, 1]")
        k = len(self.slopes)
        w = (1 - self.mixing) * self.weights + (self.mixing / k) * self.capital
        w = w * (1 + self.slopes * (p - 0.5))
        c = w.sum()
        if c > self.cap:
            w *= self.cap / c
            c = w.sum()
        self.weights, self.capital = w, c
        return c


# ---------------------------------------------------------------- distances

def sharpened_cosine_distance(z, z2, gamma: float = 1.0) -> float:
    """``1 - sign(c) |c|**gamma`` with ``c`` the cosine of the angle between z and z2."""
    z, z2 = np.asarray(z, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    nz, nz2 = np.linalg.norm(z), np.linalg.norm(z2)
    if nz == 0 or nz2 == 0:
        raise ValueError("cosine distance undefined for a zero vector")
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    c = float(_snap(np.clip(z @ z2 / (nz * nz2), -1.0, 1.0)))
    return 1.0 - np.sign(c) * abs(c) ** gamma


def distance_matrix(features, gamma: float = 1.0) -> np.ndarray:
    """All pairwise sharpened cosine distances, exactly symmetric."""
    z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine distance undefined for a zero vector")
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    zn = z / norms
    g = zn @ zn.T
    g = _snap(np.clip(0.5 * (g + g.T), -1.0, 1.0))
    return 1.0 - np.sign(g) * np.abs(g) ** gamma


def _snap(c):
    """Round cosines within a few ulps of +-1 to +-1 so duplicates are at distance exactly 0."""
    return np.where(np.abs(c) > 1.0 - 4 * np.finfo(float).eps, np.sign(c), c)


def unit_normalize(features) -> np.ndarray:
    z = np.asarray(features, dtype=np.float64)
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


# ---------------------------------------------------------------- conformity scores

def _neighbour_mask(n: int, labels) -> np.ndarray:
    valid = ~np.eye(n, dtype=bool)
    if labels is not None:
        labels = np.asarray(labels)
        valid &= labels[:, None] == labels[None, :]
    return valid


def prefix_scores(dist: np.ndarray, labels=None) -> np.ndarray:
    """``S[i, t]``: min distance from point i to the other points of prefix ``0..t``.

    This is the running nearest-neighbour distance of every point, updated as
    each new point arrives. Empty neighbour sets give ``+inf``. Only the
    entries with ``i <= t`` are meaningful conformity scores.
    """
    masked = np.where(_neighbour_mask(len(dist), labels), dist, np.inf)
    return np.minimum.accumulate(masked, axis=1)


def conformity_scores_covariate(seq: DetectionSequence, t: int, gamma: float = 1.0) -> np.ndarray:
    """Scores of the first ``t`` points against each other (``t`` counts points, >= 2)."""
    if t < 2:
        raise ValueError("conformity scores need at least two points")
    d = distance_matrix(seq.features[:t], gamma)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def conformity_scores_concept(seq: DetectionSequence, t: int, gamma: float = 1.0) -> np.ndarray:
    """Label-conditioned scores; a point with no same-label neighbour scores ``+inf``."""
    if seq.labels is None:
        raise ValueError("concept-shift scores need labels")
    if t < 2:
        raise ValueError("conformity scores need at least two points")
    d = distance_matrix(seq.features[:t], gamma)
    d = np.where(_neighbour_mask(t, seq.labels[:t]), d, np.inf)
    return d.min(axis=1)


# ---------------------------------------------------------------- p-values

def pvalue_from_scores(scores, xi: float, labels=None) -> float:
    """Randomized conformal p-value of the last score among ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    if labels is not None:
        labels = np.asarray(labels)
        scores = scores[labels == labels[-1]]
    last = scores[-1]
    return (np.sum(scores < last) + xi * np.sum(scores == last)) / len(scores)


def conformal_pvalues(score_matrix: np.ndarray, xi, labels=None, xi_seed=None) -> PValueSequence:
    """p-values for every prefix from ``score_matrix[i, t]`` (see :func:`prefix_scores`).

    ``p_1`` comes out as ``xi_1`` since the only candidate is the point itself.
    """
    n = score_matrix.shape[0]
    xi = np.broadcast_to(np.asarray(xi, dtype=np.float64), (n,))
    current = np.diag(score_matrix)
    upto = np.triu(np.ones((n, n), dtype=bool))  # i <= t
    if labels is not None:
        labels = np.asarray(labels)
        upto &= labels[:, None] == labels[None, :]
    with np.errstate(invalid="ignore"):
        below = (score_matrix < current[None, :]) & upto
        ties = (score_matrix == current[None, :]) & upto
    p = (below.sum(axis=0) + xi * ties.sum(axis=0)) / upto.sum(axis=0)
    return PValueSequence(np.clip(p, 0.0, 1.0), xi_seed)


def _xi(n: int, rng) -> tuple[np.ndarray, int | None]:
    if rng is None:
        rng = 0
    if isinstance(rng, (int, np.integer)):
        return np.random.default_rng(int(rng)).random(n), int(rng)
    return rng.random(n), None


def sequence_pvalues(seq: DetectionSequence, mode: str = COVARIATE, gamma: float = 1.0,
                     rng=None, xi=None) -> PValueSequence:
    """Conformal p-values of a whole sequence.

    ``rng`` is a seed or a numpy Generator used only for the tie-breaking draws;
    passing ``xi`` explicitly (scalar or array) bypasses it.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    labels = None
    if mode == CONCEPT:
        if seq.labels is None:
            raise ValueError("concept mode needs labels")
        labels = seq.labels
    n = len(seq)
    if xi is None:
        xi, seed = _xi(n, rng)
    else:
        seed = None
    scores = prefix_scores(distance_matrix(seq.features, gamma), labels)
    return conformal_pvalues(scores, xi, labels, seed)


# ---------------------------------------------------------------- martingale

def martingale_values(p) -> np.ndarray:
    """Betting martingale for p-values of shape (..., T); vectorised over leading axes."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    k = len(BET_SLOPES)
    w = np.full(p.shape[:-1] + (k,), 1.0 / k)
    c = np.ones(p.shape[:-1])
    out = np.empty(p.shape)
    for t in range(p.shape[-1]):
        w = (1 - MIXING_RATE) * w + (MIXING_RATE / k) * c[..., None]
        w = w * (1 + BET_SLOPES * (p[..., t, None] - 0.5))
        c = w.sum(axis=-1)
        over = c > CAPITAL_CAP
        if np.any(over):
            w = np.where(over[..., None], w * (CAPITAL_CAP / np.where(over, c, 1.0))[..., None], w)
            c = w.sum(axis=-1)
        out[..., t] = c
    return out


def first_crossing(values, threshold: float) -> int | None:
    hits = np.flatnonzero(np.asarray(values) >= threshold)
    return int(hits[0]) if len(hits) else None


def betting_martingale(p, threshold: float = np.inf) -> MartingaleTrace:
    pv = p.values if isinstance(p, PValueSequence) else np.asarray(p, dtype=np.float64)
    values = martingale_values(pv)
    return MartingaleTrace(values, threshold, first_crossing(values, threshold), pv)


def detect(seq: DetectionSequence, alpha: float = 0.01, mode: str = COVARIATE,
           gamma: float = 1.0, rng=None, xi=None) -> MartingaleTrace:
    """Run the detector over ``seq``; it triggers when the martingale reaches ``1/alpha``."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    p = sequence_pvalues(seq, mode, gamma, rng, xi)
    return betting_martingale(p, 1.0 / alpha)


class OnlineDetector:
    """Streaming form of :func:`detect`: feed one point at a time.

    Keeps every point's running nearest-neighbour distance, so each arrival
    costs one row of distances.
    """

    def __init__(self, alpha: float = 0.01, mode: str = COVARIATE, gamma: float = 1.0, rng=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.threshold = 1.0 / alpha
        self.mode, self.gamma = mode, gamma
        self.rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.points: list[np.ndarray] = []
        self.labels: list = []
        self.scores: list[float] = []
        self.bettor = BettorState()
        self.t = 0
        self.triggered_at: int | None = None

    def update(self, z, y=None, xi: float | None = None) -> float:
        z = np.asarray(z, dtype=np.float64)
        if not np.any(z):
            raise ValueError("cosine distance undefined for a zero vector")
        z = unit_normalize(z)
        if self.mode == CONCEPT and y is None:
            raise ValueError("concept mode needs a label per point")
        if self.points:
            prev = np.array(self.points)
            c = _snap(np.clip(prev @ z, -1.0, 1.0))
            d = 1.0 - np.sign(c) * np.abs(c) ** self.gamma
            if self.mode == CONCEPT:
                d = np.where(np.array(self.labels) == y, d, np.inf)
            self.scores = list(np.minimum(self.scores, d))
            own = float(d.min())
        else:
            own = np.inf
        self.points.append(z)
        self.labels.append(y)
        self.scores.append(own)
        if xi is None:
            xi = self.rng.random()
        labels = self.labels if self.mode == CONCEPT else None
        p = pvalue_from_scores(self.scores, xi, labels)
        s = self.bettor.update(p)
        if self.triggered_at is None and s >= self.threshold:
            self.triggered_at = self.t
        self.t += 1
        return s


def measure_detection_delay(pre_sampler: Callable, post_sampler: Callable, changepoint: int,
                            alpha: float = 0.01, reps: int = 50, length: int | None = None,
                            mode: str = COVARIATE, gamma: float = 1.0, seed: int = 0) -> float:
    """Mean of ``trigger_index - changepoint`` over reps that trigger after the change.

    Samplers are called as ``sampler(n, rng)`` and return an (n, d) array.
    Returns ``inf`` when no rep triggers after the changepoint. Indices count
    points from 1, so a trigger on the first post-change point has delay 1.
    """
    length = length or 2 * changepoint
    root = np.random.SeedSequence(seed)
    delays = []
    for child in root.spawn(reps):
        data_rng, xi_rng = (np.random.default_rng(s) for s in child.spawn(2))
        x = np.vstack([pre_sampler(changepoint, data_rng),
                       post_sampler(length - changepoint, data_rng)])
        trace = detect(DetectionSequence(x), alpha, mode, gamma, rng=xi_rng)
        if trace.triggered_at is not None and trace.triggered_at + 1 > changepoint:
            delays.append(trace.triggered_at + 1 - changepoint)
    return float(np.mean(delays)) if delays else float("inf")
