"""Differentiable surrogate of the conformal martingale detector.

Hard minima become softmax-weighted averages, strict/tie counts become
pairwise sigmoids, and the betting recursion runs on the resulting soft
p-values. Everything produces :class:`~drm.tensor.Node` objects so the
penalty can be back-propagated into an encoder.

Two routes are provided. ``soft_min``/``soft_conformity_scores``/
``soft_pvalue`` work on lists of nodes for a single prefix and are built
only from generic graph ops; ``soft_martingale`` uses fused whole-sequence
ops (``prefix_soft_scores``, ``martingale_node``) which cost O(T^2) per
sequence instead of O(T^3).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tg
from .conformal import BET_SLOPES, CONCEPT, COVARIATE, MIXING_RATE, MODES, _snap
from .tensor import Node

SOFT_CLIP = (1e-12, 1e12)


@dataclass(frozen=True)
class SoftConfig:
    sigma_min: float = 1e-3
    sigma_rank: float = 1e-3
    gamma: float = 1.0
    mode: str = COVARIATE

    def __post_init__(self):
        if self.sigma_min <= 0 or self.sigma_rank <= 0:
            raise ValueError("dispersions must be strictly positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gamma < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")

    @classmethod
    def from_sigma(cls, sigma: float, gamma: float = 1.0, mode: str = COVARIATE) -> "SoftConfig":
        return cls(sigma, sigma, gamma, mode)


@dataclass
class SoftMartingaleResult:
    soft_values: Node  # (T,)
    mean_penalty: Node  # scalar
    pvalues: Node  # (T,)


# ---------------------------------------------------------------- list-based reference route

def soft_min(distances: Sequence, sigma: float) -> Node:
    """``sum_j d_j * softmax(-d / sigma)_j``."""
    if len(distances) == 0:
        raise ValueError("soft_min of an empty list")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = tg.stack([tg.as_node(x) for x in distances])
    shift = d.value.min()  # softmax is shift invariant, so no gradient needed
    w = tg.exp((d - shift) * (-1.0 / sigma))
    w = w / tg.sum_(w)
    return tg.sum_(d * w)


def _snap_cosine(c: Node) -> Node:
    """Cosines within a few ulps of +-1 become exactly +-1; the gradient passes through."""
    return Node(_snap(c.value), (c,), lambda g: (g,), "snap")


def _pair_distance(zi: Node, zj: Node, gamma: float) -> Node:
    c = _snap_cosine(tg.dot(zi, zj))
    if gamma == 1:
        return 1.0 - c
    return 1.0 - tg.sign(c) * tg.abs_power(c, gamma)


def soft_conformity_scores(features: Sequence, labels, cfg: SoftConfig, t: int) -> list:
    """Soft scores of the first ``t`` points; ``None`` where no neighbour exists (concept mode)."""
    if t < 2:
        raise ValueError("conformity scores need at least two points")
    if cfg.mode == CONCEPT and labels is None:
        raise ValueError("concept-shift scores need labels")
    z = [tg.l2_normalize(tg.as_node(f)) for f in features[:t]]
    out = []
    for i in range(t):
        ds = [_pair_distance(z[i], z[j], cfg.gamma) for j in range(t)
              if j != i and (cfg.mode == COVARIATE or labels[j] == labels[i])]
        out.append(soft_min(ds, cfg.sigma_min) if ds else None)
    return out


def soft_pvalue(scores: Sequence, labels, cfg: SoftConfig) -> Node:
    """Soft p-value of the last of ``scores`` (all computed on the same prefix).

    The self comparison contributes ``sigmoid(0) = 0.5``, the expectation of
    the random tie-breaking weight of the hard p-value.
    """
    t = len(scores)
    idx = [i for i in range(t)
           if cfg.mode == COVARIATE or labels[i] == labels[t - 1]]
    last = scores[t - 1]
    terms = [tg.constant(0.5)]
    for i in idx[:-1]:
        terms.append(tg.sigmoid((last - scores[i]) * (1.0 / cfg.sigma_rank)))
    return tg.sum_(tg.stack(terms)) * (1.0 / len(idx))


# ---------------------------------------------------------------- fused whole-sequence route

def _valid_pairs(n: int, labels, mode: str) -> np.ndarray:
    valid = ~np.eye(n, dtype=bool)
    if mode == CONCEPT:
        if labels is None:
            raise ValueError("concept mode needs labels")
        labels = np.asarray(labels)
        valid &= labels[:, None] == labels[None, :]
    return valid


def prefix_soft_scores(dist: Node, valid: np.ndarray, sigma: float) -> tuple[Node, np.ndarray]:
    """Soft-min of row ``i`` of ``dist`` over valid columns ``j <= t``, for every (i, t).

    Returns the (T, T) score node and a boolean mask of entries whose
    neighbour set is nonempty; other entries are 0 and carry no gradient.
    Negative distances (rounding) are treated as 0.
    """
    dist = tg.as_node(dist)
    d = np.maximum(dist.value, 0.0)
    masked = np.where(valid, d, np.inf)
    run_min = np.minimum.accumulate(masked, axis=1)
    defined = np.isfinite(run_min)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_z = np.logaddexp.accumulate(np.where(valid, -d / sigma, -np.inf), axis=1)
        log_n = np.logaddexp.accumulate(np.where(valid, np.log(d) - d / sigma, -np.inf), axis=1)
        scores = np.where(defined, np.exp(log_n - log_z), 0.0)
    m = np.where(defined, run_min, 0.0)
    # normaliser relative to the running min; >= 1 wherever defined
    z_rel = np.where(defined, np.exp(log_z + m / sigma), 1.0)

    def rule(g):
        h = np.where(defined, g / z_rel, 0.0)
        k = h * scores
        # decay[:, s] = exp(-(m_s - m_{s+1}) / sigma) <= 1; 0 before the first neighbour
        with np.errstate(invalid="ignore"):
            decay = np.exp(-(run_min[:, :-1] - run_min[:, 1:]) / sigma)
        decay = np.where(defined[:, :-1], decay, 0.0)
        n = h.shape[1]
        hk = np.stack([h.T, k.T])  # (2, cols, rows): contiguous per column
        dec = np.ascontiguousarray(decay.T)
        acc = np.empty_like(hk)
        acc[:, n - 1] = hk[:, n - 1]
        for s in range(n - 2, -1, -1):
            acc[:, s] = hk[:, s] + dec[s] * acc[:, s + 1]
        big_h, big_k = acc[0].T, acc[1].T
        with np.errstate(invalid="ignore", over="ignore"):
            w = np.exp(-(d - m) / sigma)
            gd = w * ((1.0 - d / sigma) * big_h + big_k / sigma)
        return (np.where(valid & defined, gd, 0.0),)

    return Node(scores, (dist,), rule, "prefix_soft_scores"), defined


def soft_pvalues(scores: Node, labels, cfg: SoftConfig) -> Node:
    """Soft p-value for every prefix from the (T, T) prefix score matrix."""
    n = scores.shape[0]
    upto = np.triu(np.ones((n, n), dtype=bool))
    if cfg.mode == CONCEPT:
        labels = np.asarray(labels)
        upto &= labels[:, None] == labels[None, :]
    idx = np.arange(n)
    current = tg.reshape(scores[idx, idx], (1, n))
    sig = tg.sigmoid((current - scores) * (1.0 / cfg.sigma_rank))
    counts = upto.sum(axis=0)
    return tg.sum_(sig * upto.astype(np.float64), axis=0) * (1.0 / counts)


def martingale_node(p, clip: tuple[float, float] = SOFT_CLIP) -> Node:
    """Betting martingale as a graph op; outputs outside ``clip`` are clamped with zero gradient."""
    p = tg.as_node(p)
    n, k = p.shape[0], len(BET_SLOPES)
    mixed = np.empty((n, k))
    factors = 1.0 + BET_SLOPES[None, :] * (p.value[:, None] - 0.5)
    s = np.empty(n)
    c = np.full(k, 1.0 / k)
    total = 1.0
    for t in range(n):
        mixed[t] = (1 - MIXING_RATE) * c + (MIXING_RATE / k) * total
        c = mixed[t] * factors[t]
        total = c.sum()
        s[t] = total
    out = np.clip(s, *clip)
    inside = (s >= clip[0]) & (s <= clip[1])

    def rule(g):
        g = g * inside
        gp = np.empty(n)
        lam = np.zeros(k)
        for t in range(n - 1, -1, -1):
            if t < n - 1:
                back = lam * factors[t + 1]
                lam = (1 - MIXING_RATE) * back + (MIXING_RATE / k) * back.sum()
            lam = lam + g[t]
            gp[t] = (lam * mixed[t] * BET_SLOPES).sum()
        return (gp,)

    return Node(out, (p,), rule, "martingale")


def distance_node(features: Node, gamma: float = 1.0) -> Node:
    """Pairwise sharpened cosine distances of the rows of ``features`` as a graph node."""
    z = tg.l2_normalize(features)
    g = z @ z.T
    g = _snap_cosine((g + g.T) * 0.5)
    if gamma == 1:
        return 1.0 - g
    return 1.0 - tg.sign(g) * tg.abs_power(g, gamma)


def soft_martingale(features, labels, cfg: SoftConfig) -> SoftMartingaleResult:
    """Soft martingale values for a feature sequence and their mean (the penalty)."""
    if not isinstance(features, Node):
        features = tg.stack([tg.as_node(f) for f in features])
    n = features.shape[0]
    if n < 2:
        raise ValueError("soft martingale needs at least two points")
    valid = _valid_pairs(n, labels, cfg.mode)
    scores, _ = prefix_soft_scores(distance_node(features, cfg.gamma), valid, cfg.sigma_min)
    p = soft_pvalues(scores, labels, cfg)
    s = martingale_node(p)
    return SoftMartingaleResult(s, tg.mean(s), p)
