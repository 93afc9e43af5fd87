"""Embedding post-processing and verification scoring.

Embeddings are centered, whitened and length-normalized, then scored by
cosine similarity or by a two-covariance PLDA model trained with EM.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-8


class PldaError(ArithmeticError):
    pass


def _sym(a):
    return 0.5 * (a + a.T)


def _inv_sqrt(cov):
    vals, vecs = np.linalg.eigh(_sym(cov))
    floored = np.maximum(vals, EIG_FLOOR)
    return (vecs / np.sqrt(floored)) @ vecs.T, int(np.sum(vals < EIG_FLOOR))


def _inv_floored(cov):
    vals, vecs = np.linalg.eigh(_sym(cov))
    return (vecs / np.maximum(vals, EIG_FLOOR)) @ vecs.T


def _logdet(cov):
    sign, value = np.linalg.slogdet(cov)
    if sign <= 0:
        raise PldaError("covariance is not positive definite")
    return value


@dataclass
class Whitener:
    mean: np.ndarray
    transform: np.ndarray

    def whiten(self, e) -> np.ndarray:
        """Center and whiten without length normalization."""
        return (np.asarray(e, dtype=np.float64) - self.mean) @ self.transform.T

    def apply(self, e):
        return apply_whitener(self, e)


def fit_whitener(embeddings) -> Whitener:
    """Sample mean and symmetric inverse square root of the sample covariance.

    Eigenvalues below ``EIG_FLOOR`` are raised to it (with a warning).
    """
    e = np.asarray(embeddings, dtype=np.float64)
    n, d = e.shape
    if n < d + 1:
        warnings.warn(f"whitener fitted on {n} embeddings of dimension {d}; covariance is rank deficient")
    mean = e.mean(axis=0)
    centered = e - mean
    cov = centered.T @ centered / n
    transform, floored = _inv_sqrt(cov)
    if floored:
        warnings.warn(f"{floored} covariance eigenvalues floored at {EIG_FLOOR}")
    return Whitener(mean, transform)


def apply_whitener(w: Whitener, e) -> np.ndarray:
    """Center, whiten and scale to unit length. Accepts a vector or rows."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != w.mean.shape[0]:
        raise ValueError(f"embedding dimension {e.shape[-1]} does not match whitener {w.mean.shape[0]}")
    out = w.whiten(e)
    norms = np.linalg.norm(out, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("embedding is zero after whitening; cannot length-normalize")
    return out / norms


def length_normalize(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot length-normalize a zero vector")
    return e / norms


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_scores(enroll, test) -> np.ndarray:
    """All-pairs cosine scores, ``(n_enroll, n_test)``."""
    return length_normalize(enroll) @ length_normalize(test).T


def enroll_model(embeddings) -> np.ndarray:
    """Average a speaker-phrase model's enrollment embeddings, then length-normalize."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if e.shape[0] < 1:
        raise ValueError("enrollment needs at least one embedding")
    return length_normalize(e.mean(axis=0))


# ---------------------------------------------------------------------------
# two-covariance PLDA


@dataclass
class PldaModel:
    """``y ~ N(mean, between)`` per speaker, ``x | y ~ N(y, within)``."""

    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    log_likelihoods: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _group(embeddings, labels):
    e = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    if len(labels) != e.shape[0]:
        raise ValueError("one label per embedding is required")
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    keys = sorted(groups, key=str)
    return [e[groups[k]] for k in keys]


def plda_log_likelihood(groups, mean, between, within) -> float:
    """Total marginal log-likelihood of grouped data under the model.

    Per speaker with ``n`` sessions the density factorizes into the class
    mean ``~ N(mean, B + W/n)`` and the within-class scatter under ``W``.
    """
    d = mean.shape[0]
    w_inv = np.linalg.inv(within)
    logdet_w = _logdet(within)
    total = 0.0
    cache = {}
    for x in groups:
        n = x.shape[0]
        if n not in cache:
            cov = between + within / n
            cache[n] = (np.linalg.inv(cov), _logdet(cov))
        c_inv, logdet_c = cache[n]
        xbar = x.mean(axis=0)
        r = xbar - mean
        dev = x - xbar
        total += -0.5 * (d * np.log(2 * np.pi) + logdet_c + r @ c_inv @ r)
        total += -0.5 * ((n - 1) * d * np.log(2 * np.pi) + (n - 1) * logdet_w + np.einsum("ij,jk,ik->", dev, w_inv, dev))
        total += -0.5 * d * np.log(n)
    return float(total)


def plda_fit(embeddings, labels, iterations: int = 20, tol: float = 0.0) -> PldaModel:
    """EM for the two-covariance model; records the log-likelihood per iteration.

    Initialized from the between- and within-class scatter.
    """
    groups = _group(embeddings, labels)
    if len(groups) < 2:
        raise ValueError("PLDA needs at least two speakers")
    counts = np.array([g.shape[0] for g in groups])
    if counts.max() < 2:
        raise PldaError("every speaker has a single session; within-speaker covariance is unidentifiable")
    if counts.min() < 2:
        warnings.warn(f"{int(np.sum(counts < 2))} speakers have a single session")

    x_all = np.concatenate(groups)
    n_total, d = x_all.shape
    sums = np.stack([g.sum(axis=0) for g in groups])
    means = sums / counts[:, None]
    mean = x_all.mean(axis=0)
    within = sum((g - m).T @ (g - m) for g, m in zip(groups, means)) / n_total
    between = np.cov(means.T, bias=True).reshape(d, d)
    within, between = _sym(within) + EIG_FLOOR * np.eye(d), _sym(between) + EIG_FLOOR * np.eye(d)
    # sum over speakers of x x^T, used by the within-class M-step
    scatter = x_all.T @ x_all

    history = [plda_log_likelihood(groups, mean, between, within)]
    for it in range(1, iterations + 1):
        b_inv = _inv_floored(between)
        w_inv = _inv_floored(within)
        post_means = np.empty_like(means)
        post_covs = {}
        for n in np.unique(counts):
            post_covs[n] = np.linalg.inv(b_inv + n * w_inv)
        for k, (n, s) in enumerate(zip(counts, sums)):
            post_means[k] = post_covs[n] @ (b_inv @ mean + w_inv @ s)
        cov_sum = sum(post_covs[n] for n in counts)
        weighted_cov_sum = sum(n * post_covs[n] for n in counts)

        mean = post_means.mean(axis=0)
        centered = post_means - mean
        between = _sym((cov_sum + centered.T @ centered) / len(groups))
        cross = sums.T @ post_means
        yy = (post_means * counts[:, None]).T @ post_means
        within = _sym((scatter - cross - cross.T + yy + weighted_cov_sum) / n_total)
        if np.linalg.eigvalsh(within).min() <= 0:
            raise PldaError(f"within-speaker covariance became singular at iteration {it}")
        history.append(plda_log_likelihood(groups, mean, between, within))
        if tol and history[-1] - history[-2] < tol:
            break
    return PldaModel(mean, between, within, history)


@dataclass
class PldaScorer:
    """Precomputed quadratic form for the same-versus-different LLR."""

    mean: np.ndarray
    q: np.ndarray
    p: np.ndarray
    const: float

    @classmethod
    def from_model(cls, m: PldaModel) -> "PldaScorer":
        tot = m.between + m.within
        tot_inv = np.linalg.inv(tot)
        # inverse of [[T, B], [B, T]] is [[A, C], [C, A]]
        a = np.linalg.inv(tot - m.between @ tot_inv @ m.between)
        c = -tot_inv @ m.between @ a
        joint = np.block([[tot, m.between], [m.between, tot]])
        const = -0.5 * _logdet(joint) + _logdet(tot)
        return cls(m.mean, _sym(tot_inv - a), -c, float(const))

    def score(self, enroll, test) -> np.ndarray:
        """LLR for paired rows (or a single pair)."""
        e = np.asarray(enroll, dtype=np.float64) - self.mean
        t = np.asarray(test, dtype=np.float64) - self.mean
        quad = 0.5 * np.einsum("...i,ij,...j->...", e, self.q, e) + 0.5 * np.einsum("...i,ij,...j->...", t, self.q, t)
        return quad + np.einsum("...i,ij,...j->...", e, self.p, t) + self.const

    def score_matrix(self, enroll, test) -> np.ndarray:
        e = np.atleast_2d(np.asarray(enroll, dtype=np.float64)) - self.mean
        t = np.atleast_2d(np.asarray(test, dtype=np.float64)) - self.mean
        qe = 0.5 * np.einsum("ni,ij,nj->n", e, self.q, e)
        qt = 0.5 * np.einsum("ni,ij,nj->n", t, self.q, t)
        return qe[:, None] + qt[None, :] + e @ self.p @ t.T + self.const


def plda_score(m: PldaModel, enroll, test) -> float:
    """log p(enroll, test | same speaker) - log p(enroll, test | different)."""
    if np.shape(enroll)[-1] != m.dim or np.shape(test)[-1] != m.dim:
        raise ValueError("embedding dimension does not match the PLDA model")
    return float(PldaScorer.from_model(m).score(enroll, test))
