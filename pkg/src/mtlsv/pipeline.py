"""Glue between trained models, the scoring backend and trial evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import backend as be
from . import network as net
from .trials import ScoreSet, TrialSet


def extract_all(model: net.Model, records) -> tuple:
    """Embeddings for ``records`` in their given order: ``(ids, matrix)``."""
    ids = [r.utt_id for r in records]
    mat = np.stack([net.extract_embedding(r.features, model) for r in records]) if records else np.empty((0, 0))
    return ids, mat


@dataclass
class Backend:
    kind: str
    whitener: be.Whitener
    plda: Optional[be.PldaModel] = None

    def prepare(self, embeddings) -> np.ndarray:
        return self.whitener.apply(embeddings)

    def score_matrix(self, models, tests) -> np.ndarray:
        if self.kind == "cosine":
            return be.cosine_scores(models, tests)
        return be.PldaScorer.from_model(self.plda).score_matrix(models, tests)


def fit_backend(embeddings, labels, kind: str = "plda", plda_iterations: int = 10) -> Backend:
    """Whitener on the background embeddings, plus PLDA when requested.

    ``labels`` are the PLDA class labels: speakers or speaker-phrase pairs.
    """
    if kind not in ("cosine", "plda"):
        raise ValueError(f"unknown backend {kind!r}")
    w = be.fit_whitener(embeddings)
    plda = None
    if kind == "plda":
        plda = be.plda_fit(w.apply(embeddings), labels, iterations=plda_iterations)
    return Backend(kind, w, plda)


def score_trials(trials: TrialSet, ids, embeddings, backend: Backend) -> ScoreSet:
    """Score every trial; enrollment models average their utterances."""
    row = {u: i for i, u in enumerate(ids)}
    prepared = backend.prepare(np.asarray(embeddings, dtype=np.float64))
    model_ids = list(trials.models)
    model_vecs = np.stack([be.enroll_model(prepared[[row[u] for u in trials.models[m]]]) for m in model_ids])
    test_ids = sorted({t.test_utt_id for t in trials.trials}, key=row.__getitem__)
    test_vecs = prepared[[row[u] for u in test_ids]]
    matrix = backend.score_matrix(model_vecs, test_vecs)
    m_index = {m: i for i, m in enumerate(model_ids)}
    t_index = {u: i for i, u in enumerate(test_ids)}
    scores = np.array([matrix[m_index[t.model_id], t_index[t.test_utt_id]] for t in trials.trials])
    return ScoreSet(list(trials.trials), scores)
