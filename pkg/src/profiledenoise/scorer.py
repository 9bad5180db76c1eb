"""Scorer contract shared by every recommender the denoisers can drive.

Denoisers only ever touch ``score``/``score_batch``, ``rank_of``,
``rescore_with_removals`` and ``item_embeddings``; anything implementing them can
stand in for the VAE.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def rank_from_scores(scores: np.ndarray, candidate: int, mask: Iterable[int] = ()) -> int:
    """1-based rank of ``candidate`` among unmasked items; ties go to the lower index."""
    scores = np.asarray(scores)
    mask_idx = np.fromiter(mask, dtype=np.int64) if not isinstance(mask, np.ndarray) else mask.astype(np.int64)
    if np.any(mask_idx == candidate):
        raise ValueError(f"candidate {candidate} is masked")
    s = scores[candidate]
    beats = scores > s
    ties = (scores == s) & (np.arange(len(scores)) < candidate)
    ahead = beats | ties
    if len(mask_idx):
        ahead[mask_idx] = False
    return int(ahead.sum()) + 1


def ranks_from_score_matrix(scores: np.ndarray, candidate: int, masks: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([rank_from_scores(s, candidate, m) for s, m in zip(scores, masks)], dtype=np.int64)


def _as_index_set(items) -> np.ndarray:
    return np.unique(np.asarray(list(items), dtype=np.int64))


class Scorer:
    """Base class; subclasses implement ``score_batch`` and ``item_embeddings``."""

    n_items: int

    def score_batch(self, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def item_embeddings(self) -> np.ndarray:
        raise NotImplementedError

    def score(self, row: np.ndarray) -> np.ndarray:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.n_items,):
            raise ValueError(f"row has shape {row.shape}, expected ({self.n_items},)")
        return self.score_batch(row[None, :])[0]

    def rank_of(self, row: np.ndarray, candidate: int, mask: Iterable[int]) -> int:
        return rank_from_scores(self.score(row), candidate, _as_index_set(mask))

    def rescore_with_removals(self, row: np.ndarray, removals: Iterable[int], candidate: int,
                              mask: Iterable[int]) -> int:
        """Rank of ``candidate`` after zeroing ``removals`` in ``row``; removed items become rankable."""
        return int(self.rescore_many(row, [tuple(removals)], candidate, mask)[0])

    def rescore_many(self, row: np.ndarray, removal_sets: Sequence[Sequence[int]], candidate: int,
                     mask: Iterable[int]) -> np.ndarray:
        """Vectorized ``rescore_with_removals`` over several removal sets of one user."""
        row = np.asarray(row, dtype=np.float64)
        mask = _as_index_set(mask)
        support = set(np.flatnonzero(row).tolist())
        edited = np.repeat(row[None, :], len(removal_sets), axis=0)
        masks = []
        for n, rem in enumerate(removal_sets):
            rem = _as_index_set(rem)
            bad = [int(i) for i in rem if int(i) not in support]
            if bad:
                raise ValueError(f"removals {bad} are not in the user's profile")
            edited[n, rem] = 0.0
            masks.append(np.setdiff1d(mask, rem, assume_unique=True))
        if not len(removal_sets):
            return np.zeros(0, dtype=np.int64)
        return ranks_from_score_matrix(self.score_batch(edited), candidate, masks)

    def top_k(self, row: np.ndarray, k: int, mask: Iterable[int]) -> np.ndarray:
        """Top ``k`` unmasked items by score, ties by lower index."""
        s = self.score(row)
        order = np.lexsort((np.arange(len(s)), -s))
        m = set(_as_index_set(mask).tolist())
        return np.array([i for i in order if i not in m][:k], dtype=np.int64)


class LinearScorer(Scorer):
    """Toy scorer ``scores = row @ W``; item embeddings are the rows of ``W``."""

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.weights.shape[1]:
            raise ValueError("weights must be square (n_items x n_items)")
        self.n_items = self.weights.shape[0]

    def score_batch(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) @ self.weights

    def item_embeddings(self) -> np.ndarray:
        return self.weights.copy()
