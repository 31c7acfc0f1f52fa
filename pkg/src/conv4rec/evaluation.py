"""Held-out metrics and rankings built on a predictor's probability tensors.

A *predictor* is anything with ``scale``, ``train`` and
``predict_users(users) -> G`` where ``G`` has shape ``(len(users), n, k+1)``.
:class:`~conv4rec.training.TrainState` qualifies (it averages its
checkpoints) and so does :class:`FixedPredictor` for hand-built tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .dataset import ObservedDataset, RatingScale
from .model import outputs_from_probs

__all__ = [
    "Predictor",
    "FixedPredictor",
    "MetricReport",
    "SerendipityReport",
    "rmse",
    "recall_at_k",
    "recall_at_ks",
    "recall_from_scores",
    "rank_with_lambda",
    "lambda_grid",
    "tune_lambda_per_user",
    "lambda_density",
    "serendipity_report",
    "evaluate",
]

_CHUNK = 128


class Predictor(Protocol):
    scale: RatingScale
    train: ObservedDataset

    def predict_users(self, users: Sequence[int]) -> np.ndarray: ...


@dataclass
class FixedPredictor:
    """Serves rows of a precomputed ``(m, n, k+1)`` probability tensor."""

    probs: np.ndarray
    train: ObservedDataset
    scale: RatingScale

    def predict_users(self, users: Sequence[int]) -> np.ndarray:
        return self.probs[np.asarray(users, dtype=np.int64)]


@dataclass
class MetricReport:
    rmse: float
    recall: dict[int, float]
    n_rmse: int = 0
    n_recall_users: int = 0
    extra: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        out = [("rmse", self.rmse)]
        out += [(f"recall@{K}", v) for K, v in sorted(self.recall.items())]
        out += [("n_test_triples", float(self.n_rmse)), ("n_recall_users", float(self.n_recall_users))]
        out += sorted(self.extra.items())
        return out

    def write(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            fh.write("metric\tvalue\n")
            for name, value in self.rows():
                fh.write(f"{name}\t{value!r}\n")


@dataclass
class SerendipityReport:
    user: int
    threshold: float
    items: np.ndarray
    interaction: np.ndarray
    prediction: np.ndarray


def _train_mask(train: ObservedDataset, users: np.ndarray) -> np.ndarray:
    mask = np.zeros((users.size, train.n), dtype=bool)
    for b, i in enumerate(users):
        items, _ = train.user_items(int(i))
        mask[b, items] = True
    return mask


def _group(data: ObservedDataset) -> dict[int, np.ndarray]:
    order = np.lexsort((data.items, data.users))
    users = data.users[order]
    items = data.items[order]
    cuts = np.flatnonzero(np.diff(users)) + 1
    return {int(u[0]): it for u, it in zip(np.split(users, cuts), np.split(items, cuts)) if u.size}


def rmse(state: Predictor, test: ObservedDataset, exclude_cold: bool = False) -> float:
    """Root mean squared error of the predicted rating at the test triples."""
    if test.N == 0:
        raise ValueError("rmse of an empty test set")
    sel = np.ones(test.N, dtype=bool)
    if exclude_cold:
        sel = state.train.user_counts[test.users] > 0
        if not sel.any():
            raise ValueError("every test triple belongs to a cold user")
    users_all, items_all = test.users[sel], test.items[sel]
    truth = test.rating_values[sel]
    users = np.unique(users_all)
    u = state.scale.array
    sq = 0.0
    for lo in range(0, users.size, _CHUNK):
        chunk = users[lo:lo + _CHUNK]
        G = state.predict_users(chunk)
        pos = np.searchsorted(chunk, users_all)
        hit = (pos < chunk.size) & (chunk[np.minimum(pos, chunk.size - 1)] == users_all)
        tail = G[pos[hit], items_all[hit], 1:]
        pred = (tail @ u) / tail.sum(axis=-1)
        sq += float(np.sum((truth[hit] - pred) ** 2))
    return float(np.sqrt(sq / truth.size))


def recall_from_scores(scores: np.ndarray, excluded: np.ndarray, relevant: np.ndarray, K: int) -> float:
    """Recall@K of one ranking.

    Items flagged in ``excluded`` are never ranked; ties go to the smaller
    item index. The denominator is ``min(K, |relevant|)``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    cand = np.flatnonzero(~excluded)
    order = cand[np.argsort(-scores[cand], kind="stable")]
    top = order[:K]
    hits = np.isin(relevant, top).sum()
    return float(hits) / min(K, relevant.size)


def recall_at_ks(state: Predictor, train: ObservedDataset, test: ObservedDataset,
                 Ks: Iterable[int] = (50, 100), exclude_cold: bool = False) -> tuple[dict[int, float], int]:
    """Mean recall per K over users with at least one test item."""
    Ks = tuple(int(K) for K in Ks)
    if any(K < 1 for K in Ks):
        raise ValueError("K must be at least 1")
    groups = _group(test)
    if exclude_cold:
        groups = {u: it for u, it in groups.items() if train.user_counts[u] > 0}
    if not groups:
        raise ValueError("no user has a test interaction")
    users = np.fromiter(sorted(groups), dtype=np.int64)
    sums = dict.fromkeys(Ks, 0.0)
    for lo in range(0, users.size, _CHUNK):
        chunk = users[lo:lo + _CHUNK]
        G = state.predict_users(chunk)
        mask = _train_mask(train, chunk)
        for b, i in enumerate(chunk):
            scores = 1.0 - G[b, :, 0]
            for K in Ks:
                sums[K] += recall_from_scores(scores, mask[b], groups[int(i)], K)
    return {K: s / users.size for K, s in sums.items()}, int(users.size)


def recall_at_k(state: Predictor, train: ObservedDataset, test: ObservedDataset, K: int,
                exclude_cold: bool = False) -> float:
    return recall_at_ks(state, train, test, (K,), exclude_cold)[0][K]


def _blend(G: np.ndarray, scale: RatingScale, lam: float) -> np.ndarray:
    out = outputs_from_probs(G, scale)
    explicit = (out.prediction - scale.values[0]) / scale.span
    return out.interaction + lam * explicit


def rank_with_lambda(state: Predictor, user: int, lam: float) -> np.ndarray:
    """Non-training items ordered by ``I + lam * E``, best first.

    ``I`` is the interaction probability and ``E`` the predicted rating
    rescaled to ``[0, 1]``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    G = state.predict_users([user])[0]
    score = _blend(G, state.scale, lam)
    seen, _ = state.train.user_items(int(user))
    cand = np.setdiff1d(np.arange(G.shape[0]), seen)
    return cand[np.argsort(-score[cand], kind="stable")]


def lambda_grid() -> np.ndarray:
    """Zero followed by 99 log-spaced values from 1e-3 to 1e3."""
    return np.concatenate([[0.0], np.geomspace(1e-3, 1e3, 99)])


def tune_lambda_per_user(state: Predictor, validation: ObservedDataset, K: int = 50,
                         grid: np.ndarray | None = None) -> dict[int, float]:
    """Per-user λ maximizing validation recall@K; ties go to the smaller λ."""
    grid = lambda_grid() if grid is None else np.asarray(grid)
    groups = _group(validation)
    users = np.fromiter(sorted(groups), dtype=np.int64)
    out: dict[int, float] = {}
    train = state.train
    for lo in range(0, users.size, _CHUNK):
        chunk = users[lo:lo + _CHUNK]
        G = state.predict_users(chunk)
        mask = _train_mask(train, chunk)
        for b, i in enumerate(chunk):
            o = outputs_from_probs(G[b], state.scale)
            imp = o.interaction
            exp = (o.prediction - state.scale.values[0]) / state.scale.span
            best, best_lam = -1.0, grid[0]
            for lam in grid:
                rec = recall_from_scores(imp + lam * exp, mask[b], groups[int(i)], K)
                if rec > best:
                    best, best_lam = rec, lam
            out[int(i)] = float(best_lam)
    return out


def lambda_density(choices: dict[int, float], grid: np.ndarray | None = None) -> list[tuple[float, int]]:
    """``(λ, count)`` pairs over the grid."""
    grid = lambda_grid() if grid is None else np.asarray(grid)
    vals = np.fromiter(choices.values(), dtype=float, count=len(choices))
    return [(float(lam), int(np.sum(vals == lam))) for lam in grid]


def serendipity_report(state: Predictor, user: int, percentile: float, top: int | None = 10) -> SerendipityReport:
    """Unlikely-to-be-seen items ranked by predicted rating.

    Candidates are the user's non-training items whose interaction
    probability is at most the ``percentile`` quantile over those items.
    """
    if not 0.0 < percentile < 1.0:
        raise ValueError("percentile must lie strictly between 0 and 1")
    G = state.predict_users([user])[0]
    o = outputs_from_probs(G, state.scale)
    seen, _ = state.train.user_items(int(user))
    cand = np.setdiff1d(np.arange(G.shape[0]), seen)
    if cand.size == 0:
        return SerendipityReport(user, float("nan"), cand, cand.astype(float), cand.astype(float))
    thr = float(np.quantile(o.interaction[cand], percentile))
    keep = cand[o.interaction[cand] <= thr]
    keep = keep[np.argsort(-o.prediction[keep], kind="stable")]
    if top is not None:
        keep = keep[:top]
    return SerendipityReport(user, thr, keep, o.interaction[keep], o.prediction[keep])


def evaluate(state: Predictor, test: ObservedDataset, Ks: Sequence[int] = (50, 100),
             exclude_cold: bool = False) -> MetricReport:
    rec, n_users = recall_at_ks(state, state.train, test, Ks, exclude_cold)
    err = rmse(state, test, exclude_cold)
    n_rmse = test.N if not exclude_cold else int(np.sum(state.train.user_counts[test.users] > 0))
    return MetricReport(err, rec, n_rmse, n_users)
