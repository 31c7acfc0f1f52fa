"""Rating files, train/validation/test splits and one-hot user slices.

Users and items are indexed from 0 internally; the external IDs found in
the file are kept on the dataset so reports can map back. Rating indices
follow the model's channel convention: ``1..k`` for the ratings
``u_1 < ... < u_k`` and ``0`` for "not observed".
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import make_rng

_log = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "RatingScale",
    "ObservedDataset",
    "UserSlice",
    "SplitSpec",
    "load_ratings",
    "save_ratings",
    "write_split_manifest",
    "read_split_manifest",
    "split",
    "user_slice",
    "dense_slices",
]


class DataError(ValueError):
    """Malformed or inconsistent rating data."""


@dataclass(frozen=True)
class RatingScale:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 2:
            raise ValueError("a rating scale needs at least two values")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"rating values must be strictly increasing: {vals}")

    @classmethod
    def integer(cls, low: int = 1, high: int = 5) -> "RatingScale":
        return cls(tuple(range(low, high + 1)))

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def span(self) -> float:
        return self.values[-1] - self.values[0]

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values)

    def index_of(self, rating: float) -> int:
        """1-based rating index of ``rating``; raises ``KeyError`` if off-scale."""
        for idx, v in enumerate(self.values, start=1):
            if abs(v - rating) <= 1e-9 * max(1.0, abs(v)):
                return idx
        raise KeyError(rating)


@dataclass(frozen=True)
class ObservedDataset:
    """Sparse set of observed (user, item, rating-index) triples."""

    m: int
    n: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    scale: RatingScale
    user_ids: tuple = ()
    item_ids: tuple = ()

    def __post_init__(self) -> None:
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        ratings = np.asarray(self.ratings, dtype=np.int64)
        if not (users.shape == items.shape == ratings.shape) or users.ndim != 1:
            raise DataError("users, items and ratings must be 1-d arrays of equal length")
        if users.size:
            if users.min() < 0 or users.max() >= self.m:
                raise DataError("user index out of range")
            if items.min() < 0 or items.max() >= self.n:
                raise DataError("item index out of range")
            if ratings.min() < 1 or ratings.max() > self.scale.k:
                raise DataError("rating index out of range")
        for arr in (users, items, ratings):
            arr.setflags(write=False)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)

    @property
    def N(self) -> int:
        return int(self.users.size)

    def __len__(self) -> int:
        return self.N

    @property
    def k(self) -> int:
        return self.scale.k

    @property
    def rating_values(self) -> np.ndarray:
        return self.scale.array[self.ratings - 1]

    def subset(self, idx: np.ndarray) -> "ObservedDataset":
        """Dataset restricted to the triples at positions ``idx`` (same m, n, IDs)."""
        idx = np.asarray(idx, dtype=np.int64)
        return ObservedDataset(
            self.m, self.n, self.users[idx], self.items[idx], self.ratings[idx],
            self.scale, self.user_ids, self.item_ids,
        )

    @cached_property
    def _by_user(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        order = np.lexsort((self.items, self.users))
        indptr = np.zeros(self.m + 1, dtype=np.int64)
        np.add.at(indptr, self.users + 1, 1)
        np.cumsum(indptr, out=indptr)
        return indptr, self.items[order], self.ratings[order]

    def user_items(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Items and rating indices observed for user ``i``, sorted by item."""
        indptr, items, ratings = self._by_user
        lo, hi = indptr[i], indptr[i + 1]
        return items[lo:hi], ratings[lo:hi]

    @cached_property
    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.m)

    def index_matrix(self) -> np.ndarray:
        """Dense ``m x n`` matrix of rating indices, 0 where unobserved."""
        r = np.zeros((self.m, self.n), dtype=np.int64)
        r[self.users, self.items] = self.ratings
        return r


@dataclass(frozen=True)
class UserSlice:
    """One user's row of the observation matrix in sparse one-hot form."""

    user: int
    n: int
    k: int
    items: np.ndarray
    ratings: np.ndarray

    def dense(self) -> np.ndarray:
        u = np.zeros((self.n, self.k + 1))
        u[:, 0] = 1.0
        u[self.items, 0] = 0.0
        u[self.items, self.ratings] = 1.0
        return u

    def targets(self) -> np.ndarray:
        """Channel index per item (0 for unobserved)."""
        t = np.zeros(self.n, dtype=np.int64)
        t[self.items] = self.ratings
        return t


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.9
    validation: float = 0.05
    test: float = 0.05
    seed: int = 0
    stratify: bool = False  # split each user's triples separately

    def __post_init__(self) -> None:
        fr = (self.train, self.validation, self.test)
        if any(f <= 0 for f in fr):
            raise ValueError(f"split fractions must be positive: {fr}")
        if abs(sum(fr) - 1.0) > 1e-12:
            raise ValueError(f"split fractions must sum to 1: {fr}")


_DELIMS = ("::", "\t", ",")


def _detect_delimiter(line: str) -> str:
    for d in _DELIMS:
        if d in line:
            return d
    if len(line.split()) >= 3:
        return " "
    raise DataError(f"cannot detect a delimiter in line: {line!r}")


def _sorted_ids(raw: Sequence[str]) -> list[str]:
    uniq = set(raw)
    try:
        return sorted(uniq, key=lambda s: (float(s), s))
    except ValueError:
        return sorted(uniq)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_ratings(path: str | Path, scale: RatingScale | None = None) -> ObservedDataset:
    """Read ``user, item, rating[, timestamp]`` lines.

    Delimiters ``::``, tab and comma are auto-detected. A leading header line
    is skipped when its rating field is not numeric. When ``scale`` is None
    the scale is the sorted set of distinct ratings in the file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"rating file not found: {path}")
    raw_u: list[str] = []
    raw_i: list[str] = []
    raw_r: list[float] = []
    lines: list[int] = []
    delim = None
    first = True
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if delim is None:
                delim = _detect_delimiter(line)
            parts = line.split() if delim == " " else [p.strip() for p in line.split(delim)]
            if len(parts) < 3 or len(parts) > 4:
                raise DataError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
            if not _is_number(parts[2]):
                if first:
                    _log.debug("skipping header line %d", lineno)
                    first = False
                    continue
                raise DataError(f"{path}:{lineno}: rating {parts[2]!r} is not numeric")
            first = False
            raw_u.append(parts[0])
            raw_i.append(parts[1])
            raw_r.append(float(parts[2]))
            lines.append(lineno)

    if scale is None:
        if raw_r:
            scale = RatingScale(tuple(sorted(set(raw_r))))
        else:
            scale = RatingScale.integer(1, 5)

    user_ids = _sorted_ids(raw_u)
    item_ids = _sorted_ids(raw_i)
    umap = {u: idx for idx, u in enumerate(user_ids)}
    imap = {i: idx for idx, i in enumerate(item_ids)}

    users = np.fromiter((umap[u] for u in raw_u), dtype=np.int64, count=len(raw_u))
    items = np.fromiter((imap[i] for i in raw_i), dtype=np.int64, count=len(raw_i))
    ratings = np.empty(len(raw_r), dtype=np.int64)
    lookup: dict[float, int] = {}
    for pos, r in enumerate(raw_r):
        idx = lookup.get(r)
        if idx is None:
            try:
                idx = scale.index_of(r)
            except KeyError:
                raise DataError(f"{path}:{lines[pos]}: rating {r} is not on the scale {scale.values}") from None
            lookup[r] = idx
        ratings[pos] = idx

    if users.size:
        key = users * len(item_ids) + items
        order = np.argsort(key, kind="stable")
        dup = np.flatnonzero(key[order][1:] == key[order][:-1])
        if dup.size:
            a, b = order[dup[0]], order[dup[0] + 1]
            raise DataError(
                f"{path}: duplicate (user, item) = ({raw_u[a]}, {raw_i[a]}) on lines {lines[a]} and {lines[b]}"
            )

    return ObservedDataset(
        len(user_ids), len(item_ids), users, items, ratings, scale,
        tuple(user_ids), tuple(item_ids),
    )


def _fmt_rating(v: float) -> str:
    return repr(int(v)) if float(v).is_integer() else repr(float(v))


def save_ratings(path: str | Path, data: ObservedDataset, delimiter: str = "\t") -> None:
    """Write triples with external IDs and rating values."""
    uids = data.user_ids or tuple(str(i) for i in range(data.m))
    iids = data.item_ids or tuple(str(j) for j in range(data.n))
    vals = data.rating_values
    with Path(path).open("w") as fh:
        for u, i, r in zip(data.users, data.items, vals):
            fh.write(f"{uids[u]}{delimiter}{iids[i]}{delimiter}{_fmt_rating(r)}\n")


def write_split_manifest(path: str | Path, parts: dict[str, ObservedDataset]) -> None:
    """Triples of every part with a trailing part tag, tab separated."""
    with Path(path).open("w") as fh:
        fh.write("user\titem\trating\tpart\n")
        for tag, data in parts.items():
            uids = data.user_ids or tuple(str(i) for i in range(data.m))
            iids = data.item_ids or tuple(str(j) for j in range(data.n))
            for u, i, r in zip(data.users, data.items, data.rating_values):
                fh.write(f"{uids[u]}\t{iids[i]}\t{_fmt_rating(r)}\t{tag}\n")


def read_split_manifest(path: str | Path, like: ObservedDataset) -> dict[str, ObservedDataset]:
    """Rebuild the parts of a manifest against the index maps of ``like``."""
    uids = like.user_ids or tuple(str(i) for i in range(like.m))
    iids = like.item_ids or tuple(str(j) for j in range(like.n))
    umap = {u: idx for idx, u in enumerate(uids)}
    imap = {i: idx for idx, i in enumerate(iids)}
    rows: dict[str, list[tuple[int, int, int]]] = {}
    with Path(path).open() as fh:
        next(fh)
        for lineno, line in enumerate(fh, start=2):
            u, i, r, tag = line.rstrip("\n").split("\t")
            try:
                rows.setdefault(tag, []).append((umap[u], imap[i], like.scale.index_of(float(r))))
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: unknown id or rating {exc}") from None
    out = {}
    for tag, trip in rows.items():
        arr = np.asarray(trip, dtype=np.int64).reshape(-1, 3)
        out[tag] = ObservedDataset(like.m, like.n, arr[:, 0], arr[:, 1], arr[:, 2],
                                   like.scale, like.user_ids, like.item_ids)
    return out


def split(data: ObservedDataset, spec: SplitSpec) -> tuple[ObservedDataset, ObservedDataset, ObservedDataset]:
    """Seeded shuffle of the triples into train/validation/test.

    The default is one global shuffle. With ``spec.stratify`` every user's
    triples are shuffled and cut separately, so each part holds roughly the
    requested fraction of every user.
    """
    N = data.N
    rng = make_rng(spec.seed)
    if spec.stratify:
        va_parts, te_parts = [], []
        order = np.argsort(data.users, kind="stable")
        bounds = np.searchsorted(data.users[order], np.arange(data.m + 1))
        for u in range(data.m):
            idx = order[bounds[u]:bounds[u + 1]]
            c = idx.size
            nv, nt = int(round(c * spec.validation)), int(round(c * spec.test))
            if nv + nt >= c:
                continue
            idx = idx[rng.permutation(c)]
            va_parts.append(idx[:nv])
            te_parts.append(idx[nv:nv + nt])
        va = np.sort(np.concatenate(va_parts)) if va_parts else np.zeros(0, dtype=np.int64)
        te = np.sort(np.concatenate(te_parts)) if te_parts else np.zeros(0, dtype=np.int64)
        tr = np.setdiff1d(np.arange(N), np.concatenate([va, te]))
        if min(tr.size, va.size, te.size) < 1:
            raise DataError(f"stratified split of N={N} leaves an empty part")
        return data.subset(tr), data.subset(va), data.subset(te)
    n_val = int(round(N * spec.validation))
    n_test = int(round(N * spec.test))
    n_train = N - n_val - n_test
    if N < 3 or min(n_train, n_val, n_test) < 1:
        raise DataError(f"cannot split N={N} into fractions {(spec.train, spec.validation, spec.test)} without an empty part")
    perm = rng.permutation(N)
    tr = np.sort(perm[:n_train])
    va = np.sort(perm[n_train:n_train + n_val])
    te = np.sort(perm[n_train + n_val:])
    return data.subset(tr), data.subset(va), data.subset(te)


def user_slice(train: ObservedDataset, i: int) -> UserSlice:
    if not 0 <= i < train.m:
        raise IndexError(f"user index {i} out of range [0, {train.m})")
    items, ratings = train.user_items(i)
    return UserSlice(int(i), train.n, train.k, items, ratings)


def dense_slices(train: ObservedDataset, users: Sequence[int] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-hot inputs ``(B, n, k+1)`` and channel targets ``(B, n)`` for a batch."""
    users = np.asarray(users, dtype=np.int64)
    targets = np.zeros((users.size, train.n), dtype=np.int64)
    for b, i in enumerate(users):
        items, ratings = train.user_items(int(i))
        targets[b, items] = ratings
    onehot = np.zeros((users.size, train.n, train.k + 1))
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=2)
    return onehot, targets
