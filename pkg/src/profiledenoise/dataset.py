"""Rating-log ingestion, k-core filtering, temporal leave-one-out splits and prompt windows."""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_logger = logging.getLogger(__name__)

FORMATS = ("movielens-dat", "csv", "tsv")


class DatasetError(ValueError):
    """Raised for malformed inputs and infeasible preprocessing settings."""


class ParseError(DatasetError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True, slots=True)
class Interaction:
    user: str
    item: str
    rating: int
    timestamp: int


def id_key(ext_id: str):
    """Sort key ordering numeric ids numerically and everything else lexically after them."""
    try:
        return (0, int(ext_id), "")
    except ValueError:
        return (1, 0, ext_id)


def _make_interaction(path, lineno, user, item, rating, timestamp) -> Interaction:
    user, item = user.strip(), item.strip()
    if not user or not item:
        raise ParseError(path, lineno, "empty user or item id")
    try:
        rating_f = float(rating) if str(rating).strip() != "" else 1.0
        ts = int(float(timestamp))
    except ValueError as exc:
        raise ParseError(path, lineno, f"bad number ({exc})") from None
    if ts < 0:
        raise ParseError(path, lineno, f"negative timestamp {ts}")
    r = int(round(rating_f))
    # unary feedback (no explicit scale) collapses to rating 1
    if r <= 0:
        r = 1
    if r > 5:
        raise ParseError(path, lineno, f"rating {rating!r} outside 1..5")
    return Interaction(user, item, r, ts)


def _dedup(rows: Iterable[Interaction]) -> list[Interaction]:
    latest: dict[tuple[str, str], Interaction] = {}
    for it in rows:
        key = (it.user, it.item)
        prev = latest.get(key)
        if prev is None or it.timestamp >= prev.timestamp:
            latest[key] = it
    return list(latest.values())


def load_interactions(path, format: str = "csv") -> list[Interaction]:
    """Read a rating log.

    ``movielens-dat`` expects ``user::item::rating::timestamp`` rows; ``csv``/``tsv``
    need a header with at least ``user``, ``item`` and ``timestamp`` columns
    (``rating`` is optional and defaults to 1). Duplicate (user, item) events keep
    the latest timestamp.
    """
    path = Path(path)
    if format not in FORMATS:
        raise DatasetError(f"unknown format {format!r}; expected one of {FORMATS}")
    rows: list[Interaction] = []
    if format == "movielens-dat":
        with open(path, encoding="latin-1") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("::")
                if len(parts) != 4:
                    raise ParseError(path, lineno, f"expected 4 '::'-separated fields, got {len(parts)}")
                rows.append(_make_interaction(path, lineno, *parts))
    else:
        delim = "," if format == "csv" else "\t"
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter=delim)
            header = next(reader, None)
            if header is None:
                return []
            cols = {name.strip().lower(): i for i, name in enumerate(header)}
            missing = {"user", "item", "timestamp"} - cols.keys()
            if missing:
                raise ParseError(path, 1, f"header lacks columns {sorted(missing)}")
            r_col = cols.get("rating")
            for lineno, rec in enumerate(reader, 2):
                if not rec or all(not c.strip() for c in rec):
                    continue
                if len(rec) < len(header):
                    raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(rec)}")
                rating = rec[r_col] if r_col is not None else "1"
                rows.append(_make_interaction(path, lineno, rec[cols["user"]], rec[cols["item"]],
                                              rating, rec[cols["timestamp"]]))
    return _dedup(rows)


def _norm_title(title: str) -> str:
    return " ".join(title.split())


def load_titles(path, format: str = "csv") -> dict[str, str]:
    """Read an item-id -> title sidecar.

    ``movielens-dat`` reads ``movies.dat`` (``item::title::genres``, latin-1);
    ``csv``/``tsv`` need ``item`` and ``title`` header columns.
    """
    path = Path(path)
    titles: dict[str, str] = {}
    if format == "movielens-dat":
        with open(path, encoding="latin-1") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("::")
                if len(parts) < 2:
                    raise ParseError(path, lineno, "expected item::title[::genres]")
                titles[parts[0].strip()] = _norm_title(parts[1])
    else:
        delim = "," if format == "csv" else "\t"
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh, delimiter=delim)
            if reader.fieldnames is None or not {"item", "title"} <= set(reader.fieldnames):
                raise ParseError(path, 1, "title file header must name item,title")
            for lineno, rec in enumerate(reader, 2):
                titles[rec["item"].strip()] = _norm_title(rec["title"] or "")
    return titles


def describe(interactions: Sequence[Interaction], titles: dict[str, str] | None = None) -> dict:
    """Dataset statistics; the item count includes catalogue entries from ``titles``."""
    users = {it.user for it in interactions}
    items = {it.item for it in interactions}
    if titles:
        items |= titles.keys()
    n = len(interactions)
    dens = n / (len(users) * len(items)) if users and items else 0.0
    per_user = Counter(it.user for it in interactions)
    per_item = Counter(it.item for it in interactions)
    return {
        "interactions": n,
        "users": len(users),
        "items": len(items),
        "min_per_user": min(per_user.values(), default=0),
        "min_per_item": min(per_item.values(), default=0),
        "sparsity": 1.0 - dens,
    }


def kcore_filter(interactions: Sequence[Interaction], user_min: int, item_min: int) -> list[Interaction]:
    """Peel users below ``user_min`` and items below ``item_min`` interactions until a fixpoint."""
    if user_min < 1 or item_min < 1:
        raise DatasetError("k-core thresholds must be >= 1")
    rows = _dedup(interactions)
    by_user: dict[str, set[str]] = defaultdict(set)
    by_item: dict[str, set[str]] = defaultdict(set)
    for it in rows:
        by_user[it.user].add(it.item)
        by_item[it.item].add(it.user)

    queue_u = [u for u, s in by_user.items() if len(s) < user_min]
    queue_i = [i for i, s in by_item.items() if len(s) < item_min]
    dead_u: set[str] = set()
    dead_i: set[str] = set()
    while queue_u or queue_i:
        while queue_u:
            u = queue_u.pop()
            if u in dead_u:
                continue
            dead_u.add(u)
            for i in by_user.pop(u):
                s = by_item[i]
                s.discard(u)
                if len(s) < item_min and i not in dead_i:
                    queue_i.append(i)
        while queue_i:
            i = queue_i.pop()
            if i in dead_i:
                continue
            dead_i.add(i)
            for u in by_item.pop(i):
                s = by_user[u]
                s.discard(i)
                if len(s) < user_min and u not in dead_u:
                    queue_u.append(u)

    kept = [it for it in rows if it.user not in dead_u and it.item not in dead_i]
    if not kept:
        raise DatasetError(f"empty-after-kcore: no interactions survive user_min={user_min}, item_min={item_min}")
    return kept


@dataclass
class SplitDataset:
    """Leave-one-out decomposition over dense user/item indices.

    ``histories[u]`` holds the training items of user ``u`` oldest first; the
    matching ``timestamps`` and ``ratings`` arrays are aligned with it.
    """

    item_ids: list[str]
    titles: list[str | None]
    user_ids: list[str]
    histories: list[np.ndarray]
    timestamps: list[np.ndarray]
    ratings: list[np.ndarray]
    test_item: np.ndarray
    val_item: np.ndarray
    val2_item: np.ndarray
    holdout_ratings: np.ndarray = field(default=None)  # (n_users, 3): test, val, val2
    window_len: int = 0

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def train(self) -> sp.csr_matrix:
        if getattr(self, "_train", None) is None:
            rows = np.repeat(np.arange(self.n_users), [len(h) for h in self.histories])
            cols = np.concatenate(self.histories) if self.histories else np.zeros(0, dtype=np.int64)
            data = np.ones(len(cols), dtype=np.float64)
            self._train = sp.csr_matrix((data, (rows, cols)), shape=(self.n_users, self.n_items))
        return self._train

    def profile(self, user: int) -> np.ndarray:
        return self.histories[user]

    def row(self, user: int) -> np.ndarray:
        x = np.zeros(self.n_items)
        x[self.histories[user]] = 1.0
        return x

    def title(self, item: int) -> str:
        t = self.titles[item]
        if not t:
            raise DatasetError(f"no title for item {self.item_ids[item]!r}")
        return t

    def rating_of(self, user: int, item: int) -> int | None:
        hit = np.nonzero(self.histories[user] == item)[0]
        return int(self.ratings[user][hit[0]]) if len(hit) else None

    def popularity(self) -> np.ndarray:
        return np.bincount(np.concatenate(self.histories), minlength=self.n_items) if self.histories else np.zeros(self.n_items, int)


def temporal_split(interactions: Sequence[Interaction], titles: dict[str, str] | None = None) -> SplitDataset:
    """Most recent interaction -> test, second -> validation, third -> validation-2, rest -> train."""
    rows = _dedup(interactions)
    per_user: dict[str, list[Interaction]] = defaultdict(list)
    for it in rows:
        per_user[it.user].append(it)
    short = sorted((u for u, v in per_user.items() if len(v) < 4), key=id_key)
    if short:
        shown = ", ".join(short[:20]) + (" ..." if len(short) > 20 else "")
        raise DatasetError(f"{len(short)} user(s) have fewer than 4 interactions: {shown}")
    if not per_user:
        raise DatasetError("no interactions to split")

    user_ids = sorted(per_user, key=id_key)
    item_ids = sorted({it.item for it in rows}, key=id_key)
    item_index = {i: n for n, i in enumerate(item_ids)}
    titles = titles or {}
    title_list = [titles.get(i) or None for i in item_ids]

    histories, stamps, ratings = [], [], []
    test, val, val2, hold_r = [], [], [], []
    for u in user_ids:
        seq = sorted(per_user[u], key=lambda it: (it.timestamp, id_key(it.item)))
        idx = [item_index[it.item] for it in seq]
        test.append(idx[-1]), val.append(idx[-2]), val2.append(idx[-3])
        hold_r.append([seq[-1].rating, seq[-2].rating, seq[-3].rating])
        histories.append(np.array(idx[:-3], dtype=np.int64))
        stamps.append(np.array([it.timestamp for it in seq[:-3]], dtype=np.int64))
        ratings.append(np.array([it.rating for it in seq[:-3]], dtype=np.int64))
    return SplitDataset(
        item_ids=item_ids,
        titles=title_list,
        user_ids=user_ids,
        histories=histories,
        timestamps=stamps,
        ratings=ratings,
        test_item=np.array(test, dtype=np.int64),
        val_item=np.array(val, dtype=np.int64),
        val2_item=np.array(val2, dtype=np.int64),
        holdout_ratings=np.array(hold_r, dtype=np.int64).reshape(-1, 3),
        window_len=min(len(h) for h in histories),
    )


def quartile_bins(values: Sequence[float]) -> np.ndarray:
    """Bucket 0..3 per value using the quartile cut points; equal values share a bucket."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return np.zeros(0, dtype=np.int64)
    edges = np.quantile(v, [0.25, 0.5, 0.75])
    return np.searchsorted(edges, v, side="left").astype(np.int64)


def largest_remainder(n: int, sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.int64)
    total = sizes.sum()
    quota = n * sizes / total
    alloc = np.floor(quota).astype(np.int64)
    rest = n - alloc.sum()
    # stable: ties resolve to the earlier stratum
    order = np.argsort(-(quota - alloc), kind="stable")
    alloc[order[:rest]] += 1
    return alloc


def stratified_sample(dataset: SplitDataset, n: int, seed: int) -> np.ndarray:
    """Seeded user sample, proportionally allocated over quartiles of training-history length."""
    if n <= 0:
        raise DatasetError(f"sample size must be positive, got {n}")
    if n > dataset.n_users:
        raise DatasetError(f"sample size {n} exceeds {dataset.n_users} users")
    if n == dataset.n_users:
        return np.arange(dataset.n_users)
    lengths = np.array([len(h) for h in dataset.histories])
    strata = quartile_bins(lengths)
    labels = np.unique(strata)
    members = [np.nonzero(strata == s)[0] for s in labels]
    alloc = largest_remainder(n, [len(m) for m in members])
    rng = np.random.default_rng(seed)
    picked = [rng.choice(m, size=a, replace=False) for m, a in zip(members, alloc) if a > 0]
    return np.sort(np.concatenate(picked))


def prompt_window(dataset: SplitDataset, user: int) -> np.ndarray:
    """The ``window_len`` most recent training items of ``user``, oldest first."""
    h = dataset.histories[user]
    return h[len(h) - dataset.window_len:]


# -- serialization ---------------------------------------------------------

SPLIT_VERSION = 1


def save_split(dataset: SplitDataset, directory) -> dict[str, Path]:
    """Write ``meta.json``, ``users.jsonl`` (holdouts + window) and ``train.coo``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": SPLIT_VERSION,
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "window_len": dataset.window_len,
        "items": [[i, t] for i, t in zip(dataset.item_ids, dataset.titles)],
    }
    paths = {"meta": d / "meta.json", "users": d / "users.jsonl", "train": d / "train.coo"}
    paths["meta"].write_text(json.dumps(meta, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    with open(paths["users"], "w", encoding="utf-8") as fh:
        for u in range(dataset.n_users):
            rec = {
                "user": u,
                "external_id": dataset.user_ids[u],
                "test": int(dataset.test_item[u]),
                "val": int(dataset.val_item[u]),
                "val2": int(dataset.val2_item[u]),
                "holdout_ratings": [int(r) for r in dataset.holdout_ratings[u]],
                "window": [int(i) for i in prompt_window(dataset, u)],
                "history": [int(i) for i in dataset.histories[u]],
                "timestamps": [int(t) for t in dataset.timestamps[u]],
                "ratings": [int(r) for r in dataset.ratings[u]],
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    with open(paths["train"], "w", encoding="ascii") as fh:
        for u, h in enumerate(dataset.histories):
            for i in sorted(h.tolist()):
                fh.write(f"{u} {i}\n")
    return paths


def load_split(directory) -> SplitDataset:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    if meta.get("version") != SPLIT_VERSION:
        raise DatasetError(f"unsupported split version {meta.get('version')!r}")
    recs = [json.loads(line) for line in (d / "users.jsonl").read_text(encoding="utf-8").splitlines() if line]
    recs.sort(key=lambda r: r["user"])
    arr = lambda key: [np.array(r[key], dtype=np.int64) for r in recs]  # noqa: E731
    ds = SplitDataset(
        item_ids=[i for i, _ in meta["items"]],
        titles=[t for _, t in meta["items"]],
        user_ids=[r["external_id"] for r in recs],
        histories=arr("history"),
        timestamps=arr("timestamps"),
        ratings=arr("ratings"),
        test_item=np.array([r["test"] for r in recs], dtype=np.int64),
        val_item=np.array([r["val"] for r in recs], dtype=np.int64),
        val2_item=np.array([r["val2"] for r in recs], dtype=np.int64),
        holdout_ratings=np.array([r["holdout_ratings"] for r in recs], dtype=np.int64).reshape(-1, 3),
        window_len=int(meta["window_len"]),
    )
    coo = np.loadtxt(d / "train.coo", dtype=np.int64, ndmin=2)
    if len(coo) != sum(len(h) for h in ds.histories):
        raise DatasetError("train.coo disagrees with users.jsonl")
    return ds

