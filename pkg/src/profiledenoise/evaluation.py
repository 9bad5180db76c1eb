"""Test-set evaluation of denoising campaigns, relative changes, significance and breakdowns."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .dataset import SplitDataset, quartile_bins
from .denoise import DenoiseOutcome, ErrorKind
from .metrics import METRICS, metric_at_k
from .scorer import Scorer
from .stats import paired_t_test

_logger = logging.getLogger(__name__)

CUTOFFS = (10, 20, 100)


class CampaignIncomplete(RuntimeError):
    pass


@dataclass(frozen=True)
class RankRecord:
    user: int
    run: int
    method: str
    test_rank: int


def attach_test_ranks(outcomes: Sequence[DenoiseOutcome], split: SplitDataset, scorer: Scorer) -> list[DenoiseOutcome]:
    """Copies of ``outcomes`` carrying test ranks for the original and the final profile.

    The validation item is never added to the input row; the mask is the profile fed in.
    """
    cache: dict[int, int] = {}
    out = []
    for o in outcomes:
        test = int(split.test_item[o.user])
        if o.user not in cache:
            profile = split.histories[o.user]
            cache[o.user] = scorer.rank_of(split.row(o.user), test, profile)
        if o.accepted:
            row = np.zeros(split.n_items)
            row[list(o.final_profile)] = 1.0
            rank = scorer.rank_of(row, test, o.final_profile)
        else:
            rank = cache[o.user]
        out.append(replace(o, test_rank_original=cache[o.user], test_rank=rank))
    return out


@dataclass
class CampaignEval:
    method: str
    records: list[RankRecord]
    original: dict[int, int]
    outcomes: list[DenoiseOutcome] = field(repr=False)
    cutoffs: tuple[int, ...] = CUTOFFS

    @property
    def users(self) -> list[int]:
        return sorted(self.original)

    def _by_user(self) -> dict[int, list[int]]:
        ranks: dict[int, list[int]] = defaultdict(list)
        for r in self.records:
            ranks[r.user].append(r.test_rank)
        return ranks

    def per_user(self, metric: str, k: int, users: Iterable[int] | None = None) -> np.ndarray:
        """Per-user metric averaged over runs, in ``users`` order (default: all, sorted)."""
        ranks = self._by_user()
        users = self.users if users is None else list(users)
        return np.array([np.mean([metric_at_k(metric, r, k) for r in ranks[u]]) for u in users])

    def original_per_user(self, metric: str, k: int, users: Iterable[int] | None = None) -> np.ndarray:
        users = self.users if users is None else list(users)
        return np.array([metric_at_k(metric, self.original[u], k) for u in users], dtype=float)

    def denoised_users(self) -> list[int]:
        """Users with at least one accepted removal over the runs."""
        return sorted({o.user for o in self.outcomes if o.accepted})

    def table(self) -> list[dict]:
        """One row per (user, run) with every metric at every cutoff."""
        rows = []
        for r in self.records:
            row = {"user": r.user, "run": r.run, "method": r.method, "test_rank": r.test_rank}
            for m in METRICS:
                for k in self.cutoffs:
                    row[f"{m}@{k}"] = metric_at_k(m, r.test_rank, k)
            rows.append(row)
        return rows


def evaluate_campaign(outcomes: Sequence[DenoiseOutcome], scorer: Scorer | None = None,
                      dataset: SplitDataset | None = None, cutoffs: Sequence[int] = CUTOFFS,
                      users: Iterable[int] | None = None, method: str | None = None) -> CampaignEval:
    """Test ranks per (user, run) from the final profiles.

    Outcomes that already carry test ranks are used as-is; otherwise ``scorer`` and
    ``dataset`` are required to compute them.
    """
    outcomes = list(outcomes)
    if any(o.test_rank is None or o.test_rank_original is None for o in outcomes):
        if scorer is None or dataset is None:
            raise ValueError("outcomes lack test ranks and no scorer/dataset was given")
        outcomes = attach_test_ranks(outcomes, dataset, scorer)
    if users is not None:
        missing = sorted(set(int(u) for u in users) - {o.user for o in outcomes})
        if missing:
            raise CampaignIncomplete(f"no outcome for {len(missing)} sampled user(s), e.g. {missing[:10]}")
    method = method or (outcomes[0].source if outcomes else "unknown")
    records = [RankRecord(o.user, o.run, method, int(o.test_rank)) for o in outcomes]
    original = {o.user: int(o.test_rank_original) for o in outcomes}
    return CampaignEval(method, records, original, outcomes, tuple(cutoffs))


def relative_change(method_mean: float, original_mean: float) -> float | None:
    """Percent change over the original; ``None`` when the original mean is zero."""
    if original_mean == 0:
        return None
    return 100.0 * (method_mean - original_mean) / original_mean


def error_rates(proposals: Sequence) -> tuple[float, float]:
    """(formatting %, hallucination %) over proposals or outcomes."""
    n = len(proposals)
    if n == 0:
        return 0.0, 0.0
    fmt = sum(1 for p in proposals if p.error is ErrorKind.FORMATTING)
    hal = sum(1 for p in proposals if p.error is ErrorKind.HALLUCINATION)
    return 100.0 * fmt / n, 100.0 * hal / n


def denoised_percent(outcomes: Sequence[DenoiseOutcome]) -> float:
    """Accepted fraction per run, averaged over runs, in percent."""
    by_run: dict[int, list[bool]] = defaultdict(list)
    for o in outcomes:
        by_run[o.run].append(o.accepted)
    if not by_run:
        return 0.0
    return 100.0 * float(np.mean([np.mean(v) for v in by_run.values()]))


@dataclass
class ReportRow:
    method: str
    subset: str
    metric: str
    cutoff: int
    n_users: int
    mean: float
    original_mean: float
    rel_change: float | None
    t: float
    p: float
    tier: str
    formatting: float
    hallucination: float
    denoised: float


def build_report(evals: Sequence[CampaignEval], subset: str = "all", include_original: bool = True) -> list[ReportRow]:
    """Rows per method x metric x cutoff; ``subset`` is ``all`` or ``denoised``."""
    if subset not in ("all", "denoised"):
        raise ValueError("subset must be 'all' or 'denoised'")
    rows: list[ReportRow] = []
    if include_original and evals:
        base = evals[0]
        for m in METRICS:
            for k in base.cutoffs:
                v = base.original_per_user(m, k)
                rows.append(ReportRow("original", subset, m, k, len(v), float(v.mean()), float(v.mean()),
                                      0.0, 0.0, 1.0, "", 0.0, 0.0, 0.0))
    for ev in evals:
        users = ev.users if subset == "all" else ev.denoised_users()
        fmt, hal = error_rates(ev.outcomes)
        den = denoised_percent(ev.outcomes)
        for m in METRICS:
            for k in ev.cutoffs:
                a = ev.per_user(m, k, users)
                b = ev.original_per_user(m, k, users)
                ma = float(a.mean()) if len(a) else math.nan
                mb = float(b.mean()) if len(b) else math.nan
                if len(a) >= 2:
                    t, p, tier = paired_t_test(a, b)
                else:
                    t, p, tier = math.nan, math.nan, ""
                rel = relative_change(ma, mb) if len(a) else None
                rows.append(ReportRow(ev.method, subset, m, k, len(users), ma, mb, rel, t, p, tier, fmt, hal, den))
    return rows


# -- breakdowns ------------------------------------------------------------

def _split_change(diffs: np.ndarray, originals: np.ndarray) -> tuple[float, float, float]:
    """(positive %, negative %, total %) of the summed change relative to the summed original."""
    base = originals.sum()
    if base == 0:
        return math.nan, math.nan, math.nan
    pos = 100.0 * np.clip(diffs, 0, None).sum() / base
    neg = 100.0 * np.clip(diffs, None, 0).sum() / base
    return float(pos), float(neg), float(pos + neg)


def breakdown_by_rating(ev: CampaignEval, dataset: SplitDataset, cutoff: int = 20) -> list[dict]:
    """Relative NDCG change of accepted outcomes grouped by the removed items' ratings.

    A two-item removal contributes to both items' rating buckets.
    """
    unary = all(np.all(r == 1) for r in dataset.ratings)
    if unary:
        _logger.warning("ratings are unary; the rating breakdown has a single bucket")
    buckets: dict[int, list[tuple[float, float, int]]] = defaultdict(list)
    for o in ev.outcomes:
        if not o.accepted:
            continue
        new = metric_at_k("ndcg", o.test_rank, cutoff)
        old = metric_at_k("ndcg", o.test_rank_original, cutoff)
        for item in o.removals:
            r = dataset.rating_of(o.user, item)
            buckets[1 if unary else int(r)].append((new - old, old, o.user))
    rows = []
    for rating in sorted(buckets):
        entries = buckets[rating]
        diffs = np.array([e[0] for e in entries])
        olds = np.array([e[1] for e in entries])
        pos, neg, total = _split_change(diffs, olds)
        rows.append({
            "method": ev.method, "rating": rating, "removals": len(entries),
            "users": len({e[2] for e in entries}),
            "n_positive": int((diffs > 0).sum()), "n_negative": int((diffs < 0).sum()),
            "positive_pct": pos, "negative_pct": neg, "relative_pct": total,
            "notice": "unary feedback" if unary else "",
        })
    return rows


def breakdown_by_profile_length(ev: CampaignEval, dataset: SplitDataset, cutoff: int = 20) -> list[dict]:
    """Quartile buckets of training-history length: NDCG change on denoised users and rank-delta counts."""
    users = ev.users
    lengths = np.array([len(dataset.histories[u]) for u in users])
    bins = quartile_bins(lengths)
    by_user: dict[int, list[DenoiseOutcome]] = defaultdict(list)
    for o in ev.outcomes:
        by_user[o.user].append(o)
    denoised = set(ev.denoised_users())
    rows = []
    for b in np.unique(bins):
        members = [u for u, bb in zip(users, bins) if bb == b]
        lens = [len(dataset.histories[u]) for u in members]
        improved = unchanged = worsened = 0
        for u in members:
            valid = [o for o in by_user[u] if o.error is ErrorKind.NONE]
            if not valid:
                unchanged += 1
                continue
            best = min(valid, key=lambda o: o.rank_after)
            delta = best.rank_after - best.rank_before
            if delta < 0:
                improved += 1
            elif delta == 0:
                unchanged += 1
            else:
                worsened += 1
        dn = [u for u in members if u in denoised]
        if dn:
            a = ev.per_user("ndcg", cutoff, dn)
            o = ev.original_per_user("ndcg", cutoff, dn)
            rel = relative_change(float(a.mean()), float(o.mean()))
        else:
            rel = None
        rows.append({
            "method": ev.method, "bucket": int(b), "min_length": int(min(lens)), "max_length": int(max(lens)),
            "users": len(members), "denoised_users": len(dn),
            "relative_pct": math.nan if rel is None else rel,
            "improved": improved, "unchanged": unchanged, "worsened": worsened,
        })
    return rows
