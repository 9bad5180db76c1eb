"""Denoiser contract, the baseline denoisers and the rank-improvement gate."""
from __future__ import annotations

import enum
import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import SplitDataset, prompt_window
from .scorer import Scorer


class ErrorKind(str, enum.Enum):
    NONE = "none"
    FORMATTING = "formatting"
    HALLUCINATION = "hallucination"


@dataclass(frozen=True)
class FewShotExemplar:
    """Best and worst single removal measured on the second validation item."""

    candidate: str
    best: tuple[str, int, int]  # (title, rank before, rank after)
    worst: tuple[str, int, int]


@dataclass(frozen=True)
class UserContext:
    user: int
    window: tuple[int, ...]
    window_titles: tuple[str, ...]
    candidate: int
    candidate_title: str
    candidate_rank: int
    profile: tuple[int, ...]  # full training history, oldest first
    examples: FewShotExemplar | None = None
    top_recs: tuple[str, ...] | None = None
    model_name: str = "MultiVAE"

    def row(self, n_items: int) -> np.ndarray:
        x = np.zeros(n_items)
        x[list(self.profile)] = 1.0
        return x


@dataclass(frozen=True)
class RemovalProposal:
    removals: tuple[int, ...]
    source: str
    run: int = 0
    error: ErrorKind = ErrorKind.NONE
    raw: tuple[str, ...] = ()
    text: str | None = None


@dataclass
class DenoiseOutcome:
    user: int
    run: int
    source: str
    error: ErrorKind
    removals: tuple[int, ...]
    raw: tuple[str, ...]
    rank_before: int
    rank_after: int
    accepted: bool
    final_profile: tuple[int, ...]
    wall_time: float = 0.0
    test_rank_original: int | None = None
    test_rank: int | None = None

    # wall_time varies between identical runs; it is left out of canonical hashes
    VOLATILE = ("wall_time",)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["error"] = self.error.value
        rec["removals"] = list(self.removals)
        rec["raw"] = list(self.raw)
        rec["final_profile"] = list(self.final_profile)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "DenoiseOutcome":
        rec = dict(rec)
        rec["error"] = ErrorKind(rec["error"])
        for key in ("removals", "raw", "final_profile"):
            rec[key] = tuple(rec[key])
        return cls(**rec)


# -- context ---------------------------------------------------------------

def build_context(split: SplitDataset, scorer: Scorer, user: int, *, model_name: str = "MultiVAE",
                  examples: bool = False, top_recs: bool = False, need_titles: bool = False) -> UserContext:
    profile = split.histories[user]
    window = prompt_window(split, user)
    row = split.row(user)
    cand = int(split.val_item[user])
    rank = scorer.rank_of(row, cand, profile)
    title = split.titles[cand] or split.item_ids[cand]
    wtitles = tuple(split.titles[i] or split.item_ids[i] for i in window)
    if need_titles:
        # raises with the offending item id rather than prompting with raw ids
        wtitles = tuple(split.title(int(i)) for i in window)
        title = split.title(cand)
    ex = None
    if examples:
        from .llm.prompts import build_fewshot_examples
        ex = build_fewshot_examples(user, scorer, split)
    recs = None
    if top_recs:
        recs = tuple(split.title(int(i)) if need_titles else (split.titles[i] or split.item_ids[i])
                     for i in scorer.top_k(row, 10, profile))
    return UserContext(
        user=user,
        window=tuple(int(i) for i in window),
        window_titles=wtitles,
        candidate=cand,
        candidate_title=title,
        candidate_rank=rank,
        profile=tuple(int(i) for i in profile),
        examples=ex,
        top_recs=recs,
        model_name=model_name,
    )


# -- denoisers -------------------------------------------------------------

class Denoiser:
    """A removal policy. ``propose`` never raises on bad model output."""

    name = "denoiser"
    # deterministic policies get a single run no matter what the campaign asks for
    single_run = False
    wants_examples = False
    wants_top_recs = False
    needs_titles = False

    def propose(self, ctx: UserContext, k: int, seed: int = 0, run: int = 0) -> RemovalProposal:
        raise NotImplementedError


def _check_k(ctx: UserContext, k: int) -> None:
    if k not in (1, 2):
        raise ValueError(f"k must be 1 or 2, got {k}")
    if len(ctx.window) < k:
        raise ValueError(f"window of {len(ctx.window)} items cannot lose {k}")


def user_rng(seed: int, user: int, run: int) -> np.random.Generator:
    return np.random.default_rng([seed, user, run])


def random_k(ctx: UserContext, k: int, seed: int, run: int = 0) -> RemovalProposal:
    _check_k(ctx, k)
    picked = user_rng(seed, ctx.user, run).choice(len(ctx.window), size=k, replace=False)
    return RemovalProposal(tuple(ctx.window[i] for i in sorted(picked)), source=f"random-{k}", run=run)


def _lowest_k(ctx: UserContext, k: int, key: np.ndarray, source: str) -> RemovalProposal:
    # sort window items by (key, item index) and take the first k
    items = sorted(ctx.window, key=lambda i: (key[i], i))
    return RemovalProposal(tuple(sorted(items[:k])), source=source)


def toppop_k(ctx: UserContext, k: int, popularity: np.ndarray) -> RemovalProposal:
    _check_k(ctx, k)
    return _lowest_k(ctx, k, -np.asarray(popularity, dtype=float), f"toppop-{k}")


def cosine_to_mean(embeddings: np.ndarray, profile: Sequence[int]) -> np.ndarray:
    """Cosine similarity of every item embedding to the mean profile embedding (0 for zero norms)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    user = emb[list(profile)].mean(axis=0)
    un = np.linalg.norm(user)
    en = np.linalg.norm(emb, axis=1)
    denom = en * un
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(denom > 0, emb @ user / np.where(denom > 0, denom, 1.0), 0.0)
    return sim


def semantic_k(ctx: UserContext, k: int, embeddings: np.ndarray) -> RemovalProposal:
    _check_k(ctx, k)
    return _lowest_k(ctx, k, cosine_to_mean(embeddings, ctx.profile), f"semantic-{k}")


def removal_sets(window: Sequence[int], k: int, include_smaller: bool) -> list[tuple[int, ...]]:
    sizes = range(1, k + 1) if include_smaller else [k]
    return [tuple(sorted(c)) for size in sizes for c in itertools.combinations(window, size)]


def sweep_removals(ctx: UserContext, scorer: Scorer, sets: Sequence[tuple[int, ...]],
                   candidate: int | None = None) -> np.ndarray:
    cand = ctx.candidate if candidate is None else candidate
    return scorer.rescore_many(ctx.row(scorer.n_items), sets, cand, ctx.profile)


def upper_bound_on_val_k(ctx: UserContext, k: int, scorer: Scorer, include_smaller: bool = True) -> RemovalProposal:
    """Exhaustive search for the removal set giving the best validation rank.

    With ``include_smaller`` the k=2 search also scores single removals, so its
    result is never worse than the k=1 search. Ties prefer fewer removals, then the
    lexicographically smallest index set.
    """
    _check_k(ctx, k)
    sets = removal_sets(ctx.window, k, include_smaller)
    ranks = sweep_removals(ctx, scorer, sets)
    best = min(range(len(sets)), key=lambda n: (ranks[n], len(sets[n]), sets[n]))
    return RemovalProposal(sets[best], source=f"upperBoundOnVal-{k}")


class RandomDenoiser(Denoiser):
    name = "random"

    def propose(self, ctx, k, seed=0, run=0):
        return random_k(ctx, k, seed, run)


class TopPopDenoiser(Denoiser):
    name = "toppop"
    single_run = True

    def __init__(self, popularity: np.ndarray):
        self.popularity = np.asarray(popularity)

    def propose(self, ctx, k, seed=0, run=0):
        return toppop_k(ctx, k, self.popularity)


class SemanticDenoiser(Denoiser):
    name = "semantic"
    single_run = True

    def __init__(self, embeddings: np.ndarray):
        self.embeddings = np.asarray(embeddings)

    def propose(self, ctx, k, seed=0, run=0):
        return semantic_k(ctx, k, self.embeddings)


class UpperBoundOnValDenoiser(Denoiser):
    name = "upperBoundOnVal"
    single_run = True

    def __init__(self, scorer: Scorer, include_smaller: bool = True):
        self.scorer = scorer
        self.include_smaller = include_smaller

    def propose(self, ctx, k, seed=0, run=0):
        return upper_bound_on_val_k(ctx, k, self.scorer, self.include_smaller)


# -- gate ------------------------------------------------------------------

def apply_and_gate(ctx: UserContext, proposal: RemovalProposal, scorer: Scorer) -> DenoiseOutcome:
    """Keep the removals only if they strictly improve the validation candidate's rank."""
    t0 = time.perf_counter()
    before = ctx.candidate_rank
    after = before
    accepted = False
    final = ctx.profile
    if proposal.error is ErrorKind.NONE:
        after = scorer.rescore_with_removals(ctx.row(scorer.n_items), proposal.removals, ctx.candidate, ctx.profile)
        if after < before:
            accepted = True
            gone = set(proposal.removals)
            final = tuple(i for i in ctx.profile if i not in gone)
    return DenoiseOutcome(
        user=ctx.user,
        run=proposal.run,
        source=proposal.source,
        error=proposal.error,
        removals=proposal.removals,
        raw=proposal.raw,
        rank_before=before,
        rank_after=after,
        accepted=accepted,
        final_profile=final,
        wall_time=time.perf_counter() - t0,
    )


def run_campaign(split: SplitDataset, scorer: Scorer, denoiser: Denoiser, k: int, runs: int = 1, seed: int = 0,
                 users: Iterable[int] | None = None, *, model_name: str = "MultiVAE", workers: int = 1,
                 source: str | None = None) -> list[DenoiseOutcome]:
    """Propose and gate removals for every (user, run); results come back in (user, run) order."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if denoiser.single_run:
        runs = 1
    users = list(range(split.n_users)) if users is None else [int(u) for u in users]
    source = source or f"{denoiser.name}-{k}"

    def one_user(u: int) -> list[DenoiseOutcome]:
        ctx = build_context(split, scorer, u, model_name=model_name, examples=denoiser.wants_examples,
                            top_recs=denoiser.wants_top_recs, need_titles=denoiser.needs_titles)
        out = []
        for r in range(runs):
            t0 = time.perf_counter()
            prop = denoiser.propose(ctx, k, seed=seed, run=r)
            prop = RemovalProposal(prop.removals, source, r, prop.error, prop.raw, prop.text)
            oc = apply_and_gate(ctx, prop, scorer)
            oc.wall_time = time.perf_counter() - t0
            out.append(oc)
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_user = list(pool.map(one_user, users))
    else:
        per_user = [one_user(u) for u in users]
    outcomes = [o for chunk in per_user for o in chunk]
    outcomes.sort(key=lambda o: (o.user, o.run))
    return outcomes


# -- outcome logs ----------------------------------------------------------

def write_outcomes(outcomes: Sequence[DenoiseOutcome], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_record(), sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_outcomes(path) -> list[DenoiseOutcome]:
    with open(path, encoding="utf-8") as fh:
        return [DenoiseOutcome.from_record(json.loads(line)) for line in fh if line.strip()]


def canonical_records(outcomes: Sequence[DenoiseOutcome], drop: Sequence[str] = ()) -> list[dict]:
    """Records without volatile fields (and any extra ``drop`` keys), for equality and hashing."""
    skip = set(DenoiseOutcome.VOLATILE) | set(drop)
    return [{k: v for k, v in o.to_record().items() if k not in skip} for o in outcomes]
