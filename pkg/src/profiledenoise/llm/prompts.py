"""Prompt rendering for the three prompt variants and few-shot exemplar mining."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset import SplitDataset, prompt_window
from ..denoise import FewShotExemplar, UserContext
from ..scorer import Scorer

VARIANTS = ("zero_shot", "few_shot", "zero_shot_recs")

_INSTRUCTION = (
    "You will help in cleaning the user historical interactions in the context of a recommender "
    "system in the {domain} domain. Given the user history, a candidate item and its rank (lower rank "
    "is better) by {model} in the format:"
)
_FORMAT_LINE = "[user history] - [candidate] - [rank]"
_TASK = {
    1: ("remove only 1 item from the user history that would make {model} rank the respective candidate "
        "lowest/best. List only the item to be removed from the user history in the format [item1] and "
        "nothing else. The removed item must be present in the user history."),
    2: ("remove only 2 items from the user history that would make {model} rank the respective candidate "
        "lowest/best. List only the items to be removed from the user history in the format [item1], [item2] "
        "and nothing else. The removed items must be present in the user history."),
}
_EXAMPLE = (
    "Example with another candidate of the same user:\n"
    "{query}\n"
    "Best removal: [{best}] changes the rank from {best_before} to {best_after}.\n"
    "Worst removal: [{worst}] changes the rank from {worst_before} to {worst_after}."
)
_RECS = "Top-10 recommendations: [{recs}]"
_TRAILER = "Removal:"


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    variant: str = "zero_shot"
    k: int = 1
    domain_label: str = "movie"
    model_label: str | None = None  # falls back to the context's model name
    examples: FewShotExemplar | None = None
    top_recs: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PromptError(f"unknown prompt variant {self.variant!r}")
        if self.k not in (1, 2):
            raise PromptError(f"k must be 1 or 2, got {self.k}")


def query_line(titles, candidate: str, rank: int) -> str:
    return f"[{', '.join(titles)}] - [{candidate}] - [{rank}]"


def build_prompt(spec: PromptSpec, ctx: UserContext) -> str:
    model = spec.model_label or ctx.model_name
    examples = spec.examples if spec.examples is not None else ctx.examples
    recs = spec.top_recs if spec.top_recs is not None else ctx.top_recs
    if any(not t or not t.strip() for t in ctx.window_titles):
        bad = [ctx.window[n] for n, t in enumerate(ctx.window_titles) if not t or not t.strip()]
        raise PromptError(f"missing title for window item(s) {bad}")

    parts = [
        _INSTRUCTION.format(domain=spec.domain_label, model=model),
        _FORMAT_LINE,
        _TASK[spec.k].format(model=model),
    ]
    if spec.variant == "few_shot":
        if examples is None:
            raise PromptError("few_shot prompt needs a few-shot exemplar")
        best, worst = examples.best, examples.worst
        parts.append(_EXAMPLE.format(
            query=query_line(ctx.window_titles, examples.candidate, best[1]),
            best=best[0], best_before=best[1], best_after=best[2],
            worst=worst[0], worst_before=worst[1], worst_after=worst[2],
        ))
    elif spec.variant == "zero_shot_recs":
        if not recs:
            raise PromptError("zero_shot_recs prompt needs the top-10 recommendations")
        parts.append(_RECS.format(recs=", ".join(recs)))
    parts.append(query_line(ctx.window_titles, ctx.candidate_title, ctx.candidate_rank))
    parts.append(_TRAILER)
    return "\n\n".join(parts)


def build_fewshot_examples(user: int, scorer: Scorer, dataset: SplitDataset) -> FewShotExemplar:
    """Sweep single removals over the prompt window against the second validation item."""
    window = [int(i) for i in prompt_window(dataset, user)]
    profile = dataset.histories[user]
    row = dataset.row(user)
    cand = int(dataset.val2_item[user])
    before = scorer.rank_of(row, cand, profile)
    after = scorer.rescore_many(row, [(i,) for i in window], cand, profile)
    best = min(range(len(window)), key=lambda n: (after[n], window[n]))
    worst = min(range(len(window)), key=lambda n: (-after[n], window[n]))
    title = lambda i: dataset.titles[i] or dataset.item_ids[i]  # noqa: E731
    return FewShotExemplar(
        candidate=title(cand),
        best=(title(window[best]), int(before), int(after[best])),
        worst=(title(window[worst]), int(before), int(after[worst])),
    )


def exemplar_sweep(user: int, scorer: Scorer, dataset: SplitDataset) -> dict[int, int]:
    """Item -> val2 rank after removing that item alone (for inspection and tests)."""
    window = [int(i) for i in prompt_window(dataset, user)]
    ranks = scorer.rescore_many(dataset.row(user), [(i,) for i in window], int(dataset.val2_item[user]),
                                dataset.histories[user])
    return dict(zip(window, np.asarray(ranks).tolist()))
