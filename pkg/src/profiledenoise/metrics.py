"""Leave-one-out ranking metrics for a single relevant item at a given 1-based rank."""
from __future__ import annotations

import math

METRICS = ("ndcg", "hr", "mrr")


def ndcg_at_k(rank: int, k: int) -> float:
    # ideal DCG is 1 with a single relevant item
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hr_at_k(rank: int, k: int) -> int:
    return 1 if rank <= k else 0


def mrr_at_k(rank: int, k: int) -> float:
    return 1.0 / rank if rank <= k else 0.0


_FUNCS = {"ndcg": ndcg_at_k, "hr": hr_at_k, "mrr": mrr_at_k}


def metric_at_k(name: str, rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError(f"rank and k must be >= 1 (got rank={rank}, k={k})")
    return float(_FUNCS[name](rank, k))
