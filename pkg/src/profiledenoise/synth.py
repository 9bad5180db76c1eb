"""Clustered synthetic interaction logs with known noise, and scripted mock denoisers."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import Interaction, SplitDataset, prompt_window
from .denoise import DenoiseOutcome, UserContext, upper_bound_on_val_k, user_rng
from .llm.denoiser import TextDenoiser
from .scorer import Scorer


@dataclass
class SynthSpec:
    n_users: int = 200
    n_items: int = 60
    n_clusters: int = 4
    min_len: int = 8  # total interactions per user, holdouts included
    max_len: int = 12
    noise_rate: float = 0.2
    seed: int = 0
    # keep the three most recent (held-out) interactions in-cluster
    clean_holdouts: bool = False
    # in-cluster draws weighted by 1 / (index + 1) ** skew; 0 is uniform
    skew: float = 0.0
    # each cluster splits into n_tastes sub-groups; a user's own sub-group is
    # taste_boost times more likely per clean draw
    n_tastes: int = 1
    taste_boost: float = 1.0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if self.min_len < 4 or self.max_len < self.min_len:
            raise ValueError("need 4 <= min_len <= max_len")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must be in [0, 1)")
        if self.n_tastes < 1 or self.taste_boost < 1.0:
            raise ValueError("need n_tastes >= 1 and taste_boost >= 1")
        if self.n_items < self.n_clusters:
            raise ValueError("need at least one item per cluster")
        smallest = self.n_items // self.n_clusters
        if self.max_len - self.n_noise(self.max_len) > smallest:
            raise ValueError(f"cluster of {smallest} items cannot fill a profile of "
                             f"{self.max_len - self.n_noise(self.max_len)} in-cluster items")
        if self.n_noise(self.max_len) > self.n_items - smallest:
            raise ValueError("not enough out-of-cluster items for the requested noise")

    def n_noise(self, length: int) -> int:
        return int(round(self.noise_rate * length))


NoiseLabels = dict  # (user id, item id) -> is_noise


def item_cluster(item: int, n_clusters: int) -> int:
    return item % n_clusters


def generate(spec: SynthSpec) -> tuple[list[Interaction], dict[str, str], NoiseLabels]:
    """Interactions, item titles ``Item-{cluster}-{index}`` and ground-truth noise labels."""
    rng = np.random.default_rng(spec.seed)
    items = np.arange(spec.n_items)
    clusters = items % spec.n_clusters
    titles = {str(i): f"Item-{clusters[i]}-{i // spec.n_clusters}" for i in items}
    interactions: list[Interaction] = []
    labels: NoiseLabels = {}
    for u in range(spec.n_users):
        c = u % spec.n_clusters
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        n_noise = spec.n_noise(length)
        pool = items[clusters == c]
        w = 1.0 / (np.arange(len(pool)) + 1.0) ** spec.skew
        taste = (u // spec.n_clusters) % spec.n_tastes
        w = w * np.where((pool // spec.n_clusters) % spec.n_tastes == taste, spec.taste_boost, 1.0)
        clean = rng.choice(pool, size=length - n_noise, replace=False, p=w / w.sum())
        noise = rng.choice(items[clusters != c], size=n_noise, replace=False)
        is_noise = np.array([False] * len(clean) + [True] * len(noise))
        seq = np.concatenate([clean, noise])
        if spec.clean_holdouts:
            # noise lands anywhere except the three most recent slots
            tail = min(3, len(clean))
            perm = rng.permutation(length - tail)
            seq = np.concatenate([seq[tail:][perm], clean[:tail]])
            is_noise = np.concatenate([is_noise[tail:][perm], np.zeros(tail, bool)])
        else:
            perm = rng.permutation(length)
            seq, is_noise = seq[perm], is_noise[perm]
        steps = rng.integers(1, 100, size=length)
        stamps = 1_000_000 + u * 10_000 + np.cumsum(steps)
        ratings = np.where(is_noise, rng.integers(1, 4, size=length), rng.integers(4, 6, size=length))
        for item, ts, r, noisy in zip(seq, stamps, ratings, is_noise):
            interactions.append(Interaction(str(u), str(int(item)), int(r), int(ts)))
            labels[(str(u), str(int(item)))] = bool(noisy)
    return interactions, titles, labels


def write_synth(directory, interactions: Sequence[Interaction], titles: Mapping[str, str], labels: NoiseLabels,
                spec: SynthSpec | None = None) -> dict[str, Path]:
    """CSV log + title sidecar (the formats ``load_interactions``/``load_titles`` read) and labels JSON."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"interactions": d / "interactions.csv", "titles": d / "titles.csv", "labels": d / "labels.json"}
    with open(paths["interactions"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "rating", "timestamp"])
        for it in interactions:
            w.writerow([it.user, it.item, it.rating, it.timestamp])
    with open(paths["titles"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "title"])
        for item in sorted(titles, key=int):
            w.writerow([item, titles[item]])
    payload = {
        "spec": asdict(spec) if spec else None,
        "noise": sorted([u, i] for (u, i), v in labels.items() if v),
        "clean": sorted([u, i] for (u, i), v in labels.items() if not v),
    }
    paths["labels"].write_text(json.dumps(payload) + "\n", encoding="utf-8")
    return paths


def read_labels(path) -> NoiseLabels:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    labels = {(u, i): True for u, i in payload["noise"]}
    labels.update({(u, i): False for u, i in payload["clean"]})
    return labels


# -- noise recovery --------------------------------------------------------

def noise_precision(outcomes: Sequence[DenoiseOutcome], labels: NoiseLabels,
                    split: SplitDataset) -> tuple[float | None, float | None]:
    """(precision, recall) of accepted removals against the noise labels; ``None`` if nothing was removed."""
    removed = hits = 0
    denoised = set()
    for o in outcomes:
        if not o.accepted:
            continue
        denoised.add(o.user)
        uid = split.user_ids[o.user]
        for item in o.removals:
            removed += 1
            hits += labels.get((uid, split.item_ids[item]), False)
    if removed == 0:
        return None, None
    total_noise = sum(labels.get((split.user_ids[u], split.item_ids[i]), False)
                      for u in denoised for i in split.histories[u])
    recall = hits / total_noise if total_noise else None
    return hits / removed, recall


def random_removal_precision(split: SplitDataset, labels: NoiseLabels, users: Sequence[int]) -> float:
    """Expected precision of one uniformly random removal from each user's prompt window."""
    fracs = []
    for u in users:
        uid = split.user_ids[u]
        w = prompt_window(split, u)
        fracs.append(np.mean([labels.get((uid, split.item_ids[i]), False) for i in w]))
    return float(np.mean(fracs)) if fracs else 0.0


# -- mock denoisers --------------------------------------------------------

def _bracket(titles: Sequence[str]) -> str:
    return ", ".join(f"[{t}]" for t in titles)


class OracleMock(TextDenoiser):
    """Replies with the exhaustive validation-optimal removal, as text."""

    def __init__(self, scorer: Scorer, name: str = "oracle-mock"):
        self.scorer = scorer
        self.name = name

    def respond(self, ctx: UserContext, k, seed, run):
        prop = upper_bound_on_val_k(ctx, k, self.scorer, include_smaller=False)
        pos = {item: n for n, item in enumerate(ctx.window)}
        return _bracket([ctx.window_titles[pos[i]] for i in prop.removals])


class ValidRandomMock(TextDenoiser):
    def __init__(self, name: str = "valid-random-mock"):
        self.name = name

    def respond(self, ctx, k, seed, run):
        picked = user_rng(seed, ctx.user, run).choice(len(ctx.window), size=k, replace=False)
        return _bracket([ctx.window_titles[n] for n in sorted(picked)])


class MalformedMock(TextDenoiser):
    def __init__(self, name: str = "malformed-mock"):
        self.name = name

    def respond(self, ctx, k, seed, run):
        return "I cannot decide."


class HallucinatingMock(TextDenoiser):
    def __init__(self, name: str = "hallucinating-mock"):
        self.name = name

    def respond(self, ctx, k, seed, run):
        return _bracket([f"Not A Real Item {ctx.user}-{run}-{n}" for n in range(k)])


class ScriptedMock(TextDenoiser):
    """Replays ``script[(user, run)]``; a missing key is a broken fixture and raises."""

    def __init__(self, script: Mapping[tuple[int, int], str], name: str = "scripted-mock"):
        self.script = dict(script)
        self.name = name

    def respond(self, ctx, k, seed, run):
        try:
            return self.script[(ctx.user, run)]
        except KeyError:
            raise KeyError(f"script has no reply for user {ctx.user}, run {run}") from None


MOCK_MODES = ("oracle", "valid-random", "malformed", "hallucinating", "scripted")


def mock_denoiser(mode: str, scorer: Scorer | None = None, script: Mapping | None = None,
                  name: str | None = None) -> TextDenoiser:
    if mode == "oracle":
        if scorer is None:
            raise ValueError("oracle mock needs a scorer")
        return OracleMock(scorer, name or "oracle-mock")
    if mode == "valid-random":
        return ValidRandomMock(name or "valid-random-mock")
    if mode == "malformed":
        return MalformedMock(name or "malformed-mock")
    if mode == "hallucinating":
        return HallucinatingMock(name or "hallucinating-mock")
    if mode == "scripted":
        if script is None:
            raise ValueError("scripted mock needs a script")
        return ScriptedMock(script, name or "scripted-mock")
    raise ValueError(f"unknown mock mode {mode!r}; expected one of {MOCK_MODES}")


def mixed_script(users: Sequence[int], runs: int, window_titles: Mapping[int, Sequence[str]],
                 shares: tuple[int, int, int], seed: int = 0) -> tuple[dict, dict]:
    """Script with exact valid/malformed/hallucinated counts (``shares`` in percent).

    Returns the script and the (user, run) -> intended class bookkeeping.
    """
    keys = [(int(u), r) for u in users for r in range(runs)]
    n = len(keys)
    counts = [n * s // 100 for s in shares]
    counts[0] += n - sum(counts)
    kinds = ["none"] * counts[0] + ["formatting"] * counts[1] + ["hallucination"] * counts[2]
    rng = np.random.default_rng(seed)
    kinds = [kinds[i] for i in rng.permutation(n)]
    script, truth = {}, {}
    for (u, r), kind in zip(keys, kinds):
        titles = window_titles[u]
        if kind == "none":
            script[(u, r)] = f"[{titles[int(rng.integers(len(titles)))]}]"
        elif kind == "formatting":
            script[(u, r)] = "Removal: none of them, sorry."
        else:
            script[(u, r)] = f"[Imaginary Item {u}-{r}]"
        truth[(u, r)] = kind
    return script, truth
