"""Acceptance suite: one pass/fail line per criterion, printed in the terminal summary.

Each test records its verdict in ``conftest.ACCEPTANCE`` before asserting, so the summary
shows every criterion even when some fail.
"""
import contextlib
import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as sps

from conftest import ACCEPTANCE, golden_context
from profiledenoise.dataset import (DatasetError, Interaction, describe, kcore_filter, load_interactions, load_titles,
                                    prompt_window, temporal_split)
from profiledenoise.denoise import (ErrorKind, RandomDenoiser, RemovalProposal, SemanticDenoiser, TopPopDenoiser,
                                    UpperBoundOnValDenoiser, apply_and_gate, build_context, canonical_records,
                                    run_campaign)
from profiledenoise.evaluation import build_report, error_rates, evaluate_campaign
from profiledenoise.llm.prompts import VARIANTS, PromptSpec, build_prompt
from profiledenoise.metrics import metric_at_k
from profiledenoise.multivae import PARAM_NAMES, MultiVAE, TrainConfig, elbo_loss, init_params, l2_normalize, train
from profiledenoise.stats import paired_t_test
from profiledenoise.synth import (SynthSpec, generate, mixed_script, mock_denoiser, noise_precision,
                                  random_removal_precision)

GOLDEN = Path(__file__).parent / "golden"
ML1M_DIR = Path(os.environ.get("PROFILEDENOISE_ML1M_DIR", Path(__file__).resolve().parents[1] / "data" / "ml-1m"))


@contextlib.contextmanager
def criterion(num: int, title: str):
    """Record PASS/FAIL for one criterion; the body sets ``info['detail']``."""
    info = {"detail": ""}
    try:
        yield info
    except pytest.skip.Exception as exc:
        ACCEPTANCE[num] = ("SKIP", title, str(exc))
        raise
    except BaseException as exc:
        ACCEPTANCE[num] = ("FAIL", title, info["detail"] or f"{type(exc).__name__}: {exc}")
        raise
    ACCEPTANCE[num] = ("PASS", title, info["detail"])


# -- 1 ---------------------------------------------------------------------

def brute_metrics(rank, k):
    ranked = [0] * max(rank, k)
    ranked[rank - 1] = 1
    top = ranked[:k]
    dcg = sum(rel / math.log2(pos + 2) for pos, rel in enumerate(top))
    hit = int(any(top))
    rr = next((1.0 / (pos + 1) for pos, rel in enumerate(top) if rel), 0.0)
    return dcg / 1.0, hit, rr


def test_criterion_01_metric_oracle():
    with criterion(1, "metric oracle equivalence") as info:
        rng = np.random.default_rng(2024)
        pairs = list(zip(rng.integers(1, 300, 1000).tolist(), rng.integers(1, 150, 1000).tolist()))
        t0 = time.perf_counter()
        bad = 0
        for rank, k in pairs:
            nd, hit, rr = brute_metrics(rank, k)
            bad += (metric_at_k("ndcg", rank, k) != nd) + (metric_at_k("hr", rank, k) != hit) \
                + (metric_at_k("mrr", rank, k) != rr)
        dt = time.perf_counter() - t0
        info["detail"] = f"{bad} mismatches over 1000 pairs, {dt:.3f}s"
        assert bad == 0 and dt < 1.0


# -- 2 ---------------------------------------------------------------------

def test_criterion_02_gradients():
    with criterion(2, "MultiVAE gradient check") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        params = init_params(7, 5, 3, 0)
        for name in PARAM_NAMES:
            params.weights[name] = params.weights[name] + rng.normal(0, 0.3, params.weights[name].shape)
        x = (rng.random((4, 7)) < 0.5).astype(np.float64)
        x[:, 0] = 1.0
        eps = rng.standard_normal((4, 3))
        x_in = l2_normalize(x * (rng.random(x.shape) > 0.3))
        worst, h = 0.0, 1e-5
        for beta in (0.0, 0.2, 1.0):
            _, grads = elbo_loss(params, x, beta, eps, x_in)
            for name in PARAM_NAMES:
                w = params.weights[name]
                assert w.dtype == np.float64
                for idx in np.ndindex(w.shape):
                    old = w[idx]
                    w[idx] = old + h
                    lp, _ = elbo_loss(params, x, beta, eps, x_in)
                    w[idx] = old - h
                    lm, _ = elbo_loss(params, x, beta, eps, x_in)
                    w[idx] = old
                    num = (lp - lm) / (2 * h)
                    ana = grads[name][idx]
                    worst = max(worst, abs(num - ana) / max(abs(num) + abs(ana), 1e-8))
        dt = time.perf_counter() - t0
        info["detail"] = f"max relative error {worst:.2e}, {dt:.2f}s"
        assert worst < 1e-4 and dt < 10.0


# -- 3 ---------------------------------------------------------------------

def test_criterion_03_gate_soundness(synth_world):
    split, scorer, _, _ = synth_world
    with criterion(3, "gate soundness under fuzzing") as info:
        rng = np.random.default_rng(7)
        ctxs = [build_context(split, scorer, u) for u in range(split.n_users)]
        violations = accepted = 0
        n = 10_000
        kinds = (ErrorKind.NONE, ErrorKind.NONE, ErrorKind.FORMATTING, ErrorKind.HALLUCINATION)
        for _ in range(n):
            ctx = ctxs[int(rng.integers(len(ctxs)))]
            k = int(rng.integers(1, 3))
            removals = tuple(int(i) for i in rng.choice(ctx.window, size=k, replace=False))
            err = kinds[int(rng.integers(len(kinds)))]
            if err is not ErrorKind.NONE and rng.random() < 0.5:
                removals = ()
            out = apply_and_gate(ctx, RemovalProposal(removals, "fuzz", 0, err), scorer)
            row = ctx.row(scorer.n_items)
            before = scorer.rank_of(row, ctx.candidate, ctx.profile)
            if err is ErrorKind.NONE:
                after = scorer.rescore_with_removals(row, removals, ctx.candidate, ctx.profile)
                want = after < before
            else:
                want = False
            ok = out.accepted == want and out.rank_before == before
            if out.accepted:
                ok &= out.final_profile == tuple(i for i in ctx.profile if i not in removals)
            else:
                ok &= out.final_profile == ctx.profile
            violations += not ok
            accepted += out.accepted
        info["detail"] = f"{violations} violations over {n} proposals ({accepted} accepted)"
        assert violations == 0 and 0 < accepted < n


# -- 4 ---------------------------------------------------------------------

def _val_ranks(outcomes):
    """user -> list of final validation ranks (one per run)."""
    ranks = {}
    for o in outcomes:
        ranks.setdefault(o.user, []).append(o.rank_after if o.accepted else o.rank_before)
    return ranks


def test_criterion_04_upper_bound_dominance(synth_world):
    split, scorer, _, _ = synth_world
    with criterion(4, "upper-bound dominance") as info:
        users = range(split.n_users)
        assert split.n_users >= 200
        ub1 = _val_ranks(run_campaign(split, scorer, UpperBoundOnValDenoiser(scorer), 1, users=users))
        ub2 = _val_ranks(run_campaign(split, scorer, UpperBoundOnValDenoiser(scorer), 2, users=users))
        titles = {u: build_context(split, scorer, u, need_titles=True).window_titles for u in users}
        script, _ = mixed_script(users, 3, titles, (60, 25, 15), seed=0)
        rivals = {
            "random-1": RandomDenoiser(),
            "toppop-1": TopPopDenoiser(split.popularity()),
            "semantic-1": SemanticDenoiser(scorer.item_embeddings()),
            "oracle-mock-1": mock_denoiser("oracle", scorer),
            "valid-random-mock-1": mock_denoiser("valid-random"),
            "malformed-mock-1": mock_denoiser("malformed"),
            "hallucinating-mock-1": mock_denoiser("hallucinating"),
            "scripted-mock-1": mock_denoiser("scripted", script=script),
        }
        fails = {}
        for name, den in rivals.items():
            other = _val_ranks(run_campaign(split, scorer, den, 1, runs=3, seed=1, users=users))
            fails[name] = sum(ub1[u][0] > min(other[u]) for u in users)
        fails["upperBoundOnVal-2 vs -1"] = sum(ub2[u][0] > ub1[u][0] for u in users)
        bad = {k: v for k, v in fails.items() if v}
        info["detail"] = f"{split.n_users} users, {len(fails)} comparisons, violations: {bad or 'none'}"
        assert not bad


# -- 5 ---------------------------------------------------------------------

def test_criterion_05_oracle_mock_equivalence(synth_world):
    split, scorer, _, _ = synth_world
    with criterion(5, "oracle-mock equivalence") as info:
        direct = run_campaign(split, scorer, UpperBoundOnValDenoiser(scorer), 1)
        mock = run_campaign(split, scorer, mock_denoiser("oracle", scorer), 1)
        # ``raw`` holds the reply fragments the text path parsed; a direct baseline has none
        a = canonical_records(direct, drop=("source", "raw"))
        b = canonical_records(mock, drop=("source", "raw"))
        same = sum(x == y for x, y in zip(a, b))
        fmt, hal = error_rates(mock)
        info["detail"] = f"{same}/{len(a)} records identical, formatting {fmt:.1f}%, hallucination {hal:.1f}%"
        assert len(a) == len(b) and same == len(a) and fmt == hal == 0.0


# -- 6 ---------------------------------------------------------------------

def test_criterion_06_error_accounting(synth_world):
    split, scorer, _, _ = synth_world
    with criterion(6, "error-rate accounting") as info:
        users = range(100)
        titles = {u: build_context(split, scorer, u, need_titles=True).window_titles for u in users}
        script, _ = mixed_script(users, 3, titles, (60, 25, 15), seed=5)
        outs = run_campaign(split, scorer, mock_denoiser("scripted", script=script), 1, runs=3, users=users)
        ev = evaluate_campaign(outs, scorer, split, cutoffs=(10,))
        row = [r for r in build_report([ev], include_original=False)][0]
        info["detail"] = f"{len(outs)} replies: formatting {row.formatting:.1f}%, hallucination {row.hallucination:.1f}%"
        assert len(outs) == 300 and row.formatting == 25.0 and row.hallucination == 15.0


# -- 7 ---------------------------------------------------------------------

def directional_experiment(seed: int) -> dict:
    spec = SynthSpec(n_users=600, n_items=60, n_clusters=4, min_len=8, max_len=12, noise_rate=0.3, seed=seed)
    inter, titles, labels = generate(spec)
    split = temporal_split(inter, titles)
    scorer = MultiVAE(train(split.train, TrainConfig(epochs=100, batch_size=100, hidden=200, latent=50, seed=seed)))
    outs = run_campaign(split, scorer, mock_denoiser("oracle", scorer), 1)
    ev = evaluate_campaign(outs, scorer, split, cutoffs=(10,))
    pick = lambda rows: next(r for r in rows if r.metric == "ndcg" and r.cutoff == 10)  # noqa: E731
    every = pick(build_report([ev], "all", include_original=False))
    den = pick(build_report([ev], "denoised", include_original=False))
    prec, _ = noise_precision(outs, labels, split)
    rand = random_removal_precision(split, labels, range(split.n_users))
    res = {"seed": seed, "all": every.rel_change, "denoised": den.rel_change, "p": den.p,
           "precision": prec or 0.0, "random": rand, "n_denoised": den.n_users}
    res["ok"] = (den.rel_change is not None and den.rel_change > 0 and den.p < 0.05
                 and every.rel_change is not None and every.rel_change >= 0
                 and res["precision"] - rand >= 0.20)
    return res


def test_criterion_07_directional_reproduction():
    with criterion(7, "directional reproduction on synthetic noise") as info:
        t0 = time.perf_counter()
        results = [directional_experiment(s) for s in range(5)]
        dt = time.perf_counter() - t0
        held = sum(r["ok"] for r in results)
        per = "; ".join(f"s{r['seed']}: den {r['denoised']:+.1f}% p={r['p']:.3g} all {r['all']:+.1f}% "
                        f"prec {r['precision']:.2f} vs {r['random']:.2f}" for r in results)
        info["detail"] = f"holds in {held}/5 seeds, {dt:.0f}s [{per}]"
        assert held >= 4 and dt < 300


# -- 8 ---------------------------------------------------------------------

def peel(edges, umin, imin):
    edges = set(edges)
    while True:
        uc, ic = {}, {}
        for u, i in edges:
            uc[u] = uc.get(u, 0) + 1
            ic[i] = ic.get(i, 0) + 1
        keep = {(u, i) for u, i in edges if uc[u] >= umin and ic[i] >= imin}
        if keep == edges:
            return keep
        edges = keep


def split_violations(s, rows) -> int:
    by_user = {}
    for r in rows:
        by_user.setdefault(r.user, set()).add(r.item)
    bad = 0
    for u in range(s.n_users):
        hold = {int(s.test_item[u]), int(s.val_item[u]), int(s.val2_item[u])}
        hist = s.histories[u].tolist()
        w = prompt_window(s, u).tolist()
        bad += not (len(hold) == 3 and not hold & set(hist)
                    and {s.item_ids[i] for i in hold | set(hist)} == by_user[s.user_ids[u]]
                    and bool(np.all(np.diff(s.timestamps[u]) >= 0))
                    and len(w) == s.window_len and w == hist[-s.window_len:])
    bad += s.window_len != min(len(h) for h in s.histories)
    return bad


def test_criterion_08_kcore_and_split():
    with criterion(8, "k-core and split properties") as info:
        mismatches = 0
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            nu, ni = int(rng.integers(3, 14)), int(rng.integers(3, 14))
            dens = rng.uniform(0.2, 0.8)
            edges = [(u, i) for u in range(nu) for i in range(ni) if rng.random() < dens]
            umin, imin = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            rows = [Interaction(str(u), str(i), 5, n) for n, (u, i) in enumerate(edges)]
            want = peel(edges, umin, imin)
            try:
                got = {(int(x.user), int(x.item)) for x in kcore_filter(rows, umin, imin)}
            except DatasetError:
                got = set()
            mismatches += got != want
        split_bad = n_splits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            rows = []
            for u in range(30):
                items = rng.choice(25, size=int(rng.integers(4, 15)), replace=False)
                rows += [Interaction(str(u), str(int(i)), int(rng.integers(1, 6)), int(rng.integers(0, 6)))
                         for i in items]
            split_bad += split_violations(temporal_split(rows), rows)
            n_splits += 1
        for seed in range(5):
            inter, titles, _ = generate(SynthSpec(n_users=80, seed=seed))
            split_bad += split_violations(temporal_split(inter, titles), inter)
            n_splits += 1
        info["detail"] = f"{mismatches}/50 k-core mismatches, {split_bad} split violations over {n_splits} splits"
        assert mismatches == 0 and split_bad == 0


# -- 9 ---------------------------------------------------------------------

def test_criterion_09_ttest_oracle():
    with criterion(9, "paired t-test oracle") as info:
        worst = 0.0
        fixtures = [([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])]
        rng = np.random.default_rng(9)
        for n in (2, 3, 5, 10, 30, 100, 1000):
            a = rng.normal(0, 1, n)
            fixtures.append((a, a + rng.normal(0.2, 0.7, n)))
        for a, b in fixtures:
            ours, ref = paired_t_test(a, b), sps.ttest_rel(a, b)
            worst = max(worst, abs(ours.t - ref.statistic), abs(ours.p - ref.pvalue))
        ref_p = paired_t_test([1, 2, 3, 4, 5], [0] * 5).p
        degenerate = (paired_t_test([1, 2, 3], [1, 2, 3]) == (0.0, 1.0, "")
                      and paired_t_test([2, 3], [1, 2])[:2] == (math.inf, 0.0)
                      and paired_t_test([1, 2], [2, 3])[:2] == (-math.inf, 0.0))
        info["detail"] = f"max |diff| vs scipy {worst:.1e}, p([1..5])={ref_p:.4f}, degenerate ok={degenerate}"
        assert worst < 1e-6 and abs(ref_p - 0.0132) < 5e-5 and degenerate


# -- 10 --------------------------------------------------------------------

def test_criterion_10_prompt_goldens():
    with criterion(10, "prompt golden files") as info:
        ctx = golden_context()
        mismatched = []
        for variant, k in itertools.product(VARIANTS, (1, 2)):
            golden = (GOLDEN / f"{variant}_k{k}.txt").read_text(encoding="utf-8")
            if build_prompt(PromptSpec(variant, k), ctx) != golden:
                mismatched.append(f"{variant}_k{k}")
        text = build_prompt(PromptSpec("zero_shot", 1), ctx)
        verbatim = ("You will help in cleaning the user historical interactions in the context of a recommender "
                    "system in the movie domain." in text
                    and "[user history] - [candidate] - [rank]" in text
                    and "[Die Hard, Back to the Future, Home Alone, Toy Story, Heat] - [Lion King] - [13]" in text
                    and "The removed item must be present in the user history." in text)
        info["detail"] = f"{6 - len(mismatched)}/6 byte-identical, verbatim text present={verbatim}"
        assert not mismatched and verbatim


# -- 11 --------------------------------------------------------------------

def test_criterion_11_movielens_counts():
    with criterion(11, "MovieLens 1M ingestion") as info:
        ratings = ML1M_DIR / "ratings.dat"
        if not ratings.exists():
            pytest.skip(f"MovieLens 1M not found at {ratings}; set PROFILEDENOISE_ML1M_DIR to run this check")
        inter = load_interactions(ratings, "movielens-dat")
        movies = ML1M_DIR / "movies.dat"
        titles = load_titles(movies, "movielens-dat") if movies.exists() else None
        d = describe(inter, titles)
        info["detail"] = (f"{d['interactions']} interactions, {d['users']} users, {d['items']} items, "
                          f"sparsity {100 * d['sparsity']:.4f}%")
        assert (d["interactions"], d["users"], d["items"]) == (1_000_209, 6_040, 3_883)
        assert abs(100 * d["sparsity"] - 95.74) <= 0.01
