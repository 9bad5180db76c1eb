"""Command line: prepare, train, denoise, evaluate, report, synth.

Exit codes: 0 success, 2 config error, 3 missing upstream stage or stale artifact,
4 LLM transport exhausted for every user.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, DenoiserConfig, ExperimentConfig, apply_seed_override, load_config
from .dataset import DatasetError, describe, kcore_filter, load_interactions, load_split, load_titles, \
    save_split, stratified_sample, temporal_split
from .denoise import (RandomDenoiser, SemanticDenoiser, TopPopDenoiser, UpperBoundOnValDenoiser,
                      read_outcomes, run_campaign, write_outcomes)
from .evaluation import attach_test_ranks, breakdown_by_profile_length, breakdown_by_rating, build_report, \
    evaluate_campaign
from .llm.client import ChatConfigError
from .manifest import Manifest, StageDependencyError, StaleArtifactError, hash_bytes, hash_files, \
    hash_outcome_log, hash_tree
from .multivae import MultiVAE, load_checkpoint, save_checkpoint, train
from .synth import generate, mock_denoiser, write_synth

_logger = logging.getLogger("profiledenoise")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_TRANSPORT = 0, 2, 3, 4


class TransportExhausted(RuntimeError):
    pass


# -- run directory layout --------------------------------------------------

def split_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "split"


def model_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "model" / "multivae.ckpt"


def outcome_path(cfg: ExperimentConfig, ident: str) -> Path:
    return Path(cfg.out) / "outcomes" / f"{ident}.jsonl"


def transcript_path(cfg: ExperimentConfig, ident: str) -> Path:
    return Path(cfg.out) / "transcripts" / f"{ident}.jsonl"


def report_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "reports"


def sample_users(cfg: ExperimentConfig) -> list[int]:
    path = split_dir(cfg) / "sample.json"
    return json.loads(path.read_text(encoding="utf-8"))["users"]


# -- stages ----------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, out: Path | None = None) -> dict[str, Path]:
    """Generate the synthetic corpus into the directory the dataset entry points at."""
    if cfg.synth is None:
        raise ConfigError("config has no 'synth' section")
    target = Path(out) if out else Path(cfg.dataset.path).parent
    inter, titles, labels = generate(cfg.synth)
    paths = write_synth(target, inter, titles, labels, cfg.synth)
    _logger.info("synth: %d interactions, %d users -> %s", len(inter), cfg.synth.n_users, target)
    return paths


def cmd_prepare(cfg: ExperimentConfig, force: bool = False) -> Path:
    man = Manifest(cfg.out)
    man.check_fresh("prepare", cfg.hash(), force)
    ds = cfg.dataset
    if not Path(ds.path).exists():
        raise StageDependencyError(f"dataset file {ds.path} not found (run 'synth' for synthetic configs)")
    inter = load_interactions(ds.path, ds.format)
    titles = load_titles(ds.titles, ds.titles_format or ds.format) if ds.titles else None
    raw_stats = describe(inter, titles)
    inter = kcore_filter(inter, ds.user_min, ds.item_min)
    split = temporal_split(inter, titles)
    d = split_dir(cfg)
    save_split(split, d)
    n = ds.sample_n or split.n_users
    users = stratified_sample(split, min(n, split.n_users), cfg.sample_seed)
    (d / "sample.json").write_text(json.dumps({"seed": cfg.sample_seed, "users": [int(u) for u in users]}) + "\n",
                                   encoding="utf-8")
    stats = {"raw": raw_stats, "users": split.n_users, "items": split.n_items, "window_len": split.window_len,
             "sampled": len(users)}
    man.record("prepare", cfg.hash(), hash_tree(d), upstream={"dataset": hash_files([Path(ds.path)])},
               stats=stats)
    _logger.info("prepare: %d users, %d items, window %d, sample %d", split.n_users, split.n_items,
                 split.window_len, len(users))
    return d


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> Path:
    man = Manifest(cfg.out)
    prep = man.require("prepare", "train")
    man.check_fresh("train", cfg.hash(), force)
    man.check_upstream("train", {"prepare": prep["hash"]}, force)
    path = model_path(cfg)
    if cfg.checkpoint:
        _logger.info("train: using existing checkpoint %s", path)
    else:
        split = load_split(split_dir(cfg))
        t0 = time.perf_counter()
        params = train(split.train, cfg.train, log_every=max(1, cfg.train.epochs // 10))
        save_checkpoint(params, path, cfg.train)
        _logger.info("train: %d epochs in %.1fs -> %s", cfg.train.epochs, time.perf_counter() - t0, path)
    man.record("train", cfg.hash(), hash_bytes(path.read_bytes()), upstream={"prepare": prep["hash"]},
               checkpoint=str(path))
    return path


def load_scorer(cfg: ExperimentConfig) -> MultiVAE:
    path = model_path(cfg)
    if not path.exists():
        raise StageDependencyError(f"checkpoint {path} missing; run 'train' first")
    params, _ = load_checkpoint(path)
    return MultiVAE(params)


def _read_script(path) -> dict:
    script = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            script[(int(rec["user"]), int(rec["run"]))] = rec["text"]
    return script


def make_denoiser(cfg: ExperimentConfig, dc: DenoiserConfig, split, scorer):
    if dc.kind == "random":
        return RandomDenoiser()
    if dc.kind == "toppop":
        return TopPopDenoiser(split.popularity())
    if dc.kind == "semantic":
        return SemanticDenoiser(scorer.item_embeddings())
    if dc.kind == "upperBoundOnVal":
        return UpperBoundOnValDenoiser(scorer)
    if dc.kind == "mock":
        script = _read_script(dc.script) if dc.mode == "scripted" else None
        return mock_denoiser(dc.mode, scorer=scorer, script=script, name=dc.id)
    # llm: imported lazily so baseline-only runs never touch the HTTP stack
    from .llm import ChatClient, Endpoint, LLMDenoiser, RetryPolicy

    ep = Endpoint.from_env(dc.model, dc.base_url, dc.decoding)
    if dc.api_key:
        ep.api_key = dc.api_key
    tpath = transcript_path(cfg, dc.id)
    if tpath.exists():
        tpath.unlink()
    retry = RetryPolicy(max_attempts=dc.max_attempts, timeout=dc.timeout, seed=cfg.seed)
    client = ChatClient(ep, retry, max_in_flight=dc.max_in_flight, transcript=tpath)
    return LLMDenoiser(client, dc.variant, dc.domain_label, dc.model_label, name=dc.id)


def cmd_denoise(cfg: ExperimentConfig, ids: list[str] | None = None, force: bool = False) -> dict[str, Path]:
    man = Manifest(cfg.out)
    prep = man.require("prepare", "denoise")
    trn = man.require("train", "denoise")
    upstream = {"prepare": prep["hash"], "train": trn["hash"]}
    chosen = [cfg.denoiser(i) for i in ids] if ids else cfg.denoisers
    split = load_split(split_dir(cfg))
    scorer = load_scorer(cfg)
    users = sample_users(cfg)
    written = {}
    for dc in chosen:
        stage = f"denoise:{dc.id}"
        man.check_fresh(stage, cfg.hash(), force)
        man.check_upstream(stage, upstream, force)
        den = make_denoiser(cfg, dc, split, scorer)
        t0 = time.perf_counter()
        try:
            outcomes = run_campaign(split, scorer, den, dc.k, runs=cfg.runs, seed=cfg.seed, users=users,
                                    model_name=cfg.model_name, workers=cfg.workers, source=dc.id)
        finally:
            client = getattr(den, "client", None)
            if client is not None:
                client.close()
        # test ranks go into the log so reports never need the checkpoint
        outcomes = attach_test_ranks(outcomes, split, scorer)
        path = write_outcomes(outcomes, outcome_path(cfg, dc.id))
        extra = {"k": dc.k, "kind": dc.kind, "outcomes": len(outcomes),
                 "accepted": int(sum(o.accepted for o in outcomes))}
        if hasattr(den, "delivered"):
            extra.update(delivered=den.delivered, transport_failures=den.failed)
        man.record(stage, cfg.hash(), hash_outcome_log(path), upstream=upstream, log=str(path), **extra)
        _logger.info("denoise %s: %d outcomes, %d accepted in %.1fs", dc.id, len(outcomes), extra["accepted"],
                     time.perf_counter() - t0)
        written[dc.id] = path
        if getattr(den, "delivered", None) == 0 and users:
            raise TransportExhausted(f"{dc.id}: no LLM reply for any of {len(users)} users; outcome log kept at {path}")
    return written


def _load_evals(cfg: ExperimentConfig, man: Manifest, what: str):
    stages = [d for d in cfg.denoisers if man.stage(f"denoise:{d.id}")]
    if not stages:
        raise StageDependencyError(f"{what} needs at least one 'denoise' outcome log; run 'denoise' first")
    users = sample_users(cfg)
    evals, hashes = [], {}
    for dc in stages:
        path = outcome_path(cfg, dc.id)
        if not path.exists():
            raise StageDependencyError(f"outcome log {path} missing; rerun 'denoise --denoiser {dc.id}'")
        outs = read_outcomes(path)
        evals.append(evaluate_campaign(outs, cutoffs=cfg.cutoffs, users=users, method=dc.id))
        hashes[f"denoise:{dc.id}"] = man.hash_of(f"denoise:{dc.id}")
    return evals, hashes


def cmd_evaluate(cfg: ExperimentConfig, force: bool = False) -> dict[str, Path]:
    """Per-record metric tables and the method x metric x cutoff summaries, from the outcome logs only."""
    from .reports import report_rows_csv, write_csv

    man = Manifest(cfg.out)
    man.require("prepare", "evaluate")
    man.check_fresh("evaluate", cfg.hash(), force)
    evals, upstream = _load_evals(cfg, man, "evaluate")
    d = report_dir(cfg)
    paths = {}
    for ev in evals:
        paths[f"records:{ev.method}"] = write_csv(ev.table(), Path(cfg.out) / "eval" / f"{ev.method}.csv")
    for subset in ("all", "denoised"):
        paths[f"metrics_{subset}"] = report_rows_csv(build_report(evals, subset), d / f"metrics_{subset}.csv")
    digest = hash_files([p for p in paths.values()])
    man.record("evaluate", cfg.hash(), digest, upstream=upstream)
    return paths


def cmd_report(cfg: ExperimentConfig, force: bool = False) -> dict[str, Path]:
    """Markdown tables (all users, denoised subset), breakdown CSVs and figures."""
    from . import plotting
    from .reports import markdown_table, report_rows_csv, write_csv, write_markdown

    man = Manifest(cfg.out)
    man.require("prepare", "report")
    man.check_fresh("report", cfg.hash(), force)
    evals, upstream = _load_evals(cfg, man, "report")
    split = load_split(split_dir(cfg))
    d = report_dir(cfg)
    paths = {}
    cut = 20 if 20 in cfg.cutoffs else cfg.cutoffs[0]
    for subset, title in (("all", "All users"), ("denoised", "Denoised users")):
        rows = build_report(evals, subset)
        paths[f"metrics_{subset}"] = report_rows_csv(rows, d / f"metrics_{subset}.csv")
        paths[f"table_{subset}"] = write_markdown(markdown_table(rows, cfg.cutoffs, title), d / f"table_{subset}.md")
        paths[f"fig_methods_{subset}"] = plotting.method_bars(rows, "ndcg", cut, d / "figures" / f"methods_{subset}.png")
    by_rating = {ev.method: breakdown_by_rating(ev, split, cut) for ev in evals}
    by_length = {ev.method: breakdown_by_profile_length(ev, split, cut) for ev in evals}
    paths["breakdown_rating"] = write_csv([r for t in by_rating.values() for r in t], d / "breakdown_rating.csv",
                                          ["method", "rating", "removals", "users", "n_positive", "n_negative",
                                           "positive_pct", "negative_pct", "relative_pct", "notice"])
    paths["breakdown_length"] = write_csv([r for t in by_length.values() for r in t], d / "breakdown_length.csv",
                                          ["method", "bucket", "min_length", "max_length", "users",
                                           "denoised_users", "relative_pct", "improved", "unchanged", "worsened"])
    paths["fig_rating"] = plotting.rating_breakdown(by_rating, d / "figures" / "breakdown_rating.png", cut)
    paths["fig_length"] = plotting.length_breakdown(by_length, d / "figures" / "breakdown_length.png", cut)
    # figures embed renderer metadata; hash only the text artifacts
    text = [p for p in paths.values() if p.suffix in (".csv", ".md")]
    man.record("report", cfg.hash(), hash_files(text), upstream=upstream)
    return paths


# -- entry point -----------------------------------------------------------

VERBS = ("prepare", "train", "denoise", "evaluate", "report", "synth")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="profiledenoise", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("verb", choices=VERBS + ("all",), help="stage to run; 'all' runs every stage in order")
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--out", default=None, help="override the config's output directory (synth: data directory)")
    p.add_argument("--force", action="store_true", help="overwrite artifacts made under a different config")
    p.add_argument("--denoiser", action="append", default=None, metavar="ID",
                   help="denoiser id to run (repeatable; default: all)")
    p.add_argument("--seed-override", type=int, default=None, help="replace every named seed in the config")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def run(args) -> int:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        apply_seed_override(cfg, args.seed_override)
    if args.out and args.verb != "synth":
        cfg.out = str(Path(args.out).resolve())
    verb = args.verb
    if verb == "synth":
        cmd_synth(cfg, Path(args.out) if args.out else None)
    elif verb == "prepare":
        cmd_prepare(cfg, args.force)
    elif verb == "train":
        cmd_train(cfg, args.force)
    elif verb == "denoise":
        cmd_denoise(cfg, args.denoiser, args.force)
    elif verb == "evaluate":
        cmd_evaluate(cfg, args.force)
    elif verb == "report":
        cmd_report(cfg, args.force)
    else:  # all
        if cfg.synth is not None and not Path(cfg.dataset.path).exists():
            cmd_synth(cfg)
        cmd_prepare(cfg, args.force)
        cmd_train(cfg, args.force)
        cmd_denoise(cfg, args.denoiser, args.force)
        cmd_evaluate(cfg, args.force)
        cmd_report(cfg, args.force)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, DatasetError, ChatConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageDependencyError, StaleArtifactError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except TransportExhausted as exc:
        print(f"transport exhausted: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
