"""Normalization of raw LLM replies into removal proposals.

Rules (applied in order, version 1):

1. drop ``<think>...</think>`` blocks and markdown code fences;
2. keep the text after the last ``Removal:`` marker, if any;
3. take the trailing run of bracketed groups ``[...]`` joined by commas / "and";
4. for k=2, a single group is split on commas (titles may contain commas, so
   splits that match window titles win);
5. strip quotes and list markers, fold case and punctuation, and compare
   exactly against the window titles.

No bracketed group, an empty group or the wrong number of distinct items is a
formatting error; any item missing from the window is a hallucination.
Formatting is checked first.
"""
from __future__ import annotations

import re
import unicodedata
from typing import Sequence

from ..denoise import ErrorKind, RemovalProposal

NORMALIZATION_VERSION = 1

_THINK = re.compile(r"<think>.*?</think>", re.IGNORECASE | re.DOTALL)
_FENCE = re.compile(r"^\s*```[\w-]*\s*$", re.MULTILINE)
_MARKER = re.compile(r"removal\s*:", re.IGNORECASE)
_GROUP = re.compile(r"\[([^\[\]]*)\]")
_JOINER = re.compile(r"^\s*(?:,|;|&|\+|and)?\s*$", re.IGNORECASE)
_LIST_MARK = re.compile(r"^\s*(?:\d+[.)]\s+|[-*•]\s+)")
_QUOTES = "\"'`*“”‘’ "


def normalize_title(text: str) -> str:
    """Case- and punctuation-insensitive key used for title matching."""
    text = unicodedata.normalize("NFKC", text).casefold()
    text = "".join(" " if unicodedata.category(ch).startswith("P") or unicodedata.category(ch).startswith("S")
                   else ch for ch in text)
    return " ".join(text.split())


def _clean_piece(piece: str) -> str:
    piece = _LIST_MARK.sub("", piece)
    return piece.strip().strip(_QUOTES).strip()


def extract_groups(text: str) -> list[str]:
    """Trailing run of bracketed groups after normalization rules 1-3."""
    text = _THINK.sub(" ", text or "")
    text = _FENCE.sub(" ", text).strip()
    markers = list(_MARKER.finditer(text))
    if markers:
        tail = text[markers[-1].end():]
        if _GROUP.search(tail):
            text = tail
    matches = list(_GROUP.finditer(text))
    if not matches:
        return []
    run = [matches[-1]]
    for prev in reversed(matches[:-1]):
        if not _JOINER.match(text[prev.end():run[0].start()]):
            break
        run.insert(0, prev)
    return [m.group(1) for m in run]


def _partitions(pieces: list[str], parts: int):
    """Contiguous splits of ``pieces`` into ``parts`` comma-joined segments, leftmost cut first."""
    if parts == 1:
        yield [", ".join(pieces)]
        return
    for cut in range(1, len(pieces) - parts + 2):
        head = ", ".join(pieces[:cut])
        for rest in _partitions(pieces[cut:], parts - 1):
            yield [head] + rest


def parse_response(text: str | None, window_titles: Sequence[str], k: int,
                   window_items: Sequence[int] | None = None, source: str = "", run: int = 0) -> RemovalProposal:
    """Classify a reply and resolve its items to window members. Never raises."""
    items = list(window_items) if window_items is not None else list(range(len(window_titles)))
    lookup: dict[str, int] = {}
    for item, title in zip(items, window_titles):
        lookup.setdefault(normalize_title(title), item)

    def fail(kind: ErrorKind, raw=()) -> RemovalProposal:
        return RemovalProposal((), source, run, kind, tuple(raw), text)

    groups = [_clean_piece(g) for g in extract_groups(text or "")]
    if not groups or any(not g for g in groups):
        return fail(ErrorKind.FORMATTING, groups)

    matches = lambda seg: normalize_title(_clean_piece(seg)) in lookup  # noqa: E731
    if len(groups) == 1:
        pieces = [p.strip() for p in groups[0].split(",")]
        if k == 1:
            if matches(groups[0]):
                names = [groups[0]]
            elif len(pieces) > 1 and any(all(matches(s) for s in part)
                                         for n in range(2, len(pieces) + 1) for part in _partitions(pieces, n)):
                return fail(ErrorKind.FORMATTING, groups)  # several window items for a single slot
            else:
                names = [groups[0]]
        else:
            if len(pieces) < k or any(not p for p in pieces):
                return fail(ErrorKind.FORMATTING, groups)
            names = next((part for part in _partitions(pieces, k) if all(matches(s) for s in part)), None)
            if names is None:
                if len(pieces) != k:
                    return fail(ErrorKind.FORMATTING, groups)
                names = pieces
    elif len(groups) == k:
        names = groups
    else:
        return fail(ErrorKind.FORMATTING, groups)

    names = [_clean_piece(n) for n in names]
    if any(not n for n in names):
        return fail(ErrorKind.FORMATTING, names)
    keys = [normalize_title(n) for n in names]
    if len(set(keys)) != len(keys):
        return fail(ErrorKind.FORMATTING, names)
    if any(key not in lookup for key in keys):
        return fail(ErrorKind.HALLUCINATION, names)
    resolved = tuple(sorted(lookup[key] for key in keys))
    return RemovalProposal(resolved, source, run, ErrorKind.NONE, tuple(names), text)
