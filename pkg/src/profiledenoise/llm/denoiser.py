"""Denoisers that answer in text and go through the response parser."""
from __future__ import annotations

import threading

from ..denoise import Denoiser, ErrorKind, RemovalProposal, UserContext
from .client import ChatClient
from .parsing import parse_response
from .prompts import PromptSpec, build_prompt


class TextDenoiser(Denoiser):
    """Produces a reply string per context; ``None`` means the transport gave up."""

    needs_titles = True

    def respond(self, ctx: UserContext, k: int, seed: int, run: int) -> str | None:
        raise NotImplementedError

    def propose(self, ctx, k, seed=0, run=0):
        text = self.respond(ctx, k, seed, run)
        if text is None:
            return RemovalProposal((), self.name, run, ErrorKind.FORMATTING, (), None)
        return parse_response(text, ctx.window_titles, k, ctx.window, source=self.name, run=run)


class LLMDenoiser(TextDenoiser):
    """``build_prompt`` -> chat completion -> ``parse_response``."""

    def __init__(self, client: ChatClient, variant: str = "zero_shot", domain_label: str = "movie",
                 model_label: str | None = None, name: str | None = None):
        PromptSpec(variant=variant)  # validates the variant
        self.client = client
        self.variant = variant
        self.domain_label = domain_label
        self.model_label = model_label
        self.name = name or f"llm-{variant}"
        self.wants_examples = variant == "few_shot"
        self.wants_top_recs = variant == "zero_shot_recs"
        self.delivered = 0  # exchanges that got a reply
        self.failed = 0  # exchanges that exhausted their retries
        self._count_lock = threading.Lock()

    def prompt_for(self, ctx: UserContext, k: int) -> str:
        spec = PromptSpec(self.variant, k, self.domain_label, self.model_label, ctx.examples, ctx.top_recs)
        return build_prompt(spec, ctx)

    def respond(self, ctx, k, seed, run):
        ex = self.client.chat(self.prompt_for(ctx, k), tag=f"user={ctx.user};run={run};seed={seed}")
        with self._count_lock:
            if ex.ok:
                self.delivered += 1
            else:
                self.failed += 1
        return ex.text if ex.ok else None


def llm_denoiser(spec: PromptSpec, client: ChatClient, name: str | None = None) -> LLMDenoiser:
    return LLMDenoiser(client, spec.variant, spec.domain_label, spec.model_label, name)
