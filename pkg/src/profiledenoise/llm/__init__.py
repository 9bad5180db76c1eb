from .client import ChatClient, ChatConfigError, ChatExchange, Endpoint, RetryPolicy, call_chat
from .denoiser import LLMDenoiser, TextDenoiser, llm_denoiser
from .parsing import normalize_title, parse_response
from .prompts import PromptSpec, build_fewshot_examples, build_prompt

__all__ = [
    "ChatClient", "ChatConfigError", "ChatExchange", "Endpoint", "RetryPolicy", "call_chat",
    "LLMDenoiser", "TextDenoiser", "llm_denoiser",
    "normalize_title", "parse_response",
    "PromptSpec", "build_fewshot_examples", "build_prompt",
]
