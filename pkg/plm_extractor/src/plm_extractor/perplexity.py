"""Negated-perplexity scoring of verbalized triples with a causal model.

A triple is verbalized as `label(h) label(r) label(t)` and scored by the
negated perplexity of that sentence, so higher scores mean the model finds
the statement more plausible. Triples with a missing entity label are
skipped with a warning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch

from .extract import JobError


def load_causal_backend(model_id: str):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModelForCausalLM.from_pretrained(model_id)
    except Exception as exc:
        raise JobError(f"could not load causal model {model_id!r}: {exc}") from exc
    model.eval()
    return tokenizer, model


@torch.no_grad()
def sentence_perplexity(tokenizer, model, text: str) -> float:
    """exp of the mean next-token negative log-likelihood."""
    ids = tokenizer(text, return_tensors="pt")["input_ids"]
    if ids.shape[1] < 2:
        raise JobError(f"sentence too short to score: {text!r}")
    logits = model(input_ids=ids).logits
    logprobs = torch.log_softmax(logits[0, :-1].double(), dim=-1)
    targets = ids[0, 1:]
    nll = -logprobs[torch.arange(targets.shape[0]), targets].mean()
    return float(math.exp(nll))


def negated_perplexity(tokenizer, model, text: str) -> float:
    return -sentence_perplexity(tokenizer, model, text)


@dataclass
class TripleScore:
    head: str
    rel: str
    tail: str
    text: str
    score: float


def verbalize(head_label: str, rel_label: str, tail_label: str) -> str:
    return f"{head_label} {rel_label} {tail_label}"


def perplexity_rank(
    tokenizer,
    model,
    triples: list[tuple[str, str, str]],
    entity_labels: dict[str, str],
    relation_labels: dict[str, str] | None = None,
) -> list[TripleScore]:
    """Score each (h, r, t); relations fall back to their raw identifier."""
    relation_labels = relation_labels or {}
    out: list[TripleScore] = []
    for h, r, t in triples:
        if h not in entity_labels or t not in entity_labels:
            missing = h if h not in entity_labels else t
            warnings.warn(f"skipping triple ({h}, {r}, {t}): no label for {missing!r}", stacklevel=2)
            continue
        text = verbalize(entity_labels[h], relation_labels.get(r, r), entity_labels[t])
        out.append(TripleScore(h, r, t, text, negated_perplexity(tokenizer, model, text)))
    return out
