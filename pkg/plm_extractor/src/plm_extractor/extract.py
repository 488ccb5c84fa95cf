"""Run a pre-trained language model over assertion prompts per entity and
write the resulting hidden-state vectors as an embedding store.

For masked models the vector is the final hidden layer at the mask token's
position; for causal models it is the final hidden layer at the last real
token. Inference only, so the output is deterministic across runs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .prompts import DEFAULT_PROMPT_STRINGS, MODE_CLM, MODE_MLM, realize
from .store import StoreWriter


class JobError(Exception):
    pass


@dataclass
class ExtractionJob:
    model: str                       # model identifier or local path
    mode: str                        # "mlm" | "clm"
    labels: dict[str, str]           # entity -> label text
    out_dir: str | Path
    prompts: list[str] = field(default_factory=lambda: list(DEFAULT_PROMPT_STRINGS))
    batch_size: int = 8
    max_length: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in (MODE_MLM, MODE_CLM):
            raise JobError(f"mode must be {MODE_MLM!r} or {MODE_CLM!r}, got {self.mode!r}")
        if not self.labels:
            raise JobError("no entity labels to extract")


def load_backend(model_id: str):
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except Exception as exc:
        raise JobError(f"could not load model {model_id!r}: {exc}") from exc
    model.eval()
    return tokenizer, model


def _context_limit(job: ExtractionJob, tokenizer, model) -> int:
    if job.max_length:
        return job.max_length
    limit = getattr(model.config, "max_position_embeddings", None)
    if limit is None:
        limit = getattr(tokenizer, "model_max_length", 512)
    return min(int(limit), 2048)


@torch.no_grad()
def _encode_batch(tokenizer, model, texts: list[str], mode: str, max_length: int) -> np.ndarray:
    enc = tokenizer(texts, return_tensors="pt", padding=True,
                    truncation=True, max_length=max_length)
    out = model(**enc)
    hidden = out.last_hidden_state  # final transformer layer
    vectors = []
    for row in range(len(texts)):
        ids = enc["input_ids"][row]
        attn = enc["attention_mask"][row]
        if mode == MODE_MLM:
            positions = (ids == tokenizer.mask_token_id) & attn.bool()
            where = positions.nonzero(as_tuple=True)[0]
            if len(where) == 0:
                raise JobError(f"mask token missing after tokenization of {texts[row]!r} "
                               "(prompt may have been truncated)")
            pos = int(where[0])
        else:
            pos = int(attn.sum()) - 1
        vectors.append(hidden[row, pos].to(torch.float32).numpy())
    return np.stack(vectors)


def extract(job: ExtractionJob, backend=None) -> Path:
    """Write one record per (entity, prompt) to `job.out_dir`; returns it."""
    tokenizer, model = backend if backend is not None else load_backend(job.model)
    if job.mode == MODE_MLM and tokenizer.mask_token is None:
        raise JobError("masked-model extraction needs a tokenizer with a mask token")
    if tokenizer.pad_token is None:
        tokenizer.pad_token = tokenizer.eos_token or tokenizer.unk_token
    # The extraction position (mask token or final token) sits at the end of
    # the realized prompt, so over-long labels are truncated from the left.
    tokenizer.truncation_side = "left"
    max_length = _context_limit(job, tokenizer, model)
    dim = int(model.config.hidden_size)
    writer = StoreWriter(model=job.model, mode=job.mode, prompts=job.prompts, dim=dim)

    entities = list(job.labels)
    truncated = 0
    for entity in entities:
        label = job.labels[entity]
        texts = [realize(t, label, job.mode, tokenizer.mask_token) for t in job.prompts]
        lengths = [len(tokenizer(t)["input_ids"]) for t in texts]
        if any(n > max_length for n in lengths):
            truncated += 1
            warnings.warn(f"label for {entity!r} exceeds the model context; truncating", stacklevel=2)
        for start in range(0, len(texts), job.batch_size):
            chunk = texts[start:start + job.batch_size]
            vecs = _encode_batch(tokenizer, model, chunk, job.mode, max_length)
            for offset, vec in enumerate(vecs):
                writer.add(entity, start + offset, vec)
    writer.save(job.out_dir)
    return Path(job.out_dir)


def read_labels(path: str | Path) -> dict[str, str]:
    """labels.tsv: `entity<TAB>label` per line."""
    path = Path(path)
    if not path.is_file():
        raise JobError(f"labels file not found: {path}")
    labels: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise JobError(f"{path}:{lineno}: expected `entity<TAB>label`")
        labels[parts[0]] = parts[1]
    return labels
