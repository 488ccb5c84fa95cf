"""The six assertion prompt templates and their mode-specific realization.

Template strings must match the consumer's default prompt set byte for
byte; they carry one `{}` placeholder for the entity label. A masked model
sees the template with the tokenizer's mask token appended in place of the
trailing blank; a causal model sees the bare template and the final token's
representation is extracted instead.
"""

from __future__ import annotations

PROMPTS: tuple[tuple[str, str, str], ...] = (
    ("p1", "type", "{} is a type of"),
    ("p2", "geographic", "{} is located in"),
    ("p3", "membership", "{} is member of"),
    ("p4", "equivalence", "{} is equivalent to"),
    ("p5", "difference", "{} is different from"),
    ("p6", "similarity", "{} is similar to"),
)

DEFAULT_PROMPT_STRINGS = [template for _, _, template in PROMPTS]

MODE_MLM = "mlm"
MODE_CLM = "clm"


def realize(template: str, label: str, mode: str, mask_token: str | None) -> str:
    """Fill the entity placeholder and apply the mode's blank handling."""
    text = template.format(label)
    if mode == MODE_MLM:
        if not mask_token:
            raise ValueError("masked-model extraction needs a tokenizer with a mask token")
        return f"{text} {mask_token}"
    if mode == MODE_CLM:
        return text
    raise ValueError(f"unknown extraction mode {mode!r}")
