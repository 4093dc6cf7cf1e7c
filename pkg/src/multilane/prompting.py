"""Task prompts and prefix-tuned attention.

Prompts extend attention keys and values only; queries are untouched, so the
output sequence length always equals the query length. Each prompted block
of each task owns one [prompt_len x D] tensor whose first half acts as extra
keys and second half as extra values.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .backbone import msa
from .errors import ConfigError
from .tensor import Tensor


def make_prompts(prompt_len: int, dim: int, prompted_layers, rng: np.random.Generator) -> Dict[int, Tensor]:
    """One trainable prompt tensor per prompted block, trunc-normal init."""
    if prompt_len % 2 != 0:
        raise ConfigError(f"prompt length must be even (key/value halves), got {prompt_len}")
    return {layer: T.trunc_normal((prompt_len, dim), rng, std=0.02, requires_grad=True)
            for layer in sorted(prompted_layers)}


def split_prompt(prompt: Tensor) -> Tuple[Tensor, Tensor]:
    """Key rows (first half) and value rows (second half)."""
    half = prompt.data.shape[0] // 2
    return T.slice_axis(prompt, 0, 0, half), T.slice_axis(prompt, 0, half, prompt.data.shape[0])


def prefix_msa(prompt: Optional[Tensor], q: Tensor, k: Tensor, v: Tensor, heads: int,
               score_limit: Optional[Tuple[int, int]] = None) -> Tensor:
    """MSA(q, [p_K; k], [p_V; v]); with no prompt this is plain msa."""
    if prompt is None:
        return msa(q, k, v, heads, score_limit=score_limit)
    if prompt.data.shape[0] % 2 != 0:
        raise ConfigError(f"prompt has odd row count {prompt.data.shape[0]}")
    p_k, p_v = split_prompt(prompt)
    return msa(q, T.concat([p_k, k], axis=0), T.concat([p_v, v], axis=0), heads,
               score_limit=score_limit)
