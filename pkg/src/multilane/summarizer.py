"""Token summarization: learnable patch selectors and the token-merging
alternative.

A selector bank is one trainable [num_selectors x D] matrix per task, shared
across every block of that task's forward. Each selector row emits one
summarized token as a softmax-weighted convex combination of the frozen tap
tokens, so gradients reach the selectors only -- the taps are detached by
construction.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def make_selectors(num_selectors: int, dim: int, rng: np.random.Generator,
                   max_tokens: int | None = None) -> Tensor:
    """Fresh trainable selector bank, truncated-normal init (std 0.02)."""
    if num_selectors < 1:
        raise ConfigError(f"need at least one selector, got {num_selectors}")
    if max_tokens is not None and num_selectors >= max_tokens:
        raise ConfigError(
            f"{num_selectors} selectors does not summarize a {max_tokens}-token sequence")
    return T.trunc_normal((num_selectors, dim), rng, std=0.02, requires_grad=True)


def summarize(selectors: Tensor, g: Tensor) -> Tensor:
    """Compress tap tokens g [(L+1) x D] into [num_selectors x D].

    Row j is sum_k alpha_jk * g_k with alpha = softmax(selectors @ g.T / sqrt(D))
    row-wise. g is detached internally: the frozen stream never receives
    gradient through a summarization.
    """
    if selectors.data.ndim != 2 or g.data.ndim != 2 or selectors.data.shape[1] != g.data.shape[1]:
        raise ShapeError(
            f"summarize: selector width {selectors.data.shape} vs tokens {g.data.shape}")
    g = g.detach()
    d = g.data.shape[1]
    scores = T.scale(T.matmul(selectors, T.transpose(g)), 1.0 / np.sqrt(d))
    alpha = T.softmax(scores, axis=1)
    return T.matmul(alpha, g)


def attention_map(selectors: Tensor, g: Tensor) -> np.ndarray:
    """The alpha matrix of ``summarize`` as a plain array, rows summing to 1."""
    s = selectors.data.astype(np.float64)
    gd = g.data.astype(np.float64)
    scores = s @ gd.T / np.sqrt(gd.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    ex = np.exp(scores)
    return ex / ex.sum(axis=1, keepdims=True)


def tome_summarize(g: Tensor, max_len: int = 30) -> Tensor:
    """Shorten a token sequence by repeated bipartite soft matching.

    Per pass: tokens split alternately into sets A (even indices) and B (odd
    indices); every A-token is matched to its most cosine-similar B-token;
    the r highest-similarity matches are merged into their B targets by
    size-weighted mean (so total token mass is conserved across passes);
    everything else passes through in order. r is the largest even number
    <= |A|, capped at floor(n/2) so one pass at most halves the length.
    Ties break toward lower indices. Repeats until length <= max_len.
    """
    if max_len < 2:
        raise ConfigError(f"tome max_len must be >= 2, got {max_len}")
    tokens = g.data.astype(np.float64, copy=True)
    sizes = np.ones(len(tokens), dtype=np.float64)
    while len(tokens) > max_len:
        tokens, sizes = _tome_pass(tokens, sizes)
    return Tensor(tokens.astype(g.data.dtype), requires_grad=False)


def _tome_pass(tokens: np.ndarray, sizes: np.ndarray):
    n = len(tokens)
    a_idx = np.arange(0, n, 2)
    b_idx = np.arange(1, n, 2)
    r = min((len(a_idx) // 2) * 2, n // 2)
    if r < 1:
        r = 1
    norms = np.linalg.norm(tokens, axis=1)
    norms = np.where(norms < 1e-12, 1e-12, norms)
    unit = tokens / norms[:, None]
    sim = unit[a_idx] @ unit[b_idx].T          # [|A| x |B|]
    best = sim.argmax(axis=1)                  # argmax takes the first max: lower index wins
    best_sim = sim[np.arange(len(a_idx)), best]
    order = np.lexsort((a_idx, -best_sim))     # by similarity desc, then lower source index
    merged_a = order[:r]

    new_tokens = tokens.copy()
    new_sizes = sizes.copy()
    keep = np.ones(n, dtype=bool)
    for ai in merged_a:
        src = a_idx[ai]
        dst = b_idx[best[ai]]
        total = new_sizes[src] + new_sizes[dst]
        new_tokens[dst] = (new_tokens[dst] * new_sizes[dst] + new_tokens[src] * new_sizes[src]) / total
        new_sizes[dst] = total
        keep[src] = False
    return new_tokens[keep], new_sizes[keep]
