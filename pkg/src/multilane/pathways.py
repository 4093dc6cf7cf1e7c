"""Per-task pathways: the trainable bundle and the summarized task forward.

A pathway owns a class token, a selector bank, per-layer prompts, a pre-head
normalization affine and a classification head -- nothing else. Every block
of the task forward re-summarizes the frozen taps, runs (optionally
prefix-tuned) attention over [class row; summarized rows], then propagates
only the class row through the frozen projection/MLP tail (drop & replace).

Pathways never share tensors, which is what makes forgetting structurally
impossible: training one cannot move any other.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .backbone import BackboneWeights, FrozenTaps, frozen_forward, msa
from .errors import ConfigError, IntegrityError
from .prompting import make_prompts, prefix_msa
from .summarizer import make_selectors, summarize, tome_summarize
from .tensor import Tensor

NEG_LOGIT = -1.0e9  # sigmoid-equivalent of "class cannot be present"


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def thread_count() -> int:
    """Internal parallelism cap from MULTILANE_THREADS (0/unset = sequential)."""
    raw = os.environ.get("MULTILANE_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


@dataclass
class TaskPathway:
    task_id: int
    class_ids: Tuple[int, ...]
    cls_token: Tensor                    # [1 x D]
    selectors: Optional[Tensor]          # [num_selectors x D]; None in token-merging mode
    prompts: Dict[int, Tensor] = field(default_factory=dict)  # block index (1-based) -> [L_p x D]
    norm_w: Tensor = None                # pre-head normalization affine
    norm_b: Tensor = None
    head_w: Tensor = None                # [D x |classes|]
    head_b: Tensor = None
    key: Optional[Tensor] = None         # [1 x D], query-key ablation only
    frozen: bool = False

    def parameters(self) -> List[Tensor]:
        params = [self.cls_token]
        if self.selectors is not None:
            params.append(self.selectors)
        params.extend(self.prompts[l] for l in sorted(self.prompts))
        params.extend([self.norm_w, self.norm_b, self.head_w, self.head_b])
        if self.key is not None:
            params.append(self.key)
        return params

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True


def make_pathway(task_id: int, class_ids: Sequence[int], weights: BackboneWeights,
                 num_selectors: int, prompt_len: int, rng: np.random.Generator,
                 use_tome: bool = False, with_key: bool = False) -> TaskPathway:
    """Fresh trainable pathway; the class token starts from the pre-trained one."""
    cfg = weights.config
    n_classes = len(class_ids)
    if n_classes == 0:
        raise ConfigError(f"task {task_id} has no classes")
    selectors = None
    if not use_tome:
        selectors = make_selectors(num_selectors, cfg.dim, rng, max_tokens=cfg.seq_len)
    prompts = {}
    if prompt_len > 0 and cfg.prompted_layers:
        prompts = make_prompts(prompt_len, cfg.dim, cfg.prompted_layers, rng)
    key = None
    if with_key:
        key = T.trunc_normal((1, cfg.dim), rng, std=0.02, requires_grad=True)
    return TaskPathway(
        task_id=task_id,
        class_ids=tuple(int(c) for c in class_ids),
        cls_token=Tensor(weights.cls.data.copy(), requires_grad=True),
        selectors=selectors,
        prompts=prompts,
        norm_w=T.ones((cfg.dim,), requires_grad=True),
        norm_b=T.zeros((cfg.dim,), requires_grad=True),
        head_w=T.trunc_normal((cfg.dim, n_classes), rng, std=0.02, requires_grad=True),
        head_b=T.zeros((n_classes,), requires_grad=True),
        key=key,
    )


def _qkv_split(tokens: Tensor, blk) -> Tuple[Tensor, Tensor, Tensor]:
    d = blk.qkv_w.data.shape[0]
    qkv = T.bias_add(T.matmul(tokens, blk.qkv_w), blk.qkv_b)
    return (T.slice_axis(qkv, 1, 0, d),
            T.slice_axis(qkv, 1, d, 2 * d),
            T.slice_axis(qkv, 1, 2 * d, 3 * d))


def _mlp(x: Tensor, blk) -> Tensor:
    h = T.bias_add(T.matmul(x, blk.fc1_w), blk.fc1_b)
    return T.bias_add(T.matmul(T.gelu(h), blk.fc2_w), blk.fc2_b)


def task_forward(pathway: TaskPathway, taps: FrozenTaps, weights: BackboneWeights,
                 drop_replace: bool = True, tome_max_len: int = 30,
                 check_bound: bool = True) -> Tensor:
    """Run one task's forward over shared frozen taps; returns the class
    embedding [1 x D] after the frozen final norm.

    With drop_replace (the method), summarized tokens are recomputed from the
    frozen tap before each block's attention and discarded right after it;
    only the class row crosses blocks. Without it (ablation), block 1's
    summarized tokens join the class token as a short sequence that runs
    through the blocks like a standard transformer: summarization happens
    once, at the first layer, and its outputs propagate.
    """
    cfg = weights.config
    if len(taps.taps) != cfg.depth:
        raise ConfigError(f"taps for {len(taps.taps)} blocks, config depth {cfg.depth}")

    if pathway.selectors is not None:
        n_sum = pathway.selectors.data.shape[0]

        def summarized(tap):
            return summarize(pathway.selectors, tap)
    else:
        n_sum = min(tome_max_len, cfg.seq_len)

        def summarized(tap):
            return tome_summarize(tap, max_len=tome_max_len)

    half_prompt = 0
    if pathway.prompts:
        half_prompt = next(iter(pathway.prompts.values())).data.shape[0] // 2

    def limit(prompted: bool):
        if not check_bound:
            return None
        return (1 + n_sum, 1 + n_sum + (half_prompt if prompted else 0))

    pos0 = T.slice_axis(weights.pos, 0, 0, 1).detach()
    c = T.add(pathway.cls_token, pos0)

    if not drop_replace:
        x = T.concat([c, summarized(taps.taps[0])], axis=0)
        for l, blk in enumerate(weights.blocks, start=1):
            h = T.layer_norm(x, blk.norm1_w, blk.norm1_b)
            q, k, v = _qkv_split(h, blk)
            prompt = pathway.prompts.get(l)
            att = prefix_msa(prompt, q, k, v, cfg.heads, score_limit=limit(prompt is not None))
            x = T.add(x, T.bias_add(T.matmul(att, blk.proj_w), blk.proj_b))
            h2 = T.layer_norm(x, blk.norm2_w, blk.norm2_b)
            x = T.add(x, _mlp(h2, blk))
        c = T.slice_axis(x, 0, 0, 1)
        return T.layer_norm(c, weights.norm_w, weights.norm_b)

    for l, blk in enumerate(weights.blocks, start=1):
        c_norm = T.layer_norm(c, blk.norm1_w, blk.norm1_b)
        gbar = summarized(taps.taps[l - 1])
        tokens = T.concat([c_norm, gbar], axis=0)
        q, k, v = _qkv_split(tokens, blk)
        prompt = pathway.prompts.get(l)
        att = prefix_msa(prompt, q, k, v, cfg.heads, score_limit=limit(prompt is not None))
        cls_att = T.slice_axis(att, 0, 0, 1)   # drop & replace: summarized rows end here
        c = T.add(c, T.bias_add(T.matmul(cls_att, blk.proj_w), blk.proj_b))
        h2 = T.layer_norm(c, blk.norm2_w, blk.norm2_b)
        c = T.add(c, _mlp(h2, blk))
    return T.layer_norm(c, weights.norm_w, weights.norm_b)


def classify(pathway: TaskPathway, cls_out: Tensor, no_norm: bool = False) -> Tensor:
    """Task logits [1 x |classes|]; sigmoid is applied downstream."""
    h = cls_out if no_norm else T.layer_norm(cls_out, pathway.norm_w, pathway.norm_b)
    return T.bias_add(T.matmul(h, pathway.head_w), pathway.head_b)


def check_disjoint(pathways: Sequence[TaskPathway]) -> None:
    seen: Dict[int, int] = {}
    for p in pathways:
        for c in p.class_ids:
            if c in seen:
                raise IntegrityError(f"class {c} claimed by tasks {seen[c]} and {p.task_id}")
            seen[c] = p.task_id


def infer_from_taps(taps: FrozenTaps, pathways: Sequence[TaskPathway],
                    weights: BackboneWeights, drop_replace: bool = True,
                    tome_max_len: int = 30, no_norm: bool = False) -> Tuple[np.ndarray, List[int]]:
    """Every pathway's forward over shared taps; logits concatenated in task
    order. Returns (logits, class ids in logit order)."""
    if not pathways:
        raise ConfigError("inference needs at least one pathway")
    check_disjoint(pathways)

    def run(p: TaskPathway) -> np.ndarray:
        with T.no_grad():
            out = task_forward(p, taps, weights, drop_replace=drop_replace,
                               tome_max_len=tome_max_len)
            return classify(p, out, no_norm=no_norm).data.reshape(-1).copy()

    workers = thread_count()
    if workers > 1 and len(pathways) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, pathways))
    else:
        parts = [run(p) for p in pathways]
    logits = np.concatenate(parts)
    ids = [c for p in pathways for c in p.class_ids]
    return logits, ids


def infer(image: Tensor, pathways: Sequence[TaskPathway], weights: BackboneWeights,
          **kwargs) -> Tuple[np.ndarray, List[int]]:
    """One frozen forward, then all task forwards (task-agnostic inference)."""
    return infer_from_taps(frozen_forward(image, weights), pathways, weights, **kwargs)


def predict(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Independent sigmoid thresholding; strictly greater than the boundary."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return (sigmoid_np(logits) > threshold).astype(np.int8)


def querykey_select(final_cls: np.ndarray, pathways: Sequence[TaskPathway]) -> int:
    """Index of the pathway whose key is most cosine-similar to the query."""
    q = final_cls.reshape(-1).astype(np.float64)
    qn = q / max(np.linalg.norm(q), 1e-12)
    sims = []
    for p in pathways:
        if p.key is None:
            raise ConfigError(f"pathway {p.task_id} has no trained key")
        k = p.key.data.reshape(-1).astype(np.float64)
        sims.append(float(qn @ (k / max(np.linalg.norm(k), 1e-12))))
    return int(np.argmax(sims))  # ties break to the lower task index


def querykey_infer_from_taps(taps: FrozenTaps, pathways: Sequence[TaskPathway],
                             weights: BackboneWeights, drop_replace: bool = True,
                             no_norm: bool = False) -> Tuple[np.ndarray, List[int]]:
    """Single-pathway ablation: pick one task by query-key matching, run only
    its forward; classes outside it score as absent."""
    if not pathways:
        raise ConfigError("inference needs at least one pathway")
    check_disjoint(pathways)
    chosen = querykey_select(taps.final_cls.data, pathways)
    with T.no_grad():
        out = task_forward(pathways[chosen], taps, weights, drop_replace=drop_replace)
        task_logits = classify(pathways[chosen], out, no_norm=no_norm).data.reshape(-1)
    logits = []
    ids = []
    for i, p in enumerate(pathways):
        if i == chosen:
            logits.append(task_logits)
        else:
            logits.append(np.full(len(p.class_ids), NEG_LOGIT, dtype=task_logits.dtype))
        ids.extend(p.class_ids)
    return np.concatenate(logits), ids


def querykey_infer(image: Tensor, pathways: Sequence[TaskPathway],
                   weights: BackboneWeights, **kwargs) -> Tuple[np.ndarray, List[int]]:
    return querykey_infer_from_taps(frozen_forward(image, weights), pathways,
                                    weights, **kwargs)
