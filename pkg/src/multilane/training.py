"""Per-task optimization and the incremental loop.

Each task trains its own pathway with BCE over that task's classes, Adam, and
a cosine learning-rate schedule; the backbone never receives gradient and
completed pathways are frozen with their optimizer state discarded. Ablation
switches cover: no pre-head normalization, query-key single-pathway
selection, no drop-and-replace, and token-merging summarization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .backbone import BackboneWeights, FrozenTaps, frozen_forward
from .errors import ConfigError, ProtocolError, ShapeError
from .metrics import EvalReport, cil_accuracy, f1_suite, mean_average_precision
from .pathways import (TaskPathway, classify, infer_from_taps, make_pathway,
                       predict, querykey_infer_from_taps, sigmoid_np, task_forward)
from .protocol import MLCILBenchmark, MultiLabelDataset
from .tensor import Tensor

BCE_EPS = 1e-7


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over task classes, probabilities clamped to
    [eps, 1-eps] for numeric safety."""
    y = np.asarray(targets, dtype=logits.data.dtype).reshape(logits.data.shape)
    if y.shape != logits.data.shape:
        raise ShapeError(f"bce: targets {y.shape} vs logits {logits.data.shape}")
    yt = Tensor(y, requires_grad=False)
    yc = Tensor(1.0 - y, requires_grad=False)
    p = T.clip(T.sigmoid(logits), BCE_EPS, 1.0 - BCE_EPS)
    pc = T.sub(Tensor(np.ones_like(p.data), requires_grad=False), p)
    ll = T.add(T.mul(yt, T.log(p)), T.mul(yc, T.log(pc)))
    return T.scale(T.mean(ll), -1.0)


def cosine_lr(step: int, total_steps: int, lr_init: float) -> float:
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_init
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params: Sequence[Tensor], grads, state: AdamState, lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Standard Adam with bias-corrected moments; a None gradient counts as zero."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam: grad {g.shape} vs param {p.data.shape}")
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


@dataclass
class TrainConfig:
    lr_init: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    epochs: int = 20
    num_selectors: int = 4
    prompt_len: int = 4
    threshold: float = 0.5
    f1_threshold: float = 0.8
    seed: int = 0
    no_norm: bool = False
    querykey: bool = False
    no_drop_replace: bool = False
    use_tome: bool = False
    tome_max_len: int = 30
    sequential_baseline: bool = False

    def validate(self) -> None:
        if self.lr_init <= 0:
            raise ConfigError(f"lr_init must be positive, got {self.lr_init}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.prompt_len % 2 != 0 or self.prompt_len < 0:
            raise ConfigError(f"prompt_len must be even and non-negative, got {self.prompt_len}")
        if self.use_tome and self.tome_max_len < 2:
            raise ConfigError("tome_max_len must be >= 2")
        if not 0 < self.threshold < 1 or not 0 < self.f1_threshold < 1:
            raise ConfigError("thresholds must lie in (0, 1)")
        if self.sequential_baseline and (self.querykey or self.use_tome):
            raise ConfigError("sequential baseline cannot combine with querykey/tome modes")

    @property
    def drop_replace(self) -> bool:
        return not self.no_drop_replace


class TapCache:
    """Memoizes the frozen forward per (dataset, image); the frozen pass
    depends only on frozen state, so this is a pure speed optimization."""

    def __init__(self, weights: BackboneWeights):
        self.weights = weights
        self._taps: Dict[Tuple[int, int], FrozenTaps] = {}
        self._pins: List[MultiLabelDataset] = []

    def get(self, dataset: MultiLabelDataset, i: int) -> FrozenTaps:
        key = (id(dataset), i)
        hit = self._taps.get(key)
        if hit is None:
            if not any(d is dataset for d in self._pins):
                self._pins.append(dataset)
            hit = frozen_forward(dataset.image(i), self.weights)
            self._taps[key] = hit
        return hit


@dataclass
class LearnerState:
    weights: BackboneWeights
    config: TrainConfig
    pathways: List[TaskPathway] = field(default_factory=list)
    log: List[Dict] = field(default_factory=list)
    global_step: int = 0
    taps: TapCache = None

    def __post_init__(self):
        if self.taps is None:
            self.taps = TapCache(self.weights)


def _rng(*ints) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(ints)))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _mean_of(losses: List[Tensor]) -> Tensor:
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(losses))


def _key_loss(key: Tensor, query: np.ndarray) -> Tensor:
    """1 - cos(query, key); the query is a frozen feature, only the key moves."""
    q = query.reshape(1, -1).astype(key.data.dtype)
    qhat = Tensor(q / max(np.linalg.norm(q), 1e-12), requires_grad=False)
    num = T.tsum(T.mul(qhat, key))
    den = T.sqrt(T.add(T.tsum(T.mul(key, key)),
                       Tensor(np.asarray(1e-12, dtype=key.data.dtype), requires_grad=False)))
    one = Tensor(np.asarray(1.0, dtype=key.data.dtype), requires_grad=False)
    return T.sub(one, T.div(num, den))


def train_task(state: LearnerState, benchmark: MLCILBenchmark, t: int,
               config: Optional[TrainConfig] = None) -> TaskPathway:
    """Train task t's pathway on its view and freeze it into the state."""
    config = config or state.config
    config.validate()
    if t != len(state.pathways) + 1:
        done = len(state.pathways)
        raise ProtocolError(
            f"task {t} cannot start: {done} task(s) completed, next is {done + 1}")
    view = benchmark.train_view(t)
    spec = benchmark.tasks[t - 1]
    pathway = make_pathway(
        t, spec.class_ids, state.weights,
        num_selectors=config.num_selectors, prompt_len=config.prompt_len,
        rng=_rng(config.seed, t, 1),
        use_tome=config.use_tome, with_key=config.querykey)

    n = len(view)
    n_batches = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * n_batches
    params = pathway.parameters()
    opt = AdamState(params)
    labels = view.labels()

    for epoch in range(config.epochs):
        shuffle = _rng(config.seed, t, 2, epoch)
        for batch in _batches(n, config.batch_size, shuffle):
            losses = []
            for i in batch:
                taps = state.taps.get(view.dataset, int(i))
                out = task_forward(pathway, taps, state.weights,
                                   drop_replace=config.drop_replace,
                                   tome_max_len=config.tome_max_len)
                logits = classify(pathway, out, no_norm=config.no_norm)
                losses.append(bce_loss(logits, labels[i]))
                if config.querykey:
                    losses.append(_key_loss(pathway.key, taps.final_cls.data))
            loss = _mean_of(losses)
            lr = cosine_lr(opt.t, total_steps, config.lr_init)
            T.backward(loss)
            grads = [p.grad for p in params]
            adam_step(params, grads, opt, lr, betas=config.betas)
            for p in params:
                p.zero_grad()
            state.global_step += 1
            state.log.append({"step": state.global_step, "task": t,
                              "loss": float(loss.data), "lr": lr})
    pathway.freeze()
    state.pathways.append(pathway)
    return pathway


def evaluate(state: LearnerState, dataset: MultiLabelDataset, class_ids: Sequence[int],
             step: int, cil: bool = False) -> EvalReport:
    """Score every image over all seen classes and compute the metric suite."""
    config = state.config
    scores = np.zeros((len(dataset), len(class_ids)), dtype=np.float64)
    ids_ref: Optional[List[int]] = None
    for i in range(len(dataset)):
        taps = state.taps.get(dataset, i)
        if config.querykey:
            logits, ids = querykey_infer_from_taps(
                taps, state.pathways, state.weights,
                drop_replace=config.drop_replace, no_norm=config.no_norm)
        else:
            logits, ids = infer_from_taps(
                taps, state.pathways, state.weights,
                drop_replace=config.drop_replace, tome_max_len=config.tome_max_len,
                no_norm=config.no_norm)
        if ids_ref is None:
            ids_ref = ids
            if sorted(ids) != sorted(class_ids):
                raise ConfigError(f"pathways cover {sorted(ids)}, expected {sorted(class_ids)}")
        scores[i] = logits
    labels = dataset.labels[:, ids_ref]
    probs = sigmoid_np(scores)
    m, per_class, skipped = mean_average_precision(probs, labels, warn=False)
    preds = predict(scores, threshold=config.f1_threshold)
    cf1, of1 = f1_suite(preds, labels)
    acc = None
    if cil:
        single = labels.argmax(axis=1)
        acc = cil_accuracy(scores, single)
    return EvalReport(step=step, class_ids=list(ids_ref), per_class_ap=per_class,
                      map=m, cf1=cf1, of1=of1, skipped_classes=skipped, cil_acc=acc)


def run_incremental(benchmark: MLCILBenchmark, config: TrainConfig,
                    weights: BackboneWeights) -> Tuple[LearnerState, List[EvalReport]]:
    """Full incremental protocol: train task 1..T, evaluating after each step
    on all classes seen so far."""
    if config.sequential_baseline:
        return run_sequential_baseline(benchmark, config, weights)
    state = LearnerState(weights=weights, config=config)
    history: List[EvalReport] = []
    for t in range(1, benchmark.num_tasks + 1):
        train_task(state, benchmark, t, config)
        history.append(evaluate(state, benchmark.test, benchmark.seen_classes(t), step=t))
    return state, history


def run_sequential_baseline(benchmark: MLCILBenchmark, config: TrainConfig,
                            weights: BackboneWeights) -> Tuple[LearnerState, List[EvalReport]]:
    """Naive sequential fine-tuning: one shared pathway and one head over the
    full label space, re-trained at every step on current-task labels only.
    Old classes receive no gradient protection, so they collapse -- the
    forgetting reference point for the incremental runs."""
    config.validate()
    state = LearnerState(weights=weights, config=config)
    all_classes = [c for spec in benchmark.tasks for c in spec.class_ids]
    shared = make_pathway(1, all_classes, weights,
                          num_selectors=config.num_selectors, prompt_len=config.prompt_len,
                          rng=_rng(config.seed, 0, 1))
    col_of = {c: j for j, c in enumerate(shared.class_ids)}
    params = shared.parameters()
    history: List[EvalReport] = []
    for t in range(1, benchmark.num_tasks + 1):
        view = benchmark.train_view(t)
        labels = view.labels()
        cols = [col_of[c] for c in benchmark.tasks[t - 1].class_ids]
        lo, hi = min(cols), max(cols) + 1
        if cols != list(range(lo, hi)):
            raise ConfigError("task classes must be contiguous in the shared head")
        n = len(view)
        n_batches = (n + config.batch_size - 1) // config.batch_size
        total_steps = config.epochs * n_batches
        opt = AdamState(params)  # fresh optimizer per step, like the pathway runs
        for p in params:
            p.requires_grad = True
        for epoch in range(config.epochs):
            shuffle = _rng(config.seed, t, 2, epoch)
            for batch in _batches(n, config.batch_size, shuffle):
                losses = []
                for i in batch:
                    taps = state.taps.get(view.dataset, int(i))
                    out = task_forward(shared, taps, state.weights,
                                       drop_replace=config.drop_replace)
                    logits = classify(shared, out, no_norm=config.no_norm)
                    task_logits = T.slice_axis(logits, 1, lo, hi)
                    losses.append(bce_loss(task_logits, labels[i]))
                loss = _mean_of(losses)
                lr = cosine_lr(opt.t, total_steps, config.lr_init)
                T.backward(loss)
                adam_step(params, [p.grad for p in params], opt, lr, betas=config.betas)
                for p in params:
                    p.zero_grad()
                state.global_step += 1
                state.log.append({"step": state.global_step, "task": t,
                                  "loss": float(loss.data), "lr": lr})
        seen = benchmark.seen_classes(t)
        seen_cols = [col_of[c] for c in seen]
        scores = np.zeros((len(benchmark.test), len(seen)), dtype=np.float64)
        for i in range(len(benchmark.test)):
            taps = state.taps.get(benchmark.test, i)
            with T.no_grad():
                out = task_forward(shared, taps, state.weights,
                                   drop_replace=config.drop_replace)
                logits = classify(shared, out, no_norm=config.no_norm).data.reshape(-1)
            scores[i] = logits[seen_cols]
        labels_seen = benchmark.test.labels[:, seen]
        m, per_class, skipped = mean_average_precision(sigmoid_np(scores), labels_seen, warn=False)
        cf1, of1 = f1_suite(predict(scores, config.f1_threshold), labels_seen)
        history.append(EvalReport(step=t, class_ids=list(seen), per_class_ap=per_class,
                                  map=m, cf1=cf1, of1=of1, skipped_classes=skipped))
    shared.freeze()
    state.pathways.append(shared)
    return state, history
