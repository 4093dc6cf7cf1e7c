"""Learner checkpointing: backbone plus per-task pathway tensors in one MLTA
archive (task entries namespaced ``task.{t}.*``) with a JSON manifest for the
non-tensor state (configs, class lists).
"""

from __future__ import annotations

import json
from dataclasses import asdict
from typing import Dict

import numpy as np

from .archive import load_archive, save_archive
from .backbone import ViTConfig, weights_from_entries
from .errors import ArchiveError, IntegrityError
from .pathways import TaskPathway
from .tensor import Tensor
from .training import LearnerState, TrainConfig


def _pathway_entries(p: TaskPathway) -> Dict[str, np.ndarray]:
    t = p.task_id
    out = {
        f"task.{t}.cls": p.cls_token.data,
        f"task.{t}.norm.weight": p.norm_w.data,
        f"task.{t}.norm.bias": p.norm_b.data,
        f"task.{t}.head.weight": p.head_w.data,
        f"task.{t}.head.bias": p.head_b.data,
    }
    if p.selectors is not None:
        out[f"task.{t}.selectors"] = p.selectors.data
    for layer, prompt in p.prompts.items():
        half = prompt.data.shape[0] // 2
        out[f"task.{t}.prompt.{layer}.k"] = prompt.data[:half]
        out[f"task.{t}.prompt.{layer}.v"] = prompt.data[half:]
    if p.key is not None:
        out[f"task.{t}.key"] = p.key.data
    return out


def save_checkpoint(path_prefix: str, state: LearnerState) -> None:
    entries = {k: v.data for k, v in state.weights.tensors().items()}
    for p in state.pathways:
        entries.update(_pathway_entries(p))
    save_archive(f"{path_prefix}.mlta", entries)
    manifest = {
        "model": {**asdict(state.weights.config),
                  "prompted_layers": list(state.weights.config.prompted_layers)},
        "train": asdict(state.config),
        "tasks": [{"index": p.task_id, "class_ids": list(p.class_ids),
                   "has_selectors": p.selectors is not None,
                   "prompt_layers": sorted(p.prompts),
                   "has_key": p.key is not None}
                  for p in state.pathways],
    }
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _frozen(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=False)


def load_checkpoint(path_prefix: str) -> LearnerState:
    try:
        with open(f"{path_prefix}.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise ArchiveError(f"checkpoint manifest {path_prefix}.json not found") from exc
    entries = load_archive(f"{path_prefix}.mlta")

    model = dict(manifest["model"])
    model["prompted_layers"] = tuple(model["prompted_layers"])
    config = ViTConfig(**model)
    train_raw = dict(manifest["train"])
    train_raw["betas"] = tuple(train_raw["betas"])
    train = TrainConfig(**train_raw)

    backbone_entries = {k: v for k, v in entries.items() if not k.startswith("task.")}
    weights = weights_from_entries(backbone_entries, config)

    pathways = []
    for info in manifest["tasks"]:
        t = info["index"]

        def need(name):
            full = f"task.{t}.{name}"
            if full not in entries:
                raise IntegrityError(f"checkpoint lacks tensor '{full}'")
            return entries[full]

        selectors = None
        if info["has_selectors"]:
            selectors = _frozen(need("selectors"))
        prompts = {}
        for layer in info["prompt_layers"]:
            prompts[layer] = _frozen(np.concatenate(
                [need(f"prompt.{layer}.k"), need(f"prompt.{layer}.v")], axis=0))
        key = _frozen(need("key")) if info.get("has_key") else None
        pathways.append(TaskPathway(
            task_id=t, class_ids=tuple(info["class_ids"]),
            cls_token=_frozen(need("cls")), selectors=selectors, prompts=prompts,
            norm_w=_frozen(need("norm.weight")), norm_b=_frozen(need("norm.bias")),
            head_w=_frozen(need("head.weight")), head_b=_frozen(need("head.bias")),
            key=key, frozen=True))
    return LearnerState(weights=weights, config=train, pathways=pathways)
