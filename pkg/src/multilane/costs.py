"""Analytical MAC and parameter accounting.

Convention (profiler-style module counting): only parameterized linear maps
are counted -- patch embedding, fused qkv, attention output projection, both
MLP linears, classifier heads. Attention score/value matmuls, normalizations
and summarization weighted sums are excluded. The frozen forward pushes all
L+1 rows through every linear; each summarized task forward pushes
1 + num_selectors rows through qkv, output projection and MLP of every block
(prompt rows extend keys/values directly and never cross a counted linear).

A naive multi-pathway architecture has no shared frozen pass: every task is
its own full-length, fully-trainable forward, so its totals are simply T
copies of the plain backbone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict

from .backbone import ViTConfig


@dataclass
class CostReport:
    label: str
    frozen_macs: int
    per_task_macs: int
    tasks: int
    head_macs: int
    trainable_params: int
    frozen_params: int
    param_breakdown: Dict[str, int] = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return self.frozen_macs + self.tasks * self.per_task_macs + self.head_macs

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def to_dict(self) -> Dict:
        return {
            "label": self.label,
            "frozen_macs": self.frozen_macs,
            "per_task_macs": self.per_task_macs,
            "tasks": self.tasks,
            "head_macs": self.head_macs,
            "total_macs": self.total_macs,
            "gmacs": self.gmacs,
            "trainable_params": self.trainable_params,
            "frozen_params": self.frozen_params,
            "param_breakdown": dict(self.param_breakdown),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _block_linear_macs(config: ViTConfig, rows: int) -> int:
    d, md = config.dim, config.mlp_dim
    qkv = rows * d * 3 * d
    proj = rows * d * d
    mlp = rows * (d * md + md * d)
    return qkv + proj + mlp


def backbone_macs(config: ViTConfig) -> int:
    """Full-length forward: patch embedding plus every block at L+1 rows."""
    stem = config.num_patches * config.patch_dim * config.dim
    return stem + config.depth * _block_linear_macs(config, config.seq_len)


def backbone_params(config: ViTConfig) -> int:
    d, md, pd = config.dim, config.mlp_dim, config.patch_dim
    per_block = (2 * d            # norm1
                 + d * 3 * d + 3 * d
                 + d * d + d
                 + 2 * d          # norm2
                 + d * md + md
                 + md * d + d)
    return (pd * d + d            # patch embedding
            + config.seq_len * d  # positions
            + d                   # class token
            + config.depth * per_block
            + 2 * d)              # final norm


def pathway_params(config: ViTConfig, num_selectors: int, prompt_len: int,
                   classes_per_task: int) -> Dict[str, int]:
    d = config.dim
    return {
        "selectors": num_selectors * d,
        "class_token": d,
        "prompts": len(config.prompted_layers) * prompt_len * d,
        "pre_head_norm": 2 * d,
        "head": d * classes_per_task + classes_per_task,
    }


def count_macs(config: ViTConfig, tasks: int, num_selectors: int, prompt_len: int,
               classes_per_task: int = 10, naive: bool = False) -> CostReport:
    """Cost of one inference pass under the documented linear-layer convention."""
    head_macs = tasks * config.dim * classes_per_task
    frozen_p = backbone_params(config)
    if naive:
        per_task = backbone_macs(config)
        breakdown = {"full_backbone_copies": tasks * frozen_p,
                     "heads": tasks * (config.dim * classes_per_task + classes_per_task)}
        return CostReport(
            label="naive-pathways",
            frozen_macs=0, per_task_macs=per_task, tasks=tasks, head_macs=head_macs,
            trainable_params=sum(breakdown.values()), frozen_params=0,
            param_breakdown=breakdown,
        )
    per_task = config.depth * _block_linear_macs(config, 1 + num_selectors)
    per_path = pathway_params(config, num_selectors, prompt_len, classes_per_task)
    breakdown = {k: tasks * v for k, v in per_path.items()}
    return CostReport(
        label="summarized-pathways" if tasks else "backbone-only",
        frozen_macs=backbone_macs(config), per_task_macs=per_task, tasks=tasks,
        head_macs=head_macs,
        trainable_params=sum(breakdown.values()), frozen_params=frozen_p,
        param_breakdown=breakdown,
    )


def count_params(config: ViTConfig, tasks: int, num_selectors: int, prompt_len: int,
                 classes_per_task: int = 10) -> CostReport:
    """Parameter-only report (MAC fields mirror count_macs for convenience)."""
    return count_macs(config, tasks, num_selectors, prompt_len, classes_per_task)


def cost_table(config: ViTConfig, tasks: int, num_selectors: int, prompt_len: int,
               classes_per_task: int = 10):
    """The three standard rows: plain backbone, naive pathways, this method."""
    rows = [count_macs(config, 0, num_selectors, prompt_len, classes_per_task)]
    if tasks > 0:
        rows.append(count_macs(config, tasks, num_selectors, prompt_len,
                               classes_per_task, naive=True))
        rows.append(count_macs(config, tasks, num_selectors, prompt_len, classes_per_task))
    return rows


def format_table(rows) -> str:
    header = f"{'row':<22} {'GMACs':>10} {'trainable (M)':>14} {'frozen (M)':>12}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.label:<22} {r.gmacs:>10.3f} "
                     f"{r.trainable_params / 1e6:>14.3f} {r.frozen_params / 1e6:>12.3f}")
    return "\n".join(lines)


def format_csv(rows) -> str:
    lines = ["label,tasks,gmacs,total_macs,trainable_params,frozen_params"]
    for r in rows:
        lines.append(f"{r.label},{r.tasks},{r.gmacs!r},{r.total_macs},"
                     f"{r.trainable_params},{r.frozen_params}")
    return "\n".join(lines) + "\n"
