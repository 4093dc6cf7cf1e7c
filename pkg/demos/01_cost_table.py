"""Reproduce the analytical inference-cost table.

Compares a plain ViT-B/16 forward, a naive architecture that runs one full
fine-tuned transformer per task, and the summarized-pathway design at two
selector budgets over a 10-task benchmark. The point of the exercise: per-task
attention cost depends on the selector count, not the token count, so ten
pathways cost about as much as one full-length forward.
"""

from multilane import ViTConfig
from multilane.costs import cost_table, count_macs, format_table

vitb16 = ViTConfig()  # 224x224, patch 16, depth 12, dim 768, heads 12

print("== 10 tasks, 20 selectors, 20 prompt rows ==")
print(format_table(cost_table(vitb16, tasks=10, num_selectors=20, prompt_len=20)))
print()

print("== 10 tasks, 1 selector ==")
print(format_table(cost_table(vitb16, tasks=10, num_selectors=1, prompt_len=20)))
print()

one = count_macs(vitb16, tasks=10, num_selectors=1, prompt_len=20)
twenty = count_macs(vitb16, tasks=10, num_selectors=20, prompt_len=20)
naive = count_macs(vitb16, tasks=10, num_selectors=20, prompt_len=20, naive=True)
print(f"naive / 1-selector cost ratio: {naive.gmacs / one.gmacs:.1f}x")
print(f"selector parameters, 8 tasks x 20 selectors x 768 dims: "
      f"{8 * 20 * vitb16.dim:,}")
print(f"per-task GMAC slope at 20 selectors: {twenty.per_task_macs / 1e9:.4f}")
