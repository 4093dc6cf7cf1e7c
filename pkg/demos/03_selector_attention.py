"""Inspect what the selectors attend to, per task and per depth.

Trains a short 2-task run, then prints the selector attention over the patch
grid for an image, for each task and layer. Trained-task selectors should
concentrate on stamped cells; attention at layer 1 is flatter than at depth
(texture classes carry no linear layer-1 trace). The same maps are exported
by `multilane heatmap` as CSV + PGM.
"""

import numpy as np

import multilane as ml
from multilane.summarizer import attention_map

config = ml.ViTConfig(image_size=32, patch_size=8, channels=3, depth=4, dim=64,
                      heads=4, mlp_ratio=4, prompted_layers=(1, 2))
weights = ml.random_init(config, seed=42, std=0.125)

world = dict(num_classes=4, max_objects=2, image_size=32, cell=8, noise=0.1,
             sign_flip_prob=0.5, stamp_seed=13)
train = ml.synth_generate(7, num_images=120, **world)
test = ml.synth_generate(8, num_images=40, **world)
bench = ml.make_benchmark(4, base=0, increment=2, class_order_seed=0,
                          train=train, test=test)
cfg = ml.TrainConfig(lr_init=0.01, epochs=15, batch_size=16, num_selectors=2,
                     prompt_len=4, seed=0)
state, history = ml.run_incremental(bench, cfg, weights)
print(f"final mAP {history[-1].map:.3f}\n")

idx = int(np.flatnonzero(test.labels.sum(axis=1) >= 2)[0])
print(f"image {idx}, positive classes: {np.flatnonzero(test.labels[idx])}")
taps = ml.frozen_forward(test.image(idx), weights)

for pathway in state.pathways:
    print(f"\ntask {pathway.task_id} (classes {pathway.class_ids}):")
    for layer in (1, config.depth):
        alpha = attention_map(pathway.selectors, taps.taps[layer - 1])
        grid_map = alpha[:, 1:].mean(axis=0).reshape(config.grid, config.grid)
        peak = grid_map.max() / grid_map.mean()
        print(f"  layer {layer}: peak/mean attention {peak:5.2f}  grid:")
        for row in grid_map:
            print("    " + " ".join(f"{v:6.3f}" for v in row))
