"""multilane: rehearsal-free multi-label class-incremental learning.

Per-task pathways over a frozen vision transformer; each pathway compresses
the frozen token stream with learnable selectors and runs prefix-tuned
attention over the short summarized sequence, so per-task compute stays
quadratic in the selector count instead of the token count. Includes an
analytical MAC/parameter accountant and a synthetic multi-label benchmark
harness.
"""

from .backbone import (BackboneWeights, FrozenTaps, ViTConfig, frozen_forward,
                       load_weights, msa, patch_embed, random_init, save_weights)
from .costs import CostReport, backbone_macs, backbone_params, cost_table, count_macs, count_params
from .errors import (ArchiveError, ConfigError, GradError, IntegrityError,
                     MultilaneError, ProtocolError, ScoreBoundError, ShapeError)
from .metrics import (EvalReport, average_precision, avg_map, cil_accuracy,
                      f1_suite, mean_average_precision)
from .pathways import (TaskPathway, classify, infer, infer_from_taps, make_pathway,
                       predict, querykey_infer, task_forward)
from .protocol import (MLCILBenchmark, MultiLabelDataset, TaskSpec, TaskView,
                       load_dataset, make_benchmark, make_task_splits,
                       save_dataset, synth_generate, task_view)
from .summarizer import attention_map, make_selectors, summarize, tome_summarize
from .tensor import Tensor, backward, no_grad, set_default_dtype, using_dtype
from .training import (LearnerState, TrainConfig, adam_step, bce_loss, cosine_lr,
                       evaluate, run_incremental, run_sequential_baseline, train_task)

__version__ = "0.1.0"
