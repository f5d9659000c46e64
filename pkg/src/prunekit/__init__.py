"""Budget-constrained filter pruning with learned per-layer score offsets.

The package bundles a validated graph representation, a from-scratch
float64 inference engine (forward, backward, SGD fine-tuning), exact
MAC/parameter cost accounting, per-filter importance metrics, several
mask policies, and an evolutionary search that learns per-layer metric
offsets to shrink the measured loss impact of pruning.
"""

from .bundle import (Batch, Dataset, load_dataset, load_model, sample_batch,
                     save_dataset, save_model)
from .compensation import (EAConfig, SearchResult, SearchTrace, fitness,
                           init_pool, mutate, search_beta)
from .cost import ConstraintSpec, CostReport, cost, macs, params, satisfies
from .engine import (TuneConfig, backward, evaluate, finetune, forward_loss,
                     loss_delta, single_filter_deltas)
from .errors import (DivergenceError, FormatError, GraphValidationError,
                     InfeasibleConstraintError, MaskError, PrunekitError)
from .metrics import MetricVector, compensated_scores, compute_metrics
from .model import (FilterGroupPartition, LayerDesc, NetworkGraph, apply_mask,
                    build_filter_groups, channel_mask, check_mask, full_mask)
from .pipeline import (ParetoPoint, PipelineConfig, PipelineResult,
                       diagnostics_rows, evaluate_model, run_pipeline, sweep)
from .pruners import (FloorPolicy, layer_scheduled_prune, naive_prune,
                      schedule_of_mask, single_filter_greedy, uniform_prune)

__version__ = "0.1.0"
