"""Joint expert-count and rank allocation for LoRA-MoE adapters.

The package searches, via an alternating bilevel loop with
straight-through selection gradients, how many low-rank experts each
weight matrix of a small frozen transformer should keep and at what rank,
then materializes and fine-tunes the allocated model and analyzes the
result.
"""

from .allocation import (
    AllocationPlan,
    ModuleAllocation,
    PlanError,
    extract_plan,
    materialize,
    mola_group_allocation,
    normal_e_allocation,
    normal_plan,
    normal_r_allocation,
    plan_total_rank,
    proportional_allocation,
    trainable_parameter_count,
    uniform_allocation,
    uniform_budget_allocation,
)
from .analysis import (
    PerturbationSpec,
    difficulty_ladder_stats,
    ed_score,
    emit_report,
    layer_range_totals,
    perturb,
)
from .bilevel import (
    AdamWOptimizer,
    BilevelConfig,
    DataSplit,
    SearchState,
    SGDOptimizer,
    committed_model_step,
    gsv_step,
    inner_lookahead_step,
    run_search,
    split_dataset,
)
from .config import ConfigError, RunConfig, load_run_config, run_config_from_dict
from .gsv import (
    NEG_LARGE,
    GuidedSelectionVector,
    VirtualVector,
    build_expert_mask,
    build_rank_mask,
    init_gsv,
    ste_mask,
    stge_backward,
)
from .lora_moe import (
    LoRAExpert,
    LoRAMoELayerState,
    MaterializedModule,
    Router,
    RoutingStats,
    balance_loss,
    expert_delta,
    layer_forward_final,
    layer_forward_search,
    make_expert,
    masked_routing,
)
from .model import ALL_TARGETS, FFN_TARGETS, MHA_TARGETS, ToyTransformer, ToyTransformerConfig
from .numerics import (
    CustomGradientNode,
    FiniteDifferenceReport,
    NonFiniteError,
    ShapeError,
    Tensor,
    cross_entropy,
    embedding,
    finite_difference_check,
    gelu,
    linear,
    matmul,
    no_grad,
    softmax,
    top_k_keep,
)
from .tasks import Batch, TaskData, TaskSpec, generate_task
from .training import TrainingDivergence, combined_loss, evaluate_model, finetune, sft_loss

__version__ = "0.1.0"
