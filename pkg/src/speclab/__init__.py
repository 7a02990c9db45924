"""speclab: a desk-scale speculative-decoding laboratory.

Train a tiny target model and a distilled drafter, measure accepted length
and speedup under chain speculative decoding, optimize acceleration-collapse
suffixes under a KL semantic-drift bound, and report the collapse.
"""

from .analysis import (
    AcceptedLengthStats,
    CollapseReport,
    PromptMetrics,
    accepted_length_stats,
    build_report,
    histogram_csv,
    rep4,
    report_to_csv,
    survival_csv,
)
from .attack import (
    AttackConfig,
    AttackedPosition,
    IterationRecord,
    ObjectiveGradients,
    SemanticAnchor,
    SuffixState,
    TransferResult,
    VetoSelection,
    ablation_run,
    attack_record,
    build_semantic_anchors,
    collect_attacked_positions,
    evaluate_suffix,
    final_direction,
    kl_veto_select,
    null_space_project,
    optimize_suffix,
    propose_candidates,
    rejection_loss,
    semantic_loss,
    transfer_evaluate,
)
from .errors import ConfigError, InputError, InternalError, SpecLabError
from .specdec import (
    CycleRecord,
    DecodeConfig,
    DecodeTrace,
    acceptance_probability,
    autoregressive_decode,
    draft_chain,
    residual_distribution,
    speculative_decode,
    speedup_proxy,
    trace_from_dict,
    trace_to_dict,
    verify_chain,
    verify_tokens,
)
from .tinylm import (
    KLReferenceTerm,
    ModelConfig,
    ModelParams,
    SurprisalTerm,
    TrainConfig,
    Vocabulary,
    distill_drafter,
    distillation_kl,
    forward,
    forward_batch,
    input_gradient,
    load_checkpoint,
    log_prob,
    loss_value,
    one_hot,
    perplexity,
    random_params,
    save_checkpoint,
    train_target,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
