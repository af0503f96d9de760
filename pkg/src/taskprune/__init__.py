"""Task-adaptive structured pruning for a desk-scale transformer.

Pipeline: build task corpora -> train or load the tiny model -> collect
activation statistics -> score channels and heads -> solve a layer-wise
sparsity schedule -> plan and apply pruning (mask or compact) -> evaluate.
"""

from .allocate import InfeasibleError, SparsitySchedule, load_schedule, logistic_ratio, probe_schedule, solve_schedule, uniform_schedule
from .classify import TaskClassifier, embed_prompt, evaluate_classifier, fit_classifier, load_classifier, predict_task
from .corpus import (
    TaskCorpus,
    TaskRecord,
    TaskSpec,
    Tokenizer,
    build_corpora,
    byte_tokenizer,
    char_tokenizer,
    default_task_specs,
    format_prompt,
    group_records,
    ingest,
    load_records,
    save_records,
    split_records,
    synth_records,
    synth_tasks,
    text_corpus,
)
from .evaluate import (
    EvalReport,
    SpeedReport,
    answer_nll,
    compare_strategies,
    eval_multiple_choice,
    eval_ppl,
    eval_speed,
    expert_vs_mismatch,
    relative_logit_diff,
    remove_test,
)
from .model import (
    DivergenceError,
    ForwardTrace,
    ModelConfig,
    TinyModel,
    forward,
    forward_with_taps,
    greedy_generate,
    init_random,
    load_checkpoint,
    save_checkpoint,
    sequence_logprob,
    train_tiny,
)
from .prune import CompactModel, PrunePlan, apply_mask, compact, load_plan, make_plan, plan_diff
from .scoring import (
    ImportanceScores,
    WeightSlice,
    aggregate_general,
    aggregate_heads,
    consuming_matrix,
    default_general_weights,
    load_scores,
    save_scores,
    score_all,
    score_energy,
    score_fluctuation,
    score_site,
    score_task,
    select_expert,
    weight_slices,
)
from .serialize import ArtifactError
from .stats import ActivationStats, StatsArchive, collect, collect_archive, export_heatmap, heatmap_csv, load_archive, merge, project_hidden_states

__version__ = "0.1.0"
