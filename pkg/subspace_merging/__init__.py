from ._checkpoint import (
    STATISTICS,
    Checkpoint,
    FisherMode,
    LayerStats,
    Role,
    StatsBundle,
    assert_mergeable,
    dumps,
    load,
    loads,
    save,
)
from ._cli import cli_dispatch, main
from ._errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DivergenceError,
    FormatError,
    MergeabilityError,
    MergeToolkitError,
    NumericalError,
    ObjectiveError,
    ShapeError,
    SingularityError,
    SpecError,
    StageError,
    StatsError,
    UsageError,
)
from ._fisher import (
    EXACT_FISHER_CAP,
    StatsConfig,
    check_layer_stats,
    collect_stats,
    diagonal_fisher,
    exact_fisher_linear,
    exact_fisher_vector,
    kfac_factors,
)
from ._flops import (
    FLOPS_METHODS,
    FULL_MODEL_FLOPS_SPEC,
    IA3_FLOPS_SPEC,
    FlopsMethod,
    FlopsModelSpec,
    flops_estimate,
    format_sig,
)
from ._harness import (
    CG_ITERS_GRID,
    LAMBDA_GRID,
    MERGE_METHODS,
    ArtifactStore,
    Evaluation,
    ExperimentConfig,
    FinetuneMode,
    MethodGrid,
    MethodName,
    Scenario,
    collect_all_stats,
    default_objective,
    derive_seed,
    emit_report,
    evaluate_tasks,
    fine_tune,
    flops_table,
    generate_data,
    hyperparameter_grid,
    load_experiment_config,
    load_results,
    merge_models,
    model_spec,
    pretrain_model,
    run_scenario,
    save_results,
    select_best,
    train_multitask_baseline,
)
from ._matchers import (
    AllOf,
    ArrayEquals,
    HasShape,
    IsClose,
    IsFiniteArray,
    IsOrthonormal,
    IsPSD,
    IsSymmetric,
    as_float_array,
)
from ._merge import (
    CLOSED_FORM_METHODS,
    STATS_FREE_METHODS,
    ClosedFormMethod,
    MergeHyperparams,
    closed_form_merge,
    default_epsilon,
    diagonal_fisher_merge,
    matching_gaps,
    order_models,
    regmean_closed_form,
    scale_offdiagonal,
    simple_average,
    task_arithmetic,
    task_subspace,
    ties_merge,
)
from ._solver import (
    INIT_METHODS,
    CGConfig,
    CGTrace,
    InitMethod,
    LinearSystem,
    MergeObjective,
    MergeRound,
    ObjectiveKind,
    build_system,
    cg_solve,
    check_system,
    mats_merge,
    multi_round,
    objective_kind_for,
    quadratic_objective_value,
    regmean_objective_value,
    traces_to_json,
)
from ._tensor import (
    KRON_DENSE_CAP,
    Matrix,
    Rng,
    chol_solve,
    chol_solve_ridge,
    kron_dense,
    make_rng,
    matmul,
    random_spd,
    spawn_rngs,
    sym_eig,
)
from ._train import (
    SPLITS,
    CaptureHook,
    CaptureRecord,
    ForwardCache,
    LayerCache,
    MlpSpec,
    Split,
    SuiteConfig,
    TaskDataset,
    TaskSplits,
    TrainConfig,
    backward,
    check_params,
    dataset_from_checkpoint,
    dataset_to_checkpoint,
    evaluate,
    forward,
    gen_synthetic_tasks,
    init_params,
    log_likelihood,
    predict,
    pretraining_task,
    prototypes,
    train,
    train_multitask,
)
from .version import VERSION

__all__ = (
    # errors
    'MergeToolkitError',
    'ShapeError',
    'ContractError',
    'SingularityError',
    'CapacityError',
    'FormatError',
    'MergeabilityError',
    'DivergenceError',
    'ConfigError',
    'NumericalError',
    'ObjectiveError',
    'SpecError',
    'StatsError',
    'StageError',
    'UsageError',
    # matchers
    'ArrayEquals',
    'AllOf',
    'IsClose',
    'IsSymmetric',
    'IsPSD',
    'IsOrthonormal',
    'HasShape',
    'IsFiniteArray',
    'as_float_array',
    # tensor
    'Matrix',
    'Rng',
    'make_rng',
    'spawn_rngs',
    'matmul',
    'sym_eig',
    'chol_solve',
    'chol_solve_ridge',
    'kron_dense',
    'random_spd',
    'KRON_DENSE_CAP',
    # checkpoint
    'Role',
    'FisherMode',
    'Checkpoint',
    'LayerStats',
    'StatsBundle',
    'STATISTICS',
    'dumps',
    'loads',
    'save',
    'load',
    'assert_mergeable',
    # train
    'Split',
    'SPLITS',
    'MlpSpec',
    'TaskDataset',
    'TaskSplits',
    'LayerCache',
    'ForwardCache',
    'CaptureRecord',
    'CaptureHook',
    'TrainConfig',
    'SuiteConfig',
    'check_params',
    'init_params',
    'forward',
    'log_likelihood',
    'backward',
    'predict',
    'evaluate',
    'train',
    'train_multitask',
    'prototypes',
    'gen_synthetic_tasks',
    'pretraining_task',
    'dataset_to_checkpoint',
    'dataset_from_checkpoint',
    # fisher
    'StatsConfig',
    'EXACT_FISHER_CAP',
    'diagonal_fisher',
    'kfac_factors',
    'exact_fisher_vector',
    'exact_fisher_linear',
    'collect_stats',
    'check_layer_stats',
    # merge
    'MergeHyperparams',
    'ClosedFormMethod',
    'CLOSED_FORM_METHODS',
    'STATS_FREE_METHODS',
    'order_models',
    'simple_average',
    'task_arithmetic',
    'ties_merge',
    'diagonal_fisher_merge',
    'regmean_closed_form',
    'closed_form_merge',
    'default_epsilon',
    'scale_offdiagonal',
    'task_subspace',
    'matching_gaps',
    # solver
    'ObjectiveKind',
    'MergeObjective',
    'CGConfig',
    'CGTrace',
    'LinearSystem',
    'InitMethod',
    'INIT_METHODS',
    'MergeRound',
    'objective_kind_for',
    'build_system',
    'check_system',
    'cg_solve',
    'quadratic_objective_value',
    'regmean_objective_value',
    'mats_merge',
    'multi_round',
    'traces_to_json',
    # flops
    'FlopsMethod',
    'FlopsModelSpec',
    'FLOPS_METHODS',
    'FULL_MODEL_FLOPS_SPEC',
    'IA3_FLOPS_SPEC',
    'flops_estimate',
    'format_sig',
    # harness
    'Scenario',
    'FinetuneMode',
    'MethodName',
    'MERGE_METHODS',
    'LAMBDA_GRID',
    'CG_ITERS_GRID',
    'MethodGrid',
    'ExperimentConfig',
    'load_experiment_config',
    'derive_seed',
    'model_spec',
    'default_objective',
    'Evaluation',
    'evaluate_tasks',
    'select_best',
    'hyperparameter_grid',
    'merge_models',
    'ArtifactStore',
    'generate_data',
    'pretrain_model',
    'fine_tune',
    'train_multitask_baseline',
    'collect_all_stats',
    'flops_table',
    'run_scenario',
    'emit_report',
    'save_results',
    'load_results',
    # cli
    'cli_dispatch',
    'main',
    # version
    '__version__',
)

__version__ = VERSION
