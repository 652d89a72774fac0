from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import re
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import Field, model_validator

from ._checkpoint import Checkpoint, FisherMode, Role, StatsBundle, load, save
from ._errors import ConfigError, ContractError, MergeToolkitError, SpecError, StageError
from ._fisher import StatsConfig, collect_stats
from ._flops import FLOPS_METHODS, FULL_MODEL_FLOPS_SPEC, IA3_FLOPS_SPEC, FlopsModelSpec, flops_estimate, format_sig
from ._merge import CLOSED_FORM_METHODS, MergeHyperparams, closed_form_merge
from ._solver import (
    CGConfig,
    InitMethod,
    MergeObjective,
    MergeRound,
    ObjectiveKind,
    mats_merge,
    multi_round,
    traces_to_json,
)
from ._train import (
    MlpSpec,
    Split,
    SuiteConfig,
    TaskDataset,
    TaskSplits,
    TrainConfig,
    dataset_from_checkpoint,
    dataset_to_checkpoint,
    evaluate,
    gen_synthetic_tasks,
    init_params,
    pretraining_task,
    train,
    train_multitask,
)
from ._utils import FrozenModel, format_float

__all__ = (
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
)

logger = logging.getLogger('subspace_merging.harness')

Scenario = Literal['multitask', 'intermediate_task', 'init_objective_grid', 'fisher_ablation']
FinetuneMode = Literal['full', 'scales']
MethodName = Literal['average', 'task_arithmetic', 'ties', 'diag_fisher', 'regmean', 'mats', 'mats_multi_round']
MERGE_METHODS: Tuple[MethodName, ...] = (
    'average',
    'task_arithmetic',
    'ties',
    'diag_fisher',
    'regmean',
    'mats',
    'mats_multi_round',
)

LAMBDA_GRID: Tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(1, 11))
CG_ITERS_GRID: Tuple[int, ...] = tuple(range(10, 101, 10))


class MethodGrid(FrozenModel):
    """
    One merge method and the hyperparameter values tried for it, the best is picked on validation accuracy.

    `lambda_scale=None` means [`LAMBDA_GRID`][subspace_merging.LAMBDA_GRID] for Task Arithmetic and TIES.
    For `mats` it means reusing the hyperparameters selected for the init method when that method ran earlier
    in the same experiment. `objective=None` uses [`default_objective`][subspace_merging.default_objective].
    """

    method: MethodName
    name: Optional[str] = None
    lambda_scale: Optional[Tuple[float, ...]] = Field(None, min_length=1)
    ties_trim_fraction: Tuple[float, ...] = Field((0.8,), min_length=1)
    regmean_offdiag_scale: Tuple[float, ...] = Field((0.9,), min_length=1)
    objective: Optional[ObjectiveKind] = None
    init: InitMethod = 'task_arithmetic'
    cg_iters: Tuple[int, ...] = Field(CG_ITERS_GRID, min_length=1)

    @model_validator(mode='after')
    def _check_init(self) -> MethodGrid:
        if self.init == 'provided':
            raise ValueError('an experiment cannot use init "provided"')
        return self

    @property
    def label(self) -> str:
        return self.name or self.method


def _default_methods() -> Tuple[MethodGrid, ...]:
    return tuple(MethodGrid(method=method) for method in MERGE_METHODS)


class ExperimentConfig(FrozenModel):
    """
    Everything a [`run_scenario`][subspace_merging.run_scenario] call needs, usually loaded from JSON with
    [`load_experiment_config`][subspace_merging.load_experiment_config].

    Attributes:
        scenario: Which experiment to run.
        suite: Synthetic task suite, its `seed` is replaced by each entry of `seeds`.
        hidden: Hidden layer widths of the MLP.
        finetune: `full` fine-tunes every parameter, `scales` only the per-layer scale vectors.
        pretrain: Training of the shared starting model on the pretraining task.
        train: Fine-tuning of each task model, `seed` and `trainable` are set by the harness.
        multitask: Training of the jointly trained baseline.
        stats: Statistics collection, `seed` is set by the harness.
        methods: Merge methods and their grids, run in order.
        seeds: Seeds to average the report over.
        output_dir: Where artifacts, `results.json` and the reports go.
        target_task: Target of the `intermediate_task` scenario, the first task by default.
        target_train_size: Training examples of the target task in the `intermediate_task` scenario.
        intermediate_tasks: Candidates merged with the target, by default the (up to) three tasks after it.
        grid_inits: Initialisations tried by `init_objective_grid`.
        grid_objectives: Objectives tried by `init_objective_grid`.
        cg_iters: Iteration grid of the merges `init_objective_grid` and `fisher_ablation` generate.
    """

    scenario: Scenario = 'multitask'
    suite: SuiteConfig = SuiteConfig()
    hidden: Tuple[int, ...] = (32, 32)
    finetune: FinetuneMode = 'full'
    pretrain: TrainConfig = TrainConfig(steps=1000)
    train: TrainConfig = TrainConfig()
    multitask: TrainConfig = TrainConfig(steps=2000)
    stats: StatsConfig = StatsConfig()
    methods: Tuple[MethodGrid, ...] = Field(default_factory=_default_methods)
    seeds: Tuple[int, ...] = Field(min_length=1)
    output_dir: str = 'runs/desk'
    target_task: Optional[str] = None
    target_train_size: int = Field(200, gt=0)
    intermediate_tasks: Optional[Tuple[str, ...]] = None
    grid_inits: Tuple[InitMethod, ...] = ('average', 'task_arithmetic', 'ties', 'diag_fisher', 'regmean')
    grid_objectives: Tuple[ObjectiveKind, ...] = (
        ObjectiveKind.average,
        ObjectiveKind.diag_fisher,
        ObjectiveKind.regmean,
        ObjectiveKind.block_fisher_kfac,
    )
    cg_iters: Tuple[int, ...] = Field(CG_ITERS_GRID, min_length=1)

    @model_validator(mode='after')
    def _check(self) -> ExperimentConfig:
        labels = [grid.label for grid in self.methods]
        if len(set(labels)) != len(labels):
            raise ValueError(f'method labels must be unique, got {labels}')
        if self.stats.split == 'test':
            raise ValueError('statistics may not be collected on the test split')
        if any(seed < 0 for seed in self.seeds):
            raise ValueError('seeds must be non-negative')
        if 'provided' in self.grid_inits:
            raise ValueError('an experiment cannot use init "provided"')
        if self.scenario == 'intermediate_task':
            names = self.suite.names()
            if len(names) < 2:
                raise ValueError('the intermediate_task scenario needs at least two tasks')
            if self.target_task is not None and self.target_task not in names:
                raise ValueError(f'unknown target task {self.target_task!r}')
            for name in self.intermediate_tasks or ():
                if name not in names or name == self.target:
                    raise ValueError(f'{name!r} cannot be an intermediate task')
        return self

    @property
    def target(self) -> str:
        return self.target_task or self.suite.names()[0]

    @property
    def intermediates(self) -> Tuple[str, ...]:
        if self.intermediate_tasks is not None:
            return self.intermediate_tasks
        names = self.suite.names()
        return tuple(name for name in names if name != self.target)[:3]


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'config file {str(path)!r} does not exist')
    return ExperimentConfig.model_validate_json(path.read_text())


def derive_seed(seed: int, *keys: int) -> int:
    """
    Independent 64-bit seed for one pipeline stage, a pure function of the experiment seed and the stage keys.
    """
    state = np.random.SeedSequence(seed, spawn_key=keys).generate_state(1, np.uint64)
    return int(state[0])


def model_spec(config: ExperimentConfig) -> MlpSpec:
    widths = (config.suite.input_dim, *config.hidden, config.suite.classes)
    return MlpSpec.from_widths(widths, use_scales=config.finetune == 'scales')


def default_objective(config: ExperimentConfig) -> ObjectiveKind:
    """
    RegMean when every parameter is fine-tuned, block Fisher when only the scale vectors are.
    """
    return ObjectiveKind.regmean if config.finetune == 'full' else ObjectiveKind.block_fisher_kfac


@dataclass(frozen=True)
class Evaluation:
    """
    Per-task accuracies of one model on one split. The split tag is what keeps test results out of
    hyperparameter selection.
    """

    split: Split
    accuracies: Dict[str, float]

    @property
    def average(self) -> float:
        if not self.accuracies:
            return float('nan')
        return sum(self.accuracies.values()) / len(self.accuracies)


def evaluate_tasks(spec: MlpSpec, params: Checkpoint, datasets: Sequence[TaskDataset], split: Split) -> Evaluation:
    for dataset in datasets:
        if dataset.split != split:
            raise ContractError(f'asked for {split!r} accuracy but {dataset.task_name!r} data is {dataset.split!r}')
    return Evaluation(split, {d.task_name: evaluate(spec, params, d) for d in datasets})


def select_best(candidates: Sequence[Evaluation]) -> int:
    """
    Index of the candidate with the highest average accuracy, the first one on ties.

    Only validation results are accepted.
    """
    if not candidates:
        raise ValueError('nothing to select from')
    for candidate in candidates:
        if candidate.split != 'validation':
            raise ContractError(f'hyperparameters are selected on validation results, got {candidate.split!r}')
    best = 0
    for index, candidate in enumerate(candidates):
        if candidate.average > candidates[best].average:
            best = index
    return best


Candidate = Tuple[MergeHyperparams, Optional[int]]

_TUNED = {
    'task_arithmetic': ('lambda_scale',),
    'ties': ('lambda_scale', 'ties_trim_fraction'),
    'regmean': ('regmean_offdiag_scale',),
}


def hyperparameter_grid(grid: MethodGrid, inherited: Optional[MergeHyperparams] = None) -> List[Candidate]:
    """
    Every `(hyperparameters, cg_iters)` combination of a method's grid, in a fixed order.
    """
    lambdas = grid.lambda_scale or LAMBDA_GRID
    trims = grid.ties_trim_fraction
    gammas = grid.regmean_offdiag_scale
    if grid.method in ('average', 'diag_fisher'):
        return [(MergeHyperparams(), None)]
    if grid.method == 'task_arithmetic':
        return [(MergeHyperparams(lambda_scale=lam), None) for lam in lambdas]
    if grid.method == 'ties':
        return [
            (MergeHyperparams(lambda_scale=lam, ties_trim_fraction=trim), None)
            for lam, trim in itertools.product(lambdas, trims)
        ]
    if grid.method == 'regmean':
        return [(MergeHyperparams(regmean_offdiag_scale=gamma), None) for gamma in gammas]

    if grid.lambda_scale is None and inherited is not None:
        inits = [inherited]
    elif grid.init in ('task_arithmetic', 'ties'):
        inits = [
            MergeHyperparams(lambda_scale=lam, ties_trim_fraction=trims[0], regmean_offdiag_scale=gammas[0])
            for lam in lambdas
        ]
    else:
        inits = [MergeHyperparams(ties_trim_fraction=trims[0], regmean_offdiag_scale=gammas[0])]
    return [(hp, iters) for hp in inits for iters in grid.cg_iters]


def _describe(grid: MethodGrid, candidate: Candidate) -> Dict[str, Any]:
    hp, iters = candidate
    tuned = grid.method if grid.method in CLOSED_FORM_METHODS else grid.init
    description: Dict[str, Any] = {key: getattr(hp, key) for key in _TUNED.get(tuned, ())}
    if iters is not None:
        description['cg_iters'] = iters
    return description


def merge_models(
    grid: MethodGrid,
    candidate: Candidate,
    models: Sequence[Checkpoint],
    stats: Optional[Sequence[StatsBundle]],
    pretrained: Checkpoint,
    objective: ObjectiveKind,
) -> Tuple[Checkpoint, Any]:
    """
    Merge with one grid point, returns the merged checkpoint and its JSON-ready CG traces (`None` for
    closed-form methods). `stats` may be `None` for the methods in
    [`STATS_FREE_METHODS`][subspace_merging.STATS_FREE_METHODS].
    """
    hp, iters = candidate
    if grid.method in CLOSED_FORM_METHODS:
        merged = closed_form_merge(
            grid.method, models, stats=stats, pretrained=pretrained, hyperparams=hp  # type: ignore[arg-type]
        )
        return merged, None
    cg_config = CGConfig(max_iters=iters or CG_ITERS_GRID[-1], check_operator=logger.isEnabledFor(logging.DEBUG))
    if grid.method == 'mats':
        merged, traces = mats_merge(
            models,
            stats,
            MergeObjective(kind=grid.objective or objective),
            grid.init,
            init_hyperparams=hp,
            cg_config=cg_config,
            pretrained=pretrained,
        )
        return merged, traces_to_json(traces)
    recipe = [
        MergeRound(objective=MergeObjective.of('regmean'), cg_config=cg_config, init_method=grid.init),
        MergeRound(objective=MergeObjective.of('block_fisher_kfac'), cg_config=cg_config),
    ]
    merged, rounds = multi_round(models, stats, recipe, pretrained=pretrained, init_hyperparams=hp)
    return merged, [traces_to_json(traces) for traces in rounds]


def _slug(label: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.-]+', '_', label)


class ArtifactStore:
    """
    Layout of one seed's artifacts under a directory:

    * `data/{task}.{split}.ckpt` datasets
    * `models/{name}.ckpt` pretrained, fine-tuned and multitask models
    * `stats/{name}{tag}.stats` statistics bundles
    * `merged/{label}.ckpt` selected merges, with `merged/{label}.traces.json` for CG merges
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def _write(self, path: Path, obj: Any) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        save(path, obj)
        return path

    def _read(self, path: Path, kind: type) -> Any:
        if not path.is_file():
            raise ConfigError(f'missing artifact {str(path)!r}')
        obj = load(path)
        if not isinstance(obj, kind):
            raise ContractError(f'{str(path)!r} does not hold a {kind.__name__}')
        return obj

    def dataset_path(self, task: str, split: str) -> Path:
        return self.root / 'data' / f'{_slug(task)}.{split}.ckpt'

    def save_dataset(self, dataset: TaskDataset) -> Path:
        return self._write(self.dataset_path(dataset.task_name, dataset.split), dataset_to_checkpoint(dataset))

    def load_dataset(self, task: str, split: str) -> TaskDataset:
        return dataset_from_checkpoint(self._read(self.dataset_path(task, split), Checkpoint))

    def load_splits(self, task: str) -> TaskSplits:
        return {split: self.load_dataset(task, split) for split in ('train', 'validation', 'test')}

    def model_path(self, name: str) -> Path:
        return self.root / 'models' / f'{_slug(name)}.ckpt'

    def save_model(self, name: str, params: Checkpoint) -> Path:
        return self._write(self.model_path(name), params)

    def load_model(self, name: str) -> Checkpoint:
        return self._read(self.model_path(name), Checkpoint)  # type: ignore[no-any-return]

    def stats_path(self, name: str, tag: str = '') -> Path:
        return self.root / 'stats' / f'{_slug(name)}{_slug(tag)}.stats'

    def save_stats(self, name: str, bundle: StatsBundle, tag: str = '') -> Path:
        return self._write(self.stats_path(name, tag), bundle)

    def load_stats(self, name: str, tag: str = '') -> StatsBundle:
        return self._read(self.stats_path(name, tag), StatsBundle)  # type: ignore[no-any-return]

    def merged_path(self, label: str) -> Path:
        return self.root / 'merged' / f'{_slug(label)}.ckpt'

    def save_merged(self, label: str, params: Checkpoint, traces: Any = None) -> Path:
        path = self._write(self.merged_path(label), params)
        if traces is not None:
            _write_json(path.with_name(f'{_slug(label)}.traces.json'), traces)
        return path


def _write_json(path: Path, value: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(value, indent=2, sort_keys=True, allow_nan=False) + '\n')


@contextmanager
def _stage(name: str) -> Iterator[None]:
    logger.info('stage %s', name)
    try:
        yield
    except StageError:
        raise
    except (MergeToolkitError, ArithmeticError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


def generate_data(config: ExperimentConfig, seed: int) -> Tuple[List[TaskSplits], TaskSplits]:
    """
    The task suite and the pretraining task for one seed.
    """
    suite = config.suite.model_copy(update={'seed': seed})
    return gen_synthetic_tasks(suite), pretraining_task(suite)


def _train_data(config: ExperimentConfig, splits: TaskSplits, split: str = 'train') -> TaskDataset:
    dataset = splits[split]
    if split == 'train' and config.scenario == 'intermediate_task' and dataset.task_name == config.target:
        return dataset.take(np.arange(min(config.target_train_size, len(dataset))))
    return dataset


def _trainable(config: ExperimentConfig) -> str:
    return 'all' if config.finetune == 'full' else 'scales'


def pretrain_model(config: ExperimentConfig, spec: MlpSpec, dataset: TaskDataset, seed: int) -> Checkpoint:
    init = init_params(spec, derive_seed(seed, 0))
    train_config = config.pretrain.model_copy(update={'seed': derive_seed(seed, 1), 'trainable': 'all'})
    return train(spec, init, dataset, train_config)


def fine_tune(
    config: ExperimentConfig, spec: MlpSpec, pretrained: Checkpoint, tasks: Sequence[TaskSplits], seed: int
) -> Dict[str, Checkpoint]:
    """
    Fine-tune `pretrained` on every task, keyed by task name.
    """
    models = {}
    for index, splits in enumerate(tasks):
        update = {'seed': derive_seed(seed, 2, index), 'trainable': _trainable(config)}
        train_config = config.train.model_copy(update=update)
        dataset = _train_data(config, splits)
        models[dataset.task_name] = train(spec, pretrained, dataset, train_config)
    return models


def train_multitask_baseline(
    config: ExperimentConfig, spec: MlpSpec, pretrained: Checkpoint, tasks: Sequence[TaskSplits], seed: int
) -> Checkpoint:
    """
    One model trained jointly on every task's training data, the upper-bound baseline.
    """
    train_config = config.multitask.model_copy(update={'seed': derive_seed(seed, 4), 'trainable': _trainable(config)})
    return train_multitask(spec, pretrained, [_train_data(config, splits) for splits in tasks], train_config)


def collect_all_stats(
    config: ExperimentConfig,
    spec: MlpSpec,
    models: Dict[str, Checkpoint],
    tasks: Sequence[TaskSplits],
    stats_config: StatsConfig,
    seed: int,
) -> List[StatsBundle]:
    """
    One statistics bundle per task, in task order, each collected on its own task's data.
    """
    bundles = []
    for index, splits in enumerate(tasks):
        dataset = _train_data(config, splits, stats_config.split)
        task_config = stats_config.model_copy(update={'seed': derive_seed(seed, 3, index)})
        bundles.append(collect_stats(spec, models[dataset.task_name], dataset, task_config))
    return bundles


@dataclass
class _Prepared:
    spec: MlpSpec
    tasks: List[TaskSplits]
    pretrained: Checkpoint
    models: Dict[str, Checkpoint]

    @property
    def names(self) -> List[str]:
        return [splits['train'].task_name for splits in self.tasks]

    def sets(self, split: str, names: Optional[Sequence[str]] = None) -> List[TaskDataset]:
        wanted = self.names if names is None else names
        return [splits[split] for splits in self.tasks if splits[split].task_name in wanted]


def _prepare(config: ExperimentConfig, seed: int, store: ArtifactStore) -> _Prepared:
    spec = model_spec(config)
    with _stage('gen-data'):
        tasks, pretrain = generate_data(config, seed)
        for splits in [*tasks, pretrain]:
            for dataset in splits.values():
                store.save_dataset(dataset)
    with _stage('pretrain'):
        pretrained = pretrain_model(config, spec, pretrain['train'], seed)
        store.save_model('pretrained', pretrained)
    with _stage('train'):
        models = fine_tune(config, spec, pretrained, tasks, seed)
        for name, params in models.items():
            store.save_model(name, params)
    return _Prepared(spec, tasks, pretrained, models)


def _stats(
    config: ExperimentConfig,
    prepared: _Prepared,
    store: ArtifactStore,
    seed: int,
    stats_config: Optional[StatsConfig] = None,
    tag: str = '',
) -> List[StatsBundle]:
    stats_config = stats_config or config.stats
    with _stage('stats' + tag):
        bundles = collect_all_stats(config, prepared.spec, prepared.models, prepared.tasks, stats_config, seed)
        for name, bundle in zip(prepared.names, bundles):
            store.save_stats(name, bundle, tag)
    return bundles


@dataclass
class _MethodResult:
    label: str
    hyperparams: MergeHyperparams
    selected: Dict[str, Any]
    validation: Evaluation
    test: Evaluation
    merged: Checkpoint
    traces: Any


def _run_method(
    config: ExperimentConfig,
    grid: MethodGrid,
    prepared: _Prepared,
    models: Sequence[Checkpoint],
    stats: Sequence[StatsBundle],
    eval_names: Sequence[str],
    selected: Dict[str, MergeHyperparams],
) -> _MethodResult:
    inherited = selected.get(grid.init) if grid.method not in CLOSED_FORM_METHODS else None
    candidates = hyperparameter_grid(grid, inherited)
    validation_sets = prepared.sets('validation', eval_names)
    outputs = []
    evaluations = []
    for candidate in candidates:
        merged, traces = merge_models(
            grid, candidate, models, stats, prepared.pretrained, default_objective(config)
        )
        outputs.append((merged, traces))
        evaluations.append(evaluate_tasks(prepared.spec, merged, validation_sets, 'validation'))
    best = select_best(evaluations)
    merged, traces = outputs[best]
    test = evaluate_tasks(prepared.spec, merged, prepared.sets('test', eval_names), 'test')
    logger.info(
        '%s: validation %.4f, test %.4f with %s',
        grid.label,
        evaluations[best].average,
        test.average,
        _describe(grid, candidates[best]),
    )
    if grid.method in CLOSED_FORM_METHODS:
        selected[grid.method] = candidates[best][0]
    return _MethodResult(
        grid.label, candidates[best][0], _describe(grid, candidates[best]), evaluations[best], test, merged, traces
    )


Row = Dict[str, Any]


def _row(method: str, accuracies: Dict[str, float], selected: Any = None, **extra: Any) -> Row:
    row: Row = {'method': method, 'test': dict(accuracies), 'selected': selected}
    row.update(extra)
    return row


def _baseline_rows(config: ExperimentConfig, prepared: _Prepared, store: ArtifactStore, seed: int) -> List[Row]:
    spec = prepared.spec
    tests = prepared.sets('test')
    with _stage('multitask'):
        multitask = train_multitask_baseline(config, spec, prepared.pretrained, prepared.tasks, seed)
        store.save_model('multitask', multitask)
    fine_tuned = {d.task_name: evaluate(spec, prepared.models[d.task_name], d) for d in tests}
    return [
        _row('pretrained', evaluate_tasks(spec, prepared.pretrained, tests, 'test').accuracies),
        _row('fine-tuned', fine_tuned),
        _row('multitask', evaluate_tasks(spec, multitask, tests, 'test').accuracies),
    ]


def _merge_rows(
    config: ExperimentConfig,
    prepared: _Prepared,
    store: ArtifactStore,
    stats: Sequence[StatsBundle],
    grids: Sequence[MethodGrid],
    selected: Optional[Dict[str, MergeHyperparams]] = None,
    gains: Optional[Dict[str, float]] = None,
) -> List[Row]:
    selected = {} if selected is None else selected
    models = [prepared.models[name] for name in prepared.names]
    rows = []
    for grid in grids:
        with _stage(f'merge:{grid.label}'):
            result = _run_method(config, grid, prepared, models, stats, prepared.names, selected)
            store.save_merged(grid.label, result.merged, result.traces)
        extra = {}
        if gains is not None and grid.method not in CLOSED_FORM_METHODS:
            extra['gain'] = result.test.average - gains[grid.init]
        rows.append(_row(result.label, result.test.accuracies, result.selected, **extra))
        if gains is not None and grid.method in CLOSED_FORM_METHODS:
            gains[grid.method] = result.test.average
    return rows


def _multitask_scenario(config: ExperimentConfig, seed: int, store: ArtifactStore) -> Tuple[List[str], List[Row]]:
    prepared = _prepare(config, seed, store)
    stats = _stats(config, prepared, store, seed)
    rows = _baseline_rows(config, prepared, store, seed)
    rows += _merge_rows(config, prepared, store, stats, config.methods)
    return prepared.names, rows


def _intermediate_scenario(config: ExperimentConfig, seed: int, store: ArtifactStore) -> Tuple[List[str], List[Row]]:
    prepared = _prepare(config, seed, store)
    stats = _stats(config, prepared, store, seed)
    spec = prepared.spec
    by_name = dict(zip(prepared.names, stats))
    target = config.target
    target_test = prepared.sets('test', [target])
    columns = list(config.intermediates)

    fine_tuned = evaluate_tasks(spec, prepared.models[target], target_test, 'test').average
    rows = [_row('fine-tuned', {name: fine_tuned for name in columns})]
    multitask = {}
    for name in columns:
        pair = [splits for splits in prepared.tasks if splits['train'].task_name in (target, name)]
        with _stage(f'multitask:{name}'):
            joint = train_multitask_baseline(config, spec, prepared.pretrained, pair, seed)
            store.save_model(f'multitask.{name}', joint)
        multitask[name] = evaluate_tasks(spec, joint, target_test, 'test').average
    rows.append(_row('multitask', multitask))

    selected: Dict[str, Dict[str, MergeHyperparams]] = {name: {} for name in columns}
    for grid in config.methods:
        accuracies = {}
        selected_by_column = {}
        for name in columns:
            label = f'{grid.label}:{name}'
            with _stage(f'merge:{label}'):
                result = _run_method(
                    config,
                    grid,
                    prepared,
                    [prepared.models[target], prepared.models[name]],
                    [by_name[target], by_name[name]],
                    [target],
                    selected[name],
                )
                store.save_merged(label, result.merged, result.traces)
            accuracies[name] = result.test.average
            selected_by_column[name] = result.selected
        rows.append(_row(grid.label, accuracies, selected_by_column))
    return columns, rows


def _grid_scenario(config: ExperimentConfig, seed: int, store: ArtifactStore) -> Tuple[List[str], List[Row]]:
    prepared = _prepare(config, seed, store)
    stats = _stats(config, prepared, store, seed)
    # the input Gram says nothing about frozen weights
    skip_regmean = config.finetune == 'scales'
    inits = [init for init in config.grid_inits if not (skip_regmean and init == 'regmean')]
    objectives = [o for o in config.grid_objectives if not (skip_regmean and o is ObjectiveKind.regmean)]

    grids = []
    for init in inits:
        if init in CLOSED_FORM_METHODS:
            grids.append(MethodGrid(method=init, name=f'init:{init}'))  # type: ignore[arg-type]
    for init, objective in itertools.product(inits, objectives):
        grids.append(
            MethodGrid(
                method='mats',
                name=f'{init}+{objective.value}',
                init=init,
                objective=objective,
                cg_iters=config.cg_iters,
            )
        )
    # inits without a closed form (pretrained, zero) are their own baseline
    gains = {init: _init_average(init, prepared) for init in inits if init not in CLOSED_FORM_METHODS}
    rows = _merge_rows(config, prepared, store, stats, grids, gains=gains)
    return prepared.names, rows


def _init_average(init: str, prepared: _Prepared) -> float:
    tests = prepared.sets('test')
    if init == 'pretrained':
        return evaluate_tasks(prepared.spec, prepared.pretrained, tests, 'test').average
    first = prepared.models[prepared.names[0]]
    zero = first.replace({name: np.zeros_like(first[name]) for name in first.names})
    return evaluate_tasks(prepared.spec, zero, tests, 'test').average


def _ablation_scenario(config: ExperimentConfig, seed: int, store: ArtifactStore) -> Tuple[List[str], List[Row]]:
    prepared = _prepare(config, seed, store)
    baseline = _stats(config, prepared, store, seed)
    selected: Dict[str, MergeHyperparams] = {}
    rows = _merge_rows(config, prepared, store, baseline, [MethodGrid(method='task_arithmetic')], selected)
    for mode, split in itertools.product(FisherMode, ('train', 'validation')):
        tag = f'.{mode.value}.{split}'
        stats_config = config.stats.model_copy(update={'fisher_mode': mode, 'split': split})
        stats = _stats(config, prepared, store, seed, stats_config, tag)
        grids = [
            MethodGrid(method='diag_fisher', name=f'diag_fisher/{mode.value}/{split}'),
            MethodGrid(
                method='mats',
                name=f'block_fisher/{mode.value}/{split}',
                objective=ObjectiveKind.block_fisher_kfac,
                cg_iters=config.cg_iters,
            ),
        ]
        rows += _merge_rows(config, prepared, store, stats, grids, selected)
    return prepared.names, rows


_SCENARIOS: Dict[str, Callable[[ExperimentConfig, int, ArtifactStore], Tuple[List[str], List[Row]]]] = {
    'multitask': _multitask_scenario,
    'intermediate_task': _intermediate_scenario,
    'init_objective_grid': _grid_scenario,
    'fisher_ablation': _ablation_scenario,
}


def _aggregate(per_seed: Sequence[List[Row]], columns: Sequence[str]) -> List[Row]:
    rows = []
    for index, first in enumerate(per_seed[0]):
        seed_rows = [rows_[index] for rows_ in per_seed]
        row = _row(
            first['method'],
            {column: float(np.mean([r['test'][column] for r in seed_rows])) for column in columns},
            [r['selected'] for r in seed_rows],
        )
        if 'gain' in first:
            row['gain'] = float(np.mean([r['gain'] for r in seed_rows]))
        rows.append(row)
    return rows


def _merged_param_count(spec: MlpSpec, finetune: str) -> Tuple[int, int]:
    shapes = spec.param_shapes()
    total = sum(int(np.prod(shape)) for _, shape in shapes.values())
    if finetune == 'full':
        return total, total
    return sum(int(np.prod(shape)) for role, shape in shapes.values() if role is Role.vector), total


def flops_table(config: ExperimentConfig) -> Dict[str, Any]:
    """
    FLOPs of every method for this experiment's model and for the two reference models. Entries a method
    cannot be estimated for are `None`.
    """
    spec = model_spec(config)
    merged, total = _merged_param_count(spec, config.finetune)
    layers = tuple((d_in + int(spec.use_bias), k) for d_in, k in spec.layer_dims)
    cg_iters = max([*config.cg_iters, *(i for grid in config.methods for i in grid.cg_iters)])
    desk = FlopsModelSpec(
        models=2 if config.scenario == 'intermediate_task' else config.suite.num_tasks,
        params=merged,
        layers=layers if config.finetune == 'full' else None,
        cg_iters=cg_iters,
        train_batches=max(config.multitask.steps, 1),
        batch_size=config.multitask.batch_size,
        seq_len=1.0,
        train_params=total,
    )
    specs = {'desk': desk, 'ia3': IA3_FLOPS_SPEC, 'full': FULL_MODEL_FLOPS_SPEC}
    rows = []
    for method in FLOPS_METHODS:
        values: Dict[str, Optional[float]] = {}
        for column, flops_spec in specs.items():
            try:
                values[column] = flops_estimate(method, flops_spec)
            except SpecError:
                values[column] = None
        rows.append({'method': method, 'values': values})
    return {'columns': list(specs), 'rows': rows}


_FOOTNOTES = (
    'Multitask training of the reference models counts one FLOP per parameter per token; the desk column '
    'uses three and one token per example.',
    'Full-model TIES, RegMean and MaTS counts are evaluated directly from their formulas with the listed layer '
    'shapes, including 48 layers of shape 2816 x 38.',
    'RegMean and MaTS have no (IA)³ estimate: scale vectors have no linear layer shapes.',
)


def run_scenario(config: ExperimentConfig) -> Dict[str, Path]:
    """
    Run the configured scenario for every seed and write `results.json`, `report.md` and `report.csv` to
    `config.output_dir`. Per-seed artifacts stay in `seed{n}/` whether or not a later stage fails.

    Raises:
        StageError: naming the stage that failed.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / 'config.json', config.model_dump(mode='json'))
    runner = _SCENARIOS[config.scenario]
    columns: List[str] = []
    per_seed = []
    for seed in config.seeds:
        logger.info('running %s with seed %d', config.scenario, seed)
        columns, rows = runner(config, seed, ArtifactStore(out_dir / f'seed{seed}'))
        per_seed.append(rows)

    results = {
        'scenario': config.scenario,
        'finetune': config.finetune,
        'seeds': list(config.seeds),
        'columns': columns,
        'chance': 1.0 / config.suite.classes,
        'rows': _aggregate(per_seed, columns),
        'flops': flops_table(config),
        'footnotes': list(_FOOTNOTES),
    }
    with _stage('report'):
        paths = {'results': out_dir / 'results.json', 'markdown': out_dir / 'report.md', 'csv': out_dir / 'report.csv'}
        save_results(paths['results'], results)
        markdown, csv_text = emit_report(results)
        paths['markdown'].write_text(markdown)
        paths['csv'].write_text(csv_text)
    return paths


def save_results(path: Union[str, Path], results: Dict[str, Any]) -> None:
    _write_json(Path(path), results)


def load_results(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'results file {str(path)!r} does not exist')
    return json.loads(path.read_text())  # type: ignore[no-any-return]


def _percent(value: float) -> str:
    return f'{100 * value:.1f}'


def _row_average(row: Row, columns: Sequence[str]) -> float:
    if not columns:
        return float('nan')
    return sum(row['test'][c] for c in columns) / len(columns)


def _flops_cell(value: Optional[float]) -> str:
    return '–' if value is None else format_sig(value)


_FLOPS_HEADERS = {'desk': 'desk', 'ia3': '(IA)³', 'full': 'full model'}


def emit_report(results: Dict[str, Any]) -> Tuple[str, str]:
    """
    Render results as a markdown report and a CSV table.

    Markdown shows accuracies as percentages rounded to one decimal, with the FLOPs table and its footnotes
    appended; the CSV holds the exact fractions. Each row's average is the mean of its task columns.

    ```py title="emit_report"
    from subspace_merging import emit_report

    results = {
        'scenario': 'multitask',
        'columns': ['a', 'b'],
        'rows': [{'method': 'average', 'test': {'a': 0.5, 'b': 0.75}}],
    }
    markdown, csv_text = emit_report(results)
    assert '| average | 50.0 | 75.0 | 62.5 |' in markdown
    assert csv_text.splitlines()[1] == 'average,0.5,0.75,0.625'
    ```
    """
    columns = list(results.get('columns', []))
    rows = list(results.get('rows', []))
    with_gain = any('gain' in row for row in rows)
    headers = ['method', *columns, 'average'] + (['gain'] if with_gain else [])

    title = results.get('scenario', 'results')
    if results.get('finetune'):
        title += f" ({results['finetune']} fine-tuning"
        seeds = results.get('seeds')
        title += f", seeds {', '.join(str(s) for s in seeds)})" if seeds else ')'
    lines = [f'# {title}', '', '| ' + ' | '.join(headers) + ' |', '|' + '---|' * len(headers)]
    for row in rows:
        cells = [row['method'], *(_percent(row['test'][c]) for c in columns), _percent(_row_average(row, columns))]
        if with_gain:
            cells.append(f"{100 * row['gain']:+.1f}" if 'gain' in row else '')
        lines.append('| ' + ' | '.join(cells) + ' |')
    if 'chance' in results:
        lines += ['', f"Random chance: {_percent(results['chance'])}"]

    flops = results.get('flops')
    if flops is not None:
        flops_columns = flops['columns']
        lines += ['', '## FLOPs', '']
        lines.append('| method | ' + ' | '.join(_FLOPS_HEADERS.get(c, c) for c in flops_columns) + ' |')
        lines.append('|' + '---|' * (len(flops_columns) + 1))
        for flops_row in flops['rows']:
            cells = [flops_row['method'], *(_flops_cell(flops_row['values'][c]) for c in flops_columns)]
            lines.append('| ' + ' | '.join(cells) + ' |')
        footnotes = results.get('footnotes', [])
        if footnotes:
            lines.append('')
            lines += [f'{index}. {note}' for index, note in enumerate(footnotes, start=1)]
    markdown = '\n'.join(lines) + '\n'

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(headers)
    for row in rows:
        values = [row['method'], *(format_float(row['test'][c]) for c in columns)]
        values.append(format_float(_row_average(row, columns)))
        if with_gain:
            values.append(format_float(row['gain']) if 'gain' in row else '')
        writer.writerow(values)
    return markdown, buffer.getvalue()
