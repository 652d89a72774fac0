import json
import logging
import math
from pathlib import Path

import numpy as np
import pytest

from subspace_merging import (
    LAMBDA_GRID,
    ArtifactStore,
    Checkpoint,
    ConfigError,
    ContractError,
    Evaluation,
    ExperimentConfig,
    FisherMode,
    LayerStats,
    MergeHyperparams,
    MethodGrid,
    ObjectiveKind,
    StageError,
    StatsBundle,
    SuiteConfig,
    TaskDataset,
    TrainConfig,
    default_objective,
    derive_seed,
    emit_report,
    evaluate_tasks,
    flops_table,
    hyperparameter_grid,
    init_params,
    load,
    load_experiment_config,
    load_results,
    merge_models,
    model_spec,
    run_scenario,
    save_results,
    select_best,
)

CONFIGS = Path(__file__).parent.parent / 'configs'

TINY_SUITE = SuiteConfig(num_tasks=3, classes=3, input_dim=4, train_size=30, validation_size=15, test_size=15)


def _tiny(tmp_path, **update):
    values = dict(
        suite=TINY_SUITE,
        hidden=(5,),
        pretrain=TrainConfig(steps=20, batch_size=8),
        train=TrainConfig(steps=10, batch_size=8),
        multitask=TrainConfig(steps=10, batch_size=8),
        methods=(
            MethodGrid(method='average'),
            MethodGrid(method='task_arithmetic', lambda_scale=(0.5, 1.0)),
            MethodGrid(method='ties', lambda_scale=(1.0,)),
            MethodGrid(method='diag_fisher'),
            MethodGrid(method='regmean'),
            MethodGrid(method='mats', cg_iters=(3, 6)),
            MethodGrid(method='mats_multi_round', cg_iters=(4,)),
        ),
        seeds=(0,),
        cg_iters=(5,),
        output_dir=str(tmp_path / 'run'),
    )
    values.update(update)
    return ExperimentConfig(**values)


def test_shipped_configs_load():
    desk = load_experiment_config(CONFIGS / 'desk_suite.json')
    assert desk.scenario == 'multitask'
    assert [grid.label for grid in desk.methods][-1] == 'mats_multi_round'
    assert desk.seeds == (0, 1, 2, 3, 4)
    intermediate = load_experiment_config(CONFIGS / 'intermediate_task.json')
    assert intermediate.target == 'target'
    assert intermediate.intermediates == ('inter_a', 'inter_b', 'inter_c')


def test_load_missing_config(tmp_path):
    with pytest.raises(ConfigError, match='does not exist'):
        load_experiment_config(tmp_path / 'nope.json')


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps({'seeds': [0], 'colour': 'blue'}))
    with pytest.raises(ValueError, match='colour'):
        load_experiment_config(path)


@pytest.mark.parametrize(
    'update,message',
    [
        ({'methods': (MethodGrid(method='average'), MethodGrid(method='average'))}, 'method labels must be unique'),
        ({'stats': {'split': 'test'}}, 'statistics may not be collected on the test split'),
        ({'seeds': (-1,)}, 'seeds must be non-negative'),
        ({'seeds': ()}, 'seeds'),
        ({'grid_inits': ('provided',)}, 'cannot use init "provided"'),
        ({'scenario': 'intermediate_task', 'target_task': 'nope'}, "unknown target task 'nope'"),
        (
            {'scenario': 'intermediate_task', 'target_task': 'task1', 'intermediate_tasks': ('task1',)},
            "'task1' cannot be an intermediate task",
        ),
        (
            {'scenario': 'intermediate_task', 'suite': {'num_tasks': 1}},
            'the intermediate_task scenario needs at least two tasks',
        ),
    ],
    ids=['labels', 'test-split', 'negative-seed', 'no-seeds', 'provided', 'target', 'intermediate', 'one-task'],
)
def test_config_validation(update, message):
    values = {'seeds': (0,), **update}
    with pytest.raises(ValueError, match=message):
        ExperimentConfig(**values)


def test_method_grid():
    assert MethodGrid(method='mats', name='custom').label == 'custom'
    assert MethodGrid(method='ties').label == 'ties'
    with pytest.raises(ValueError, match='cannot use init "provided"'):
        MethodGrid(method='mats', init='provided')


def test_intermediates_default():
    suite = SuiteConfig(num_tasks=5, task_names=('t', 'a', 'b', 'c', 'd'))
    config = ExperimentConfig(scenario='intermediate_task', suite=suite, seeds=(0,))
    assert config.target == 't'
    assert config.intermediates == ('a', 'b', 'c')
    other = config.model_copy(update={'target_task': 'b'})
    assert other.intermediates == ('t', 'a', 'c')


def test_derive_seed():
    assert derive_seed(0, 2, 1) == derive_seed(0, 2, 1)
    seeds = {derive_seed(0, 0), derive_seed(0, 1), derive_seed(1, 0), derive_seed(0, 2, 0), derive_seed(0, 2, 1)}
    assert len(seeds) == 5
    assert all(0 <= seed < 2**64 for seed in seeds)


def test_model_spec_and_objective(tmp_path):
    full = _tiny(tmp_path)
    spec = model_spec(full)
    assert spec.layer_dims == ((4, 5), (5, 3))
    assert not spec.use_scales
    assert default_objective(full) is ObjectiveKind.regmean
    scales = _tiny(tmp_path, finetune='scales')
    assert model_spec(scales).use_scales
    assert default_objective(scales) is ObjectiveKind.block_fisher_kfac


def test_evaluation_average():
    assert Evaluation('test', {'a': 0.5, 'b': 1.0}).average == 0.75
    assert math.isnan(Evaluation('test', {}).average)


def test_evaluate_tasks_checks_split():
    spec = model_spec(ExperimentConfig(suite=TINY_SUITE, hidden=(), seeds=(0,)))
    params = init_params(spec, 0)
    dataset = TaskDataset(np.zeros((2, 4)), [0, 1], 'validation', 'a', 3)
    assert evaluate_tasks(spec, params, [dataset], 'validation').split == 'validation'
    with pytest.raises(ContractError, match="asked for 'test' accuracy but 'a' data is 'validation'"):
        evaluate_tasks(spec, params, [dataset], 'test')


def test_select_best():
    candidates = [
        Evaluation('validation', {'a': 0.5}),
        Evaluation('validation', {'a': 0.75}),
        Evaluation('validation', {'a': 0.75}),
    ]
    assert select_best(candidates) == 1
    with pytest.raises(ContractError, match="selected on validation results, got 'test'"):
        select_best([*candidates, Evaluation('test', {'a': 1.0})])
    with pytest.raises(ValueError, match='nothing to select from'):
        select_best([])


def test_hyperparameter_grid():
    assert hyperparameter_grid(MethodGrid(method='average')) == [(MergeHyperparams(), None)]
    ta = hyperparameter_grid(MethodGrid(method='task_arithmetic'))
    assert [hp.lambda_scale for hp, _ in ta] == list(LAMBDA_GRID)
    ties = hyperparameter_grid(MethodGrid(method='ties', lambda_scale=(0.5, 1.0), ties_trim_fraction=(0.7, 0.8)))
    pairs = [(hp.lambda_scale, hp.ties_trim_fraction) for hp, _ in ties]
    assert pairs == [(0.5, 0.7), (0.5, 0.8), (1.0, 0.7), (1.0, 0.8)]
    regmean = hyperparameter_grid(MethodGrid(method='regmean', regmean_offdiag_scale=(0.5, 0.9)))
    assert [hp.regmean_offdiag_scale for hp, _ in regmean] == [0.5, 0.9]


def test_hyperparameter_grid_mats():
    inherited = MergeHyperparams(lambda_scale=0.3)
    grid = MethodGrid(method='mats', cg_iters=(10, 20))
    assert hyperparameter_grid(grid, inherited) == [(inherited, 10), (inherited, 20)]
    searched = hyperparameter_grid(grid)
    assert len(searched) == len(LAMBDA_GRID) * 2
    assert searched[0] == (MergeHyperparams(lambda_scale=0.1), 10)
    explicit = hyperparameter_grid(MethodGrid(method='mats', lambda_scale=(0.5,), cg_iters=(10,)), inherited)
    assert explicit == [(MergeHyperparams(lambda_scale=0.5), 10)]
    average_init = hyperparameter_grid(MethodGrid(method='mats', init='average', cg_iters=(10, 20)))
    assert average_init == [(MergeHyperparams(), 10), (MergeHyperparams(), 20)]


def test_artifact_store(tmp_path):
    store = ArtifactStore(tmp_path)
    dataset = TaskDataset(np.arange(4.0).reshape(2, 2), [0, 1], 'train', 'task a', 2)
    assert store.save_dataset(dataset) == tmp_path / 'data' / 'task_a.train.ckpt'
    assert store.load_dataset('task a', 'train').inputs.tolist() == [[0.0, 1.0], [2.0, 3.0]]

    model = Checkpoint.build({'w': np.eye(2)}, {'task': 'a'})
    store.save_model('a', model)
    assert store.load_model('a').same_values(model)

    bundle = StatsBundle({'w': LayerStats(np.ones((2, 2)), 3)}, FisherMode.true, 'train', 3, {'task': 'a'})
    assert store.save_stats('a', bundle, '.true.train') == tmp_path / 'stats' / 'a.true.train.stats'
    assert store.load_stats('a', '.true.train').fisher_mode is FisherMode.true

    path = store.save_merged('mats', model, {'w': {'iterations': 3}})
    assert path == tmp_path / 'merged' / 'mats.ckpt'
    assert json.loads((tmp_path / 'merged' / 'mats.traces.json').read_text()) == {'w': {'iterations': 3}}
    store.save_merged('average', model)
    assert not (tmp_path / 'merged' / 'average.traces.json').exists()


def test_artifact_store_errors(tmp_path):
    store = ArtifactStore(tmp_path)
    with pytest.raises(ConfigError, match='missing artifact'):
        store.load_model('nope')
    store.save_model('a', Checkpoint.build({'w': np.eye(2)}))
    store.stats_path('a').parent.mkdir(parents=True)
    store.stats_path('a').write_bytes(store.model_path('a').read_bytes())
    with pytest.raises(ContractError, match='does not hold a StatsBundle'):
        store.load_stats('a')


def test_flops_table(tmp_path):
    table = flops_table(_tiny(tmp_path))
    assert table['columns'] == ['desk', 'ia3', 'full']
    rows = {row['method']: row['values'] for row in table['rows']}
    assert rows['averaging']['desk'] == 3 * (5 * 5 + 6 * 3)
    assert rows['regmean']['ia3'] is None
    assert rows['mats']['desk'] is not None
    assert rows['mats']['full'] is not None
    scales = {row['method']: row['values'] for row in flops_table(_tiny(tmp_path, finetune='scales'))['rows']}
    assert scales['averaging']['desk'] == 3 * 8
    assert scales['mats']['desk'] is None


def test_save_load_results(tmp_path):
    save_results(tmp_path / 'results.json', {'rows': [], 'chance': 0.25})
    assert load_results(tmp_path / 'results.json') == {'rows': [], 'chance': 0.25}
    with pytest.raises(ConfigError, match='does not exist'):
        load_results(tmp_path / 'missing.json')


def test_emit_report_empty():
    markdown, csv_text = emit_report({'scenario': 'multitask', 'columns': ['a'], 'rows': []})
    assert markdown == '# multitask\n\n| method | a | average |\n|---|---|---|\n'
    assert csv_text == 'method,a,average\n'


def test_emit_report_gain_and_flops():
    results = {
        'scenario': 'init_objective_grid',
        'finetune': 'full',
        'seeds': [0, 1],
        'columns': ['a', 'b'],
        'chance': 0.25,
        'rows': [
            {'method': 'init:average', 'test': {'a': 0.5, 'b': 0.5}},
            {'method': 'average+regmean', 'test': {'a': 0.75, 'b': 0.5}, 'gain': 0.125},
        ],
        'flops': {
            'columns': ['desk', 'ia3'],
            'rows': [{'method': 'regmean', 'values': {'desk': 1234.0, 'ia3': None}}],
        },
        'footnotes': ['first note'],
    }
    markdown, csv_text = emit_report(results)
    lines = markdown.splitlines()
    assert lines[0] == '# init_objective_grid (full fine-tuning, seeds 0, 1)'
    assert '| method | a | b | average | gain |' in lines
    assert '| init:average | 50.0 | 50.0 | 50.0 |  |' in lines
    assert '| average+regmean | 75.0 | 50.0 | 62.5 | +12.5 |' in lines
    assert 'Random chance: 25.0' in lines
    assert '| method | desk | (IA)³ |' in lines
    assert '| regmean | 1.2E3 | – |' in lines
    assert lines[-1] == '1. first note'
    assert csv_text.splitlines() == [
        'method,a,b,average,gain',
        'init:average,0.5,0.5,0.5,',
        'average+regmean,0.75,0.5,0.625,0.125',
    ]


def _read_results(config):
    return json.loads((Path(config.output_dir) / 'results.json').read_text())


def test_run_multitask_scenario(tmp_path):
    config = _tiny(tmp_path)
    paths = run_scenario(config)
    assert set(paths) == {'results', 'markdown', 'csv'}
    assert all(path.is_file() for path in paths.values())

    results = load_results(paths['results'])
    assert results['columns'] == ['task0', 'task1', 'task2']
    methods = [row['method'] for row in results['rows']]
    assert methods == [
        'pretrained',
        'fine-tuned',
        'multitask',
        'average',
        'task_arithmetic',
        'ties',
        'diag_fisher',
        'regmean',
        'mats',
        'mats_multi_round',
    ]
    for row in results['rows']:
        assert all(0.0 <= value <= 1.0 for value in row['test'].values())
    selected = {row['method']: row['selected'][0] for row in results['rows']}
    assert selected['task_arithmetic']['lambda_scale'] in (0.5, 1.0)
    assert selected['mats']['lambda_scale'] == selected['task_arithmetic']['lambda_scale']
    assert selected['mats']['cg_iters'] in (3, 6)
    assert results['chance'] == 1 / 3

    run = Path(config.output_dir)
    assert (run / 'config.json').is_file()
    assert (run / 'seed0' / 'models' / 'pretrained.ckpt').is_file()
    assert (run / 'seed0' / 'models' / 'multitask.ckpt').is_file()
    assert (run / 'seed0' / 'data' / 'task1.validation.ckpt').is_file()
    assert (run / 'seed0' / 'stats' / 'task2.stats').is_file()
    assert (run / 'seed0' / 'merged' / 'mats.traces.json').is_file()
    assert not (run / 'seed0' / 'merged' / 'average.traces.json').exists()

    markdown = paths['markdown'].read_text()
    assert markdown.startswith('# multitask (full fine-tuning, seeds 0)\n')
    assert '## FLOPs' in markdown
    assert paths['csv'].read_text().splitlines()[0] == 'method,task0,task1,task2,average'


def _artifacts(root):
    return {path.relative_to(root).as_posix(): path.read_bytes() for path in sorted(root.rglob('*')) if path.is_file()}


def test_run_scenario_is_deterministic(tmp_path):
    methods = (MethodGrid(method='task_arithmetic', lambda_scale=(0.5, 1.0)), MethodGrid(method='mats', cg_iters=(4,)))
    first = _tiny(tmp_path / 'first', methods=methods, seeds=(0, 1))
    second = _tiny(tmp_path / 'second', methods=methods, seeds=(0, 1))
    run_scenario(first)
    run_scenario(second)
    assert _read_results(first) == _read_results(second)
    assert _read_results(first)['seeds'] == [0, 1]

    first_files = _artifacts(Path(first.output_dir))
    second_files = _artifacts(Path(second.output_dir))
    assert sorted(first_files) == sorted(second_files)
    # config.json records output_dir, every other artifact must match byte for byte
    first_files.pop('config.json')
    assert {name for name, data in first_files.items() if second_files[name] != data} == set()
    for name in ('seed0/models/task1.ckpt', 'seed1/stats/task2.stats', 'seed1/merged/mats.ckpt', 'report.md'):
        assert name in first_files


def test_desk_suite_mats_beats_averaging(tmp_path):
    desk = load_experiment_config(CONFIGS / 'desk_suite.json')
    config = desk.model_copy(
        update={
            'suite': desk.suite.model_copy(update={'train_size': 200, 'validation_size': 100, 'test_size': 200}),
            'pretrain': desk.pretrain.model_copy(update={'steps': 300}),
            'train': desk.train.model_copy(update={'steps': 150}),
            'multitask': desk.multitask.model_copy(update={'steps': 150}),
            'methods': (
                MethodGrid(method='average'),
                MethodGrid(method='task_arithmetic', lambda_scale=(0.3, 0.6, 1.0)),
                MethodGrid(method='mats', init='task_arithmetic', cg_iters=(10, 30)),
            ),
            'seeds': (0, 1, 2),
            'output_dir': str(tmp_path / 'desk'),
        }
    )
    results = load_results(run_scenario(config)['results'])
    means = {row['method']: float(np.mean(list(row['test'].values()))) for row in results['rows']}
    assert set(means) == {'pretrained', 'fine-tuned', 'multitask', 'average', 'task_arithmetic', 'mats'}
    assert results['columns'] == [f'task{i}' for i in range(8)]
    # three seeds of 200 test examples per task, accuracies this close are within sampling noise
    assert means['mats'] >= means['average'] - 0.02
    merged = {name: value for name, value in means.items() if name != 'pretrained'}
    assert all(value > results['chance'] for value in merged.values()), means


def test_run_intermediate_scenario(tmp_path):
    suite = TINY_SUITE.model_copy(update={'num_tasks': 4, 'task_names': ('target', 'x', 'y', 'z')})
    methods = (MethodGrid(method='average'), MethodGrid(method='mats', cg_iters=(4,)))
    config = _tiny(
        tmp_path,
        scenario='intermediate_task',
        suite=suite,
        methods=methods,
        target_train_size=10,
        intermediate_tasks=('y', 'x'),
    )
    results = load_results(run_scenario(config)['results'])
    assert results['columns'] == ['y', 'x']
    assert [row['method'] for row in results['rows']] == ['fine-tuned', 'multitask', 'average', 'mats']
    fine_tuned = results['rows'][0]['test']
    assert fine_tuned['y'] == fine_tuned['x']
    assert set(results['rows'][3]['selected'][0]) == {'y', 'x'}
    assert (Path(config.output_dir) / 'seed0' / 'merged' / 'mats_y.ckpt').is_file()
    assert (Path(config.output_dir) / 'seed0' / 'models' / 'multitask.x.ckpt').is_file()


def test_run_grid_scenario(tmp_path):
    config = _tiny(
        tmp_path,
        scenario='init_objective_grid',
        grid_inits=('average', 'zero'),
        grid_objectives=(ObjectiveKind.average, ObjectiveKind.diag_fisher),
    )
    results = load_results(run_scenario(config)['results'])
    rows = {row['method']: row for row in results['rows']}
    assert list(rows) == [
        'init:average',
        'average+average',
        'average+diag_fisher',
        'zero+average',
        'zero+diag_fisher',
    ]
    assert 'gain' not in rows['init:average']
    average = sum(rows['init:average']['test'].values()) / 3
    expected = sum(rows['average+diag_fisher']['test'].values()) / 3 - average
    assert rows['average+diag_fisher']['gain'] == pytest.approx(expected)
    assert 'gain' in rows['zero+average']
    assert '| gain |' in Path(config.output_dir, 'report.md').read_text()


def test_run_fisher_ablation(tmp_path):
    results = load_results(run_scenario(_tiny(tmp_path, scenario='fisher_ablation'))['results'])
    assert [row['method'] for row in results['rows']] == [
        'task_arithmetic',
        'diag_fisher/empirical/train',
        'block_fisher/empirical/train',
        'diag_fisher/empirical/validation',
        'block_fisher/empirical/validation',
        'diag_fisher/true/train',
        'block_fisher/true/train',
        'diag_fisher/true/validation',
        'block_fisher/true/validation',
    ]
    stats_dir = Path(tmp_path, 'run', 'seed0', 'stats')
    assert (stats_dir / 'task0.true.validation.stats').is_file()
    assert (stats_dir / 'task0.empirical.train.stats').is_file()


def test_run_scales_finetuning(tmp_path):
    methods = (MethodGrid(method='diag_fisher'), MethodGrid(method='mats', init='average', cg_iters=(4,)))
    config = _tiny(tmp_path, finetune='scales', methods=methods)
    results = load_results(run_scenario(config)['results'])
    assert results['finetune'] == 'scales'
    mats = json.loads(Path(config.output_dir, 'seed0', 'merged', 'mats.traces.json').read_text())
    assert {'layers.0.scale', 'layers.1.scale'} <= set(mats)
    store = ArtifactStore(Path(config.output_dir, 'seed0'))
    merged, pretrained = load(store.merged_path('mats')), store.load_model('pretrained')
    # frozen weights are shared by every fine-tuned model
    for name in ('layers.0.weight', 'layers.1.weight'):
        assert np.allclose(merged[name], pretrained[name], rtol=0, atol=1e-8)


def test_stage_error_names_the_stage(tmp_path):
    config = _tiny(tmp_path, suite=TINY_SUITE.model_copy(update={'classes': 5}))
    with pytest.raises(StageError, match="stage 'gen-data' failed") as e:
        run_scenario(config)
    assert e.value.stage == 'gen-data'
    assert isinstance(e.value.cause, ConfigError)
    assert (Path(config.output_dir) / 'config.json').is_file()
    assert not (Path(config.output_dir) / 'results.json').exists()


def test_merge_models_checks_operators_at_debug_level(caplog, monkeypatch):
    checked = []
    monkeypatch.setattr('subspace_merging._solver.check_system', lambda system, rng: checked.append(system.name))
    rng = np.random.default_rng(0)
    models = [Checkpoint.build({'w': rng.standard_normal((3, 2))}, {'task': task}) for task in 'ab']
    stats = [
        StatsBundle({'w': LayerStats(np.ones((3, 2)), 4, input_gram=np.eye(3))}, 'empirical', 'validation', 4, {})
        for _ in models
    ]
    grid = MethodGrid(method='mats', init='average', cg_iters=(3,))

    merge_models(grid, (MergeHyperparams(), 3), models, stats, models[0], ObjectiveKind.regmean)
    assert checked == []
    caplog.set_level(logging.DEBUG, logger='subspace_merging.harness')
    merge_models(grid, (MergeHyperparams(), 3), models, stats, models[0], ObjectiveKind.regmean)
    assert checked == ['w']
