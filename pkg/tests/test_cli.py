import json
from pathlib import Path

import pytest

from subspace_merging import (
    Checkpoint,
    ExperimentConfig,
    MethodGrid,
    SuiteConfig,
    TrainConfig,
    __version__,
    cli_dispatch,
    load,
    main,
)


@pytest.fixture(name='config_path')
def fix_config_path(tmp_path):
    config = ExperimentConfig(
        suite=SuiteConfig(num_tasks=2, classes=3, input_dim=4, train_size=30, validation_size=15, test_size=15),
        hidden=(5,),
        pretrain=TrainConfig(steps=10, batch_size=8),
        train=TrainConfig(steps=5, batch_size=8),
        multitask=TrainConfig(steps=5, batch_size=8),
        methods=(MethodGrid(method='average'), MethodGrid(method='mats', lambda_scale=(1.0,), cg_iters=(4,))),
        seeds=(3,),
        cg_iters=(4,),
        output_dir=str(tmp_path / 'out'),
    )
    path = tmp_path / 'config.json'
    path.write_text(config.model_dump_json())
    return path


@pytest.mark.parametrize(
    'args,expected',
    [
        (['--method', 'averaging', '--models', '8', '--params', '282000'], '2256000'),
        (['--method', 'mats', '--models', '2', '--params', '6', '--layer', '2,3', '--cg-iters', '4'], '370'),
        (['--method', 'averaging', '--preset', 'ia3'], '2256000'),
        (['--method', 'averaging', '--preset', 'ia3', '--models', '2'], '564000'),
    ],
    ids=['explicit', 'layers', 'preset', 'preset-override'],
)
def test_flops(capsys, args, expected):
    assert cli_dispatch(['flops', *args]) == 0
    assert capsys.readouterr().out == expected + '\n'


@pytest.mark.parametrize(
    'args,message',
    [
        ([], 'a command is required'),
        (['flops', '--method', 'averaging', '--colour'], 'unrecognized arguments: --colour'),
        (['flops', '--method', 'median'], "invalid choice: 'median'"),
        (['flops', '--method', 'averaging', '--models', '2'], 'flops needs --models and --params, or a --preset'),
        (['flops', '--method', 'regmean', '--models', '2', '--params', '6', '--layer', '2x3'], 'must look like D,K'),
        (['report'], 'report needs --results or --out-dir'),
        (['run'], 'the following arguments are required: --config'),
    ],
    ids=['no-command', 'unknown-flag', 'bad-choice', 'missing-params', 'bad-layer', 'report', 'run-config'],
)
def test_usage_errors(capsys, args, message):
    assert cli_dispatch(args) == 1
    assert message in capsys.readouterr().err


def test_runtime_errors(capsys, tmp_path):
    assert cli_dispatch(['flops', '--method', 'regmean', '--preset', 'ia3']) == 2
    assert 'regmean FLOPs need the linear layer shapes' in capsys.readouterr().err

    assert cli_dispatch(['report', '--out-dir', str(tmp_path)]) == 2
    assert 'does not exist' in capsys.readouterr().err

    assert cli_dispatch(['run', '--config', str(tmp_path / 'missing.json')]) == 2
    assert "config file '" in capsys.readouterr().err


def test_main_exits_with_code(mocker):
    dispatch = mocker.patch('subspace_merging._cli.cli_dispatch', return_value=2)
    with pytest.raises(SystemExit) as e:
        main()
    assert e.value.code == 2
    dispatch.assert_called_once_with()


def test_version(capsys):
    assert cli_dispatch(['--version']) == 0
    assert capsys.readouterr().out.strip() == __version__


def test_step_by_step(capsys, tmp_path, config_path):
    common = ['--config', str(config_path)]
    seed_dir = tmp_path / 'out' / 'seed3'

    assert cli_dispatch(['gen-data', *common]) == 0
    assert capsys.readouterr().out.strip() == str(seed_dir / 'data')
    assert (seed_dir / 'data' / 'pretrain.train.ckpt').is_file()
    assert (seed_dir / 'data' / 'task1.test.ckpt').is_file()

    assert cli_dispatch(['train', *common, '--multitask']) == 0
    assert capsys.readouterr().out.splitlines() == [
        str(seed_dir / 'models' / 'task0.ckpt'),
        str(seed_dir / 'models' / 'task1.ckpt'),
        str(seed_dir / 'models' / 'multitask.ckpt'),
    ]

    assert cli_dispatch(['stats', *common, '--fisher-mode', 'true']) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2

    assert cli_dispatch(['merge', *common, '--method', 'task_arithmetic', '--lambda', '0.5']) == 0
    merged_path = Path(capsys.readouterr().out.strip())
    assert merged_path == seed_dir / 'merged' / 'task_arithmetic.ckpt'
    merged = load(merged_path)
    assert isinstance(merged, Checkpoint)
    assert merged.provenance['method'] == 'task_arithmetic'

    assert cli_dispatch(['merge', *common, '--method', 'mats', '--objective', 'diag_fisher', '--cg-iters', '3']) == 0
    capsys.readouterr()
    traces = json.loads((seed_dir / 'merged' / 'mats.traces.json').read_text())
    assert sorted(traces) == ['layers.0.weight', 'layers.1.weight']
    assert all(trace['iterations'] <= 3 for trace in traces.values())

    assert cli_dispatch(['eval', *common, '--checkpoint', str(merged_path), '--eval-split', 'test']) == 0
    evaluation = json.loads(capsys.readouterr().out)
    assert evaluation['split'] == 'test'
    assert sorted(evaluation['accuracies']) == ['task0', 'task1']
    assert 0 <= evaluation['average'] <= 1


def test_eval_rejects_non_checkpoint(capsys, tmp_path, config_path):
    common = ['--config', str(config_path)]
    assert cli_dispatch(['gen-data', *common]) == 0
    capsys.readouterr()
    not_a_checkpoint = tmp_path / 'out' / 'seed3' / 'results.json'
    not_a_checkpoint.write_text('{}')
    assert cli_dispatch(['eval', *common, '--checkpoint', str(not_a_checkpoint)]) == 2
    assert capsys.readouterr().err.startswith('subspace-merging: error: ')


def test_run_and_report(capsys, tmp_path, config_path):
    assert cli_dispatch(['run', '--config', str(config_path), '--out-dir', str(tmp_path / 'run')]) == 0
    report = tmp_path / 'run' / 'report.md'
    assert capsys.readouterr().out.strip() == str(report)
    original = report.read_text()
    assert original.startswith('# multitask (full fine-tuning, seeds 3)')
    assert not (tmp_path / 'out').exists()

    report.unlink()
    (tmp_path / 'run' / 'report.csv').unlink()
    assert cli_dispatch(['report', '--out-dir', str(tmp_path / 'run')]) == 0
    assert capsys.readouterr().out == original
    assert report.read_text() == original
    assert (tmp_path / 'run' / 'report.csv').read_text().startswith('method,task0,task1,average\n')


def test_run_single_seed(capsys, tmp_path, config_path):
    assert cli_dispatch(['run', '--config', str(config_path), '--seed', '7', '--cg-iters', '2']) == 0
    capsys.readouterr()
    results = json.loads((tmp_path / 'out' / 'results.json').read_text())
    assert results['seeds'] == [7]
    mats = next(row for row in results['rows'] if row['method'] == 'mats')
    assert mats['selected'] == [{'lambda_scale': 1.0, 'cg_iters': 2}]
    assert (tmp_path / 'out' / 'seed7' / 'models' / 'pretrained.ckpt').is_file()


def test_merge_without_stats(capsys, tmp_path, config_path):
    common = ['--config', str(config_path)]
    assert cli_dispatch(['gen-data', *common]) == 0
    assert cli_dispatch(['train', *common]) == 0
    capsys.readouterr()
    assert not (tmp_path / 'out' / 'seed3' / 'stats').exists()

    for method in ('average', 'task_arithmetic', 'ties'):
        assert cli_dispatch(['merge', *common, '--method', method]) == 0
        assert Path(capsys.readouterr().out.strip()).is_file()

    assert cli_dispatch(['merge', *common, '--method', 'diag_fisher']) == 2
    assert 'missing artifact' in capsys.readouterr().err
