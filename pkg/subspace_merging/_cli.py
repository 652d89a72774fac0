from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Sequence

from ._checkpoint import Checkpoint, FisherMode, load
from ._errors import ContractError, MergeToolkitError, UsageError
from ._fisher import collect_stats
from ._flops import FLOPS_METHODS, FULL_MODEL_FLOPS_SPEC, IA3_FLOPS_SPEC, FlopsModelSpec, flops_estimate
from ._harness import (
    MERGE_METHODS,
    ArtifactStore,
    ExperimentConfig,
    MethodGrid,
    default_objective,
    derive_seed,
    emit_report,
    evaluate_tasks,
    fine_tune,
    generate_data,
    load_experiment_config,
    load_results,
    merge_models,
    model_spec,
    pretrain_model,
    run_scenario,
    train_multitask_baseline,
)
from ._merge import CLOSED_FORM_METHODS, STATS_FREE_METHODS, MergeHyperparams
from ._solver import INIT_METHODS, ObjectiveKind
from .version import VERSION

__all__ = 'cli_dispatch', 'main'

logger = logging.getLogger('subspace_merging.cli')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def _common(parser: argparse.ArgumentParser, *, config_required: bool = False) -> None:
    parser.add_argument('--config', type=Path, required=config_required, help='experiment config (JSON)')
    parser.add_argument('--seed', type=int, help='run a single seed instead of the configured ones')
    parser.add_argument('--out-dir', type=Path, help='output directory, overrides the config')
    parser.add_argument('--fisher-mode', choices=[m.value for m in FisherMode], help='empirical or true Fisher')
    parser.add_argument('--split', choices=['train', 'validation'], help='split statistics are collected on')
    parser.add_argument('--cg-iters', type=int, help='conjugate gradient iterations')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for info, -vv for debug logging')


def _build_parser() -> _Parser:
    parser = _Parser(prog='subspace-merging', description='Merge models by matching their task parameter subspaces.')
    parser.add_argument('--version', action='version', version=VERSION)
    commands = parser.add_subparsers(dest='command', parser_class=_Parser)

    _common(commands.add_parser('gen-data', help='generate the synthetic task suite'))

    train = commands.add_parser('train', help='pretrain and fine-tune one model per task')
    _common(train)
    train.add_argument('--multitask', action='store_true', help='also train the multitask baseline')

    _common(commands.add_parser('stats', help='collect Fisher and Gram statistics for every task model'))

    merge = commands.add_parser('merge', help='merge the task models')
    _common(merge)
    merge.add_argument('--method', choices=MERGE_METHODS, required=True)
    merge.add_argument('--objective', choices=[k.value for k in ObjectiveKind], help='objective of mats merges')
    merge.add_argument('--init', choices=[i for i in INIT_METHODS if i != 'provided'], default='task_arithmetic')
    merge.add_argument('--lambda', dest='lambda_scale', type=float, default=1.0, help='task vector scale')

    evaluate = commands.add_parser('eval', help='accuracy of a checkpoint on every task')
    _common(evaluate)
    evaluate.add_argument('--checkpoint', type=Path, required=True)
    evaluate.add_argument('--eval-split', choices=['validation', 'test'], default='validation')

    flops = commands.add_parser('flops', help='estimate the FLOPs of a merge')
    flops.add_argument('--method', choices=FLOPS_METHODS, required=True)
    flops.add_argument('--preset', choices=['full', 'ia3'], help='start from a reference model')
    flops.add_argument('--models', type=int)
    flops.add_argument('--params', type=int)
    flops.add_argument('--layer', action='append', default=[], metavar='D,K', help='linear layer shape, repeatable')
    flops.add_argument('--cg-iters', type=int)
    flops.add_argument('--train-batches', type=int)
    flops.add_argument('--batch-size', type=int)
    flops.add_argument('--seq-len', type=float)
    flops.add_argument('--multitask-factor', type=float)
    flops.add_argument('-v', '--verbose', action='count', default=0)

    _common(commands.add_parser('run', help='run a full scenario and write the report'), config_required=True)

    report = commands.add_parser('report', help='re-render the report from results.json')
    report.add_argument('--results', type=Path, help='results file, defaults to <out-dir>/results.json')
    report.add_argument('--out-dir', type=Path)
    report.add_argument('-v', '--verbose', action='count', default=0)
    return parser


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        config = load_experiment_config(args.config)
    else:
        config = ExperimentConfig(seeds=(0 if args.seed is None else args.seed,))
    update: Dict[str, Any] = {}
    if args.seed is not None:
        update['seeds'] = (args.seed,)
    if args.out_dir is not None:
        update['output_dir'] = str(args.out_dir)
    stats_update: Dict[str, Any] = {}
    if args.fisher_mode is not None:
        stats_update['fisher_mode'] = FisherMode(args.fisher_mode)
    if args.split is not None:
        stats_update['split'] = args.split
    if stats_update:
        update['stats'] = config.stats.model_copy(update=stats_update)
    if args.cg_iters is not None:
        update['cg_iters'] = (args.cg_iters,)
        update['methods'] = tuple(g.model_copy(update={'cg_iters': (args.cg_iters,)}) for g in config.methods)
    return config.model_copy(update=update)


def _store(config: ExperimentConfig) -> ArtifactStore:
    return ArtifactStore(Path(config.output_dir) / f'seed{config.seeds[0]}')


def _gen_data(args: argparse.Namespace) -> int:
    config = _experiment(args)
    store = _store(config)
    tasks, pretrain = generate_data(config, config.seeds[0])
    for splits in [*tasks, pretrain]:
        for dataset in splits.values():
            store.save_dataset(dataset)
    print(store.root / 'data')
    return EXIT_OK


def _train(args: argparse.Namespace) -> int:
    config = _experiment(args)
    store = _store(config)
    seed = config.seeds[0]
    spec = model_spec(config)
    tasks = [store.load_splits(name) for name in config.suite.names()]
    pretrained = pretrain_model(config, spec, store.load_dataset('pretrain', 'train'), seed)
    store.save_model('pretrained', pretrained)
    for name, params in fine_tune(config, spec, pretrained, tasks, seed).items():
        print(store.save_model(name, params))
    if args.multitask:
        multitask = train_multitask_baseline(config, spec, pretrained, tasks, seed)
        print(store.save_model('multitask', multitask))
    return EXIT_OK


def _stats(args: argparse.Namespace) -> int:
    config = _experiment(args)
    store = _store(config)
    spec = model_spec(config)
    for index, name in enumerate(config.suite.names()):
        dataset = store.load_dataset(name, config.stats.split)
        stats_config = config.stats.model_copy(update={'seed': derive_seed(config.seeds[0], 3, index)})
        bundle = collect_stats(spec, store.load_model(name), dataset, stats_config)
        print(store.save_stats(name, bundle))
    return EXIT_OK


def _merge(args: argparse.Namespace) -> int:
    config = _experiment(args)
    store = _store(config)
    names = config.suite.names()
    grid = MethodGrid(
        method=args.method,
        objective=ObjectiveKind(args.objective) if args.objective else None,
        init=args.init,
    )
    hyperparams = MergeHyperparams(lambda_scale=args.lambda_scale)
    iters = None if args.method in CLOSED_FORM_METHODS else config.cg_iters[-1]
    stats = None if args.method in STATS_FREE_METHODS else [store.load_stats(name) for name in names]
    merged, traces = merge_models(
        grid,
        (hyperparams, iters),
        [store.load_model(name) for name in names],
        stats,
        store.load_model('pretrained'),
        default_objective(config),
    )
    print(store.save_merged(grid.label, merged, traces))
    return EXIT_OK


def _eval(args: argparse.Namespace) -> int:
    config = _experiment(args)
    store = _store(config)
    params = load(args.checkpoint)
    if not isinstance(params, Checkpoint):
        raise ContractError(f'{str(args.checkpoint)!r} does not hold a checkpoint')
    datasets = [store.load_dataset(name, args.eval_split) for name in config.suite.names()]
    evaluation = evaluate_tasks(model_spec(config), params, datasets, args.eval_split)
    print(json.dumps({'split': evaluation.split, 'accuracies': evaluation.accuracies, 'average': evaluation.average}))
    return EXIT_OK


def _parse_layer(text: str) -> List[int]:
    try:
        d, k = (int(part) for part in text.split(','))
    except ValueError:
        raise UsageError(f'layer shape must look like D,K, got {text!r}') from None
    return [d, k]


def _flops(args: argparse.Namespace) -> int:
    fields: Dict[str, Any] = {}
    if args.preset is not None:
        fields.update((FULL_MODEL_FLOPS_SPEC if args.preset == 'full' else IA3_FLOPS_SPEC).model_dump())
    elif args.models is None or args.params is None:
        raise UsageError('flops needs --models and --params, or a --preset')
    overrides = {
        'models': args.models,
        'params': args.params,
        'cg_iters': args.cg_iters,
        'train_batches': args.train_batches,
        'batch_size': args.batch_size,
        'seq_len': args.seq_len,
        'multitask_factor': args.multitask_factor,
    }
    fields.update({key: value for key, value in overrides.items() if value is not None})
    if args.layer:
        fields['layers'] = [_parse_layer(layer) for layer in args.layer]
    value = flops_estimate(args.method, FlopsModelSpec(**fields))
    print(int(value) if float(value).is_integer() else repr(value))
    return EXIT_OK


def _run(args: argparse.Namespace) -> int:
    paths = run_scenario(_experiment(args))
    print(paths['markdown'])
    return EXIT_OK


def _report(args: argparse.Namespace) -> int:
    if args.results is not None:
        path = args.results
    elif args.out_dir is not None:
        path = args.out_dir / 'results.json'
    else:
        raise UsageError('report needs --results or --out-dir')
    markdown, csv_text = emit_report(load_results(path))
    path.with_name('report.md').write_text(markdown)
    path.with_name('report.csv').write_text(csv_text)
    sys.stdout.write(markdown)
    return EXIT_OK


_COMMANDS = {
    'gen-data': _gen_data,
    'train': _train,
    'stats': _stats,
    'merge': _merge,
    'eval': _eval,
    'flops': _flops,
    'run': _run,
    'report': _report,
}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command line, returning the exit code: 0 on success, 1 on a usage error, 2 when the command failed.
    """
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError('a command is required')
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f'{parser.prog}: error: {exc}', file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)

    levels = {0: logging.WARNING, 1: logging.INFO}
    logging.basicConfig(level=levels.get(args.verbose, logging.DEBUG), format='%(levelname)s %(name)s: %(message)s')
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f'{parser.prog}: error: {exc}', file=sys.stderr)
        return EXIT_USAGE
    except (MergeToolkitError, ValueError, OSError) as exc:
        logger.debug('%s failed', args.command, exc_info=True)
        print(f'{parser.prog}: error: {exc}', file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_dispatch())
