import numpy as np
import pytest

from subspace_merging import (
    Checkpoint,
    ContractError,
    FisherMode,
    IsClose,
    LayerStats,
    MergeHyperparams,
    ObjectiveError,
    StatsBundle,
    StatsError,
    closed_form_merge,
    default_epsilon,
    diagonal_fisher_merge,
    make_rng,
    matching_gaps,
    order_models,
    random_spd,
    regmean_closed_form,
    scale_offdiagonal,
    simple_average,
    task_arithmetic,
    task_subspace,
    ties_merge,
)


def _model(task, seed):
    rng = make_rng(seed)
    return Checkpoint.build({'w': rng.standard_normal((3, 2)), 'v': rng.standard_normal(2)}, {'task': task})


def _stats(task, seed, *, gram_scale=1.0, with_gram=True):
    rng = make_rng(seed + 1000)
    layers = {
        'w': LayerStats(
            diag_fisher=rng.random((3, 2)) + 0.1,
            n_examples=4,
            input_gram=gram_scale * random_spd(rng, 3) if with_gram else None,
        ),
        'v': LayerStats(diag_fisher=rng.random(2) + 0.1, n_examples=4),
    }
    return StatsBundle(layers, FisherMode.empirical, 'validation', 4, {'task': task})


@pytest.fixture(name='models')
def fix_models():
    return [_model('a', 1), _model('b', 2), _model('c', 3)]


@pytest.fixture(name='stats')
def fix_stats():
    return [_stats('a', 1), _stats('b', 2), _stats('c', 3)]


@pytest.fixture(name='pretrained')
def fix_pretrained():
    return _model('pretrained', 0)


def test_order_models(models, stats):
    ordered, ordered_stats = order_models(models[::-1], stats[::-1])
    assert [m.task for m in ordered] == ['a', 'b', 'c']
    assert [s.task for s in ordered_stats] == ['a', 'b', 'c']
    assert order_models(models)[1] is None


def test_order_models_stats_mismatch(models, stats):
    with pytest.raises(StatsError, match='got 2 statistics bundles for 3 models'):
        order_models(models, stats[:2])
    wrong = _stats('a', 1)
    wrong.provenance['model'] = models[1].fingerprint()
    with pytest.raises(StatsError, match="statistics for task 'a' were collected on a different model"):
        order_models(models[:1], [wrong])


def test_simple_average(models):
    merged = simple_average(models)
    assert merged['w'] == IsClose((models[0]['w'] + models[1]['w'] + models[2]['w']) / 3, rtol=1e-14)
    assert merged.provenance == {'task': 'merged', 'method': 'average', 'tasks': ['a', 'b', 'c']}


@pytest.mark.parametrize(
    'merge',
    [
        lambda ms, ss, pre: simple_average(ms),
        lambda ms, ss, pre: task_arithmetic(ms, pre, 0.4),
        lambda ms, ss, pre: ties_merge(ms, pre, 0.7, 0.5),
        lambda ms, ss, pre: diagonal_fisher_merge(ms, ss),
        lambda ms, ss, pre: regmean_closed_form(ms, ss),
    ],
    ids=['average', 'task_arithmetic', 'ties', 'diag_fisher', 'regmean'],
)
def test_input_order_does_not_matter(models, stats, pretrained, merge):
    forward = merge(models, stats, pretrained)
    backward = merge(models[::-1], stats[::-1], pretrained)
    assert forward.flatten().tolist() == backward.flatten().tolist()


@pytest.mark.parametrize(
    'merge',
    [
        lambda ms, ss: simple_average(ms),
        lambda ms, ss: diagonal_fisher_merge(ms, ss),
        lambda ms, ss: regmean_closed_form(ms, ss),
        lambda ms, ss: regmean_closed_form(ms, ss, gamma=1.0),
    ],
    ids=['average', 'diag_fisher', 'regmean', 'regmean-full-gram'],
)
def test_identical_models_are_a_fixed_point(stats, merge):
    model = _model('a', 7)
    copies = [model.replace(provenance={'task': task}) for task in ('a', 'b', 'c')]
    merged = merge(copies, stats)
    assert merged.flatten() == IsClose(model.flatten(), rtol=1e-10)


def test_task_arithmetic(models, pretrained):
    merged = task_arithmetic(models, pretrained, 0.5)
    expected = pretrained['v'] + 0.5 * sum(m['v'] - pretrained['v'] for m in models)
    assert merged['v'] == IsClose(expected, rtol=1e-14)
    assert merged.provenance['lambda_scale'] == 0.5
    assert task_arithmetic(models, pretrained, 0.0).same_values(pretrained)


def test_task_arithmetic_single_model_is_fixed_point(pretrained):
    model = _model('a', 4)
    assert task_arithmetic([model], pretrained, 1.0).flatten() == IsClose(model.flatten(), rtol=1e-14)


def test_ties_example():
    pre = Checkpoint.build({'v': np.zeros(4)})
    t1 = Checkpoint.build({'v': [1.0, 0.1, -2.0, 0.05]}, {'task': 'a'})
    t2 = Checkpoint.build({'v': [-1.5, 0.2, 1.0, 0.02]}, {'task': 'b'})
    merged = ties_merge([t1, t2], pre, lambda_scale=2.0, trim_fraction=0.5)
    assert merged['v'].tolist() == [-3.0, 0.0, -4.0, 0.0]
    assert merged.provenance['trim_fraction'] == 0.5


def test_ties_sign_tie_elects_positive():
    pre = Checkpoint.build({'v': np.zeros(2)})
    t1 = Checkpoint.build({'v': [1.0, 0.0]}, {'task': 'a'})
    t2 = Checkpoint.build({'v': [-1.0, 0.0]}, {'task': 'b'})
    assert ties_merge([t1, t2], pre, trim_fraction=0.4)['v'].tolist() == [1.0, 0.0]


def test_ties_averages_agreeing_entries():
    pre = Checkpoint.build({'v': np.ones(1)})
    models = [Checkpoint.build({'v': [value]}, {'task': str(value)}) for value in (3.0, 5.0, 0.0)]
    # task vectors 2, 4 and -1: positive mass wins and the mean of 2 and 4 is kept
    assert ties_merge(models, pre, trim_fraction=0.1)['v'].tolist() == [4.0]


@pytest.mark.parametrize('fraction', [0.0, 1.0, -0.5])
def test_ties_invalid_fraction(models, pretrained, fraction):
    with pytest.raises(ValueError, match='trim_fraction must lie in'):
        ties_merge(models, pretrained, trim_fraction=fraction)


def test_diagonal_fisher_merge_zero_fisher_is_plain_mean():
    bundles = [
        StatsBundle({'v': LayerStats(np.zeros(2), 1)}, 'empirical', 'validation', 1, {'task': task})
        for task in ('a', 'b')
    ]
    a = Checkpoint.build({'v': [1.0, 2.0]}, {'task': 'a'})
    b = Checkpoint.build({'v': [3.0, 6.0]}, {'task': 'b'})
    assert diagonal_fisher_merge([a, b], bundles)['v'].tolist() == [2.0, 4.0]


def test_diagonal_fisher_merge_scale_invariant(models):
    base = [_stats(m.task, i) for i, m in enumerate(models)]
    scaled = []
    for bundle in base:
        layers = {name: LayerStats(10 * bundle[name].diag_fisher, 4) for name in ('w', 'v')}
        scaled.append(StatsBundle(layers, 'empirical', 'validation', 4, {'task': bundle.task}))
    first = diagonal_fisher_merge(models, base, epsilon=0.0)
    second = diagonal_fisher_merge(models, scaled, epsilon=0.0)
    assert first.flatten() == IsClose(second.flatten(), rtol=1e-12)


def test_default_epsilon():
    assert default_epsilon([np.full(2, 2.0), np.full(3, 4.0)]) == IsClose(3e-12, rtol=1e-12)


def test_scale_offdiagonal():
    gram = np.array([[2.0, 1.0], [1.0, 4.0]])
    assert scale_offdiagonal(gram, 0.5).tolist() == [[2.0, 0.5], [0.5, 4.0]]
    assert scale_offdiagonal(gram, 1.0).tolist() == gram.tolist()


def test_regmean_matches_direct_solve(models, stats):
    merged = regmean_closed_form(models, stats, gamma=0.9)
    grams = [scale_offdiagonal(s['w'].input_gram, 0.9) for s in stats]
    expected = np.linalg.solve(sum(grams), sum(g @ m['w'] for g, m in zip(grams, models)))
    assert merged['w'] == IsClose(expected, rtol=1e-10)
    assert merged['v'] == IsClose(diagonal_fisher_merge(models, stats)['v'], rtol=1e-14)
    assert merged.provenance['diag_fisher_fallback'] == ['v']
    assert merged.provenance['ridges'] == {}
    assert merged.provenance['gamma'] == 0.9


def test_regmean_gram_scale_invariant(models):
    plain = [_stats(m.task, i) for i, m in enumerate(models)]
    scaled = [_stats(m.task, i, gram_scale=50.0) for i, m in enumerate(models)]
    first = regmean_closed_form(models, plain)
    second = regmean_closed_form(models, scaled)
    assert first['w'] == IsClose(second['w'], rtol=1e-10)


def test_regmean_singular_gram_uses_ridge(models):
    bundles = []
    for model in models:
        layers = {'w': LayerStats(np.ones((3, 2)), 1, input_gram=np.zeros((3, 3))), 'v': LayerStats(np.ones(2), 1)}
        bundles.append(StatsBundle(layers, 'empirical', 'validation', 1, {'task': model.task}))
    merged = regmean_closed_form(models, bundles)
    assert merged['w'].tolist() == np.zeros((3, 2)).tolist()
    assert merged.provenance['ridges'] == {'w': 1e-10}


def test_regmean_missing_gram(models):
    bundles = [_stats(m.task, i, with_gram=(m.task != 'b')) for i, m in enumerate(models)]
    with pytest.raises(ObjectiveError, match="input_gram of 'w' missing in task 'b'") as e:
        regmean_closed_form(models, bundles)
    assert e.value.param == 'w'
    assert e.value.statistic == 'input_gram'


def test_regmean_missing_layer(models):
    bundles = [StatsBundle({}, 'empirical', 'validation', 1, {'task': m.task}) for m in models]
    with pytest.raises(ObjectiveError, match="no statistics for 'w' in task 'a'"):
        regmean_closed_form(models, bundles)


@pytest.mark.parametrize('gamma', [0.0, 1.5])
def test_regmean_invalid_gamma(models, stats, gamma):
    with pytest.raises(ValueError, match=r'gamma must lie in \(0, 1\]'):
        regmean_closed_form(models, stats, gamma=gamma)


def test_closed_form_merge_dispatch(models, stats, pretrained):
    hp = MergeHyperparams(lambda_scale=0.3, ties_trim_fraction=0.6, regmean_offdiag_scale=0.5)
    assert closed_form_merge('average', models).same_values(simple_average(models))
    assert closed_form_merge('task_arithmetic', models, pretrained=pretrained, hyperparams=hp).same_values(
        task_arithmetic(models, pretrained, 0.3)
    )
    assert closed_form_merge('ties', models, pretrained=pretrained, hyperparams=hp).same_values(
        ties_merge(models, pretrained, 0.3, 0.6)
    )
    assert closed_form_merge('diag_fisher', models, stats=stats).same_values(diagonal_fisher_merge(models, stats))
    assert closed_form_merge('regmean', models, stats=stats, hyperparams=hp).same_values(
        regmean_closed_form(models, stats, 0.5)
    )


def test_closed_form_merge_missing_inputs(models):
    with pytest.raises(ContractError, match='ties needs the pretrained checkpoint'):
        closed_form_merge('ties', models)
    with pytest.raises(ContractError, match='regmean needs statistics for every model'):
        closed_form_merge('regmean', models)
    with pytest.raises(ValueError, match="unknown merge method 'median'"):
        closed_form_merge('median', models)


def test_merge_hyperparams_validation():
    with pytest.raises(ValueError):
        MergeHyperparams(ties_trim_fraction=1.0)
    with pytest.raises(ValueError):
        MergeHyperparams(regmean_offdiag_scale=0.0)
    with pytest.raises(ValueError):
        MergeHyperparams(unknown=1)


def test_task_subspace():
    c = np.array([[2.0, 1.0], [1.0, 2.0]])
    q, lam = task_subspace(c)
    assert lam == IsClose([3.0, 1.0], rtol=1e-12)
    assert q @ np.diag(lam) @ q.T == IsClose(c, rtol=1e-12)
    data_q, data_lam = task_subspace(data=np.array([[1.0, 1.0], [1.0, -1.0]]))
    assert data_lam.tolist() == [2.0, 2.0]
    assert np.abs(data_q).tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_task_subspace_errors():
    with pytest.raises(ValueError, match='pass exactly one of'):
        task_subspace()
    with pytest.raises(ValueError, match='pass exactly one of'):
        task_subspace(np.eye(2), data=np.eye(2))
    with pytest.raises(ContractError, match='must be symmetric positive semi-definite'):
        task_subspace(np.diag([1.0, -1.0]))


def test_matching_gaps():
    thetas = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    covariances = [np.diag([1.0, 0.0]), np.diag([0.0, 1.0])]
    assert matching_gaps(thetas, covariances, np.array([1.0, 1.0])) == [0.0, 0.0]
    assert matching_gaps(thetas, covariances, np.zeros(2)) == [1.0, 1.0]
    with pytest.raises(ValueError, match='got 1 covariances for 2 models'):
        matching_gaps(thetas, covariances[:1], np.zeros(2))
