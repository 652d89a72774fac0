import math

import pytest

from subspace_merging import (
    FLOPS_METHODS,
    FULL_MODEL_FLOPS_SPEC,
    IA3_FLOPS_SPEC,
    FlopsModelSpec,
    IsClose,
    SpecError,
    flops_estimate,
    format_sig,
)


@pytest.mark.parametrize(
    'method,expected',
    [
        ('averaging', '2.3E6'),
        ('task_arithmetic', '4.8E6'),
        ('diag_fisher', '6.5E6'),
        ('ties', '5.0E7'),
        ('multitask', '1.1E18'),
    ],
)
def test_ia3_reference(method, expected):
    assert format_sig(flops_estimate(method, IA3_FLOPS_SPEC)) == expected


@pytest.mark.parametrize(
    'method,expected',
    [
        ('averaging', '6.3E9'),
        ('task_arithmetic', '1.3E10'),
        ('diag_fisher', '1.8E10'),
        ('ties', '1.9E11'),
        ('regmean', '6.5E12'),
        ('mats', '6.6E13'),
        ('multitask', '2.2E17'),
    ],
)
def test_full_model_reference(method, expected):
    assert format_sig(flops_estimate(method, FULL_MODEL_FLOPS_SPEC)) == expected


def test_exact_small_values():
    spec = FlopsModelSpec(models=8, params=282_000)
    assert flops_estimate('averaging', spec) == 2_256_000
    assert flops_estimate('task_arithmetic', spec) == 4_794_000
    assert flops_estimate('diag_fisher', spec) == 6_486_000


def test_ties_formula():
    spec = FlopsModelSpec(models=2, params=100)
    assert flops_estimate('ties', spec) == IsClose(9.8 * 200 + 200 * math.log(100) - 200, rtol=1e-14)


def test_layer_formulas():
    spec = FlopsModelSpec(models=2, params=6, layers=((2, 3),), cg_iters=4)
    # (M-1) d² + ⅔ d³ + M d² k + (M-1) d k + d² k = 4 + 16/3 + 24 + 6 + 12
    assert flops_estimate('regmean', spec) == IsClose(46 + 16 / 3, rtol=1e-14)
    # (M-1) d² + M d² k + (M-1) d k + N (d² k + 12 d k) = 4 + 24 + 6 + 4 * (12 + 72)
    assert flops_estimate('mats', spec) == 370


def test_mats_scales_with_iterations():
    few = FULL_MODEL_FLOPS_SPEC.model_copy(update={'cg_iters': 10})
    assert flops_estimate('mats', few) < flops_estimate('mats', FULL_MODEL_FLOPS_SPEC)


def test_multitask_defaults():
    spec = FlopsModelSpec(models=2, params=10, train_batches=5, batch_size=4, seq_len=1)
    assert flops_estimate('multitask', spec) == 3.0 * 10 * 20


@pytest.mark.parametrize(
    'method,spec,message',
    [
        ('regmean', IA3_FLOPS_SPEC, 'regmean FLOPs need the linear layer shapes'),
        ('mats', IA3_FLOPS_SPEC, 'mats FLOPs need the linear layer shapes'),
        ('mats', FlopsModelSpec(models=2, params=6, layers=((2, 3),)), 'number of conjugate gradient iterations'),
        ('multitask', FlopsModelSpec(models=2, params=6), 'multitask FLOPs need train_batches, batch_size and seq_len'),
        ('median', IA3_FLOPS_SPEC, "unknown method 'median', choose from averaging, task_arithmetic"),
    ],
    ids=['regmean', 'mats-layers', 'mats-iters', 'multitask', 'unknown'],
)
def test_missing_inputs(method, spec, message):
    with pytest.raises(SpecError, match=message):
        flops_estimate(method, spec)


def test_flops_methods():
    assert FLOPS_METHODS == ('averaging', 'task_arithmetic', 'ties', 'diag_fisher', 'regmean', 'mats', 'multitask')


@pytest.mark.parametrize('kwargs', [{'models': 0, 'params': 1}, {'models': 1, 'params': 0}, {'models': 1}])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        FlopsModelSpec(**kwargs)


@pytest.mark.parametrize(
    'value,digits,expected',
    [
        (2_256_000, 2, '2.3E6'),
        (9.96, 2, '1.0E1'),
        (0.00123, 3, '1.23E-3'),
        (5, 1, '5E0'),
    ],
)
def test_format_sig(value, digits, expected):
    assert format_sig(value, digits) == expected
