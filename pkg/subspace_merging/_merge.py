from __future__ import annotations

import logging
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field

from ._checkpoint import Checkpoint, Role, StatsBundle, assert_mergeable
from ._errors import ContractError, ObjectiveError, StatsError
from ._matchers import IsPSD
from ._tensor import Matrix, chol_solve_ridge, sym_eig
from ._utils import FrozenModel

__all__ = (
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
    'task_subspace',
    'matching_gaps',
    'default_epsilon',
    'scale_offdiagonal',
)

logger = logging.getLogger('subspace_merging.merge')

ClosedFormMethod = Literal['average', 'task_arithmetic', 'ties', 'diag_fisher', 'regmean']
CLOSED_FORM_METHODS: Tuple[ClosedFormMethod, ...] = ('average', 'task_arithmetic', 'ties', 'diag_fisher', 'regmean')
# merges that only read the task models and the pretrained checkpoint
STATS_FREE_METHODS: Tuple[ClosedFormMethod, ...] = ('average', 'task_arithmetic', 'ties')


class MergeHyperparams(FrozenModel):
    """
    Knobs of the closed-form merges.

    `epsilon=None` uses `1e-12` times the mean Fisher value of each parameter.
    """

    lambda_scale: float = 1.0
    ties_trim_fraction: float = Field(0.8, gt=0, lt=1)
    regmean_offdiag_scale: float = Field(0.9, gt=0, le=1)
    epsilon: Optional[float] = Field(None, ge=0)


def order_models(
    models: Sequence[Checkpoint], stats: Optional[Sequence[StatsBundle]] = None
) -> Tuple[List[Checkpoint], Optional[List[StatsBundle]]]:
    """
    Sort models (and their aligned statistics) by task name then fingerprint, the order every sum runs in.
    """
    models = list(models)
    keys = [(m.task, m.fingerprint()) for m in models]
    order = sorted(range(len(models)), key=lambda i: keys[i])
    if stats is None:
        return [models[i] for i in order], None
    stats = list(stats)
    if len(stats) != len(models):
        raise StatsError(f'got {len(stats)} statistics bundles for {len(models)} models')
    for model, bundle in zip(models, stats):
        fingerprint = bundle.provenance.get('model')
        if fingerprint is not None and fingerprint != model.fingerprint():
            raise StatsError(f'statistics for task {bundle.task!r} were collected on a different model')
    return [models[i] for i in order], [stats[i] for i in order]


def _provenance(method: str, models: Sequence[Checkpoint], **extra: Any) -> Dict[str, Any]:
    return {'task': 'merged', 'method': method, 'tasks': [m.task for m in models], **extra}


def _sum(values: Sequence[np.ndarray]) -> np.ndarray:
    total = np.array(values[0], dtype=np.float64)
    for value in values[1:]:
        total = total + value
    return total


def simple_average(models: Sequence[Checkpoint]) -> Checkpoint:
    """
    Elementwise mean of every parameter.

    ```py title="simple_average"
    import numpy as np

    from subspace_merging import Checkpoint, simple_average

    a = Checkpoint.build({'v': np.array([1.0, 3.0])}, {'task': 'a'})
    b = Checkpoint.build({'v': np.array([3.0, 5.0])}, {'task': 'b'})
    assert simple_average([a, b])['v'].tolist() == [2.0, 4.0]
    ```
    """
    assert_mergeable(models)
    ordered, _ = order_models(models)
    params = {name: _sum([m[name] for m in ordered]) / len(ordered) for name in ordered[0].names}
    return ordered[0].replace(params, _provenance('average', ordered))


def task_arithmetic(models: Sequence[Checkpoint], pretrained: Checkpoint, lambda_scale: float = 1.0) -> Checkpoint:
    """
    `θ_pre + λ Σ_m (θ_m - θ_pre)`.
    """
    assert_mergeable([pretrained, *models])
    ordered, _ = order_models(models)
    params = {}
    for name in pretrained.names:
        task_vector = _sum([m[name] - pretrained[name] for m in ordered])
        params[name] = pretrained[name] + lambda_scale * task_vector
    return pretrained.replace(params, _provenance('task_arithmetic', ordered, lambda_scale=lambda_scale))


def _trim(task_vector: np.ndarray, trim_fraction: float) -> np.ndarray:
    k = int(np.floor(trim_fraction * task_vector.size))
    trimmed = task_vector.copy()
    # stable sort: among equal magnitudes the lower index is trimmed first
    trimmed[np.argsort(np.abs(task_vector), kind='stable')[:k]] = 0.0
    return trimmed


def ties_merge(
    models: Sequence[Checkpoint], pretrained: Checkpoint, lambda_scale: float = 1.0, trim_fraction: float = 0.8
) -> Checkpoint:
    """
    TIES-Merging over the whole flattened task vector.

    Each task vector keeps its largest `1 - trim_fraction` entries by magnitude; every coordinate then takes
    the sign with more surviving mass (positive on a tie) and averages the surviving entries of that sign.

    ```py title="ties_merge"
    import numpy as np

    from subspace_merging import Checkpoint, ties_merge

    pre = Checkpoint.build({'v': np.zeros(4)})
    t1 = Checkpoint.build({'v': [1.0, 0.1, -2.0, 0.05]}, {'task': 'a'})
    t2 = Checkpoint.build({'v': [-1.5, 0.2, 1.0, 0.02]}, {'task': 'b'})
    merged = ties_merge([t1, t2], pre, lambda_scale=1.0, trim_fraction=0.5)
    assert merged['v'].tolist() == [-1.5, 0.0, -2.0, 0.0]
    ```
    """
    if not 0 < trim_fraction < 1:
        raise ValueError(f'trim_fraction must lie in (0, 1), got {trim_fraction}')
    assert_mergeable([pretrained, *models])
    ordered, _ = order_models(models)
    base = pretrained.flatten()
    trimmed = np.stack([_trim(m.flatten() - base, trim_fraction) for m in ordered])

    positive_mass = np.where(trimmed > 0, trimmed, 0.0).sum(axis=0)
    negative_mass = np.where(trimmed < 0, -trimmed, 0.0).sum(axis=0)
    elected = np.where(positive_mass >= negative_mass, 1.0, -1.0)

    agrees = trimmed * elected > 0
    count = agrees.sum(axis=0)
    total = np.where(agrees, trimmed, 0.0).sum(axis=0)
    merged = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    provenance = _provenance('ties', ordered, lambda_scale=lambda_scale, trim_fraction=trim_fraction)
    return pretrained.unflatten(base + lambda_scale * merged, provenance)


def _layer(bundle: StatsBundle, name: str, statistic: str) -> np.ndarray:
    if name not in bundle:
        raise ObjectiveError(f'no statistics for {name!r} in task {bundle.task!r}', param=name, statistic=statistic)
    value = bundle[name].get(statistic)
    if value is None:
        raise ObjectiveError(
            f'{statistic} of {name!r} missing in task {bundle.task!r}', param=name, statistic=statistic
        )
    return value


def default_epsilon(fishers: Sequence[np.ndarray]) -> float:
    return 1e-12 * float(np.mean([np.mean(f) for f in fishers]))


def _diag_fisher_param(
    name: str, models: Sequence[Checkpoint], stats: Sequence[StatsBundle], epsilon: Optional[float]
) -> np.ndarray:
    fishers = [_layer(s, name, 'diag_fisher') for s in stats]
    thetas = [m[name] for m in models]
    eps = default_epsilon(fishers) if epsilon is None else epsilon
    mean = _sum(thetas) / len(thetas)
    numerator = _sum([f * t for f, t in zip(fishers, thetas)]) + eps * mean
    denominator = _sum(fishers) + eps
    return np.divide(numerator, denominator, out=mean.copy(), where=denominator > 0)


def diagonal_fisher_merge(
    models: Sequence[Checkpoint], stats: Sequence[StatsBundle], epsilon: Optional[float] = None
) -> Checkpoint:
    """
    Fisher-weighted mean of every parameter, `(Σ f_m θ_m + ε θ̄) / (Σ f_m + ε)`.

    Coordinates where every Fisher (and ε) is zero get the plain mean.

    ```py title="diagonal_fisher_merge"
    from subspace_merging import Checkpoint, FisherMode, LayerStats, StatsBundle, diagonal_fisher_merge

    a = Checkpoint.build({'v': [2.0]}, {'task': 'a'})
    b = Checkpoint.build({'v': [4.0]}, {'task': 'b'})
    sa = StatsBundle({'v': LayerStats([3.0], 1)}, FisherMode.empirical, 'validation', 1, {'task': 'a'})
    sb = StatsBundle({'v': LayerStats([1.0], 1)}, FisherMode.empirical, 'validation', 1, {'task': 'b'})
    merged = diagonal_fisher_merge([a, b], [sa, sb], epsilon=0.0)
    assert merged['v'].tolist() == [2.5]
    ```
    """
    assert_mergeable(models)
    ordered, ordered_stats = order_models(models, stats)
    assert ordered_stats is not None
    params = {name: _diag_fisher_param(name, ordered, ordered_stats, epsilon) for name in ordered[0].names}
    return ordered[0].replace(params, _provenance('diag_fisher', ordered, epsilon=epsilon))


def scale_offdiagonal(gram: Matrix, gamma: float) -> Matrix:
    """
    `γ G + (1 - γ) diag(G)`: off-diagonal entries scaled by `γ`, diagonal kept.
    """
    return gamma * gram + (1.0 - gamma) * np.diag(np.diag(gram))


def regmean_closed_form(
    models: Sequence[Checkpoint],
    stats: Sequence[StatsBundle],
    gamma: float = 0.9,
    epsilon: Optional[float] = None,
) -> Checkpoint:
    """
    RegMean: each linear weight becomes `(Σ G̃_m)⁻¹ Σ G̃_m W_m` with `G̃_m` the input Gram with its
    off-diagonal entries scaled by `gamma`; other parameters use diagonal Fisher merging.

    The solve falls back to a ridge when the summed Gram is singular, the ridge used is recorded in the
    provenance under `ridges`.
    """
    if not 0 < gamma <= 1:
        raise ValueError(f'gamma must lie in (0, 1], got {gamma}')
    assert_mergeable(models)
    ordered, ordered_stats = order_models(models, stats)
    assert ordered_stats is not None
    params = {}
    ridges = {}
    fallback = []
    for name in ordered[0].names:
        if ordered[0].roles[name] is not Role.linear_weight:
            params[name] = _diag_fisher_param(name, ordered, ordered_stats, epsilon)
            fallback.append(name)
            continue
        grams = [scale_offdiagonal(_layer(s, name, 'input_gram'), gamma) for s in ordered_stats]
        lhs = _sum(grams)
        rhs = _sum([g @ m[name] for g, m in zip(grams, ordered)])
        params[name], ridge = chol_solve_ridge(lhs, rhs, layer=name)
        if ridge:
            logger.info('RegMean solve for %s needed a ridge of %g', name, ridge)
            ridges[name] = ridge
    provenance = _provenance('regmean', ordered, gamma=gamma, diag_fisher_fallback=fallback, ridges=ridges)
    return ordered[0].replace(params, provenance)


def closed_form_merge(
    method: ClosedFormMethod,
    models: Sequence[Checkpoint],
    *,
    stats: Optional[Sequence[StatsBundle]] = None,
    pretrained: Optional[Checkpoint] = None,
    hyperparams: Optional[MergeHyperparams] = None,
) -> Checkpoint:
    """
    Dispatch to one of the closed-form merges by name.
    """
    hp = hyperparams or MergeHyperparams()
    if method == 'average':
        return simple_average(models)
    if method in ('task_arithmetic', 'ties'):
        if pretrained is None:
            raise ContractError(f'{method} needs the pretrained checkpoint')
        if method == 'ties':
            return ties_merge(models, pretrained, hp.lambda_scale, hp.ties_trim_fraction)
        return task_arithmetic(models, pretrained, hp.lambda_scale)
    if method in ('diag_fisher', 'regmean'):
        if stats is None:
            raise ContractError(f'{method} needs statistics for every model')
        if method == 'regmean':
            return regmean_closed_form(models, stats, hp.regmean_offdiag_scale, hp.epsilon)
        return diagonal_fisher_merge(models, stats, hp.epsilon)
    raise ValueError(f'unknown merge method {method!r}')


def task_subspace(c: Optional[Matrix] = None, *, data: Optional[Matrix] = None) -> Tuple[Matrix, np.ndarray]:
    """
    Basis and importances of a task subspace: the eigendecomposition `C = Q Λ Qᵀ` of a merging method's
    covariance, either given directly or as `PᵀP` from a data matrix `P`.

    ```py title="task_subspace"
    import numpy as np

    from subspace_merging import task_subspace

    q, lam = task_subspace(data=np.diag([3.0, 2.0]))
    assert lam.tolist() == [9.0, 4.0]
    assert np.abs(q).tolist() == [[1.0, 0.0], [0.0, 1.0]]
    ```
    """
    if (c is None) == (data is None):
        raise ValueError('pass exactly one of a covariance matrix or a data matrix')
    if data is not None:
        p = np.asarray(data, dtype=np.float64)
        c = p.T @ p
    elif np.asarray(c) != IsPSD:
        raise ContractError('a task covariance must be symmetric positive semi-definite')
    return sym_eig(c)


def matching_gaps(thetas: Sequence[np.ndarray], covariances: Sequence[Matrix], merged: np.ndarray) -> List[float]:
    """
    `‖C_m θ* - C_m θ_m‖` per task: how far the merged parameters are from each model inside its task subspace.
    """
    if len(thetas) != len(covariances):
        raise ValueError(f'got {len(covariances)} covariances for {len(thetas)} models')
    merged = np.ravel(merged)
    return [float(np.linalg.norm(c @ merged - c @ np.ravel(t))) for t, c in zip(thetas, covariances)]
