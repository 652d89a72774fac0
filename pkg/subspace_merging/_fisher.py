from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import Field

from ._checkpoint import Checkpoint, FisherMode, LayerStats, Role, StatsBundle
from ._errors import CapacityError, ContractError, StatsError
from ._matchers import IsClose, IsPSD
from ._tensor import Rng, make_rng
from ._train import CaptureHook, CaptureRecord, MlpSpec, Split, TaskDataset, _backprop, _softmax, check_params, forward
from ._utils import FrozenModel

__all__ = (
    'StatsConfig',
    'EXACT_FISHER_CAP',
    'diagonal_fisher',
    'kfac_factors',
    'exact_fisher_vector',
    'exact_fisher_linear',
    'collect_stats',
    'check_layer_stats',
)

logger = logging.getLogger('subspace_merging.fisher')

# largest parameter size whose dense Fisher is computed
EXACT_FISHER_CAP = 4096

Mode = Union[FisherMode, str]


class StatsConfig(FrozenModel):
    """
    What [`collect_stats`][subspace_merging.collect_stats] computes and on which data.

    `params=None` means every parameter, `params=()` requests nothing and yields an empty bundle.
    `seed` drives label sampling for true-Fisher K-FAC factors.
    """

    fisher_mode: FisherMode = FisherMode.empirical
    split: Split = 'validation'
    seed: int = Field(0, ge=0, lt=2**64)
    batch_size: int = Field(256, gt=0)
    kfac: bool = True
    exact_vector_fisher: bool = True
    exact_fisher_cap: int = Field(EXACT_FISHER_CAP, gt=0)
    params: Optional[Tuple[str, ...]] = None


def _batches(n: int, batch_size: int) -> Iterator[slice]:
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def _label_passes(
    spec: MlpSpec,
    params: Checkpoint,
    inputs: np.ndarray,
    labels: np.ndarray,
    mode: FisherMode,
    capture_hook: Optional[CaptureHook],
) -> Iterator[Tuple[np.ndarray, CaptureRecord]]:
    """
    `(per-example weight, capture)` pairs whose weighted sum of squared gradients is the Fisher of the batch:
    the ground-truth label with weight one, or every class weighted by its predicted probability.
    """
    if mode is FisherMode.empirical:
        _, _, capture = _backprop(spec, params, inputs, labels, capture_hook)
        yield np.ones(len(labels)), capture
        return
    probs = _softmax(forward(spec, params, inputs)[0])
    for label in range(spec.num_classes):
        _, _, capture = _backprop(spec, params, inputs, np.full(len(labels), label), capture_hook)
        yield probs[:, label], capture


def _sample_labels(probs: np.ndarray, rng: Rng) -> np.ndarray:
    """
    One label per row drawn from the row's distribution by inverse CDF.
    """
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


@dataclass
class _Sums:
    n: int = 0
    diag: Dict[str, np.ndarray] = field(default_factory=dict)
    input_gram: Dict[str, np.ndarray] = field(default_factory=dict)
    outgrad_gram: Dict[str, np.ndarray] = field(default_factory=dict)
    exact: Dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def add(store: Dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
        if name in store:
            store[name] += value
        else:
            store[name] = np.array(value, dtype=np.float64)

    def mean(self, store: Dict[str, np.ndarray], *, symmetric: bool = False) -> Dict[str, np.ndarray]:
        out = {}
        for name, total in store.items():
            value = total / self.n
            out[name] = (value + value.T) / 2 if symmetric else value
        return out


def _accumulate(
    spec: MlpSpec,
    params: Checkpoint,
    dataset: TaskDataset,
    mode: FisherMode,
    *,
    names: Sequence[str],
    diag: bool = False,
    kfac: bool = False,
    exact: Sequence[str] = (),
    seed: int = 0,
    batch_size: int = 256,
    capture_hook: Optional[CaptureHook] = None,
) -> _Sums:
    """
    Streaming sums over batches in ascending order.
    """
    check_params(spec, params)
    roles = params.roles
    sums = _Sums()
    rng = make_rng(seed)
    for batch in _batches(len(dataset), batch_size):
        inputs, labels = dataset.inputs[batch], dataset.labels[batch]
        sums.n += len(labels)
        label_capture = None
        if diag or exact:
            for weight, capture in _label_passes(spec, params, inputs, labels, mode, capture_hook):
                if mode is FisherMode.empirical:
                    label_capture = capture
                for name in names:
                    if diag and roles[name] is Role.linear_weight:
                        z, g = capture.inputs[name], capture.outgrads[name]
                        sums.add(sums.diag, name, (z**2).T @ (weight[:, None] * g**2))
                    elif diag:
                        sums.add(sums.diag, name, weight @ capture.scale_grads[name] ** 2)
                    if name in exact:
                        per_example = capture.per_example(name)
                        sums.add(sums.exact, name, (per_example * weight[:, None]).T @ per_example)
        if kfac:
            if mode is FisherMode.true:
                labels = _sample_labels(_softmax(forward(spec, params, inputs)[0]), rng)
                label_capture = None
            if label_capture is None:
                _, _, label_capture = _backprop(spec, params, inputs, labels, capture_hook)
            for name in names:
                if roles[name] is Role.linear_weight:
                    z, g = label_capture.inputs[name], label_capture.outgrads[name]
                    sums.add(sums.input_gram, name, z.T @ z)
                    sums.add(sums.outgrad_gram, name, g.T @ g)
    return sums


def diagonal_fisher(
    spec: MlpSpec,
    params: Checkpoint,
    dataset: TaskDataset,
    mode: Mode = FisherMode.empirical,
    *,
    batch_size: int = 256,
) -> Dict[str, np.ndarray]:
    """
    Diagonal Fisher of every parameter, shaped like the parameter.

    Empirical mode averages squared gradients of the ground-truth log-probability; true mode averages
    `Σ_y p(y|x) (∇ log p(y|x))²`, enumerating every class exactly.

    ```py title="diagonal_fisher"
    import numpy as np

    from subspace_merging import MlpSpec, TaskDataset, diagonal_fisher, init_params

    spec = MlpSpec.from_widths([2, 2], use_bias=False)
    params = init_params(spec, seed=0).replace({'layers.0.weight': np.zeros((2, 2))})
    data = TaskDataset([[1.0, 0.0]], [0], 'validation', 'demo', 2)
    fisher = diagonal_fisher(spec, params, data)
    assert fisher['layers.0.weight'].tolist() == [[0.25, 0.25], [0.0, 0.0]]
    ```
    """
    sums = _accumulate(spec, params, dataset, FisherMode(mode), names=params.names, diag=True, batch_size=batch_size)
    return sums.mean(sums.diag)


def kfac_factors(
    spec: MlpSpec,
    params: Checkpoint,
    dataset: TaskDataset,
    mode: Mode = FisherMode.empirical,
    *,
    seed: int = 0,
    batch_size: int = 256,
) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """
    K-FAC factors `(ZᵀZ / N, O′ᵀO′ / N)` of every linear weight.

    In true mode `O′` uses one label per example sampled from the model with a generator seeded by `seed`.
    """
    sums = _accumulate(
        spec, params, dataset, FisherMode(mode), names=params.names, kfac=True, seed=seed, batch_size=batch_size
    )
    inputs = sums.mean(sums.input_gram, symmetric=True)
    outgrads = sums.mean(sums.outgrad_gram, symmetric=True)
    return {name: (inputs[name], outgrads[name]) for name in inputs}


def _check_exact_size(params: Checkpoint, name: str, role: Role, cap: int) -> None:
    if name not in params.params:
        raise ContractError(f'unknown parameter {name!r}')
    if params.roles[name] is not role:
        raise ContractError(f'{name!r} is a {params.roles[name].value}, not a {role.value}')
    size = params[name].size
    if size > cap:
        raise CapacityError(f'exact Fisher of {name!r} too large', requested=size, cap=cap)


def exact_fisher_vector(
    spec: MlpSpec,
    params: Checkpoint,
    dataset: TaskDataset,
    param_name: str,
    mode: Mode = FisherMode.empirical,
    *,
    cap: int = EXACT_FISHER_CAP,
    batch_size: int = 256,
) -> np.ndarray:
    """
    Dense `n x n` Fisher of a vector parameter, the mean of `outer(g, g)` over per-example gradients `g`
    (every class weighted by its probability in true mode).
    """
    _check_exact_size(params, param_name, Role.vector, cap)
    sums = _accumulate(
        spec, params, dataset, FisherMode(mode), names=[param_name], exact=[param_name], batch_size=batch_size
    )
    return sums.mean(sums.exact, symmetric=True)[param_name]


def exact_fisher_linear(
    spec: MlpSpec,
    params: Checkpoint,
    dataset: TaskDataset,
    param_name: str,
    mode: Mode = FisherMode.empirical,
    *,
    cap: int = EXACT_FISHER_CAP,
    capture_hook: Optional[CaptureHook] = None,
    batch_size: int = 256,
) -> np.ndarray:
    """
    Dense `dk x dk` Fisher of one linear weight, in the row-major vectorisation of the weight.

    Only usable on small layers; used to check K-FAC factors against the exact block they approximate.
    """
    _check_exact_size(params, param_name, Role.linear_weight, cap)
    sums = _accumulate(
        spec,
        params,
        dataset,
        FisherMode(mode),
        names=[param_name],
        exact=[param_name],
        batch_size=batch_size,
        capture_hook=capture_hook,
    )
    return sums.mean(sums.exact, symmetric=True)[param_name]


def check_layer_stats(name: str, stats: LayerStats) -> None:
    """
    Raise `StatsError` naming the parameter and statistic when a `LayerStats` invariant fails.
    """
    diag = stats.diag_fisher
    if not np.all(np.isfinite(diag)) or np.any(diag < 0):
        raise StatsError(f'diagonal Fisher of {name!r} must be finite and non-negative')
    expected_dims = {
        'input_gram': diag.shape[0] if diag.ndim == 2 else None,
        'outgrad_gram': diag.shape[1] if diag.ndim == 2 else None,
        'exact_fisher': diag.size,
    }
    for statistic, dim in expected_dims.items():
        value = stats.get(statistic)
        if value is None:
            continue
        if dim is None or value.shape != (dim, dim):
            raise StatsError(f'{statistic} of {name!r} has shape {value.shape}, expected ({dim}, {dim})')
        if value != IsPSD(atol=1e-8):
            raise StatsError(f'{statistic} of {name!r} is not symmetric positive semi-definite')
    if stats.exact_fisher is not None:
        if np.diag(stats.exact_fisher) != IsClose(diag.ravel(), rtol=1e-8, atol=1e-8, elementwise=True):
            raise StatsError(f'exact Fisher diagonal of {name!r} does not match its diagonal Fisher')


def collect_stats(spec: MlpSpec, params: Checkpoint, dataset: TaskDataset, config: StatsConfig) -> StatsBundle:
    """
    Every statistic the merge objectives consume, for one model on one data split.

    Linear weights get their diagonal Fisher and K-FAC factors; vector parameters get their diagonal Fisher
    and, when no larger than `config.exact_fisher_cap`, their exact Fisher.
    """
    if dataset.split != config.split:
        raise StatsError(f'statistics were requested on the {config.split!r} split, got {dataset.split!r} data')
    names = list(params.names if config.params is None else config.params)
    for name in names:
        if name not in params.params:
            raise StatsError(f'statistics requested for unknown parameter {name!r}')
    exact = []
    if config.exact_vector_fisher:
        for name in names:
            if params.roles[name] is Role.vector:
                if params[name].size <= config.exact_fisher_cap:
                    exact.append(name)
                else:
                    logger.debug('skipping exact Fisher of %s, %d entries', name, params[name].size)

    provenance = {
        'task': dataset.task_name,
        'fisher_mode': config.fisher_mode.value,
        'split': config.split,
        'seed': config.seed,
        'model': params.fingerprint(),
    }
    if not names:
        return StatsBundle({}, config.fisher_mode, config.split, len(dataset), provenance)

    logger.info(
        'collecting %s statistics for %s on %d examples', config.fisher_mode.value, dataset.task_name, len(dataset)
    )
    sums = _accumulate(
        spec,
        params,
        dataset,
        config.fisher_mode,
        names=names,
        diag=True,
        kfac=config.kfac,
        exact=exact,
        seed=config.seed,
        batch_size=config.batch_size,
    )
    diag = sums.mean(sums.diag)
    input_gram = sums.mean(sums.input_gram, symmetric=True)
    outgrad_gram = sums.mean(sums.outgrad_gram, symmetric=True)
    exact_fisher = sums.mean(sums.exact, symmetric=True)

    layers = {}
    for name in names:
        layer = LayerStats(
            diag_fisher=diag[name],
            n_examples=sums.n,
            input_gram=input_gram.get(name),
            outgrad_gram=outgrad_gram.get(name),
            exact_fisher=exact_fisher.get(name),
        )
        check_layer_stats(name, layer)
        layers[name] = layer
    return StatsBundle(layers, config.fisher_mode, config.split, sums.n, provenance)
