from __future__ import annotations

import math
from typing import Callable, Dict, Literal, Optional, Tuple

from pydantic import Field

from ._errors import SpecError
from ._utils import FrozenModel

__all__ = (
    'FlopsModelSpec',
    'FlopsMethod',
    'FLOPS_METHODS',
    'FULL_MODEL_FLOPS_SPEC',
    'IA3_FLOPS_SPEC',
    'flops_estimate',
    'format_sig',
)

FlopsMethod = Literal['averaging', 'task_arithmetic', 'ties', 'diag_fisher', 'regmean', 'mats', 'multitask']


class FlopsModelSpec(FrozenModel):
    """
    What the cost formulas need to know about a model and a merge.

    Attributes:
        models: Number of models merged, `M`.
        params: Number of merged parameters, `p`.
        layers: `(d, k)` shape of every linear layer, needed by `regmean` and `mats`.
        cg_iters: Conjugate gradient iterations `N`, needed by `mats`.
        log_base: Base of the logarithm in the TIES sorting cost, always natural.
        train_batches: Batches of multitask training.
        batch_size: Examples per batch of multitask training.
        seq_len: Mean tokens per example.
        train_params: Parameters touched by a multitask training step, defaults to `params`.
        multitask_factor: FLOPs per parameter per token of training.
    """

    models: int = Field(ge=1)
    params: int = Field(gt=0)
    layers: Optional[Tuple[Tuple[int, int], ...]] = None
    cg_iters: Optional[int] = Field(None, ge=1)
    log_base: Literal['natural'] = 'natural'
    train_batches: Optional[int] = Field(None, gt=0)
    batch_size: Optional[int] = Field(None, gt=0)
    seq_len: Optional[float] = Field(None, gt=0)
    train_params: Optional[int] = Field(None, gt=0)
    multitask_factor: float = Field(3.0, gt=0)


def _layers(spec: FlopsModelSpec, method: str) -> Tuple[Tuple[int, int], ...]:
    if not spec.layers:
        raise SpecError(f'{method} FLOPs need the linear layer shapes')
    return spec.layers


def _averaging(spec: FlopsModelSpec) -> float:
    return float(spec.models * spec.params)


def _task_arithmetic(spec: FlopsModelSpec) -> float:
    return float(2 * spec.models * spec.params + spec.params)


def _diag_fisher(spec: FlopsModelSpec) -> float:
    return float(3 * spec.models * spec.params - spec.params)


def _ties(spec: FlopsModelSpec) -> float:
    m, p = spec.models, spec.params
    return 9.8 * m * p + m * p * math.log(p) - 2 * p


def _regmean(spec: FlopsModelSpec) -> float:
    m = spec.models
    return float(
        sum(
            (m - 1) * d**2 + 2 / 3 * d**3 + m * d**2 * k + (m - 1) * d * k + d**2 * k
            for d, k in _layers(spec, 'regmean')
        )
    )


def _mats(spec: FlopsModelSpec) -> float:
    if spec.cg_iters is None:
        raise SpecError('mats FLOPs need the number of conjugate gradient iterations')
    m, n = spec.models, spec.cg_iters
    return float(
        sum(
            (m - 1) * d**2 + m * d**2 * k + (m - 1) * d * k + n * (d**2 * k + 12 * d * k)
            for d, k in _layers(spec, 'mats')
        )
    )


def _multitask(spec: FlopsModelSpec) -> float:
    if spec.train_batches is None or spec.batch_size is None or spec.seq_len is None:
        raise SpecError('multitask FLOPs need train_batches, batch_size and seq_len')
    tokens = spec.train_batches * spec.batch_size * spec.seq_len
    return spec.multitask_factor * (spec.train_params or spec.params) * tokens


_FORMULAS: Dict[str, Callable[[FlopsModelSpec], float]] = {
    'averaging': _averaging,
    'task_arithmetic': _task_arithmetic,
    'ties': _ties,
    'diag_fisher': _diag_fisher,
    'regmean': _regmean,
    'mats': _mats,
    'multitask': _multitask,
}
FLOPS_METHODS: Tuple[str, ...] = tuple(_FORMULAS)


def flops_estimate(method: str, spec: FlopsModelSpec) -> float:
    """
    FLOPs needed to merge with `method` (or to train the multitask baseline).

    | method | FLOPs |
    |---|---|
    | `averaging` | `M p` |
    | `task_arithmetic` | `2 M p + p` |
    | `diag_fisher` | `3 M p - p` |
    | `ties` | `9.8 M p + M p ln p - 2 p` |
    | `regmean` | `Σ_l (M-1) d² + ⅔ d³ + M d² k + (M-1) d k + d² k` |
    | `mats` | `Σ_l (M-1) d² + M d² k + (M-1) d k + N (d² k + 12 d k)` |
    | `multitask` | `factor · p · T`, `T` = batches × batch size × sequence length |

    ```py title="flops_estimate"
    from subspace_merging import FlopsModelSpec, flops_estimate

    spec = FlopsModelSpec(models=8, params=282_000)
    assert flops_estimate('averaging', spec) == 2_256_000
    assert flops_estimate('task_arithmetic', spec) == 4_794_000
    ```
    """
    try:
        formula = _FORMULAS[method]
    except KeyError:
        raise SpecError(f'unknown method {method!r}, choose from {", ".join(FLOPS_METHODS)}') from None
    return formula(spec)


def format_sig(value: float, digits: int = 2) -> str:
    """
    Scientific notation with `digits` significant figures, `2.3E6` style.
    """
    mantissa, exponent = f'{value:.{digits - 1}E}'.split('E')
    return f'{mantissa}E{int(exponent)}'


_T5_LAYERS = ((1024, 1024),) * 288 + ((1024, 2816),) * 96 + ((2816, 38),) * 48

# full fine-tuning of the 783M-parameter model, layer shapes taken verbatim (including the 2816 x 38 layers)
FULL_MODEL_FLOPS_SPEC = FlopsModelSpec(
    models=8,
    params=783_000_000,
    layers=_T5_LAYERS,
    cg_iters=100,
    train_batches=2_000,
    batch_size=1024,
    seq_len=138.5,
    multitask_factor=1.0,
)

# (IA)³ vectors of the same model: 144 of size 1024 and 48 of size 2816, multitask training still runs the full model
IA3_FLOPS_SPEC = FlopsModelSpec(
    models=8,
    params=282_000,
    cg_iters=100,
    train_batches=10_000,
    batch_size=1024,
    seq_len=138.5,
    train_params=783_000_000,
    multitask_factor=1.0,
)
