from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field

from ._checkpoint import Checkpoint, Role, StatsBundle, assert_mergeable
from ._errors import CapacityError, ContractError, NumericalError, ObjectiveError
from ._merge import MergeHyperparams, _diag_fisher_param, _layer, _sum, closed_form_merge, order_models
from ._tensor import KRON_DENSE_CAP, Rng, make_rng
from ._utils import FrozenModel

__all__ = (
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
)

logger = logging.getLogger('subspace_merging.solver')


class ObjectiveKind(str, Enum):
    average = 'average'
    diag_fisher = 'diag_fisher'
    regmean = 'regmean'
    block_fisher_kfac = 'block_fisher_kfac'
    exact_fisher_vector = 'exact_fisher_vector'


class MergeObjective(FrozenModel):
    """
    Which task covariance `C_m` a merge uses, defining `A = Σ C_m` and `b = Σ C_m θ_m` per parameter.

    | kind | `C_m` | covers |
    |---|---|---|
    | `average` | identity | every parameter |
    | `diag_fisher` | diagonal Fisher | every parameter |
    | `regmean` | input Gram `ZᵀZ / N` acting on the left of `W` | linear weights |
    | `block_fisher_kfac` | `ZᵀZ / N ⊗ O′ᵀO′ / N` | linear weights, plus vectors that have an exact Fisher |
    | `exact_fisher_vector` | dense Fisher | vector parameters |

    Parameters an objective does not cover are merged with diagonal Fisher merging.
    """

    kind: ObjectiveKind

    @classmethod
    def of(cls, kind: str) -> MergeObjective:
        return cls(kind=ObjectiveKind(kind))


def objective_kind_for(
    objective: MergeObjective, name: str, role: Role, stats: Optional[Sequence[StatsBundle]]
) -> Optional[ObjectiveKind]:
    """
    Objective actually applied to one parameter, `None` when the fallback applies.
    """
    kind = objective.kind
    if kind in (ObjectiveKind.average, ObjectiveKind.diag_fisher):
        return kind
    if kind is ObjectiveKind.regmean:
        return kind if role is Role.linear_weight else None
    if kind is ObjectiveKind.exact_fisher_vector:
        return kind if role is Role.vector else None
    if role is Role.linear_weight:
        return kind
    # the block Fisher of a vector parameter is its exact Fisher, when it was collected
    if stats and all(name in s and s[name].exact_fisher is not None for s in stats):
        return ObjectiveKind.exact_fisher_vector
    return None


class CGConfig(FrozenModel):
    """
    Conjugate gradient settings. Iterations stop at `max_iters`, when `‖r‖ <= rel_residual_tol · ‖b‖`, or when
    a search direction has `pᵀAp <= curvature_guard · ‖p‖²`.

    `check_operator` runs [`check_system`][subspace_merging.check_system] on every system before it is solved.
    Each check costs thirty operator applications per parameter. The experiment harness turns it on when its
    logger is at DEBUG level, which `subspace-merging -vv` does.
    """

    max_iters: int = Field(100, ge=1)
    rel_residual_tol: float = Field(1e-10, ge=0)
    curvature_guard: float = Field(1e-14, ge=0)
    record_iterates: bool = False
    check_operator: bool = False


@dataclass
class CGTrace:
    """
    Per-iteration record of a solve; entry 0 describes the initial point.
    """

    residual_norms: List[float] = field(default_factory=list)
    objective_values: List[float] = field(default_factory=list)
    rhs_norm: float = 0.0
    reason: str = 'max_iters'
    iterates: Optional[List[np.ndarray]] = None

    @property
    def iterations(self) -> int:
        return len(self.residual_norms) - 1

    @property
    def final_residual(self) -> float:
        return self.residual_norms[-1]

    @property
    def relative_residual(self) -> float:
        return self.final_residual / self.rhs_norm if self.rhs_norm else self.final_residual

    def as_dict(self) -> Dict[str, Any]:
        return {
            'iterations': self.iterations,
            'reason': self.reason,
            'final_residual': self.final_residual,
            'relative_residual': self.relative_residual,
            'residual_norms': list(self.residual_norms),
            'objective_values': list(self.objective_values),
        }


@dataclass
class LinearSystem:
    """
    `A x = b` over one parameter: `apply` maps a parameter-shaped array to `A x` without materialising `A`.
    """

    name: str
    kind: ObjectiveKind
    apply: Callable[[np.ndarray], np.ndarray]
    rhs: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.rhs.shape  # type: ignore[no-any-return]

    @property
    def dim(self) -> int:
        return int(self.rhs.size)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """
        `A x` on flattened vectors.
        """
        return np.ravel(self.apply(np.reshape(x, self.shape)))

    def to_dense(self, *, cap: int = KRON_DENSE_CAP) -> np.ndarray:
        """
        `A` as a dense matrix, built column by column from basis vectors.
        """
        if self.dim * self.dim > cap:
            raise CapacityError(f'dense operator for {self.name!r} too large', requested=self.dim**2, cap=cap)
        return np.column_stack([self.matvec(e) for e in np.eye(self.dim)]) if self.dim else np.zeros((0, 0))


def build_system(
    objective: MergeObjective, param_name: str, models: Sequence[Checkpoint], stats: Optional[Sequence[StatsBundle]]
) -> LinearSystem:
    """
    Linear system of one parameter for one objective.

    Models are summed in task-name order. Missing statistics raise `ObjectiveError` naming the parameter and
    the statistic; so does asking for a parameter the objective does not cover.

    ```py title="build_system"
    import numpy as np

    from subspace_merging import Checkpoint, MergeObjective, build_system

    a = Checkpoint.build({'v': [1.0, 3.0]}, {'task': 'a'})
    b = Checkpoint.build({'v': [3.0, 5.0]}, {'task': 'b'})
    system = build_system(MergeObjective.of('average'), 'v', [a, b], None)
    assert system.apply(np.ones(2)).tolist() == [2.0, 2.0]
    assert system.rhs.tolist() == [4.0, 8.0]
    ```
    """
    ordered, ordered_stats = order_models(models, stats)
    role = ordered[0].roles[param_name]
    kind = objective_kind_for(objective, param_name, role, ordered_stats)
    if kind is None:
        raise ObjectiveError(
            f'objective {objective.kind.value} does not cover {role.value} {param_name!r}', param=param_name
        )
    thetas = [m[param_name] for m in ordered]

    if kind is ObjectiveKind.average:
        count = float(len(thetas))
        return LinearSystem(param_name, kind, lambda x: count * x, _sum(thetas))

    if ordered_stats is None:
        raise ObjectiveError(f'objective {kind.value} needs statistics', param=param_name)

    if kind is ObjectiveKind.diag_fisher:
        fishers = [_layer(s, param_name, 'diag_fisher') for s in ordered_stats]
        total = _sum(fishers)
        return LinearSystem(param_name, kind, lambda x: total * x, _sum([f * t for f, t in zip(fishers, thetas)]))

    if kind is ObjectiveKind.regmean:
        grams = [_layer(s, param_name, 'input_gram') for s in ordered_stats]
        gram = _sum(grams)
        return LinearSystem(param_name, kind, lambda x: gram @ x, _sum([g @ t for g, t in zip(grams, thetas)]))

    if kind is ObjectiveKind.exact_fisher_vector:
        fishers = [_layer(s, param_name, 'exact_fisher') for s in ordered_stats]
        total = _sum(fishers)
        return LinearSystem(param_name, kind, lambda x: total @ x, _sum([f @ t for f, t in zip(fishers, thetas)]))

    factors = [(_layer(s, param_name, 'input_gram'), _layer(s, param_name, 'outgrad_gram')) for s in ordered_stats]

    def apply_kfac(x: np.ndarray) -> np.ndarray:
        # (A ⊗ G) vec(W) = vec(A W G) for symmetric factors, rows stacked
        return _sum([a @ x @ g for a, g in factors])

    return LinearSystem(param_name, kind, apply_kfac, _sum([a @ t @ g for (a, g), t in zip(factors, thetas)]))


def check_system(system: LinearSystem, rng: Rng, probes: int = 10, *, tol: float = 1e-8) -> None:
    """
    Probe linearity, self-adjointness and positive semi-definiteness of `system` with random vectors,
    raising `NumericalError` on the first failing probe.
    """
    for probe in range(probes):
        u = rng.standard_normal(system.dim)
        v = rng.standard_normal(system.dim)
        alpha, beta = rng.standard_normal(2)
        au, av = system.matvec(u), system.matvec(v)
        combined = system.matvec(alpha * u + beta * v)
        expected = alpha * au + beta * av
        scale = max(np.linalg.norm(expected), abs(alpha) * np.linalg.norm(au) + abs(beta) * np.linalg.norm(av), 1e-300)
        if np.linalg.norm(combined - expected) > tol * scale:
            raise NumericalError(f'operator for {system.name!r} is not linear', iteration=probe)
        scale = max(np.linalg.norm(u) * np.linalg.norm(av), np.linalg.norm(au) * np.linalg.norm(v), 1e-300)
        if abs(u @ av - au @ v) > tol * scale:
            raise NumericalError(f'operator for {system.name!r} is not self-adjoint', iteration=probe)
        vv = float(v @ v)
        if v @ av < -tol * max(vv, math.sqrt(vv) * np.linalg.norm(av)):
            raise NumericalError(f'operator for {system.name!r} is not positive semi-definite', iteration=probe)


def quadratic_objective_value(system: LinearSystem, x: np.ndarray) -> float:
    """
    `φ(x) = ½ xᵀAx - xᵀb`, the quadratic conjugate gradient minimises.
    """
    flat = np.ravel(x)
    return float(0.5 * flat @ system.matvec(flat) - flat @ np.ravel(system.rhs))


def cg_solve(system: LinearSystem, x0: np.ndarray, config: Optional[CGConfig] = None) -> Tuple[np.ndarray, CGTrace]:
    """
    Conjugate gradient from `x0`.

    Returns:
        The final iterate (parameter-shaped) and its trace. A degenerate search direction stops the solve and
        returns the current iterate, so on consistent singular systems the answer stays in `x0 + range(A)`.

    ```py title="cg_solve"
    import numpy as np

    from subspace_merging import LinearSystem, ObjectiveKind, cg_solve

    a = np.array([[4.0, 1.0], [1.0, 3.0]])
    system = LinearSystem('x', ObjectiveKind.regmean, lambda x: a @ x, np.array([1.0, 2.0]))
    x, trace = cg_solve(system, np.zeros(2))
    assert np.allclose(x, [1 / 11, 7 / 11])
    assert trace.iterations <= 2 and trace.reason == 'converged'
    ```
    """
    config = config or CGConfig()
    b = np.ravel(system.rhs).astype(np.float64)
    x = np.array(np.ravel(x0), dtype=np.float64)
    if x.shape != b.shape:
        raise ContractError(f'initial point for {system.name!r} has {x.size} entries, expected {b.size}')
    b_norm = float(np.linalg.norm(b))
    threshold = config.rel_residual_tol * b_norm
    trace = CGTrace(rhs_norm=b_norm, iterates=[] if config.record_iterates else None)

    def record(x: np.ndarray, r_norm: float) -> None:
        trace.residual_norms.append(r_norm)
        trace.objective_values.append(float(0.5 * x @ system.matvec(x) - x @ b))
        if trace.iterates is not None:
            trace.iterates.append(x.reshape(system.shape).copy())

    r = b - system.matvec(x)
    p = r.copy()
    rr = float(r @ r)
    record(x, math.sqrt(rr))
    if math.sqrt(rr) <= threshold:
        trace.reason = 'converged'
        return x.reshape(system.shape), trace

    for iteration in range(1, config.max_iters + 1):
        ap = system.matvec(p)
        p_ap = float(p @ ap)
        if p_ap <= config.curvature_guard * float(p @ p):
            trace.reason = 'degenerate_curvature'
            break
        alpha = rr / p_ap
        x = x + alpha * p
        r = r - alpha * ap
        rr_next = float(r @ r)
        if not (math.isfinite(rr_next) and np.all(np.isfinite(x))):
            raise NumericalError(f'conjugate gradient diverged on {system.name!r}', iteration=iteration)
        record(x, math.sqrt(rr_next))
        if math.sqrt(rr_next) <= threshold:
            trace.reason = 'converged'
            break
        p = r + (rr_next / rr) * p
        rr = rr_next

    return x.reshape(system.shape), trace


def regmean_objective_value(models_data: Sequence[Tuple[np.ndarray, np.ndarray]], w: np.ndarray) -> float:
    """
    `Σ_m ‖O_m - Z_m W‖² / N_m` for captured layer inputs `Z_m` and outputs `O_m`.
    """
    total = 0.0
    for z, o in models_data:
        residual = np.asarray(o) - np.asarray(z) @ w
        total += float(np.sum(residual**2)) / z.shape[0]
    return total


InitMethod = Literal['average', 'task_arithmetic', 'ties', 'diag_fisher', 'regmean', 'pretrained', 'zero', 'provided']
INIT_METHODS: Tuple[InitMethod, ...] = (
    'average',
    'task_arithmetic',
    'ties',
    'diag_fisher',
    'regmean',
    'pretrained',
    'zero',
    'provided',
)


def _initial_point(
    init_method: str,
    models: Sequence[Checkpoint],
    stats: Optional[Sequence[StatsBundle]],
    pretrained: Optional[Checkpoint],
    init: Optional[Checkpoint],
    hyperparams: Optional[MergeHyperparams],
) -> Checkpoint:
    if init_method == 'pretrained':
        if pretrained is None:
            raise ContractError('init "pretrained" needs the pretrained checkpoint')
        return pretrained
    if init_method == 'zero':
        return models[0].replace({name: np.zeros_like(models[0][name]) for name in models[0].names})
    if init_method == 'provided':
        if init is None:
            raise ContractError('init "provided" needs an initial checkpoint')
        return init
    return closed_form_merge(
        init_method, models, stats=stats, pretrained=pretrained, hyperparams=hyperparams  # type: ignore[arg-type]
    )


def mats_merge(
    models: Sequence[Checkpoint],
    stats: Optional[Sequence[StatsBundle]],
    objective: MergeObjective,
    init_method: InitMethod = 'task_arithmetic',
    *,
    init_hyperparams: Optional[MergeHyperparams] = None,
    cg_config: Optional[CGConfig] = None,
    pretrained: Optional[Checkpoint] = None,
    init: Optional[Checkpoint] = None,
) -> Tuple[Checkpoint, Dict[str, CGTrace]]:
    """
    Merge by solving every parameter's linear system with conjugate gradient, starting from the parameter's
    value in an initial merge.

    Args:
        models: Fine-tuned models, mergeable.
        stats: One statistics bundle per model (may be `None` for the `average` objective with an init that
            needs none).
        objective: Objective defining the systems; parameters it does not cover use diagonal Fisher merging.
        init_method: Closed-form merge, `pretrained`, `zero`, or `provided` (then `init` is used).
        init_hyperparams: Hyperparameters of the initial merge.
        cg_config: Solver settings.
        pretrained: The shared starting model, needed by `task_arithmetic`, `ties` and `pretrained` inits.
        init: Explicit initial checkpoint for `provided`.

    Returns:
        The merged checkpoint and a trace per solved parameter. The provenance records the objective applied
        to each parameter, the init, and the iteration counts.
    """
    cg_config = cg_config or CGConfig()
    assert_mergeable(models)
    ordered, ordered_stats = order_models(models, stats)
    start = _initial_point(init_method, ordered, ordered_stats, pretrained, init, init_hyperparams)
    assert_mergeable([start, ordered[0]])

    params: Dict[str, np.ndarray] = {}
    traces: Dict[str, CGTrace] = {}
    kinds: Dict[str, str] = {}
    fallback: List[str] = []
    for name in ordered[0].names:
        kind = objective_kind_for(objective, name, ordered[0].roles[name], ordered_stats)
        if kind is None:
            if ordered_stats is None:
                raise ObjectiveError(
                    f'fallback merge of {name!r} needs statistics', param=name, statistic='diag_fisher'
                )
            params[name] = _diag_fisher_param(name, ordered, ordered_stats, None)
            kinds[name] = 'diag_fisher_closed_form'
            fallback.append(name)
            continue
        system = build_system(objective, name, ordered, ordered_stats)
        if cg_config.check_operator:
            check_system(system, make_rng(0))
        params[name], traces[name] = cg_solve(system, start[name], cg_config)
        kinds[name] = kind.value
        logger.debug(
            '%s: %s after %d iterations, relative residual %.3e',
            name,
            traces[name].reason,
            traces[name].iterations,
            traces[name].relative_residual,
        )

    provenance = {
        'task': 'merged',
        'method': 'mats',
        'objective': objective.kind.value,
        'init': init_method,
        'tasks': [m.task for m in ordered],
        'kinds': kinds,
        'diag_fisher_fallback': fallback,
        'iterations': {name: trace.iterations for name, trace in traces.items()},
        'cg_max_iters': cg_config.max_iters,
    }
    return ordered[0].replace(params, provenance), traces


class MergeRound(FrozenModel):
    """
    One step of a multi-round recipe. Rounds after the first start from the previous output unless
    `init_from_previous` is off, in which case `init_method` is used as in the first round.
    """

    objective: MergeObjective
    cg_config: CGConfig = CGConfig()
    init_from_previous: bool = True
    init_method: InitMethod = 'task_arithmetic'


def multi_round(
    models: Sequence[Checkpoint],
    stats: Optional[Sequence[StatsBundle]],
    recipe: Sequence[MergeRound],
    *,
    pretrained: Optional[Checkpoint] = None,
    init_hyperparams: Optional[MergeHyperparams] = None,
) -> Tuple[Checkpoint, List[Dict[str, CGTrace]]]:
    """
    Chain [`mats_merge`][subspace_merging.mats_merge] calls, each round initialised at the previous output.
    """
    if not recipe:
        raise ValueError('a merge recipe needs at least one round')
    merged: Optional[Checkpoint] = None
    all_traces = []
    for index, step in enumerate(recipe):
        chained = merged is not None and step.init_from_previous
        merged, traces = mats_merge(
            models,
            stats,
            step.objective,
            'provided' if chained else step.init_method,
            init_hyperparams=init_hyperparams,
            cg_config=step.cg_config,
            pretrained=pretrained,
            init=merged if chained else None,
        )
        logger.info('round %d (%s) done', index, step.objective.kind.value)
        all_traces.append(traces)
    assert merged is not None
    provenance = dict(merged.provenance, method='mats_multi_round', rounds=[r.objective.kind.value for r in recipe])
    return merged.replace(provenance=provenance), all_traces


def traces_to_json(traces: Dict[str, CGTrace]) -> Dict[str, Any]:
    """
    JSON-ready form of per-parameter traces, the sidecar written next to merged checkpoints.
    """
    return {name: trace.as_dict() for name, trace in traces.items()}
