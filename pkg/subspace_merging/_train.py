from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field, model_validator

from ._checkpoint import Checkpoint, Role
from ._errors import ConfigError, ContractError, DivergenceError, ShapeError
from ._tensor import Rng, make_rng, spawn_rngs
from ._utils import FrozenModel

__all__ = (
    'Split',
    'SPLITS',
    'MlpSpec',
    'TaskDataset',
    'TaskSplits',
    'LayerCache',
    'ForwardCache',
    'CaptureRecord',
    'CaptureHook',
    'TrainConfig',
    'SuiteConfig',
    'check_params',
    'init_params',
    'forward',
    'log_likelihood',
    'backward',
    'predict',
    'evaluate',
    'train',
    'train_multitask',
    'prototypes',
    'gen_synthetic_tasks',
    'pretraining_task',
    'dataset_to_checkpoint',
    'dataset_from_checkpoint',
)

logger = logging.getLogger('subspace_merging.train')

Split = Literal['train', 'validation', 'test']
SPLITS: Tuple[Split, ...] = ('train', 'validation', 'test')

# called with (weight name, per-example output gradients), returns the gradients to use instead
CaptureHook = Callable[[str, np.ndarray], np.ndarray]


class MlpSpec(FrozenModel):
    """
    Shape of a tanh MLP classifier.

    Each `(d_in, k_out)` pair is one linear layer. With `use_bias` the layer input is augmented with a constant
    1, so `layers.{i}.weight` has shape `(d_in + 1, k_out)` and the bias is its last row. With `use_scales`
    every layer also owns a `layers.{i}.scale` vector multiplying its outputs elementwise.
    """

    layer_dims: Tuple[Tuple[int, int], ...]
    use_bias: bool = True
    use_scales: bool = False

    @model_validator(mode='after')
    def _check_chain(self) -> MlpSpec:
        if not self.layer_dims:
            raise ValueError('an MLP needs at least one layer')
        for index, (d_in, k_out) in enumerate(self.layer_dims):
            if d_in < 1 or k_out < 1:
                raise ValueError(f'layer {index} has non-positive dimensions ({d_in}, {k_out})')
            if index and self.layer_dims[index - 1][1] != d_in:
                previous = self.layer_dims[index - 1][1]
                raise ValueError(f'layer {index} takes {d_in} inputs but layer {index - 1} has {previous} outputs')
        return self

    @classmethod
    def from_widths(cls, widths: Sequence[int], *, use_bias: bool = True, use_scales: bool = False) -> MlpSpec:
        """
        `from_widths([16, 32, 4])` is the 16→32→4 network.
        """
        dims = tuple((widths[i], widths[i + 1]) for i in range(len(widths) - 1))
        return cls(layer_dims=dims, use_bias=use_bias, use_scales=use_scales)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0][0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1][1]

    @staticmethod
    def weight_name(index: int) -> str:
        return f'layers.{index}.weight'

    @staticmethod
    def scale_name(index: int) -> str:
        return f'layers.{index}.scale'

    def param_shapes(self) -> Dict[str, Tuple[Role, Tuple[int, ...]]]:
        shapes: Dict[str, Tuple[Role, Tuple[int, ...]]] = {}
        for index, (d_in, k_out) in enumerate(self.layer_dims):
            shapes[self.weight_name(index)] = (Role.linear_weight, (d_in + int(self.use_bias), k_out))
            if self.use_scales:
                shapes[self.scale_name(index)] = (Role.vector, (k_out,))
        return shapes


@dataclass(eq=False)
class TaskDataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str
    task_name: str
    num_classes: int

    def __post_init__(self) -> None:
        self.inputs = np.array(self.inputs, dtype=np.float64)
        self.labels = np.array(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ShapeError(f'inputs must be a non-empty 2-dimensional array, got shape {self.inputs.shape}')
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(f'expected {self.inputs.shape[0]} labels, got shape {self.labels.shape}')
        if self.split not in SPLITS:
            raise ValueError(f'unknown split {self.split!r}')
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f'labels must lie in [0, {self.num_classes})')
        self.inputs.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def repeat(self, times: int) -> TaskDataset:
        return TaskDataset(
            np.tile(self.inputs, (times, 1)), np.tile(self.labels, times), self.split, self.task_name, self.num_classes
        )

    def take(self, indices: np.ndarray) -> TaskDataset:
        return TaskDataset(self.inputs[indices], self.labels[indices], self.split, self.task_name, self.num_classes)


TaskSplits = Dict[str, TaskDataset]


@dataclass
class LayerCache:
    # layer input, with the constant column appended when the spec uses biases
    inputs: np.ndarray
    # z @ W
    linear: np.ndarray
    # linear output times the scale vector (same as `linear` without scales)
    outputs: np.ndarray


@dataclass
class ForwardCache:
    layers: List[LayerCache] = field(default_factory=list)


@dataclass
class CaptureRecord:
    """
    Per-example quantities captured during [`backward`][subspace_merging.backward].

    `inputs[w]` is `Z` (N x d) and `outgrads[w]` is `O′` (N x k) for every linear weight `w`: row `n` of `O′`
    is the gradient of the example's log-probability with respect to the layer's linear output `z W`.
    `scale_grads[s]` holds per-example gradients of scale vectors.
    """

    inputs: Dict[str, np.ndarray] = field(default_factory=dict)
    outgrads: Dict[str, np.ndarray] = field(default_factory=dict)
    scale_grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def per_example(self, name: str) -> np.ndarray:
        """
        Per-example gradients of one parameter as an `N x size` matrix, rows flattened row-major.

        For a linear weight row `n` is `outer(z_n, o′_n).ravel()`.
        """
        if name in self.scale_grads:
            return self.scale_grads[name]
        z, g = self.inputs[name], self.outgrads[name]
        return np.einsum('ni,nj->nij', z, g).reshape(z.shape[0], -1)


def check_params(spec: MlpSpec, params: Checkpoint) -> None:
    expected = spec.param_shapes()
    actual = params.shape_map()
    for name, (role, shape) in expected.items():
        if name not in actual:
            raise ShapeError(f'missing parameter {name!r}')
        if actual[name] != (role, shape):
            got_role, got_shape = actual[name]
            raise ShapeError(f'parameter {name!r} should be {role.value}{shape}, got {got_role.value}{got_shape}')
    for name in actual:
        if name not in expected:
            raise ShapeError(f'unexpected parameter {name!r}')


def init_params(spec: MlpSpec, seed: int) -> Checkpoint:
    """
    Random initial parameters: weights drawn from `N(0, 1/d_in)` with zero bias rows, scales set to one.
    """
    rng = make_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for index, (d_in, k_out) in enumerate(spec.layer_dims):
        weight = rng.standard_normal((d_in, k_out)) / np.sqrt(d_in)
        if spec.use_bias:
            weight = np.vstack([weight, np.zeros((1, k_out))])
        params[spec.weight_name(index)] = weight
        if spec.use_scales:
            params[spec.scale_name(index)] = np.ones(k_out)
    roles = {name: role for name, (role, _) in spec.param_shapes().items()}
    return Checkpoint(params, roles, {'task': 'init', 'seed': seed, 'step': 0})


def _augment(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    if spec.use_bias:
        return np.hstack([z, np.ones((z.shape[0], 1))])
    return z


def forward(spec: MlpSpec, params: Checkpoint, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """
    Logits for a batch of inputs, tanh between layers and identity at the output.

    ```py title="forward"
    import numpy as np

    from subspace_merging import Checkpoint, MlpSpec, forward

    spec = MlpSpec.from_widths([2, 2], use_bias=False)
    params = Checkpoint.build({'layers.0.weight': np.eye(2)})
    logits, cache = forward(spec, params, np.array([[1.0, 0.0]]))
    assert logits.tolist() == [[1.0, 0.0]]
    ```
    """
    check_params(spec, params)
    z = np.asarray(inputs, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != spec.input_dim:
        raise ShapeError(f'inputs must have shape (N, {spec.input_dim}), got {z.shape}')
    cache = ForwardCache()
    n_layers = len(spec.layer_dims)
    for index in range(n_layers):
        augmented = _augment(spec, z)
        linear = augmented @ params[spec.weight_name(index)]
        outputs = linear * params[spec.scale_name(index)] if spec.use_scales else linear
        cache.layers.append(LayerCache(augmented, linear, outputs))
        z = np.tanh(outputs) if index < n_layers - 1 else outputs
    return z, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    exp = np.exp(logits - logits.max(axis=1, keepdims=True))
    return exp / exp.sum(axis=1, keepdims=True)


def _labels(labels: np.ndarray, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f'expected {n} labels, got shape {labels.shape}')
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f'labels must lie in [0, {classes})')
    return labels


def log_likelihood(spec: MlpSpec, params: Checkpoint, inputs: np.ndarray, labels: np.ndarray) -> float:
    """
    Mean log-probability of `labels`, the quantity whose gradient `backward` returns.
    """
    logits, _ = forward(spec, params, inputs)
    labels = _labels(labels, logits.shape[0], spec.num_classes)
    return float(np.mean(_log_softmax(logits)[np.arange(len(labels)), labels]))


def _backprop(
    spec: MlpSpec,
    params: Checkpoint,
    inputs: np.ndarray,
    labels: np.ndarray,
    capture_hook: Optional[CaptureHook],
) -> Tuple[float, Dict[str, np.ndarray], CaptureRecord]:
    logits, cache = forward(spec, params, inputs)
    n, classes = logits.shape
    labels = _labels(labels, n, classes)
    log_probs = _log_softmax(logits)
    ll = float(np.mean(log_probs[np.arange(n), labels]))

    # per-example gradient of log p(y|x) with respect to the current layer's (scaled) output
    grad = np.eye(classes)[labels] - _softmax(logits)
    grads: Dict[str, np.ndarray] = {}
    capture = CaptureRecord()
    for index in reversed(range(len(spec.layer_dims))):
        layer = cache.layers[index]
        weight_name = spec.weight_name(index)
        if spec.use_scales:
            scale_name = spec.scale_name(index)
            per_example = grad * layer.linear
            capture.scale_grads[scale_name] = per_example
            grads[scale_name] = per_example.mean(axis=0)
            grad = grad * params[scale_name]
        if capture_hook is not None:
            hooked = np.asarray(capture_hook(weight_name, grad), dtype=np.float64)
            if hooked.shape != grad.shape:
                raise ShapeError(f'capture hook for {weight_name!r} returned shape {hooked.shape} not {grad.shape}')
            grad = hooked
        capture.inputs[weight_name] = layer.inputs
        capture.outgrads[weight_name] = grad
        grads[weight_name] = layer.inputs.T @ grad / n
        if index:
            upstream = grad @ params[weight_name].T
            if spec.use_bias:
                upstream = upstream[:, :-1]
            activation = layer.inputs[:, : spec.layer_dims[index][0]]
            grad = upstream * (1.0 - activation**2)

    order = list(spec.param_shapes())
    grads = {name: grads[name] for name in order}
    capture.inputs = {name: capture.inputs[name] for name in order if name in capture.inputs}
    capture.outgrads = {name: capture.outgrads[name] for name in order if name in capture.outgrads}
    capture.scale_grads = {name: capture.scale_grads[name] for name in order if name in capture.scale_grads}
    return ll, grads, capture


def backward(
    spec: MlpSpec,
    params: Checkpoint,
    inputs: np.ndarray,
    labels: np.ndarray,
    *,
    capture_hook: Optional[CaptureHook] = None,
) -> Tuple[Checkpoint, CaptureRecord]:
    """
    Gradient of the mean log-probability of `labels` with respect to every parameter.

    Args:
        spec: Network shape.
        params: Parameters matching `spec`.
        inputs: `N x d_in` batch.
        labels: Target label per example, ground truth or sampled.
        capture_hook: Optional function replacing the captured output gradients of a linear weight; the
            replacement also flows into that weight's gradient and into earlier layers.

    Returns:
        A checkpoint-shaped gradient (each linear weight gets `Zᵀ O′ / N`) and the captured per-example
        activations and output gradients.

    ```py title="backward"
    import numpy as np

    from subspace_merging import MlpSpec, backward, init_params

    spec = MlpSpec.from_widths([2, 2], use_bias=False)
    params = init_params(spec, seed=0).replace({'layers.0.weight': np.zeros((2, 2))})
    grads, capture = backward(spec, params, np.array([[1.0, 0.0]]), np.array([0]))
    assert grads['layers.0.weight'].tolist() == [[0.5, -0.5], [0.0, 0.0]]
    assert capture.outgrads['layers.0.weight'].tolist() == [[0.5, -0.5]]
    ```
    """
    _, grads, capture = _backprop(spec, params, inputs, labels, capture_hook)
    return params.replace(grads, {'kind': 'gradient'}), capture


def predict(spec: MlpSpec, params: Checkpoint, inputs: np.ndarray) -> np.ndarray:
    """
    Argmax class per example; ties go to the lowest class index.
    """
    logits, _ = forward(spec, params, inputs)
    return np.argmax(logits, axis=1)


def evaluate(spec: MlpSpec, params: Checkpoint, dataset: TaskDataset) -> float:
    """
    Fraction of examples whose argmax prediction matches the label.
    """
    return float(np.mean(predict(spec, params, dataset.inputs) == dataset.labels))


class TrainConfig(FrozenModel):
    """
    Plain SGD on the cross-entropy loss.

    `trainable` selects what moves: `all` parameters, only `weights`, or only the `scales` vectors
    (weights frozen, the parameter-efficient setting).
    """

    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(32, gt=0)
    steps: int = Field(500, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)
    trainable: Literal['all', 'weights', 'scales'] = 'all'


def _trainable(spec: MlpSpec, config: TrainConfig) -> List[str]:
    shapes = spec.param_shapes()
    if config.trainable == 'scales':
        if not spec.use_scales:
            raise ConfigError('trainable="scales" needs an MLP with use_scales')
        return [name for name, (role, _) in shapes.items() if role is Role.vector]
    if config.trainable == 'weights':
        return [name for name, (role, _) in shapes.items() if role is Role.linear_weight]
    return list(shapes)


class _Batches:
    """
    Endless minibatch index stream, reshuffled every epoch.
    """

    def __init__(self, n: int, batch_size: int, rng: Rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.position = 0

    def next(self) -> np.ndarray:
        if self.position + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.position = 0
        batch = self.order[self.position : self.position + self.batch_size]
        self.position += self.batch_size
        return batch


def _sgd(
    spec: MlpSpec,
    init: Checkpoint,
    config: TrainConfig,
    next_batch: Callable[[int], Tuple[np.ndarray, np.ndarray]],
    provenance: Dict[str, object],
) -> Checkpoint:
    names = _trainable(spec, config)
    check_params(spec, init)
    params = init
    values = {name: np.array(init[name]) for name in names}
    for step in range(config.steps):
        inputs, labels = next_batch(step)
        ll, grads, _ = _backprop(spec, params, inputs, labels, None)
        if not np.isfinite(ll):
            raise DivergenceError('loss is not finite', step=step)
        for name in names:
            values[name] += config.lr * grads[name]
            if not np.all(np.isfinite(values[name])):
                raise DivergenceError(f'parameter {name!r} is not finite', step=step)
        params = params.replace(values)
        if step % 100 == 0:
            logger.debug('%s step %d: log-likelihood %.6f', provenance['task'], step, ll)
    return params.replace(provenance=provenance)


def train(spec: MlpSpec, init: Checkpoint, dataset: TaskDataset, config: TrainConfig) -> Checkpoint:
    """
    Fine-tune `init` on one dataset, a pure function of its arguments.

    With zero steps `init` is returned as is.
    """
    if config.steps == 0:
        return init
    rng = make_rng(config.seed)
    batches = _Batches(len(dataset), config.batch_size, rng)

    def next_batch(step: int) -> Tuple[np.ndarray, np.ndarray]:
        index = batches.next()
        return dataset.inputs[index], dataset.labels[index]

    logger.info('training %s for %d steps', dataset.task_name, config.steps)
    provenance = {
        'task': dataset.task_name,
        'seed': config.seed,
        'step': config.steps,
        'trainable': config.trainable,
        'parent': init.task,
    }
    return _sgd(spec, init, config, next_batch, provenance)


def train_multitask(
    spec: MlpSpec, init: Checkpoint, datasets: Sequence[TaskDataset], config: TrainConfig
) -> Checkpoint:
    """
    Train one model on all datasets with task-balanced sampling: step `t` draws its batch from task
    `t mod M`, tasks ordered by name.
    """
    if not datasets:
        raise ConfigError('multitask training needs at least one dataset')
    if config.steps == 0:
        return init
    ordered = sorted(datasets, key=lambda d: d.task_name)
    streams = [
        _Batches(len(d), config.batch_size, rng) for d, rng in zip(ordered, spawn_rngs(config.seed, len(ordered)))
    ]

    def next_batch(step: int) -> Tuple[np.ndarray, np.ndarray]:
        task = step % len(ordered)
        index = streams[task].next()
        return ordered[task].inputs[index], ordered[task].labels[index]

    logger.info('multitask training on %d tasks for %d steps', len(ordered), config.steps)
    provenance = {
        'task': 'multitask',
        'tasks': [d.task_name for d in ordered],
        'seed': config.seed,
        'step': config.steps,
        'trainable': config.trainable,
        'parent': init.task,
    }
    return _sgd(spec, init, config, next_batch, provenance)


class SuiteConfig(FrozenModel):
    """
    Synthetic task suite: Gaussian-mixture classification tasks sharing class prototypes.

    Base prototype `c` sits at `separation / √2 · e_c` (pairwise distance `separation`, in units of `noise`).
    Task `m` rotates the prototypes by a random orthogonal matrix close to the identity (`rotation_scale`)
    and shifts them by a random offset (`offset_scale`).
    """

    num_tasks: int = Field(8, ge=1)
    classes: int = 4
    input_dim: int = Field(16, ge=1)
    separation: float = Field(4.0, gt=0)
    noise: float = Field(1.0, gt=0)
    rotation_scale: float = Field(0.5, ge=0)
    offset_scale: float = Field(0.5, ge=0)
    train_size: int = Field(2000, gt=0)
    validation_size: int = Field(500, gt=0)
    test_size: int = Field(500, gt=0)
    seed: int = Field(0, ge=0, lt=2**63)
    task_seeds: Optional[Tuple[int, ...]] = None
    task_names: Optional[Tuple[str, ...]] = None

    def names(self) -> Tuple[str, ...]:
        if self.task_names is not None:
            return self.task_names
        return tuple(f'task{index}' for index in range(self.num_tasks))

    def split_size(self, split: str) -> int:
        return {'train': self.train_size, 'validation': self.validation_size, 'test': self.test_size}[split]


# spawn key reserved for the pretraining task, far above any task index
_PRETRAIN_KEY = 2**31


def _check_suite(config: SuiteConfig) -> None:
    if config.classes < 2:
        raise ConfigError(f'a task needs at least 2 classes, got {config.classes}')
    if config.classes > config.input_dim:
        raise ConfigError(f'{config.classes} prototypes do not fit in {config.input_dim} input dimensions')
    if config.task_seeds is not None and len(config.task_seeds) != config.num_tasks:
        raise ConfigError(f'expected {config.num_tasks} task seeds, got {len(config.task_seeds)}')
    if config.task_names is not None:
        if len(config.task_names) != config.num_tasks:
            raise ConfigError(f'expected {config.num_tasks} task names, got {len(config.task_names)}')
        if len(set(config.task_names)) != len(config.task_names):
            raise ConfigError('task names must be unique')


def _task_rng(config: SuiteConfig, index: int) -> Rng:
    if config.task_seeds is not None:
        return make_rng(config.task_seeds[index])
    sequence = np.random.SeedSequence(config.seed, spawn_key=(index,))
    return np.random.Generator(np.random.PCG64(sequence))


def _base_prototypes(config: SuiteConfig) -> np.ndarray:
    base = np.zeros((config.classes, config.input_dim))
    base[np.arange(config.classes), np.arange(config.classes)] = config.separation / np.sqrt(2.0)
    return base


def _task_prototypes(config: SuiteConfig, rng: Rng) -> np.ndarray:
    base = _base_prototypes(config)
    d = config.input_dim
    if config.rotation_scale > 0:
        q, r = np.linalg.qr(np.eye(d) + config.rotation_scale * rng.standard_normal((d, d)))
        rotation = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        base = base @ rotation.T
    if config.offset_scale > 0:
        base = base + config.offset_scale * rng.standard_normal(d)
    return base


def prototypes(config: SuiteConfig, task_index: int) -> np.ndarray:
    """
    Class prototypes (classes x input_dim) of one task.
    """
    _check_suite(config)
    return _task_prototypes(config, _task_rng(config, task_index))


def _sample_splits(config: SuiteConfig, name: str, centers: np.ndarray, rng: Rng) -> TaskSplits:
    splits: TaskSplits = {}
    for split in SPLITS:
        n = config.split_size(split)
        labels = rng.permutation(np.arange(n) % config.classes)
        inputs = centers[labels] + config.noise * rng.standard_normal((n, config.input_dim))
        splits[split] = TaskDataset(inputs, labels, split, name, config.classes)
    return splits


def gen_synthetic_tasks(config: SuiteConfig) -> List[TaskSplits]:
    """
    Generate the task suite, one `{split: TaskDataset}` mapping per task, fully determined by the config.

    ```py title="gen_synthetic_tasks"
    from subspace_merging import SuiteConfig, gen_synthetic_tasks

    config = SuiteConfig(num_tasks=2, classes=3, input_dim=4, train_size=30, validation_size=9, test_size=9)
    tasks = gen_synthetic_tasks(config)
    assert [t['train'].task_name for t in tasks] == ['task0', 'task1']
    assert tasks[0]['validation'].inputs.shape == (9, 4)
    ```
    """
    _check_suite(config)
    tasks = []
    for index, name in enumerate(config.names()):
        rng = _task_rng(config, index)
        centers = _task_prototypes(config, rng)
        tasks.append(_sample_splits(config, name, centers, rng))
    logger.info('generated %d tasks', len(tasks))
    return tasks


def pretraining_task(config: SuiteConfig) -> TaskSplits:
    """
    The un-rotated, un-shifted base task every task model is fine-tuned from.
    """
    _check_suite(config)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(_PRETRAIN_KEY,))))
    return _sample_splits(config, 'pretrain', _base_prototypes(config), rng)


def dataset_to_checkpoint(dataset: TaskDataset) -> Checkpoint:
    """
    Wrap a dataset in a checkpoint so it can be stored in the same container.
    """
    return Checkpoint(
        {'inputs': dataset.inputs, 'labels': dataset.labels.astype(np.float64)},
        {'inputs': Role.linear_weight, 'labels': Role.vector},
        {
            'kind': 'dataset',
            'task': dataset.task_name,
            'split': dataset.split,
            'num_classes': dataset.num_classes,
        },
    )


def dataset_from_checkpoint(ckpt: Checkpoint) -> TaskDataset:
    if ckpt.provenance.get('kind') != 'dataset':
        raise ContractError('checkpoint does not hold a dataset')
    return TaskDataset(
        ckpt['inputs'],
        ckpt['labels'].astype(np.int64),
        ckpt.provenance['split'],
        ckpt.provenance['task'],
        ckpt.provenance['num_classes'],
    )
