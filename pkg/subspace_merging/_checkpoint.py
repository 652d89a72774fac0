from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ._errors import FormatError, MergeabilityError, ShapeError, StatsError
from ._utils import canonical_json

__all__ = (
    'Role',
    'FisherMode',
    'Checkpoint',
    'LayerStats',
    'StatsBundle',
    'STATISTICS',
    'dumps',
    'loads',
    'save',
    'load',
    'assert_mergeable',
)

MAGIC = b'MATSCKPT'
FORMAT_VERSION = 1
KIND_CHECKPOINT = 0
KIND_STATS = 1

# magic, version, kind, header length
_PREFIX = struct.Struct('<8sBBQ')
_CRC = struct.Struct('<I')
_FLOAT = np.dtype('<f8')


class Role(str, Enum):
    linear_weight = 'linear_weight'
    vector = 'vector'


class FisherMode(str, Enum):
    empirical = 'empirical'
    true = 'true'


def _frozen(value: Any) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True, order='C')
    arr.flags.writeable = False
    return arr


@dataclass(eq=False)
class Checkpoint:
    """
    Ordered, named set of parameter tensors.

    Every entry has a role: `linear_weight` entries are `d x k` matrices (inputs times outputs, a bias row
    included when the layer has one), `vector` entries are 1-D. Arrays are copied on construction and made
    read-only. `provenance` is free JSON-compatible metadata (task name, seed, step, merge method...).
    """

    params: Dict[str, np.ndarray]
    roles: Dict[str, Role]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if list(self.params) != list(self.roles):
            raise ShapeError('params and roles must list the same names in the same order')
        params = {}
        roles = {}
        for name, value in self.params.items():
            arr = _frozen(value)
            role = Role(self.roles[name])
            if role is Role.linear_weight and arr.ndim != 2:
                raise ShapeError(f'linear weight {name!r} must be 2-dimensional, got shape {arr.shape}')
            if role is Role.vector and arr.ndim != 1:
                raise ShapeError(f'vector {name!r} must be 1-dimensional, got shape {arr.shape}')
            params[name] = arr
            roles[name] = role
        self.params = params
        self.roles = roles

    @classmethod
    def build(cls, params: Mapping[str, Any], provenance: Optional[Dict[str, Any]] = None) -> Checkpoint:
        """
        Build a checkpoint inferring roles from dimensionality: 2-D arrays are linear weights, 1-D are vectors.

        ```py title="Checkpoint.build"
        import numpy as np

        from subspace_merging import Checkpoint

        ckpt = Checkpoint.build({'w': np.ones((2, 3)), 's': np.ones(3)}, {'task': 'a'})
        assert ckpt.names == ('w', 's')
        assert ckpt.roles['w'] == 'linear_weight'
        assert ckpt.task == 'a'
        ```
        """
        roles = {}
        for name, value in params.items():
            ndim = np.ndim(value)
            if ndim == 2:
                roles[name] = Role.linear_weight
            elif ndim == 1:
                roles[name] = Role.vector
            else:
                raise ShapeError(f'cannot infer a role for {name!r} with {ndim} dimensions')
        return cls(dict(params), roles, dict(provenance or {}))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.params)

    @property
    def task(self) -> str:
        return str(self.provenance.get('task', ''))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def shape_map(self) -> Dict[str, Tuple[Role, Tuple[int, ...]]]:
        return {name: (self.roles[name], arr.shape) for name, arr in self.params.items()}

    def replace(
        self, params: Optional[Mapping[str, Any]] = None, provenance: Optional[Dict[str, Any]] = None
    ) -> Checkpoint:
        """
        Copy with some parameter values and/or the provenance swapped, names and roles are kept.
        """
        new_params = dict(self.params)
        if params is not None:
            for name, value in params.items():
                if name not in new_params:
                    raise ShapeError(f'unknown parameter {name!r}')
                if np.shape(value) != new_params[name].shape:
                    raise ShapeError(f'{name!r} has shape {new_params[name].shape}, got {np.shape(value)}')
                new_params[name] = value
        return Checkpoint(new_params, dict(self.roles), dict(self.provenance if provenance is None else provenance))

    def flatten(self) -> np.ndarray:
        """
        All parameters as one vector, concatenated in sorted name order.
        """
        if not self.params:
            return np.zeros(0)
        return np.concatenate([self.params[name].ravel() for name in sorted(self.params)])

    def unflatten(self, vector: np.ndarray, provenance: Optional[Dict[str, Any]] = None) -> Checkpoint:
        """
        Inverse of `flatten`, values come from `vector`, names and roles from this checkpoint.
        """
        vector = np.asarray(vector, dtype=np.float64)
        total = sum(arr.size for arr in self.params.values())
        if vector.shape != (total,):
            raise ShapeError(f'expected a vector of {total} values, got shape {vector.shape}')
        params = {}
        start = 0
        for name in sorted(self.params):
            arr = self.params[name]
            params[name] = vector[start : start + arr.size].reshape(arr.shape)
            start += arr.size
        return self.replace(params, provenance)

    def same_values(self, other: Checkpoint) -> bool:
        """
        Exact equality of names, roles and every value, provenance is ignored.
        """
        return self.shape_map() == other.shape_map() and all(
            np.array_equal(arr, other.params[name]) for name, arr in self.params.items()
        )

    def fingerprint(self) -> str:
        """
        sha256 of the parameter bytes in container order, independent of provenance.
        """
        digest = hashlib.sha256()
        for name, arr in self.params.items():
            digest.update(name.encode())
            digest.update(arr.astype(_FLOAT).tobytes())
        return digest.hexdigest()


STATISTICS = 'diag_fisher', 'input_gram', 'outgrad_gram', 'exact_fisher'


@dataclass(eq=False)
class LayerStats:
    """
    Statistics for one parameter.

    `diag_fisher` is shaped like the parameter; `input_gram` (`ZᵀZ / N`) and `outgrad_gram` (`O′ᵀO′ / N`)
    only exist for linear weights; `exact_fisher` is the dense Fisher of a vector parameter, when requested.
    """

    diag_fisher: np.ndarray
    n_examples: int
    input_gram: Optional[np.ndarray] = None
    outgrad_gram: Optional[np.ndarray] = None
    exact_fisher: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.n_examples <= 0:
            raise StatsError(f'n_examples must be positive, got {self.n_examples}')
        self.diag_fisher = _frozen(self.diag_fisher)
        for statistic in STATISTICS[1:]:
            value = getattr(self, statistic)
            if value is not None:
                setattr(self, statistic, _frozen(value))

    def get(self, statistic: str) -> Optional[np.ndarray]:
        if statistic not in STATISTICS:
            raise KeyError(statistic)
        return getattr(self, statistic)  # type: ignore[no-any-return]

    def present(self) -> List[str]:
        return [s for s in STATISTICS if getattr(self, s) is not None]


@dataclass(eq=False)
class StatsBundle:
    """
    Per-parameter [`LayerStats`][subspace_merging.LayerStats] for one model, keyed like its checkpoint.
    """

    layers: Dict[str, LayerStats]
    fisher_mode: FisherMode
    split: str
    n_examples: int
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.fisher_mode = FisherMode(self.fisher_mode)
        if self.n_examples <= 0:
            raise StatsError(f'n_examples must be positive, got {self.n_examples}')

    def __getitem__(self, name: str) -> LayerStats:
        return self.layers[name]

    def __contains__(self, name: object) -> bool:
        return name in self.layers

    @property
    def task(self) -> str:
        return str(self.provenance.get('task', ''))

    def check_keys(self, checkpoint: Checkpoint) -> None:
        """
        Raise `StatsError` unless every statistic refers to a checkpoint parameter of matching shape.
        """
        for name, layer in self.layers.items():
            if name not in checkpoint.params:
                raise StatsError(f'statistics for unknown parameter {name!r}')
            if layer.diag_fisher.shape != checkpoint.params[name].shape:
                raise StatsError(f'diagonal Fisher for {name!r} does not match the parameter shape')


Storable = Union[Checkpoint, StatsBundle]


def _entries(obj: Storable) -> List[Tuple[str, np.ndarray, Dict[str, Any]]]:
    if isinstance(obj, Checkpoint):
        return [(name, arr, {'role': obj.roles[name].value}) for name, arr in obj.params.items()]
    entries = []
    for param, layer in obj.layers.items():
        for statistic in layer.present():
            entries.append((f'{param}/{statistic}', layer.get(statistic), {'param': param, 'statistic': statistic}))
    return entries  # type: ignore[return-value]


def dumps(obj: Storable) -> bytes:
    """
    Encode a checkpoint or statistics bundle in the `MATSCKPT` container format.

    Layout: 8-byte magic, 1-byte version, 1-byte kind (0 checkpoint, 1 statistics), little-endian u64 header
    length, UTF-8 JSON header with sorted keys, payload of row-major little-endian float64 values, and a
    little-endian u32 CRC-32 of the payload.
    """
    header_entries: Dict[str, Any] = {}
    chunks = []
    offset = 0
    for key, arr, meta in _entries(obj):
        data = np.ascontiguousarray(arr, dtype=_FLOAT).tobytes()
        header_entries[key] = {'shape': list(arr.shape), 'offset': offset, 'length': len(data), **meta}
        chunks.append(data)
        offset += len(data)

    header: Dict[str, Any] = {'entries': header_entries, 'provenance': obj.provenance}
    if isinstance(obj, StatsBundle):
        kind = KIND_STATS
        header.update(
            fisher_mode=obj.fisher_mode.value,
            split=obj.split,
            n_examples=obj.n_examples,
            layers={name: {'n_examples': layer.n_examples} for name, layer in obj.layers.items()},
        )
    else:
        kind = KIND_CHECKPOINT

    header_bytes = canonical_json(header).encode()
    payload = b''.join(chunks)
    return b''.join(
        [
            _PREFIX.pack(MAGIC, FORMAT_VERSION, kind, len(header_bytes)),
            header_bytes,
            payload,
            _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF),
        ]
    )


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _check_header(header: Any, kind: int) -> None:
    if not isinstance(header, dict) or not isinstance(header['entries'], dict):
        raise TypeError('header and its entries must be objects')
    if not isinstance(header['provenance'], dict):
        raise TypeError('provenance must be an object')
    for key, entry in header['entries'].items():
        if not isinstance(entry, dict):
            raise TypeError(f'entry {key!r} must be an object')
        shape, offset, length = entry['shape'], entry['offset'], entry['length']
        if not isinstance(shape, list) or not all(_is_int(dim) for dim in shape):
            raise TypeError(f'entry {key!r} needs a list of non-negative integers as shape')
        if not _is_int(offset) or not _is_int(length):
            raise TypeError(f'entry {key!r} needs integer offset and length')
        if kind == KIND_CHECKPOINT:
            Role(entry['role'])
        else:
            if entry['statistic'] not in STATISTICS or not isinstance(entry['param'], str):
                raise ValueError(f'entry {key!r} names an unknown statistic')
            if not _is_int(header['layers'][entry['param']]['n_examples']):
                raise TypeError(f'layer {entry["param"]!r} needs an integer n_examples')
    if kind == KIND_STATS:
        FisherMode(header['fisher_mode'])
        if not isinstance(header['split'], str) or not _is_int(header['n_examples']):
            raise TypeError('statistics need a split name and an integer n_examples')


def loads(data: bytes) -> Storable:
    """
    Decode bytes written by [`dumps`][subspace_merging.dumps], raising `FormatError` with the offending offset.

    ```py title="dumps and loads"
    import numpy as np

    from subspace_merging import Checkpoint, dumps, loads

    ckpt = Checkpoint.build({'w': np.arange(6.0).reshape(2, 3)})
    data = dumps(ckpt)
    assert data[:8] == b'MATSCKPT'
    assert dumps(loads(data)) == data
    ```
    """
    if len(data) < _PREFIX.size:
        raise FormatError('truncated prefix', offset=len(data))
    magic, version, kind, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError('bad magic', offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f'unknown version {version}', offset=8)
    if kind not in (KIND_CHECKPOINT, KIND_STATS):
        raise FormatError(f'unknown kind {kind}', offset=9)
    header_end = _PREFIX.size + header_len
    if header_end + _CRC.size > len(data):
        raise FormatError('truncated header', offset=_PREFIX.size)
    try:
        header = json.loads(data[_PREFIX.size : header_end].decode())
        entries = header['entries']
        provenance = header['provenance']
        _check_header(header, kind)
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise FormatError(f'invalid header: {e}', offset=_PREFIX.size) from e

    crc_offset = len(data) - _CRC.size
    payload = data[header_end:crc_offset]
    (crc,) = _CRC.unpack_from(data, crc_offset)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError('checksum mismatch', offset=crc_offset)

    arrays: Dict[str, np.ndarray] = {}
    end = 0
    for key, entry in sorted(entries.items(), key=lambda kv: kv[1]['offset']):
        shape = tuple(entry['shape'])
        start, length = entry['offset'], entry['length']
        if start != end or length != 8 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f'entry {key!r} has an inconsistent layout', offset=header_end + start)
        if start + length > len(payload):
            raise FormatError(f'truncated payload in entry {key!r}', offset=header_end + start)
        arrays[key] = np.frombuffer(payload, dtype=_FLOAT, count=length // 8, offset=start).reshape(shape)
        end = start + length
    if end != len(payload):
        raise FormatError('unexpected bytes after the last entry', offset=header_end + end)

    if kind == KIND_CHECKPOINT:
        roles = {key: Role(entries[key]['role']) for key in arrays}
        return Checkpoint(arrays, roles, provenance)

    grouped: Dict[str, Dict[str, np.ndarray]] = {}
    for key, arr in arrays.items():
        grouped.setdefault(entries[key]['param'], {})[entries[key]['statistic']] = arr
    layers = {
        param: LayerStats(n_examples=header['layers'][param]['n_examples'], **stats)
        for param, stats in grouped.items()
    }
    return StatsBundle(layers, FisherMode(header['fisher_mode']), header['split'], header['n_examples'], provenance)


def save(path: Union[str, Path], obj: Storable) -> None:
    Path(path).write_bytes(dumps(obj))


def load(path: Union[str, Path]) -> Storable:
    return loads(Path(path).read_bytes())


def assert_mergeable(checkpoints: Sequence[Checkpoint]) -> None:
    """
    Raise `MergeabilityError` naming the first parameter whose name, role or shape differs between checkpoints.

    ```py title="assert_mergeable"
    import numpy as np

    from subspace_merging import Checkpoint, MergeabilityError, assert_mergeable

    a = Checkpoint.build({'w': np.zeros((2, 3))})
    b = Checkpoint.build({'w': np.zeros((3, 2))})
    assert_mergeable([a, a])
    try:
        assert_mergeable([a, b])
    except MergeabilityError as e:
        assert e.name == 'w'
    ```
    """
    if not checkpoints:
        raise ValueError('at least one checkpoint is required')
    reference = checkpoints[0].shape_map()
    for index, ckpt in enumerate(checkpoints[1:], start=1):
        current = ckpt.shape_map()
        for name, (role, shape) in reference.items():
            if name not in current:
                raise MergeabilityError(f'parameter {name!r} is missing from checkpoint {index}', name=name)
            other_role, other_shape = current[name]
            if other_role != role or other_shape != shape:
                raise MergeabilityError(
                    f'parameter {name!r} is {role.value}{shape} in checkpoint 0 '
                    f'but {other_role.value}{other_shape} in checkpoint {index}',
                    name=name,
                )
        for name in current:
            if name not in reference:
                raise MergeabilityError(f'parameter {name!r} only exists in checkpoint {index}', name=name)
