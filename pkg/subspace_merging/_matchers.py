from __future__ import annotations

from abc import ABCMeta
from typing import Any, List, Tuple, Union

import numpy as np

__all__ = (
    'ArrayEqualsMeta',
    'ArrayEquals',
    'AllOf',
    'IsClose',
    'IsSymmetric',
    'IsPSD',
    'IsOrthonormal',
    'HasShape',
    'IsFiniteArray',
    'as_float_array',
)


def as_float_array(other: Any) -> np.ndarray:
    """
    `other` as a float64 array, `TypeError` for booleans, `None` and non-numeric values.
    """
    if other is True or other is False or other is None:
        raise TypeError('not an array')
    arr = np.asarray(other)
    if arr.dtype.kind not in 'biuf':
        raise TypeError(f'not a numeric array: dtype {arr.dtype}')
    return arr.astype(np.float64, copy=False)


class ArrayEqualsMeta(ABCMeta):
    # numpy must hand comparisons with the bare class back to us
    __array_ufunc__ = None

    def __eq__(cls, other: Any) -> bool:
        if cls is ArrayEquals or cls is AllOf:
            return False
        try:
            matcher = cls()
        except TypeError:
            # the class needs constructor arguments
            return False
        return matcher == other

    def __and__(cls, other: Matcher) -> AllOf:
        return AllOf(cls, other)

    def __hash__(cls) -> int:
        return hash(cls.__qualname__)

    def __repr__(cls) -> str:
        return cls.__name__


Matcher = Union['ArrayEquals', ArrayEqualsMeta]


class ArrayEquals(metaclass=ArrayEqualsMeta):
    """
    Base type for the array matchers.

    `matcher == value` converts `value` with [`as_float_array`][subspace_merging.as_float_array] and passes the
    result to `check`. Values that are not numeric arrays never match, neither do arrays `check` raises
    `ValueError` for. The bare class compares like an instance built without arguments, so `x == IsPSD` works.
    """

    # without this, `ndarray == matcher` broadcasts elementwise instead of deferring to `__eq__` below
    __array_ufunc__ = None

    def check(self, arr: np.ndarray) -> bool:
        """
        Whether the float64 array `arr` matches, implemented by subclasses.
        """
        raise NotImplementedError()

    def repr_args(self) -> List[str]:
        return []

    def __eq__(self, other: Any) -> bool:
        try:
            arr = as_float_array(other)
        except (TypeError, ValueError):
            return False
        try:
            return bool(self.check(arr))
        except ValueError:
            return False

    def __ne__(self, other: Any) -> bool:
        return not self == other

    def __and__(self, other: Matcher) -> AllOf:
        return AllOf(self, other)

    def __repr__(self) -> str:
        return f'{type(self).__name__}({", ".join(self.repr_args())})'


class AllOf(ArrayEquals):
    """
    Match when every matcher does, usually built with `&`: `IsPSD & HasShape(2, 2)`.
    """

    def __init__(self, *matchers: Matcher):
        flat: List[Matcher] = []
        for matcher in matchers:
            flat.extend(matcher.matchers if isinstance(matcher, AllOf) else (matcher,))
        self.matchers: Tuple[Matcher, ...] = tuple(flat)

    def check(self, arr: np.ndarray) -> bool:
        return all(matcher == arr for matcher in self.matchers)

    def __repr__(self) -> str:
        return ' & '.join(map(repr, self.matchers))


def _square(arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f'not a square matrix: shape {arr.shape}')
    return arr


class IsClose(ArrayEquals):
    """
    Check that an array is close to an expected array.

    By default the comparison is in Frobenius norm, `‖other - expected‖ <= atol + rtol * ‖expected‖`,
    which is how solver and merge tolerances are stated. With `elementwise=True` every entry must satisfy
    `|other - expected| <= atol + rtol * |expected|`. Arrays holding NaN or infinity never match.
    """

    def __init__(self, expected: Any, *, rtol: float = 1e-10, atol: float = 0.0, elementwise: bool = False):
        """
        Args:
            expected: Array (or scalar) to compare to, shapes must match exactly.
            rtol: Relative tolerance.
            atol: Absolute tolerance.
            elementwise: Compare entry by entry rather than in norm.

        ```py title="IsClose"
        import numpy as np

        from subspace_merging import IsClose

        assert np.array([1.0, 2.0]) == IsClose([1.0, 2.0 + 1e-12])
        assert np.array([1.0, 2.0]) != IsClose([1.0, 2.1])
        assert 0.1 + 0.2 == IsClose(0.3, rtol=1e-12)
        assert np.zeros(3) == IsClose(np.full(3, 1e-9), rtol=0, atol=1e-8)
        assert np.eye(2) != IsClose(np.eye(3))
        ```
        """
        self.expected = as_float_array(expected)
        self.rtol = rtol
        self.atol = atol
        self.elementwise = elementwise

    def repr_args(self) -> List[str]:
        args = [f'<array shape={self.expected.shape}>', f'rtol={self.rtol!r}']
        if self.atol:
            args.append(f'atol={self.atol!r}')
        if self.elementwise:
            args.append('elementwise=True')
        return args

    def check(self, arr: np.ndarray) -> bool:
        if arr.shape != self.expected.shape or not np.all(np.isfinite(arr)):
            return False
        diff = np.abs(arr - self.expected)
        if self.elementwise:
            return bool(np.all(diff <= self.atol + self.rtol * np.abs(self.expected)))
        return bool(np.linalg.norm(diff) <= self.atol + self.rtol * np.linalg.norm(self.expected))


class _Tolerance(ArrayEquals):
    def __init__(self, *, atol: float):
        self.atol = atol

    def repr_args(self) -> List[str]:
        return [f'atol={self.atol!r}']


class IsSymmetric(_Tolerance):
    """
    Check that a value is a square matrix equal to its transpose within `atol` (scaled by the largest entry
    once that exceeds one).

    ```py title="IsSymmetric"
    import numpy as np

    from subspace_merging import IsSymmetric

    assert np.array([[2.0, 1.0], [1.0, 2.0]]) == IsSymmetric
    assert np.array([[2.0, 1.0], [0.0, 2.0]]) != IsSymmetric
    assert np.ones((2, 3)) != IsSymmetric
    ```
    """

    def __init__(self, *, atol: float = 1e-10):
        super().__init__(atol=atol)

    def check(self, arr: np.ndarray) -> bool:
        arr = _square(arr)
        scale = max(1.0, float(np.max(np.abs(arr), initial=0.0)))
        return bool(np.max(np.abs(arr - arr.T), initial=0.0) <= self.atol * scale)


class IsPSD(IsSymmetric):
    """
    Check that a value is a symmetric positive semi-definite matrix: its smallest eigenvalue is at least
    `-atol` (scaled by the largest eigenvalue magnitude once that exceeds one).

    Inherits from [`IsSymmetric`][subspace_merging.IsSymmetric], symmetry is checked with the same `atol`.

    ```py title="IsPSD"
    import numpy as np

    from subspace_merging import IsPSD

    z = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert z.T @ z == IsPSD
    assert np.diag([1.0, 0.0]) == IsPSD
    assert np.diag([1.0, -1.0]) != IsPSD
    ```
    """

    def __init__(self, *, atol: float = 1e-8):
        super().__init__(atol=atol)

    def check(self, arr: np.ndarray) -> bool:
        if not super().check(arr):
            return False
        if arr.size == 0:
            return True
        eigenvalues = np.linalg.eigvalsh((arr + arr.T) / 2)
        scale = max(1.0, float(np.max(np.abs(eigenvalues))))
        return bool(eigenvalues[0] >= -self.atol * scale)


class IsOrthonormal(_Tolerance):
    """
    Check that the columns of a matrix are orthonormal, `QᵀQ = I` within `atol` in every entry.

    ```py title="IsOrthonormal"
    import numpy as np

    from subspace_merging import IsOrthonormal

    s = 2**-0.5
    assert np.array([[s, s], [s, -s]]) == IsOrthonormal
    assert np.array([[1.0, 1.0], [0.0, 1.0]]) != IsOrthonormal
    ```
    """

    def __init__(self, *, atol: float = 1e-10):
        super().__init__(atol=atol)

    def check(self, arr: np.ndarray) -> bool:
        if arr.ndim != 2:
            return False
        gram = arr.T @ arr
        return bool(np.max(np.abs(gram - np.eye(arr.shape[1])), initial=0.0) <= self.atol)


class HasShape(ArrayEquals):
    """
    Check the shape of an array.

    ```py title="HasShape"
    import numpy as np

    from subspace_merging import HasShape

    assert np.zeros((2, 3)) == HasShape(2, 3)
    assert np.zeros(4) == HasShape(4)
    assert np.zeros((3, 2)) != HasShape(2, 3)
    ```
    """

    def __init__(self, *shape: int):
        self.shape: Tuple[int, ...] = shape

    def repr_args(self) -> List[str]:
        return [str(dim) for dim in self.shape]

    def check(self, arr: np.ndarray) -> bool:
        return arr.shape == self.shape


class IsFiniteArray(ArrayEquals):
    """
    Check that every entry of an array is finite.

    ```py title="IsFiniteArray"
    import numpy as np

    from subspace_merging import IsFiniteArray

    assert np.ones(3) == IsFiniteArray
    assert np.array([1.0, np.nan]) != IsFiniteArray
    ```
    """

    def check(self, arr: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(arr)))
