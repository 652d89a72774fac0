from __future__ import annotations

import math
from typing import TYPE_CHECKING, List, Optional, Tuple

import numpy as np
from scipy import linalg

from ._errors import CapacityError, ContractError, ShapeError, SingularityError
from ._matchers import IsSymmetric

if TYPE_CHECKING:
    from typing import TypeAlias

__all__ = (
    'Matrix',
    'Rng',
    'make_rng',
    'spawn_rngs',
    'matmul',
    'sym_eig',
    'chol_solve',
    'chol_solve_ridge',
    'kron_dense',
    'random_spd',
    'KRON_DENSE_CAP',
)

Matrix: TypeAlias = np.ndarray
Rng: TypeAlias = np.random.Generator

# largest number of entries kron_dense will materialise: a 4096 x 4096 operator
KRON_DENSE_CAP = 4096 * 4096


def make_rng(seed: int) -> Rng:
    """
    PCG64 generator for a 64-bit seed, identical streams on every platform.
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f'seed must be a 64-bit unsigned integer, got {seed}')
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> List[Rng]:
    """
    `n` independent generators derived from one seed.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def _as_matrix(x: Matrix, name: str) -> Matrix:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f'{name} must be 2-dimensional, got shape {arr.shape}')
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Matrix product of two 2-D arrays.

    ```py title="matmul"
    import numpy as np

    from subspace_merging import matmul

    assert matmul(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]])).tolist() == [[1.0, 2.0], [3.0, 4.0]]
    ```
    """
    a = _as_matrix(a, 'a')
    b = _as_matrix(b, 'b')
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f'cannot multiply {a.shape} by {b.shape}')
    return a @ b


def sym_eig(c: Matrix, *, tol: float = 1e-14, max_sweeps: int = 100) -> Tuple[Matrix, np.ndarray]:
    """
    Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Args:
        c: Symmetric matrix, symmetry is checked to `1e-10` (relative to the largest entry once above one).
        tol: Sweeps stop once the off-diagonal Frobenius norm is below `tol` times the full norm.
        max_sweeps: Upper bound on the number of sweeps.

    Returns:
        `(q, lam)` with `c = q @ diag(lam) @ q.T`, orthonormal columns in `q` and `lam` sorted descending;
        equal eigenvalues keep the order of their original diagonal position.

    ```py title="sym_eig"
    import numpy as np

    from subspace_merging import sym_eig

    q, lam = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(lam, [3.0, 1.0])
    assert np.allclose(np.abs(q[:, 0]), [2**-0.5, 2**-0.5])
    ```
    """
    a = _as_matrix(c, 'c')
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f'sym_eig needs a square matrix, got shape {a.shape}')
    if a != IsSymmetric(atol=1e-10):
        raise ContractError('sym_eig needs a symmetric matrix')

    n = a.shape[0]
    a = (a + a.T) / 2
    v = np.eye(n)
    norm = float(np.linalg.norm(a))
    threshold = tol * norm
    # entries this small relative to the whole matrix are treated as already annihilated
    negligible = 1e-17 * norm
    for _ in range(max_sweeps):
        off = math.sqrt(max(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)), 0.0))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= negligible:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                cos = 1.0 / math.sqrt(t * t + 1.0)
                sin = t * cos

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = cos * col_p - sin * col_q
                a[:, q] = sin * col_p + cos * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = cos * row_p - sin * row_q
                a[q, :] = sin * row_p + cos * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = cos * vec_p - sin * vec_q
                v[:, q] = sin * vec_p + cos * vec_q

    lam = np.diag(a).copy()
    order = sorted(range(n), key=lambda i: (-lam[i], i))
    return v[:, order], lam[order]


def chol_solve(a: Matrix, b: np.ndarray) -> np.ndarray:
    """
    Solve `a @ x = b` for symmetric positive definite `a` via a Cholesky factorisation.

    `b` may be a vector or a matrix of right hand sides. A non-positive pivot raises `SingularityError`,
    see [`chol_solve_ridge`][subspace_merging.chol_solve_ridge] for the ridge fallback.

    ```py title="chol_solve"
    import numpy as np

    from subspace_merging import chol_solve

    x = chol_solve(np.array([[4.0, 1.0], [1.0, 3.0]]), np.array([1.0, 2.0]))
    assert np.allclose(x, [1 / 11, 7 / 11])
    ```
    """
    a = _as_matrix(a, 'a')
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f'chol_solve needs a square matrix, got shape {a.shape}')
    if b.shape[0] != a.shape[0]:
        raise ShapeError(f'right hand side with {b.shape[0]} rows does not match {a.shape}')
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=True)
    except linalg.LinAlgError as e:
        raise SingularityError(f'matrix is not positive definite: {e}') from e
    return linalg.cho_solve(factor, b, check_finite=False)


def chol_solve_ridge(
    a: Matrix, b: np.ndarray, *, retries: int = 3, layer: Optional[str] = None
) -> Tuple[np.ndarray, float]:
    """
    `chol_solve`, retrying with `a + eps * I` when the factorisation fails.

    The first ridge is `1e-10 * trace(a) / dim`, multiplied by 100 on every retry.

    Returns:
        The solution and the ridge that was finally used (`0.0` when none was needed).
    """
    a = _as_matrix(a, 'a')
    try:
        return chol_solve(a, b), 0.0
    except SingularityError as e:
        error = e
    dim = a.shape[0]
    eps = 1e-10 * float(np.trace(a)) / max(dim, 1)
    if eps <= 0.0:
        eps = 1e-10
    for _ in range(retries):
        try:
            return chol_solve(a + eps * np.eye(dim), b), eps
        except SingularityError as e:
            error = e
            eps *= 100.0
    raise SingularityError(f'no ridge made the system solvable after {retries} retries', layer=layer) from error


def kron_dense(a: Matrix, g: Matrix, *, cap: int = KRON_DENSE_CAP) -> Matrix:
    """
    Dense Kronecker product `a ⊗ g`.

    Vectors are stacked row by row, so `kron_dense(a, g) @ w.ravel() == (a @ w @ g.T).ravel()`; for symmetric
    `g` that is `a @ w @ g`. Only meant as a test oracle, products with more than `cap` entries are refused.

    ```py title="kron_dense"
    import numpy as np

    from subspace_merging import kron_dense

    assert kron_dense(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([[2.0]])).tolist() == [[0.0, 2.0], [2.0, 0.0]]
    ```
    """
    a = _as_matrix(a, 'a')
    g = _as_matrix(g, 'g')
    size = a.shape[0] * g.shape[0] * a.shape[1] * g.shape[1]
    if size > cap:
        raise CapacityError('dense Kronecker product too large', requested=size, cap=cap)
    return np.kron(a, g)


def random_spd(rng: Rng, n: int, *, ridge: float = 1e-3, samples: Optional[int] = None) -> Matrix:
    """
    Random symmetric positive definite `n x n` matrix `xᵀx / s + ridge * I` with `x` of shape `(s, n)`.

    `samples` defaults to `n`, whose smallest eigenvalue sits close to `ridge`. Several times `n` samples
    keep the spectrum close to `[(1 - √(n/s))², (1 + √(n/s))²]`, so the matrix is well conditioned.
    """
    samples = n if samples is None else samples
    x = rng.standard_normal((samples, n))
    return x.T @ x / samples + ridge * np.eye(n)
