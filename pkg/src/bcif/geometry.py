"""Direction family, coefficient decompositions and Beltrami modes.

A fixed family of six lattice directions of norm sqrt(2) (the face
diagonals of the unit cube) carries three pieces of structure:

* six symmetric matrices ``M_i = Id - khat_i (x) khat_i`` which span the
  6-dimensional space of symmetric 3x3 matrices, so every symmetric ``R``
  close to the identity decomposes as ``R = sum_i gamma_i(R)^2 M_i`` with
  strictly positive weights;
* one tangent vector ``A_i`` per direction with ``|A_i|^2 = 1/2`` and
  ``k_i . A_i = 0``; the first three A-vectors form a basis of R^3, giving
  a linear decomposition ``f = sum_i g_i(f) A_i`` with ``g_i = 0`` for
  ``i >= 3``;
* the complex Beltrami vector ``B_i = A_i + i khat_i x A_i`` which turns
  the plane wave ``B_i exp(i nu k_i . x)`` into a curl eigenfunction.

Everything here is exact linear algebra on tiny fixed matrices; the grid
machinery never enters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GeometryDomainError",
    "DirectionFamily",
    "BeltramiMode",
    "build_family",
    "decompose_matrix",
    "decompose_vector",
    "beltrami_mode",
    "pack_sym",
    "unpack_sym",
]

# Packing order for symmetric 3x3 matrices: the 6 independent entries.
SYM_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))

# Coefficients stay >= 1/8 on the ball of radius 2*r0 around Id.
COEFF_FLOOR = 0.125


class GeometryDomainError(ValueError):
    """Input matrix left the certified neighbourhood of the identity."""


def pack_sym(R):
    """Pack a symmetric 3x3 matrix (or a stack of them in the two leading
    axes) into its 6 independent entries."""
    R = np.asarray(R)
    return np.stack([R[i, j] for i, j in SYM_INDEX])


def unpack_sym(six):
    """Inverse of :func:`pack_sym`; works on stacked component arrays."""
    six = np.asarray(six)
    out = np.empty((3, 3) + six.shape[1:], dtype=six.dtype)
    for c, (i, j) in enumerate(SYM_INDEX):
        out[i, j] = six[c]
        out[j, i] = six[c]
    return out


@dataclass(frozen=True)
class BeltramiMode:
    """One plane-wave building block: direction k, tangent A and the
    complex amplitude B = A + i (k/|k|) x A."""

    k: np.ndarray
    A: np.ndarray
    B: np.ndarray

    def conjugate(self):
        """The mode for -k; by convention A_{-k} = A_k, so B_{-k} = conj(B_k)."""
        return BeltramiMode(k=-self.k, A=self.A, B=np.conj(self.B))


@dataclass(frozen=True)
class DirectionFamily:
    """The full geometric data: directions, matrix/vector solvers and the
    certified positivity radius r0."""

    directions: np.ndarray      # (6, 3) integers
    lambda_bar: float           # common norm, sqrt(2)
    matrices: np.ndarray        # (6, 3, 3) the M_i = Id - khat (x) khat
    matrix_solver: np.ndarray   # (6, 6) maps packed symmetric R -> coefficients c
    r0: float
    a_vectors: np.ndarray       # (6, 3) tangent vectors, |A|^2 = 1/2
    g_solver: np.ndarray        # (3, 3) inverse of (A_1 A_2 A_3)

    @property
    def n_directions(self):
        return len(self.directions)


# Ordered so that the first three directions are linearly independent and
# orthogonal to the fixed A-vector choices below.
_DIRECTIONS = np.array(
    [
        [1, 1, 0],
        [0, 1, 1],
        [1, 0, 1],
        [1, -1, 0],
        [0, 1, -1],
        [1, 0, -1],
    ],
    dtype=np.int64,
)

_A_VECTORS = np.array(
    [
        [0.5, -0.5, 0.0],
        [0.0, 0.5, -0.5],
        [0.0, 1.0 / np.sqrt(2.0), 0.0],
        [0.5, 0.5, 0.0],
        [0.0, 0.5, 0.5],
        [0.0, 1.0 / np.sqrt(2.0), 0.0],
    ]
)


def build_family() -> DirectionFamily:
    """Construct the fixed direction family with both solvers and r0.

    r0 is half the largest radius (in the max entry norm) on which every
    coefficient provably stays >= 1/8.  Since the coefficients are linear
    in R, their minimum over the ball is attained at sign-pattern vertices,
    so the probe reduces to L1 norms of the solver rows.
    """
    dirs = _DIRECTIONS.copy()
    norms2 = (dirs * dirs).sum(axis=1)
    assert np.all(norms2 == 2), "directions must have |k|^2 = 2"
    lambda_bar = float(np.sqrt(2.0))

    khat = dirs / np.sqrt(norms2)[:, None]
    mats = np.eye(3)[None, :, :] - khat[:, :, None] * khat[:, None, :]

    # 6x6 system: column i holds the packed entries of M_i.
    A = np.stack([pack_sym(mats[i]) for i in range(6)], axis=1)
    if abs(np.linalg.det(A)) < 1e-12:
        raise AssertionError("direction matrices are not independent")
    solver = np.linalg.inv(A)

    # c_i(Id + E) = 1/4 + (solver @ packed E)_i; worst decrease on the
    # unit max-norm ball is the largest row L1 norm.
    worst = float(np.abs(solver).sum(axis=1).max())
    r_floor = (0.25 - COEFF_FLOOR) / worst
    r0 = 0.5 * r_floor

    a_vec = _A_VECTORS.copy()
    assert np.allclose((a_vec * a_vec).sum(axis=1), 0.5, atol=1e-15)
    assert np.allclose((a_vec * dirs).sum(axis=1), 0.0, atol=1e-15)
    basis = a_vec[:3].T  # columns A_1, A_2, A_3
    g_solver = np.linalg.inv(basis)

    return DirectionFamily(
        directions=dirs,
        lambda_bar=lambda_bar,
        matrices=mats,
        matrix_solver=solver,
        r0=r0,
        a_vectors=a_vec,
        g_solver=g_solver,
    )


def matrix_coefficients(family: DirectionFamily, R) -> np.ndarray:
    """Raw coefficients c_i(R) with sum_i c_i M_i = R, no domain check.

    Accepts a single 3x3 matrix or a stack shaped (3, 3, ...).
    """
    packed = pack_sym(R)
    return np.einsum("ce,e...->c...", family.matrix_solver, packed)


def sup_distance_to_id(R) -> float:
    """Max entry norm of R - Id over any trailing axes (the paper's |R|)."""
    R = np.asarray(R)
    E = R - np.eye(3).reshape((3, 3) + (1,) * (R.ndim - 2))
    return float(np.abs(E).max())


def decompose_matrix(family: DirectionFamily, R) -> np.ndarray:
    """Coefficients gamma_i(R) = sqrt(c_i(R)) with
    sum_i gamma_i(R)^2 (Id - khat_i (x) khat_i) = R.

    gamma is even in the direction (gamma_{-k} = gamma_k); indexing is by
    the unordered pair, i.e. by direction index.  Raises
    GeometryDomainError outside the certified ball ||R - Id|| <= r0 or if
    any coefficient fails to be strictly positive.
    """
    if sup_distance_to_id(R) > family.r0 * (1 + 1e-12):
        raise GeometryDomainError(
            "matrix outside certified ball: ||R - Id|| = %.3g > r0 = %.3g"
            % (sup_distance_to_id(R), family.r0)
        )
    c = matrix_coefficients(family, R)
    if np.any(c <= 0):
        raise GeometryDomainError("non-positive decomposition coefficient")
    return np.sqrt(c)


def decompose_vector(family: DirectionFamily, f) -> np.ndarray:
    """Coefficients g_i(f) with f = sum_i g_i(f) A_i and g_i = 0 for i >= 3.

    Linear in f; accepts a single 3-vector or a stack shaped (3, ...).
    """
    f = np.asarray(f, dtype=float)
    g3 = np.einsum("ce,e...->c...", family.g_solver, f)
    out = np.zeros((family.n_directions,) + f.shape[1:], dtype=float)
    out[:3] = g3
    return out


def beltrami_mode(family: DirectionFamily, i: int) -> BeltramiMode:
    """The Beltrami mode of the i-th direction (0-based index)."""
    if not 0 <= i < family.n_directions:
        raise IndexError("direction index out of range: %d" % i)
    k = family.directions[i].astype(float)
    A = family.a_vectors[i]
    khat = k / np.linalg.norm(k)
    B = A + 1j * np.cross(khat, A)
    return BeltramiMode(k=family.directions[i].copy(), A=A.copy(), B=B)
