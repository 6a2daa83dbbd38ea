"""Dense float64 kernels and the deterministic RNG used everywhere else.

All arrays are 64-bit reals.  The RNG is counter-based (Philox) so that a
seed fully determines the stream on every platform.
"""

import hashlib

import numpy as np

from .errors import CapacityError, ContractError, DegenerateDirectionError, DimensionError

DENSE_EIG_MAX_DIM = 2048


def as_vector(v):
    """Return ``v`` as a contiguous 1-d float64 array."""
    a = np.ascontiguousarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {a.shape}")
    return a


def dot(v, w):
    """Inner product of two equal-length 1-d vectors, in float64."""
    a = as_vector(v)
    b = as_vector(w)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.dot(a, b))


def norm(v):
    return float(np.linalg.norm(as_vector(v)))


def orthonormalize_against(v, basis, rtol=1e-14):
    """Project ``v`` off a mutually orthonormal ``basis`` and normalize.

    The projection is applied twice (classical re-orthogonalization) so the
    returned unit vector overlaps every basis member by at most ~1e-10 even
    when ``v`` is nearly inside their span.  If what is left after projecting
    has norm below ``rtol`` relative to the input, the direction is
    degenerate and the caller must resample.
    """
    u = as_vector(v).copy()
    scale = float(np.linalg.norm(u))
    if scale == 0.0:
        raise DegenerateDirectionError("cannot orthonormalize the zero vector")
    for b in basis:
        b = as_vector(b)
        if b.shape != u.shape:
            raise DimensionError("basis vector length does not match v")
    for _ in range(2):
        for b in basis:
            u -= np.dot(b, u) * np.asarray(b, dtype=np.float64)
    residual = float(np.linalg.norm(u))
    if residual < rtol * max(scale, 1.0):
        raise DegenerateDirectionError(
            f"residual norm {residual:.3e} after projection; resample the direction"
        )
    return u / residual


def dense_sym_eig(a, symmetry_tol=1e-9):
    """Full eigendecomposition of a symmetric matrix, sorted descending.

    Returns ``(values, vectors)`` with ``values[i]`` belonging to column
    ``vectors[:, i]``.  This is the test oracle for the iterative spectrum
    code, so it refuses anything suspicious instead of silently symmetrizing.
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] > DENSE_EIG_MAX_DIM:
        raise CapacityError(f"dimension {m.shape[0]} exceeds {DENSE_EIG_MAX_DIM}")
    scale = max(float(np.max(np.abs(m))), 1.0)
    asym = float(np.max(np.abs(m - m.T)))
    if asym > symmetry_tol * scale:
        raise ContractError(f"matrix asymmetry {asym:.3e} exceeds tolerance")
    values, vectors = np.linalg.eigh((m + m.T) * 0.5)
    order = np.argsort(values)[::-1]
    return values[order], vectors[:, order]


def make_rng(seed):
    """Deterministic counter-based generator.

    ``seed`` may be an integer or any nested tuple of integers and strings;
    structured seeds are folded through SHA-256, so derived streams such as
    ``(run_seed, "shuffle")`` are independent yet fully reproducible (no
    dependence on process state or Python's randomized string hashing).
    """
    if isinstance(seed, (int, np.integer)):
        key = int(seed) & (1 << 64) - 1
    else:
        digest = hashlib.sha256(repr(_canonical_seed(seed)).encode()).digest()
        key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key))


def _canonical_seed(seed):
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    if isinstance(seed, str):
        return seed
    if isinstance(seed, (tuple, list)):
        return tuple(_canonical_seed(s) for s in seed)
    raise ContractError(f"unsupported seed component {type(seed).__name__}")


def random_unit_vector(rng, n):
    """Unit vector drawn from the rotation-invariant distribution."""
    while True:
        v = rng.standard_normal(n)
        s = float(np.linalg.norm(v))
        if s > 1e-12:
            return v / s
