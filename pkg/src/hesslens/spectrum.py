"""Top-k Hessian eigenpairs via matrix-free power iteration with deflation.

The Hessian is only ever touched through Hessian-vector products, so the
same routine serves the parameter Hessian (dimension = parameter count) and
the input Hessian (dimension = pixel count).  Eigenvalues are signed
Rayleigh quotients; pairs are found in decreasing magnitude order by
deflating previously found pairs out of the operator and re-orthogonalizing
the iterate against them every step, which stops converged directions from
re-entering through round-off.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    CapacityError,
    DegenerateDirectionError,
    DegenerateSpectrumError,
    NumericError,
)
from .tensorops import dot, make_rng, norm, orthonormalize_against, random_unit_vector

RESAMPLE_LIMIT = 5
_REL_FLOOR = 1e-30


@dataclass
class EigenPair:
    value: float
    vector: np.ndarray
    iterations: int
    converged: bool


@dataclass
class SpectrumResult:
    pairs: list
    dim: int
    k: int
    tol: float
    max_iter: int
    seed: int
    kind: str  # "theta" or "input"
    meta: dict = field(default_factory=dict)
    elapsed: float = 0.0  # wall seconds; informational only, never serialized

    @property
    def eigenvalues(self):
        return np.array([p.value for p in self.pairs], dtype=np.float64)

    @property
    def converged_all(self):
        return all(p.converged for p in self.pairs)

    @property
    def top(self):
        return self.pairs[0].value if self.pairs else 0.0


def power_iteration_topk(apply_h, dim, k=20, tol=1e-4, max_iter=500, seed=0):
    """Leading ``k`` eigenpairs (by magnitude) of a symmetric operator.

    ``apply_h(v) -> H v`` is the only access to the matrix.  Each pair runs
    power iteration on the deflated operator H - sum(lam_i v_i v_i^T); the
    iterate is re-orthogonalized against all found vectors every step and
    the signed eigenvalue is the Rayleigh quotient.  Iteration stops when
    the relative change of the Rayleigh quotient drops below ``tol`` (or at
    ``max_iter``, in which case the pair is flagged unconverged).

    Discovery runs pair by pair: power iteration on the deflated operator,
    stopping when the Rayleigh quotient has stopped moving (relative change
    below ``tol``) and its eigen-residual ``||H v - lam v||`` is small.  A
    final Rayleigh-Ritz pass over the discovered subspace then removes the
    mixing that sequential deflation leaves behind when eigenvalues are
    close, and every returned pair is certified: for a symmetric operator
    the residual norm bounds the distance from the reported value to the
    true spectrum, and ``converged`` records whether that certificate meets
    the tolerance.

    A vanishing deflated image means the remaining spectrum is zero to
    working precision; such directions converge immediately with value 0.
    """
    if dim <= 0:
        raise CapacityError("operator dimension must be positive")
    k = min(int(k), dim)
    rng = make_rng(seed)
    resid_factor = 0.5 * np.sqrt(tol)

    def checked_apply(v):
        w = np.asarray(apply_h(v), dtype=np.float64).reshape(-1)
        if w.shape[0] != dim:
            raise CapacityError(
                f"operator returned length {w.shape[0]}, expected {dim}"
            )
        if not np.all(np.isfinite(w)):
            raise NumericError("operator returned non-finite values")
        return w

    basis = []
    values = []
    iteration_counts = []
    for _ in range(k):
        v = _fresh_direction(rng, dim, basis)
        lam_old = None
        lam = 0.0
        iterations = 0
        for t in range(1, max_iter + 1):
            iterations = t
            w = checked_apply(v)
            for lam_i, v_i in zip(values, basis):
                w = w - (lam_i * dot(v_i, v)) * v_i
            lam = dot(v, w)
            scale = max([abs(lam)] + [abs(x) for x in values])
            nw = norm(w)
            if nw <= 1e-14 * max(scale, _REL_FLOOR):
                lam = 0.0
                break
            resid = norm(w - lam * v)
            if (lam_old is not None
                    and abs(lam - lam_old) <= tol * max(abs(lam), _REL_FLOOR)
                    and resid <= resid_factor * max(abs(lam), 0.01 * scale)):
                break
            try:
                v = orthonormalize_against(w / nw, basis)
            except DegenerateDirectionError:
                # The image collapsed into the span of found pairs: nothing
                # left in this direction but round-off.
                lam = 0.0
                break
            lam_old = lam
        basis.append(v)
        values.append(float(lam))
        iteration_counts.append(iterations)

    # Rayleigh-Ritz refinement over span(basis): rotate to the eigenbasis of
    # the projected operator, which repairs deflation cross-contamination.
    b = np.stack(basis, axis=1)
    hb = np.stack([checked_apply(b[:, j]) for j in range(k)], axis=1)
    t_small = b.T @ hb
    ritz_vals, rot = np.linalg.eigh((t_small + t_small.T) * 0.5)
    vecs = b @ rot
    hvecs = hb @ rot
    scale = max(float(np.max(np.abs(ritz_vals))), _REL_FLOOR)
    pairs = []
    for j in range(k):
        lam = float(ritz_vals[j])
        resid = float(np.linalg.norm(hvecs[:, j] - lam * vecs[:, j]))
        ok = resid <= resid_factor * max(abs(lam), 0.01 * scale)
        pairs.append(EigenPair(lam, vecs[:, j].copy(), iteration_counts[j], ok))
    pairs.sort(key=lambda p: -abs(p.value))
    return pairs


def _fresh_direction(rng, dim, basis):
    for _ in range(RESAMPLE_LIMIT):
        try:
            return orthonormalize_against(random_unit_vector(rng, dim), basis)
        except DegenerateDirectionError:
            continue
    raise DegenerateSpectrumError(
        f"could not draw a direction orthogonal to {len(basis)} found pairs"
    )


# ---------------------------------------------------------------------------
# Hessian-vector-product operators that record the forward and gradient
# graphs once and reuse them for every product.
# ---------------------------------------------------------------------------


class ThetaHvpOperator:
    """H v products for the parameter Hessian of a model on a fixed batch."""

    def __init__(self, model, theta, batch, mode="eval", bn_state=None):
        self.theta_node = ad.leaf(theta.data if isinstance(theta, ad.ParamVector)
                                  else np.asarray(theta, dtype=np.float64))
        x, y = batch
        self.loss = model.batch_loss_node(self.theta_node, ad.constant(x), y,
                                          mode=mode, bn_state=bn_state)
        if not np.isfinite(self.loss.value):
            raise NumericError("non-finite loss while building Hessian operator")
        (self.grad_node,) = ad.grad(self.loss, [self.theta_node])
        self.dim = self.theta_node.value.shape[0]
        self.applies = 0

    def __call__(self, v):
        gv = ad.sum_all(ad.mul(self.grad_node, ad.constant(v)))
        (h,) = ad.grad(gv, [self.theta_node])
        self.applies += 1
        return h.value


class InputHvpOperator:
    """H v products for the loss Hessian w.r.t. one input sample."""

    def __init__(self, model, theta, sample, bn_state=None):
        x, y = sample
        data = theta.data if isinstance(theta, ad.ParamVector) else theta
        self.x_node = ad.leaf(np.asarray(x, dtype=np.float64))
        loss_fn = model.make_input_loss(bn_state=bn_state)
        self.loss = loss_fn(ad.constant(data), self.x_node, y)
        if not np.isfinite(self.loss.value):
            raise NumericError("non-finite loss while building Hessian operator")
        (self.grad_node,) = ad.grad(self.loss, [self.x_node])
        self.dim = int(np.prod(self.x_node.value.shape))
        self.applies = 0

    def __call__(self, v):
        vv = np.asarray(v, dtype=np.float64).reshape(self.x_node.value.shape)
        gv = ad.sum_all(ad.mul(self.grad_node, ad.constant(vv)))
        (h,) = ad.grad(gv, [self.x_node])
        self.applies += 1
        return h.value.reshape(-1)


def theta_spectrum(model, theta, batch, k=20, tol=1e-4, max_iter=500, seed=0,
                   mode="eval", bn_state=None, meta=None):
    """Top-k parameter-Hessian eigenpairs of the batch loss."""
    start = time.perf_counter()
    op = ThetaHvpOperator(model, theta, batch, mode=mode, bn_state=bn_state)
    pairs = power_iteration_topk(op, op.dim, k=k, tol=tol, max_iter=max_iter,
                                 seed=seed)
    info = {"model": model.config.name, "batch_size": int(len(batch[1])),
            "mode": mode}
    info.update(meta or {})
    return SpectrumResult(pairs, op.dim, k, tol, max_iter, seed, "theta", info,
                          time.perf_counter() - start)


def input_spectrum(model, theta, sample, k=10, tol=1e-4, max_iter=500, seed=0,
                   bn_state=None, meta=None):
    """Top-k input-Hessian eigenpairs of the per-sample loss (eval mode)."""
    start = time.perf_counter()
    op = InputHvpOperator(model, theta, sample, bn_state=bn_state)
    pairs = power_iteration_topk(op, op.dim, k=k, tol=tol, max_iter=max_iter,
                                 seed=seed)
    info = {"model": model.config.name, "label": int(sample[1])}
    info.update(meta or {})
    return SpectrumResult(pairs, op.dim, k, tol, max_iter, seed, "input", info,
                          time.perf_counter() - start)


def input_lambda1_over(model, theta, x, y, indices, tol=1e-3, max_iter=200,
                       seed=0, bn_state=None):
    """Largest input-Hessian eigenvalue for each selected sample."""
    out = np.zeros(len(indices), dtype=np.float64)
    for i, idx in enumerate(indices):
        res = input_spectrum(model, theta, (x[idx], int(y[idx])), k=1, tol=tol,
                             max_iter=max_iter, seed=seed, bn_state=bn_state)
        out[i] = res.top
    return out


def materialize_operator(apply_h, dim):
    """Dense symmetric matrix of a small operator (oracle/diagnostic path)."""
    if dim > 2048:
        raise CapacityError(f"refusing to materialize a {dim}x{dim} operator")
    cols = np.zeros((dim, dim), dtype=np.float64)
    e = np.zeros(dim, dtype=np.float64)
    for i in range(dim):
        e[i] = 1.0
        cols[:, i] = np.asarray(apply_h(e), dtype=np.float64).reshape(-1)
        e[i] = 0.0
    return cols


def spectrum_rows(result):
    """CSV-ready rows: index, eigenvalue, iterations, converged flag."""
    return [
        {
            "index": str(i),
            "eigenvalue": repr(float(p.value)),
            "iterations": str(p.iterations),
            "converged": "1" if p.converged else "0",
        }
        for i, p in enumerate(result.pairs)
    ]
