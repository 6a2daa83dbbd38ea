"""White-box input perturbations, gradient- and curvature-based.

Five attacks share one interface.  All of them move each input by at most
``eps`` in their norm and clamp the result to the valid pixel range [0, 1]
afterwards; the step norm before clamping is recorded so the effect of the
clamp stays observable.

* ``fgsm``   — one signed-gradient step of size eps (L-inf).
* ``fgsm10`` — ten signed-gradient steps of eps/10, re-projected onto the
  eps-ball around the original input after every step (L-inf).
* ``l2grad`` — one step of length eps along the normalized gradient (L2).
* ``fhsm``   — signed Newton direction: solve (H + mu I) z = g on the input
  Hessian with conjugate gradients, then step eps * sign(z) (L-inf).
* ``l2hess`` — the same Newton direction, normalized to length eps (L2).

The damping mu is a small fraction of the estimated top input-Hessian
eigenvalue (with an absolute floor), which keeps the system positive
definite and bounds the Newton step.  As mu grows the solve degenerates to
z ~ g / mu, so the signed variant falls back to the plain signed-gradient
direction — a useful consistency check.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, PSDViolationError, ZeroDirectionError
from .spectrum import InputHvpOperator, power_iteration_topk

ATTACK_NORMS = {
    "fgsm": "linf",
    "fgsm10": "linf",
    "l2grad": "l2",
    "fhsm": "linf",
    "l2hess": "l2",
}
ATTACK_NAMES = tuple(ATTACK_NORMS)

# Default perturbation budgets per input geometry, chosen so the two norms
# are comparably strong on each dataset family.
EPS_PRESETS = {
    (1, 28, 28): {"linf": 0.1, "l2": 2.8},
    (3, 32, 32): {"linf": 0.02, "l2": 1.2},
}

GRAD_CHUNK = 256


def eps_preset(in_shape, norm):
    key = tuple(in_shape)
    if key not in EPS_PRESETS or norm not in EPS_PRESETS[key]:
        raise ConfigError(f"no eps preset for shape {key} and norm {norm!r}")
    return EPS_PRESETS[key][norm]


@dataclass(frozen=True)
class CGParams:
    """Inexact-Newton solve controls for the curvature attacks."""

    tol: float = 1e-6
    max_iter: int = 50
    damping_scale: float = 1e-3
    damping_floor: float = 1e-6
    lambda1_iters: int = 25
    lambda1_tol: float = 1e-2
    seed: int = 0


@dataclass
class AttackReport:
    name: str
    eps: float
    norm: str
    x_adv: np.ndarray
    pre_clamp_norms: np.ndarray
    cg_iterations: np.ndarray = None
    cg_converged: np.ndarray = None
    dampings: np.ndarray = None

    @property
    def all_cg_converged(self):
        return self.cg_converged is None or bool(np.all(self.cg_converged))


def cg_solve(apply_a, b, tol=1e-6, max_iter=50):
    """Conjugate gradients for symmetric positive-definite ``A z = b``.

    Returns ``(z, iterations, converged, residual_norm)``.  A non-positive
    curvature value ``p^T A p`` aborts with :class:`PSDViolationError`
    because it falsifies the positive-definiteness the method relies on.
    """
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    z = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return z, 0, True, 0.0
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for i in range(1, max_iter + 1):
        ap = np.asarray(apply_a(p), dtype=np.float64).reshape(-1)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise PSDViolationError(
                f"non-positive curvature p^T A p = {pap:.3e} at CG step {i}"
            )
        alpha = rs / pap
        z += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * bnorm:
            return z, i, True, float(np.sqrt(rs_new))
        p = r + (rs_new / rs) * p
        rs = rs_new
    return z, max_iter, False, float(np.sqrt(rs))


def batch_input_gradients(model, theta, x, y, bn_state=None):
    """Per-sample loss gradients w.r.t. the inputs, eval mode, chunked."""
    data = theta.data if isinstance(theta, ad.ParamVector) else theta
    y = np.asarray(y)
    out = np.zeros_like(np.asarray(x, dtype=np.float64))
    for lo in range(0, x.shape[0], GRAD_CHUNK):
        xb = np.asarray(x[lo : lo + GRAD_CHUNK], dtype=np.float64)
        yb = y[lo : lo + GRAD_CHUNK]
        xn = ad.leaf(xb)
        loss = model.batch_loss_node(ad.constant(data), xn, yb, mode="eval",
                                     bn_state=bn_state)
        (g,) = ad.grad(loss, [xn])
        # the loss is a mean, so scale back to per-sample gradients
        out[lo : lo + GRAD_CHUNK] = g.value * xb.shape[0]
    return out


def _per_sample_l2(v):
    return np.sqrt((v.reshape(v.shape[0], -1) ** 2).sum(axis=1))


def _per_sample_linf(v):
    return np.abs(v.reshape(v.shape[0], -1)).max(axis=1)


def attack_batch(model, theta, x, y, name, eps, bn_state=None, cg=None):
    """Run one attack over a batch; returns an :class:`AttackReport`."""
    if name not in ATTACK_NORMS:
        raise ConfigError(f"unknown attack {name!r} (have {sorted(ATTACK_NORMS)})")
    if eps < 0:
        raise ConfigError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if name == "fgsm":
        g = batch_input_gradients(model, theta, x, y, bn_state)
        delta = eps * np.sign(g)
        x_adv = np.clip(x + delta, 0.0, 1.0)
        return AttackReport(name, eps, "linf", x_adv, _per_sample_linf(delta))
    if name == "fgsm10":
        x_adv = x.copy()
        step = eps / 10.0
        for _ in range(10):
            g = batch_input_gradients(model, theta, x_adv, y, bn_state)
            x_adv = x_adv + step * np.sign(g)
            x_adv = np.clip(x_adv, x - eps, x + eps)
            x_adv = np.clip(x_adv, 0.0, 1.0)
        return AttackReport(name, eps, "linf", x_adv, _per_sample_linf(x_adv - x))
    if name == "l2grad":
        g = batch_input_gradients(model, theta, x, y, bn_state)
        norms = _per_sample_l2(g)
        bad = np.flatnonzero(norms <= 1e-30)
        if bad.size:
            raise ZeroDirectionError(
                f"zero input gradient for sample index {int(bad[0])}"
            )
        delta = eps * g / norms.reshape(-1, *([1] * (x.ndim - 1)))
        x_adv = np.clip(x + delta, 0.0, 1.0)
        return AttackReport(name, eps, "l2", x_adv, _per_sample_l2(delta))
    return _newton_attack(model, theta, x, y, name, eps, bn_state, cg or CGParams())


def _newton_attack(model, theta, x, y, name, eps, bn_state, cg):
    n = x.shape[0]
    x_adv = np.empty_like(x)
    norms = np.zeros(n)
    iters = np.zeros(n, dtype=np.int64)
    conv = np.zeros(n, dtype=bool)
    mus = np.zeros(n)
    for i in range(n):
        op = InputHvpOperator(model, theta, (x[i], int(y[i])), bn_state=bn_state)
        g = op.grad_node.value.reshape(-1)
        pairs = power_iteration_topk(op, op.dim, k=1, tol=cg.lambda1_tol,
                                     max_iter=cg.lambda1_iters, seed=cg.seed)
        lam1 = max(pairs[0].value, 0.0)
        mu = max(cg.damping_scale * lam1, cg.damping_floor)
        z, it, ok, _ = cg_solve(lambda v: op(v) + mu * v, g, tol=cg.tol,
                                max_iter=cg.max_iter)
        if name == "fhsm":
            delta = eps * np.sign(z)
        else:  # l2hess
            zn = float(np.linalg.norm(z))
            if zn <= 1e-30:
                raise ZeroDirectionError(
                    f"zero Newton direction for sample index {i}"
                )
            delta = eps * z / zn
        delta = delta.reshape(x[i].shape)
        x_adv[i] = np.clip(x[i] + delta, 0.0, 1.0)
        norms[i] = np.abs(delta).max() if name == "fhsm" else np.linalg.norm(delta)
        iters[i] = it
        conv[i] = ok
        mus[i] = mu
    return AttackReport(name, eps, ATTACK_NORMS[name], x_adv, norms, iters, conv, mus)


@dataclass
class AdversarialEval:
    attack: str
    eps: float
    clean_accuracy: float
    adversarial_accuracy: float
    report: AttackReport = field(repr=False, default=None)


def evaluate_adversarial(model, theta, x, y, name, eps, bn_state=None, cg=None,
                         source=None):
    """Accuracy before/after an attack.

    ``source``, when given as ``(model, theta, bn_state)``, generates the
    perturbations on that model instead (transfer setting); evaluation is
    always on the target ``model``/``theta``.
    """
    gen_model, gen_theta, gen_bn = (model, theta, bn_state) if source is None else source
    report = attack_batch(gen_model, gen_theta, x, y, name, eps, bn_state=gen_bn,
                          cg=cg)
    _, clean = model.loss_and_accuracy(theta, x, y, bn_state=bn_state)
    _, adv = model.loss_and_accuracy(theta, report.x_adv, y, bn_state=bn_state)
    return AdversarialEval(name, eps, clean, adv, report)
