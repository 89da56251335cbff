"""The exponential-sum model rho_hat(t; a, w) = sum_i a_i e^{-w_i t} and the
closed-form squared-L2 loss against a memory kernel, with gradient and Hessian.

With A_kj = 1/(w_k + w_j) and the target moments LM_n(w) = int t^n e^{-wt} rho,

    J(a, w)        = a^T A a - 2 sum_k a_k LM_0(w_k) + ||rho||^2
    dJ/da_k        = 2 [sum_i a_i / (w_k + w_i) - LM_0(w_k)]
    dJ/dw_k        = -2 a_k [sum_i a_i / (w_k + w_i)^2 - LM_1(w_k)]

and the Hessian blocks

    d2J/da_k da_j  = 2/(w_k + w_j)
    d2J/da_k dw_j  = -2 a_j/(w_k + w_j)^2                       (k != j)
    d2J/da_k dw_k  = -2 sum_i a_i/(w_k + w_i)^2 - a_k/(2 w_k^2) + 2 LM_1(w_k)
    d2J/dw_k dw_j  = 4 a_k a_j/(w_k + w_j)^3                    (k != j)
    d2J/dw_k dw_k  = 4 a_k sum_i a_i/(w_k + w_i)^3 + a_k^2/(2 w_k^3) - 2 a_k LM_2(w_k)

All target dependence enters through LM_n, which is rational for exponential-sum
targets and closed-form for Gaussian bumps, so flows over composite targets
never touch quadrature. Inputs are canonicalized by a lexicographic sort so the
result is bitwise invariant under simultaneous permutations of (a, w).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import ExpSumKernel, MemoryKernel


@dataclass(frozen=True, eq=False)
class ExpSumModel:
    """Model parameters theta = (a, w), all rates strictly positive."""

    a: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, float)))
        object.__setattr__(self, "w", np.atleast_1d(np.asarray(self.w, float)))
        if self.a.shape != self.w.shape or self.a.size < 1:
            raise ValueError("a and w must be equal-length, nonempty vectors")
        if np.any(self.w <= 0):
            raise ValueError("all model rates must be strictly positive")

    @property
    def m(self):
        return self.a.size

    def theta(self):
        return np.concatenate([self.a, self.w])

    @staticmethod
    def from_theta(theta):
        theta = np.asarray(theta, dtype=float)
        m = theta.size // 2
        return ExpSumModel(theta[:m], theta[m:])

    def as_kernel(self):
        return ExpSumKernel(self.a.copy(), self.w.copy())

    def to_config(self):
        return {"a": self.a.tolist(), "w": self.w.tolist()}


@dataclass
class LossReport:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray | None = None


def _canonical(model: ExpSumModel):
    order = np.lexsort((model.a, model.w))
    return model.a[order], model.w[order], order


def residual(model: ExpSumModel, target: MemoryKernel, t):
    t = np.asarray(t, dtype=float)
    fit = np.exp(-np.multiply.outer(t, model.w)) @ model.a
    return fit - target.eval(t)


def loss(model: ExpSumModel, target: MemoryKernel) -> float:
    a, w, _ = _canonical(model)
    A = 1.0 / np.add.outer(w, w)
    lm0 = target.laplace_moment(0, w)
    val = float(a @ A @ a - 2.0 * (a @ lm0) + target.l2_norm_sq())
    return max(val, 0.0)


def grad(model: ExpSumModel, target: MemoryKernel) -> np.ndarray:
    a, w, order = _canonical(model)
    S1 = 1.0 / np.add.outer(w, w)
    S2 = S1 * S1
    lm0 = target.laplace_moment(0, w)
    lm1 = target.laplace_moment(1, w)
    ga = 2.0 * (S1 @ a - lm0)
    gw = -2.0 * a * (S2 @ a - lm1)
    out = np.empty(2 * model.m)
    out[order] = ga
    out[model.m + order] = gw
    return out


def hessian(model: ExpSumModel, target: MemoryKernel) -> np.ndarray:
    a, w, order = _canonical(model)
    m = a.size
    S1 = 1.0 / np.add.outer(w, w)
    S2 = S1 * S1
    S3 = S2 * S1
    lm1 = target.laplace_moment(1, w)
    lm2 = target.laplace_moment(2, w)

    Haa = 2.0 * S1
    Haw = -2.0 * a[None, :] * S2
    np.fill_diagonal(Haw, -2.0 * (S2 @ a) - a / (2.0 * w * w) + 2.0 * lm1)
    Hww = 4.0 * np.outer(a, a) * S3
    np.fill_diagonal(Hww, 4.0 * a * (S3 @ a) + a * a / (2.0 * w ** 3) - 2.0 * a * lm2)

    H = np.empty((2 * m, 2 * m))
    idx = np.concatenate([order, m + order])
    block = np.block([[Haa, Haw], [Haw.T, Hww]])
    H[np.ix_(idx, idx)] = block
    return 0.5 * (H + H.T)


def loss_report(model, target, with_hessian=False) -> LossReport:
    return LossReport(
        loss(model, target),
        grad(model, target),
        hessian(model, target) if with_hessian else None,
    )


def grad_fd(model: ExpSumModel, target: MemoryKernel, h=1e-6) -> np.ndarray:
    """Central finite differences of the loss; the independent oracle for grad."""
    theta = model.theta()
    out = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        out[i] = (
            loss(ExpSumModel.from_theta(tp), target)
            - loss(ExpSumModel.from_theta(tm), target)
        ) / (2 * h)
    return out


def hessian_fd(model: ExpSumModel, target: MemoryKernel, h=1e-5) -> np.ndarray:
    """Central finite differences of the gradient; the oracle for hessian."""
    theta = model.theta()
    n = theta.size
    out = np.empty((n, n))
    for i in range(n):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        out[:, i] = (
            grad(ExpSumModel.from_theta(tp), target)
            - grad(ExpSumModel.from_theta(tm), target)
        ) / (2 * h)
    return 0.5 * (out + out.T)
