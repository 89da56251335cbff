"""Linear state-space simulation against memory-kernel targets: Euler
recursion, finite-horizon closed-form loss, white-noise Monte Carlo loss (the
stochastic route to the same number), and discrete gradient training with
full recurrent matrices.

Training differentiates the Euler-discretized white-noise expected loss
  L = dt * sum_i (c^T M^{i-1} U - rho(i dt))^2,   M = I + dt W,
exactly (adjoint accumulation through the power recursion), so there is no
truncation error on top of the discretization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import numerics
from .errors import Diverged
from .kernels import MemoryKernel


@dataclass
class LinearRNN:
    c: np.ndarray
    W: np.ndarray
    U: np.ndarray
    hurwitz: bool = field(init=False)

    def __post_init__(self):
        self.c = np.atleast_1d(np.asarray(self.c, float))
        self.W = np.asarray(self.W, float)
        self.U = np.asarray(self.U, float)
        if self.U.ndim == 1:
            self.U = self.U.reshape(-1, 1)
        m = self.c.size
        if self.W.shape != (m, m) or self.U.shape[0] != m:
            raise ValueError("inconsistent state dimensions")
        self.hurwitz = bool(np.max(np.linalg.eigvals(self.W).real) < -1e-10)

    @property
    def m(self):
        return self.c.size

    def kernel_at(self, t):
        """c^T e^{W t} U, the impulse response (d=1: scalar per time)."""
        t = np.atleast_1d(np.asarray(t, float))
        out = np.array([self.c @ scipy.linalg.expm(self.W * ti) @ self.U for ti in t])
        return out[:, 0] if self.U.shape[1] == 1 else out

    def kernel_grid(self, dt, n):
        """Kernel at t = dt, 2 dt, ..., n dt via repeated exact propagation."""
        E = scipy.linalg.expm(self.W * dt)
        out = np.empty((n, self.U.shape[1]))
        v = self.U.copy()
        for i in range(n):
            v = E @ v if i else scipy.linalg.expm(self.W * dt) @ self.U
            out[i] = self.c @ v
        return out[:, 0] if self.U.shape[1] == 1 else out

    @staticmethod
    def from_expsum(a, w):
        """Diagonal realization of an exponential sum (unit input weights)."""
        a = np.atleast_1d(np.asarray(a, float))
        w = np.atleast_1d(np.asarray(w, float))
        return LinearRNN(a, np.diag(-w), np.ones((a.size, 1)))


@dataclass
class PathEnsemble:
    dt: float
    horizon: float
    n_paths: int
    kind: str = "white"  # or "cosine"
    seed: int = 0
    n_modes: int = 8  # cosine mixture size

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))

    def _rng(self, path_index):
        return np.random.default_rng(np.random.Philox(key=(self.seed, path_index)))

    def path(self, path_index):
        """One input path sampled on the step grid; white paths have variance
        1/dt per sample so that x dt matches Brownian increments."""
        K = self.n_steps
        rng = self._rng(path_index)
        if self.kind == "white":
            return rng.normal(0.0, 1.0 / math.sqrt(self.dt), K)
        if self.kind == "cosine":
            lam = rng.uniform(0.0, 10.0, self.n_modes)
            amp = rng.normal(0.0, 1.0, self.n_modes)
            t = np.arange(K) * self.dt
            return np.cos(np.outer(t, lam)) @ amp
        raise ValueError(f"unknown ensemble kind {self.kind!r}")

    def increments(self, path_index):
        """Brownian increments x dt for a white path."""
        if self.kind != "white":
            raise ValueError("increments are defined for white-noise ensembles")
        return self.path(path_index) * self.dt


def simulate(rnn: LinearRNN, x, dt):
    """Euler recursion h_{k+1} = h_k + dt (W h_k + U x_k) from h_0 = 0;
    returns the readouts c^T h_k for k = 1..len(x)."""
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    if dt * np.linalg.norm(rnn.W, 2) >= 1.0:
        import warnings

        warnings.warn("dt ||W|| >= 1: Euler recursion may be unstable")
    M = np.eye(rnn.m) + dt * rnn.W
    h = np.zeros(rnn.m)
    out = np.empty(x.shape[0])
    for k in range(x.shape[0]):
        h = M @ h + dt * (rnn.U @ x[k])
        out[k] = rnn.c @ h
    return out


def convolution_reference(rnn: LinearRNN, x_fn, dt, n_steps):
    """Continuous-convolution oracle int_0^t kernel(s) x(t-s) ds at the step
    grid t = dt..n dt, with exact matrix exponentials and trapezoid weights;
    x_fn is the input as a function of time."""
    ker = np.concatenate([[float(rnn.c @ rnn.U)], rnn.kernel_grid(dt, n_steps)])
    out = np.empty(n_steps)
    for k in range(1, n_steps + 1):
        s = np.arange(k + 1) * dt
        vals = ker[: k + 1] * np.asarray([x_fn(k * dt - si) for si in s])
        out[k - 1] = dt * (np.sum(vals) - 0.5 * (vals[0] + vals[-1]))
    return out


def closedform_finite_loss(rnn: LinearRNN, target: MemoryKernel, T: float, tol=1e-9) -> float:
    """int_0^T (c^T e^{Wt} U - rho(t))^2 dt via certified quadrature on
    matrix-exponential evaluations."""
    def f(t):
        val = float(rnn.c @ scipy.linalg.expm(rnn.W * t) @ rnn.U)
        return (val - float(target.eval(t))) ** 2

    return numerics.integrate_finite(f, 0.0, T, tol).value


def mc_loss(rnn: LinearRNN, target: MemoryKernel, ensemble: PathEnsemble):
    """Monte Carlo estimate of the expected squared prediction error at the
    horizon under white noise: per path, both kernels are convolved against
    the same Brownian increments and the squared difference is averaged.

    Returns (mean, standard_error).
    """
    if ensemble.kind != "white":
        raise ValueError("the Monte Carlo loss needs a white-noise ensemble")
    K = ensemble.n_steps
    t_grid = np.arange(K) * ensemble.dt
    mismatch = np.concatenate([[float(rnn.c @ rnn.U)], rnn.kernel_grid(ensemble.dt, K - 1)]) - np.asarray(
        target.eval(t_grid), float
    )
    vals = np.empty(ensemble.n_paths)
    for p in range(ensemble.n_paths):
        z = float(mismatch @ ensemble.increments(p))
        vals[p] = z * z
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(ensemble.n_paths))
    return mean, se


# ---------------------------------------------------------------------------
# Discrete gradient training
# ---------------------------------------------------------------------------


@dataclass
class ClosedFormLoss:
    """Euler-discretized white-noise expected loss on [0, horizon]."""

    dt: float
    horizon: float

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))


@dataclass
class TrainRecord:
    losses: np.ndarray
    grad_norms: np.ndarray
    final: LinearRNN
    plateau: tuple  # (flagged, start, end)

    @property
    def plateau_flagged(self):
        return bool(self.plateau[0])

    @property
    def plateau_duration(self):
        if not self.plateau[0]:
            return 0
        return int(self.plateau[2] - self.plateau[1])

    def export_rows(self):
        steps = np.arange(self.losses.size)
        return np.column_stack([steps, self.losses, self.grad_norms])


def _kernel_loss_and_grad(c, W, U, rho_grid, dt):
    """Exact gradient of L = dt sum_i (c^T M^{i-1} U - rho_i)^2, M = I+dt W."""
    K = rho_grid.size
    m = c.size
    M = np.eye(m) + dt * W
    S = np.empty((K, m))  # s_a = (M^T)^a c
    P = np.empty((K, m))  # p_b = M^b U
    S[0], P[0] = c, U.ravel()
    for i in range(1, K):
        S[i] = M.T @ S[i - 1]
        P[i] = M @ P[i - 1]
    ghat = P @ c  # ghat[i] = c^T M^i U
    e = ghat - rho_grid  # residual at lag (i+1) dt
    loss = dt * float(e @ e)
    gc = 2.0 * dt * (e @ P)
    gU = 2.0 * dt * (e @ S)
    # dL/dW = 2 dt^2 sum_{a+b<=K-2} e_{a+b+1(0-based)} s_a p_b^T via a Hankel product
    e_shift = np.concatenate([e[1:], [0.0]])
    H = scipy.linalg.hankel(e_shift, np.zeros(K))
    R = H @ P
    gW = 2.0 * dt * dt * (S.T @ R)
    return loss, gc, gW, gU.reshape(U.shape)


def _path_loss_and_grad(c, W, U, target, ensemble):
    """Monte Carlo loss over the ensemble with exact reverse-mode gradients
    through the Euler recursion (all hidden states stored)."""
    dt = ensemble.dt
    K = ensemble.n_steps
    m = c.size
    M = np.eye(m) + dt * W
    t_grid = np.arange(1, K + 1) * dt
    rho = np.asarray(target.eval(t_grid), float)
    n = ensemble.n_paths
    X = np.stack([ensemble.path(p) for p in range(n)])  # (n, K)
    # forward: h stored per step, batched over paths
    Hs = np.zeros((K + 1, n, m))
    for k in range(K):
        Hs[k + 1] = Hs[k] @ M.T + dt * np.outer(X[:, k], U.ravel())
    y_hat = Hs[K] @ c
    y_true = (X * rho[::-1]) @ np.full(K, dt)
    D = y_hat - y_true
    loss = float(np.mean(D * D))
    gc = 2.0 / n * (D @ Hs[K])
    # reverse sweep: lambda_k = dL/dh_k
    lam = (2.0 / n) * np.outer(D, c)
    gW = np.zeros((m, m))
    gU = np.zeros(m)
    for k in range(K, 0, -1):
        gW += dt * lam.T @ Hs[k - 1]
        gU += dt * (X[:, k - 1] @ lam)
        lam = lam @ M
    return loss, gc, gW, gU.reshape(U.shape)


def gd_train(
    rnn0: LinearRNN,
    target: MemoryKernel,
    loss_spec,
    lr: float,
    steps: int,
    optimizer: str = "gd",
    momentum: float = 0.9,
    diverge_factor: float = 1e6,
    warmup_steps: int = 0,
) -> TrainRecord:
    """Full-matrix discrete training. loss_spec is a ClosedFormLoss (the
    white-noise expectation in closed form) or a PathEnsemble (empirical
    loss over sampled paths). optimizer is "gd" or "heavy-ball"."""
    c = rnn0.c.copy()
    W = rnn0.W.copy()
    U = rnn0.U.copy()
    if isinstance(loss_spec, ClosedFormLoss):
        dt = loss_spec.dt
        K = loss_spec.n_steps
        rho_grid = np.asarray(target.eval(np.arange(1, K + 1) * dt), float)

        def eval_lg(c, W, U):
            return _kernel_loss_and_grad(c, W, U, rho_grid, dt)

    elif isinstance(loss_spec, PathEnsemble):
        def eval_lg(c, W, U):
            return _path_loss_and_grad(c, W, U, target, loss_spec)

    else:
        raise TypeError("loss_spec must be ClosedFormLoss or PathEnsemble")

    losses = np.empty(steps + 1)
    gnorms = np.empty(steps + 1)
    vc = np.zeros_like(c)
    vW = np.zeros_like(W)
    vU = np.zeros_like(U)
    loss0 = None
    for it in range(steps + 1):
        loss, gc, gW, gU = eval_lg(c, W, U)
        losses[it] = loss
        gnorms[it] = math.sqrt(np.sum(gc ** 2) + np.sum(gW ** 2) + np.sum(gU ** 2))
        if loss0 is None:
            loss0 = loss
        if not math.isfinite(loss) or loss > diverge_factor * max(loss0, 1e-300):
            raise Diverged(f"loss {loss:.3e} at step {it}")
        if it == steps:
            break
        # linear warmup shields the high-curvature initial transient
        lr_t = lr * min(1.0, (it + 1) / warmup_steps) if warmup_steps else lr
        if optimizer == "gd":
            c = c - lr_t * gc
            W = W - lr_t * gW
            U = U - lr_t * gU
        elif optimizer == "heavy-ball":
            vc = momentum * vc - lr_t * gc
            vW = momentum * vW - lr_t * gW
            vU = momentum * vU - lr_t * gU
            c = c + vc
            W = W + vW
            U = U + vU
        else:
            raise ValueError("optimizer must be 'gd' or 'heavy-ball'")
    from .dynamics import flag_plateau

    plateau = flag_plateau(losses)
    return TrainRecord(losses, gnorms, LinearRNN(c, W, U), plateau)


def gd_on_kernel_loss(a0, w0, target, lr, steps):
    """Plain discrete gradient descent directly on the infinite-horizon
    exponential-sum loss (diagonal recurrences with combined coefficients);
    the small-step limit of this iteration is the gradient flow."""
    from . import expsum

    theta = np.concatenate([np.asarray(a0, float), np.asarray(w0, float)])
    m = theta.size // 2
    for _ in range(steps):
        g = expsum.grad(expsum.ExpSumModel(theta[:m], theta[m:]), target)
        theta = theta - lr * g
    return theta


def default_full_init(m, seed, w_range=(0.2, 2.0), coeff_scale=None):
    """Random full-matrix initialization: stable diagonal part with rates
    log-uniform over w_range plus a small non-normal perturbation, Gaussian
    readout and input weights."""
    rng = np.random.default_rng(np.random.Philox(key=seed))
    diag = np.exp(rng.uniform(math.log(w_range[0]), math.log(w_range[1]), m))
    W = -np.diag(diag) + rng.normal(0.0, 0.1 / math.sqrt(m), (m, m))
    if coeff_scale is None:
        coeff_scale = 1.0 / math.sqrt(m)
    c = rng.normal(0.0, coeff_scale, m)
    U = rng.normal(0.0, coeff_scale, (m, 1))
    return LinearRNN(c, W, U)
