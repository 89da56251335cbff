"""Gradient-flow and heavy-ball dynamics on the exponential-sum loss,
hitting-time measurement, the local-linearization escape predictor, the
two-mode symmetric asymptotics, and the quadratic escape example.

The two-mode symmetric flow is integrated in (mean, log-gap) coordinates:
the raw coordinate gap first contracts by a factor comparable to the initial
mean before re-expanding, which underflows double precision for small initial
gaps, while the log-gap dynamics stays O(1)-conditioned throughout.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import expsum, numerics
from .errors import WFloorHit
from .expsum import ExpSumModel
from .kernels import CompositeKernel, MemoryKernel
from .numerics import OdeSolution

W_FLOOR = 1e-8


@dataclass
class FlowConfig:
    target: MemoryKernel
    init: ExpSumModel
    method: str = "rk45"  # or "abm4"
    tau_max: float = 100.0
    delta: float = 1e-3
    record_stride: float = 0.0  # 0 keeps every accepted step
    rtol: float = 1e-9
    atol: float = 1e-12
    h_fixed: float | None = None  # abm4 only; default 1e-3 * tau_max
    stop_when_hit: bool = False  # stop once both hitting events have fired
    w_floor: float = W_FLOOR

    def __post_init__(self):
        if self.delta >= 0.1:
            warnings.warn("hitting threshold delta >= 0.1 is outside the small-delta regime")


@dataclass
class HittingTimes:
    tau0_param: float | None
    tau0_loss: float | None


@dataclass
class FlowTrajectory:
    ode: OdeSolution
    loss_series: np.ndarray
    grad_norm_series: np.ndarray
    hitting: HittingTimes
    theta0: np.ndarray
    loss0: float
    m: int
    monotone_loss: bool = True  # False for momentum flows

    @property
    def taus(self):
        return self.ode.knots

    def params_at(self, tau):
        return self.ode.interp(tau)[..., : 2 * self.m]

    def export_rows(self):
        """(tau, J, grad_norm, a_1..a_m, w_1..w_m) per stored knot."""
        theta = self.ode.states[:, : 2 * self.m]
        return np.column_stack(
            [self.taus, self.loss_series, self.grad_norm_series, theta]
        )


def _theta_grad(theta, target):
    """Gradient for raw parameter vectors; tolerant of trial states an
    adaptive step probes outside the admissible region."""
    m = theta.size // 2
    a, w = theta[:m], theta[m:]
    order = np.lexsort((a, w))
    a, w = a[order], w[order]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        S1 = 1.0 / np.add.outer(w, w)
        S2 = S1 * S1
        lm0 = target.laplace_moment(0, w)
        lm1 = target.laplace_moment(1, w)
        ga = 2.0 * (S1 @ a - lm0)
        gw = -2.0 * a * (S2 @ a - lm1)
    out = np.empty(2 * m)
    out[order] = ga
    out[m + order] = gw
    return out


def _theta_loss(theta, target):
    m = theta.size // 2
    a, w = theta[:m], theta[m:]
    order = np.lexsort((a, w))
    a, w = a[order], w[order]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        A = 1.0 / np.add.outer(w, w)
        lm0 = target.laplace_moment(0, w)
        return max(float(a @ A @ a - 2.0 * (a @ lm0) + target.l2_norm_sq()), 0.0)


def _flow_events(target, theta0, loss0, delta, m, w_floor):
    def e_param(t, y):
        return float(np.linalg.norm(y[: 2 * m] - theta0) - delta)

    def e_loss(t, y):
        return abs(_theta_loss(y[: 2 * m], target) - loss0) - delta

    def e_floor(t, y):
        return float(np.min(y[m : 2 * m]) - w_floor)

    return [e_param, e_loss, e_floor]


def _first_crossing_time(crossings, event_index, direction=None):
    for c in crossings:
        if c.event_index == event_index and (direction is None or c.direction == direction):
            return c.time
    return None


def _run_flow(cfg: FlowConfig, rhs, y0, m, monotone) -> FlowTrajectory:
    theta0 = y0[: 2 * m].copy()
    loss0 = _theta_loss(theta0, cfg.target)
    events = _flow_events(cfg.target, theta0, loss0, cfg.delta, m, cfg.w_floor)
    terminal = [False, False, True]
    floor = cfg.w_floor

    def admissible(y):
        return bool(np.all(y[m : 2 * m] > floor / 2.0))

    stop_after = None
    if cfg.stop_when_hit:
        def stop_after(crossings):
            seen = {c.event_index for c in crossings}
            return 0 in seen and 1 in seen

    h_fixed = cfg.h_fixed
    if cfg.method == "abm4" and h_fixed is None:
        h_fixed = 1e-3 * cfg.tau_max
    sol = numerics.solve_ode(
        rhs,
        y0,
        cfg.tau_max,
        method=cfg.method,
        rtol=cfg.rtol,
        atol=cfg.atol,
        h_fixed=h_fixed,
        events=events,
        terminal=terminal,
        admissible=admissible if cfg.method == "rk45" else None,
        store_stride_time=cfg.record_stride if cfg.record_stride > 0 else None,
        stop_after=stop_after,
    )
    if _first_crossing_time(sol.crossings, 2, direction=-1) is not None:
        raise WFloorHit(
            "a model rate reached the positivity floor; tighten integrator tolerances"
        )
    losses = np.array([_theta_loss(s[: 2 * m], cfg.target) for s in sol.states])
    gnorms = np.array(
        [np.linalg.norm(_theta_grad(s[: 2 * m], cfg.target)) for s in sol.states]
    )
    hit = HittingTimes(
        _first_crossing_time(sol.crossings, 0),
        _first_crossing_time(sol.crossings, 1),
    )
    return FlowTrajectory(sol, losses, gnorms, hit, theta0, loss0, m, monotone)


def gradient_flow(cfg: FlowConfig) -> FlowTrajectory:
    """theta' = -grad J(theta) from cfg.init, with hitting events at threshold
    cfg.delta on both the parameter distance and the loss change, and a
    terminal guard on the smallest model rate."""
    target = cfg.target

    def rhs(t, y):
        return -_theta_grad(y, target)

    return _run_flow(cfg, rhs, cfg.init.theta(), cfg.init.m, monotone=True)


def heavy_ball_flow(cfg: FlowConfig, damping: float, lr: float = 1.0) -> FlowTrajectory:
    """rho theta'' + ((1-rho)/sqrt(eta)) theta' + grad J = 0 as a first-order
    system on (theta, theta'), theta'(0) = -sqrt(eta) grad J(theta0).

    damping = 0 degenerates to the gradient flow sped up by sqrt(eta).
    """
    m = cfg.init.m
    target = cfg.target
    rho, eta = damping, lr
    if rho == 0.0:
        def rhs0(t, y):
            return -math.sqrt(eta) * _theta_grad(y, target)

        return _run_flow(cfg, rhs0, cfg.init.theta(), m, monotone=True)

    theta0 = cfg.init.theta()
    v0 = -math.sqrt(eta) * expsum.grad(cfg.init, target)
    y0 = np.concatenate([theta0, v0])
    friction = (1.0 - rho) / math.sqrt(eta)

    def rhs(t, y):
        n = 2 * m
        g = _theta_grad(y[:n], target)
        return np.concatenate([y[n:], -(friction * y[n:] + g) / rho])

    return _run_flow(cfg, rhs, y0, m, monotone=False)


def hitting_times(traj: FlowTrajectory, delta: float, target: MemoryKernel | None = None) -> HittingTimes:
    """First times the parameter distance and the loss change exceed delta,
    localized by bisection on the trajectory's dense output. For the loss
    event a target kernel is needed; without one the recorded loss series is
    interpolated linearly between knots."""
    sol = traj.ode
    m = traj.m
    knots = sol.knots
    tol = 1e-9 * max(knots[-1], 1.0)

    dist = np.linalg.norm(sol.states[:, : 2 * m] - traj.theta0, axis=1) - delta

    def e_param(t):
        return float(np.linalg.norm(sol.interp(t)[: 2 * m] - traj.theta0) - delta)

    tau_p = None
    idx = np.nonzero((dist[:-1] <= 0) & (dist[1:] > 0))[0]
    if idx.size:
        i = idx[0]
        tau_p = numerics._locate_crossing(e_param, knots[i], knots[i + 1], dist[i], dist[i + 1], tol)

    dj = np.abs(traj.loss_series - traj.loss0) - delta
    tau_l = None
    idx = np.nonzero((dj[:-1] <= 0) & (dj[1:] > 0))[0]
    if idx.size:
        i = idx[0]
        if target is not None:
            def e_loss(t):
                return abs(_theta_loss(sol.interp(t)[: 2 * m], target) - traj.loss0) - delta

            tau_l = numerics._locate_crossing(e_loss, knots[i], knots[i + 1], dj[i], dj[i + 1], tol)
        else:
            f = dj[i] / (dj[i] - dj[i + 1])
            tau_l = float(knots[i] + f * (knots[i + 1] - knots[i]))
    return HittingTimes(tau_p, tau_l)


# ---------------------------------------------------------------------------
# Local linearization escape prediction
# ---------------------------------------------------------------------------


@dataclass
class EscapePrediction:
    time: float  # lower bound; inf when the gradient vanishes
    grad_norm: float
    lambda_min: float
    mode_gradients: np.ndarray  # gradient rotated into the Hessian eigenbasis
    eigenvalues: np.ndarray


def escape_lower_bound(grad_norm: float, lambda_min: float, delta: float) -> float:
    """min{delta/(2||g||), ln(1 + delta |lam_min| / (2||g||)) / |lam_min|};
    infinite when the gradient vanishes, delta/(2||g||) when lam_min >= 0."""
    if grad_norm == 0.0:
        return math.inf
    base = delta / (2.0 * grad_norm)
    if lambda_min >= 0.0:
        return base
    x = delta * abs(lambda_min) / (2.0 * grad_norm)
    return math.log1p(x) / abs(lambda_min)


def linearized_escape_prediction(
    theta0: ExpSumModel, target: MemoryKernel, delta: float
) -> EscapePrediction:
    g0 = expsum.grad(theta0, target)
    H0 = expsum.hessian(theta0, target)
    eig = numerics.sym_eig(H0)
    gnorm = float(np.linalg.norm(g0))
    lam_min = float(eig.eigenvalues[-1])
    return EscapePrediction(
        escape_lower_bound(gnorm, lam_min, delta),
        gnorm,
        lam_min,
        eig.eigenvectors.T @ g0,
        eig.eigenvalues,
    )


# ---------------------------------------------------------------------------
# Degenerate initializations for composite targets
# ---------------------------------------------------------------------------


def mstar_point(target: CompositeKernel, m: int, seed: int = 0, jitter: float = 0.25) -> ExpSumModel:
    """A model of width m that reproduces the target's exponential-sum part
    exactly: rates collapse onto the base rates blockwise and the block
    coefficient sums match the base coefficients. The within-block split is
    jittered by the seed (the only randomness in flow initializations)."""
    base = target.base
    mstar = base.rates.size
    if m < mstar:
        raise ValueError("width m must be at least the base mode count")
    rng = np.random.default_rng(np.random.Philox(key=seed))
    sizes = np.full(mstar, m // mstar)
    sizes[: m % mstar] += 1
    a, w = [], []
    for j in range(mstar):
        n = sizes[j]
        weights = np.full(n, 1.0 / n) + (jitter / n) * rng.uniform(-1, 1, n)
        weights /= weights.sum()
        a.extend(base.coeffs[j] * weights)
        w.extend([base.rates[j]] * n)
    return ExpSumModel(np.array(a), np.array(w))


# ---------------------------------------------------------------------------
# Plateau detection
# ---------------------------------------------------------------------------


def flag_plateau(losses, min_frac=0.3, flat_tol=0.01, drop_tol=0.10):
    """Flag a plateau in a loss series: a window of at least min_frac of the
    series over which the monotone envelope decreases by less than flat_tol
    (relative), bracketed by relative drops of at least drop_tol before and
    after. Returns (flagged, start, end) with the longest such window."""
    L = np.minimum.accumulate(np.asarray(losses, dtype=float))
    n = L.size
    if n < 4 or L[0] <= 0:
        return False, None, None
    best = None
    j = 0
    for i in range(n):
        j = max(j, i)
        while j + 1 < n and (L[i] - L[j + 1]) < flat_tol * L[i]:
            j += 1
        if j - i < min_frac * (n - 1):
            continue
        if (L[0] - L[i]) < drop_tol * L[0]:
            continue
        if (L[j] - L[-1]) < drop_tol * L[j]:
            continue
        if best is None or (j - i) > (best[1] - best[0]):
            best = (i, j)
    if best is None:
        return False, None, None
    return True, best[0], best[1]


def plateau_intervals(traj: FlowTrajectory, rel=1e-3):
    """Heuristic diagnostic: knot intervals where |dJ/dtau| = ||grad J||^2 is
    below rel * J(0) / tau_char. Reported for inspection only; hitting times
    are the quantitative outputs."""
    tau_char = max(traj.taus[-1], 1e-300)
    thresh = rel * traj.loss0 / tau_char
    flat = traj.grad_norm_series ** 2 < thresh
    out = []
    start = None
    for i, f in enumerate(flat):
        if f and start is None:
            start = i
        elif not f and start is not None:
            out.append((traj.taus[start], traj.taus[i]))
            start = None
    if start is not None:
        out.append((traj.taus[start], traj.taus[-1]))
    return out


# ---------------------------------------------------------------------------
# Two-mode symmetric case in (mean, log-gap) coordinates
# ---------------------------------------------------------------------------


def separation_rate(w, w1s, w2s):
    """W(w) = -1/w^3 + 4/(w+w1*)^3 + 4/(w+w2*)^3, the exponential rate of the
    coordinate-gap growth around the symmetric trajectory."""
    return -1.0 / w ** 3 + 4.0 / (w + w1s) ** 3 + 4.0 / (w + w2s) ** 3


def symmetric_limit_polynomial(w1s, w2s):
    """Coefficients (ascending) of p(v) = (v+w1*)^2 (v+w2*)^2
    - 2 v^2 [(v+w1*)^2 + (v+w2*)^2]; the symmetric one-mode flow converges to
    a positive root of p."""
    P = np.polynomial.polynomial
    q1 = P.polypow([w1s, 1.0], 2)
    q2 = P.polypow([w2s, 1.0], 2)
    p = P.polymul(q1, q2)
    corr = P.polymul([0.0, 0.0, 2.0], P.polyadd(q1, q2))
    return P.polysub(p, corr)


def symmetric_limit(w1s, w2s, v0):
    """The root of p(v) the symmetric flow started at v0 converges to: the
    nearest sign-change root in the direction of initial movement."""
    coeffs = symmetric_limit_polynomial(w1s, w2s)
    roots = numerics.poly_roots(coeffs)
    real = np.sort(np.array([r.real for r in np.atleast_1d(roots) if np.isreal(r) and r.real > 0]))
    P = np.polynomial.polynomial
    keep = []
    for r in real:
        lo = P.polyval(r - max(1e-6 * r, 1e-9), coeffs)
        hi = P.polyval(r + max(1e-6 * r, 1e-9), coeffs)
        if lo * hi < 0:  # odd multiplicity: the flow can converge here
            keep.append(r)
    keep = np.array(keep)
    if keep.size == 0:
        raise RuntimeError("no sign-change root found")
    sign_at_v0 = P.polyval(v0, coeffs)
    above = keep[keep >= v0]
    below = keep[keep <= v0]
    if sign_at_v0 > 0 and above.size:  # v' > 0: moves up to the next root
        return float(above[0])
    if sign_at_v0 < 0 and below.size:
        return float(below[-1])
    return float(above[0] if above.size else below[-1])


@dataclass
class SymmetricFlowResult:
    T_separation: float | None
    T_plateau: float | None
    v_limit: float
    W_limit: float
    eps1: float
    eps2: float
    sol: OdeSolution
    w_star: tuple

    def gap(self, tau):
        return np.exp(self.sol.interp(tau)[..., 1])

    def mean(self, tau):
        return self.sol.interp(tau)[..., 0]


def flow_2d_symmetric(
    w_star, w0, tau_max, eps1=None, eps2=None, rtol=1e-10, atol=1e-13
) -> SymmetricFlowResult:
    """Two-mode flow with coefficients frozen at (1, 1), initialized at
    w0 = (xi, xi + delta). Integrates the exact dynamics of
    (u, lambda) = ((w1+w2)/2, ln(w2-w1)) and measures

      T_separation: first upcrossing of the gap through eps1 (default 10*delta)
      T_plateau:    first upcrossing of the loss offset from the symmetric
                    trajectory, |J(w1,w2) - J(u,u)| ~ gap^2 |W(u)| / 4,
                    through eps2 (default delta^2)

    Both thresholds scale with delta so the measured times grow like
    ln(1/delta) / W(v_limit).
    """
    w1s, w2s = float(w_star[0]), float(w_star[1])
    if not 0 < w1s < w2s:
        raise ValueError("need 0 < w1* < w2*")
    xi, x2 = float(w0[0]), float(w0[1])
    delta = x2 - xi
    if delta < 0:
        raise ValueError("need w0[1] >= w0[0]")

    v_limit = symmetric_limit(w1s, w2s, xi)
    W_limit = separation_rate(v_limit, w1s, w2s)
    if eps1 is None:
        eps1 = 10.0 * delta
    if eps2 is None:
        eps2 = delta * delta

    if delta == 0.0:
        def rhs_sym(t, y):
            v = y[0]
            return np.array([1.0 / v ** 2 - 2.0 / (v + w1s) ** 2 - 2.0 / (v + w2s) ** 2])

        sol = numerics.solve_ode(rhs_sym, np.array([xi]), tau_max, rtol=rtol, atol=atol)
        return SymmetricFlowResult(None, None, v_limit, W_limit, eps1, eps2, sol, (w1s, w2s))

    def coord_rhs(x, y):
        return (
            1.0 / (2.0 * x * x)
            + 2.0 / (x + y) ** 2
            - 2.0 / (x + w1s) ** 2
            - 2.0 / (x + w2s) ** 2
        )

    def rhs(t, y):
        u, lg = y
        g = math.exp(lg)
        wlo, whi = u - 0.5 * g, u + 0.5 * g
        du = 0.5 * (coord_rhs(wlo, whi) + coord_rhs(whi, wlo))
        dlg = (
            -u / (wlo * wlo * whi * whi)
            + 4.0 * (u + w1s) / ((wlo + w1s) ** 2 * (whi + w1s) ** 2)
            + 4.0 * (u + w2s) / ((wlo + w2s) ** 2 * (whi + w2s) ** 2)
        )
        return np.array([du, dlg])

    def admissible(y):
        return np.isfinite(y).all() and y[0] - 0.5 * math.exp(y[1]) > 0

    log_eps1 = math.log(eps1)
    log_eps2 = math.log(eps2)

    def e_sep(t, y):
        return y[1] - log_eps1

    def e_plateau(t, y):
        w_here = abs(separation_rate(y[0], w1s, w2s))
        return 2.0 * y[1] + math.log(max(w_here, 1e-300) / 4.0) - log_eps2

    def stop_after(crossings):
        ups = {c.event_index for c in crossings if c.direction == +1}
        return 0 in ups and 1 in ups

    y0 = np.array([0.5 * (xi + x2), math.log(delta)])
    sol = numerics.solve_ode(
        rhs, y0, tau_max, rtol=rtol, atol=atol,
        events=[e_sep, e_plateau], admissible=admissible, stop_after=stop_after,
    )
    t_sep = _first_crossing_time(sol.crossings, 0, direction=+1)
    t_pla = _first_crossing_time(sol.crossings, 1, direction=+1)
    return SymmetricFlowResult(t_sep, t_pla, v_limit, W_limit, eps1, eps2, sol, (w1s, w2s))


# ---------------------------------------------------------------------------
# Quadratic escape example: f(x) = (x1^2 - eps x2^2)/2
# ---------------------------------------------------------------------------


def gd_escape_formula(eps: float, delta0: float) -> float:
    return math.log(delta0 / eps) / (2.0 * eps)


def momentum_escape_formula(eps: float, delta0: float) -> float:
    return math.log(4.0 * delta0 / eps) / (2.0 * math.sqrt(eps))


def gd_closed_form(tau, eps, delta):
    """Exactness oracle for the gradient flow on the quadratic saddle."""
    tau = np.asarray(tau, dtype=float)
    return delta * np.exp(-tau), np.exp(eps * tau)


@dataclass
class QuadraticEscape:
    measured: float
    formula: float
    method: str
    eps: float
    delta_init: float
    delta0_gap: float


def quadratic_escape(epsilon, delta_init, delta0_gap, method="gd") -> QuadraticEscape:
    """Measure the first time f(x(tau)) <= -delta0/2 under the gradient flow
    ("gd") or the undamped heavy-ball flow ("momentum") from x(0) = (delta, 1),
    x'(0) = -grad f(x(0)), and pair it with the matching closed-form timescale.

    The -delta0/2 level is what the closed-form solution reaches at its stated
    escape time (up to O(eps^2)); measuring there makes the comparison tight.
    """
    eps, delta, d0 = float(epsilon), float(delta_init), float(delta0_gap)

    def f(x1, x2):
        return 0.5 * (x1 * x1 - eps * x2 * x2)

    if method == "gd":
        formula = gd_escape_formula(eps, d0)
        tau_max = max(2.0 * abs(formula), 10.0 / eps)

        def rhs(t, y):
            return np.array([-y[0], eps * y[1]])

        y0 = np.array([delta, 1.0])
    elif method == "momentum":
        formula = momentum_escape_formula(eps, d0)
        tau_max = max(2.0 * abs(formula), 10.0 / math.sqrt(eps))

        def rhs(t, y):
            return np.array([y[2], y[3], -y[0], eps * y[1]])

        x0 = np.array([delta, 1.0])
        v0 = -np.array([x0[0], -eps * x0[1]])  # -grad f, unit learning rate
        y0 = np.concatenate([x0, v0])
    else:
        raise ValueError("method must be 'gd' or 'momentum'")

    def event(t, y):
        return f(y[0], y[1]) + d0 / 2.0

    if event(0.0, y0) <= 0:
        return QuadraticEscape(0.0, formula, method, eps, delta, d0)
    sol = numerics.solve_ode(
        rhs, y0, tau_max, rtol=1e-10, atol=1e-13, events=[event], terminal=[True]
    )
    hit = _first_crossing_time(sol.crossings, 0)
    if hit is None:
        raise RuntimeError("no escape within the integration budget")
    return QuadraticEscape(float(hit), formula, method, eps, delta, d0)
