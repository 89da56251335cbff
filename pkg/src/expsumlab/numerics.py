"""Shared certified numerical primitives.

Quadrature on [0, inf) with analytic tail bounds, adaptive RK45 and fixed-step
ABM4 ODE integration with dense output and event localization, a cyclic Jacobi
eigensolver, Chebyshev least-squares polynomial fitting, companion-matrix root
finding, and the matrix exponential.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.linalg

from .errors import (
    DegreeZero,
    IllConditioned,
    NotSymmetric,
    QuadratureFailure,
    StepSizeUnderflow,
)

# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    error_bound: float
    evaluations: int


class _CountedFunc:
    def __init__(self, f):
        self.f = f
        self.calls = 0

    def __call__(self, t):
        self.calls += 1
        return self.f(t)


def _tail_cutoff_and_bound(f, tail, tol):
    """Pick T* so the analytic tail bound beyond T* is below tol.

    tail is one of
      ("exp", rate)  : |f(t)| <= |f(T)| * exp(-rate (t - T)) for t >= T
      ("poly", p)    : |f(t)| <= |f(T)| * (T / t)^p, p > 1
      ("cut", T)     : f vanishes identically beyond T
    """
    kind = tail[0]
    if kind == "cut":
        return float(tail[1]), 0.0
    if kind == "exp":
        rate = float(tail[1])
        if rate <= 0:
            raise ValueError("exp tail needs a positive rate")
        T = max(1.0, 4.0 / rate)
        for _ in range(80):
            # factor 2 guards against |f| not yet being in its asymptotic regime
            bound = 2.0 * max(abs(f(T)), abs(f(1.25 * T))) / rate
            if bound <= tol:
                return T, bound
            T *= 2.0
        raise QuadratureFailure("tail bound did not reach tolerance (exp hint)")
    if kind == "poly":
        p = float(tail[1])
        if p <= 1:
            raise ValueError("poly tail needs power > 1 for integrability")
        T = 8.0
        for _ in range(80):
            bound = 2.0 * max(abs(f(T)), abs(f(1.25 * T))) * T / (p - 1.0)
            if bound <= tol:
                return T, bound
            T *= 4.0
        raise QuadratureFailure("tail bound did not reach tolerance (poly hint)")
    raise ValueError(f"unknown tail hint {tail!r}")


def integrate_semiinf(f, tol, tail=("exp", 1.0)) -> QuadratureResult:
    """Integrate f over [0, inf): adaptive Gauss-Kronrod on [0, T*] plus an
    analytic tail bound taken from the caller's decay hint."""
    g = _CountedFunc(f)
    T, tail_bound = _tail_cutoff_and_bound(g, tail, tol / 2.0)
    res = integrate_finite(g, 0.0, T, tol / 2.0, _pre_counted=True)
    err = res.error_bound + tail_bound
    if err > tol:
        raise QuadratureFailure(
            f"certified error {err:.3e} exceeds tolerance {tol:.3e}"
        )
    return QuadratureResult(res.value, err, g.calls)


def integrate_finite(f, a, b, tol, _pre_counted=False) -> QuadratureResult:
    """Adaptive Gauss-Kronrod on [a, b] with a certified absolute error bound."""
    g = f if _pre_counted else _CountedFunc(f)
    with np.errstate(over="ignore", under="ignore"):
        value, abserr, info = scipy.integrate.quad(
            g, a, b, epsabs=tol, epsrel=1e-13, limit=800, full_output=True
        )[:3]
    if abserr > tol:
        # one retry with a split at the midpoint helps kinked integrands
        mid = 0.5 * (a + b)
        v1, e1 = scipy.integrate.quad(g, a, mid, epsabs=tol / 2, epsrel=1e-13, limit=800)
        v2, e2 = scipy.integrate.quad(g, mid, b, epsabs=tol / 2, epsrel=1e-13, limit=800)
        value, abserr = v1 + v2, e1 + e2
    if abserr > tol:
        raise QuadratureFailure(
            f"certified error {abserr:.3e} exceeds tolerance {tol:.3e} on [{a}, {b}]"
        )
    calls = g.calls if isinstance(g, _CountedFunc) else -1
    return QuadratureResult(value, abserr, calls)


# ---------------------------------------------------------------------------
# ODE integration: dense output, events, admissibility guard
# ---------------------------------------------------------------------------


@dataclass
class EventCrossing:
    event_index: int
    time: float
    state: np.ndarray
    direction: int  # +1 upcrossing, -1 downcrossing


@dataclass
class OdeSolution:
    knots: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    step_stats: dict
    crossings: list[EventCrossing] = field(default_factory=list)

    def interp(self, t):
        """Cubic Hermite dense output; reproduces the stored knots exactly."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tk = self.knots
        idx = np.clip(np.searchsorted(tk, t, side="right") - 1, 0, len(tk) - 2)
        t0, t1 = tk[idx], tk[idx + 1]
        h = t1 - t0
        s = np.where(h > 0, (t - t0) / np.where(h > 0, h, 1.0), 0.0)
        y0, y1 = self.states[idx], self.states[idx + 1]
        f0, f1 = self.derivs[idx], self.derivs[idx + 1]
        s = s[:, None]
        h = h[:, None]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        out = h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
        return out[0] if out.shape[0] == 1 and np.isscalar(t[0]) else out

    def first_crossing(self, event_index):
        for c in self.crossings:
            if c.event_index == event_index:
                return c
        return None


def _hermite_eval(t, t0, t1, y0, y1, f0, f1):
    h = t1 - t0
    s = (t - t0) / h
    return (
        (1 + 2 * s) * (1 - s) ** 2 * y0
        + s * (1 - s) ** 2 * h * f0
        + s * s * (3 - 2 * s) * y1
        + s * s * (s - 1) * h * f1
    )


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)


class _Recorder:
    """Knot storage with optional decimation; the final accepted step is always kept."""

    def __init__(self, store_every, store_stride_time=None):
        self.store_every = max(1, int(store_every))
        self.stride_time = store_stride_time
        self.t, self.y, self.f = [], [], []
        self._since = 0

    def push(self, t, y, f, force=False):
        self._since += 1
        if self.stride_time is not None and self.t:
            due = t - self.t[-1] >= self.stride_time
        else:
            due = self._since >= self.store_every
        if force or due or not self.t:
            self.t.append(t)
            self.y.append(np.array(y))
            self.f.append(np.array(f))
            self._since = 0

    def replace_last(self, t, y, f):
        self.t[-1] = t
        self.y[-1] = np.array(y)
        self.f[-1] = np.array(f)

    def arrays(self):
        return (
            np.asarray(self.t),
            np.asarray(self.y),
            np.asarray(self.f),
        )


def _locate_crossing(g, t0, t1, g0, g1, time_tol):
    """Bisection on a scalar function of time over [t0, t1] with g0*g1 <= 0."""
    a, b, ga = t0, t1, g0
    while b - a > time_tol:
        m = 0.5 * (a + b)
        gm = g(m)
        if (ga <= 0 < gm) or (ga >= 0 > gm) or (ga < 0 <= gm) or (ga > 0 >= gm):
            b = m
        else:
            a, ga = m, gm
    return 0.5 * (a + b)


def _scan_events(events, terminal, t0, y0, f0, t1, y1, f1, gvals, time_tol, crossings):
    """Detect sign changes of each event over one step, refine on the Hermite
    interpolant, append crossings. Returns (terminal_time or None)."""
    hit_time = None
    for j, ev in enumerate(events):
        g0 = gvals[j]
        g1 = ev(t1, y1)
        if g0 is not None and (g0 < 0 <= g1 or g0 > 0 >= g1):
            def gt(t, _ev=ev):
                return _ev(t, _hermite_eval(t, t0, t1, y0, y1, f0, f1))

            tc = _locate_crossing(gt, t0, t1, g0, g1, time_tol)
            yc = _hermite_eval(tc, t0, t1, y0, y1, f0, f1)
            crossings.append(
                EventCrossing(j, tc, yc, +1 if g1 > g0 else -1)
            )
            if terminal[j] and (hit_time is None or tc < hit_time):
                hit_time = tc
        gvals[j] = g1
    return hit_time


def solve_ode(
    rhs,
    y0,
    tau_max,
    method="rk45",
    rtol=1e-9,
    atol=1e-12,
    h0=None,
    h_fixed=None,
    events=(),
    terminal=(),
    admissible=None,
    store_every=1,
    store_stride_time=None,
    stop_after=None,
    max_steps=20_000_000,
) -> OdeSolution:
    """Integrate y' = rhs(t, y) on [0, tau_max].

    method "rk45" is adaptive Dormand-Prince with PI step control; "abm4" is
    the fixed-step 4th-order Adams-Bashforth-Moulton predictor-corrector
    (RK4 bootstrap), requiring h_fixed. Dense output is per-interval cubic
    Hermite. Each event's sign changes are localized by bisection on the
    interpolant to a time tolerance of 1e-9 * tau_max; integration stops at
    the first terminal event. `admissible(y)` vetoes trial steps (the step is
    rejected and halved) without projecting the state.
    """
    y0 = np.asarray(y0, dtype=float)
    events = list(events)
    terminal = list(terminal) if terminal else [False] * len(events)
    if len(terminal) != len(events):
        raise ValueError("terminal flags must match events")
    time_tol = 1e-9 * max(tau_max, 1.0)

    if method == "rk45":
        return _solve_rk45(
            rhs, y0, tau_max, rtol, atol, h0, events, terminal, admissible,
            store_every, store_stride_time, stop_after, max_steps, time_tol,
        )
    if method == "abm4":
        if h_fixed is None:
            raise ValueError("abm4 requires h_fixed")
        return _solve_abm4(
            rhs, y0, tau_max, h_fixed, events, terminal, store_every,
            store_stride_time, stop_after, time_tol,
        )
    raise ValueError(f"unknown method {method!r}")


def _initial_step(rhs, y0, f0, rtol, atol, tau_max):
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
    return min(h, tau_max)


def _solve_rk45(
    rhs, y0, tau_max, rtol, atol, h0, events, terminal, admissible,
    store_every, store_stride_time, stop_after, max_steps, time_tol,
):
    t, y = 0.0, y0.copy()
    f = np.asarray(rhs(t, y), dtype=float)
    nfev = 1
    h = h0 if h0 is not None else _initial_step(rhs, y0, f, rtol, atol, tau_max)
    rec = _Recorder(store_every, store_stride_time)
    rec.push(t, y, f, force=True)
    crossings: list[EventCrossing] = []
    gvals = [ev(t, y) for ev in events]
    accepted = rejected = 0
    k = np.empty((7, y.size))
    just_rejected = False

    while t < tau_max:
        if accepted + rejected > max_steps:
            raise StepSizeUnderflow("step budget exhausted")
        h = min(h, tau_max - t)
        # underflow means t + h is no longer distinguishable from t
        if h < max(1e-300, 4e-16 * t):
            raise StepSizeUnderflow(f"step size underflow at t={t:.6e}")
        k[0] = f
        bad = False
        for i in range(1, 7):
            yi = y + h * (k[:i].T @ _DP_A[i])
            if not np.all(np.isfinite(yi)):
                bad = True
                break
            k[i] = rhs(t + _DP_C[i] * h, yi)
            nfev += 1
        if not bad:
            y1 = y + h * (k.T @ _DP_B5)
            bad = not np.all(np.isfinite(y1)) or not np.all(np.isfinite(k[6]))
        if not bad and admissible is not None and not admissible(y1):
            bad = True
        if bad:
            rejected += 1
            just_rejected = True
            h *= 0.5
            continue
        err_vec = h * (k.T @ _DP_E)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y1))
        err = np.sqrt(np.mean((err_vec / scale) ** 2))
        if err <= 1.0:
            t1 = t + h
            f1 = k[6].copy()  # FSAL: stage 7 is rhs(t1, y1); copy, k is reused
            hit = _scan_events(
                events, terminal, t, y, f, t1, y1, f1, gvals, time_tol, crossings
            )
            if hit is not None:
                yc = _hermite_eval(hit, t, t1, y, y1, f, f1)
                rec.push(hit, yc, rhs(hit, yc), force=True)
                nfev += 1
                accepted += 1
                break
            t, y, f = t1, y1, f1
            accepted += 1
            rec.push(t, y, f, force=(t >= tau_max))
            if stop_after is not None and stop_after(crossings):
                rec.push(t, y, f, force=True)
                break
            grow = min(5.0, max(0.2, 0.9 * err ** -0.2)) if err > 0 else 5.0
            h *= min(grow, 1.0) if just_rejected else grow
            just_rejected = False
        else:
            rejected += 1
            just_rejected = True
            h *= max(0.2, 0.9 * err ** -0.2)

    knots, states, derivs = rec.arrays()
    stats = {
        "method": "rk45",
        "accepted": accepted,
        "rejected": rejected,
        "nfev": nfev,
        "rtol": rtol,
        "atol": atol,
    }
    return OdeSolution(knots, states, derivs, stats, crossings)


def _solve_abm4(
    rhs, y0, tau_max, h, events, terminal, store_every, store_stride_time,
    stop_after, time_tol,
):
    n_steps = max(4, int(np.ceil(tau_max / h)))
    h = tau_max / n_steps
    t, y = 0.0, y0.copy()
    f = np.asarray(rhs(t, y), dtype=float)
    nfev = 1
    rec = _Recorder(store_every, store_stride_time)
    rec.push(t, y, f, force=True)
    crossings: list[EventCrossing] = []
    gvals = [ev(t, y) for ev in events]
    hist = [f]

    def rk4_step(t, y):
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    stopped = False
    for step in range(n_steps):
        if step < 3:
            y1 = rk4_step(t, y)
            nfev += 4
        else:
            f3, f2, f1_, f0_ = hist[-4], hist[-3], hist[-2], hist[-1]
            yp = y + h / 24 * (55 * f0_ - 59 * f1_ + 37 * f2 - 9 * f3)
            fp = rhs(t + h, yp)
            y1 = y + h / 24 * (9 * fp + 19 * f0_ - 5 * f1_ + f2)
            nfev += 1
        t1 = t + h
        f1 = np.asarray(rhs(t1, y1), dtype=float)
        nfev += 1
        hit = _scan_events(
            events, terminal, t, y, f, t1, y1, f1, gvals, time_tol, crossings
        )
        if hit is not None:
            yc = _hermite_eval(hit, t, t1, y, y1, f, f1)
            rec.push(hit, yc, rhs(hit, yc), force=True)
            stopped = True
            break
        t, y, f = t1, y1, f1
        hist.append(f)
        if len(hist) > 4:
            hist.pop(0)
        rec.push(t, y, f, force=(step == n_steps - 1))
        if stop_after is not None and stop_after(crossings):
            rec.push(t, y, f, force=True)
            stopped = True
            break

    knots, states, derivs = rec.arrays()
    stats = {
        "method": "abm4",
        "h": h,
        "accepted": int(knots.size - 1),
        "rejected": 0,
        "nfev": nfev,
        "stopped_on_event": stopped,
    }
    return OdeSolution(knots, states, derivs, stats, crossings)


# ---------------------------------------------------------------------------
# Symmetric eigensolver (cyclic Jacobi)
# ---------------------------------------------------------------------------


@dataclass
class SymEigResult:
    eigenvalues: np.ndarray  # sorted descending
    eigenvectors: np.ndarray  # columns match eigenvalues


def sym_eig(A) -> SymEigResult:
    """Cyclic Jacobi rotations until the off-diagonal Frobenius mass is below
    1e-14 * ||A||_F. Deterministic sweep order (row-major upper triangle)."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or n > 256:
        raise ValueError("sym_eig needs a square matrix of size <= 256")
    normA = np.linalg.norm(A)
    if normA > 0 and np.linalg.norm(A - A.T) > 1e-12 * normA:
        raise NotSymmetric("input is not symmetric to 1e-12 relative")
    a = 0.5 * (A + A.T)
    V = np.eye(n)
    if normA == 0.0:
        return SymEigResult(np.zeros(n), V)
    target = 1e-14 * normA
    offmask = ~np.eye(n, dtype=bool)
    for sweep in range(60):
        off = np.sqrt(np.sum(a[offmask] ** 2))
        if off <= target:
            break
        # threshold sweeps: early passes skip entries too small to matter,
        # the threshold decays with the remaining off-diagonal mass
        thresh = 0.1 * off / (n * n) if sweep < 4 else 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= thresh or apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                theta = 0.5 * diff / apq
                tsign = 1.0 if theta >= 0 else -1.0
                tval = tsign / (abs(theta) + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + tval * tval)
                s = tval * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    eigvals = np.diag(a).copy()
    order = np.argsort(-eigvals)
    return SymEigResult(eigvals[order], V[:, order])


# ---------------------------------------------------------------------------
# Polynomial least squares and roots
# ---------------------------------------------------------------------------


def chebyshev_nodes(n):
    """First-kind Chebyshev nodes mapped to the open interval (0, 1)."""
    k = np.arange(n)
    x = np.cos(np.pi * (2 * k + 1) / (2 * n))
    return np.sort(0.5 * (x + 1.0))


def poly_fit(s, y, degree, zero_at_origin=False):
    """Least-squares polynomial of the given degree on sample pairs (s, y) in
    [0, 1]. Solved in the shifted-Chebyshev basis, returned as monomial
    coefficients (ascending). With zero_at_origin the fit has the product
    structure p(s) = s * Q(s), so p(0) = 0 exactly.

    Raises IllConditioned when the normal-equation condition estimate of the
    design exceeds 1e12 (degree cap around 64).
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if degree > 64:
        raise IllConditioned(f"degree {degree} beyond the supported cap")
    if s.size < max(4, degree + 1):
        raise ValueError("not enough samples for the requested degree")
    if zero_at_origin:
        if np.any(s == 0):
            raise ValueError("zero_at_origin fit needs samples away from s=0")
        inner = poly_fit(s, y / s, degree - 1, zero_at_origin=False)
        return np.concatenate([[0.0], inner])
    x = 2.0 * s - 1.0  # shift to [-1, 1]
    V = np.polynomial.chebyshev.chebvander(x, degree)
    cond = np.linalg.cond(V) ** 2
    if cond > 1e12:
        raise IllConditioned(f"normal-equation condition {cond:.3e} exceeds 1e12")
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    # drop noise-floor Chebyshev modes before the (ill-conditioned) monomial
    # conversion so exactly-representable inputs stay exact
    tiny = 1e-14 * np.max(np.abs(coef)) if np.max(np.abs(coef)) > 0 else 0.0
    coef = np.where(np.abs(coef) < tiny, 0.0, coef)
    p = np.polynomial.Chebyshev(coef, domain=[0.0, 1.0]).convert(
        kind=np.polynomial.Polynomial
    )
    full = np.zeros(degree + 1)
    full[: p.coef.size] = p.coef
    return full


def poly_eval(coeffs, s):
    return np.polynomial.polynomial.polyval(s, coeffs)


def poly_roots(coeffs):
    """Roots via companion-matrix eigenvalues; real roots are reported with
    imaginary parts below 1e-9 collapsed to real. Degree must be <= 8."""
    c = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
    if c.size <= 1:
        raise DegreeZero("polynomial has no roots")
    if c.size - 1 > 8:
        raise ValueError("degree above 8 unsupported here")
    r = np.polynomial.polynomial.polyroots(c)
    return np.where(np.abs(r.imag) < 1e-9, r.real, r)


# ---------------------------------------------------------------------------
# Matrix exponential
# ---------------------------------------------------------------------------


def mat_exp(W, t=1.0):
    """e^{W t} by scaling-and-squaring Pade (scipy); exact elementwise path
    for diagonal W."""
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    if W.shape != (n, n) or n > 64:
        raise ValueError("mat_exp needs a square matrix of size <= 64")
    if np.count_nonzero(W - np.diag(np.diag(W))) == 0:
        return np.diag(np.exp(np.diag(W) * t))
    return scipy.linalg.expm(W * t)
