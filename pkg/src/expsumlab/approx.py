"""Constructive approximation of memory kernels by exponential sums with
equispaced rates: the exp-transform polynomial fit, certified L1 error,
tail truncation for slowly decaying kernels, and the minimum-width sweep.

The construction maps t to s = exp(-beta t / (alpha + 1)), fits the
transformed kernel q(s) = rho(t(s)) / s by a polynomial Q of degree m - 1 on
Chebyshev nodes, and realizes phi_m(t) = s Q(s) as a width-m linear state
space with rates k beta/(alpha+1), k = 1..m. Polynomial evaluation goes
through the Chebyshev form (Clenshaw); the monomial coefficients are exported
as the input weights of the state-space realization, whose conditioning
degrades at high degree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import CapExceeded, DecayViolation
from .kernels import MemoryKernel, PowerLawKernel, TruncatedKernel


@dataclass
class RateConstruction:
    alpha: int
    beta: float
    m: int
    cheb_coeffs: np.ndarray  # Q on [0, 1] in shifted-Chebyshev form
    mono_coeffs: np.ndarray  # Q in monomial form: state-space input weights
    gamma_estimate: float

    @property
    def rates(self):
        """Diagonal decay rates of the realization, k beta/(alpha+1)."""
        return np.arange(1, self.m + 1) * self.beta / (self.alpha + 1.0)

    @property
    def readout(self):
        return np.ones(self.m)

    @property
    def input_weights(self):
        return self.mono_coeffs.copy()

    def state_space(self):
        """(c, W, U) with phi_m(t) = c^T e^{W t} U."""
        return self.readout, np.diag(-self.rates), self.input_weights.reshape(-1, 1)

    def eval_q(self, s):
        x = 2.0 * np.asarray(s, dtype=float) - 1.0
        return np.polynomial.chebyshev.chebval(x, self.cheb_coeffs)

    def eval(self, t):
        """phi_m(t) = s Q(s), s = exp(-beta t/(alpha+1)), in the stable form."""
        s = np.exp(-self.beta * np.asarray(t, dtype=float) / (self.alpha + 1.0))
        return s * self.eval_q(s)

    def eval_state_space(self, t):
        """phi_m through the realization's monomial weights; ill-conditioned
        at high degree, kept for consistency checks."""
        s = np.exp(-self.beta * np.asarray(t, dtype=float) / (self.alpha + 1.0))
        return s * np.polynomial.polynomial.polyval(s, self.mono_coeffs)


def _decay_precheck(target, alpha, beta, n=400):
    """rho(t) e^{beta t/(alpha+1)} must stay bounded, otherwise the transform
    q(s) blows up at s = 0. Checked by comparing the late-window maximum of
    the weighted kernel against its early-window maximum."""
    t_hi = 20.0 * (alpha + 1.0) / beta
    t = np.linspace(0.0, t_hi, n)
    vals = np.abs(np.asarray(target.eval(t), float)) * np.exp(beta * t / (alpha + 1.0))
    early = np.max(vals[: n // 2])
    late = np.max(vals[n // 2 :])
    if late > 4.0 * max(early, 1e-300):
        raise DecayViolation(
            f"kernel decays slower than exp(-beta t/(alpha+1)) with beta={beta}"
        )
    return float(np.max(vals))


def rate_construct(target: MemoryKernel, alpha: int, beta: float, m: int) -> RateConstruction:
    """Fit the width-m construction to the target kernel.

    Samples q on 4m Chebyshev nodes of (0, 1) and solves the degree m-1
    least-squares fit. Raises DecayViolation when the kernel's tail is too
    heavy for the chosen beta, IllConditioned past the degree cap.
    """
    if m < 1 or m > 64:
        raise ValueError("width m must be in 1..64")
    gamma_est = _decay_precheck(target, alpha, beta)
    n_nodes = max(4 * m, 16)
    s = numerics.chebyshev_nodes(n_nodes)
    t = -(alpha + 1.0) * np.log(s) / beta
    q = np.asarray(target.eval(t), float) / s
    cheb = _cheb_fit(s, q, m - 1)
    mono = np.polynomial.Chebyshev(cheb, domain=[0.0, 1.0]).convert(
        kind=np.polynomial.Polynomial
    ).coef
    full = np.zeros(m)
    full[: mono.size] = mono
    return RateConstruction(alpha, float(beta), m, cheb, full, gamma_est)


def _cheb_fit(s, y, degree):
    x = 2.0 * s - 1.0
    V = np.polynomial.chebyshev.chebvander(x, degree)
    cond = np.linalg.cond(V) ** 2
    if cond > 1e12:
        from .errors import IllConditioned

        raise IllConditioned(f"normal-equation condition {cond:.3e} exceeds 1e12")
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    tiny = 1e-14 * np.max(np.abs(coef)) if np.max(np.abs(coef)) > 0 else 0.0
    return np.where(np.abs(coef) < tiny, 0.0, coef)


def l1_error(construction: RateConstruction, target: MemoryKernel, tol: float | None = None) -> float:
    """Certified integral of |rho - phi_m| over [0, inf). Upper-bounds the
    worst-case output error over inputs bounded by one.

    With tol=None the tolerance adapts to the error itself: a trapezoid
    pre-estimate sets the scale and the certified pass asks for three more
    digits. The many sign changes of the mismatch make very tight absolute
    tolerances wasteful.
    """
    beta_eff = construction.beta / (construction.alpha + 1.0)
    q_sup = float(np.max(np.abs(construction.eval_q(np.linspace(0, 1, 512)))))

    def f(t):
        return abs(float(target.eval(t)) - float(construction.eval(t)))

    if tol is None:
        t_pre = np.linspace(0.0, 40.0 / beta_eff, 4001)
        pre = np.trapz(np.abs(np.asarray(target.eval(t_pre), float) - construction.eval(t_pre)), t_pre)
        tol = max(1e-12, 1e-3 * pre)
    # |phi_m| <= q_sup e^{-beta_eff t} covers the construction's tail; the
    # kernel's own tail bound covers the rest
    T = 1.0
    tail = math.inf
    for _ in range(200):
        tail = target.quad_tail(T) + q_sup * math.exp(-beta_eff * T) / beta_eff
        if tail <= tol / 2.0:
            break
        T *= 1.5
    res = numerics.integrate_finite(f, 0.0, T, tol / 2.0)
    return res.value + tail


def sup_grid_error(construction: RateConstruction, target: MemoryKernel, t_max=None, n=2000) -> float:
    """Max-abs mismatch on a dense grid; recorded alongside the L1 number."""
    if t_max is None:
        t_max = 20.0 * (construction.alpha + 1.0) / construction.beta
    t = np.linspace(0.0, t_max, n)
    return float(np.max(np.abs(np.asarray(target.eval(t), float) - construction.eval(t))))


def truncate_and_bound(target: PowerLawKernel, T: float):
    """Truncated kernel plus the exact tail integral beyond T."""
    if T < 1.0:
        raise ValueError("truncation point must be at least 1")
    return TruncatedKernel(target, float(T)), target.quad_tail(T)


@dataclass
class WidthResult:
    m_min: int | None
    achieved_error: float
    rows: list  # (m, T, l1, tail, total) per width probed
    eps: float

    def curve(self):
        return np.array([(r[0], r[4]) for r in self.rows])


def _golden_min(fn, lo, hi, iters=24):
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = math.log(lo), math.log(hi)
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = fn(math.exp(c)), fn(math.exp(d))
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fn(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fn(math.exp(d))
    x = math.exp(0.5 * (a + b))
    return x, fn(x)


def min_width(target: PowerLawKernel, eps: float, m_cap: int = 64, alpha: int = 1) -> WidthResult:
    """Smallest width m whose certified total error (truncation tail plus fit
    L1 error at the golden-section-optimal horizon T, with beta = 2/T) is at
    most eps. Raises CapExceeded past m_cap with the best error achieved."""
    if not (1e-3 < eps < 1.0):
        raise ValueError("eps must lie in (1e-3, 1)")
    omega = target.omega
    # horizons bracketed by where the pure tail already meets / dwarfs eps
    T_lo = max(1.0, (abs(target.scale) / (omega * eps)) ** (1.0 / omega) - 1.0)
    T_hi = max(2.0 * T_lo, (abs(target.scale) / (omega * eps * 0.02)) ** (1.0 / omega))
    rows = []
    best_overall = math.inf
    m_min = None
    for m in range(1, m_cap + 1):
        def total(T, m=m):
            trunc, tail = truncate_and_bound(target, T)
            try:
                con = rate_construct(trunc, alpha, 2.0 / T, m)
                fit = l1_error(con, trunc, tol=max(1e-9, eps * 1e-4))
            except Exception:
                return math.inf
            return tail + fit

        T_best, val = _golden_min(total, T_lo, T_hi)
        trunc, tail = truncate_and_bound(target, T_best)
        fit = val - tail if math.isfinite(val) else math.inf
        rows.append((m, T_best, fit, tail, val))
        best_overall = min(best_overall, val)
        if val <= eps:
            m_min = m
            break
    if m_min is None:
        raise CapExceeded(
            f"no width up to {m_cap} meets eps={eps}", best_error=best_overall
        )
    return WidthResult(m_min, best_overall, rows, eps)
