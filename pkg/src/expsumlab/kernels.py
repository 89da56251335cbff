"""Memory kernels: exponential sums, shifted Gaussian bumps, composites,
power laws, and truncations.

Every kernel evaluates pointwise on [0, inf), knows its Laplace transform,
its squared L2 norm, and the weighted moments
    LM_n(w) = int_0^inf t^n e^{-w t} rho(t) dt
that drive the closed-form loss, gradient, and Hessian. Gaussian moments use
an erfcx-stabilized recursion so that far-shifted bumps (center >> width)
stay accurate down to the underflow floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc, erfcx

from . import numerics
from .errors import DomainError

_SQRT2 = math.sqrt(2.0)
_SQRT_PI_2 = math.sqrt(math.pi / 2.0)


class MemoryKernel:
    """Base: immutable, square-integrable density on [0, inf)."""

    def eval(self, t):
        raise NotImplementedError

    def deriv(self, t):
        raise NotImplementedError

    def laplace(self, s, tol=1e-12):
        """int_0^inf e^{-s t} rho(t) dt for s > 0."""
        return self.laplace_moment(0, s, tol=tol)

    def laplace_moment(self, n, w, tol=1e-12):
        """Signed moment int_0^inf t^n e^{-w t} rho(t) dt."""
        raise NotImplementedError

    def l2_norm_sq(self, tol=1e-12):
        raise NotImplementedError

    def quad_tail(self, T):
        """Upper bound on int_T^inf |rho|."""
        raise NotImplementedError

    def _moment_by_quadrature(self, n, w, tol):
        w = float(w)

        def f(t):
            return t ** n * math.exp(-w * t) * self.eval(t)

        # e^{-wt} dominates any square-integrable kernel's tail here
        return numerics.integrate_semiinf(f, tol, tail=("exp", w)).value


@dataclass(frozen=True, eq=False)
class ExpSumKernel(MemoryKernel):
    """rho(t) = sum_j a_j exp(-w_j t) with all rates strictly positive."""

    coeffs: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.atleast_1d(np.asarray(self.coeffs, float)))
        object.__setattr__(self, "rates", np.atleast_1d(np.asarray(self.rates, float)))
        if self.coeffs.shape != self.rates.shape:
            raise ValueError("coeffs and rates must have equal length")
        if np.any(self.rates <= 0):
            raise ValueError("all rates must be strictly positive")

    @property
    def nondegenerate(self):
        distinct = len(np.unique(self.rates)) == self.rates.size
        return bool(distinct and np.all(self.coeffs != 0))

    def eval(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-np.multiply.outer(t, self.rates)) @ self.coeffs

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-np.multiply.outer(t, self.rates)) @ (-self.rates * self.coeffs)

    def laplace_moment(self, n, w, tol=1e-12):
        w = np.asarray(w, dtype=float)
        denom = np.add.outer(w, self.rates) ** (n + 1)
        return math.factorial(n) * (1.0 / denom) @ self.coeffs

    def l2_norm_sq(self, tol=1e-12):
        a, r = self.coeffs, self.rates
        return float(a @ (1.0 / np.add.outer(r, r)) @ a)

    def quad_tail(self, T):
        return float(np.sum(np.abs(self.coeffs) * np.exp(-self.rates * T) / self.rates))


@dataclass(frozen=True, eq=False)
class GaussianBump(MemoryKernel):
    """rho(t) = amplitude * exp(-(t - center)^2 / (2 width^2)), center, width > 0."""

    amplitude: float
    center: float
    width: float

    def __post_init__(self):
        if self.width <= 0 or self.center <= 0:
            raise ValueError("center and width must be positive")

    def eval(self, t):
        t = np.asarray(t, dtype=float)
        z = (t - self.center) / self.width
        return self.amplitude * np.exp(-0.5 * z * z)

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        return self.eval(t) * (self.center - t) / self.width ** 2

    def unit_moment(self, n, w):
        """int_0^inf t^n e^{-w t} e^{-(t-mu)^2/(2 sigma^2)} dt, exact for n <= 3.

        Stable form: with c = mu - w sigma^2,
          G_0 = sigma sqrt(pi/2) erfcx((w sigma^2 - mu)/(sigma sqrt 2)) e^{-mu^2/(2 sigma^2)}
        when the argument is positive, and the recursion
          G_1 = c G_0 + sigma^2 e^{-mu^2/(2 sigma^2)}
          G_n = c G_{n-1} + sigma^2 (n-1) G_{n-2}.
        """
        mu, sg = self.center, self.width
        w = np.asarray(w, dtype=float)
        c = mu - w * sg * sg
        arg = -c / (sg * _SQRT2)
        boundary = math.exp(-0.5 * (mu / sg) ** 2)  # e^{K} * phi_c(0), exact
        with np.errstate(over="ignore", under="ignore"):
            g0_pos = sg * _SQRT_PI_2 * erfcx(arg) * boundary
            K = 0.5 * (w * sg) ** 2 - w * mu
            g0_neg = sg * _SQRT_PI_2 * np.exp(K) * erfc(arg)
        g0 = np.where(arg >= 0, g0_pos, g0_neg)
        if n == 0:
            return g0
        g1 = c * g0 + sg * sg * boundary
        if n == 1:
            return g1
        gm2, gm1 = g0, g1
        for k in range(2, n + 1):
            gm2, gm1 = gm1, c * gm1 + sg * sg * (k - 1) * gm2
        return gm1

    def laplace_moment(self, n, w, tol=1e-12):
        if n <= 3:
            return self.amplitude * self.unit_moment(n, w)
        return self._moment_by_quadrature(n, w, tol)

    def l2_norm_sq(self, tol=1e-12):
        # int_0^inf amp^2 e^{-(t-mu)^2/sigma^2} dt, the width shrinks by sqrt 2
        half = GaussianBump(1.0, self.center, self.width / _SQRT2)
        return float(self.amplitude ** 2 * half.unit_moment(0, 0.0))

    def quad_tail(self, T):
        z = (T - self.center) / (self.width * _SQRT2)
        return float(abs(self.amplitude) * self.width * _SQRT_PI_2 * erfc(z))

    def subgaussian_tail(self):
        """(c0, c1, t0) with |rho_0(t)| <= c0 exp(-c1 t^2) for |t| >= t0, where
        rho_0 is the unshifted template."""
        return abs(self.amplitude), 1.0 / (2.0 * self.width ** 2), self.width


@dataclass(frozen=True, eq=False)
class CompositeKernel(MemoryKernel):
    """Short-memory exponential sum plus a far bump: rho = base + bump."""

    base: ExpSumKernel
    bump: GaussianBump

    def eval(self, t):
        return self.base.eval(t) + self.bump.eval(t)

    def deriv(self, t):
        return self.base.deriv(t) + self.bump.deriv(t)

    def laplace_moment(self, n, w, tol=1e-12):
        return self.base.laplace_moment(n, w, tol) + self.bump.laplace_moment(n, w, tol)

    def l2_norm_sq(self, tol=1e-12):
        cross = float(self.base.coeffs @ self.bump.unit_moment(0, self.base.rates))
        return (
            self.base.l2_norm_sq()
            + 2.0 * self.bump.amplitude * cross
            + self.bump.l2_norm_sq()
        )

    def quad_tail(self, T):
        return self.base.quad_tail(T) + self.bump.quad_tail(T)

    @property
    def memory(self):
        """1/omega, the bump center."""
        return self.bump.center


@dataclass(frozen=True, eq=False)
class PowerLawKernel(MemoryKernel):
    """rho(t) = scale * (1 + t)^(-exponent), exponent > 1 so rho is in L1 ∩ L2.

    The +1 shift avoids the t=0 singularity of a bare power law; exponent is
    1 + omega with omega the memory decay rate.
    """

    exponent: float
    scale: float = 1.0

    def __post_init__(self):
        if self.exponent <= 1:
            raise ValueError("exponent must exceed 1")

    @property
    def omega(self):
        return self.exponent - 1.0

    def eval(self, t):
        t = np.asarray(t, dtype=float)
        return self.scale * (1.0 + t) ** (-self.exponent)

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        return -self.exponent * self.scale * (1.0 + t) ** (-self.exponent - 1.0)

    def laplace_moment(self, n, w, tol=1e-12):
        return self._moment_by_quadrature(n, w, tol)

    def l2_norm_sq(self, tol=1e-12):
        def f(t):
            return self.eval(t) ** 2

        return numerics.integrate_semiinf(
            f, max(tol, 1e-13), tail=("poly", 2 * self.exponent)
        ).value

    def quad_tail(self, T):
        # exact: int_T^inf scale (1+t)^(-1-omega) dt = scale (1+T)^(-omega)/omega
        return float(abs(self.scale) * (1.0 + T) ** (-self.omega) / self.omega)


@dataclass(frozen=True, eq=False)
class TruncatedKernel(MemoryKernel):
    """inner on [0, T], a monotone C1 cubic blend to zero on [T, T+1], zero after.

    The blend matches inner's value and slope at T and lands at zero with zero
    slope at T+1, so the truncated kernel stays C1 where the inner one is.
    """

    inner: MemoryKernel
    cutoff: float
    _v0: float = field(init=False, repr=False)
    _d0: float = field(init=False, repr=False)

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        object.__setattr__(self, "_v0", float(self.inner.eval(self.cutoff)))
        object.__setattr__(self, "_d0", float(self.inner.deriv(self.cutoff)))

    def _blend(self, t):
        # cubic Hermite on [T, T+1]: value v0, slope d0 at T; 0, 0 at T+1
        s = np.asarray(t, dtype=float) - self.cutoff
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        return h00 * self._v0 + h10 * self._d0

    def blend_monotone(self):
        """Fritsch-Carlson style check that the blend is monotone on [T, T+1]."""
        if self._v0 == 0:
            return True
        ratio = self._d0 / (-self._v0)  # slope over secant, secant = -v0
        return 0.0 <= ratio <= 3.0

    def eval(self, t):
        t = np.asarray(t, dtype=float)
        out = np.where(
            t <= self.cutoff,
            self.inner.eval(np.minimum(t, self.cutoff)),
            np.where(t >= self.cutoff + 1.0, 0.0, self._blend(t)),
        )
        return out if out.ndim else float(out)

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        s = t - self.cutoff
        dblend = (6 * s * s - 6 * s) * self._v0 + (3 * s * s - 4 * s + 1) * self._d0
        out = np.where(
            t <= self.cutoff,
            self.inner.deriv(np.minimum(t, self.cutoff)),
            np.where(t >= self.cutoff + 1.0, 0.0, dblend),
        )
        return out if out.ndim else float(out)

    def laplace_moment(self, n, w, tol=1e-12):
        w = float(w)

        def f(t):
            return t ** n * math.exp(-w * t) * self.eval(t)

        return numerics.integrate_semiinf(f, tol, tail=("cut", self.cutoff + 1.0)).value

    def l2_norm_sq(self, tol=1e-12):
        def f(t):
            return self.eval(t) ** 2

        return numerics.integrate_semiinf(
            f, max(tol, 1e-13), tail=("cut", self.cutoff + 1.0)
        ).value

    def quad_tail(self, T):
        if T >= self.cutoff + 1.0:
            return 0.0
        return self.inner.quad_tail(T)


# ---------------------------------------------------------------------------
# Moments of the bump magnitude and the sub-Gaussian comparison envelope
# ---------------------------------------------------------------------------


def _as_bump(kernel):
    if isinstance(kernel, CompositeKernel):
        return kernel.bump
    if isinstance(kernel, GaussianBump):
        return kernel
    raise TypeError("expected a GaussianBump or a CompositeKernel")


def delta_moment(kernel, n, w, tol=1e-12):
    """int_0^inf t^n e^{-w t} |bump(t)| dt.

    Closed form for n = 0 (single-signed Gaussian, so |.| is free); certified
    quadrature for n >= 1. Monotone non-increasing in w.
    """
    bump = _as_bump(kernel)
    if n not in (0, 1, 2, 3):
        raise ValueError("n must be in {0, 1, 2, 3}")
    if w <= 0:
        raise ValueError("w must be positive")
    if bump.amplitude == 0.0:
        return 0.0
    if n == 0:
        return float(abs(bump.amplitude) * bump.unit_moment(0, w))

    def f(t):
        return t ** n * math.exp(-w * t) * abs(bump.eval(t))

    return numerics.integrate_semiinf(f, tol, tail=("exp", float(w))).value


def signed_bump_moment(kernel, n, w):
    """Signed counterpart of delta_moment, closed form for n <= 3."""
    bump = _as_bump(kernel)
    return bump.amplitude * bump.unit_moment(n, np.asarray(w, dtype=float))


def subgaussian_bound(n, w, omega, tail, prefactor=1.0):
    """Decay envelope omega^{-n} e^{-w/omega} (c2^{w^2} + c3^w) * prefactor with
    c2 = e^{1/(4 c1)}, c3 = e^{t0}. A comparison curve only, never ground truth.

    tail is (c0, c1, t0) from the bump's sub-Gaussian tail bound.
    """
    c0, c1, t0 = tail
    upper = min(0.5, 1.0 / t0, 2.0 * c1 / w)
    if not 0.0 < omega < upper:
        raise DomainError(f"omega must lie in (0, {upper:.4g})")
    c2 = math.exp(1.0 / (4.0 * c1))
    c3 = math.exp(t0)
    return prefactor * omega ** (-n) * math.exp(-w / omega) * (c2 ** (w * w) + c3 ** w)


# ---------------------------------------------------------------------------
# Config-record construction (used by the experiment runner)
# ---------------------------------------------------------------------------


def kernel_from_config(cfg: dict) -> MemoryKernel:
    kind = cfg.get("kind")
    if kind == "expsum":
        return ExpSumKernel(np.asarray(cfg["coeffs"], float), np.asarray(cfg["rates"], float))
    if kind == "gaussian_bump":
        return GaussianBump(cfg["amplitude"], cfg["center"], cfg["width"])
    if kind == "composite":
        return CompositeKernel(
            ExpSumKernel(np.asarray(cfg["coeffs"], float), np.asarray(cfg["rates"], float)),
            GaussianBump(cfg["amplitude"], cfg["center"], cfg["width"]),
        )
    if kind == "power_law":
        return PowerLawKernel(cfg["exponent"], cfg.get("scale", 1.0))
    if kind == "truncated":
        return TruncatedKernel(kernel_from_config(cfg["inner"]), cfg["cutoff"])
    raise ValueError(f"unknown kernel kind {kind!r}")
