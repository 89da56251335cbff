"""Census of the coincided critical affine spaces of the exponential-sum loss:
partition enumeration and Stirling counts, non-degenerate anchor solves,
lifts onto the affine spaces, Hessian degeneracy, and the two-mode
saddle / degenerate-stable classification.

Collapsing the m model rates onto d distinct anchor rates (an ordered set
partition) and splitting the anchor coefficients within blocks produces an
(m - d)-dimensional affine set of stationary points whenever the anchor is a
non-degenerate stationary point of the d-mode problem.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import expsum, numerics
from .errors import AnchorNotCritical, NoNondegeneratePointFound, Overflow
from .expsum import ExpSumModel
from .kernels import MemoryKernel

_STIRLING_CAP = 20


def stirling2(m: int, d: int) -> int:
    """Stirling number of the second kind by the recurrence
    {m, d} = d {m-1, d} + {m-1, d-1}, exact integer arithmetic."""
    if not (1 <= d <= m):
        raise ValueError("need 1 <= d <= m")
    if m > _STIRLING_CAP:
        raise Overflow(f"m = {m} beyond the exact-count cap {_STIRLING_CAP}")
    prev = [1]  # row {1, d}, d = 1
    for n in range(2, m + 1):
        row = [0] * n
        row[0] = 1
        row[n - 1] = 1
        for k in range(2, n):
            row[k - 1] = k * prev[k - 1] + prev[k - 2]
        prev = row
    return prev[d - 1]


def count_critical_spaces(m: int, d_max: int) -> int:
    """sum_{d=1}^{d_max} d! {m, d}: ordered-partition count of the affine
    spaces of collapsed-rate stationary points."""
    if d_max > min(m, _STIRLING_CAP):
        raise Overflow("d_max beyond the supported cap")
    return sum(math.factorial(d) * stirling2(m, d) for d in range(1, d_max + 1))


def ordered_partitions(m: int, d: int):
    """All ways to assign indices {0..m-1} onto d labelled nonempty blocks
    (surjections), as tuples of index tuples. Count is d! {m, d}."""
    for assign in itertools.product(range(d), repeat=m):
        if len(set(assign)) != d:
            continue
        yield tuple(tuple(i for i in range(m) if assign[i] == j) for j in range(d))


@dataclass(frozen=True)
class Partition:
    """Index blocks mapping model modes onto anchor modes; zero_blocks carry
    rates absent from the anchor with coefficients summing to zero."""

    blocks: tuple
    universe: int
    zero_blocks: tuple = ()

    def __post_init__(self):
        all_idx = [i for b in list(self.blocks) + list(self.zero_blocks) for i in b]
        if sorted(all_idx) != list(range(self.universe)):
            raise ValueError("blocks must partition 0..m-1")
        if any(len(b) == 0 for b in self.blocks) or any(len(b) == 0 for b in self.zero_blocks):
            raise ValueError("blocks must be nonempty")

    @property
    def d(self):
        return len(self.blocks)


@dataclass
class CriticalSpace:
    partition: Partition
    anchor_b: np.ndarray
    anchor_v: np.ndarray
    zero_rates: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.anchor_b = np.atleast_1d(np.asarray(self.anchor_b, float))
        self.anchor_v = np.atleast_1d(np.asarray(self.anchor_v, float))
        if np.any(self.anchor_v <= 0):
            raise ValueError("anchor rates must be positive")
        if len(np.unique(self.anchor_v)) != self.anchor_v.size:
            raise ValueError("anchor rates must be pairwise distinct")

    @property
    def dimension(self):
        free = sum(len(b) - 1 for b in self.partition.blocks)
        free += sum(len(b) - 1 for b in self.partition.zero_blocks)
        return free


# ---------------------------------------------------------------------------
# Non-degenerate anchors: multi-start variable-projection + Newton polish
# ---------------------------------------------------------------------------


def _varpro_value(v, target):
    """J_d minimized over the linear coefficients at fixed rates v > 0."""
    A = 1.0 / np.add.outer(v, v)
    L = target.laplace_moment(0, v)
    try:
        b = np.linalg.solve(A, L)
    except np.linalg.LinAlgError:
        return np.inf, None
    return float(target.l2_norm_sq() - L @ b), b


def _pencil_rates(target, d, t_max=20.0, n=200):
    """Matrix-pencil estimate of d decay rates from samples of the kernel;
    used as one informed start among the random ones."""
    t = np.linspace(0.0, t_max, n)
    y = np.asarray(target.eval(t), dtype=float)
    half = n // 2
    H0 = np.array([y[i : i + half] for i in range(n - half)])
    U, s, Vt = np.linalg.svd(H0, full_matrices=False)
    k = int(min(d, np.sum(s > 1e-12 * s[0])))
    if k == 0:
        return None
    U1, U2 = U[:-1, :k], U[1:, :k]
    M = np.linalg.pinv(U1) @ U2
    lam = np.linalg.eigvals(M)
    dt = t[1] - t[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = -np.log(np.abs(lam) + 1e-300) / dt
    rates = np.sort(rates[(rates > 1e-4) & (rates < 1e4) & np.isfinite(rates)])
    if rates.size < d:
        return None
    return rates[:d]


def newton_polish(model: ExpSumModel, target, iters=40, tol=1e-12):
    """Damped Newton on the full (b, v) stationarity system."""
    theta = model.theta()
    m = model.m
    for _ in range(iters):
        mod = ExpSumModel.from_theta(theta)
        g = expsum.grad(mod, target)
        gn = np.linalg.norm(g)
        if gn <= tol:
            break
        H = expsum.hessian(mod, target)
        lam = 1e-12
        moved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(H + lam * np.eye(2 * m), -g)
            except np.linalg.LinAlgError:
                lam = max(lam * 10, 1e-8)
                continue
            cand = theta + step
            if np.all(cand[m:] > 0):
                gc = np.linalg.norm(expsum.grad(ExpSumModel.from_theta(cand), target))
                if gc < gn:
                    theta = cand
                    moved = True
                    break
            lam = max(lam * 10, 1e-8)
        if not moved:
            break
    return ExpSumModel.from_theta(theta)


def aigrain_williams_residual(model: ExpSumModel, target) -> float:
    """Stationarity expressed through Laplace transforms: the fit's transform
    and its derivative must match the target's at every model rate."""
    fit = model.as_kernel()
    v = model.w
    r0 = fit.laplace_moment(0, v) - target.laplace_moment(0, v)
    r1 = fit.laplace_moment(1, v) - target.laplace_moment(1, v)
    return float(max(np.max(np.abs(r0)), np.max(np.abs(r1))))


def find_nondegenerate_min(
    target: MemoryKernel,
    d: int,
    starts: int = 32,
    seed: int = 0,
    v_range=(0.05, 20.0),
    aw_tol: float = 1e-7,
    degenerate_tol: float = 1e-6,
):
    """Best non-degenerate stationary point of the d-mode loss found by
    multi-start variable projection over the rates (simplex search in
    log-rates) followed by a damped Newton polish, verified through the
    Laplace-transform stationarity residual.

    Raises NoNondegeneratePointFound when every start ends degenerate
    (a vanishing coefficient or a rate collision).
    """
    rng = np.random.default_rng(np.random.Philox(key=seed))
    lo, hi = math.log(v_range[0]), math.log(v_range[1])
    start_list = [np.sort(rng.uniform(lo, hi, d)) for _ in range(starts)]
    pencil = _pencil_rates(target, d)
    if pencil is not None and np.all(pencil > 0):
        start_list.append(np.log(pencil))

    def objective(logv):
        val, _ = _varpro_value(np.exp(np.clip(logv, -23, 23)), target)
        return val if np.isfinite(val) else 1e300

    best = None
    for x0 in start_list:
        res = scipy.optimize.minimize(
            objective, x0, method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-15, "maxiter": 4000},
        )
        v = np.exp(np.clip(res.x, -23, 23))
        val, b = _varpro_value(v, target)
        if b is None or not np.all(np.isfinite(b)):
            continue
        model = newton_polish(ExpSumModel(b, v), target)
        val = expsum.loss(model, target)
        scale = max(1.0, float(np.max(np.abs(model.a))))
        v_sorted = np.sort(model.w)
        collide = d > 1 and np.min(np.diff(v_sorted)) < degenerate_tol * np.max(v_sorted)
        tiny_b = bool(np.any(np.abs(model.a) < 1e-8 * scale))
        if collide or tiny_b:
            continue
        if aigrain_williams_residual(model, target) > aw_tol * scale:
            continue
        if best is None or val < best[0]:
            best = (val, model)
    if best is None:
        raise NoNondegeneratePointFound(
            f"no non-degenerate stationary point of the {d}-mode loss found"
        )
    val, model = best
    order = np.argsort(model.w)
    return ExpSumModel(model.a[order], model.w[order]), val


# ---------------------------------------------------------------------------
# Lifts and Hessian structure on the affine spaces
# ---------------------------------------------------------------------------


def lift(space: CriticalSpace, free_coords, target=None, anchor_tol: float = 1e-7) -> ExpSumModel:
    """The model on the affine space selected by the within-block coefficient
    splits. free_coords supplies the first |block|-1 coefficients of each
    block (the last is the block sum minus the rest); zero blocks sum to 0.

    When a target is supplied, the anchor's stationarity is checked first.
    """
    part = space.partition
    m = part.universe
    free_coords = np.atleast_1d(np.asarray(free_coords, float)) if np.size(free_coords) else np.empty(0)
    need = sum(len(b) - 1 for b in part.blocks) + sum(len(b) - 1 for b in part.zero_blocks)
    if free_coords.size != need:
        raise ValueError(f"expected {need} free coordinates, got {free_coords.size}")
    if target is not None:
        anchor = ExpSumModel(space.anchor_b, space.anchor_v)
        gn = np.linalg.norm(expsum.grad(anchor, target))
        if gn > anchor_tol * (1.0 + float(np.max(np.abs(space.anchor_b)))):
            raise AnchorNotCritical(f"anchor gradient norm {gn:.3e} above tolerance")
    a = np.empty(m)
    w = np.empty(m)
    pos = 0
    for j, block in enumerate(part.blocks):
        n = len(block)
        head = free_coords[pos : pos + n - 1]
        pos += n - 1
        vals = np.concatenate([head, [space.anchor_b[j] - head.sum()]])
        for i, idx in enumerate(block):
            a[idx] = vals[i]
            w[idx] = space.anchor_v[j]
    for r, block in enumerate(part.zero_blocks):
        n = len(block)
        head = free_coords[pos : pos + n - 1]
        pos += n - 1
        vals = np.concatenate([head, [-head.sum()]])
        for i, idx in enumerate(block):
            a[idx] = vals[i]
            w[idx] = space.zero_rates[r]
    return ExpSumModel(a, w)


def hessian_on_space(space: CriticalSpace, free_coords, target, zero_rel: float = 1e-8):
    """Eigen-structure of the loss Hessian at a lifted point: with m model
    modes collapsed onto d anchor modes the rank is at most m + d, leaving at
    least m - d zero eigenvalues."""
    model = lift(space, free_coords, target)
    H = expsum.hessian(model, target)
    eig = numerics.sym_eig(H)
    lam = eig.eigenvalues
    thresh = zero_rel * np.max(np.abs(lam)) if lam.size else 0.0
    rank = int(np.sum(np.abs(lam) > thresh))
    return {
        "model": model,
        "eigenvalues": lam,
        "rank": rank,
        "zero_count": int(lam.size - rank),
        "zero_threshold": thresh,
        "grad_norm": float(np.linalg.norm(expsum.grad(model, target))),
    }


def enumerate_spaces(target, m: int, d_max: int | None = None, starts: int = 48, seed: int = 0):
    """All d!{m,d} affine spaces for d = 1..d_max over a fixed target: one
    anchor solve per d, one CriticalSpace per ordered partition. Zero blocks
    are not enumerated (they carry only degenerate splits); they remain
    constructible through CriticalSpace directly."""
    if d_max is None:
        d_max = m
    anchors = {}
    for d in range(1, d_max + 1):
        anchors[d] = find_nondegenerate_min(target, d, starts=starts, seed=seed)
    out = []
    for d in range(1, d_max + 1):
        model, _val = anchors[d]
        for blocks in ordered_partitions(m, d):
            part = Partition(blocks=blocks, universe=m)
            out.append(CriticalSpace(part, model.a.copy(), model.w.copy()))
    return out, anchors


# ---------------------------------------------------------------------------
# Two-mode classification along the critical line
# ---------------------------------------------------------------------------


def classify_2d(target, a1_grid, anchor=None, zero_rel: float = 1e-8, starts: int = 32, seed: int = 0):
    """Eigenvalue-sign classification of the 4x4 Hessian along the critical
    line (a1, a_hat - a1, w_hat, w_hat) built from the one-mode anchor.

    Labels per grid point: "saddle" when the smallest eigenvalue is clearly
    negative, "degenerate-stable" when it vanishes to tolerance (the line
    direction itself is always flat), "indeterminate" in the crossover band
    within 10x the zero threshold.
    """
    if anchor is None:
        anchor, _ = find_nondegenerate_min(target, 1, starts=starts, seed=seed)
    a_hat = float(anchor.a[0])
    w_hat = float(anchor.w[0])
    labels = []
    lam_mins = []
    for a1 in np.atleast_1d(a1_grid):
        model = ExpSumModel([a1, a_hat - a1], [w_hat, w_hat])
        eig = numerics.sym_eig(expsum.hessian(model, target))
        lam = eig.eigenvalues
        thresh = zero_rel * np.max(np.abs(lam))
        lam_min = float(lam[-1])
        lam_mins.append(lam_min)
        if lam_min < -10.0 * thresh:
            labels.append("saddle")
        elif lam_min >= -thresh:
            labels.append("degenerate-stable")
        else:
            labels.append("indeterminate")
    return labels, np.array(lam_mins), (a_hat, w_hat)
