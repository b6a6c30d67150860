"""Optimal transport between an empirical measure and the (gridded) Lebesgue measure.

Two discrete solvers are provided:

* an exact shortest-augmenting-path assignment solver with dual potentials, used
  for bipartite matching and, after replicating atoms, for small semi-discrete
  instances;
* a certified-approximate solver: entropic regularization in the log domain with
  annealing, a damped Newton method on the atom potentials, and a final rounding
  of the plan to exact marginals.  Its output carries a primal value (a feasible
  plan, so an upper bound on the discrete optimum) and a dual value (c-transform
  of the potentials, so a lower bound).

Continuous brackets: the returned plan is turned into a coupling with the true
Lebesgue measure by spreading each cell uniformly, whose cost is computed exactly
(``cell_refined_cost``); and W2(mu, Leb) >= W2(mu, grid) - W2(grid, Leb) with
W2^2(grid_K, Leb) = s^2/6, s = 1/K.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from .ansatz import InvalidConfiguration
from .torus import InvalidInput, SampleSet, _reduce_half, grid_centers, pairwise_dist2

log = logging.getLogger(__name__)

EXACT = "exact"
APPROX = "certified-approximate"
EXACT_MAX_N = 128
EXACT_MAX_K = 32


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, gap: float):
        super().__init__(f"{message} (achieved gap {gap:.3e})")
        self.gap = gap


@dataclass(frozen=True)
class Coupling:
    sources: np.ndarray
    targets: np.ndarray
    mass: np.ndarray
    n_sources: int
    n_targets: int

    def source_marginal(self) -> np.ndarray:
        return np.bincount(self.sources, weights=self.mass, minlength=self.n_sources)

    def target_marginal(self) -> np.ndarray:
        return np.bincount(self.targets, weights=self.mass, minlength=self.n_targets)


@dataclass(frozen=True)
class DualPotentials:
    phi: np.ndarray
    psi: np.ndarray


@dataclass(frozen=True)
class TransportResult:
    primal_value: float
    coupling: Coupling
    duals: DualPotentials
    lower_bound: float
    upper_bound: float
    method: str
    dual_value: float
    source_mass: np.ndarray = field(repr=False)
    target_mass: np.ndarray = field(repr=False)
    gap_target: float = 0.0
    K: int | None = None

    @property
    def gap(self) -> float:
        return self.primal_value - self.dual_value


# ---------------------------------------------------------------------------
# exact assignment


def solve_assignment(costs) -> tuple[np.ndarray, float, DualPotentials]:
    """Minimum-cost perfect matching by shortest augmenting paths.

    Returns ``(perm, value, duals)`` where row ``i`` is matched to column
    ``perm[i]`` and ``phi_i + psi_j <= c_ij`` with equality on the matching.
    """
    C = np.asarray(costs, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] == 0:
        raise InvalidInput(f"cost matrix must be square and nonempty, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise InvalidInput("cost matrix must be finite")
    n = C.shape[0]
    # 1-based rows/columns; column 0 is the virtual root of each search
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row on column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cur = C[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    perm[match[1:] - 1] = np.arange(n)
    value = float(math.fsum(C[np.arange(n), perm]))
    return perm, value, DualPotentials(u[1:].copy(), v[1:].copy())


def brute_force_assignment(costs) -> float:
    """Exhaustive minimum over all permutations (small matrices only)."""
    import itertools

    C = np.asarray(costs, dtype=np.float64)
    n = C.shape[0]
    rows = np.arange(n)
    perms = np.array(list(itertools.permutations(range(n))))
    return float(np.min(C[rows, perms].sum(axis=1)))


def assignment_result(costs, mass: float = 1.0) -> TransportResult:
    """Exact assignment packaged as a transport result; every row and column carries ``mass``."""
    C = np.asarray(costs, dtype=np.float64)
    perm, value, duals = solve_assignment(C)
    n = C.shape[0]
    w = np.full(n, float(mass))
    primal = value * mass
    dual_value = float(math.fsum(np.concatenate([duals.phi, duals.psi]))) * mass
    coupling = Coupling(np.arange(n), perm, w, n, n)
    return TransportResult(primal, coupling, duals, primal, primal, EXACT, dual_value, w, w.copy())


def bipartite_w2(X: SampleSet, Y: SampleSet) -> TransportResult:
    if X.n != Y.n:
        raise InvalidInput(f"sample sizes differ: {X.n} vs {Y.n}")
    return assignment_result(pairwise_dist2(X.points, Y.points), 1.0 / X.n)


# ---------------------------------------------------------------------------
# cell integrals


def _periodic_sq_integral(center: np.ndarray, s: float) -> np.ndarray:
    """int over [c - s/2, c + s/2] of the squared periodic distance to 0, c in [-1/2, 1/2)."""
    lo = center - s / 2
    hi = center + s / 2
    # part of the interval beyond -1/2 wraps around to +1/2 (same for above +1/2)
    below = np.clip(-0.5 - lo, 0.0, None)
    above = np.clip(hi - 0.5, 0.0, None)
    plain = (hi**3 - lo**3) / 3.0
    # replace u^2 by (u + 1)^2 on [lo, lo + below], and by (u - 1)^2 on [hi - above, hi]
    corr_below = (((lo + below + 1) ** 3 - (lo + 1) ** 3) - ((lo + below) ** 3 - lo**3)) / 3.0
    corr_above = (((hi - 1) ** 3 - (hi - above - 1) ** 3) - (hi**3 - (hi - above) ** 3)) / 3.0
    return plain + corr_below + corr_above


def cell_average_dist2(atoms: np.ndarray, cells: np.ndarray, K: int) -> np.ndarray:
    """Average over grid cell ``cells[m]`` of the squared periodic distance to ``atoms[m]``.

    Away from the antipodal seam this is |delta|^2 + s^2/6 with delta the
    center-to-atom displacement; cells cut by the seam are integrated exactly.
    """
    s = 1.0 / K
    centers = grid_centers_flat(cells, K)
    delta = _reduce_half(centers - atoms)
    per_axis = _periodic_sq_integral(delta, s) / s
    return per_axis.sum(axis=-1)


def grid_centers_flat(cells: np.ndarray, K: int) -> np.ndarray:
    cells = np.asarray(cells, dtype=np.int64)
    return np.stack([(cells // K + 0.5) / K, (cells % K + 0.5) / K], axis=-1)


def cell_refined_cost(plan: Coupling, sample: SampleSet, K: int) -> float:
    """Exact cost of the continuous coupling that spreads each cell's mass uniformly over the cell."""
    if plan.n_targets != K * K:
        raise InvalidInput(f"plan targets {plan.n_targets} do not match a {K}x{K} grid")
    avg = cell_average_dist2(sample.points[plan.sources], plan.targets, K)
    return float(math.fsum(plan.mass * avg))


def continuous_lower_bound(dual_value: float, K: int) -> float:
    s = 1.0 / K
    return max(0.0, math.sqrt(max(dual_value, 0.0)) - s / math.sqrt(6.0)) ** 2


def default_grid_k(n: int) -> int:
    k = 4 * math.ceil(math.sqrt(n))
    return k + (k % 2)


# ---------------------------------------------------------------------------
# exact transportation


def _transport_exact(C: np.ndarray, a: np.ndarray, b: np.ndarray):
    n, m = C.shape
    if m % n == 0 and np.allclose(a, 1.0 / n) and np.allclose(b, 1.0 / m):
        L = m // n
        perm, _, duals = solve_assignment(np.repeat(C, L, axis=0))
        sources = np.repeat(np.arange(n), L)
        # copies of an atom share the same potential at any optimum: the c-transform of psi
        phi = np.min(C - duals.psi[None, :], axis=1)
        return Coupling(sources, perm, np.full(m, 1.0 / m), n, m), DualPotentials(phi, duals.psi)
    # general masses: transportation LP with HiGHS, duals from equality marginals
    A_rows = sp.kron(sp.eye(n), np.ones((1, m)))
    A_cols = sp.kron(np.ones((1, n)), sp.eye(m))
    A = sp.vstack([A_rows, A_cols]).tocsr()
    res = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise ConvergenceError(f"transportation LP failed: {res.message}", math.inf)
    y = res.eqlin.marginals
    x = res.x.reshape(n, m)
    ii, jj = np.nonzero(x > 0)
    return Coupling(ii, jj, x[ii, jj], n, m), DualPotentials(y[:n].copy(), y[n:].copy())


# ---------------------------------------------------------------------------
# entropic, log domain


def _logsumexp_cols(M: np.ndarray) -> np.ndarray:
    mx = M.max(axis=0)
    return mx + np.log(np.exp(M - mx).sum(axis=0))


def _logsumexp_rows(M: np.ndarray) -> np.ndarray:
    mx = M.max(axis=1)
    return mx + np.log(np.exp(M - mx[:, None]).sum(axis=1))


class _Support:
    """Entries (i, j) kept for the current regularization level, CSC-like by column."""

    def __init__(self, C: np.ndarray, phi: np.ndarray, window: float, max_nnz: int | None = None):
        red = C - phi[:, None]
        red -= red.min(axis=0)[None, :]
        keep = red <= window
        # every atom keeps its closest-to-active cell, otherwise its potential is unbounded
        keep[np.arange(C.shape[0]), np.argmin(red, axis=1)] = True
        del red
        count = int(np.count_nonzero(keep))
        self.shape = C.shape
        self.too_dense = max_nnz is not None and count > max_nnz
        if self.too_dense:
            return
        jj, ii = np.nonzero(keep.T)
        self.rows = ii
        self.cols = jj
        self.cost = C[ii, jj]
        self.starts = np.flatnonzero(np.r_[True, jj[1:] != jj[:-1]])
        self.counts = np.diff(np.r_[self.starts, jj.size])

    @property
    def nnz(self) -> int:
        return self.rows.size


def _sparse_soft_state(S: _Support, phi, log_a, log_b, eps):
    """Soft c-transform psi on the cells and the induced plan entries on the support."""
    z = (phi[S.rows] - S.cost) / eps + log_a[S.rows]
    zmax = np.maximum.reduceat(z, S.starts)
    colmax = np.repeat(zmax, S.counts)
    lse = zmax + np.log(np.add.reduceat(np.exp(z - colmax), S.starts))
    psi = -eps * lse
    psi_e = psi[S.cols]
    P = np.exp((phi[S.rows] + psi_e - S.cost) / eps + log_a[S.rows] + log_b[S.cols])
    return psi, P


def _semi_dual(phi, psi, a, b) -> float:
    return float(math.fsum(a * phi) + math.fsum(b * psi))


def _newton_stage(S: _Support, phi, a, b, eps, tol, max_move=np.inf, max_iter=60):
    """Damped Newton ascent on the semi-dual restricted to the support.

    Potentials may drift at most ``max_move`` from their starting values; past that
    the support is stale and the caller rebuilds it.  Returns ``(phi, psi, P, status)``
    with status one of ``"converged"``, ``"moved"`` or ``"stalled"``.
    """
    log_a = np.log(a)
    log_b = np.log(b)
    n = a.size
    phi0 = phi
    psi, P = _sparse_soft_state(S, phi, log_a, log_b, eps)
    val = _semi_dual(phi, psi, a, b)
    for _ in range(max_iter):
        r = np.bincount(S.rows, weights=P, minlength=n)
        g = a - r
        if np.max(np.abs(g)) <= tol:
            return phi, psi, P, "converged"
        Pm = sp.csr_matrix((P, (S.rows, S.cols)), shape=S.shape)
        H = (sp.diags(r) - Pm @ sp.diags(1.0 / b) @ Pm.T) / eps
        # H is singular along constants; pin the first potential
        H = H.tocsr()[1:, 1:] + sp.eye(n - 1) * 1e-14 * (1.0 / eps)
        step = np.zeros(n)
        if n > 1:
            step[1:] = spla.spsolve(H.tocsc(), g[1:])
        # trust region: never leave the neighbourhood the support was built for
        room = max_move - np.max(np.abs(phi - phi0))
        if room <= 1e-3 * max_move:
            return phi, psi, P, "moved"
        size = np.max(np.abs(step))
        if size > room:
            step *= max(room, 0.0) / size
        t = 1.0
        while True:
            cand = phi + t * step
            psi_c, P_c = _sparse_soft_state(S, cand, log_a, log_b, eps)
            v_c = _semi_dual(cand, psi_c, a, b)
            if v_c >= val - 1e-15 * abs(val) or t < 1e-6:
                break
            t *= 0.5
        if t < 1e-6:
            break
        phi, psi, P, val = cand, psi_c, P_c, v_c
    return phi, psi, P, "stalled"


def _sinkhorn_stage(C, phi, a, b, eps, iters):
    """Dense log-domain Sinkhorn sweeps; used while the kernel support is wide."""
    log_a = np.log(a)[:, None]
    log_b = np.log(b)[None, :]
    for _ in range(iters):
        psi = -eps * _logsumexp_cols((phi[:, None] - C) / eps + log_a)
        phi = -eps * _logsumexp_rows((psi[None, :] - C) / eps + log_b)
    return phi


def _round_plan(S: _Support, P: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Scale down to respect both marginals, then fill deficits by the north-west corner rule."""
    n, m = S.shape
    r = np.bincount(S.rows, weights=P, minlength=n)
    P = P * np.minimum(1.0, a / np.where(r > 0, r, 1.0))[S.rows]
    c = np.bincount(S.cols, weights=P, minlength=m)
    P = P * np.minimum(1.0, b / np.where(c > 0, c, 1.0))[S.cols]
    dr = np.clip(a - np.bincount(S.rows, weights=P, minlength=n), 0.0, None)
    dc = np.clip(b - np.bincount(S.cols, weights=P, minlength=m), 0.0, None)
    extra_i, extra_j, extra_m = [], [], []
    i = j = 0
    ri = np.flatnonzero(dr > 0)
    cj = np.flatnonzero(dc > 0)
    while i < ri.size and j < cj.size:
        q = min(dr[ri[i]], dc[cj[j]])
        if q > 0:
            extra_i.append(ri[i])
            extra_j.append(cj[j])
            extra_m.append(q)
        dr[ri[i]] -= q
        dc[cj[j]] -= q
        if dr[ri[i]] <= 0:
            i += 1
        if dc[cj[j]] <= 0:
            j += 1
    rows = np.concatenate([S.rows, np.asarray(extra_i, dtype=np.int64)])
    cols = np.concatenate([S.cols, np.asarray(extra_j, dtype=np.int64)])
    mass = np.concatenate([P, np.asarray(extra_m, dtype=np.float64)])
    keep = mass > 0
    M = sp.coo_matrix((mass[keep], (rows[keep], cols[keep])), shape=(n, m)).tocsr()
    M.sum_duplicates()
    coo = M.tocoo()
    order = np.lexsort((coo.col, coo.row))
    return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64), coo.data[order]


def hard_c_transform(C: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.min(C - phi[:, None], axis=0)


def entropic_transport(C: np.ndarray, a: np.ndarray, b: np.ndarray, eps_start: float = 1e-2,
                       eps_end: float = 1e-5, stages: int = 7, window: float = 40.0,
                       marginal_tol: float = 1e-11, stage_tol: float = 1e-6, sinkhorn_iters: int = 1,
                       dense_fraction: float = 0.25, max_per_cell: int = 32, small_problem: int = 65536,
                       max_rebuilds: int = 50):
    """Annealed log-domain entropic transport followed by rounding.

    Returns ``(coupling, duals, primal, dual)``; ``primal`` is the exact cost of
    a feasible plan and ``dual`` the value of feasible potentials.
    """
    n, m = C.shape
    phi = np.zeros(n)
    schedule = np.geomspace(eps_start, eps_end, stages)
    # small problems are cheap enough for Newton on any support
    max_nnz = None if n * m < small_problem else int(min(dense_fraction * n * m, max_per_cell * m))
    for k, eps in enumerate(schedule):
        tol = (marginal_tol if k == stages - 1 else stage_tol) * a.min()
        for _ in range(max_rebuilds):
            S = _Support(C, phi, window * eps, max_nnz=max_nnz)
            if S.too_dense:
                phi = _sinkhorn_stage(C, phi, a, b, eps, sinkhorn_iters)
                break
            phi, psi, P, status = _newton_stage(S, phi, a, b, eps, tol, max_move=window * eps / 4)
            phi = phi - phi.mean()
            if status != "moved":
                break
        phi = phi - phi.mean()
    S = _Support(C, phi, window * eps_end)
    psi, P = _sparse_soft_state(S, phi, np.log(a), np.log(b), eps_end)
    rows, cols, mass = _round_plan(S, P, a, b)
    primal = float(math.fsum(mass * C[rows, cols]))
    psi_hard = hard_c_transform(C, phi)
    dual = _semi_dual(phi, psi_hard, a, b)
    coupling = Coupling(rows, cols, mass, n, m)
    return coupling, DualPotentials(phi, psi_hard), primal, dual


# ---------------------------------------------------------------------------


def default_gap_target(n: int) -> float:
    """2% of (log n)/(4 pi n), floored for n = 1 where that expression vanishes."""
    return max(0.02 * math.log(n) / (4 * math.pi * n), 1e-12)


def semidiscrete_w2(sample: SampleSet, K: int | None = None, mode: str = APPROX,
                    gap_target: float | None = None, **solver_kw) -> TransportResult:
    """W2^2 between the sample and Lebesgue measure, bracketed through a K x K grid."""
    n = sample.n
    K = default_grid_k(n) if K is None else int(K)
    if K < 1:
        raise InvalidInput("K must be >= 1")
    m = K * K
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    C = pairwise_dist2(sample.points, grid_centers(K))
    if mode == EXACT:
        if n > EXACT_MAX_N or K > EXACT_MAX_K:
            raise InvalidConfiguration(f"exact mode needs n <= {EXACT_MAX_N} and K <= {EXACT_MAX_K}")
        coupling, duals = _transport_exact(C, a, b)
        primal = float(math.fsum(coupling.mass * C[coupling.sources, coupling.targets]))
        dual = _semi_dual(duals.phi, duals.psi, a, b)
        gap_target = 0.0 if gap_target is None else gap_target
    elif mode == APPROX:
        gap_target = default_gap_target(n) if gap_target is None else gap_target
        coupling, duals, primal, dual = entropic_transport(C, a, b, **solver_kw)
        if primal - dual > gap_target:
            raise ConvergenceError(f"entropic solve at n={n}, K={K} missed gap target {gap_target:.3e}",
                                   primal - dual)
    else:
        raise InvalidInput(f"unknown mode {mode!r}")
    upper = cell_refined_cost(coupling, sample, K)
    lower = continuous_lower_bound(min(dual, primal), K)
    return TransportResult(primal, coupling, duals, lower, upper, mode, dual, a, b, gap_target, K)


# ---------------------------------------------------------------------------


def one_dim_w2(sample) -> float:
    """W2^2 between n sorted points of [0,1) and Lebesgue measure on [0, 1]."""
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInput("expected a nonempty 1D sample")
    if np.any(np.diff(x) < 0):
        raise InvalidInput("sample must be sorted ascending")
    n = x.size
    lo = np.arange(n) / n
    hi = np.arange(1, n + 1) / n
    return float(math.fsum(((x - lo) ** 3 - (x - hi) ** 3) / 3.0))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimalityReport:
    passed: bool
    marginal_violation: float
    dual_violation: float
    slackness_violation: float
    gap: float
    worst: str


def verify_optimality(result: TransportResult, costs, tol: float = 1e-9) -> OptimalityReport:
    """Check marginals, dual feasibility, and slackness (exact) or the declared gap (approximate).

    ``costs`` is a dense matrix or a callable ``costs(i, j)`` over index arrays.
    """
    cp = result.coupling
    phi, psi = result.duals.phi, result.duals.psi
    cost_of = costs if callable(costs) else (lambda i, j, _C=np.asarray(costs): _C[i, j])
    marg = max(np.max(np.abs(cp.source_marginal() - result.source_mass)),
               np.max(np.abs(cp.target_marginal() - result.target_mass)))
    if np.any(cp.mass <= 0):
        marg = max(marg, float(-cp.mass.min()))
    dual_viol = 0.0
    for start in range(0, phi.size, max(1, 2_000_000 // psi.size)):
        i = np.arange(start, min(phi.size, start + max(1, 2_000_000 // psi.size)))
        block = phi[i, None] + psi[None, :] - cost_of(i[:, None], np.arange(psi.size)[None, :])
        dual_viol = max(dual_viol, float(block.max()))
    dual_viol = max(dual_viol, 0.0)
    primal = float(math.fsum(cp.mass * cost_of(cp.sources, cp.targets)))
    dual = _semi_dual(phi, psi, result.source_mass, result.target_mass)
    gap = primal - dual
    slack = float(np.max(np.abs(cost_of(cp.sources, cp.targets) - phi[cp.sources] - psi[cp.targets])))
    checks = {"marginal": marg, "dual feasibility": dual_viol}
    if result.method == EXACT:
        checks["complementary slackness"] = slack
        passed = all(v <= tol for v in checks.values())
    else:
        checks["gap"] = gap - result.gap_target
        passed = marg <= tol and dual_viol <= tol and gap <= result.gap_target
    worst = max(checks, key=checks.get)
    return OptimalityReport(bool(passed), float(marg), dual_viol, slack, gap, worst)
