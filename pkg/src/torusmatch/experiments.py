"""Reproducible Monte Carlo experiments and their flat-file output."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import heat
from .ansatz import (InvalidConfiguration, ansatz_field, build_grid_field, field_dot_integral,
                     grad_f_direct, grid_dot_integral)
from .heat import covariance_closed_form, field_energy_closed_form
from .torus import sample_uniform
from .trajectory import (coupling_pairs, defect_along_pairs, endpoint_defect_pairs,
                         endpoint_difference_pairs, energy_along_pairs, gauss_legendre)
from .transport import APPROX, EXACT, ConvergenceError, default_grid_k, one_dim_w2, semidiscrete_w2

log = logging.getLogger(__name__)

CSV_HEADER = ["experiment", "n", "t", "grid_k", "base_seed", "replicate", "metric", "value", "lower", "upper"]
SUMMARY = "SUMMARY"
MAX_FAILURE_FRACTION = 0.05


class SpectralIdentityError(RuntimeError):
    """A deterministic spectral identity failed; this indicates a bug, not noise."""


class ExperimentAborted(RuntimeError):
    def __init__(self, message: str, records: list, exit_code: int = 3):
        super().__init__(message)
        self.records = records
        self.exit_code = exit_code


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    n_list: tuple[int, ...] = (64,)
    t_rule: str = "reciprocal-n"
    t_value: float | None = None
    grid_K: int | None = None
    replicates: int = 100
    base_seed: int = 0
    cutoff_tolerance: float = heat.DEFAULT_TAIL_TOL
    quadrature_nodes: int = 32
    solver_mode: str = APPROX
    output_path: str | None = None
    output_format: str = "csv"
    threads: int = 1
    replicates_by_n: dict = field(default_factory=dict)
    field_grid_K: int = 256

    def __post_init__(self):
        if not self.n_list or any(n < 1 for n in self.n_list):
            raise InvalidConfiguration("n_list must hold positive integers")
        if self.t_rule not in ("reciprocal-n", "fixed"):
            raise InvalidConfiguration(f"unknown t_rule {self.t_rule!r}")
        if self.t_rule == "fixed" and not (self.t_value and self.t_value > 0):
            raise InvalidConfiguration("fixed t_rule needs a positive t_value")
        if self.replicates < 1:
            raise InvalidConfiguration("replicates must be positive")
        if self.solver_mode not in (EXACT, APPROX):
            raise InvalidConfiguration(f"unknown solver mode {self.solver_mode!r}")
        if self.output_format not in ("csv", "json"):
            raise InvalidConfiguration(f"unknown output format {self.output_format!r}")
        if self.solver_mode == EXACT:
            for n in self.n_list:
                K = self.grid_k_for(n)
                if n > 128 or K > 32:
                    raise InvalidConfiguration(f"exact solver unavailable at n={n}, K={K}")

    def t_for(self, n: int) -> float:
        return 1.0 / n if self.t_rule == "reciprocal-n" else float(self.t_value)

    def grid_k_for(self, n: int) -> int:
        return default_grid_k(n) if self.grid_K is None else int(self.grid_K)

    def replicates_for(self, n: int) -> int:
        return int(self.replicates_by_n.get(n, self.replicates))

    def smoke(self, factor: int = 100) -> "ExperimentConfig":
        return replace(self, replicates=max(2, self.replicates // factor),
                       replicates_by_n={n: max(2, r // factor) for n, r in self.replicates_by_n.items()})


@dataclass(frozen=True)
class ReplicateRecord:
    experiment: str
    n: int
    t: float | None
    grid_k: int | None
    base_seed: int
    replicate_index: int
    metric: str
    value: float
    certified_lower: float | None = None
    certified_upper: float | None = None


@dataclass(frozen=True)
class SummaryStats:
    metric: str
    mean: float
    std: float
    stderr: float
    count: int
    experiment: str = ""
    n: int | None = None
    t: float | None = None
    grid_k: int | None = None


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[ReplicateRecord]
    summaries: list[SummaryStats]
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self, metric: str, n: int | None = None, t: float | None = None) -> SummaryStats:
        for s in self.summaries:
            if s.metric == metric and (n is None or s.n == n) and (t is None or s.t == t):
                return s
        raise KeyError((metric, n, t))

    def report_lines(self) -> list[str]:
        return [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in self.checks]


# ---------------------------------------------------------------------------


def stream_seed(base_seed: int, experiment: str, n: int) -> int:
    """Distinct 64-bit stream per (experiment, n); replicates then index into it."""
    ss = np.random.SeedSequence([int(base_seed), zlib.crc32(experiment.encode()), int(n)])
    return int(ss.generate_state(1, np.uint64)[0])


def summarize(values: Sequence[float], metric: str, experiment: str = "", n=None, t=None, grid_k=None) -> SummaryStats:
    """Mean, sample std and standard error with compensated summation in replicate order."""
    v = [float(x) for x in values]
    c = len(v)
    if c == 0:
        return SummaryStats(metric, math.nan, math.nan, math.nan, 0, experiment, n, t, grid_k)
    mean = math.fsum(v) / c
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in v) / (c - 1)) if c > 1 else math.nan
    return SummaryStats(metric, mean, std, std / math.sqrt(c), c, experiment, n, t, grid_k)


def _map(fn: Callable[[int], object], count: int, threads: int) -> list:
    if threads <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


def _within(mean: float, target: float, se: float, k: float = 3.0) -> bool:
    return abs(mean - target) <= k * se


def _records(cfg, n, t, K, rep, metrics: dict, bounds: dict | None = None) -> list[ReplicateRecord]:
    bounds = bounds or {}
    return [ReplicateRecord(cfg.experiment, n, t, K, cfg.base_seed, rep, name, float(val), *bounds.get(name, (None, None)))
            for name, val in metrics.items()]


def _collect(records: list[ReplicateRecord], metric: str, n: int, t=None) -> list[float]:
    return [r.value for r in records if r.metric == metric and r.n == n and (t is None or r.t == t)]


# ---------------------------------------------------------------------------


def run_1d_oracle(cfg: ExperimentConfig) -> ExperimentResult:
    """One-dimensional exact laws on [0, 1].

    The pass flag compares the semi-discrete mean with 1/(3(n+1)).  Two further
    checks pin the exact expectations: 1/(6n) for the sample against Lebesgue,
    and 1/(3(n+1)) for two independent samples matched monotonically.
    """
    records, summaries, checks = [], [], []
    for n in cfg.n_list:
        seed = stream_seed(cfg.base_seed, cfg.experiment, n)

        def one(rep, n=n, seed=seed):
            pts = sample_uniform(n, seed, rep).points
            x = np.sort(pts[:, 0])
            y = np.sort(pts[:, 1])
            return _records(cfg, n, None, None, rep, {"w2sq_1d": one_dim_w2(x),
                                                      "w2sq_1d_bipartite": float(np.mean((x - y) ** 2))})

        for rs in _map(one, cfg.replicates_for(n), cfg.threads):
            records.extend(rs)
        st = summarize(_collect(records, "w2sq_1d", n), "w2sq_1d", cfg.experiment, n)
        bp = summarize(_collect(records, "w2sq_1d_bipartite", n), "w2sq_1d_bipartite", cfg.experiment, n)
        summaries += [st, bp]
        target = 1.0 / (3 * (n + 1))
        checks.append(Check(f"oned-oracle n={n}", _within(st.mean, target, st.stderr),
                            f"mean={st.mean:.6g} target 1/(3(n+1))={target:.6g} stderr={st.stderr:.3g}"))
        checks.append(Check(f"oned semi-discrete exact n={n}", _within(st.mean, 1.0 / (6 * n), st.stderr),
                            f"mean={st.mean:.6g} target 1/(6n)={1.0 / (6 * n):.6g} stderr={st.stderr:.3g}"))
        checks.append(Check(f"oned bipartite exact n={n}", _within(bp.mean, target, bp.stderr),
                            f"mean={bp.mean:.6g} target 1/(3(n+1))={target:.6g} stderr={bp.stderr:.3g}"))
    return ExperimentResult(cfg, records, summaries, checks)


def run_covariance(cfg: ExperimentConfig, y=(0.1, 0.0), n: int | None = None, t: float | None = None) -> ExperimentResult:
    n = cfg.n_list[0] if n is None else n
    t = cfg.t_for(n) if t is None else t
    if t * n < 1.0 - 1e-12:
        log.warning("t=%g is below 1/n=%g", t, 1.0 / n)
    y = np.asarray(y, dtype=np.float64)
    probe = np.stack([np.zeros(2), y])
    seed = stream_seed(cfg.base_seed, cfg.experiment, n)

    def one(rep):
        field_ = ansatz_field(sample_uniform(n, seed, rep), t, cfg.cutoff_tolerance, allow_small_t=True)
        g = grad_f_direct(field_, probe)
        diff = g[0] - g[1]
        return _records(cfg, n, t, None, rep, {"n_grad_diff_sq": n * float(diff @ diff)})

    records = [r for rs in _map(one, cfg.replicates_for(n), cfg.threads) for r in rs]
    st = summarize(_collect(records, "n_grad_diff_sq", n), "n_grad_diff_sq", cfg.experiment, n, t)
    closed = float(covariance_closed_form(t, y, cfg.cutoff_tolerance))
    closed_st = SummaryStats("closed_form", closed, 0.0, 0.0, 1, cfg.experiment, n, t)
    check = Check(f"covariance n={n} t={t:g} y=({y[0]:g},{y[1]:g})", _within(st.mean, closed, st.stderr),
                  f"mc={st.mean:.6g} closed={closed:.6g} stderr={st.stderr:.3g}")
    return ExperimentResult(cfg, records, [st, closed_st], [check])


def run_energy_identity(cfg: ExperimentConfig, pairs: Sequence[tuple[float, float]] | None = None,
                        grid_check_replicates: int = 20, grid_K: int = 64,
                        identity_tol: float = 1e-10, grid_tol: float = 1e-8) -> ExperimentResult:
    records, summaries, checks = [], [], []
    for n in cfg.n_list:
        t = cfg.t_for(n)
        use_pairs = pairs if pairs is not None else ((1.0 / n, 1.0 / n), (1.0 / n, 2.0 / n))
        seed = stream_seed(cfg.base_seed, cfg.experiment, n)

        def one(rep, n=n, t=t, seed=seed):
            sample = sample_uniform(n, seed, rep)
            out = {}
            for k, (s1, s2) in enumerate(use_pairs):
                direct = field_dot_integral(sample, s1, s2, cfg.cutoff_tolerance)
                mid = 0.5 * (s1 + s2)
                sym = field_dot_integral(sample, mid, mid, cfg.cutoff_tolerance)
                out[f"identity_residual_{k}"] = abs(direct - sym) / abs(sym)
                if rep < grid_check_replicates:
                    ga = build_grid_field(sample, s1, grid_K, cfg.cutoff_tolerance)
                    gb = build_grid_field(sample, s2, grid_K, cfg.cutoff_tolerance)
                    out[f"grid_residual_{k}"] = abs(grid_dot_integral(ga, gb) - direct)
            out["n_field_energy"] = n * field_dot_integral(sample, t, t, cfg.cutoff_tolerance)
            return _records(cfg, n, t, None, rep, out)

        recs = [r for rs in _map(one, cfg.replicates_for(n), cfg.threads) for r in rs]
        records.extend(recs)
        for k, (s1, s2) in enumerate(use_pairs):
            res = _collect(recs, f"identity_residual_{k}", n)
            worst = max(res)
            summaries.append(summarize(res, f"identity_residual_{k}", cfg.experiment, n, t))
            if worst > identity_tol:
                raise SpectralIdentityError(f"semigroup identity residual {worst:.3e} at n={n}, (s,t)=({s1:g},{s2:g})")
            checks.append(Check(f"energy identity n={n} (s,t)=({s1:g},{s2:g})", True,
                                f"max relative residual={worst:.3e} <= {identity_tol:g}"))
            gres = _collect(recs, f"grid_residual_{k}", n)
            if gres:
                summaries.append(summarize(gres, f"grid_residual_{k}", cfg.experiment, n, t))
                checks.append(Check(f"grid quadrature n={n} (s,t)=({s1:g},{s2:g})", max(gres) <= grid_tol,
                                    f"max |grid - spectral|={max(gres):.3e} over {len(gres)} samples"))
        st = summarize(_collect(recs, "n_field_energy", n), "n_field_energy", cfg.experiment, n, t)
        summaries.append(st)
        closed = field_energy_closed_form(t, cfg.cutoff_tolerance)
        checks.append(Check(f"field energy n={n} t={t:g}", _within(st.mean, closed, st.stderr),
                            f"mc={st.mean:.6g} closed={closed:.6g} stderr={st.stderr:.3g}"))
    return ExperimentResult(cfg, records, summaries, checks)


def _solve(cfg: ExperimentConfig, n: int, K: int, rep: int):
    sample = sample_uniform(n, stream_seed(cfg.base_seed, cfg.experiment, n), rep)
    return sample, semidiscrete_w2(sample, K, cfg.solver_mode)


def scaling_interval(res: ExperimentResult, n: int) -> tuple[float, float, float]:
    """(d_n, low, high): d_n = n mean - log(n)/(4 pi), widened by the bracket and 3 stderr."""
    v = res.summary("w2sq", n)
    lo = res.summary("w2sq_lower", n).mean
    hi = res.summary("w2sq_upper", n).mean
    ref = math.log(n) / (4 * math.pi)
    d = n * v.mean - ref
    return d, n * (lo - 3 * v.stderr) - ref, n * (hi + 3 * v.stderr) - ref


def run_scaling(cfg: ExperimentConfig, band: float = 2.0, drift: float = 1.0) -> ExperimentResult:
    records, summaries, checks = [], [], []
    for n in cfg.n_list:
        K = cfg.grid_k_for(n)

        def one(rep, n=n, K=K):
            try:
                _, r = _solve(cfg, n, K, rep)
            except ConvergenceError as e:
                return _records(cfg, n, None, K, rep, {"convergence_failure": e.gap})
            return _records(cfg, n, None, K, rep, {"w2sq": r.upper_bound, "discrete_gap": r.gap},
                            {"w2sq": (r.lower_bound, r.upper_bound)})

        recs = [r for rs in _map(one, cfg.replicates_for(n), cfg.threads) for r in rs]
        records.extend(recs)
        failures = len(_collect(recs, "convergence_failure", n))
        if failures > MAX_FAILURE_FRACTION * cfg.replicates_for(n):
            raise ExperimentAborted(f"{failures} of {cfg.replicates_for(n)} solves failed at n={n}", records)
        ok = [r for r in recs if r.metric == "w2sq"]
        summaries += [
            summarize([r.value for r in ok], "w2sq", cfg.experiment, n, None, K),
            summarize([r.certified_lower for r in ok], "w2sq_lower", cfg.experiment, n, None, K),
            summarize([r.certified_upper for r in ok], "w2sq_upper", cfg.experiment, n, None, K),
            summarize(_collect(recs, "discrete_gap", n), "discrete_gap", cfg.experiment, n, None, K),
        ]
        ref = math.log(n) / (4 * math.pi)
        summaries.append(summarize([n * r.value - ref for r in ok], "d_n", cfg.experiment, n, None, K))
        res = ExperimentResult(cfg, records, summaries, checks)
        d, lo, hi = scaling_interval(res, n)
        width = max(n * (r.certified_upper - r.certified_lower) for r in ok)
        checks.append(Check(f"scaling n={n} K={K}", -band <= lo and hi <= band,
                            f"d_n={d:.4f} widened=[{lo:.4f}, {hi:.4f}] worst n*bracket={width:.4f} failures={failures}"))
    if len(cfg.n_list) >= 2:
        a, b = sorted(cfg.n_list)[-2:]
        res = ExperimentResult(cfg, records, summaries, checks)
        _, lo_a, hi_a = scaling_interval(res, a)
        _, lo_b, hi_b = scaling_interval(res, b)
        spread = max(hi_b - lo_a, hi_a - lo_b)
        checks.append(Check(f"scaling drift n={a}->{b}", spread <= drift, f"max widened |d_{b} - d_{a}|={spread:.4f}"))
    return ExperimentResult(cfg, records, summaries, checks)


def _trajectory_metrics(cfg, n, K, rep, t_values):
    sample, r = _solve(cfg, n, K, rep)
    x, y, m = coupling_pairs(r, sample, K)
    quad = gauss_legendre(cfg.quadrature_nodes)
    fields = {t: ansatz_field(sample, t, cfg.cutoff_tolerance, cfg.field_grid_K) for t in t_values}
    return sample, r, (x, y, m), quad, fields


def run_trajectory_suite(cfg: ExperimentConfig, bound: float = 5.0, ratio_range=(0.5, 2.0)) -> ExperimentResult:
    if cfg.t_rule != "reciprocal-n":
        log.warning("trajectory suite normally runs at t = 1/n")
    records, summaries, checks = [], [], []
    metrics = ("n_defect_endpoint", "n_defect_along", "n_energy_along", "n_endpoint_difference", "n_w2sq_discrete")
    for n in cfg.n_list:
        K = cfg.grid_k_for(n)
        t = cfg.t_for(n)

        def one(rep, n=n, K=K, t=t):
            _, r, (x, y, m), quad, fields = _trajectory_metrics(cfg, n, K, rep, (t,))
            f = fields[t]
            vals = {
                "n_defect_endpoint": n * endpoint_defect_pairs(f, x, y, m),
                "n_defect_along": n * defect_along_pairs(f, x, y, m, quad),
                "n_energy_along": n * energy_along_pairs(f, x, y, m, quad),
                "n_endpoint_difference": n * endpoint_difference_pairs(f, x, y, m, quad),
                "n_w2sq_discrete": n * r.primal_value,
            }
            return _records(cfg, n, t, K, rep, vals)

        recs = [r for rs in _map(one, cfg.replicates_for(n), cfg.threads) for r in rs]
        records.extend(recs)
        for name in metrics:
            summaries.append(summarize(_collect(recs, name, n), name, cfg.experiment, n, t, K))
        closed = field_energy_closed_form(t, cfg.cutoff_tolerance)
        offsets = [v - closed for v in _collect(recs, "n_energy_along", n)]
        summaries.append(summarize(offsets, "energy_offset", cfg.experiment, n, t, K))
    res = ExperimentResult(cfg, records, summaries, checks)
    for name in ("n_defect_along", "n_endpoint_difference"):
        for n in cfg.n_list:
            st = res.summary(name, n)
            checks.append(Check(f"{name} n={n} <= {bound:g}", st.mean <= bound, f"mean={st.mean:.4f} stderr={st.stderr:.3g}"))
        if len(cfg.n_list) >= 2:
            lo_n, hi_n = min(cfg.n_list), max(cfg.n_list)
            ratio = res.summary(name, hi_n).mean / res.summary(name, lo_n).mean
            checks.append(Check(f"{name} ratio n={hi_n}/n={lo_n}", ratio_range[0] <= ratio <= ratio_range[1],
                                f"ratio={ratio:.4f}"))
    for n in cfg.n_list:
        off = res.summary("energy_offset", n)
        checks.append(Check(f"energy offset n={n}", math.isfinite(off.mean),
                            f"n*energy_along - closed form = {off.mean:.4f} +- {off.stderr:.3g}"))
    return res


def run_ansatz_defect(cfg: ExperimentConfig, t_multipliers: Sequence[float] = (1, 4, 16),
                      bound: float = 10.0) -> ExperimentResult:
    if any(m < 1 for m in t_multipliers):
        raise InvalidConfiguration("multipliers must be >= 1")
    records, summaries, checks = [], [], []
    for n in cfg.n_list:
        K = cfg.grid_k_for(n)
        ts = [m / n for m in t_multipliers]

        def one(rep, n=n, K=K, ts=ts):
            _, _, (x, y, mass), _, fields = _trajectory_metrics(cfg, n, K, rep, ts)
            out = []
            for t in ts:
                out += _records(cfg, n, t, K, rep, {"n_defect_endpoint": n * endpoint_defect_pairs(fields[t], x, y, mass)})
            return out

        recs = [r for rs in _map(one, cfg.replicates_for(n), cfg.threads) for r in rs]
        records.extend(recs)
        per_t = {t: _collect(recs, "n_defect_endpoint", n, t) for t in ts}
        for m, t in zip(t_multipliers, ts):
            st = summarize(per_t[t], "n_defect_endpoint", cfg.experiment, n, t, K)
            summaries.append(st)
            growth = (st.mean - summarize(per_t[ts[0]], "x").mean) / math.log(m) if m > 1 else 0.0
            checks.append(Check(f"ansatz defect n={n} m={m:g}", math.isfinite(st.mean) and st.mean <= bound,
                                f"mean={st.mean:.4f} stderr={st.stderr:.3g} growth per log m={growth:.4f}"))
        for (m0, t0), (m1, t1) in zip(zip(t_multipliers, ts), zip(t_multipliers[1:], ts[1:])):
            diff = summarize([b - a for a, b in zip(per_t[t0], per_t[t1])], "diff")
            ok = diff.mean >= -diff.stderr
            checks.append(Check(f"ansatz defect nondecreasing n={n} m={m0:g}->{m1:g}", ok,
                                f"paired mean increase={diff.mean:.4f} stderr={diff.stderr:.3g}"))
    return ExperimentResult(cfg, records, summaries, checks)


RUNNERS = {
    "scaling": run_scaling,
    "covariance": run_covariance,
    "energy-identity": run_energy_identity,
    "trajectory": run_trajectory_suite,
    "oned-oracle": run_1d_oracle,
    "ansatz-defect": run_ansatz_defect,
}


# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def _rows(records: Sequence[ReplicateRecord], summaries: Sequence[SummaryStats], base_seed: int | None):
    for r in records:
        yield {"experiment": r.experiment, "n": r.n, "t": r.t, "grid_k": r.grid_k, "base_seed": r.base_seed,
               "replicate": r.replicate_index, "metric": r.metric, "value": r.value,
               "lower": r.certified_lower, "upper": r.certified_upper}
    for s in summaries:
        yield {"experiment": s.experiment, "n": s.n, "t": s.t, "grid_k": s.grid_k, "base_seed": base_seed,
               "replicate": SUMMARY, "metric": s.metric, "value": s.mean, "lower": s.stderr, "upper": None}


def emit(records: Sequence[ReplicateRecord], summaries: Sequence[SummaryStats], fmt: str, path,
         base_seed: int | None = None) -> Path:
    """Write records then summary rows; summary rows carry mean in ``value`` and stderr in ``lower``."""
    path = Path(path)
    if base_seed is None and records:
        base_seed = records[0].base_seed
    rows = list(_rows(records, summaries, base_seed))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow([row["replicate"] if k == "replicate" and row[k] == SUMMARY else
                        (row[k] if isinstance(row[k], str) else _fmt(row[k])) for k in CSV_HEADER])
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps(rows, indent=1, allow_nan=True) + "\n"
    else:
        raise InvalidConfiguration(f"unknown output format {fmt!r}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return path


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
