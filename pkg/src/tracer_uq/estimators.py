"""Monte Carlo, randomized quasi-Monte Carlo and multilevel Monte Carlo.

All estimators work on vector QoIs and control the worst component:
variances and biases are reduced with ``max`` over the QoI vector before
they are compared with a tolerance.

Costs are measured in deterministic work units (``model.work``), which
makes allocations reproducible; wall-clock seconds are recorded alongside.

A correction sample on level ``ℓ > 1`` costs ``w_ℓ + w_{ℓ-1}``; a level-1
sample costs ``w_1``. The pseudo-cost model used for method comparisons is
fitted as ``w_ℓ ≈ c₃ 2^{γ ℓ}``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import METHOD_MC, METHOD_MLMC


class EstimatorError(RuntimeError):
    pass


class ConvergenceError(EstimatorError):
    """Raised when a tolerance cannot be met; carries the partial result."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class CapExceeded(ConvergenceError):
    def __init__(self, message, result=None, theta=None, eps=None):
        super().__init__(message, result)
        self.theta = theta
        self.eps = eps


# ---------------------------------------------------------------------------
# running statistics


@dataclass
class LevelStats:
    """Running sums for one level; samples are always added in index order."""

    level: int
    n_qoi: int
    work: float
    work_fine: float = 0.0
    n: int = 0
    sum_y: np.ndarray = None
    sum_y2: np.ndarray = None
    sum_abs: np.ndarray = None
    sum_f: np.ndarray = None
    sum_f2: np.ndarray = None
    sum_q2: np.ndarray = None
    wall: float = 0.0

    def __post_init__(self):
        for name in ("sum_y", "sum_y2", "sum_abs", "sum_f", "sum_f2", "sum_q2"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_qoi))

    def add(self, qf: np.ndarray, qc: np.ndarray | None, wall) -> None:
        qf = np.atleast_2d(qf)
        y = qf if qc is None else qf - qc
        q2 = qf * qf if qc is None else qf * qf - qc * qc
        self.n += qf.shape[0]
        self.sum_y += y.sum(axis=0)
        self.sum_y2 += (y * y).sum(axis=0)
        self.sum_abs += np.abs(y).sum(axis=0)
        self.sum_f += qf.sum(axis=0)
        self.sum_f2 += (qf * qf).sum(axis=0)
        self.sum_q2 += q2.sum(axis=0)
        self.wall += float(np.sum(wall))

    @property
    def mean(self) -> np.ndarray:
        return self.sum_y / max(self.n, 1)

    @property
    def variance(self) -> np.ndarray:
        """Unbiased sample variance of ``Y_ℓ`` per QoI."""
        if self.n < 2:
            return np.full(self.n_qoi, np.nan)
        m = self.sum_y / self.n
        return np.maximum(self.sum_y2 - self.n * m * m, 0.0) / (self.n - 1)

    @property
    def fine_variance(self) -> np.ndarray:
        if self.n < 2:
            return np.full(self.n_qoi, np.nan)
        m = self.sum_f / self.n
        return np.maximum(self.sum_f2 - self.n * m * m, 0.0) / (self.n - 1)

    @property
    def max_variance(self) -> float:
        return float(np.max(self.variance))

    @property
    def max_abs_mean(self) -> float:
        return float(np.max(np.abs(self.mean)))

    @property
    def wall_per_sample(self) -> float:
        return self.wall / max(self.n, 1)


def _level_work(model, ell: int) -> float:
    w = model.work(ell)
    return w + (model.work(ell - 1) if ell > 1 else 0.0)


# ---------------------------------------------------------------------------
# results


@dataclass
class EstimatorResult:
    method: str
    tolerance: float | None
    theta: float | None
    estimate: np.ndarray
    variance: np.ndarray
    bias: float
    cost: float
    wall: float
    converged: bool = True
    message: str = ""
    levels: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    second_moment: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def stat_error(self) -> float:
        return float(np.sqrt(np.max(self.variance)))

    @property
    def mse(self) -> float:
        return float(np.max(self.variance)) + self.bias**2

    @property
    def std(self) -> np.ndarray | None:
        """Standard deviation of the finest-level QoI from the telescoped second moment."""
        if self.second_moment is None:
            return None
        return np.sqrt(np.maximum(self.second_moment - self.estimate**2, 0.0))

    def to_dict(self) -> dict:
        out = {
            "method": self.method, "tolerance": self.tolerance, "theta": self.theta,
            "converged": self.converged, "message": self.message,
            "cost": self.cost, "wall_seconds": self.wall, "bias": self.bias,
            "stat_error": self.stat_error, "mse": self.mse,
            "levels": self.levels, "trace": self.trace,
        }
        out.update(self.extra)
        return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# Monte Carlo


def run_mc(evaluator, level: int, n: int, start: int = 0) -> EstimatorResult:
    """Plain MC mean of ``Q_level`` from ``n`` independent samples."""
    if n < 2:
        raise EstimatorError("MC needs at least two samples")
    model = evaluator.model
    st = LevelStats(level, model.n_qoi, model.work(level), model.work(level))
    qf, _, wall = evaluator.pairs(level, start, start + n, METHOD_MC)
    st.add(qf, None, wall)
    var = st.variance / n
    return EstimatorResult("mc", None, None, st.mean, var, 0.0, n * st.work, st.wall,
                           levels=[_level_row(st)], second_moment=st.sum_q2 / n,
                           extra={"n": n, "sample_variance": st.variance})


def mc_cost(variance_fine: float, work_fine: float, eps: float, theta: float) -> float:
    """Predicted MC cost ``C_L V[Q_L] / ((1-θ) ε²)`` for a tolerance ``eps``."""
    return work_fine * variance_fine / ((1.0 - theta) * eps * eps)


# ---------------------------------------------------------------------------
# randomized QMC


def run_qmc(evaluator, level: int, eps: float | None = None, theta: float = 0.5, n_init: int = 1,
            n_max: int = 2**16, n_fixed: int | None = None, cost_per_point: float | None = None,
            n_random: int | None = None) -> EstimatorResult:
    """Randomized QMC on one level with doubling of the point count.

    The estimate averages ``M`` digitally shifted copies; its variance is
    ``Var(I_m)/M``. With ``eps`` the point count doubles (pilot points are
    kept) until ``max V ≤ (1-θ) ε²``; with ``n_fixed`` it doubles up to that
    count and the trace records the variance at each stage.
    """
    model = evaluator.model
    M = n_random or evaluator.n_random
    if M < 2:
        raise EstimatorError("QMC needs at least two randomizations")
    if (eps is None) == (n_fixed is None):
        raise EstimatorError("give exactly one of eps and n_fixed")
    work = model.work(level) if cost_per_point is None else cost_per_point
    sums = np.zeros((M, model.n_qoi))
    sums2 = np.zeros((M, model.n_qoi))
    wall = 0.0
    n_old, n = 0, n_init
    trace = []
    target = None if eps is None else (1.0 - theta) * eps * eps
    while True:
        for m in range(M):
            q, w = evaluator.qmc(level, m, n_old, n)
            sums[m] += q.sum(axis=0)
            sums2[m] += (q * q).sum(axis=0)
            wall += float(w.sum())
        est_m = sums / n
        est = est_m.mean(axis=0)
        var = est_m.var(axis=0, ddof=1) / M
        vmax = float(np.max(var))
        trace.append({"n": n, "variance": vmax, "cost": n * M * work})
        done = vmax <= target if target is not None else n >= n_fixed
        if done:
            break
        if 2 * n > (n_max if n_fixed is None else n_fixed):
            res = EstimatorResult("qmc", eps, theta, est, var, 0.0, n * M * work, wall, converged=False,
                                  message=f"QMC point cap {n_max} reached", trace=trace)
            if n_fixed is not None:
                return res
            raise ConvergenceError(res.message, res)
        n_old, n = n, 2 * n
    second = (sums2 / n).mean(axis=0)
    return EstimatorResult("qmc", eps, theta, est, var, 0.0, n * M * work, wall, trace=trace,
                           second_moment=second, extra={"n": n, "n_random": M, "level": level})


# ---------------------------------------------------------------------------
# MLMC building blocks


def optimal_samples(eps: float, theta: float, variances, costs):
    """Sample counts minimizing cost subject to ``Σ V_ℓ/N_ℓ ≤ (1-θ) ε²``.

    Returns ``(N, C_tot)`` with ``N_ℓ = ⌈(1-θ)⁻¹ ε⁻² √(V_ℓ/C_ℓ) Σ√(V_k C_k)⌉``,
    floored at 2, and ``C_tot = Σ N_ℓ C_ℓ``.
    """
    V = np.asarray(variances, dtype=np.float64)
    C = np.asarray(costs, dtype=np.float64)
    if not 0 < theta < 1:
        raise EstimatorError("theta must lie in (0, 1)")
    if eps <= 0 or np.any(C <= 0) or np.any(V < 0) or not np.all(np.isfinite(V)):
        raise EstimatorError("need eps > 0, positive costs and finite variances")
    s = np.sum(np.sqrt(V * C))
    N = np.ceil(np.sqrt(V / C) * s / ((1.0 - theta) * eps * eps))
    N = np.maximum(N, 2).astype(np.int64)
    return N, float(np.sum(N * C))


@dataclass(frozen=True)
class RateEstimates:
    """``|E Y_ℓ| ≈ c₁ 2^{-αℓ}``, ``V_ℓ ≈ c₂ 2^{-βℓ}``, ``w_ℓ ≈ c₃ 2^{γℓ}``."""

    alpha: float
    beta: float
    gamma: float
    c1: float
    c2: float
    c3: float
    levels: tuple = ()

    def bias(self, L: int) -> float:
        return self.c1 * 2.0 ** (-self.alpha * L) / (2.0**self.alpha - 1.0)

    def variance(self, ell: int) -> float:
        return self.c2 * 2.0 ** (-self.beta * ell)

    def work(self, ell: int) -> float:
        return self.c3 * 2.0 ** (self.gamma * ell)

    def level_cost(self, ell: int) -> float:
        return self.work(ell) + (self.work(ell - 1) if ell > 1 else 0.0)

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


def _fit_log2(levels, values):
    """Least-squares ``log2 v = a + b ℓ``; returns ``(b, 2^a)``."""
    b, a = np.polyfit(np.asarray(levels, float), np.log2(np.asarray(values, float)), 1)
    return float(b), float(2.0**a)


def estimate_rates(stats, min_level: int = 2, works=None) -> RateEstimates:
    """Regress the rates on the populated levels.

    ``α`` and ``β`` come from corrections on levels ``≥ min_level``
    (at least two points), ``γ`` from the fine-solve work of every level.
    """
    stats = [s for s in stats if s.n >= 2]
    corr = [s for s in stats if s.level >= min_level]
    if len(corr) < 2:
        raise EstimatorError("rate regression needs at least two populated correction levels")
    if len(stats) < 3 and min_level > 1:
        raise EstimatorError("rate regression needs at least three populated levels")
    lv = [s.level for s in corr]
    means = [max(s.max_abs_mean, 1e-300) for s in corr]
    vars_ = [max(s.max_variance, 1e-300) for s in corr]
    nega, c1 = _fit_log2(lv, means)
    negb, c2 = _fit_log2(lv, vars_)
    all_lv = [s.level for s in stats]
    w = works if works is not None else [s.work_fine for s in stats]
    g, c3 = _fit_log2(all_lv, w)
    return RateEstimates(-nega, -negb, g, c1, c2, c3, tuple(all_lv))


def bias_estimate(mean_abs_finest: float, alpha: float) -> float:
    """``max|E Y_L| / (2^α - 1)``, the geometric-tail bias bound."""
    if alpha <= 0:
        return math.inf
    return mean_abs_finest / (2.0**alpha - 1.0)


def feasible_theta(rates: RateEstimates, L_max: int, cap: float, v1: float | None = None,
                   theta_grid=None, default: float = 0.5):
    """Largest ``θ`` for which the finest-level sample count stays below ``cap``.

    The smallest tolerance reachable with ``L_max`` levels is
    ``ε(θ) = bias(L_max)/√θ``; at that tolerance ``N_L`` grows with ``θ``.
    Returns ``(θ, ε(θ))``; raises :class:`EstimatorError` if no ``θ`` on the
    grid is feasible.
    """
    grid = np.linspace(0.01, 0.99, 99) if theta_grid is None else np.asarray(theta_grid)
    b = rates.bias(L_max)
    if not math.isfinite(cap):
        return default, b / math.sqrt(default)
    levels = np.arange(1, L_max + 1)
    V = np.array([rates.variance(l) for l in levels])
    if v1 is not None:
        V[0] = v1
    C = np.array([rates.level_cost(l) for l in levels])
    best = None
    for th in grid:
        eps = b / math.sqrt(th)
        N = np.sqrt(V / C) * np.sum(np.sqrt(V * C)) / ((1 - th) * eps * eps)
        if max(math.ceil(N[-1]), 2) <= cap:
            best = (float(th), float(eps))
    if best is None:
        raise EstimatorError(f"no θ keeps N_L ≤ {cap} with L_max = {L_max}")
    return best


# ---------------------------------------------------------------------------
# MLMC


@dataclass(frozen=True)
class ToleranceConfig:
    eps: float
    theta: float = 0.5
    n_init: int = 20
    l_init: int = 2
    l_max: int = 4
    alpha0: float = 2.0
    beta0: float = 4.0
    finest_cap: float = math.inf
    max_iterations: int = 50

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.n_init < 2:
            raise ValueError("n_init must be at least 2")
        if not 1 <= self.l_init <= self.l_max:
            raise ValueError("need 1 ≤ l_init ≤ l_max")


def _level_row(st: LevelStats) -> dict:
    return {"level": st.level, "N": st.n, "mean_Y": st.max_abs_mean if st.n else None,
            "var_Y": st.max_variance if st.n >= 2 else None, "cost": st.work,
            "wall_per_sample": st.wall_per_sample}


def _fitted_rates(stats, cfg: ToleranceConfig):
    """``(α, β)`` from correction levels, falling back to the priors."""
    corr = [s for s in stats if s.level >= 2 and s.n >= 2]
    if len(corr) < 2:
        return cfg.alpha0, cfg.beta0
    lv = [s.level for s in corr]
    nega, _ = _fit_log2(lv, [max(s.max_abs_mean, 1e-300) for s in corr])
    negb, _ = _fit_log2(lv, [max(s.max_variance, 1e-300) for s in corr])
    return max(-nega, 0.5), max(-negb, 0.5)


def run_mlmc(evaluator, cfg: ToleranceConfig, progress=None) -> EstimatorResult:
    """Adaptive MLMC with the sample-allocation loop of Giles.

    Levels start at ``l_init`` with ``n_init`` samples each. After every
    round the optimal counts are recomputed; once no level needs more than
    1 % additional samples the bias test decides between stopping and
    adding a level (its variance extrapolated with ``β``).
    """
    model = evaluator.model
    l_max = min(cfg.l_max, model.max_level)
    stats = [LevelStats(l, model.n_qoi, _level_work(model, l), model.work(l)) for l in range(1, l_max + 1)]
    L = min(cfg.l_init, l_max)
    target_n = np.zeros(l_max, dtype=np.int64)
    target_n[:L] = cfg.n_init
    trace = []
    converged, message = False, ""
    bias = math.inf
    for it in range(cfg.max_iterations):
        for i in range(L):
            st = stats[i]
            if target_n[i] > st.n:
                qf, qc, wall = evaluator.pairs(st.level, st.n, int(target_n[i]), METHOD_MLMC)
                st.add(qf, qc, wall)
        alpha, beta = _fitted_rates(stats[:L], cfg)
        V = np.array([s.max_variance if s.n >= 2 else np.nan for s in stats[:L]])
        for i in range(L):
            if not np.isfinite(V[i]):
                V[i] = V[i - 1] * 2.0**-beta
        C = np.array([s.work for s in stats[:L]])
        N_opt, c_tot = optimal_samples(cfg.eps, cfg.theta, V, C)
        bias = bias_estimate(stats[L - 1].max_abs_mean, alpha) if L > 1 else math.inf
        trace.append({"iteration": it, "L": L, "N": [int(s.n) for s in stats[:L]],
                      "N_opt": N_opt.tolist(), "alpha": alpha, "beta": beta,
                      "variance": float(np.sum(V / np.maximum([s.n for s in stats[:L]], 1))),
                      "bias": bias, "predicted_cost": c_tot})
        if progress is not None:
            progress(trace[-1])
        if N_opt[-1] > cfg.finest_cap:
            result = _mlmc_result(stats[:L], cfg, bias, False, "finest-level cap exceeded", trace)
            theta, eps = _cap_suggestion(stats[:L], cfg, l_max)
            raise CapExceeded(f"N_{L} = {N_opt[-1]} exceeds the cap {cfg.finest_cap:g}; "
                              f"largest feasible theta {theta}, eps {eps}", result, theta, eps)
        extra = np.maximum(N_opt - np.array([s.n for s in stats[:L]]), 0)
        if np.any(extra > 0.01 * np.array([max(s.n, 1) for s in stats[:L]])):
            target_n[:L] = np.maximum(target_n[:L], N_opt)
            continue
        if bias <= math.sqrt(cfg.theta) * cfg.eps:
            converged = True
            break
        if L == l_max:
            message = f"bias {bias:.3g} above sqrt(theta) eps at the finest level {l_max}"
            break
        L += 1
        V_new = np.append(V, V[-1] * 2.0**-beta)
        C_new = np.array([s.work for s in stats[:L]])
        N_opt, _ = optimal_samples(cfg.eps, cfg.theta, V_new, C_new)
        target_n[:L] = np.maximum(target_n[:L], N_opt)
    else:
        message = "iteration limit reached"
    result = _mlmc_result(stats[:L], cfg, bias, converged, message, trace)
    if not converged:
        raise ConvergenceError(message, result)
    return result


def _cap_suggestion(stats, cfg, l_max):
    try:
        rates = estimate_rates(stats)
        return feasible_theta(rates, l_max, cfg.finest_cap, v1=stats[0].max_variance)
    except EstimatorError:
        return None, None


def _mlmc_result(stats, cfg, bias, converged, message, trace) -> EstimatorResult:
    est = np.sum([s.mean for s in stats], axis=0)
    var = np.sum([s.variance / s.n for s in stats], axis=0)
    second = np.sum([s.sum_q2 / s.n for s in stats], axis=0)
    cost = float(sum(s.n * s.work for s in stats))
    wall = float(sum(s.wall for s in stats))
    res = EstimatorResult("mlmc", cfg.eps, cfg.theta, est, var, float(bias), cost, wall, converged, message,
                          [_level_row(s) for s in stats], trace, second)
    res.stats = stats
    return res


def mlmc_fixed(evaluator, counts) -> EstimatorResult:
    """MLMC estimate with prescribed per-level sample counts ``counts[ℓ-1]``."""
    model = evaluator.model
    stats = []
    for ell, n in enumerate(counts, start=1):
        st = LevelStats(ell, model.n_qoi, _level_work(model, ell), model.work(ell))
        qf, qc, wall = evaluator.pairs(ell, 0, int(n), METHOD_MLMC)
        st.add(qf, qc, wall)
        stats.append(st)
    cfg = ToleranceConfig(eps=1.0, l_init=1, l_max=max(len(counts), 1))
    return _mlmc_result(stats, cfg, 0.0, True, "", [])


def convergence_study(evaluator, levels: int, n_samples) -> tuple:
    """Per-level statistics for a rate study; ``n_samples`` is an int or a per-level list."""
    counts = [n_samples] * levels if np.isscalar(n_samples) else list(n_samples)
    res = mlmc_fixed(evaluator, counts)
    return res.stats, estimate_rates(res.stats)


# ---------------------------------------------------------------------------
# method comparison


def compare_methods(evaluator, eps_list, theta: float = 0.5, l_max: int = 4, n_init: int = 20,
                    qmc: bool = True, qmc_n_max: int = 2**14, alpha0: float = 2.0, beta0: float = 4.0,
                    progress=None, l_init: int = 2) -> list:
    """MLMC (measured), MC (predicted from the fine-level variance) and QMC on level ``L-1``.

    All costs are pseudo-costs ``c₃ 2^{γℓ}`` from the rate fit of the
    tightest MLMC run, so the three methods are measured on the same scale.
    """
    runs = []
    for eps in sorted(eps_list, reverse=True):
        cfg = ToleranceConfig(eps=eps, theta=theta, n_init=n_init, l_init=l_init, l_max=l_max, alpha0=alpha0,
                              beta0=beta0)
        try:
            res = run_mlmc(evaluator, cfg)
        except ConvergenceError as exc:
            res = exc.result
        runs.append((eps, res))
        if progress is not None:
            progress({"eps": eps, "method": "mlmc", "L": len(res.stats), "converged": res.converged})
    ref = max((r for _, r in runs), key=lambda r: len(r.stats))
    rates = estimate_rates(ref.stats)
    rows = []
    for eps, res in runs:
        L = len(res.stats)
        pseudo = float(sum(s.n * rates.level_cost(s.level) for s in res.stats))
        vfine = float(np.max(res.stats[-1].fine_variance))
        row = {"eps": eps, "L": L, "mlmc_cost": pseudo, "mlmc_work": res.cost, "mlmc_wall": res.wall,
               "mlmc_converged": res.converged, "mc_cost": mc_cost(vfine, rates.work(L), eps, theta),
               "qmc_cost": None, "qmc_n": None, "qmc_converged": None,
               "mlmc_N": [s.n for s in res.stats], "mlmc_result": res}
        if qmc:
            ql = max(L - 1, 1)
            try:
                q = run_qmc(evaluator, ql, eps=eps, theta=theta, n_max=qmc_n_max, cost_per_point=rates.work(L))
                row.update(qmc_cost=q.cost, qmc_n=q.extra["n"], qmc_converged=True)
            except ConvergenceError as exc:
                row.update(qmc_cost=exc.result.cost, qmc_n=exc.result.trace[-1]["n"], qmc_converged=False)
            if progress is not None:
                progress({"eps": eps, "method": "qmc", "n": row["qmc_n"]})
        rows.append(row)
    return rows, rates


def complexity_slope(eps, costs, log_factor: bool = True) -> float:
    """Slope of ``log(ε² C)`` (or ``log(ε² (log ε)^{-2} C)``) against ``log ε``."""
    eps = np.asarray(eps, float)
    y = eps**2 * np.asarray(costs, float)
    if log_factor:
        y = y / np.log(eps) ** 2
    return float(np.polyfit(np.log(eps), np.log(y), 1)[0])
