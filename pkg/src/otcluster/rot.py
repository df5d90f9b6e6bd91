"""Pseudo-labeling by relaxed optimal transport.

The coupling Q between samples and classes minimizes
``<Q, C> + lambda1 * sum(Q log Q) + lambda2 * KL(uniform || beta)`` subject to
row marginals 1/N and column marginals beta on the simplex. Q is found by
alternating a log-domain Sinkhorn solve (beta fixed) with a closed-form
beta update whose multiplier is located by bisection. The comparison
variants keep beta uniform (COT), regularize beta by its negative entropy
(EOT), or track the prediction argmax histogram with momentum (MOT).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("rot", "cot", "eot", "mot")


class BracketFailure(RuntimeError):
    """Bisection could not bracket the simplex multiplier: corrupted potentials."""

    code = "BRACKET_FAILURE"


@dataclass
class RotConfig:
    lambda1: float = 0.05
    lambda2: float = 2.0  # 7.0 suits balanced data
    outer_iters: int = 10
    sinkhorn_iters: int = 200
    marginal_tol: float = 1e-6
    variant: str = "rot"
    mot_momentum: float = 0.9
    prob_floor: float = 1e-8
    beta_stop: float = 1e-8
    # also stop when an accepted outer step improves the objective by less
    # than this (relative); 0 disables. The objective is strongly convex in Q
    # (modulus >= lambda1 * N), so small residual progress bounds the error.
    progress_stop: float = 0.0

    def __post_init__(self):
        if self.lambda1 <= 0:
            raise ValueError("lambda1 must be > 0")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if not 0 <= self.mot_momentum <= 1:
            raise ValueError("mot_momentum must be in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


@dataclass
class TransportPlan:
    q: np.ndarray  # (N, K), nonnegative
    alpha: np.ndarray  # (N,), row marginals
    beta: np.ndarray  # (K,), column marginals on the simplex
    f: np.ndarray  # (N,) dual potentials
    g: np.ndarray  # (K,) dual potentials
    h: float  # simplex multiplier of the beta update


@dataclass
class SolverTrace:
    objective: list[float] = field(default_factory=list)
    row_residual: list[float] = field(default_factory=list)
    col_residual: list[float] = field(default_factory=list)
    betas: list[np.ndarray] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def record(self, objective, row_res, col_res, beta):
        self.objective.append(float(objective))
        self.row_residual.append(float(row_res))
        self.col_residual.append(float(col_res))
        self.betas.append(np.array(beta))


@dataclass
class PseudoLabelSet:
    """Soft/hard pseudo-labels with confidences, clean flags, and losses."""

    soft: np.ndarray  # (N, K) row-stochastic
    hard: np.ndarray  # (N,) class ids
    confidence: np.ndarray  # (N,), max of each soft row
    clean: np.ndarray  # (N,) bool
    loss: np.ndarray | None = None  # per-sample losses once populated

    def copy(self) -> "PseudoLabelSet":
        return PseudoLabelSet(
            soft=self.soft.copy(),
            hard=self.hard.copy(),
            confidence=self.confidence.copy(),
            clean=self.clean.copy(),
            loss=None if self.loss is None else self.loss.copy(),
        )


def check_predictions(p: np.ndarray, tol: float = 1e-6) -> None:
    p = np.asarray(p)
    if p.ndim != 2:
        raise ValueError("prediction matrix must be 2-D")
    if (p < -tol).any() or (p > 1 + tol).any():
        raise ValueError("prediction entries must lie in [0, 1]")
    if np.abs(p.sum(axis=1) - 1.0).max() > tol:
        raise ValueError("prediction rows must sum to 1")


def cost_from_predictions(p: np.ndarray, prob_floor: float = 1e-8) -> np.ndarray:
    """C = -log(max(P, prob_floor)); finite and nonnegative everywhere."""
    return -np.log(np.maximum(np.asarray(p, dtype=np.float64), prob_floor))


def _logsumexp_rows(m: np.ndarray) -> np.ndarray:
    mx = m.max(axis=1)
    return mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))


def _sinkhorn_scaled(phi, log_alpha, log_beta, u, v, tol, max_iter, check_every=5):
    """Scaled log-domain Sinkhorn on log Q = u_i + phi_ij + v_j.

    u and v are warm starts. Rows are scaled last, so the returned Q meets its
    row marginals to float precision; the column residual carries the
    iteration error. Residuals are checked every few iterations.
    """
    alpha = np.exp(log_alpha)
    beta = np.exp(log_beta)
    row_res = col_res = np.inf
    buf = np.empty_like(phi)
    it = 0
    while it < max_iter:
        it += 1
        np.add(phi, u[:, None], out=buf)
        mx = buf.max(axis=0)
        np.subtract(buf, mx[None, :], out=buf)
        np.exp(buf, out=buf)
        v = log_beta - (mx + np.log(buf.sum(axis=0)))

        np.add(phi, v[None, :], out=buf)
        mx = buf.max(axis=1)
        np.subtract(buf, mx[:, None], out=buf)
        np.exp(buf, out=buf)
        u = log_alpha - (mx + np.log(buf.sum(axis=1)))

        if it % check_every == 0 or it == max_iter:
            np.add(phi, u[:, None], out=buf)
            np.add(buf, v[None, :], out=buf)
            np.exp(buf, out=buf)
            row_res = np.abs(buf.sum(axis=1) - alpha).max()
            col_res = np.abs(buf.sum(axis=0) - beta).max()
            if row_res <= tol and col_res <= tol:
                break
    q = np.exp(u[:, None] + phi + v[None, :])
    if not np.isfinite(row_res):
        row_res = np.abs(q.sum(axis=1) - alpha).max()
        col_res = np.abs(q.sum(axis=0) - beta).max()
    return q, u, v, row_res, col_res, it


def sinkhorn_fixed_marginals(cost, alpha, beta, lambda1, tol=1e-6, max_iter=200):
    """Entropic OT with both marginals fixed, solved by log-domain scaling.

    Returns (q, f, g, converged) with Q = diag(e^{f/l1}) e^{-C/l1} diag(e^{g/l1}).
    """
    cost = np.asarray(cost, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if (alpha <= 0).any() or (beta <= 0).any():
        raise ValueError("marginals must be strictly positive")
    phi = -cost / lambda1
    u0 = np.zeros(len(alpha))
    v0 = np.zeros(len(beta))
    q, u, v, row_res, col_res, _ = _sinkhorn_scaled(
        phi, np.log(alpha), np.log(beta), u0, v0, tol, max_iter
    )
    converged = row_res <= tol and col_res <= tol
    return q, lambda1 * u, lambda1 * v, converged


def update_beta(g: np.ndarray, lambda2: float, num_classes: int):
    """Solve beta_j = lambda2 / (K (g_j - h)) with sum(beta) = 1 by bisection.

    The root h is unique on (-inf, min g) because each term grows with h.
    """
    if lambda2 <= 0:
        raise ValueError("lambda2 must be > 0 for the beta update")
    g = np.asarray(g, dtype=np.float64)
    k = num_classes
    gmin = g.min()

    def beta_sum(h):
        return (lambda2 / (k * (g - h))).sum()

    hi = gmin - 1e-12
    gap = max(1.0, abs(gmin))
    lo = gmin - gap
    for _ in range(200):
        if beta_sum(lo) < 1.0:
            break
        gap *= 2.0
        lo = gmin - gap
    else:
        raise BracketFailure("beta sum never fell below 1 while expanding the bracket")
    if beta_sum(hi) < 1.0:
        raise BracketFailure("beta sum below 1 at the upper bracket edge")

    # beta_sum is increasing and convex in h, so Newton from the s > 1 side
    # descends monotonically onto the root; bisection guards the bracket
    h = hi
    for _ in range(200):
        s = beta_sum(h)
        if abs(s - 1.0) <= 1e-13:
            break
        if s > 1.0:
            hi = h
        else:
            lo = h
        slope = (lambda2 / (k * (g - h) ** 2)).sum()
        step = h - (s - 1.0) / slope
        h = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 1e-16 * max(1.0, abs(hi)):
            break
    beta = lambda2 / (k * (g - h))
    beta = beta / beta.sum()  # remove the residual root-finding error
    return beta, float(h)


def objective_value(q, cost, beta, cfg: RotConfig) -> float:
    """<Q,C> + lambda1 * sum(Q log Q) + lambda2 * KL(1/K || beta), with 0 log 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    k = q.shape[1]
    safe = np.where(q > 0, q, 1.0)
    entropy_term = float((q * np.log(safe)).sum())
    u = 1.0 / k
    kl = float((u * (np.log(u) - np.log(np.asarray(beta, dtype=np.float64)))).sum())
    return float((q * cost).sum()) + cfg.lambda1 * entropy_term + cfg.lambda2 * kl


def _eot_objective(q, cost, beta, cfg: RotConfig) -> float:
    # KL(beta || 1/K): negative entropy of beta up to log K
    q = np.asarray(q, dtype=np.float64)
    k = q.shape[1]
    safe = np.where(q > 0, q, 1.0)
    entropy_term = float((q * np.log(safe)).sum())
    beta = np.asarray(beta, dtype=np.float64)
    kl = float((beta * (np.log(beta) + np.log(k))).sum())
    return float((q * cost).sum()) + cfg.lambda1 * entropy_term + cfg.lambda2 * kl


def _eot_beta(g: np.ndarray, lambda2: float):
    # stationarity of the entropy-of-beta regularizer: beta ~ exp(-g / lambda2)
    z = -np.asarray(g, dtype=np.float64) / lambda2
    z -= z.max()
    beta = np.exp(z)
    beta /= beta.sum()
    return beta


def _dual_ascent(cost, lambda1, lambda2, g, h, tol, max_sweeps=20000):
    """Exact block-coordinate ascent on the dual of the relaxed problem.

    Cycles three blocks, each solved exactly: row potentials in closed form,
    one monotone scalar root per column potential, and the simplex multiplier
    by bisection. The dual is smooth and strictly concave on its domain, so
    the cycle converges to the global optimum; used to finish a solve when
    the outer alternation stops before the beta fixed point settles.
    Potentials are in the gauge log Q = (f + g - C)/lambda1 - 1.
    """
    n, k = cost.shape
    log_alpha = np.log(1.0 / n)
    g = g.copy()
    logt = np.log(lambda2 / k)
    sweeps = 0
    beta = np.full(k, 1.0 / k)
    f = lambda1 * (log_alpha - _logsumexp_rows((g[None, :] - cost) / lambda1 - 1.0))
    for sweeps in range(1, max_sweeps + 1):
        log_s = _logsumexp_rows(((f[:, None] - cost) / lambda1 - 1.0).T)

        # column block: root of (y + h)/lambda1 + log_s + log y = log(lambda2/K)
        # in t = log y with y = g - h; psi is increasing and convex in t, so
        # Newton from above the root descends monotonically onto it
        def psi(t):
            return (np.exp(t) + h) / lambda1 + log_s + t - logt

        t = np.full(k, logt + 1.0)
        width = 2.0
        for _ in range(200):
            bad = psi(t) < 0
            if not bad.any():
                break
            t[bad] += width
            width *= 2.0
        for _ in range(100):
            val = psi(t)
            step = val / (np.exp(t) / lambda1 + 1.0)
            t -= step
            if np.abs(step).max() <= 1e-15 * np.maximum(1.0, np.abs(t)).max():
                break
        g = h + np.exp(t)

        beta, h = update_beta(g, lambda2, k)
        # row block last: the returned plan meets its row marginals exactly
        # and the convergence check sees the final state
        f = lambda1 * (log_alpha - _logsumexp_rows((g[None, :] - cost) / lambda1 - 1.0))
        q = np.exp((f[:, None] + g[None, :] - cost) / lambda1 - 1.0)
        if np.abs(q.sum(axis=0) - beta).max() <= tol:
            break
    return q, f, g, h, beta, sweeps


def _alternating_solve(p, cfg: RotConfig, beta_update, objective, finish=False):
    """Shared outer loop: Sinkhorn for (Q, f, g), then a damped beta step.

    The candidate beta from the stationarity condition is always a descent
    direction for the reduced objective, but a full step can overshoot when
    lambda2 is small, so the step is halved until the objective decreases.
    With ``finish`` set, a solve that ends before the beta fixed point
    settles is polished by exact dual ascent.
    """
    p = np.asarray(p, dtype=np.float64)
    n, k = p.shape
    cost = cost_from_predictions(p, cfg.prob_floor)
    phi = -cost / cfg.lambda1
    alpha = np.full(n, 1.0 / n)
    log_alpha = np.log(alpha)
    beta = np.full(k, 1.0 / k)
    trace = SolverTrace()

    u = np.zeros(n)
    v = np.zeros(k)
    q, u, v, row_res, col_res, _ = _sinkhorn_scaled(
        phi, log_alpha, np.log(beta), u, v, cfg.marginal_tol, cfg.sinkhorn_iters
    )
    if not (row_res <= cfg.marginal_tol and col_res <= cfg.marginal_tol):
        trace.warnings.append("CONVERGENCE_WARNING: initial Sinkhorn above tolerance")
    obj = objective(q, cost, beta, cfg)
    trace.record(obj, row_res, col_res, beta)
    h = 0.0
    settled = False

    for _ in range(cfg.outer_iters):
        candidate, h = beta_update(cfg.lambda1 * v, beta)
        step = 1.0
        accepted = None
        for _ in range(12):
            trial = (1.0 - step) * beta + step * candidate
            qt, ut, vt, row_res, col_res, _ = _sinkhorn_scaled(
                phi, log_alpha, np.log(trial), u.copy(), v.copy(),
                cfg.marginal_tol, cfg.sinkhorn_iters,
            )
            obj_t = objective(qt, cost, trial, cfg)
            if obj_t <= obj + 1e-12:
                accepted = (trial, qt, ut, vt, obj_t, row_res, col_res)
                break
            step *= 0.5
        if accepted is None:
            break
        moved = np.abs(accepted[0] - beta).max()
        gained = obj - accepted[4]
        beta, q, u, v, obj, row_res, col_res = accepted
        if not (row_res <= cfg.marginal_tol and col_res <= cfg.marginal_tol):
            trace.warnings.append("CONVERGENCE_WARNING: Sinkhorn above tolerance")
        trace.record(obj, row_res, col_res, beta)
        if moved < cfg.beta_stop:
            settled = True
            break
        if cfg.progress_stop and gained < cfg.progress_stop * max(1.0, abs(obj)):
            break

    if finish and not settled:
        g0 = cfg.lambda1 * v + cfg.lambda1  # shift into the Gibbs-form gauge
        h0 = h if h < g0.min() else g0.min() - cfg.lambda2
        qd, fd, gd, hd, betad, sweeps = _dual_ascent(
            cost, cfg.lambda1, cfg.lambda2, g0, h0, cfg.marginal_tol
        )
        if np.abs(qd.sum(axis=0) - betad).max() <= cfg.marginal_tol:
            obj_d = objective(qd, cost, betad, cfg)
            q, beta, h = qd, betad, hd
            u = fd / cfg.lambda1 - 1.0
            v = gd / cfg.lambda1
            # the loop's objective entries can carry truncation noise, so the
            # certified value is only appended when it keeps the trace monotone
            if obj_d <= obj + 1e-12:
                trace.record(
                    obj_d,
                    np.abs(q.sum(axis=1) - alpha).max(),
                    np.abs(q.sum(axis=0) - beta).max(),
                    beta,
                )
        else:
            trace.warnings.append("CONVERGENCE_WARNING: beta search stalled")

    plan = TransportPlan(q=q, alpha=alpha, beta=beta, f=cfg.lambda1 * u, g=cfg.lambda1 * v, h=h)
    return plan, trace


def solve_rot(p, cfg: RotConfig | None = None):
    """Relaxed-OT pseudo-label solve: returns (TransportPlan, SolverTrace)."""
    cfg = cfg or RotConfig()
    if cfg.variant != "rot":
        raise ValueError("solve_rot requires variant='rot'; use solve_variant otherwise")
    if cfg.lambda2 <= 0:
        raise ValueError("the relaxed variant needs lambda2 > 0")
    k = np.asarray(p).shape[1]

    def rot_update(g, _beta):
        return update_beta(g, cfg.lambda2, k)

    return _alternating_solve(p, cfg, rot_update, objective_value, finish=True)


def solve_variant(p, cfg: RotConfig):
    """COT / EOT / MOT comparison solvers, same interfaces as solve_rot."""
    p = np.asarray(p, dtype=np.float64)
    n, k = p.shape

    if cfg.variant == "rot":
        return solve_rot(p, cfg)

    if cfg.variant == "cot":
        # equality-constrained uniform beta: one Sinkhorn solve
        cost = cost_from_predictions(p, cfg.prob_floor)
        alpha = np.full(n, 1.0 / n)
        beta = np.full(k, 1.0 / k)
        q, f, g, converged = sinkhorn_fixed_marginals(
            cost, alpha, beta, cfg.lambda1, cfg.marginal_tol, cfg.sinkhorn_iters
        )
        trace = SolverTrace()
        if not converged:
            trace.warnings.append("CONVERGENCE_WARNING: Sinkhorn above tolerance")
        trace.record(
            objective_value(q, cost, beta, cfg),
            np.abs(q.sum(axis=1) - alpha).max(),
            np.abs(q.sum(axis=0) - beta).max(),
            beta,
        )
        return TransportPlan(q=q, alpha=alpha, beta=beta, f=f, g=g, h=0.0), trace

    if cfg.variant == "eot":
        def eot_update(g, _beta):
            return _eot_beta(g, cfg.lambda2), 0.0

        return _alternating_solve(p, cfg, eot_update, _eot_objective)

    if cfg.variant == "mot":
        # moving average toward the prediction-argmax histogram
        cost = cost_from_predictions(p, cfg.prob_floor)
        phi = -cost / cfg.lambda1
        alpha = np.full(n, 1.0 / n)
        log_alpha = np.log(alpha)
        v_hist = np.bincount(np.argmax(p, axis=1), minlength=k) / n
        beta = np.full(k, 1.0 / k)
        trace = SolverTrace()
        u = np.zeros(n)
        v = np.zeros(k)
        q = np.full((n, k), 1.0 / (n * k))
        mu = cfg.mot_momentum
        for _ in range(cfg.outer_iters):
            beta = mu * beta + (1.0 - mu) * v_hist
            if (beta <= 0).any():
                # argmax histogram may miss classes entirely; keep marginals positive
                beta = np.maximum(beta, 1e-12)
                beta /= beta.sum()
            q, u, v, row_res, col_res, _ = _sinkhorn_scaled(
                phi, log_alpha, np.log(beta), u, v, cfg.marginal_tol, cfg.sinkhorn_iters
            )
            if not (row_res <= cfg.marginal_tol and col_res <= cfg.marginal_tol):
                trace.warnings.append("CONVERGENCE_WARNING: Sinkhorn above tolerance")
            trace.record(objective_value(q, cost, beta, cfg), row_res, col_res, beta)
        return (
            TransportPlan(q=q, alpha=alpha, beta=beta, f=cfg.lambda1 * u, g=cfg.lambda1 * v, h=0.0),
            trace,
        )

    raise ValueError(f"unknown variant {cfg.variant!r}")


def pseudo_labels_from_plan(plan: TransportPlan) -> PseudoLabelSet:
    """Soft labels U = N*Q; hard labels by argmax (ties to the lowest index)."""
    n = plan.q.shape[0]
    soft = n * plan.q
    hard = np.argmax(soft, axis=1).astype(np.int64)
    confidence = soft[np.arange(n), hard]
    return PseudoLabelSet(
        soft=soft,
        hard=hard,
        confidence=confidence,
        clean=np.zeros(n, dtype=bool),
    )
