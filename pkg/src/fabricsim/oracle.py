"""Centralized solver for the beaconing utility-maximization problem.

    maximize    sum_v U_v(r_v)
    subject to  sum_{u in n(v)} r_u <= C      for every v
                r_min_v <= r_v <= r_max_v

with the alpha-fair utilities U_v.  The solver works on the Lagrange dual:
prices are found by projected gradient descent and rates are recovered in
closed form from the price sums, exactly as a vehicle would compute them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from fabricsim.model import NeighborGraph, RateAllocation, SimParams

log = logging.getLogger(__name__)


class InfeasibleProblem(ValueError):
    pass


class InfeasibleCandidate(ValueError):
    pass


def utility(r, alpha: float, w=1.0):
    """alpha-fair utility: w*r (alpha=0), w*log r (alpha=1), w*r^(1-a)/(1-a) otherwise."""
    r = np.asarray(r, dtype=float)
    if alpha >= 1 and np.any(r <= 0):
        raise ValueError("utility undefined for r <= 0 when alpha >= 1")
    if alpha == 0:
        out = w * r
    elif alpha == 1:
        out = w * np.log(r)
    else:
        out = w * r ** (1.0 - alpha) / (1.0 - alpha)
    return float(out) if np.ndim(out) == 0 else out


def marginal_utility(r, alpha: float, w=1.0):
    return w * np.asarray(r, dtype=float) ** (-alpha)


def rates_from_price_sums(s, alpha: float, w, lo, hi):
    """argmax_{lo<=r<=hi} U(r) - r*s, elementwise.

    For alpha > 0 this is (w/s)^(1/alpha) clipped to the box; a zero price sum
    yields ``hi``.  For alpha = 0 the objective is linear and the answer is
    ``hi`` when s < w and ``lo`` when s > w (``hi`` on the tie).
    """
    s = np.asarray(s, dtype=float)
    w = np.broadcast_to(np.asarray(w, dtype=float), s.shape)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), s.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), s.shape)
    if alpha == 0:
        return np.where(s <= w, hi, lo)
    with np.errstate(divide="ignore", over="ignore"):
        raw = np.where(s > 0, (w / np.where(s > 0, s, 1.0)) ** (1.0 / alpha), np.inf)
    return np.clip(raw, lo, hi)


@dataclass
class NumProblem:
    """``A[v, u]`` is 1 when u is in n(v) (self included)."""

    A: np.ndarray
    capacity_C: float
    alpha: float
    weights: np.ndarray
    r_min: np.ndarray
    r_max: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        n = self.A.shape[0]
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (n,)).copy()
        self.r_min = np.broadcast_to(np.asarray(self.r_min, dtype=float), (n,)).copy()
        self.r_max = np.broadcast_to(np.asarray(self.r_max, dtype=float), (n,)).copy()

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_graph(cls, graph: NeighborGraph, p: SimParams, alpha=None, weights=None,
                   r_min=None, r_max=None) -> "NumProblem":
        return cls(
            graph.adjacency.astype(float),
            p.capacity_C,
            p.alpha if alpha is None else alpha,
            p.weights_default if weights is None else weights,
            p.r_min if r_min is None else r_min,
            p.r_max if r_max is None else r_max,
        )

    @classmethod
    def from_sets(cls, sets, capacity_C, alpha, r_min, r_max, weights=1.0) -> "NumProblem":
        g = NeighborGraph.from_sets(sets)
        return cls(g.adjacency.astype(float), capacity_C, alpha, weights, r_min, r_max)

    def loads(self, rates) -> np.ndarray:
        return self.A @ np.asarray(rates, dtype=float)

    def infeasibility(self) -> np.ndarray:
        """Vehicles whose constraint is violated even at minimum rates."""
        return np.flatnonzero(self.loads(self.r_min) > self.capacity_C * (1 + 1e-12))

    def is_feasible(self, rates, tol: float = 1e-9) -> bool:
        r = np.asarray(rates, dtype=float)
        scale = max(1.0, self.capacity_C)
        return bool(
            np.all(r >= self.r_min - tol)
            and np.all(r <= self.r_max + tol)
            and np.all(self.loads(r) <= self.capacity_C + tol * scale)
        )

    def objective(self, rates) -> float:
        return float(np.sum(utility(np.asarray(rates, dtype=float), self.alpha, self.weights)))

    def primal_rates(self, prices) -> np.ndarray:
        """Rates maximizing the Lagrangian for the given prices."""
        s = self.A.T @ np.asarray(prices, dtype=float)
        return rates_from_price_sums(s, self.alpha, self.weights, self.r_min, self.r_max)

    def dual_value(self, prices) -> float:
        """g(pi) = max_r L(r, pi)."""
        pi = np.asarray(prices, dtype=float)
        r = self.primal_rates(pi)
        s = self.A.T @ pi
        return self.objective(r) - float(r @ s) + self.capacity_C * float(pi.sum())

    def dual_gradient(self, prices) -> np.ndarray:
        """dg/dpi_v = C - sum_{u in n(v)} r_u(pi)."""
        return self.capacity_C - self.loads(self.primal_rates(prices))


@dataclass
class OracleSolution:
    rates: RateAllocation
    prices: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool
    objective: float
    history: list[float] = field(default_factory=list, repr=False)


def kkt_residual(prob: NumProblem, rates, prices) -> float:
    """Largest KKT violation.

    Max of primal violation max(0, load - C), complementary slackness
    |pi_v (C - load_v)|, and the gap between ``rates`` and the rates the
    prices imply (for alpha = 0, where that map is set-valued, a rate off its
    bound is only penalized when the price sum differs from the weight).

    Complementary slackness is also measured with prices divided by the
    largest price sum: at high alpha optimal prices are tiny and the raw
    product would accept loads well short of C.
    """
    r = np.asarray(rates, dtype=float)
    pi = np.asarray(prices, dtype=float)
    load = prob.loads(r)
    primal = np.max(np.maximum(0.0, load - prob.capacity_C), initial=0.0)
    s = prob.A.T @ pi
    gap_c = np.abs(prob.capacity_C - load)
    slack = np.max(np.abs(pi) * gap_c, initial=0.0)
    top = np.max(np.abs(s), initial=0.0)
    if top > 0:
        slack = max(slack, float(np.max(np.abs(pi) / top * gap_c)))
    if prob.alpha == 0:
        gap = np.where(
            np.isclose(s, prob.weights, rtol=1e-9, atol=1e-12),
            0.0,
            np.abs(r - rates_from_price_sums(s, 0.0, prob.weights, prob.r_min, prob.r_max)),
        )
        stationarity = np.max(gap, initial=0.0)
    else:
        stationarity = np.max(
            np.abs(r - rates_from_price_sums(s, prob.alpha, prob.weights, prob.r_min, prob.r_max)),
            initial=0.0,
        )
    dual_feas = np.max(np.maximum(0.0, -pi), initial=0.0)
    return float(max(primal, slack, stationarity, dual_feas))


def _solution(prob, rates, prices, iterations, converged, history=()) -> OracleSolution:
    rates = np.clip(rates, prob.r_min, prob.r_max)
    return OracleSolution(
        RateAllocation(np.arange(prob.n), rates),
        np.asarray(prices, dtype=float),
        kkt_residual(prob, rates, prices),
        iterations,
        converged,
        prob.objective(rates) if prob.alpha == 0 or np.all(rates > 0) else float("nan"),
        list(history),
    )


def _lipschitz_bound(prob: NumProblem) -> float:
    """Upper bound on the Lipschitz constant of the dual gradient."""
    norm_a = np.linalg.norm(prob.A, 2)
    slope = np.max(prob.r_max ** (1.0 + prob.alpha) / (prob.alpha * prob.weights))
    return float(norm_a**2 * slope)


def _solve_lp(prob: NumProblem, tol: float) -> OracleSolution:
    # the dual is piecewise linear when alpha = 0; hand it to an LP solver
    from scipy.optimize import linprog

    res = linprog(
        -prob.weights,
        A_ub=prob.A,
        b_ub=np.full(prob.n, prob.capacity_C),
        bounds=list(zip(prob.r_min, prob.r_max)),
        method="highs",
    )
    if res.status == 2:
        raise InfeasibleProblem("linear program infeasible")
    prices = np.maximum(0.0, -np.asarray(res.ineqlin.marginals))
    sol = _solution(prob, res.x, prices, int(res.nit), res.status == 0)
    sol.converged = sol.converged and sol.kkt_residual <= max(tol, 1e-7)
    return sol


def solve_num(prob: NumProblem, tol: float = 1e-8, max_iter: int = 50_000,
              method: str = "spg", prices0=None) -> OracleSolution:
    """Optimal rates and prices for ``prob``.

    ``method="spg"`` runs projected gradient on the dual with Barzilai-Borwein
    steps and a non-monotone line search; ``method="gradient"`` uses the
    plain constant step 1/L (slow, but each iterate decreases the dual).
    Iteration stops once the KKT residual is below ``tol``.  If ``max_iter``
    is reached first the best iterate is returned with ``converged=False``.
    """
    if prob.infeasibility().size:
        raise InfeasibleProblem(
            f"minimum rates overload vehicles {prob.infeasibility().tolist()}"
        )
    if np.all(prob.loads(prob.r_max) <= prob.capacity_C):
        return _solution(prob, prob.r_max, np.zeros(prob.n), 0, True)
    if prob.alpha == 0:
        return _solve_lp(prob, tol)

    pi = np.zeros(prob.n) if prices0 is None else np.maximum(0.0, np.asarray(prices0, dtype=float))
    grad = prob.dual_gradient(pi)
    f = prob.dual_value(pi)
    L = _lipschitz_bound(prob)
    step = 1.0 / L
    recent = [f]
    best = (np.inf, pi, prob.primal_rates(pi))
    history: list[float] = []

    for it in range(1, max_iter + 1):
        r = prob.primal_rates(pi)
        res = kkt_residual(prob, r, pi)
        if res < best[0]:
            best = (res, pi, r)
        if prob.is_feasible(r, tol=0.0):
            history.append(prob.objective(r))
        if res <= tol:
            return _solution(prob, r, pi, it - 1, True, history)

        if method == "gradient":
            pi_new = np.maximum(0.0, pi - grad / L)
            f_new = prob.dual_value(pi_new)
        else:
            direction = np.maximum(0.0, pi - step * grad) - pi
            slope = float(grad @ direction)
            f_ref = max(recent)
            t = 1.0
            while True:
                pi_new = pi + t * direction
                f_new = prob.dual_value(pi_new)
                if f_new <= f_ref + 1e-4 * t * slope or t < 1e-12:
                    break
                t *= 0.5
        grad_new = prob.dual_gradient(pi_new)
        s_vec = pi_new - pi
        y_vec = grad_new - grad
        sy = float(s_vec @ y_vec)
        step = float(s_vec @ s_vec) / sy if sy > 0 else 1.0 / L
        step = min(max(step, 1e-3 / L), 1e30)
        if not np.any(s_vec):
            # stalled at machine precision
            r = prob.primal_rates(pi_new)
            return _solution(prob, r, pi_new, it, kkt_residual(prob, r, pi_new) <= tol, history)
        pi, grad, f = pi_new, grad_new, f_new
        recent.append(f)
        if len(recent) > 10:
            recent.pop(0)

    log.warning("solve_num: no convergence after %d iterations (residual %.3g)", max_iter, best[0])
    return _solution(prob, best[2], best[1], max_iter, False, history)


@dataclass
class FairnessCertificate:
    passed: bool
    worst_margin: float
    trials: int
    worst_sample: np.ndarray = field(repr=False, default=None)


def alpha_fair_margin(prob: NumProblem, candidate, other) -> float:
    """sum_v w_v (r_v - r*_v) / (r*_v)^alpha; non-positive for every feasible r iff r* is fair."""
    c = np.asarray(candidate, dtype=float)
    r = np.asarray(other, dtype=float)
    return float(np.sum(prob.weights * (r - c) / c**prob.alpha))


def sample_feasible(prob: NumProblem, rng: np.random.Generator, center=None, scale: float = 1.0):
    """One random feasible allocation.

    Without ``center``: uniform in the rate box, then shrunk toward ``r_min``
    by the largest factor that satisfies every load constraint.  With
    ``center`` (a feasible point): a box-clipped Gaussian perturbation of it,
    shrunk back toward the center until feasible.
    """
    if center is None:
        base = prob.r_min
        target = rng.uniform(prob.r_min, prob.r_max)
    else:
        base = np.asarray(center, dtype=float)
        target = np.clip(base + scale * rng.standard_normal(prob.n), prob.r_min, prob.r_max)
    delta = target - base
    room = prob.capacity_C - prob.loads(base)
    grow = prob.A @ delta
    with np.errstate(divide="ignore", invalid="ignore"):
        limits = np.where(grow > 0, np.maximum(room, 0.0) / grow, np.inf)
    t = min(1.0, float(np.min(limits, initial=np.inf)))
    return base + t * delta


def check_alpha_fair(prob: NumProblem, candidate, trials: int = 1000, rng=None,
                     eps: float = 1e-6) -> FairnessCertificate:
    """Sampling certificate for (alpha, w)-proportional fairness of ``candidate``.

    Half of the samples are drawn over the whole feasible set, half near the
    candidate, where a non-optimal allocation is easiest to beat.
    """
    c = np.asarray(candidate.rates if isinstance(candidate, RateAllocation) else candidate, dtype=float)
    if not prob.is_feasible(c):
        raise InfeasibleCandidate("candidate allocation violates the constraints")
    rng = np.random.default_rng(0) if rng is None else rng
    worst = -np.inf
    worst_r = c
    span = prob.r_max - prob.r_min
    for i in range(trials):
        if i % 2 == 0:
            r = sample_feasible(prob, rng)
        else:
            r = sample_feasible(prob, rng, center=c, scale=float(np.mean(span)) * 10.0 ** rng.uniform(-4, -1))
        m = alpha_fair_margin(prob, c, r)
        if m > worst:
            worst, worst_r = m, r
    return FairnessCertificate(bool(worst <= eps), float(worst), trials, worst_r)
