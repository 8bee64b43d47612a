"""Learnable descent algorithm: smoothed descent with u/v candidate selection.

One iteration at smoothing level ``eps`` and steps ``alpha, tau``::

    z = x - alpha * grad f(x)
    u = z - tau * grad r_eps(z)
    v = z - alpha * grad r_eps(x)
    x_next = u if phi_eps(u) <= phi_eps(v) else v

followed by ``eps <- gamma * eps`` whenever
``|grad phi_eps(x_next)| < sigma * gamma * eps``. The run stops once
``sigma * eps < eps_tol`` (checked on the updated ``eps``) or after
``max_iters`` iterations.
"""
import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ldarecon import regularizer as reg
from ldarecon.errors import InvalidConfiguration, NumericalFailure

TRACE_COLUMNS = ("k", "eps", "phi_eps", "grad_norm", "branch", "reduced", "alpha", "tau")


@dataclass(frozen=True)
class SolverConfig:
    eps0: float = None
    gamma: float = 0.5
    sigma: float = 1.0
    eps_tol: float = 1e-3
    max_iters: int = 1000
    delta1: float = 1.5
    delta2: float = 1.5
    reduce: bool = True

    def __post_init__(self):
        if self.eps0 is not None and not self.eps0 > 0:
            raise InvalidConfiguration(f"eps0 must be positive, got {self.eps0}")
        if not 0 < self.gamma < 1:
            raise InvalidConfiguration(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.sigma > 0:
            raise InvalidConfiguration(f"sigma must be positive, got {self.sigma}")
        if self.eps_tol < 0:
            raise InvalidConfiguration("eps_tol must be nonnegative")
        if self.max_iters < 0:
            raise InvalidConfiguration("max_iters must be nonnegative")
        if not self.delta1 >= self.delta2 > 1:
            raise InvalidConfiguration(
                f"need delta1 >= delta2 > 1, got {self.delta1}, {self.delta2}")


@dataclass(frozen=True)
class StepSchedule:
    """Step-size policy.

    ``theory``      ``alpha = 1 / (delta2 * L_eps)``, the largest admissible step.
    ``fixed_list``  ``alphas[k]``/``taus[k]``; the last entry repeats.
    ``line_search`` backtracking on the v-candidate until
                    ``phi(v) - phi(x) <= -ls_tau |v - x|^2``; each search
                    starts from the previous accepted step divided by ``ls_shrink``.

    Without explicit ``taus``, ``tau = tau_ratio * alpha`` (``0.5`` is the
    choice ``beta = alpha``).
    """

    mode: str = "theory"
    alphas: tuple = ()
    taus: tuple = ()
    ls_tau: float = 0.35
    ls_shrink: float = 0.5
    ls_alpha0: float = 1.0
    tau_ratio: float = 0.5

    def __post_init__(self):
        if self.mode not in ("theory", "fixed_list", "line_search"):
            raise InvalidConfiguration(f"unknown step mode {self.mode!r}")
        if self.mode == "fixed_list" and not self.alphas:
            raise InvalidConfiguration("fixed_list mode needs alphas")
        if any(a <= 0 for a in self.alphas) or any(t <= 0 for t in self.taus):
            raise InvalidConfiguration("step sizes must be positive")
        if not 0 < self.ls_shrink < 1 or self.ls_tau <= 0 or self.tau_ratio <= 0:
            raise InvalidConfiguration("invalid line-search constants")
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))

    def tau_for(self, k, alpha):
        if self.taus:
            return self.taus[min(k, len(self.taus) - 1)]
        return self.tau_ratio * alpha


@dataclass(frozen=True)
class LipschitzBudget:
    L_f: float
    L_g: float
    M: float

    def L_eps(self, eps, m):
        return self.L_f + math.sqrt(m) * self.L_g + self.M ** 2 / eps

    @classmethod
    def from_problem(cls, fidelity, fmap, rng=None):
        return cls(float(fidelity.lipschitz(rng)), float(fmap.bound_Lg(rng)), float(fmap.bound_M(rng)))


class Objective:
    """``phi_eps = f + r_eps(g(.))`` with a small identity-keyed cache of feature passes."""

    _CACHE = 6

    def __init__(self, fidelity, fmap):
        self.fidelity = fidelity
        self.fmap = fmap
        self._features = []
        self._grads = []

    @property
    def m(self):
        return self.fmap.m

    @staticmethod
    def _lookup(store, x, compute, size):
        for key, val in store:
            if key is x:
                return val
        val = compute(x)
        store.append((x, val))
        if len(store) > size:
            store.pop(0)
        return val

    def features(self, x):
        return self._lookup(self._features, x, self.fmap.forward_cached, self._CACHE)

    def grad_f(self, x):
        return self._lookup(self._grads, x, self.fidelity.grad, self._CACHE)

    def phi(self, x):
        return float(self.fidelity.value(x) + reg.r(self.features(x)[0]))

    def phi_eps(self, x, eps):
        return float(self.fidelity.value(x) + reg.r_eps(self.features(x)[0], eps))

    def grad_r_eps(self, x, eps):
        return reg.grad_r_eps(self.fmap, x, eps, cache=self.features(x))

    def grad_phi_eps(self, x, eps):
        return self.grad_f(x) + self.grad_r_eps(x, eps)


class StepResult(NamedTuple):
    x_next: np.ndarray
    branch: str
    grad_norm: float
    phi_u: float
    phi_v: float
    phi_next: float


def _guard(name, value, dump):
    if not np.all(np.isfinite(value)):
        raise NumericalFailure(f"non-finite {name} encountered", dump)


def lda_step(x, eps, alpha, tau, fidelity, fmap, use_u=True, objective=None):
    """One iteration of the descent scheme at fixed ``eps``.

    Returns the selected iterate, its branch (``"u"`` or ``"v"``) and
    ``|grad phi_eps(x_next)|`` for the reduction test.
    """
    if not (eps > 0 and alpha > 0 and tau > 0):
        raise InvalidConfiguration("eps, alpha and tau must be positive")
    obj = Objective(fidelity, fmap) if objective is None else objective
    dump = {"x": x, "eps": eps, "alpha": alpha, "tau": tau}
    z = x - alpha * obj.grad_f(x)
    v = z - alpha * obj.grad_r_eps(x, eps)
    _guard("v", v, dump)
    phi_v = obj.phi_eps(v, eps)
    if use_u:
        u = z - tau * obj.grad_r_eps(z, eps)
        _guard("u", u, dump)
        phi_u = obj.phi_eps(u, eps)
    else:
        u, phi_u = None, math.inf
    if phi_u <= phi_v:
        x_next, branch, phi_next = u, "u", phi_u
    else:
        x_next, branch, phi_next = v, "v", phi_v
    if not math.isfinite(phi_next):
        raise NumericalFailure("non-finite objective value", dict(dump, u=u, v=v))
    grad_norm = float(np.linalg.norm(obj.grad_phi_eps(x_next, eps)))
    _guard("gradient norm", grad_norm, dict(dump, x_next=x_next))
    return StepResult(x_next, branch, grad_norm, phi_u, phi_v, phi_next)


def reduce_eps(eps, grad_norm, sigma, gamma):
    """Shrink ``eps`` by ``gamma`` iff ``grad_norm < sigma * gamma * eps``."""
    return gamma * eps if grad_norm < sigma * gamma * eps else eps


@dataclass
class TraceRow:
    k: int
    eps: float
    phi_eps: float
    grad_norm: float
    branch: str
    reduced: bool
    alpha: float
    tau: float
    phi_next: float = math.nan
    phi_u: float = math.nan
    phi_v: float = math.nan


@dataclass
class IterateTrace:
    m: int
    rows: list = field(default_factory=list)
    iterates: list = None
    terminated: bool = False
    final_eps: float = math.nan

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def descent_values(self):
        """``phi_eps_k(x_k) + m * eps_k / 2`` per iteration."""
        return self.column("phi_eps") + self.m * self.column("eps") / 2.0

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.rows:
            writer.writerow([
                r.k, _fmt(r.eps), _fmt(r.phi_eps), _fmt(r.grad_norm), r.branch,
                int(r.reduced), _fmt(r.alpha), _fmt(r.tau)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source, m=0):
        text = Path(source).read_text() if not isinstance(source, str) or "\n" not in source else source
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise InvalidConfiguration(f"unexpected trace header {reader.fieldnames}")
        rows = [TraceRow(int(d["k"]), float(d["eps"]), float(d["phi_eps"]), float(d["grad_norm"]),
                         d["branch"], d["reduced"] == "1", float(d["alpha"]), float(d["tau"]))
                for d in reader]
        return cls(m=m, rows=rows)


def _fmt(value):
    return format(float(value), ".17g")


def initial_eps(fmap, x0, scale=0.1):
    """Default ``eps0``: ``scale`` times the largest feature norm at ``x0``."""
    peak = float(reg.block_norms(fmap.forward(x0)).max())
    return scale * peak if peak > 0 else 1.0


def solve(x0, config, schedule, fidelity, fmap, budget=None, use_u=True,
          keep_iterates=False, rng=None):
    """Run the algorithm from ``x0``; returns ``(x_final, trace)``."""
    x = np.asarray(x0, dtype=np.float64)
    obj = Objective(fidelity, fmap)
    m = fmap.m
    if schedule.mode == "theory" and budget is None:
        try:
            budget = LipschitzBudget.from_problem(fidelity, fmap, rng)
        except NotImplementedError:
            raise InvalidConfiguration("theory mode needs a Lipschitz budget") from None
    eps = config.eps0 if config.eps0 is not None else initial_eps(fmap, x)
    trace = IterateTrace(m=m, iterates=[x] if keep_iterates else None)
    ls_alpha = schedule.ls_alpha0 / schedule.ls_shrink
    for k in range(config.max_iters):
        phi_x = obj.phi_eps(x, eps)
        if schedule.mode == "theory":
            alpha = 1.0 / (config.delta2 * budget.L_eps(eps, m))
        elif schedule.mode == "fixed_list":
            alpha = schedule.alphas[min(k, len(schedule.alphas) - 1)]
        else:
            alpha = _line_search(obj, x, eps, phi_x, ls_alpha, schedule)
            ls_alpha = alpha / schedule.ls_shrink
        tau = schedule.tau_for(k, alpha)
        step = lda_step(x, eps, alpha, tau, fidelity, fmap, use_u=use_u, objective=obj)
        reduced = config.reduce and step.grad_norm < config.sigma * config.gamma * eps
        trace.rows.append(TraceRow(k, eps, phi_x, step.grad_norm, step.branch, reduced,
                                   alpha, tau, step.phi_next, step.phi_u, step.phi_v))
        x = step.x_next
        if keep_iterates:
            trace.iterates.append(x)
        if reduced:
            eps = config.gamma * eps
        if config.sigma * eps < config.eps_tol:
            trace.terminated = True
            break
    trace.final_eps = eps
    return x, trace


def _line_search(obj, x, eps, phi_x, alpha, schedule, max_halvings=60):
    g = obj.grad_phi_eps(x, eps)
    for _ in range(max_halvings):
        v = x - alpha * g
        if obj.phi_eps(v, eps) - phi_x <= -schedule.ls_tau * float(np.sum((v - x) ** 2)):
            return alpha
        alpha *= schedule.ls_shrink
    return alpha


def gd_baseline(x0, config, schedule, fidelity, fmap, budget=None, keep_iterates=False, rng=None):
    """Same loop with the u-candidate switched off: every step takes v."""
    return solve(x0, config, schedule, fidelity, fmap, budget=budget, use_u=False,
                 keep_iterates=keep_iterates, rng=rng)


def agd_baseline(x0, config, schedule, fidelity, fmap, thetas, budget=None,
                 literal=False, keep_iterates=False, rng=None):
    """Inertial gradient steps ``x + theta_k (x - x_prev) - alpha grad phi_eps(x)``.

    With ``literal=True`` the regularizer gradient is dropped from the step,
    giving ``x - alpha grad f(x) + theta_k (x - x_prev)``. The eps schedule
    follows the same reduction rule as :func:`solve`.
    """
    thetas = np.broadcast_to(np.asarray(thetas, dtype=np.float64), (max(config.max_iters, 1),)) \
        if np.ndim(thetas) == 0 else np.asarray(thetas, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64)
    x_prev = x
    obj = Objective(fidelity, fmap)
    m = fmap.m
    if schedule.mode == "theory" and budget is None:
        budget = LipschitzBudget.from_problem(fidelity, fmap, rng)
    eps = config.eps0 if config.eps0 is not None else initial_eps(fmap, x)
    trace = IterateTrace(m=m, iterates=[x] if keep_iterates else None)
    for k in range(config.max_iters):
        phi_x = obj.phi_eps(x, eps)
        if schedule.mode == "theory":
            alpha = 1.0 / (config.delta2 * budget.L_eps(eps, m))
        else:
            alpha = schedule.alphas[min(k, len(schedule.alphas) - 1)] if schedule.alphas \
                else schedule.ls_alpha0
        theta = thetas[min(k, len(thetas) - 1)]
        direction = obj.grad_f(x) if literal else obj.grad_phi_eps(x, eps)
        x_next = x - alpha * direction + theta * (x - x_prev)
        _guard("iterate", x_next, {"x": x, "x_prev": x_prev, "eps": eps, "alpha": alpha})
        grad_norm = float(np.linalg.norm(obj.grad_phi_eps(x_next, eps)))
        phi_next = obj.phi_eps(x_next, eps)
        reduced = config.reduce and grad_norm < config.sigma * config.gamma * eps
        trace.rows.append(TraceRow(k, eps, phi_x, grad_norm, "v", reduced, alpha, 0.0,
                                   phi_next, math.inf, phi_next))
        x_prev, x = x, x_next
        if keep_iterates:
            trace.iterates.append(x)
        if reduced:
            eps = config.gamma * eps
        if config.sigma * eps < config.eps_tol:
            trace.terminated = True
            break
    trace.final_eps = eps
    return x, trace


def fixed_eps_iteration_bound(budget, m, eps, eta, phi_eps_x0, delta1=1.5, delta2=1.5,
                              phi_star=0.0):
    """Upper bound on the first ``k`` with ``|grad phi_eps(x_{k+1})| <= eta`` at fixed eps."""
    L = budget.L_eps(eps, m)
    return delta1 * delta2 * L * (2 * phi_eps_x0 - 2 * phi_star + m * eps) / ((delta2 - 1) * eta ** 2)


def fixed_eps_gradient_bound(budget, m, eps, T, phi_eps_x0, delta1=1.5, delta2=1.5, phi_star=0.0):
    """Bound on ``min_{k<T} |grad phi_eps(x_k)|`` at fixed eps."""
    L = budget.L_eps(eps, m)
    return math.sqrt(delta1 * delta2 * L * (2 * phi_eps_x0 - 2 * phi_star + m * eps)
                     / ((delta2 - 1) * T))


def complexity_constants(budget, m, phi_x0, eps0, sigma, gamma, delta1=1.5, delta2=1.5,
                         phi_star=0.0):
    """Segment-length constants ``(c1, c2)``: segment ``l`` takes at most ``c1 g^-2l + c2 g^-3l``.

    The denominator uses ``delta2 - 1`` (the fixed-eps lemma's constant),
    which is the larger of the two possible choices when ``delta1 >= delta2``.
    """
    gap = 2 * phi_x0 - 2 * phi_star + m * eps0
    base = delta1 * delta2 * gap / ((delta2 - 1) * sigma ** 2)
    c1 = base * (budget.L_f + math.sqrt(m) * budget.L_g) / (eps0 ** 2 * gamma ** 2)
    c2 = base * budget.M ** 2 / (eps0 ** 3 * gamma ** 3)
    return c1, c2


def total_iteration_bound(budget, m, phi_x0, eps0, sigma, gamma, eps_tol, delta1=1.5,
                          delta2=1.5, phi_star=0.0):
    """Bound on the total iterations until ``sigma * eps < eps_tol``."""
    c1, c2 = complexity_constants(budget, m, phi_x0, eps0, sigma, gamma, delta1, delta2, phi_star)
    g2, g3, g5 = gamma ** 2, gamma ** 3, gamma ** 5
    return (c1 * sigma ** 2 * eps0 ** 2 / (1 - g2) / eps_tol ** 2
            + c2 * sigma ** 3 * eps0 ** 3 / (1 - g3) / eps_tol ** 3
            - (c1 * g2 + c2 * g3 - (c1 + c2) * g5) / ((1 - g2) * (1 - g3)))


def config_dict(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}
