"""Noise-variance planner: minimize the expected aggregate noise subject to
the worst-case privacy condition.

For a homogeneous plan the problem is

    minimize    E_s [ (s * sigma_pair^2 + sigma_indiv^2) / (N - s) ]
    subject to  constraint_lhs(sigma_pair, sigma_indiv) <= loss_variance_cap

where the constraint is the binding worst-case privacy condition (all
colluders present, no stragglers).  Substituting the variance ratio
``g = sigma_pair^2 / sigma_indiv^2`` turns the first-order optimality
condition into a quartic in ``g`` whose minimum positive root in (0, 1)
gives the optimum in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import DPBudget, NoisePlan, StragglerDistribution, ThreatModel


class PlannerInfeasibleError(RuntimeError):
    """No admissible noise plan exists for the requested inputs."""


def expected_straggler_ratio(dist: StragglerDistribution, n_clients: int) -> float:
    """The survivor-weighted mean straggler count
    E[s/(N-s)] / E[1/(N-s)]; this single scalar is all the planner needs
    from the straggler distribution."""
    if dist.max_stragglers >= n_clients:
        raise ValueError("straggler support must stay below the population size")
    num = dist.expect(lambda s: s / (n_clients - s))
    den = dist.expect(lambda s: 1.0 / (n_clients - s))
    return num / den


@dataclass(frozen=True)
class QuarticSpec:
    """Optimality polynomial G(g) = sum_k coeffs[k] * g^k for the variance
    ratio, parameterized by the honest-population size and the
    survivor-weighted straggler count."""

    mu: float
    n_honest: int               # N - max_colluders
    coeffs: tuple[float, ...]   # ascending, degree 4

    def evaluate(self, gamma: float | np.ndarray):
        acc = 0.0
        for c in reversed(self.coeffs):
            acc = acc * gamma + c
        return acc


def quartic_coefficients(n_clients: int, max_colluders: int, mu: float) -> QuarticSpec:
    """Coefficients of the first-order optimality condition in the variance
    ratio.  Requires at least two honest clients so pairwise terms exist."""
    n = n_clients - max_colluders
    if n < 2:
        raise PlannerInfeasibleError(
            f"need at least two honest clients, got N - max_colluders = {n}"
        )
    if mu < 0:
        raise ValueError("expected straggler ratio must be nonnegative")
    k4 = 2.0 * mu * n ** 3 - 2.0 * mu * n ** 2
    k3 = float(n ** 3 - n ** 2) + 7.0 * mu * n ** 2 - 6.0 * mu * n
    k2 = float(3 * n ** 2 - 3 * n) + 9.0 * mu * n - 6.0 * mu
    k1 = float(-(n ** 2) + 5 * n - 4) + mu * n + 2.0 * mu
    k0 = float(-n + 1) + mu
    return QuarticSpec(mu=mu, n_honest=n, coeffs=(k0, k1, k2, k3, k4))


_SCAN_POINTS = 10_000
_ROOT_AGREEMENT = 1e-8


def _companion_root(coeffs: tuple[float, ...]) -> float | None:
    """Smallest real root in (0, 1) via companion-matrix eigenvalues."""
    desc = np.trim_zeros(np.array(coeffs[::-1], dtype=float), "f")
    if desc.size < 2:  # np.roots cannot take a zero lead
        return None
    roots = np.roots(desc)
    real = roots[np.abs(roots.imag) <= 1e-9 * max(1.0, np.abs(roots).max())].real
    inside = real[(real > 0.0) & (real < 1.0)]
    if inside.size == 0:
        return None
    return float(inside.min())


def solve_variance_ratio(spec: QuarticSpec) -> float:
    """Minimum positive root of the optimality polynomial in (0, 1).

    Primary method: scan 10^4 points for a sign change and bisect the first
    bracket.  Secondary method: companion-matrix eigenvalues.  Disagreement
    beyond 1e-8 is a hard error; absence of a root is a planner-infeasible
    error (never silently clamped).
    """
    coeffs = np.asarray(spec.coeffs, dtype=float)
    if not np.all(np.isfinite(coeffs)):
        raise ValueError("polynomial coefficients must be finite")
    scale = float(np.max(np.abs(coeffs)))
    if scale == 0.0:
        raise PlannerInfeasibleError("optimality polynomial is identically zero")
    f_tol = 1e-10 * scale

    xs = np.linspace(0.0, 1.0, _SCAN_POINTS + 1)
    vals = spec.evaluate(xs)
    root = None
    for a in range(_SCAN_POINTS):
        lo, hi = xs[a], xs[a + 1]
        flo, fhi = vals[a], vals[a + 1]
        if flo == 0.0 and lo > 0.0:
            root = float(lo)
            break
        if flo * fhi < 0.0:
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                fmid = float(spec.evaluate(mid))
                if abs(fmid) <= f_tol and hi - lo <= 1e-12:
                    break
                if flo * fmid <= 0.0:
                    hi, fhi = mid, fmid
                else:
                    lo, flo = mid, fmid
            root = 0.5 * (lo + hi)
            break
    if root is None or not 0.0 < root < 1.0:
        raise PlannerInfeasibleError(
            "no variance-ratio root in (0, 1); polynomial coefficients "
            f"(ascending): {tuple(spec.coeffs)}"
        )
    check = _companion_root(spec.coeffs)
    if check is None or abs(check - root) > _ROOT_AGREEMENT:
        raise RuntimeError(
            f"root-finder disagreement: bisection {root!r} vs companion {check!r} "
            f"for coefficients {tuple(spec.coeffs)}"
        )
    return float(root)


def constraint_lhs(
    sigma_pair: float, sigma_indiv: float, n_clients: int, max_colluders: int
) -> float:
    """Left side of the planner's privacy constraint, compared against
    ``budget.loss_variance_cap()``.

    Equals the worst-case per-client privacy-loss statistic of the audit at
    the binding realization (all colluders present, no stragglers):

    [(n-1) k + u] * [(n-1) k^2 + (k+u)^2] / ([n k + u]^2 * u^2),

    with n = N - max_colluders, k = sigma_pair^2, u = sigma_indiv^2.
    """
    if sigma_indiv <= 0:
        raise ValueError("sigma_indiv must be positive")
    n = n_clients - max_colluders
    if n < 1:
        raise ValueError("need at least one honest client")
    k = sigma_pair ** 2
    u = sigma_indiv ** 2
    return ((n - 1) * k + u) * ((n - 1) * k ** 2 + (k + u) ** 2) / (
        (n * k + u) ** 2 * u ** 2
    )


def expected_aggregate_noise(
    sigma_pair: float,
    sigma_indiv: float,
    dist: StragglerDistribution,
    n_clients: int,
) -> float:
    """Planner objective: expected per-coordinate variance of the noise left
    in the averaged model, E_s[(s k + u) / (N - s)]."""
    k = sigma_pair ** 2
    u = sigma_indiv ** 2
    return dist.expect(lambda s: (s * k + u) / (n_clients - s))


# keeps emitted plans strictly inside the feasible region so boundary
# margins cannot flip sign in floating point; far below every stated
# equality tolerance
_FEASIBILITY_BACKOFF = 1e-12


def _sigma_indiv_at_ratio(gamma: float, n_honest: int, budget: DPBudget) -> float:
    # closed form that puts the constraint exactly at equality for this ratio
    n = n_honest
    num = math.sqrt(
        2.0 * math.log(2.0 / budget.delta)
        * ((n - 1) * gamma + 1.0)
        * ((n - 1) * gamma ** 2 + (gamma + 1.0) ** 2)
    ) * budget.sensitivity
    return num / (budget.epsilon * (n * gamma + 1.0))


@dataclass(frozen=True)
class PlanSolution:
    plan: NoisePlan
    variance_ratio: float
    quartic: QuarticSpec
    mu: float
    objective: float
    constraint_residual: float  # relative deviation of the constraint from equality
    threat: ThreatModel | None = None
    budget: DPBudget | None = None

    def provenance(self) -> dict:
        out = {
            "sigma_pair": self.plan.sigma_pair,
            "sigma_indiv": self.plan.sigma_indiv,
            "variance_ratio": self.variance_ratio,
            "mu": self.mu,
            "quartic_coeffs": list(self.quartic.coeffs),
            "objective": self.objective,
            "constraint_residual": self.constraint_residual,
        }
        if self.threat is not None:
            out.update(
                n_clients=self.threat.n_clients,
                max_colluders=self.threat.max_colluders,
                max_stragglers=self.threat.max_stragglers,
                straggler_probs=list(self.threat.dist().probs),
            )
        if self.budget is not None:
            out.update(
                epsilon=self.budget.epsilon,
                delta=self.budget.delta,
                sensitivity=self.budget.sensitivity,
                rounds=self.budget.rounds,
            )
        return out


def optimal_variances(threat: ThreatModel, budget: DPBudget) -> PlanSolution:
    """Solve the planner for a homogeneous plan.

    The returned plan satisfies the privacy constraint with equality and
    minimizes the expected aggregate noise over the straggler distribution.
    """
    dist = threat.dist()
    mu = expected_straggler_ratio(dist, threat.n_clients)
    spec = quartic_coefficients(threat.n_clients, threat.max_colluders, mu)
    gamma = solve_variance_ratio(spec)
    backoff = math.sqrt(1.0 + _FEASIBILITY_BACKOFF)
    sigma_indiv = _sigma_indiv_at_ratio(gamma, spec.n_honest, budget) * backoff
    sigma_pair = math.sqrt(gamma) * sigma_indiv
    plan = NoisePlan(sigma_pair=sigma_pair, sigma_indiv=sigma_indiv)
    lhs = constraint_lhs(sigma_pair, sigma_indiv, threat.n_clients, threat.max_colluders)
    residual = lhs / budget.loss_variance_cap() - 1.0
    return PlanSolution(
        plan=plan,
        variance_ratio=gamma,
        quartic=spec,
        mu=mu,
        objective=expected_aggregate_noise(sigma_pair, sigma_indiv, dist, threat.n_clients),
        constraint_residual=residual,
        threat=threat,
        budget=budget,
    )


VANILLA_LDP = "vanilla-ldp"
SMPC_DP_WORSTCASE = "smpc-dp-worstcase"
BASELINE_SCHEMES = (VANILLA_LDP, SMPC_DP_WORSTCASE)


def baseline_variances(threat: ThreatModel, budget: DPBudget, scheme: str) -> NoisePlan:
    """Reference calibrations with no pairwise masking.

    ``vanilla-ldp``: every client carries the full per-client noise
    sqrt(1.25 log(2/delta)) * Delta / eps.

    ``smpc-dp-worstcase``: exact (overhead-free) secure summation assumed,
    with the vanilla noise scaled down by the worst-case honest survivor
    count, sigma = sqrt(1.25 log(2/delta)) * Delta / (eps * (N - Cmax - Smax)).
    """
    vanilla = (
        math.sqrt(1.25 * math.log(2.0 / budget.delta))
        * budget.sensitivity
        / budget.epsilon
    )
    if scheme == VANILLA_LDP:
        return NoisePlan(sigma_pair=0.0, sigma_indiv=vanilla)
    if scheme == SMPC_DP_WORSTCASE:
        divisor = threat.min_honest_online
        if divisor < 1:
            raise ValueError(
                "worst-case honest survivor count must be positive for "
                f"{SMPC_DP_WORSTCASE}, got {divisor}"
            )
        return NoisePlan(sigma_pair=0.0, sigma_indiv=vanilla / divisor)
    raise ValueError(f"unknown baseline scheme {scheme!r}; expected one of {BASELINE_SCHEMES}")
