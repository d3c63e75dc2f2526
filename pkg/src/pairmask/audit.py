"""Worst-case differential-privacy audit of a noise plan.

The adversary (untrusted server plus up to ``max_colluders`` colluding
clients) observes every surviving upload and the aggregate.  Conditioned on a
realization of the colluder set and the straggler set, the unrevealed
disturbances of the honest online clients are jointly Gaussian with
covariance

    C[i, i] = sum_{j != i, j honest} sd_ij^2 + sd_i^2
    C[i, j] = -sd_ij^2                        (i != j, both honest online)

(the aggregate's disturbance is a linear combination of these rows, so it
adds nothing).  The per-client privacy-loss statistic compared against the
budget is

    V_i = sum_j (Cinv[i, j])^2 * C[j, j]

and the plan passes for client i iff 1 / sqrt(V_i) >= sigma_floor(budget).
``V_i`` treats the disturbance coordinates as uncorrelated; under the joint
law the loss variance is Cinv[i, i] <= V_i (the covariance is an M-matrix,
so its inverse is entrywise nonnegative while the off-diagonal covariances
are nonpositive), hence the condition is sufficient and conservative.  The
Monte Carlo tail check samples the joint law and keeps the mean shift, so it
is the strictest check in the module.

Because the exact colluder/straggler realization is unknown, the audit
enumerates every (colluders, stragglers, overlap) count triple up to the
bounds and reports the binding one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .params import DPBudget, NoisePlan, ThreatModel

_EIG_RATIO_FLOOR = 1e-12


class SingularCovarianceError(RuntimeError):
    """Disturbance covariance is numerically singular (e.g. no individual
    noise while no straggler terms survive)."""


@dataclass(frozen=True)
class RealizationCounts:
    """One worst-case scenario: C colluders, S stragglers, A in both sets.

    ``n_honest_online``  = N - C - S + A   (clients whose privacy is at stake)
    ``n_honest_straggling`` = S - A        (stragglers that reveal nothing)
    """

    n_clients: int
    colluders: int
    stragglers: int
    overlap: int

    def __post_init__(self):
        if not 0 <= self.colluders < self.n_clients:
            raise ValueError("colluder count out of range")
        if not 0 <= self.stragglers < self.n_clients:
            raise ValueError("straggler count out of range")
        if not 0 <= self.overlap <= min(self.colluders, self.stragglers):
            raise ValueError("overlap must lie in [0, min(colluders, stragglers)]")

    @property
    def n_honest_online(self) -> int:
        return self.n_clients - self.colluders - self.stragglers + self.overlap

    @property
    def n_honest_straggling(self) -> int:
        return self.stragglers - self.overlap


@dataclass(frozen=True)
class DisturbanceCovariance:
    matrix: np.ndarray
    inverse: np.ndarray
    condition_number: float
    clients: tuple[int, ...]  # honest online client ids, row order

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def _finish_covariance(cov: np.ndarray, clients: tuple[int, ...]) -> DisturbanceCovariance:
    eigs = np.linalg.eigvalsh(cov)
    lo, hi = float(eigs[0]), float(eigs[-1])
    if hi <= 0 or lo < _EIG_RATIO_FLOOR * hi:
        raise SingularCovarianceError(
            f"covariance not positive definite (eigenvalues in [{lo:.3e}, {hi:.3e}]); "
            "a vanishing individual noise is the usual cause"
        )
    inverse = np.linalg.solve(cov, np.eye(cov.shape[0]))
    inverse = 0.5 * (inverse + inverse.T)
    return DisturbanceCovariance(
        matrix=cov, inverse=inverse, condition_number=hi / lo, clients=clients
    )


def covariance_from_counts(
    counts: RealizationCounts, plan: NoisePlan
) -> DisturbanceCovariance:
    """Covariance of the honest online disturbances for a homogeneous plan."""
    if not plan.is_homogeneous:
        raise ValueError("count-level covariance requires a homogeneous plan; "
                         "pass explicit sets instead")
    n1 = counts.n_honest_online
    n2 = counts.n_honest_straggling
    if n1 < 1:
        raise ValueError("need at least one honest online client")
    k = plan.sigma_pair ** 2
    u = plan.sigma_indiv ** 2
    cov = np.full((n1, n1), -k)
    np.fill_diagonal(cov, (n1 + n2 - 1) * k + u)
    return _finish_covariance(cov, tuple(range(n1)))


def covariance_from_sets(
    n_clients: int,
    colluders: set[int] | frozenset[int],
    stragglers: set[int] | frozenset[int],
    plan: NoisePlan,
) -> DisturbanceCovariance:
    """Covariance for explicit colluder/straggler sets (heterogeneous ok)."""
    colluders = set(colluders)
    stragglers = set(stragglers)
    i1 = sorted(set(range(n_clients)) - colluders - stragglers)
    i2 = sorted(stragglers - colluders)
    if not i1:
        raise ValueError("need at least one honest online client")
    honest = i1 + i2
    n1 = len(i1)
    cov = np.zeros((n1, n1))
    for a, i in enumerate(i1):
        diag = plan.indiv_sd(i) ** 2
        diag += sum(plan.pair_sd(i, j) ** 2 for j in honest if j != i)
        cov[a, a] = diag
        for b in range(a + 1, n1):
            cov[a, b] = cov[b, a] = -plan.pair_sd(i, i1[b]) ** 2
    return _finish_covariance(cov, tuple(i1))


def privacy_loss_moments(
    cov: DisturbanceCovariance, i: int, v_norm: float
) -> tuple[float, float]:
    """Mean and variance of client i's privacy loss for an update shift of
    L2 norm ``v_norm``:  mean = Cinv[i,i]/2 * v^2,
    variance = sum_j Cinv[i,j]^2 * C[j,j] * v^2."""
    if not 0 <= i < cov.size:
        raise ValueError("client row index outside covariance")
    if v_norm < 0:
        raise ValueError("v_norm must be nonnegative")
    v2 = v_norm ** 2
    mean = 0.5 * cov.inverse[i, i] * v2
    var = float(np.sum(cov.inverse[i] ** 2 * np.diag(cov.matrix))) * v2
    return mean, var


def loss_statistics(cov: DisturbanceCovariance) -> np.ndarray:
    """V_i = sum_j Cinv[i,j]^2 * C[j,j] for every honest online client."""
    return np.einsum("ij,j->i", cov.inverse ** 2, np.diag(cov.matrix))


@dataclass(frozen=True)
class ConditionResult:
    margins: np.ndarray      # slack of 1/sqrt(V_i) over the budget floor
    passed: bool
    per_round: bool


def dp_condition_holds(
    cov: DisturbanceCovariance, budget: DPBudget, per_round: bool = True
) -> ConditionResult:
    """Check 1/sqrt(V_i) >= sqrt(2 log(2/delta)) * Delta / eps per client.

    With ``per_round=False`` the plan behind the covariance is treated as
    composed over ``budget.rounds`` disclosures, i.e. every variance gains a
    factor sqrt(rounds) before the check.
    """
    stats = loss_statistics(cov)
    if not per_round:
        stats = stats / math.sqrt(budget.rounds)
    margins = 1.0 / np.sqrt(stats) - budget.sigma_floor()
    return ConditionResult(margins=margins, passed=bool(np.all(margins >= 0)), per_round=per_round)


@dataclass(frozen=True)
class RealizationRow:
    colluders: int
    stragglers: int
    overlap: int
    n_honest_online: int
    n_honest_straggling: int
    margin: float


@dataclass(frozen=True)
class AuditReport:
    n_clients: int
    max_colluders: int
    max_stragglers: int
    plan: NoisePlan
    budget: DPBudget
    per_round: bool
    rows: tuple[RealizationRow, ...]
    binding: RealizationRow
    min_margin: float
    passed: bool
    mode: str = "counts"

    def to_dict(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "max_colluders": self.max_colluders,
            "max_stragglers": self.max_stragglers,
            "sigma_pair": self.plan.sigma_pair,
            "sigma_indiv": self.plan.sigma_indiv,
            "epsilon": self.budget.epsilon,
            "delta": self.budget.delta,
            "sensitivity": self.budget.sensitivity,
            "rounds": self.budget.rounds,
            "per_round": self.per_round,
            "mode": self.mode,
            "passed": self.passed,
            "min_margin": self.min_margin,
            "binding": {
                "colluders": self.binding.colluders,
                "stragglers": self.binding.stragglers,
                "overlap": self.binding.overlap,
                "margin": self.binding.margin,
            },
            "realizations": [
                {
                    "colluders": r.colluders,
                    "stragglers": r.stragglers,
                    "overlap": r.overlap,
                    "n_honest_online": r.n_honest_online,
                    "n_honest_straggling": r.n_honest_straggling,
                    "margin": r.margin,
                }
                for r in self.rows
            ],
        }

    def to_text(self) -> str:
        lines = [
            "privacy audit "
            f"(N={self.n_clients}, colluders<={self.max_colluders}, "
            f"stragglers<={self.max_stragglers})",
            f"plan: sigma_pair={self.plan.sigma_pair:.6g} "
            f"sigma_indiv={self.plan.sigma_indiv:.6g}",
            f"budget: eps={self.budget.epsilon:g} delta={self.budget.delta:g} "
            f"sensitivity={self.budget.sensitivity:g} rounds={self.budget.rounds}"
            f" ({'per-round' if self.per_round else 'composed'})",
            f"verdict: {'PASS' if self.passed else 'FAIL'}  "
            f"min margin {self.min_margin:+.6g}",
            f"binding realization: colluders={self.binding.colluders} "
            f"stragglers={self.binding.stragglers} overlap={self.binding.overlap} "
            f"margin={self.binding.margin:+.6g}",
            "realization  colluders stragglers overlap  margin",
        ]
        for r in self.rows:
            lines.append(
                f"             {r.colluders:9d} {r.stragglers:10d} {r.overlap:7d}  "
                f"{r.margin:+.6g}"
            )
        return "\n".join(lines) + "\n"


def worst_case_audit(
    threat: ThreatModel,
    plan: NoisePlan,
    budget: DPBudget,
    per_round: bool = True,
) -> AuditReport:
    """Enumerate every realization up to the threat bounds and report the
    binding one.

    Homogeneous plans are enumerated by counts (C, S, A) -- by symmetry every
    subset realization with the same counts has the same margins.
    Heterogeneous plans fall back to explicit subset enumeration, which is
    limited to small populations.
    """
    if plan.is_homogeneous:
        return _audit_by_counts(threat, plan, budget, per_round)
    return audit_by_subsets(threat, plan, budget, per_round)


def _audit_by_counts(threat, plan, budget, per_round) -> AuditReport:
    rows: list[RealizationRow] = []
    cache: dict[tuple[int, int], float] = {}
    for c in range(threat.max_colluders + 1):
        for s in range(threat.max_stragglers + 1):
            for a in range(min(c, s) + 1):
                counts = RealizationCounts(threat.n_clients, c, s, a)
                n1, n2 = counts.n_honest_online, counts.n_honest_straggling
                if n1 < 1:
                    continue  # nobody left to protect
                key = (n1, n2)
                if key not in cache:
                    cov = covariance_from_counts(counts, plan)
                    cache[key] = float(
                        dp_condition_holds(cov, budget, per_round).margins.min()
                    )
                rows.append(RealizationRow(c, s, a, n1, n2, cache[key]))
    return _finish_report(threat, plan, budget, per_round, rows, mode="counts")


def audit_by_subsets(
    threat: ThreatModel,
    plan: NoisePlan,
    budget: DPBudget,
    per_round: bool = True,
    max_population: int = 8,
) -> AuditReport:
    """Brute-force audit over explicit colluder/straggler subsets.

    Exponential in the population; intended as a cross-check (and as the
    only exact path for heterogeneous plans)."""
    n = threat.n_clients
    if n > max_population:
        raise ValueError(
            f"subset enumeration limited to {max_population} clients, got {n}"
        )
    everyone = range(n)
    rows: list[RealizationRow] = []
    for c in range(threat.max_colluders + 1):
        for col in combinations(everyone, c):
            col_set = frozenset(col)
            for s in range(threat.max_stragglers + 1):
                for strag in combinations(everyone, s):
                    strag_set = frozenset(strag)
                    overlap = len(col_set & strag_set)
                    i1 = set(everyone) - col_set - strag_set
                    if not i1:
                        continue
                    cov = covariance_from_sets(n, col_set, strag_set, plan)
                    margin = float(
                        dp_condition_holds(cov, budget, per_round).margins.min()
                    )
                    rows.append(
                        RealizationRow(
                            c, s, overlap, len(i1), len(strag_set - col_set), margin
                        )
                    )
    return _finish_report(threat, plan, budget, per_round, rows, mode="subsets")


def _finish_report(threat, plan, budget, per_round, rows, mode) -> AuditReport:
    if not rows:
        raise ValueError("no auditable realization (population too small?)")
    binding = min(rows, key=lambda r: r.margin)
    return AuditReport(
        n_clients=threat.n_clients,
        max_colluders=threat.max_colluders,
        max_stragglers=threat.max_stragglers,
        plan=plan,
        budget=budget,
        per_round=per_round,
        rows=tuple(rows),
        binding=binding,
        min_margin=binding.margin,
        passed=binding.margin >= 0,
        mode=mode,
    )


def _gauss_upper_tail(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def analytic_tail(cov: DisturbanceCovariance, i: int, budget: DPBudget) -> float:
    """Two-sided tail Pr(|L_i| >= eps) under the joint Gaussian law,
    mean shift included."""
    v2 = budget.sensitivity ** 2
    mean = 0.5 * cov.inverse[i, i] * v2
    sd = math.sqrt(cov.inverse[i, i] * v2)
    e = budget.epsilon
    return _gauss_upper_tail((e - mean) / sd) + _gauss_upper_tail((e + mean) / sd)


@dataclass(frozen=True)
class TailCheckResult:
    empirical: float
    std_error: float
    analytic: float
    epsilon: float
    delta: float
    n_samples: int

    @property
    def passed(self) -> bool:
        return self.empirical <= self.delta + 3.0 * self.std_error


def monte_carlo_tail_check(
    cov: DisturbanceCovariance,
    i: int,
    budget: DPBudget,
    n_samples: int = 100_000,
    seed: int = 0,
) -> TailCheckResult:
    """Estimate Pr(|L_i| >= eps) by sampling the joint disturbance law and
    evaluating the log-density ratio per sample.

    Useful only for loose budgets (delta around a few percent); the expected
    number of tail hits must be resolvable.
    """
    if not 0 <= i < cov.size:
        raise ValueError("client row index outside covariance")
    if n_samples * budget.delta < 10:
        raise ValueError(
            "sample budget too small to resolve the requested delta; "
            f"need at least {math.ceil(10 / budget.delta)} samples"
        )
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(cov.matrix)
    x = rng.standard_normal((n_samples, cov.size)) @ chol.T
    shifted = x.copy()
    shifted[:, i] += budget.sensitivity
    q = np.einsum("ni,ij,nj->n", x, cov.inverse, x)
    q_shift = np.einsum("ni,ij,nj->n", shifted, cov.inverse, shifted)
    loss = -0.5 * (q - q_shift)
    hits = float(np.mean(np.abs(loss) >= budget.epsilon))
    se = math.sqrt(max(hits * (1.0 - hits), 1.0 / n_samples) / n_samples)
    return TailCheckResult(
        empirical=hits,
        std_error=se,
        analytic=analytic_tail(cov, i, budget),
        epsilon=budget.epsilon,
        delta=budget.delta,
        n_samples=n_samples,
    )


def compose_over_rounds(plan: NoisePlan, rounds: int) -> NoisePlan:
    """Scale a per-round plan to cover ``rounds`` disclosures: every variance
    gains a factor sqrt(rounds)."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return plan.with_variance_scale(math.sqrt(rounds))
