"""Shared parameter records: noise plans, privacy budgets, threat models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _norm_pair(i: int, j: int) -> tuple[int, int]:
    if i == j:
        raise ValueError(f"a pair needs two distinct clients, got ({i}, {j})")
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class NoisePlan:
    """Standard deviations of the two mask families.

    ``sigma_pair`` is the std-dev of every shared pairwise term (one per
    unordered client pair, added by the lower index and subtracted by the
    higher one so it cancels in a full aggregate).  ``sigma_indiv`` is the
    std-dev of the per-client term that survives aggregation.

    Optional override maps allow heterogeneous per-pair / per-client
    std-devs; the planner never emits them but the auditor and the masking
    arithmetic accept them.
    """

    sigma_pair: float
    sigma_indiv: float
    pair_overrides: dict[tuple[int, int], float] | None = None
    indiv_overrides: dict[int, float] | None = None

    def __post_init__(self):
        if self.sigma_pair < 0 or self.sigma_indiv < 0:
            raise ValueError("noise std-devs must be nonnegative")
        if self.pair_overrides is not None:
            fixed = {}
            for (i, j), sd in self.pair_overrides.items():
                if sd < 0:
                    raise ValueError(f"negative pairwise std-dev for pair ({i},{j})")
                fixed[_norm_pair(i, j)] = float(sd)
            object.__setattr__(self, "pair_overrides", fixed)
        if self.indiv_overrides is not None:
            for i, sd in self.indiv_overrides.items():
                if sd < 0:
                    raise ValueError(f"negative individual std-dev for client {i}")

    @property
    def is_homogeneous(self) -> bool:
        return not self.pair_overrides and not self.indiv_overrides

    def pair_sd(self, i: int, j: int) -> float:
        key = _norm_pair(i, j)
        if self.pair_overrides and key in self.pair_overrides:
            return self.pair_overrides[key]
        return self.sigma_pair

    def indiv_sd(self, i: int) -> float:
        if self.indiv_overrides and i in self.indiv_overrides:
            return self.indiv_overrides[i]
        return self.sigma_indiv

    def with_variance_scale(self, factor: float) -> "NoisePlan":
        """Return a plan with every variance multiplied by ``factor``."""
        if factor < 0:
            raise ValueError("variance scale must be nonnegative")
        s = math.sqrt(factor)
        return NoisePlan(
            sigma_pair=self.sigma_pair * s,
            sigma_indiv=self.sigma_indiv * s,
            pair_overrides=None if self.pair_overrides is None
            else {k: sd * s for k, sd in self.pair_overrides.items()},
            indiv_overrides=None if self.indiv_overrides is None
            else {k: sd * s for k, sd in self.indiv_overrides.items()},
        )


@dataclass(frozen=True)
class DPBudget:
    """(epsilon, delta) target with the L2 sensitivity of one local update
    and the number of disclosed rounds."""

    epsilon: float
    delta: float
    sensitivity: float
    rounds: int = 1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.sensitivity < 0:
            raise ValueError("sensitivity must be nonnegative")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    def sigma_floor(self) -> float:
        """Minimum effective noise scale sqrt(2 log(2/delta)) * Delta / eps."""
        return math.sqrt(2.0 * math.log(2.0 / self.delta)) * self.sensitivity / self.epsilon

    def loss_variance_cap(self) -> float:
        """Largest admissible privacy-loss variance factor,
        eps^2 / (2 log(2/delta) * Delta^2)."""
        return self.epsilon ** 2 / (2.0 * math.log(2.0 / self.delta) * self.sensitivity ** 2)


@dataclass(frozen=True)
class StragglerDistribution:
    """Distribution of the per-round straggler count on support {0..max}."""

    probs: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probs must be a nonempty 1-d sequence")
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        total = float(p.sum())
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-6):
            raise ValueError(f"probabilities must sum to 1, got {total}")
        object.__setattr__(self, "probs", tuple(float(x) / total for x in p))

    @classmethod
    def uniform(cls, max_stragglers: int) -> "StragglerDistribution":
        if max_stragglers < 0:
            raise ValueError("max straggler count must be nonnegative")
        n = max_stragglers + 1
        return cls(probs=tuple(1.0 / n for _ in range(n)))

    @property
    def max_stragglers(self) -> int:
        return len(self.probs) - 1

    def expect(self, fn) -> float:
        return float(sum(p * fn(s) for s, p in enumerate(self.probs)))

    def mean(self) -> float:
        return self.expect(lambda s: s)

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.probs), p=np.asarray(self.probs)))


@dataclass(frozen=True)
class ThreatModel:
    """Population size plus worst-case colluder / straggler bounds and the
    straggler-count distribution used for planning (uniform by default)."""

    n_clients: int
    max_colluders: int
    max_stragglers: int
    straggler_dist: StragglerDistribution | None = field(default=None)

    def __post_init__(self):
        if self.n_clients < 2:
            raise ValueError("need at least two clients")
        if not 0 <= self.max_colluders < self.n_clients:
            raise ValueError("colluder bound must lie in [0, n_clients)")
        if not 0 <= self.max_stragglers < self.n_clients:
            raise ValueError("straggler bound must lie in [0, n_clients)")
        if self.straggler_dist is not None and (
            self.straggler_dist.max_stragglers != self.max_stragglers
        ):
            raise ValueError("straggler distribution support must end at max_stragglers")

    def dist(self) -> StragglerDistribution:
        if self.straggler_dist is not None:
            return self.straggler_dist
        return StragglerDistribution.uniform(self.max_stragglers)

    @property
    def min_honest_online(self) -> int:
        return self.n_clients - self.max_colluders - self.max_stragglers
