"""Masking arithmetic and the closed-form variances of every disturbance term.

A client ``i`` uploads

    masked_i = params_i + sum_{a > i} r_{ia} - sum_{b < i} r_{bi} + n_i

where ``r`` are the shared pairwise terms (lower index adds, higher index
subtracts -- this sign convention is part of the wire contract) and ``n_i``
is the individual term.  When every client survives, all pairwise terms
cancel in the average and only the individual terms remain; a straggler
leaves its pairwise terms uncanceled in the survivors' uploads.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping

import numpy as np

from .noise import derive_client_seed, derive_pair_seed, gaussian_vector
from .params import NoisePlan


class AggregationError(RuntimeError):
    """The aggregation step cannot produce a model (protocol failure)."""


def mask_update(
    params: np.ndarray,
    client: int,
    round_index: int,
    plan: NoisePlan,
    n_clients: int,
    master: bytes,
) -> np.ndarray:
    """Apply the pairwise and individual masks of one client for one round."""
    params = np.asarray(params, dtype=float)
    if params.ndim != 1:
        raise ValueError("params must be a 1-d vector")
    if not 0 <= client < n_clients:
        raise ValueError(f"client index {client} outside [0, {n_clients})")
    dim = params.shape[0]
    # accumulate the mask on its own and add it once, so a cached
    # whole-run mask block reproduces this bit for bit
    mask = np.zeros(dim)
    for other in range(n_clients):
        if other == client:
            continue
        term = gaussian_vector(
            derive_pair_seed(master, client, other),
            round_index,
            dim,
            plan.pair_sd(client, other),
        )
        if term.shape != params.shape:
            raise ValueError("noise vector dimension mismatch")
        if client < other:
            mask += term
        else:
            mask -= term
    mask += gaussian_vector(
        derive_client_seed(master, client), round_index, dim, plan.indiv_sd(client)
    )
    return params + mask


def aggregate(
    updates: Mapping[int, np.ndarray],
    weights: Mapping[int, float] | None = None,
) -> np.ndarray:
    """Average the survivors' uploads (equal weights unless given explicitly).

    Summation runs in ascending client order so results do not depend on the
    mapping's iteration order.
    """
    if not updates:
        raise AggregationError("no surviving client uploads to aggregate")
    order = sorted(updates)
    if weights is None:
        total = float(len(order))
        acc = np.zeros_like(np.asarray(updates[order[0]], dtype=float))
        for i in order:
            acc += np.asarray(updates[i], dtype=float)
        return acc / total
    missing = [i for i in order if i not in weights]
    if missing:
        raise ValueError(f"weights missing for clients {missing}")
    total = float(sum(weights[i] for i in order))
    if total <= 0:
        raise AggregationError("total aggregation weight must be positive")
    acc = np.zeros_like(np.asarray(updates[order[0]], dtype=float))
    for i in order:
        acc += weights[i] * np.asarray(updates[i], dtype=float)
    return acc / total


def global_noise_variance(
    n_clients: int, stragglers: int | Iterable[int], plan: NoisePlan
) -> float:
    """Per-coordinate variance of the noise left in the averaged model.

    With ``S`` stragglers each survivor keeps its ``S`` uncanceled pairwise
    terms plus its individual term, so a homogeneous plan gives
    ``(S * sigma_pair^2 + sigma_indiv^2) / (N - S)``.  Passing the straggler
    set instead of a count evaluates the heterogeneous sum
    ``sum_{i survives} (sum_{j straggles} sd_ij^2 + sd_i^2) / (N - S)^2``.
    """
    if isinstance(stragglers, (int, np.integer)):
        s = int(stragglers)
        if not 0 <= s < n_clients:
            raise ValueError("straggler count must lie in [0, n_clients)")
        if not plan.is_homogeneous:
            raise ValueError("heterogeneous plans need the explicit straggler set")
        return (s * plan.sigma_pair ** 2 + plan.sigma_indiv ** 2) / (n_clients - s)
    strag = set(int(i) for i in stragglers)
    if len(strag) >= n_clients:
        raise ValueError("straggler set must leave at least one survivor")
    survivors = [i for i in range(n_clients) if i not in strag]
    total = 0.0
    for i in survivors:
        total += sum(plan.pair_sd(i, j) ** 2 for j in strag) + plan.indiv_sd(i) ** 2
    return total / len(survivors) ** 2


def local_disturbance_variance(
    client: int,
    honest_online: Iterable[int],
    honest_straggling: Iterable[int],
    plan: NoisePlan,
) -> float:
    """Per-coordinate variance of the unrevealed disturbance in one upload.

    Colluders disclose their pairwise terms, so only terms shared with the
    non-colluding clients (online or straggling) plus the client's own
    individual term remain:  sum_{j != i, j honest} sd_ij^2 + sd_i^2.
    """
    i1 = set(int(i) for i in honest_online)
    i2 = set(int(i) for i in honest_straggling)
    if client not in i1:
        raise ValueError(f"client {client} is not an honest online client")
    total = plan.indiv_sd(client) ** 2
    for j in i1 | i2:
        if j != client:
            total += plan.pair_sd(client, j) ** 2
    return total


def residual_disturbance_variance(
    honest_online: Iterable[int],
    honest_straggling: Iterable[int],
    plan: NoisePlan,
    n_clients: int,
    n_stragglers: int,
) -> float:
    """Per-coordinate variance of the unrevealed part of the aggregate noise.

    Exactly the pairwise terms crossing from honest online clients to honest
    stragglers survive unrevealed, together with the honest online clients'
    individual terms:
    sum_{i in I1} (sum_{j in I2} sd_ij^2 + sd_i^2) / (N - S)^2.
    """
    i1 = sorted(set(int(i) for i in honest_online))
    i2 = set(int(i) for i in honest_straggling)
    if i2 & set(i1):
        raise ValueError("online and straggling honest sets must be disjoint")
    if not 0 <= n_stragglers < n_clients:
        raise ValueError("straggler count must lie in [0, n_clients)")
    total = 0.0
    for i in i1:
        total += sum(plan.pair_sd(i, j) ** 2 for j in i2) + plan.indiv_sd(i) ** 2
    return total / (n_clients - n_stragglers) ** 2
