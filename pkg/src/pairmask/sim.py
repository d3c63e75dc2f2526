"""Federated training simulator on synthetic convex tasks.

One round: broadcast the global model, run local minibatch SGD per client,
clip each client's round delta to half the sensitivity bound, mask, drop the
sampled stragglers, average the surviving uploads.  Everything is a pure
function of the master seed, so traces are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .masking import aggregate, global_noise_variance, mask_update
from .noise import derive_seed, gaussian_block, derive_pair_seed, derive_client_seed
from .params import NoisePlan, StragglerDistribution

_TAG_SGD = b"local-sgd"
_TAG_STRAGGLER = b"stragglers"


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, round_index: int):
        super().__init__(message)
        self.round_index = round_index


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SyntheticTask:
    """Per-client datasets with exactly known curvature constants.

    ``smoothness`` and ``pl_constant`` are the largest/smallest eigenvalues
    of the average Hessian (exact for the quadratic task, safe bounds for the
    logistic one); ``optimum``/``optimum_value`` minimize the global loss.
    """

    kind: str
    features: np.ndarray          # (n_clients, samples, dim)
    targets: np.ndarray           # (n_clients, samples)
    optimum: np.ndarray
    optimum_value: float
    smoothness: float
    pl_constant: float
    l2_reg: float = 0.0

    @property
    def n_clients(self) -> int:
        return self.features.shape[0]

    @property
    def samples_per_client(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def client_loss(self, client: int, omega: np.ndarray) -> float:
        x, y = self.features[client], self.targets[client]
        if self.kind == "quadratic":
            r = x @ omega - y
            return float(0.5 * np.mean(r ** 2))
        z = y * (x @ omega)
        loss = float(np.mean(np.logaddexp(0.0, -z)))
        return loss + 0.5 * self.l2_reg * float(omega @ omega)

    def client_grad(
        self, client: int, omega: np.ndarray, idx: np.ndarray | None = None
    ) -> np.ndarray:
        x, y = self.features[client], self.targets[client]
        if idx is not None:
            x, y = x[idx], y[idx]
        if self.kind == "quadratic":
            return x.T @ (x @ omega - y) / x.shape[0]
        z = y * (x @ omega)
        w = -y / (1.0 + np.exp(z))
        return x.T @ w / x.shape[0] + self.l2_reg * omega

    def global_loss(self, omega: np.ndarray) -> float:
        return float(np.mean([self.client_loss(i, omega) for i in range(self.n_clients)]))

    def global_grad(self, omega: np.ndarray) -> np.ndarray:
        g = np.zeros(self.dim)
        for i in range(self.n_clients):
            g += self.client_grad(i, omega)
        return g / self.n_clients

    def loss_gap(self, omega: np.ndarray) -> float:
        return self.global_loss(omega) - self.optimum_value


def make_quadratic_task(
    n_clients: int,
    dim: int,
    samples_per_client: int = 32,
    heterogeneity: float = 0.5,
    eig_min: float = 0.1,
    eig_max: float = 1.0,
    optimum_scale: float = 1.0,
    data_seed: int = 0,
) -> SyntheticTask:
    """Least-squares task 0.5 * mean((A_i w - b_i)^2) per client.

    Every A_i shares the same right-singular structure, so the average
    Hessian has eigenvalues exactly linspace(eig_min, eig_max): the curvature
    constants are known, not estimated.  Client optima are shifted by
    ``heterogeneity`` to make the data non-iid.
    """
    if samples_per_client < dim:
        raise ValueError("need samples_per_client >= dim for full-rank clients")
    if not 0 < eig_min <= eig_max:
        raise ValueError("need 0 < eig_min <= eig_max")
    rng = np.random.default_rng(data_seed)
    eigs = np.linspace(eig_min, eig_max, dim)
    sv = np.sqrt(samples_per_client * eigs)
    v, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    base = rng.standard_normal(dim)
    base *= optimum_scale / np.linalg.norm(base)
    feats = np.empty((n_clients, samples_per_client, dim))
    targs = np.empty((n_clients, samples_per_client))
    client_opts = np.empty((n_clients, dim))
    for i in range(n_clients):
        u, _ = np.linalg.qr(rng.standard_normal((samples_per_client, dim)))
        a = (u * sv) @ v.T
        w_i = base + heterogeneity * rng.standard_normal(dim) / math.sqrt(dim)
        feats[i] = a
        targs[i] = a @ w_i
        client_opts[i] = w_i
    hessian = (v * eigs) @ v.T
    rhs = np.zeros(dim)
    for i in range(n_clients):
        rhs += feats[i].T @ targs[i] / samples_per_client
    optimum = np.linalg.solve(hessian, rhs / n_clients)
    task = SyntheticTask(
        kind="quadratic",
        features=feats,
        targets=targs,
        optimum=optimum,
        optimum_value=0.0,  # placeholder, fixed below
        smoothness=float(eig_max),
        pl_constant=float(eig_min),
    )
    object.__setattr__(task, "optimum_value", task.global_loss(optimum))
    return task


def make_logistic_task(
    n_clients: int,
    dim: int,
    samples_per_client: int = 64,
    heterogeneity: float = 0.5,
    l2_reg: float = 0.1,
    data_seed: int = 0,
) -> SyntheticTask:
    """Binary logistic regression with an L2 term (strongly convex, so the
    curvature constants are honest bounds rather than exact eigenvalues)."""
    if l2_reg <= 0:
        raise ValueError("l2_reg must be positive for a strongly convex task")
    rng = np.random.default_rng(data_seed)
    base = rng.standard_normal(dim)
    base /= np.linalg.norm(base)
    feats = np.empty((n_clients, samples_per_client, dim))
    targs = np.empty((n_clients, samples_per_client))
    for i in range(n_clients):
        x = rng.standard_normal((samples_per_client, dim))
        w_i = base + heterogeneity * rng.standard_normal(dim) / math.sqrt(dim)
        p = 1.0 / (1.0 + np.exp(-(x @ w_i)))
        targs[i] = np.where(rng.random(samples_per_client) < p, 1.0, -1.0)
        feats[i] = x
    curv = 0.0
    for i in range(n_clients):
        gram = feats[i].T @ feats[i] / samples_per_client
        curv = max(curv, float(np.linalg.eigvalsh(gram)[-1]))
    task = SyntheticTask(
        kind="logistic",
        features=feats,
        targets=targs,
        optimum=np.zeros(dim),
        optimum_value=0.0,
        smoothness=curv / 4.0 + l2_reg,
        pl_constant=l2_reg,
        l2_reg=l2_reg,
    )
    opt = _newton_minimize(task)
    object.__setattr__(task, "optimum", opt)
    object.__setattr__(task, "optimum_value", task.global_loss(opt))
    return task


def _newton_minimize(task: SyntheticTask, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    w = np.zeros(task.dim)
    for _ in range(max_iter):
        g = task.global_grad(w)
        if np.linalg.norm(g) < tol:
            break
        h = task.l2_reg * np.eye(task.dim)
        for i in range(task.n_clients):
            x = task.features[i]
            z = task.targets[i] * (x @ w)
            p = 1.0 / (1.0 + np.exp(-z))
            h += (x.T * (p * (1.0 - p))) @ x / (x.shape[0] * task.n_clients)
        w = w - np.linalg.solve(h, g)
    return w


# ---------------------------------------------------------------------------
# local step, clipping, stragglers


def clip_delta(update: np.ndarray, reference: np.ndarray, bound: float) -> np.ndarray:
    """Scale the round delta (update - reference) to L2 norm <= bound.

    With bound = sensitivity/2, two runs whose datasets differ in one sample
    produce post-clip parameters at most ``sensitivity`` apart.
    """
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    delta = np.asarray(update, dtype=float) - reference
    norm = float(np.linalg.norm(delta))
    if norm <= bound:
        return np.array(update, dtype=float, copy=True)
    return reference + delta * (bound / norm)


def local_sgd(
    task: SyntheticTask,
    omega: np.ndarray,
    client: int,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Minibatch SGD from the broadcast model; one shuffled pass per epoch."""
    m = task.samples_per_client
    if batch_size < 1 or batch_size > m:
        raise ValueError(f"batch_size must lie in [1, {m}]")
    w = np.array(omega, dtype=float, copy=True)
    for _ in range(epochs):
        if batch_size == m:
            batches = [np.arange(m)]
        else:
            perm = rng.permutation(m)
            batches = [perm[s : s + batch_size] for s in range(0, m, batch_size)]
        for idx in batches:
            g = task.client_grad(client, w, idx)
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(
                    f"non-finite gradient for client {client}", round_index=-1
                )
            w -= lr * g
    return w


def sgd_rng(master: bytes, client: int, round_index: int) -> np.random.Generator:
    key = np.frombuffer(derive_seed(master, _TAG_SGD, client, round_index), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_straggler_set(
    master: bytes,
    round_index: int,
    dist: StragglerDistribution | None,
    n_clients: int,
) -> tuple[int, ...]:
    """Straggler set of one round: size drawn from ``dist``, members uniform;
    independent across rounds by seed derivation."""
    if dist is None or dist.max_stragglers == 0:
        return ()
    key = np.frombuffer(derive_seed(master, _TAG_STRAGGLER, round_index), dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    count = dist.sample(rng)
    if count == 0:
        return ()
    members = rng.choice(n_clients, size=count, replace=False)
    return tuple(sorted(int(i) for i in members))


# ---------------------------------------------------------------------------
# rounds and full runs


@dataclass(frozen=True)
class TrainingConfig:
    n_clients: int
    rounds: int
    plan: NoisePlan
    clip_bound: float
    master_seed: bytes
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    straggler_dist: StragglerDistribution | None = None
    divergence_factor: float = 1e6
    initial_point: np.ndarray | None = None

    def __post_init__(self):
        if self.rounds < 1 or self.epochs < 1:
            raise ValueError("rounds and epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.straggler_dist is not None and (
            self.straggler_dist.max_stragglers >= self.n_clients
        ):
            raise ValueError("straggler support must leave at least one survivor")


@dataclass(frozen=True)
class RoundTrace:
    round_index: int
    stragglers: tuple[int, ...]
    survivors: tuple[int, ...]
    masked: np.ndarray          # (len(survivors), dim), row order = survivors
    aggregate: np.ndarray
    realized_noise: np.ndarray  # aggregate minus the survivors' true average


@dataclass(frozen=True)
class TrainingTrace:
    rounds: tuple[RoundTrace, ...]
    loss_gaps: np.ndarray        # (T,), gap after each aggregation
    straggler_counts: np.ndarray
    noise_norms: np.ndarray
    initial_gap: float
    final_gap: float
    final_model: np.ndarray
    provenance: dict = field(default_factory=dict)


def build_mask_cache(
    plan: NoisePlan, n_clients: int, rounds: int, dim: int, master: bytes
) -> np.ndarray:
    """All clients' total masks for all rounds, shape (rounds, n_clients, dim).

    Accumulation order matches :func:`pairmask.masking.mask_update` exactly
    (lower-index pairs first, individual term last), so the cached mask is
    bit-identical to masking round by round.
    """
    total = np.zeros((rounds, n_clients, dim))
    for i in range(n_clients):
        for j in range(i + 1, n_clients):
            block = gaussian_block(
                derive_pair_seed(master, i, j), 0, rounds, dim, plan.pair_sd(i, j)
            )
            total[:, i] += block
            total[:, j] -= block
    for i in range(n_clients):
        total[:, i] += gaussian_block(
            derive_client_seed(master, i), 0, rounds, dim, plan.indiv_sd(i)
        )
    return total


def run_round(
    omega: np.ndarray,
    config: TrainingConfig,
    task: SyntheticTask,
    round_index: int,
    mask_cache: np.ndarray | None = None,
) -> RoundTrace:
    """One protocol round. Stragglers compute but never upload, so only the
    survivors' work is simulated."""
    n = config.n_clients
    stragglers = sample_straggler_set(
        config.master_seed, round_index, config.straggler_dist, n
    )
    survivors = tuple(i for i in range(n) if i not in stragglers)
    masked: dict[int, np.ndarray] = {}
    raw = np.empty((len(survivors), task.dim))
    for row, i in enumerate(survivors):
        w = local_sgd(
            task, omega, i, config.epochs, config.lr, config.batch_size,
            sgd_rng(config.master_seed, i, round_index),
        )
        w = clip_delta(w, omega, config.clip_bound)
        raw[row] = w
        if mask_cache is not None:
            masked[i] = w + mask_cache[round_index, i]
        else:
            masked[i] = mask_update(
                w, i, round_index, config.plan, n, config.master_seed
            )
    agg = aggregate(masked)
    return RoundTrace(
        round_index=round_index,
        stragglers=stragglers,
        survivors=survivors,
        masked=np.stack([masked[i] for i in survivors]),
        aggregate=agg,
        realized_noise=agg - raw.mean(axis=0),
    )


def run_training(config: TrainingConfig, task: SyntheticTask) -> TrainingTrace:
    if task.n_clients != config.n_clients:
        raise ValueError("task and config disagree on the number of clients")
    dim = task.dim
    omega = (
        np.zeros(dim)
        if config.initial_point is None
        else np.array(config.initial_point, dtype=float, copy=True)
    )
    initial_gap = task.loss_gap(omega)
    cache = build_mask_cache(config.plan, config.n_clients, config.rounds, dim, config.master_seed)
    rounds: list[RoundTrace] = []
    gaps = np.empty(config.rounds)
    counts = np.empty(config.rounds, dtype=int)
    norms = np.empty(config.rounds)
    ceiling = config.divergence_factor * max(initial_gap, 1e-12)
    for t in range(config.rounds):
        tr = run_round(omega, config, task, t, cache)
        omega = tr.aggregate
        gap = task.loss_gap(omega)
        if not math.isfinite(gap) or gap > ceiling:
            raise TrainingDivergedError(
                f"loss gap {gap:.3e} exceeded {ceiling:.3e} at round {t}", round_index=t
            )
        rounds.append(tr)
        gaps[t] = gap
        counts[t] = len(tr.stragglers)
        norms[t] = float(np.linalg.norm(tr.realized_noise))
    return TrainingTrace(
        rounds=tuple(rounds),
        loss_gaps=gaps,
        straggler_counts=counts,
        noise_norms=norms,
        initial_gap=initial_gap,
        final_gap=float(gaps[-1]),
        final_model=omega,
        provenance={
            "master_seed": config.master_seed.hex(),
            "sigma_pair": config.plan.sigma_pair,
            "sigma_indiv": config.plan.sigma_indiv,
            "rounds": config.rounds,
            "epochs": config.epochs,
            "lr": config.lr,
            "batch_size": config.batch_size,
            "clip_bound": config.clip_bound,
        },
    )


# ---------------------------------------------------------------------------
# curvature constants and the convergence bound


def reference_trajectory(
    task: SyntheticTask, lr: float = 0.2, steps: int = 25
) -> np.ndarray:
    """Noiseless full-gradient descent path used to estimate the trajectory-
    level constants; (steps + 1, dim)."""
    w = np.zeros(task.dim)
    points = [w.copy()]
    for _ in range(steps):
        w = w - lr * task.global_grad(w)
        points.append(w.copy())
    return np.asarray(points)


def gradient_ratio_bound(
    task: SyntheticTask, points: np.ndarray, inflation: float = 2.0
) -> float:
    """Safety-inflated bound B on max_i ||grad F_i|| / ||grad F|| over the
    supplied points."""
    worst = 1.0
    for w in points:
        g = task.global_grad(w)
        gn = float(np.linalg.norm(g))
        if gn < 1e-9:
            continue
        top = max(
            float(np.linalg.norm(task.client_grad(i, w))) for i in range(task.n_clients)
        )
        worst = max(worst, top / gn)
    return inflation * worst


def lipschitz_bound(
    task: SyntheticTask, points: np.ndarray, inflation: float = 2.0
) -> float:
    """Safety-inflated bound on max_i ||grad F_i|| over the supplied points
    (the local Lipschitz constant of the client losses)."""
    worst = 0.0
    for w in points:
        for i in range(task.n_clients):
            worst = max(worst, float(np.linalg.norm(task.client_grad(i, w))))
    return inflation * worst


def expected_noise_norms(variance: float, dim: int) -> tuple[float, float]:
    """(E||n||, E||n||^2) of an isotropic Gaussian with per-coordinate
    variance ``variance`` in ``dim`` dimensions (chi-distribution mean)."""
    if variance == 0.0:
        return 0.0, 0.0
    sigma = math.sqrt(variance)
    mean = sigma * math.sqrt(2.0) * math.exp(
        math.lgamma((dim + 1) / 2.0) - math.lgamma(dim / 2.0)
    )
    return mean, dim * variance


@dataclass(frozen=True)
class BoundResult:
    value: float
    contraction: float           # per-round factor 1 + 2 l lambda2
    noise_terms: np.ndarray      # per-round noise scalar before exponentiation
    lambdas: tuple[float, float, float]
    vacuous: bool                # bound carries no information (>= initial gap)
    explosive: bool              # some per-round noise scalar >= 1


def convergence_bound(
    smoothness: float,
    pl_constant: float,
    lipschitz: float,
    grad_ratio: float,
    plan: NoisePlan,
    straggler_counts: np.ndarray,
    n_clients: int,
    dim: int,
    initial_gap: float,
) -> BoundResult:
    """Upper bound on the expected final loss gap given the realized
    straggler counts.

    bound = c^T * initial_gap
          + sum_t (lambda1 * beta * E||n_t|| + lambda0 * E||n_t||^2)^t * c^(T-t)

    with c = 1 + 2 * l * lambda2, lambda0 = rho/2, lambda1 = 1 + rho B,
    lambda2 = -1 + rho B + rho B^2 / 2.  The noise scalar is exponentiated by
    the round index, so per-round noise above 1 makes the bound explode;
    such regimes are flagged, not clipped.
    """
    rho, l, beta, b = smoothness, pl_constant, lipschitz, grad_ratio
    lam0 = rho / 2.0
    lam1 = 1.0 + rho * b
    lam2 = -1.0 + rho * b + rho * b ** 2 / 2.0
    base = 1.0 + 2.0 * l * lam2
    counts = np.asarray(straggler_counts, dtype=int)
    t_total = counts.size
    noise_vals = np.empty(t_total)
    for t in range(t_total):
        var = global_noise_variance(n_clients, int(counts[t]), plan)
        e1, e2 = expected_noise_norms(var, dim)
        noise_vals[t] = lam1 * beta * e1 + lam0 * e2
    # log-space accumulation keeps huge-but-finite bounds representable
    log_terms = []
    if initial_gap > 0 and base > 0:
        log_terms.append(math.log(initial_gap) + t_total * math.log(base))
    for t in range(1, t_total + 1):
        nv = noise_vals[t - 1]
        if nv <= 0.0 or base <= 0.0:
            if nv > 0.0:  # base <= 0: fall back to literal arithmetic
                log_terms.append(math.log(nv) * t)
            continue
        log_terms.append(t * math.log(nv) + (t_total - t) * math.log(base))
    if not log_terms:
        value = 0.0
    else:
        peak = max(log_terms)
        if peak > 700.0:
            value = math.inf
        else:
            value = math.exp(peak) * sum(math.exp(x - peak) for x in log_terms)
    return BoundResult(
        value=value,
        contraction=base,
        noise_terms=noise_vals,
        lambdas=(lam0, lam1, lam2),
        vacuous=bool(value >= max(initial_gap, 1e-300)),
        explosive=bool(np.any(noise_vals >= 1.0)),
    )


# ---------------------------------------------------------------------------
# exports


def trace_to_csv(trace: TrainingTrace, path) -> None:
    """Delimited per-round table: round, realized straggler count, loss gap,
    aggregate noise norm."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("round,stragglers,loss_gap,noise_norm\n")
        for t in range(trace.loss_gaps.size):
            fh.write(
                f"{t},{trace.straggler_counts[t]},"
                f"{trace.loss_gaps[t]:.12g},{trace.noise_norms[t]:.12g}\n"
            )


def training_summary(trace: TrainingTrace) -> dict:
    return {
        "rounds": int(trace.loss_gaps.size),
        "initial_gap": trace.initial_gap,
        "final_gap": trace.final_gap,
        "min_gap": float(trace.loss_gaps.min()),
        "mean_stragglers": float(trace.straggler_counts.mean()),
        "max_stragglers": int(trace.straggler_counts.max()),
        "mean_noise_norm": float(trace.noise_norms.mean()),
        "provenance": dict(trace.provenance),
    }
