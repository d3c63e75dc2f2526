"""Determinism, symmetry and distribution checks for the noise streams."""

import numpy as np
import pytest

from pairmask import (
    derive_client_seed,
    derive_pair_seed,
    gaussian_block,
    gaussian_vector,
    individual_noise,
    master_seed_from_int,
    pairwise_noise,
)
from pairmask.noise import as_master_seed

MASTER = master_seed_from_int(2024)
OTHER_MASTER = master_seed_from_int(2025)


def test_master_seed_length_enforced():
    with pytest.raises(ValueError):
        as_master_seed(b"short")
    assert as_master_seed(b"\x00" * 32) == b"\x00" * 32


def test_pair_seed_symmetric():
    assert derive_pair_seed(MASTER, 3, 7) == derive_pair_seed(MASTER, 7, 3)


def test_pair_seed_rejects_self_pair():
    with pytest.raises(ValueError):
        derive_pair_seed(MASTER, 4, 4)


def test_pair_seeds_injective_over_all_pairs_n50():
    # exhaustive enumeration: every unordered pair gets its own seed
    n = 50
    seeds = {
        derive_pair_seed(MASTER, i, j) for i in range(n) for j in range(i + 1, n)
    }
    assert len(seeds) == n * (n - 1) // 2


def test_distinct_masters_give_distinct_pair_seeds():
    n = 50
    a = [derive_pair_seed(MASTER, i, j) for i in range(n) for j in range(i + 1, n)]
    b = [derive_pair_seed(OTHER_MASTER, i, j) for i in range(n) for j in range(i + 1, n)]
    assert not set(a) & set(b)


def test_pair_and_client_seed_domains_never_collide():
    pair = {derive_pair_seed(MASTER, i, j) for i in range(20) for j in range(i + 1, 20)}
    client = {derive_client_seed(MASTER, i) for i in range(400)}
    assert not pair & client


def test_zero_sigma_gives_exact_zero_vector():
    assert np.array_equal(pairwise_noise(MASTER, 0, 1, 3, 17, 0.0), np.zeros(17))
    assert np.array_equal(individual_noise(MASTER, 2, 3, 17, 0.0), np.zeros(17))


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        pairwise_noise(MASTER, 0, 1, 0, 4, -1.0)


def test_repeated_call_is_bit_identical():
    seed = derive_pair_seed(MASTER, 1, 2)
    a = gaussian_vector(seed, 9, 32, 1.3)
    b = gaussian_vector(seed, 9, 32, 1.3)
    assert np.array_equal(a, b)


def test_block_equals_round_at_a_time():
    seed = derive_client_seed(MASTER, 5)
    block = gaussian_block(seed, 2, 7, 11, 0.9)
    rounds = np.stack([gaussian_vector(seed, 2 + t, 11, 0.9) for t in range(7)])
    assert np.array_equal(block, rounds)


def test_scalar_stream_moments():
    # 2e5 scalar draws at sigma 1: mean within 3/sqrt(n), variance within 2%
    n = 200_000
    x = gaussian_block(derive_client_seed(MASTER, 0), 0, n, 1, 1.0).ravel()
    assert abs(x.mean()) <= 3.0 / np.sqrt(n)
    assert abs(x.var() - 1.0) <= 0.02


def test_rounds_are_uncorrelated():
    # covariance between two rounds of one stream within 3 SE of zero
    n = 100_000
    seed = derive_pair_seed(MASTER, 0, 1)
    x = gaussian_vector(seed, 0, n, 1.0)
    y = gaussian_vector(seed, 1, n, 1.0)
    cov = float(np.mean(x * y) - x.mean() * y.mean())
    assert abs(cov) <= 3.0 / np.sqrt(n)


def test_clients_are_uncorrelated():
    n = 100_000
    x = gaussian_vector(derive_client_seed(MASTER, 0), 0, n, 1.0)
    y = gaussian_vector(derive_client_seed(MASTER, 1), 0, n, 1.0)
    cov = float(np.mean(x * y) - x.mean() * y.mean())
    assert abs(cov) <= 3.0 / np.sqrt(n)


def test_pair_stream_uncorrelated_with_members_individual_streams():
    n = 100_000
    r = gaussian_vector(derive_pair_seed(MASTER, 0, 1), 0, n, 1.0)
    for client in (0, 1):
        s = gaussian_vector(derive_client_seed(MASTER, client), 0, n, 1.0)
        assert abs(float(np.mean(r * s))) <= 3.0 / np.sqrt(n)


def test_sigma_scales_linearly():
    seed = derive_client_seed(MASTER, 9)
    unit = gaussian_vector(seed, 0, 64, 1.0)
    scaled = gaussian_vector(seed, 0, 64, 2.5)
    np.testing.assert_allclose(scaled, 2.5 * unit, rtol=1e-15)
