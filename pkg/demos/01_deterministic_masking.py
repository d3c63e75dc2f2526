#!/usr/bin/env python3
"""Walk through the masking arithmetic: shared pairwise streams, exact
cancellation at full participation, and what a straggler leaves behind."""

import numpy as np

import pairmask as pm

master = pm.master_seed_from_int(7)
n, dim, t = 5, 6, 0

print("=== shared pairwise streams ===")
r_34 = pm.pairwise_noise(master, 3, 4, t, dim, sigma=1.0)
r_43 = pm.pairwise_noise(master, 4, 3, t, dim, sigma=1.0)
print("clients 3 and 4 derive the same mask, bit for bit:",
      np.array_equal(r_34, r_43))
print("round 0:", np.round(r_34[:4], 4), "...")
print("round 1 is fresh:",
      np.round(pm.pairwise_noise(master, 3, 4, 1, dim, 1.0)[:4], 4), "...")

print()
print("=== masking and full cancellation ===")
plan = pm.NoisePlan(sigma_pair=1.0, sigma_indiv=0.3)
rng = np.random.default_rng(0)
updates = {i: rng.standard_normal(dim) for i in range(n)}
masked = {i: pm.mask_update(updates[i], i, t, plan, n, master) for i in range(n)}
print("one masked upload looks like noise:", np.round(masked[0][:4], 3), "...")
agg = pm.aggregate(masked)
truth = pm.aggregate(updates)
print("aggregate - true average (only the small individual terms remain):")
print(" ", np.round(agg - truth, 4))

print()
print("=== a straggler breaks cancellation ===")
survivors = {i: masked[i] for i in range(n) if i != 2}
agg_s = pm.aggregate(survivors)
truth_s = pm.aggregate({i: updates[i] for i in survivors})
print("residual noise with client 2 missing:", np.round(agg_s - truth_s, 3))
print("closed-form per-coordinate variance of that residual:",
      round(pm.global_noise_variance(n, 1, plan), 4))
print("with no stragglers it would be sigma_indiv^2 / n =",
      round(pm.global_noise_variance(n, 0, plan), 4))
