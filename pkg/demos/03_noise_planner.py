#!/usr/bin/env python3
"""Solve the noise plan and look at how it responds to the threat model."""

import pairmask as pm

threat = pm.ThreatModel(n_clients=50, max_colluders=10, max_stragglers=10)
budget = pm.DPBudget(epsilon=6.0, delta=1e-5, sensitivity=1.0)

print("=== the optimal plan for 50 clients, 10 colluders, 10 stragglers ===")
sol = pm.optimal_variances(threat, budget)
print(f"survivor-weighted straggler count mu = {sol.mu:.4f}")
print(f"variance ratio sigma_pair^2 / sigma_indiv^2 = {sol.variance_ratio:.5f}")
print(f"sigma_pair* = {sol.plan.sigma_pair:.5f}   sigma_indiv* = {sol.plan.sigma_indiv:.5f}")
print(f"expected aggregate noise variance = {sol.objective:.6f}")
print(f"privacy constraint sits on the boundary: residual {sol.constraint_residual:.1e}")
audit = pm.worst_case_audit(threat, sol.plan, budget)
print(f"worst-case audit: min margin {audit.min_margin:.2e} "
      f"({'PASS' if audit.passed else 'FAIL'})")

print()
print("=== how the optimum moves with the threat ===")
print("colluder bound sweep (stragglers fixed at 10):")
print("  cbar   sigma_pair*  sigma_indiv*")
for cbar in (5, 10, 20, 30):
    s = pm.optimal_variances(pm.ThreatModel(50, cbar, 10), budget)
    print(f"  {cbar:4d}   {s.plan.sigma_pair:.5f}      {s.plan.sigma_indiv:.5f}")
print("straggler bound sweep (colluders fixed at 10):")
print("  sbar   sigma_pair*  sigma_indiv*")
for sbar in (0, 10, 20):
    s = pm.optimal_variances(pm.ThreatModel(50, 10, sbar), budget)
    print(f"  {sbar:4d}   {s.plan.sigma_pair:.5f}      {s.plan.sigma_indiv:.5f}")
print("privacy budget sweep:")
print("  eps    sigma_pair*  sigma_indiv*")
for eps in (3.0, 6.0, 9.0):
    s = pm.optimal_variances(threat, pm.DPBudget(eps, 1e-5, 1.0))
    print(f"  {eps:4.1f}   {s.plan.sigma_pair:.5f}      {s.plan.sigma_indiv:.5f}")

print()
print("=== baselines at the same budget ===")
vanilla = pm.baseline_variances(threat, budget, pm.VANILLA_LDP)
smpc = pm.baseline_variances(threat, budget, pm.SMPC_DP_WORSTCASE)
print(f"vanilla per-client sigma: {vanilla.sigma_indiv:.5f}")
print(f"worst-case exact-summation per-client sigma: {smpc.sigma_indiv:.5f}")
dist = threat.dist()
for name, plan in (("ours", sol.plan), ("vanilla", vanilla), ("exact-sum", smpc)):
    agg = pm.expected_aggregate_noise(plan.sigma_pair, plan.sigma_indiv, dist, 50)
    print(f"expected aggregate noise variance, {name:>9}: {agg:.3e}")
