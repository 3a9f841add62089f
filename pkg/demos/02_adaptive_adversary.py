"""
An adversary that hides among normal queries
============================================

The attacker replaces a fraction p_n of its queries with ordinary samples.
Detection falls as p_n grows and recovers as the window num_s grows.
"""

from hardness_guard.evaluation import ExperimentPlan, Workbench
from hardness_guard.attacks import AdaptiveMixConfig
from hardness_guard.evaluation import adaptive_sweep

bench = Workbench(ExperimentPlan())
ps = (0.0, 0.25, 0.5, 0.75)
ns = (25, 50, 100, 200)
grid = adaptive_sweep(bench, ps, ns)

print("detection rate (rows num_s, columns p_n)")
print("num_s  " + "  ".join(f"{p:>6.2f}" for p in ps))
for n in ns:
    print(f"{n:>5}  " + "  ".join(f"{grid[(p, n)]:>6.3f}" for p in ps))

# hiding is not free: every useful query costs 1 / (1 - p_n) queries
print("\nquery cost multiplier: " + ", ".join(f"p_n={p}: x{AdaptiveMixConfig(p).cost_multiplier:.2f}" for p in ps))
