"""Walk through one insurance-deductible menu.

Shows the rank partition over risk aversion, which deductibles are never
first best, the inequalities that survive elimination, and the risk premia
implied by a few values of absolute risk aversion.
"""

from choicesets.core import BetaSpec, containment_probability, rank_partition, risk_premium
from choicesets.diagnostics import dominated_alternatives
from choicesets.identification import generate_test_sets
from choicesets.simulation import application_cell

cell = application_cell()
labels = [f"${a:g}" for a in cell.feasible.amounts]
print("menu:", ", ".join(f"{d}: ${p / 100:.2f}" for d, p in zip(labels, cell.price_cents)), f"(claim rate {cell.mu})")

part = rank_partition(cell, (0.0, 0.03))
print(f"\n{part.n_intervals} intervals of nu on [0, 0.03] with a fixed preference order")
for lo, hi, order in zip(part.edges[:-1], part.edges[1:], part.rankings):
    print(f"  [{lo:.5f}, {hi:.5f}): " + " > ".join(labels[k] for k in order))

never = [labels[v.alternative] for v in dominated_alternatives(part) if v.dominated]
print("\nnever first best:", ", ".join(never))

for kappa in (2, 3, 4):
    ts = generate_test_sets([part], kappa)
    sets = ["{" + ", ".join(labels[k] for k in sorted(K)) + "}" for K in ts]
    print(f"kappa={kappa}: {len(ts)} test sets  " + " ".join(sets))

prior = BetaSpec(2.0, 6.0, 0.0, 0.03)
print("\nunder nu ~ 0.03 Beta(2, 6), P(top-3 set meets K):")
for K in ({0}, {3, 4}, {1}):
    name = "{" + ", ".join(labels[k] for k in sorted(K)) + "}"
    print(f"  {name:18s} {containment_probability(part, 3, K, prior):.4f}")

print("\nrisk premium for a $1000 loss with probability 0.1:")
for nu in (0.0005, 0.00105, 0.0031, 0.01):
    print(f"  nu={nu:<8g} ${risk_premium(nu, 1000.0, 0.10):8.2f}")
