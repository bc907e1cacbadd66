import numpy as np

from emdflow.transport import TransportProblem


def random_problem(rng, m, k, cost_lo=0.05, cost_hi=1.95):
    """Balanced random instance with unit total mass."""
    cost = rng.uniform(cost_lo, cost_hi, (m, k))
    supply = rng.uniform(0.2, 1.0, m)
    demand = rng.uniform(0.2, 1.0, k)
    return TransportProblem(cost=cost, supply=supply / supply.sum(),
                            demand=demand / demand.sum())
