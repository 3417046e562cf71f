"""Federated learning simulator for drift-corrected local SGD.

Implements FedAvg, SCAFFOLD/m, FedDyn and AdaBest on numpy. Runs are seeded
end to end, and oracle checks ship alongside the algorithms.
"""

__version__ = "0.1.0"
