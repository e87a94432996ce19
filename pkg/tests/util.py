"""Shared helpers for the test suite."""

import numpy as np


def randomize_flow(flow, scale: float = 0.3, seed: int = 0):
    """Overwrite every flow parameter with small random values.

    Freshly built flows are identity maps; tests that probe nontrivial
    Jacobians or round-trips need the heads to actually do something.
    """
    rng = np.random.default_rng(seed)
    for p in flow.parameters():
        p.values[...] = rng.normal(size=p.values.shape) * scale
    return flow
