import numpy as np
import pytest

import sdesimilarity as ss


@pytest.fixture(scope="session")
def ou_pair_ensemble():
    """dX = -X dt + dW, dY = -Y dt + 2 dW from the origin, shared noise."""
    grid = ss.TimeGrid(1.0, 1000)
    sys_x = ss.linear_system([[-1.0]], [[1.0]])
    sys_y = ss.linear_system([[-1.0]], [[2.0]])
    cfg = ss.EnsembleConfig(sys_x, sys_y, [0.0], [0.0], grid, 4000, 101)
    return ss.simulate_ensemble(cfg)


@pytest.fixture(scope="session")
def output_pair_ensemble():
    """The conjugate output pair: A=2, B=1, C=1, D=0.5 (so C A^-1 B = D)."""
    grid = ss.TimeGrid(2.0, 2000)
    sys_x = ss.linear_system([[2.0]], [[1.0]])
    sys_y = ss.output_system([[1.0]], [[0.5]])
    cfg = ss.EnsembleConfig(sys_x, sys_y, [4.0], [2.0], grid, 500, 7)
    return ss.simulate_ensemble(cfg)


def pair_defect_oracle(a, b, c, d, x0, y0, k_matrix, t, quad_steps=20000):
    """Analytic E||K X_t - Y_t||^2 for a linear shared-noise pair.

    Uses the joint 2n-dimensional moments: E||L Z||^2 = tr(L Cov L^T) +
    ||L mean||^2 with L = (K | -I).
    """
    mean, cov = ss.pair_moments_oracle(a, b, c, d, x0, y0, t, quad_steps)
    k_matrix = np.atleast_2d(np.asarray(k_matrix, float))
    n = k_matrix.shape[0]
    l_mat = np.hstack([k_matrix, -np.eye(n)])
    mu = l_mat @ mean
    return float(np.trace(l_mat @ cov @ l_mat.T) + mu @ mu)
